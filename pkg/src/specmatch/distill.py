"""Mask distillation, score-distillation gradients, and zero-shot matching.

The matching loop optimizes a per-pair feature MLP so that the functional
map it induces is simultaneously close to its own properized refinement and
scores well under a denoiser trained on absolute ground-truth maps:

1. descriptors F_i from the feature net on XYZ + heat-kernel-signature input,
2. raw map C_raw from the unregularized differentiable solve,
3. a nonnegative mask distilled from the denoiser at sigma_mask,
       M^2 = E_{n > 0}[ (|C|_s - D(|C|_s; s)) / (2 s^2 |C|_s) ],
   with elementwise half-normal noise so the denominator stays positive,
4. mask-regularized solve + spectral upsampling -> proper map C_proper,
5. loss ||C_raw - C_proper||^2 plus a score-distillation term whose gradient
   (x_s - D(x_s; s))/s is injected at |C_raw| as a constant cotangent,
6. Adam step on the feature weights only; nothing backpropagates through the
   denoiser, the mask, or the proper map.

The final map is re-solved with the latest mask, refined by Zoomout to the
evaluation order, and converted to a point map by nearest neighbors.
"""

from __future__ import annotations

import math
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import MLPParams, OptimState, Tape, optim_step
from .errors import KTooLarge, NonFinite, ShapeMismatch, SigmaOutOfRange
from .fmap import (
    fmap_from_p2p,
    geodesic_error,
    laplacian_mask,
    p2p_from_fmap,
    resolvent_mask,
    slanted_mask,
    solve_fmap,
    zoomout,
)
from .mesh import TriangleMesh, cotan_stiffness, vertex_areas
from .sgm import DenoiserParams, _denoise_fn
from .spectral import eigenbasis, heat_kernel_signature

ABLATION_MODES = (
    "vanilla-sds",
    "mask-zoomout",
    "proper",
    "mask-sds",
    "mask-proper",
    "full",
    "full-axiomatic",
)


@dataclass(frozen=True)
class FeatureNetConfig:
    hidden: tuple = (256, 256, 256, 256)
    out_dim: int = 128
    hks_count: int = 16
    init_std: float = 0.02
    # fixed random Fourier lift applied to the raw per-vertex inputs before
    # the trainable stack; without it a small-init MLP is near-linear, its
    # descriptors have rank <= in_dim < k, and the unregularized map solve
    # degenerates. lift_dim = 0 disables the lift.
    lift_dim: int = 64
    lift_scale: float = 8.0

    @property
    def in_dim(self) -> int:
        return 3 + self.hks_count


@dataclass
class FeatureNet:
    """Per-pair feature extractor: fixed sinusoidal lift + trainable MLP."""

    net: MLPParams
    omega: np.ndarray | None = None
    phase: np.ndarray | None = None

    def embed(self, inputs: np.ndarray) -> np.ndarray:
        if self.omega is None:
            return inputs
        return np.concatenate(
            [inputs, np.sin(inputs @ self.omega + self.phase)], axis=1
        )

    def forward(self, inputs: np.ndarray) -> np.ndarray:
        return ad.mlp_forward(self.net, self.embed(inputs))


@dataclass(frozen=True)
class ZeroShotConfig:
    k: int = 30
    sigma_mask: float = 1.0
    mask_samples: int = 100
    alpha: float = 0.1          # mask weight in the optimized solve
    ini_alpha: float = 1.0      # mask weight for init-only (Ini + Zoomout) runs
    steps: int = 1000
    lr: float = 3e-3
    lr_decay: bool = True       # cosine schedule over the run
    anchor_beta: float = 0.9    # EMA smoothing of the proper-map target
    sds_weight: float = 1.0
    sds_sigma_min: float = 0.05
    sds_sigma_max: float = 1.5
    mask_refresh: int = 50
    zoomout_step: int = 1
    zoomout_inloop: int | None = None   # default ceil(4k/3)
    eval_zoomout: int = 150             # clamped to the basis order
    basis_order: int = 150
    axiomatic_weight: float = 0.1
    normalize_descriptors: bool = True
    feature: FeatureNetConfig = field(default_factory=FeatureNetConfig)

    def __post_init__(self):
        if min(self.k, self.steps, self.mask_samples, self.mask_refresh) < 1:
            raise ShapeMismatch("zero-shot config values must be positive")
        if self.feature.out_dim < self.k:
            raise ShapeMismatch("feature dimension must be >= map order k")

    @property
    def inloop_target(self) -> int:
        return self.zoomout_inloop or math.ceil(4 * self.k / 3)


@dataclass
class MatchResult:
    mode: str
    fmap: np.ndarray
    pmap: np.ndarray
    mask: np.ndarray | None
    loss_proper: list
    loss_sds: list
    loss_total: list
    wall_clock: float
    geodesic: dict | None
    seed: int
    final_k: int
    config: dict

    def to_dict(self) -> dict:
        return {
            "mode": self.mode,
            "seed": self.seed,
            "final_k": self.final_k,
            "steps": len(self.loss_total),
            "losses": {
                "proper": self.loss_proper,
                "sds": self.loss_sds,
                "total": self.loss_total,
            },
            "geodesic": self.geodesic,
            "config": self.config,
            "timing": {"wall_s": self.wall_clock},
        }


# -- distillation primitives ---------------------------------------------------

def distill_mask(denoiser, C_init, sigma: float, N: int, seed=0) -> np.ndarray:
    """Distill a nonnegative regularization mask from the denoiser.

    Draws N elementwise half-normal perturbations n = |Normal(0, sigma^2)|,
    forms |C|_s = |C_init| + n, averages (|C|_s - D(|C|_s; s))/(2 s^2 |C|_s)
    over the draws, clamps negative averages to zero, and returns the
    elementwise square root.
    """
    C_init = np.ascontiguousarray(C_init, dtype=np.float64)
    if C_init.ndim != 2 or C_init.shape[0] != C_init.shape[1]:
        raise ShapeMismatch(f"mask distillation wants a square map, got {C_init.shape}")
    if N < 1:
        raise ShapeMismatch("need at least one noise draw")
    if sigma <= 0.0:
        raise SigmaOutOfRange(f"sigma must be positive, got {sigma}")
    if isinstance(denoiser, DenoiserParams):
        if denoiser.config.n != C_init.shape[0]:
            raise ShapeMismatch(
                f"map order {C_init.shape[0]} != denoiser order {denoiser.config.n}"
            )
        sched = denoiser.schedule
        if not sched.sigma_min <= sigma <= sched.sigma_max:
            raise SigmaOutOfRange(
                f"sigma {sigma} outside schedule [{sched.sigma_min}, {sched.sigma_max}]"
            )
    fn = _denoise_fn(denoiser)
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    base = np.abs(C_init)[None, :, :]
    noise = np.abs(rng.standard_normal((N, *C_init.shape)) * sigma)
    noisy = base + noise
    den = fn(noisy, float(sigma))
    ratio = (noisy - den) / (2.0 * sigma**2 * noisy)
    msq = np.clip(ratio.mean(axis=0), 0.0, None)
    return np.sqrt(msq)


def _sds_at(denoiser, X, sigma_range, rng):
    lo, hi = sigma_range
    sigma = float(np.exp(rng.uniform(np.log(lo), np.log(hi))))
    noise = rng.standard_normal(X.shape) * sigma
    fn = _denoise_fn(denoiser)
    x_sig = X + noise
    return (x_sig - fn(x_sig[None], sigma)[0]) / sigma


def sds_gradient(denoiser, C_abs, sigma_range=(0.05, 1.5), seed=0) -> np.ndarray:
    """Single-draw score-distillation gradient (x_s - D(x_s; s))/s at |C|.

    sigma is drawn log-uniformly from ``sigma_range``; the result is used as
    a constant cotangent, never differentiated through the denoiser.
    """
    C_abs = np.ascontiguousarray(C_abs, dtype=np.float64)
    if (C_abs < 0.0).any():
        raise ShapeMismatch("score distillation expects a nonnegative |C| input")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    return _sds_at(denoiser, C_abs, sigma_range, rng)


def proper_loss(C_raw: ad.Tensor, C_proper) -> ad.Tensor:
    """||C_raw - C_proper||_F^2 with the proper map held constant."""
    target = C_proper.value if isinstance(C_proper, ad.Tensor) else C_proper
    return ad.frobenius_sq(ad.sub(C_raw, ad.constant(np.asarray(target))))


# -- feature extraction ----------------------------------------------------------

def feature_inputs(mesh: TriangleMesh, basis, S, hks_count: int = 16) -> np.ndarray:
    """Per-vertex net input: centered area-normalized XYZ + HKS columns."""
    total = float(S.sum())
    centroid = (S[:, None] * mesh.vertices).sum(axis=0) / total
    xyz = (mesh.vertices - centroid) / np.sqrt(total)
    hks = heat_kernel_signature(basis, S, count=hks_count)
    return np.concatenate([xyz, hks], axis=1)


def init_feature_net(cfg: FeatureNetConfig, rng: np.random.Generator) -> FeatureNet:
    omega = phase = None
    in_dim = cfg.in_dim
    if cfg.lift_dim > 0:
        omega = rng.normal(0.0, cfg.lift_scale, (cfg.in_dim, cfg.lift_dim))
        phase = rng.uniform(0.0, 2.0 * np.pi, cfg.lift_dim)
        in_dim += cfg.lift_dim
    dims = [in_dim, *cfg.hidden, cfg.out_dim]
    net = ad.mlp_init(dims, rng, weight_std=cfg.init_std)
    return FeatureNet(net, omega, phase)


def feature_forward(theta, mesh: TriangleMesh, basis, S,
                    hks_count: int = 16) -> np.ndarray:
    """Per-vertex descriptors f_theta(mesh): plain forward, no gradients."""
    inputs = feature_inputs(mesh, basis, S, hks_count)
    if isinstance(theta, FeatureNet):
        return theta.forward(inputs)
    return ad.mlp_forward(theta, inputs)


def _normalize_cols_np(A: np.ndarray, eps: float = 1e-30) -> np.ndarray:
    sq = np.einsum("ij,ij->j", A, A)
    return A / np.sqrt(sq + eps)[None, :]


def _mask_base(C_raw: np.ndarray, denoiser) -> np.ndarray:
    """Rescaled copy of the raw map used as the distillation base point.

    Raw maps from weak descriptors can sit far from the scale the denoiser
    was trained at (huge early in optimization, shrunken after the proper
    loss bites). Rescaling a map keeps its correspondence (the
    lambda-scaling property), so evaluate the model at its native scale:
    match the Frobenius norm of the model's own mean map. Callable
    denoisers are left untouched.
    """
    if not isinstance(denoiser, DenoiserParams):
        return C_raw
    cap = float(np.linalg.norm(denoiser.mu))
    nrm = float(np.linalg.norm(C_raw))
    if cap <= 0.0 or nrm <= 1e-12:
        return C_raw
    return C_raw * (cap / nrm)


# -- the zero-shot loop -----------------------------------------------------------

class ShapeContext:
    """Everything fixed per shape: basis, mass, net inputs, projector.

    Built on demand by the matchers; pass precomputed instances to amortize
    the eigensolve across repeated runs on the same meshes (or to inject a
    modified basis, e.g. with deliberately flipped eigenfunction signs).
    """

    def __init__(self, mesh: TriangleMesh, cfg: ZeroShotConfig, order: int,
                 basis=None):
        self.mesh = mesh
        self.S = vertex_areas(mesh)
        self.basis = basis if basis is not None else eigenbasis(
            cotan_stiffness(mesh), self.S, order
        )
        self.inputs = feature_inputs(mesh, self.basis, self.S, cfg.feature.hks_count)
        self.proj_k = (self.basis.phi[:, :cfg.k] * self.S[:, None]).T  # (k, n)


def _pair_contexts(mesh1, mesh2, cfg, contexts=None):
    order = min(cfg.basis_order, mesh1.n_vertices - 1, mesh2.n_vertices - 1)
    if order < cfg.k:
        raise KTooLarge(
            f"basis order {order} below map order {cfg.k}; meshes too small"
        )
    if contexts is not None:
        ctx1, ctx2 = contexts
        order = min(ctx1.basis.k, ctx2.basis.k)
        if order < cfg.k:
            raise KTooLarge(f"supplied contexts hold order {order} < k={cfg.k}")
        return ctx1, ctx2, order
    return ShapeContext(mesh1, cfg, order), ShapeContext(mesh2, cfg, order), order


def _coeffs(ctx: "ShapeContext", theta: FeatureNet, cfg: ZeroShotConfig) -> np.ndarray:
    A = ctx.proj_k @ theta.forward(ctx.inputs)
    return _normalize_cols_np(A) if cfg.normalize_descriptors else A


def _geo_summary(pm, gt, mesh2) -> dict:
    errs, mean = geodesic_error(pm, gt, mesh2)
    return {
        "mean": mean,
        "mean_x100": 100.0 * mean,
        "median": float(np.median(errs)),
        "n": int(errs.size),
    }


_MODE_FLAGS = {
    # mode: (use_mask, use_proper, sds) with sds in {None, "abs", "signed"}
    "vanilla-sds": (False, False, "signed"),
    "proper": (False, True, None),
    "mask-sds": (True, False, "abs"),
    "mask-proper": (True, True, None),
    "full": (True, True, "abs"),
    "full-axiomatic": (True, True, "abs"),
}


def zero_shot_match(mesh1: TriangleMesh, mesh2: TriangleMesh, denoiser,
                    cfg: ZeroShotConfig | None = None, seed: int = 0,
                    gt=None, mode: str = "full", contexts=None) -> MatchResult:
    """Optimize per-pair descriptors and return the matched correspondence.

    ``mode`` selects the ablation variant; "mask-zoomout" skips optimization
    entirely (random-init descriptors + distilled mask + Zoomout). ``gt`` is
    an optional ground-truth point map for the geodesic-error summary.
    """
    cfg = cfg or ZeroShotConfig()
    if mode not in ABLATION_MODES:
        raise ShapeMismatch(f"unknown mode {mode!r}; pick from {ABLATION_MODES}")
    t0 = time.perf_counter()
    if mode == "mask-zoomout":
        result = ini_zoomout_match(mesh1, mesh2, "distilled", cfg, seed,
                                   denoiser=denoiser, gt=gt, contexts=contexts)
        result.mode = "mask-zoomout"
        return result

    use_mask, use_proper, sds_kind = _MODE_FLAGS[mode]
    if (use_mask or sds_kind) and isinstance(denoiser, DenoiserParams):
        if denoiser.config.n != cfg.k:
            raise ShapeMismatch(
                f"map order k={cfg.k} != denoiser order {denoiser.config.n}"
            )
    ctx1, ctx2, order = _pair_contexts(mesh1, mesh2, cfg, contexts)
    inloop = min(cfg.inloop_target, order)
    ss = np.random.SeedSequence((seed, 314159))
    rng_init, rng_mask, rng_sds = (np.random.default_rng(s) for s in ss.spawn(3))
    theta = init_feature_net(cfg.feature, rng_init)
    in1 = theta.embed(ctx1.inputs)
    in2 = theta.embed(ctx2.inputs)
    opt = OptimState.for_params(theta.net.flat(), cfg.lr)

    lam1n = ctx1.basis.lam[:cfg.k]
    lam2n = ctx2.basis.lam[:cfg.k]
    l1 = lam1n / max(lam1n[-1], 1e-30)
    l2 = lam2n / max(lam2n[-1], 1e-30)
    eye_k = np.eye(cfg.k)

    mask = None
    anchor = None
    tr_proper, tr_sds, tr_total = [], [], []
    for step in range(cfg.steps):
        try:
            tape = Tape()
            net = ad.BoundMLP(tape, theta.net)
            F1 = net(ad.constant(in1))
            F2 = net(ad.constant(in2))
            A1 = ad.matmul(ad.constant(ctx1.proj_k), F1)
            A2 = ad.matmul(ad.constant(ctx2.proj_k), F2)
            if cfg.normalize_descriptors:
                A1 = ad.normalize_cols(A1)
                A2 = ad.normalize_cols(A2)
            C_raw_t = ad.masked_lstsq(A1, A2, 0.0, None)
            C_raw = C_raw_t.value

            if use_mask and (mask is None or step % cfg.mask_refresh == 0):
                mask = distill_mask(denoiser, _mask_base(C_raw, denoiser),
                                    cfg.sigma_mask, cfg.mask_samples, rng_mask)

            terms = []
            lp_val = ls_val = 0.0
            if use_proper:
                if use_mask:
                    C_base = solve_fmap(A1.value, A2.value, cfg.alpha, mask)
                else:
                    C_base = C_raw
                C_prop = zoomout(C_base, ctx1.basis, ctx2.basis, ctx2.S,
                                 inloop, cfg.zoomout_step)[:cfg.k, :cfg.k]
                if anchor is None or cfg.anchor_beta <= 0.0:
                    anchor = C_prop
                else:
                    anchor = cfg.anchor_beta * anchor + (1.0 - cfg.anchor_beta) * C_prop
                lp = proper_loss(C_raw_t, anchor)
                lp_val = lp.item()
                terms.append(lp)
            if sds_kind is not None:
                if sds_kind == "signed":
                    g = _sds_at(denoiser, C_raw,
                                (cfg.sds_sigma_min, cfg.sds_sigma_max), rng_sds)
                    inj = ad.mul(ad.constant(cfg.sds_weight * g), C_raw_t)
                else:
                    g = _sds_at(denoiser, np.abs(C_raw),
                                (cfg.sds_sigma_min, cfg.sds_sigma_max), rng_sds)
                    inj = ad.mul(ad.constant(cfg.sds_weight * g), ad.absval(C_raw_t))
                ls = ad.sum_all(inj)
                ls_val = ls.item()
                terms.append(ls)
            if mode == "full-axiomatic" and cfg.axiomatic_weight > 0.0:
                C21_t = ad.masked_lstsq(A2, A1, 0.0, None)
                ax = ad.add(
                    ad.frobenius_sq(ad.sub(ad.matmul(C_raw_t, ad.transpose(C_raw_t)),
                                           ad.constant(eye_k))),
                    ad.frobenius_sq(ad.sub(ad.matmul(C_raw_t, C21_t),
                                           ad.constant(eye_k))),
                )
                commute = ad.frobenius_sq(ad.sub(
                    ad.mul(C_raw_t, ad.constant(np.broadcast_to(l1[None, :], C_raw.shape).copy())),
                    ad.mul(C_raw_t, ad.constant(np.broadcast_to(l2[:, None], C_raw.shape).copy())),
                ))
                terms.append(ad.scale(ad.add(ax, commute), cfg.axiomatic_weight))

            loss = terms[0]
            for t in terms[1:]:
                loss = ad.add(loss, t)
            total_val = loss.item()
            ad.backward(loss)
            lr_t = cfg.lr
            if cfg.lr_decay:
                lr_t *= 0.5 * (1.0 + math.cos(math.pi * step / cfg.steps))
            optim_step(opt, theta.net.flat(), net.grads(), lr=lr_t)
        except NonFinite as exc:
            raise NonFinite(f"zero-shot step {step}: {exc}") from exc
        tr_proper.append(lp_val)
        tr_sds.append(ls_val)
        tr_total.append(total_val)

    # final extraction with the optimized descriptors
    A1f = _coeffs(ctx1, theta, cfg)
    A2f = _coeffs(ctx2, theta, cfg)
    C_raw_f = solve_fmap(A1f, A2f, 0.0, None)
    if use_mask:
        mask = distill_mask(denoiser, _mask_base(C_raw_f, denoiser),
                            cfg.sigma_mask, cfg.mask_samples, rng_mask)
        C_fin = solve_fmap(A1f, A2f, cfg.alpha, mask)
    else:
        C_fin = C_raw_f
    eval_k = min(cfg.eval_zoomout, order)
    C_eval = zoomout(C_fin, ctx1.basis, ctx2.basis, ctx2.S,
                     max(eval_k, cfg.k), cfg.zoomout_step)
    pm = p2p_from_fmap(C_eval, ctx1.basis, ctx2.basis)
    geo = _geo_summary(pm, gt, mesh2) if gt is not None else None
    return MatchResult(
        mode=mode, fmap=C_eval, pmap=pm, mask=mask,
        loss_proper=tr_proper, loss_sds=tr_sds, loss_total=tr_total,
        wall_clock=time.perf_counter() - t0, geodesic=geo, seed=seed,
        final_k=C_eval.shape[0], config=asdict(cfg),
    )


MASK_KINDS = ("laplacian", "resolvent", "slanted", "distilled", "none")


def ini_zoomout_match(mesh1: TriangleMesh, mesh2: TriangleMesh, mask_kind: str,
                      cfg: ZeroShotConfig | None = None, seed: int = 0,
                      denoiser=None, gt=None, contexts=None) -> MatchResult:
    """Init-only baseline: random-weight descriptors, one masked solve, Zoomout.

    ``mask_kind`` picks the regularizer ("none" solves with alpha = 0). The
    distilled mask needs ``denoiser``.
    """
    cfg = cfg or ZeroShotConfig()
    if mask_kind not in MASK_KINDS:
        raise ShapeMismatch(f"unknown mask kind {mask_kind!r}")
    t0 = time.perf_counter()
    ctx1, ctx2, order = _pair_contexts(mesh1, mesh2, cfg, contexts)
    ss = np.random.SeedSequence((seed, 314159))
    rng_init, rng_mask, _ = (np.random.default_rng(s) for s in ss.spawn(3))
    theta = init_feature_net(cfg.feature, rng_init)
    A1 = _coeffs(ctx1, theta, cfg)
    A2 = _coeffs(ctx2, theta, cfg)
    lam1 = ctx1.basis.lam[:cfg.k]
    lam2 = ctx2.basis.lam[:cfg.k]
    mask = None
    if mask_kind == "laplacian":
        mask = laplacian_mask(lam1, lam2)
    elif mask_kind == "resolvent":
        mask = resolvent_mask(lam1, lam2)
    elif mask_kind == "slanted":
        mask = slanted_mask(lam1, lam2)
    elif mask_kind == "distilled":
        if denoiser is None:
            raise ShapeMismatch("distilled mask needs a trained denoiser")
        C_raw = solve_fmap(A1, A2, 0.0, None)
        mask = distill_mask(denoiser, _mask_base(C_raw, denoiser),
                            cfg.sigma_mask, cfg.mask_samples, rng_mask)
    if mask is None:
        C0 = solve_fmap(A1, A2, 0.0, None)
    else:
        C0 = solve_fmap(A1, A2, cfg.ini_alpha, mask)
    eval_k = min(cfg.eval_zoomout, order)
    C_eval = zoomout(C0, ctx1.basis, ctx2.basis, ctx2.S,
                     max(eval_k, cfg.k), cfg.zoomout_step)
    pm = p2p_from_fmap(C_eval, ctx1.basis, ctx2.basis)
    geo = _geo_summary(pm, gt, mesh2) if gt is not None else None
    return MatchResult(
        mode=f"ini-zoomout-{mask_kind}", fmap=C_eval, pmap=pm, mask=mask,
        loss_proper=[], loss_sds=[], loss_total=[],
        wall_clock=time.perf_counter() - t0, geodesic=geo, seed=seed,
        final_k=C_eval.shape[0], config=asdict(cfg),
    )
