"""Score-based generative model over spectral map matrices.

The denoiser is an elementwise Gaussian posterior mean plus a learned joint
correction:

    D(X; sigma) = mu + (v / (v + sigma^2)) o (X - mu)
                  + c_out(sigma) F(c_in(sigma) (X - mu), emb(sigma))

where mu and v are trainable per-entry offset and variance (init 0 and
s_data^2, so an untrained model is exactly the classic c_skip(sigma) X
baseline with c_skip = s^2/(sigma^2 + s^2)), c_in = 1/sqrt(sigma^2 + s^2)
and c_out = sigma s / sqrt(sigma^2 + s^2). For data ~ Normal(mu, diag(v))
the F = 0 model is already the exact posterior mean, so the network only
has to learn cross-entry structure. F flattens the map to a row,
concatenates a sinusoidal embedding of sigma, and applies a small residual
MLP. The trainer warm-starts mu and v at the dataset's per-entry moments.

Training minimizes E ||D(x + n_sigma, sigma) - x||^2 with the standard
1/c_out^2 weighting. Sampling integrates the probability-flow ODE
dx/dsigma = (x - D(x; sigma))/sigma with Heun steps on a geometric sigma
grid. The score estimate is (D(X; sigma) - X)/sigma^2.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .autodiff import (
    BoundMLP,
    MLPParams,
    OptimState,
    Tape,
    add,
    append_cols,
    backward,
    constant,
    frobenius_sq,
    gaussian_gain,
    matmul,
    mlp_forward,
    mlp_init,
    optim_step,
    row_scale,
    scale,
    sub,
)
from .errors import (
    EmptyDataset,
    FormatError,
    NonFinite,
    ShapeMismatch,
    SigmaOutOfRange,
    VersionError,
)
from .formats import atomic_write_bytes

SGM_MAGIC = b"SGM1"
SGM_VERSION = 1
VAR_FLOOR = 1e-10


def _leaf_grad(leaf, param):
    g = leaf.grad if leaf.grad is not None else np.zeros_like(leaf.value)
    return g.reshape(param.shape)


@dataclass(frozen=True)
class DenoiserConfig:
    n: int = 30
    widths: tuple = (256, 256, 256)
    emb_dim: int = 32
    residual: bool = True
    s_data: float = 0.25

    def __post_init__(self):
        if self.n < 1:
            raise ShapeMismatch("denoiser map order must be >= 1")
        if not self.widths:
            raise ShapeMismatch("denoiser needs at least one hidden width")
        if self.emb_dim < 2 or self.emb_dim % 2:
            raise ShapeMismatch("sigma embedding dimension must be even and >= 2")


@dataclass(frozen=True)
class NoiseSchedule:
    sigma_min: float = 0.002
    sigma_max: float = 3.0
    p_mean: float = -1.2
    p_std: float = 1.2
    sample_steps: int = 64

    def __post_init__(self):
        if not 0.0 < self.sigma_min < self.sigma_max:
            raise SigmaOutOfRange("need 0 < sigma_min < sigma_max")

    def draw_sigmas(self, rng: np.random.Generator, count: int) -> np.ndarray:
        ln = self.p_mean + self.p_std * rng.standard_normal(count)
        return np.clip(np.exp(ln), self.sigma_min, self.sigma_max)


@dataclass
class MapDataset:
    """A stack of square training maps plus provenance metadata."""

    maps: np.ndarray  # (N, n, n)
    manifest: dict = field(default_factory=dict)

    def __post_init__(self):
        self.maps = np.ascontiguousarray(self.maps, dtype=np.float64)
        if self.maps.ndim != 3 or self.maps.shape[1] != self.maps.shape[2]:
            raise ShapeMismatch(f"dataset wants (N, n, n) maps, got {self.maps.shape}")

    @property
    def n(self) -> int:
        return self.maps.shape[1]

    def __len__(self) -> int:
        return self.maps.shape[0]

    def validate_absolute(self, slack: float = 0.1) -> None:
        """Absolute-map invariants: entries >= 0 and within the unit range."""
        if len(self) == 0:
            raise EmptyDataset("dataset holds no maps")
        if self.maps.min() < 0.0:
            raise ShapeMismatch("absolute-map dataset has negative entries")
        top = float(np.abs(self.maps).max())
        if top > 1.0 + slack:
            raise ShapeMismatch(
                f"map entries reach {top:.3f}, beyond the near-isometric range"
            )


@dataclass
class DenoiserParams:
    config: DenoiserConfig
    schedule: NoiseSchedule
    net: MLPParams
    mu: np.ndarray
    var: np.ndarray

    def copy(self) -> "DenoiserParams":
        return DenoiserParams(self.config, self.schedule, self.net.copy(),
                              self.mu.copy(), self.var.copy())

    def trainable(self) -> list:
        return self.net.flat() + [self.mu, self.var]


def init_denoiser(config: DenoiserConfig, schedule: NoiseSchedule,
                  rng: np.random.Generator) -> DenoiserParams:
    """Fresh denoiser: Gaussian hidden layers, zero-initialized output layer,
    zero offset, and uniform variance s_data^2 (so the untrained model is
    exactly the c_skip(sigma) X baseline)."""
    dims = [config.n * config.n + config.emb_dim, *config.widths, config.n * config.n]
    net = mlp_init(dims, rng, residual=config.residual, zero_last=True)
    shape = (config.n, config.n)
    return DenoiserParams(config, schedule, net, np.zeros(shape),
                          np.full(shape, config.s_data**2))


def sigma_embedding(sigmas: np.ndarray, dim: int) -> np.ndarray:
    """Sinusoidal embedding of ln(sigma)/4, frequencies geomspaced in [1, 100]."""
    sigmas = np.atleast_1d(np.asarray(sigmas, dtype=np.float64))
    u = np.log(sigmas)[:, None] / 4.0
    freqs = np.geomspace(1.0, 100.0, dim // 2)[None, :]
    return np.concatenate([np.sin(u * freqs), np.cos(u * freqs)], axis=1)


def preconditioners(sigmas, s_data: float):
    sig = np.atleast_1d(np.asarray(sigmas, dtype=np.float64))
    denom = np.sqrt(sig**2 + s_data**2)
    c_in = 1.0 / denom
    c_skip = s_data**2 / (sig**2 + s_data**2)
    c_out = sig * s_data / denom
    return c_in, c_skip, c_out


def _check_sigma(schedule: NoiseSchedule, sigmas) -> np.ndarray:
    sig = np.atleast_1d(np.asarray(sigmas, dtype=np.float64))
    if (sig < schedule.sigma_min - 1e-12).any() or (sig > schedule.sigma_max + 1e-12).any():
        raise SigmaOutOfRange(
            f"sigma outside [{schedule.sigma_min}, {schedule.sigma_max}]"
        )
    return sig


def _net_rows(config: DenoiserConfig, Xs: np.ndarray, sigmas: np.ndarray,
              mu: np.ndarray) -> np.ndarray:
    """Input rows for the raw network: [c_in * vec(X - mu), emb(sigma)]."""
    B = Xs.shape[0]
    c_in, _, _ = preconditioners(sigmas, config.s_data)
    flat = (Xs - mu[None]).reshape(B, -1) * c_in[:, None]
    emb = sigma_embedding(sigmas, config.emb_dim)
    return np.concatenate([flat, emb], axis=1)


def denoise_batch(params: DenoiserParams, Xs, sigmas) -> np.ndarray:
    """Apply the denoiser to a batch of maps (B, n, n) at per-map sigmas."""
    Xs = np.ascontiguousarray(Xs, dtype=np.float64)
    if Xs.ndim == 2:
        Xs = Xs[None]
    n = params.config.n
    if Xs.shape[1:] != (n, n):
        raise ShapeMismatch(f"denoiser order is {n}, got maps of shape {Xs.shape[1:]}")
    sig = _check_sigma(params.schedule, sigmas)
    if sig.size == 1 and Xs.shape[0] > 1:
        sig = np.full(Xs.shape[0], sig[0])
    if sig.size != Xs.shape[0]:
        raise ShapeMismatch("need one sigma per map")
    _, _, c_out = preconditioners(sig, params.config.s_data)
    raw = mlp_forward(params.net, _net_rows(params.config, Xs, sig, params.mu))
    gain = params.var[None] / (params.var[None] + (sig**2)[:, None, None])
    out = (
        params.mu[None]
        + gain * (Xs - params.mu[None])
        + c_out[:, None, None] * raw.reshape(Xs.shape)
    )
    if not np.isfinite(out).all():
        raise NonFinite("denoiser produced non-finite values")
    return out


def denoise(params: DenoiserParams, X, sigma: float) -> np.ndarray:
    """Denoise a single map at noise level sigma."""
    return denoise_batch(params, np.asarray(X)[None], float(sigma))[0]


def _denoise_fn(denoiser):
    """Accept DenoiserParams or a raw callable (X_batch, sigma) -> batch."""
    if isinstance(denoiser, DenoiserParams):
        return lambda Xs, sig: denoise_batch(denoiser, Xs, sig)
    if callable(denoiser):
        return denoiser
    raise ShapeMismatch(f"not a denoiser: {type(denoiser)!r}")


def score(denoiser, X, sigma: float) -> np.ndarray:
    """Score estimate (D(X; sigma) - X) / sigma^2 at the given noise level."""
    X = np.ascontiguousarray(X, dtype=np.float64)
    fn = _denoise_fn(denoiser)
    return (fn(X[None], float(sigma))[0] - X) / float(sigma) ** 2


def denoiser_loss(params: DenoiserParams, x: np.ndarray, sigmas: np.ndarray,
                  noise: np.ndarray):
    """Tape-level training objective for one batch.

    Returns (loss tensor, grads callable); the callable yields gradients in
    ``params.trainable()`` order after backward() has run on the loss.
    """
    B = x.shape[0]
    config = params.config
    x_sig = (x + noise).reshape(B, -1)
    c_in, _, c_out = preconditioners(sigmas, config.s_data)
    emb = sigma_embedding(sigmas, config.emb_dim)
    tape = Tape()
    mu = tape.leaf(params.mu.reshape(1, -1))
    var = tape.leaf(params.var.reshape(1, -1))
    bound = BoundMLP(tape, params.net)
    diff = sub(constant(x_sig), mu)
    raw = bound(append_cols(row_scale(diff, c_in), emb))
    denoised = add(
        add(matmul(constant(np.ones((B, 1))), mu), gaussian_gain(diff, var, sigmas)),
        row_scale(raw, c_out),
    )
    resid = row_scale(sub(denoised, constant(x.reshape(B, -1))), 1.0 / c_out)
    loss = scale(frobenius_sq(resid), 1.0 / B)

    def grads():
        return bound.grads() + [_leaf_grad(mu, params.mu),
                                _leaf_grad(var, params.var)]

    return loss, grads


def train_denoiser(dataset: MapDataset, config: DenoiserConfig | None = None,
                   schedule: NoiseSchedule | None = None, epochs: int = 100,
                   seed: int = 0, batch_size: int = 128, lr: float = 1e-3):
    """Train the denoiser; returns (params, per-epoch mean losses).

    Minibatch Adam with cosine learning-rate decay; sigmas are drawn
    log-normally per sample and clamped to the schedule range. Fully
    deterministic given the seed.
    """
    if len(dataset) == 0:
        raise EmptyDataset("cannot train on an empty dataset")
    config = config or DenoiserConfig(n=dataset.n)
    schedule = schedule or NoiseSchedule()
    if dataset.n != config.n:
        raise ShapeMismatch(f"dataset maps are {dataset.n}, config wants {config.n}")
    ss = np.random.SeedSequence(seed)
    rng_init, rng_order, rng_noise = (np.random.default_rng(s) for s in ss.spawn(3))
    params = init_denoiser(config, schedule, rng_init)
    maps = dataset.maps
    # warm-start the elementwise model at the data moments
    params.mu[:] = maps.mean(axis=0)
    params.var[:] = np.maximum(maps.var(axis=0), VAR_FLOOR)
    N = len(dataset)
    opt = OptimState.for_params(params.trainable(), lr)
    batches = max(1, math.ceil(N / batch_size))
    total_steps = epochs * batches
    losses = []
    step = 0
    for _ in range(epochs):
        order = rng_order.permutation(N)
        epoch_losses = []
        for bi in range(batches):
            idx = order[bi * batch_size : (bi + 1) * batch_size]
            x = maps[idx]
            B = x.shape[0]
            sig = schedule.draw_sigmas(rng_noise, B)
            noise = rng_noise.standard_normal(x.shape) * sig[:, None, None]
            loss, grads = denoiser_loss(params, x, sig, noise)
            value = loss.item()
            if not np.isfinite(value):
                raise NonFinite(f"training loss diverged at step {step}")
            backward(loss)
            lr_t = lr * 0.5 * (1.0 + math.cos(math.pi * step / max(1, total_steps)))
            optim_step(opt, params.trainable(), grads(), lr=lr_t)
            np.maximum(params.var, VAR_FLOOR, out=params.var)
            epoch_losses.append(value)
            step += 1
        losses.append(float(np.mean(epoch_losses)))
    return params, losses


def sample(params: DenoiserParams, schedule: NoiseSchedule | None = None,
           steps: int | None = None, seed: int = 0, count: int = 1,
           return_trajectory: bool = False):
    """Draw maps via Heun integration of the probability-flow ODE.

    Starts at X ~ Normal(0, sigma_max^2 I) and walks a geometric sigma grid
    down to sigma_min, then takes the final Euler step to 0. Returns (n, n)
    for count == 1, else (count, n, n); with ``return_trajectory`` also the
    list of intermediate states.
    """
    schedule = schedule or params.schedule
    steps = steps or schedule.sample_steps
    if steps < 2:
        raise ShapeMismatch("sampler needs at least 2 steps")
    n = params.config.n
    rng = np.random.default_rng(seed)
    grid = np.append(np.geomspace(schedule.sigma_max, schedule.sigma_min, steps), 0.0)
    x = rng.standard_normal((count, n, n)) * schedule.sigma_max
    trajectory = [x.copy()] if return_trajectory else None
    for i in range(len(grid) - 1):
        s_cur, s_next = grid[i], grid[i + 1]
        d = (x - denoise_batch(params, x, s_cur)) / s_cur
        x_next = x + (s_next - s_cur) * d
        if s_next > 0.0:
            d2 = (x_next - denoise_batch(params, x_next, s_next)) / s_next
            x = x + (s_next - s_cur) * 0.5 * (d + d2)
        else:
            x = x_next
        if not np.isfinite(x).all():
            raise NonFinite(f"sampler diverged at sigma {s_cur:.4g}")
        if return_trajectory:
            trajectory.append(x.copy())
    out = x[0] if count == 1 else x
    if return_trajectory:
        return out, trajectory
    return out


# -- checkpoints ----------------------------------------------------------------

def save_checkpoint(params: DenoiserParams, path) -> None:
    """Serialize config, schedule, and named parameter arrays (bit-exact)."""
    cfg, sch = params.config, params.schedule
    blob = [SGM_MAGIC, struct.pack("<I", SGM_VERSION)]
    blob.append(struct.pack("<II", cfg.n, len(cfg.widths)))
    blob.append(struct.pack(f"<{len(cfg.widths)}I", *cfg.widths))
    blob.append(struct.pack("<II", cfg.emb_dim, int(cfg.residual)))
    blob.append(struct.pack("<d", cfg.s_data))
    blob.append(struct.pack("<dddd", sch.sigma_min, sch.sigma_max, sch.p_mean, sch.p_std))
    blob.append(struct.pack("<I", sch.sample_steps))
    act = params.net.activation.encode()
    blob.append(struct.pack("<I", len(act)) + act)
    named = [("mu", params.mu), ("var", params.var)]
    for li, (w, b) in enumerate(zip(params.net.weights, params.net.biases)):
        named.append((f"w{li}", w))
        named.append((f"b{li}", b))
    blob.append(struct.pack("<I", len(named)))
    for name, arr in named:
        nb = name.encode()
        blob.append(struct.pack("<I", len(nb)) + nb)
        blob.append(struct.pack("<II", arr.shape[0], arr.shape[1]))
        blob.append(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    atomic_write_bytes(path, b"".join(blob))


def load_checkpoint(path) -> DenoiserParams:
    buf = Path(path).read_bytes()
    off = 0

    def take(size, what):
        nonlocal off
        if off + size > len(buf):
            raise FormatError(f"{path}: truncated while reading {what}")
        out = buf[off : off + size]
        off += size
        return out

    if take(4, "magic") != SGM_MAGIC:
        raise FormatError(f"{path}: bad SGM1 magic")
    (version,) = struct.unpack("<I", take(4, "version"))
    if version != SGM_VERSION:
        raise VersionError(f"{path}: unsupported checkpoint version {version}")
    n, nw = struct.unpack("<II", take(8, "sizes"))
    widths = struct.unpack(f"<{nw}I", take(4 * nw, "widths"))
    emb_dim, residual = struct.unpack("<II", take(8, "net flags"))
    (s_data,) = struct.unpack("<d", take(8, "s_data"))
    smin, smax, pmean, pstd = struct.unpack("<dddd", take(32, "schedule"))
    (sample_steps,) = struct.unpack("<I", take(4, "sample steps"))
    (act_len,) = struct.unpack("<I", take(4, "activation"))
    activation = take(act_len, "activation").decode()
    (n_params,) = struct.unpack("<I", take(4, "param count"))
    arrays = {}
    order = []
    for _ in range(n_params):
        (name_len,) = struct.unpack("<I", take(4, "param name"))
        name = take(name_len, "param name").decode()
        rows, cols = struct.unpack("<II", take(8, "param dims"))
        data = np.frombuffer(take(8 * rows * cols, name), dtype="<f8")
        arrays[name] = data.reshape(rows, cols).copy()
        order.append(name)
    config = DenoiserConfig(n=n, widths=tuple(widths), emb_dim=emb_dim,
                            residual=bool(residual), s_data=s_data)
    schedule = NoiseSchedule(sigma_min=smin, sigma_max=smax, p_mean=pmean,
                             p_std=pstd, sample_steps=sample_steps)
    n_layers = (len(order) - 2) // 2
    try:
        mu = arrays["mu"]
        var = arrays["var"]
        weights = [arrays[f"w{i}"] for i in range(n_layers)]
        biases = [arrays[f"b{i}"] for i in range(n_layers)]
    except KeyError as exc:
        raise FormatError(f"{path}: missing parameter array {exc}") from exc
    net = MLPParams(weights, biases, activation, bool(residual))
    return DenoiserParams(config, schedule, net, mu, var)
