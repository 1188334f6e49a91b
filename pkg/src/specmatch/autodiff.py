"""Reverse-mode automatic differentiation over dense float64 matrices.

A deliberately small tape engine: values are 2-D arrays (row vectors where
broadcasting is needed), the tape records ops in execution order, and
backward replays it once in reverse with deterministic accumulation. Only
what the pipelines need is implemented: matmul, add (with row-vector
broadcast), scale, elementwise ops, Frobenius reductions, a symmetric
positive-definite solve, the masked row-wise map solve, and detach. Every op
checks its output for NaN/inf and raises :class:`NonFinite` on the spot.

Distinct tapes never interact; parameters live as plain numpy arrays and are
bound to a fresh tape each optimization step.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import LinAlgError, cho_factor, cho_solve
from scipy.special import erf

from .errors import NonFinite, ShapeMismatch, SingularSystem
from .fmap import solve_fmap_full

_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


class Tape:
    """Ordered record of executed ops; backward visits each node once."""

    def __init__(self):
        self.nodes: list[Tensor] = []

    def leaf(self, value) -> "Tensor":
        t = Tensor(value, requires_grad=True, tape=self)
        self.nodes.append(t)
        return t


class Tensor:
    """A 2-D float64 value with an optional gradient slot."""

    __slots__ = ("value", "grad", "requires_grad", "tape", "parents")

    def __init__(self, value, requires_grad: bool = False, tape: Tape | None = None,
                 parents=()):
        v = np.ascontiguousarray(value, dtype=np.float64)
        if v.ndim == 0:
            v = v.reshape(1, 1)
        elif v.ndim == 1:
            v = v.reshape(1, -1)
        if v.ndim != 2:
            raise ShapeMismatch(f"tensors are 2-D, got shape {v.shape}")
        if not np.isfinite(v).all():
            raise NonFinite("tensor value contains NaN or infinity")
        self.value = v
        self.grad = None
        self.requires_grad = requires_grad
        self.tape = tape
        self.parents = parents

    @property
    def shape(self):
        return self.value.shape

    def item(self) -> float:
        if self.value.size != 1:
            raise ShapeMismatch(f"item() on shape {self.value.shape}")
        return float(self.value[0, 0])


def constant(value) -> Tensor:
    return Tensor(value)


def detach(x: Tensor) -> Tensor:
    """Cut the graph: same value, no history, no gradient."""
    return Tensor(x.value.copy())


def _tape_of(*tensors) -> Tape | None:
    tape = None
    for t in tensors:
        if t.tape is not None:
            if tape is not None and tape is not t.tape:
                raise ShapeMismatch("operands belong to different tapes")
            tape = t.tape
    return tape


def _make(value, parents) -> Tensor:
    live = [(t, vjp) for t, vjp in parents if t.requires_grad]
    if not live:
        return Tensor(value)
    tape = _tape_of(*[t for t, _ in live])
    out = Tensor(value, requires_grad=True, tape=tape, parents=tuple(live))
    tape.nodes.append(out)
    return out


def _accum(t: Tensor, g: np.ndarray) -> None:
    if t.grad is None:
        t.grad = np.zeros_like(t.value)
    t.grad += g


def backward(loss: Tensor) -> None:
    """Populate gradients of ``loss`` w.r.t. every requires-grad leaf."""
    if loss.tape is None:
        raise ShapeMismatch("loss does not depend on any tape leaf")
    if loss.value.shape != (1, 1):
        raise ShapeMismatch(f"loss must be scalar (1, 1), got {loss.value.shape}")
    loss.grad = np.ones((1, 1))
    for node in reversed(loss.tape.nodes):
        g = node.grad
        if g is None:
            continue
        for parent, vjp in node.parents:
            _accum(parent, vjp(g))


# -- forward ops ---------------------------------------------------------------

def _binary_shapes(a: Tensor, b: Tensor) -> bool:
    """True if b row-broadcasts over a; raises on anything else."""
    if a.shape == b.shape:
        return False
    if b.shape == (1, a.shape[1]):
        return True
    raise ShapeMismatch(f"cannot combine shapes {a.shape} and {b.shape}")


def add(a: Tensor, b: Tensor) -> Tensor:
    broadcast = _binary_shapes(a, b)
    vjp_b = (lambda g: g.sum(axis=0, keepdims=True)) if broadcast else (lambda g: g)
    return _make(a.value + b.value, [(a, lambda g: g), (b, vjp_b)])


def sub(a: Tensor, b: Tensor) -> Tensor:
    broadcast = _binary_shapes(a, b)
    vjp_b = (lambda g: -g.sum(axis=0, keepdims=True)) if broadcast else (lambda g: -g)
    return _make(a.value - b.value, [(a, lambda g: g), (b, vjp_b)])


def scale(a: Tensor, s: float) -> Tensor:
    s = float(s)
    return _make(s * a.value, [(a, lambda g: s * g)])


def mul(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise (Hadamard) product of same-shape tensors."""
    if a.shape != b.shape:
        raise ShapeMismatch(f"hadamard shapes differ: {a.shape} vs {b.shape}")
    av, bv = a.value, b.value
    return _make(av * bv, [(a, lambda g: g * bv), (b, lambda g: g * av)])


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.shape[1] != b.shape[0]:
        raise ShapeMismatch(f"matmul shapes do not chain: {a.shape} @ {b.shape}")
    av, bv = a.value, b.value
    return _make(av @ bv, [(a, lambda g: g @ bv.T), (b, lambda g: av.T @ g)])


def transpose(a: Tensor) -> Tensor:
    return _make(a.value.T, [(a, lambda g: g.T)])


def absval(a: Tensor) -> Tensor:
    """|x| elementwise; subgradient at 0 is 0."""
    sgn = np.sign(a.value)
    return _make(np.abs(a.value), [(a, lambda g: g * sgn)])


def relu(a: Tensor) -> Tensor:
    pos = a.value > 0.0
    return _make(np.where(pos, a.value, 0.0), [(a, lambda g: g * pos)])


def _gelu_np(x: np.ndarray) -> np.ndarray:
    return 0.5 * x * (1.0 + erf(x * _INV_SQRT2))


def _gelu_grad_np(x: np.ndarray) -> np.ndarray:
    cdf = 0.5 * (1.0 + erf(x * _INV_SQRT2))
    pdf = _INV_SQRT_2PI * np.exp(-0.5 * x * x)
    return cdf + x * pdf


def gelu(a: Tensor) -> Tensor:
    x = a.value
    return _make(_gelu_np(x), [(a, lambda g: g * _gelu_grad_np(x))])


def frobenius_sq(a: Tensor) -> Tensor:
    """sum of squared entries, as a (1, 1) tensor."""
    av = a.value
    return _make(
        np.array([[float(np.sum(av * av))]]),
        [(a, lambda g: 2.0 * g[0, 0] * av)],
    )


def sum_all(a: Tensor) -> Tensor:
    return _make(
        np.array([[float(a.value.sum())]]),
        [(a, lambda g: g[0, 0] * np.ones_like(a.value))],
    )


def row_scale(a: Tensor, scales) -> Tensor:
    """Scale row b of ``a`` by the constant column vector scales[b]."""
    s = np.asarray(scales, dtype=np.float64).reshape(-1, 1)
    if s.shape[0] != a.shape[0]:
        raise ShapeMismatch(f"row_scale wants {a.shape[0]} scales, got {s.shape[0]}")
    return _make(a.value * s, [(a, lambda g: g * s)])


def append_cols(a: Tensor, block) -> Tensor:
    """Append constant columns to the right of ``a``."""
    b = np.asarray(block, dtype=np.float64)
    if b.ndim != 2 or b.shape[0] != a.shape[0]:
        raise ShapeMismatch(f"append_cols shapes: {a.shape} vs {b.shape}")
    cols = a.shape[1]
    return _make(
        np.concatenate([a.value, b], axis=1),
        [(a, lambda g: g[:, :cols])],
    )


def gaussian_gain(a: Tensor, v: Tensor, sigmas) -> Tensor:
    """Per-entry posterior shrinkage a[b] * v / (v + sigma_b^2).

    ``a`` is (B, m), ``v`` a positive (1, m) variance row, ``sigmas`` a
    constant per-row noise level. This is the exact posterior-mean gain for
    independent Gaussian entries observed under Gaussian noise.
    """
    if v.shape != (1, a.shape[1]):
        raise ShapeMismatch(f"gaussian_gain wants v (1, {a.shape[1]}), got {v.shape}")
    sig = np.asarray(sigmas, dtype=np.float64).reshape(-1, 1)
    if sig.shape[0] != a.shape[0]:
        raise ShapeMismatch("gaussian_gain wants one sigma per row")
    sig2 = sig**2
    denom = v.value + sig2  # (B, m) via broadcast
    coef = v.value / denom
    av = a.value

    def vjp_v(g):
        return (g * av * sig2 / denom**2).sum(axis=0, keepdims=True)

    return _make(av * coef, [(a, lambda g: g * coef), (v, vjp_v)])


def normalize_cols(a: Tensor, eps: float = 1e-30) -> Tensor:
    """Scale each column to unit L2 norm (zero columns stay zero)."""
    av = a.value
    sq = np.einsum("ij,ij->j", av, av)
    inv = 1.0 / np.sqrt(sq + eps)
    y = av * inv[None, :]

    def vjp(g):
        dots = np.einsum("ij,ij->j", g, y)
        return (g - y * dots[None, :]) * inv[None, :]

    return _make(y, [(a, vjp)])


def psd_solve(a: Tensor, b: Tensor) -> Tensor:
    """Solve A X = B for symmetric positive-definite A (Cholesky).

    A is symmetrized internally, so perturbing a single off-diagonal entry
    perturbs the solution the way (A + A^T)/2 does; the adjoint is
    symmetrized to match.
    """
    if a.shape[0] != a.shape[1] or a.shape[0] != b.shape[0]:
        raise ShapeMismatch(f"psd_solve shapes: A {a.shape}, B {b.shape}")
    A = 0.5 * (a.value + a.value.T)
    try:
        cho = cho_factor(A, lower=True)
    except LinAlgError as exc:
        raise SingularSystem(f"psd_solve: matrix not positive definite: {exc}") from exc
    X = cho_solve(cho, b.value)

    def vjp_a(g):
        U = cho_solve(cho, g)
        raw = -U @ X.T
        return 0.5 * (raw + raw.T)

    def vjp_b(g):
        return cho_solve(cho, g)

    return _make(X, [(a, vjp_a), (b, vjp_b)])


def masked_lstsq(a1: Tensor, a2: Tensor, alpha: float = 0.0, mask=None,
                 ridge: float | None = 1e-9) -> Tensor:
    """Differentiable row-wise masked map solve (see fmap.solve_fmap).

    Gradients flow to the descriptor coefficients a1, a2; the mask is a
    constant. Rule per row i with H_i = A1 A1^T + alpha diag(M_i^2) + rI,
    c_i = H_i^{-1} A1 a2_i, upstream row gradient gbar_i, u_i = H_i^{-1} gbar_i:

        dA2[i, :] = (A1^T u_i)^T
        dA1      += u_i a2_i^T + (Sg + Sg^T) A1 + (d r / d A1 term),

    where Sg = -sum_i u_i c_i^T is the accumulated adjoint of A1 A1^T and the
    ridge term carries r = ridge * tr(A1 A1^T) dependence.
    """
    C, aux = solve_fmap_full(a1.value, a2.value, alpha, mask, ridge)
    G, rhs, ridge_val, factors, A1v, A2v, alpha_v, mask_v = aux
    shared = len(factors) == 1

    def solve_row(i, vec):
        cho = factors[0] if shared else factors[i]
        return cho_solve(cho, vec)

    cache: dict = {}

    def vjps(g):
        key = id(g)
        if cache.get("key") == key:
            return cache["grads"]
        k2, k1 = C.shape
        if shared:
            U = cho_solve(factors[0], g.T)  # (k1, k2), column i = u_i
        else:
            U = np.empty((k1, k2))
            for i in range(k2):
                U[:, i] = solve_row(i, g[i])
        dA2 = (A1v.T @ U).T
        Sg = -U @ C  # sum_i -u_i c_i^T
        dA1 = U @ A2v + (Sg + Sg.T) @ A1v
        if ridge_val != 0.0:
            dr = -float(np.einsum("ij,ij->", U, C.T))  # sum_i -u_i . c_i
            dA1 += dr * float(ridge) * 2.0 * A1v
        cache["key"], cache["grads"] = key, (dA1, dA2)
        return cache["grads"]

    return _make(C, [(a1, lambda g: vjps(g)[0]), (a2, lambda g: vjps(g)[1])])


# -- feed-forward networks -----------------------------------------------------

@dataclass
class MLPParams:
    """Plain-array weights and biases of a feed-forward stack.

    weights[i] is (fan_in, fan_out); biases[i] is (1, fan_out). Hidden layers
    apply the activation; the last layer is linear. When ``residual`` is set,
    hidden layers with matching widths add their input back.
    """

    weights: list = field(default_factory=list)
    biases: list = field(default_factory=list)
    activation: str = "gelu"
    residual: bool = False

    @property
    def widths(self):
        return [self.weights[0].shape[0]] + [w.shape[1] for w in self.weights]

    def flat(self) -> list:
        out = []
        for w, b in zip(self.weights, self.biases):
            out.extend((w, b))
        return out

    def copy(self) -> "MLPParams":
        return MLPParams(
            [w.copy() for w in self.weights],
            [b.copy() for b in self.biases],
            self.activation,
            self.residual,
        )


def mlp_init(dims, rng: np.random.Generator, weight_std: float | None = None,
             activation: str = "gelu", residual: bool = False,
             zero_last: bool = False) -> MLPParams:
    """Initialize an MLP with Gaussian weights and zero biases.

    ``weight_std=None`` uses 1/sqrt(fan_in) per layer; ``zero_last`` zeroes
    the final layer so the stack starts as the zero map.
    """
    if len(dims) < 2:
        raise ShapeMismatch("an MLP needs at least input and output dims")
    weights, biases = [], []
    for li in range(len(dims) - 1):
        fan_in, fan_out = dims[li], dims[li + 1]
        std = weight_std if weight_std is not None else 1.0 / math.sqrt(fan_in)
        w = rng.normal(0.0, std, size=(fan_in, fan_out))
        if zero_last and li == len(dims) - 2:
            w = np.zeros((fan_in, fan_out))
        weights.append(w)
        biases.append(np.zeros((1, fan_out)))
    return MLPParams(weights, biases, activation, residual)


_ACT_NP = {"gelu": _gelu_np, "relu": lambda x: np.maximum(x, 0.0)}
_ACT_OP = {"gelu": gelu, "relu": relu}


def mlp_forward(params: MLPParams, X: np.ndarray) -> np.ndarray:
    """Pure-numpy forward pass (row-wise application of the layer stack)."""
    act = _ACT_NP[params.activation]
    h = np.asarray(X, dtype=np.float64)
    last = len(params.weights) - 1
    for li, (w, b) in enumerate(zip(params.weights, params.biases)):
        z = h @ w + b
        if li == last:
            h = z
        else:
            a = act(z)
            h = a + h if params.residual and a.shape == h.shape else a
    if not np.isfinite(h).all():
        raise NonFinite("MLP forward produced non-finite values")
    return h


class BoundMLP:
    """MLP parameters bound to a tape as gradient leaves for one step."""

    def __init__(self, tape: Tape, params: MLPParams):
        self.params = params
        self.weights = [tape.leaf(w) for w in params.weights]
        self.biases = [tape.leaf(b) for b in params.biases]

    def __call__(self, X: Tensor) -> Tensor:
        op = _ACT_OP[self.params.activation]
        h = X
        last = len(self.weights) - 1
        for li, (w, b) in enumerate(zip(self.weights, self.biases)):
            z = add(matmul(h, w), b)
            if li == last:
                h = z
            else:
                a = op(z)
                h = add(a, h) if self.params.residual and a.shape == h.shape else a
        return h

    def flat_leaves(self) -> list:
        out = []
        for w, b in zip(self.weights, self.biases):
            out.extend((w, b))
        return out

    def grads(self) -> list:
        return [
            t.grad if t.grad is not None else np.zeros_like(t.value)
            for t in self.flat_leaves()
        ]


# -- adaptive-moment optimizer ---------------------------------------------------

@dataclass
class OptimState:
    """Adam accumulators: beta1=0.9, beta2=0.999, eps=1e-8, bias-corrected."""

    lr: float
    m: list
    v: list
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def for_params(cls, params_flat, lr: float) -> "OptimState":
        return cls(
            lr=lr,
            m=[np.zeros_like(p) for p in params_flat],
            v=[np.zeros_like(p) for p in params_flat],
        )


def optim_step(state: OptimState, params_flat, grads, lr: float | None = None) -> None:
    """One in-place Adam update of ``params_flat`` given matching ``grads``."""
    if len(params_flat) != len(state.m) or len(grads) != len(state.m):
        raise ShapeMismatch("optimizer state does not match parameter list")
    state.step += 1
    t = state.step
    lr = state.lr if lr is None else lr
    c1 = 1.0 - state.beta1**t
    c2 = 1.0 - state.beta2**t
    for p, g, m, v in zip(params_flat, grads, state.m, state.v):
        if p.shape != g.shape:
            raise ShapeMismatch(f"grad shape {g.shape} != param shape {p.shape}")
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        p -= lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
