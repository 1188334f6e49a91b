"""Functional-map algebra.

A functional map C is a k2 x k1 matrix transporting spectral coefficients
from shape 1 to shape 2 (C A1 ~ A2). Point maps go the other way around the
diagram: pm[v] is the shape-2 vertex matched to shape-1 vertex v, and its
matrix Pi (n2 x n1, Pi[pm[v], v] = 1) closes the loop C = Phi2^T S2 Pi Phi1.
The mass-orthonormal basis makes that product the exact pseudoinverse form.
"""

from __future__ import annotations

import numpy as np
from scipy.linalg import LinAlgError, cho_factor, cho_solve

from .errors import IndexOutOfRange, KTooLarge, ShapeMismatch, SingularSystem
from .mesh import TriangleMesh, geodesic_distances_multi
from .spectral import SpectralBasis

DEFAULT_RIDGE = 1e-9


def _pi_phi(pm: np.ndarray, phi1: np.ndarray, n2: int) -> np.ndarray:
    """Rows of Pi Phi1: scatter-add shape-1 eigenfunctions onto shape 2."""
    out = np.zeros((n2, phi1.shape[1]))
    np.add.at(out, pm, phi1)
    return out


def _check_pm(pm, n1: int | None, n2: int) -> np.ndarray:
    pm = np.asarray(pm, dtype=np.int64)
    if pm.ndim != 1:
        raise ShapeMismatch(f"point map must be 1-D, got shape {pm.shape}")
    if n1 is not None and pm.size != n1:
        raise ShapeMismatch(f"point map has {pm.size} entries, shape 1 has {n1}")
    if pm.size and (pm.min() < 0 or pm.max() >= n2):
        raise IndexOutOfRange(f"point map index outside [0, {n2})")
    return pm


def gt_fmap(basis1: SpectralBasis, basis2: SpectralBasis, corr, S2) -> np.ndarray:
    """Ground-truth map C = Phi2^T S2 Pi Phi1 for a known correspondence.

    ``corr`` maps every shape-1 vertex to a shape-2 vertex (identity indexing
    for registered template-to-shape pairs). Result is (k2, k1).
    """
    corr = _check_pm(corr, basis1.n, basis2.n)
    S2 = np.asarray(S2, dtype=np.float64)
    acc = _pi_phi(corr, basis1.phi, basis2.n)
    return basis2.phi.T @ (S2[:, None] * acc)


def fmap_from_p2p(pm, basis1: SpectralBasis, basis2: SpectralBasis, S2, k: int) -> np.ndarray:
    """Spectral re-encoding of a point map at order k (k x k)."""
    if k > basis1.k or k > basis2.k:
        raise KTooLarge(f"order {k} exceeds basis sizes ({basis1.k}, {basis2.k})")
    pm = _check_pm(pm, basis1.n, basis2.n)
    S2 = np.asarray(S2, dtype=np.float64)
    acc = _pi_phi(pm, basis1.phi[:, :k], basis2.n)
    return basis2.phi[:, :k].T @ (S2[:, None] * acc)


def p2p_from_fmap(C, basis1: SpectralBasis, basis2: SpectralBasis) -> np.ndarray:
    """Nearest-neighbor point map from aligned spectral embeddings.

    Shape-1 vertex v goes to the shape-2 vertex whose row of Phi2 is closest
    to row v of Phi1 C^T. Ties break to the lowest index.
    """
    C = np.asarray(C, dtype=np.float64)
    k2, k1 = C.shape
    if k1 > basis1.k or k2 > basis2.k:
        raise KTooLarge(f"map order {C.shape} exceeds bases ({basis1.k}, {basis2.k})")
    emb1 = basis1.phi[:, :k1] @ C.T  # (n1, k2)
    emb2 = basis2.phi[:, :k2]
    sq2 = np.einsum("ij,ij->i", emb2, emb2)
    pm = np.empty(emb1.shape[0], dtype=np.int64)
    block = max(1, int(2**22 // max(emb2.shape[0], 1)))
    for start in range(0, emb1.shape[0], block):
        chunk = emb1[start : start + block]
        d = sq2[None, :] - 2.0 * (chunk @ emb2.T)
        pm[start : start + chunk.shape[0]] = np.argmin(d, axis=1)
    return pm


def zoomout(C, basis1: SpectralBasis, basis2: SpectralBasis, S2, k_target: int,
            step: int = 1) -> np.ndarray:
    """Iterative spectral upsampling: alternate p2p extraction and re-encoding.

    Grows a square map from its current order to ``k_target``; the result is
    proper by construction (the image of a pointwise map).
    """
    C = np.asarray(C, dtype=np.float64)
    if C.ndim != 2 or C.shape[0] != C.shape[1]:
        raise ShapeMismatch(f"zoomout wants a square map, got {C.shape}")
    k = C.shape[0]
    if k_target < k:
        raise KTooLarge(f"target {k_target} below current order {k}")
    if k_target > basis1.k or k_target > basis2.k:
        raise KTooLarge(
            f"target {k_target} exceeds basis sizes ({basis1.k}, {basis2.k})"
        )
    if step < 1:
        raise ShapeMismatch("zoomout step must be >= 1")
    S2 = np.asarray(S2, dtype=np.float64)
    while k < k_target:
        pm = p2p_from_fmap(C, basis1, basis2)
        k = min(k + step, k_target)
        C = fmap_from_p2p(pm, basis1, basis2, S2, k)
    return C


# -- masks -------------------------------------------------------------------

def _normalized(lam) -> np.ndarray:
    lam = np.asarray(lam, dtype=np.float64)
    if (np.diff(lam) < -1e-12 * max(lam[-1], 1.0)).any():
        raise ShapeMismatch("eigenvalues must be ascending")
    top = lam[-1] if lam[-1] > 0 else 1.0
    return lam / top


def laplacian_mask(lam1, lam2) -> np.ndarray:
    """Commutativity funnel (lam2_i - lam1_j)^2 on max-normalized spectra."""
    l1, l2 = _normalized(lam1), _normalized(lam2)
    return (l2[:, None] - l1[None, :]) ** 2


def resolvent_mask(lam1, lam2) -> np.ndarray:
    """Resolvent-difference funnel on max-normalized spectra (entries <= 2)."""
    l1, l2 = _normalized(lam1), _normalized(lam2)
    re1, im1 = l1 / (l1**2 + 1.0), 1.0 / (l1**2 + 1.0)
    re2, im2 = l2 / (l2**2 + 1.0), 1.0 / (l2**2 + 1.0)
    return (re2[:, None] - re1[None, :]) ** 2 + (im2[:, None] - im1[None, :]) ** 2


def slanted_mask(lam1, lam2, slope: float = 1.0) -> np.ndarray:
    """Distance-to-slanted-diagonal mask, 1 - exp(-dist^2), unit slope default."""
    k1, k2 = len(np.asarray(lam1)), len(np.asarray(lam2))
    i = np.arange(k2, dtype=np.float64)[:, None]
    j = np.arange(k1, dtype=np.float64)[None, :]
    dist2 = (slope * i - j) ** 2 / (1.0 + slope**2)
    return 1.0 - np.exp(-dist2)


# -- the regularized solve ---------------------------------------------------

def solve_fmap_full(A1, A2, alpha: float = 0.0, mask=None,
                    ridge: float | None = DEFAULT_RIDGE):
    """Masked least-squares map solve, returning solver internals.

    Minimizes ||C A1 - A2||_F^2 + alpha ||M o C||_F^2 row by row: row i of C
    solves (A1 A1^T + alpha diag(M_i^2) + ridge_val I) c = A1 a2_i with
    ridge_val = ridge * trace(A1 A1^T). ``ridge=None`` disables the ridge and
    singular rows raise :class:`SingularSystem`.

    Returns ``(C, aux)`` where aux carries (G, rhs, ridge_val, cho_factors)
    for the reverse-mode rule in :mod:`specmatch.autodiff`.
    """
    A1 = np.asarray(A1, dtype=np.float64)
    A2 = np.asarray(A2, dtype=np.float64)
    if A1.ndim != 2 or A2.ndim != 2 or A1.shape[1] != A2.shape[1]:
        raise ShapeMismatch(
            f"descriptor matrices must share d: A1 {A1.shape}, A2 {A2.shape}"
        )
    if alpha < 0.0:
        raise ShapeMismatch("alpha must be nonnegative")
    k1, k2 = A1.shape[0], A2.shape[0]
    if mask is not None:
        mask = np.asarray(mask, dtype=np.float64)
        if mask.shape != (k2, k1):
            raise ShapeMismatch(f"mask shape {mask.shape} != ({k2}, {k1})")
    G = A1 @ A1.T
    rhs = A1 @ A2.T  # column i = A1 a2_i
    ridge_val = 0.0 if ridge is None else float(ridge) * float(np.trace(G))
    C = np.empty((k2, k1))
    factors = []
    if mask is None or alpha == 0.0:
        H = G + ridge_val * np.eye(k1)
        cho = _chol(H)
        C[:] = cho_solve(cho, rhs).T
        factors.append(cho)
    else:
        base = G + ridge_val * np.eye(k1)
        for i in range(k2):
            H = base + np.diag(alpha * mask[i] ** 2)
            cho = _chol(H)
            C[i] = cho_solve(cho, rhs[:, i])
            factors.append(cho)
    return C, (G, rhs, ridge_val, factors, A1, A2, alpha, mask)


def _chol(H):
    try:
        return cho_factor(H, lower=True)
    except LinAlgError as exc:
        raise SingularSystem(f"row system is singular: {exc}") from exc


def solve_fmap(A1, A2, alpha: float = 0.0, mask=None,
               ridge: float | None = DEFAULT_RIDGE) -> np.ndarray:
    """Regularized functional map from descriptor coefficients (see solve_fmap_full)."""
    C, _ = solve_fmap_full(A1, A2, alpha, mask, ridge)
    return C


# -- penalties & evaluation ---------------------------------------------------

def ortho_penalty(C) -> float:
    C = np.asarray(C, dtype=np.float64)
    return float(np.sum((C @ C.T - np.eye(C.shape[0])) ** 2))


def bij_penalty(C12, C21) -> float:
    C12 = np.asarray(C12, dtype=np.float64)
    C21 = np.asarray(C21, dtype=np.float64)
    if C12.shape[1] != C21.shape[0] or C12.shape[0] != C21.shape[1]:
        raise ShapeMismatch(f"bijectivity dims: {C12.shape} vs {C21.shape}")
    return float(np.sum((C12 @ C21 - np.eye(C12.shape[0])) ** 2))


def lap_commute_penalty(C, lam1, lam2) -> float:
    C = np.asarray(C, dtype=np.float64)
    l1, l2 = _normalized(lam1), _normalized(lam2)
    if C.shape != (l2.size, l1.size):
        raise ShapeMismatch(f"map {C.shape} vs spectra ({l2.size}, {l1.size})")
    return float(np.sum((C * l1[None, :] - l2[:, None] * C) ** 2))


def geodesic_error(pred, gt, mesh2: TriangleMesh):
    """Per-vertex geodesic error of a predicted point map against ground truth.

    error(v) = d_geo(pred[v], gt[v]) / sqrt(total area of mesh 2). Returns
    (per_vertex, mean); tables conventionally report mean * 100.
    """
    pred = _check_pm(pred, None, mesh2.n_vertices)
    gt = _check_pm(gt, None, mesh2.n_vertices)
    if pred.size != gt.size:
        raise ShapeMismatch(f"pred has {pred.size} entries, gt has {gt.size}")
    sources, inverse = np.unique(gt, return_inverse=True)
    dist = geodesic_distances_multi(mesh2, sources)
    errs = dist[inverse, pred] / np.sqrt(mesh2.total_area)
    return errs, float(errs.mean())
