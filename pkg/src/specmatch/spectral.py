"""Laplace-Beltrami eigenbases, spectral projection, and heat-kernel signatures.

The generalized problem W phi = lambda S phi is reduced with the lumped mass
to the symmetric problem B y = lambda y, B = S^{-1/2} W S^{-1/2}, solved
densely (desk-scale meshes, n <= a few thousand). Eigenvector signs are fixed
deterministically: the entry of largest magnitude in each column is made
positive, first index winning ties, so repeated runs are bit-identical.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.linalg
from scipy import sparse

from .errors import ConvergenceFailure, KTooLarge, ShapeMismatch


@dataclass(frozen=True)
class SpectralBasis:
    """First k eigenpairs: phi (n, k) mass-orthonormal, lam (k,) ascending."""

    phi: np.ndarray
    lam: np.ndarray

    @property
    def n(self) -> int:
        return self.phi.shape[0]

    @property
    def k(self) -> int:
        return self.phi.shape[1]

    def truncated(self, k: int) -> "SpectralBasis":
        if k > self.k:
            raise KTooLarge(f"basis holds {self.k} pairs, asked for {k}")
        return SpectralBasis(self.phi[:, :k], self.lam[:k])


def _fix_signs(phi: np.ndarray) -> np.ndarray:
    anchor = np.argmax(np.abs(phi), axis=0)
    flip = phi[anchor, np.arange(phi.shape[1])] < 0.0
    phi[:, flip] *= -1.0
    return phi


def eigenbasis(W, S, k: int) -> SpectralBasis:
    """First k generalized eigenpairs of (W, diag(S)).

    Parameters
    ----------
    W : (n, n) symmetric PSD stiffness (sparse or dense)
    S : (n,) positive lumped areas
    k : truncation order, 1 <= k < n
    """
    S = np.asarray(S, dtype=np.float64)
    n = S.size
    if not 1 <= k < n:
        raise KTooLarge(f"need 1 <= k < n, got k={k}, n={n}")
    if (S <= 0.0).any():
        raise ConvergenceFailure("mass diagonal must be strictly positive")
    d = 1.0 / np.sqrt(S)
    if sparse.issparse(W):
        B = (W.multiply(d[:, None]).multiply(d[None, :])).toarray()
    else:
        B = d[:, None] * np.asarray(W, dtype=np.float64) * d[None, :]
    B = 0.5 * (B + B.T)
    try:
        vals, vecs = scipy.linalg.eigh(B, subset_by_index=(0, k - 1))
    except scipy.linalg.LinAlgError as exc:
        raise ConvergenceFailure(f"dense eigensolver failed: {exc}") from exc
    scale = max(abs(float(vals[-1])), 1.0)
    if vals[0] < -1e-8 * scale:
        raise ConvergenceFailure(
            f"stiffness is not PSD: lambda_min = {vals[0]:.3e}"
        )
    vals = np.clip(vals, 0.0, None)
    phi = _fix_signs(d[:, None] * vecs)
    phi.setflags(write=False)
    vals.setflags(write=False)
    return SpectralBasis(phi, vals)


def project(basis: SpectralBasis, S, F) -> np.ndarray:
    """Spectral coefficients A = Phi^T S F of per-vertex functions F (n, d)."""
    F = np.asarray(F, dtype=np.float64)
    if F.ndim == 1:
        F = F[:, None]
    if F.shape[0] != basis.n:
        raise ShapeMismatch(f"F has {F.shape[0]} rows, basis has n={basis.n}")
    S = np.asarray(S, dtype=np.float64)
    return basis.phi.T @ (S[:, None] * F)


def reconstruct(basis: SpectralBasis, A) -> np.ndarray:
    """Function values Phi A from spectral coefficients A (k, d)."""
    A = np.asarray(A, dtype=np.float64)
    if A.ndim == 1:
        A = A[:, None]
    if A.shape[0] != basis.k:
        raise ShapeMismatch(f"A has {A.shape[0]} rows, basis has k={basis.k}")
    return basis.phi @ A


def hks_default_times(lam, count: int = 16) -> np.ndarray:
    """Log-spaced diffusion times over [4 ln10 / lam_max, 4 ln10 / lam_2]."""
    lam = np.asarray(lam, dtype=np.float64)
    if lam.size < 2 or lam[-1] <= 0.0 or lam[1] <= 0.0:
        raise ConvergenceFailure("need at least two nonzero eigenvalues for HKS times")
    t_min = 4.0 * np.log(10.0) / lam[-1]
    t_max = 4.0 * np.log(10.0) / lam[1]
    return np.geomspace(t_min, t_max, count)


def heat_kernel_signature(basis: SpectralBasis, S, times=None, count: int = 16) -> np.ndarray:
    """Heat-kernel signature field, one column per diffusion time.

    HKS(v, t) = sum_i exp(-lam_i t) phi_i(v)^2, each column scaled to unit
    mass-weighted L2 norm. ``times`` defaults to :func:`hks_default_times`.
    """
    if times is None:
        times = hks_default_times(basis.lam, count)
    times = np.asarray(times, dtype=np.float64)
    if (times <= 0.0).any():
        raise ShapeMismatch("diffusion times must be positive")
    S = np.asarray(S, dtype=np.float64)
    decay = np.exp(-np.outer(basis.lam, times))  # (k, T)
    H = (basis.phi**2) @ decay  # (n, T)
    norms = np.sqrt(np.einsum("v,vt->t", S, H**2))
    norms[norms == 0.0] = 1.0
    return H / norms[None, :]
