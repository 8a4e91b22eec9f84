"""Shared symmetric-matrix numerics: eigendecomposition-based inverses,
pseudoinverses, PSD square roots, and observability rank tests.

All routines accept stacked inputs (leading batch dimensions) wherever
numpy's batched LAPACK wrappers allow it.
"""
from __future__ import annotations

import numpy as np

__all__ = [
    "symmetrize",
    "check_symmetric",
    "sym_inv",
    "sym_pinv",
    "psd_sqrt",
    "spd_inv_batched",
    "observability_matrix",
    "is_observable",
    "spectral_radius",
    "min_eig_sym",
]

SYM_TOL = 1e-10


def symmetrize(m: np.ndarray) -> np.ndarray:
    """Return (M + M^T)/2 over the trailing two axes."""
    return 0.5 * (m + np.swapaxes(m, -1, -2))


def check_symmetric(m: np.ndarray, tol: float = SYM_TOL, name: str = "matrix") -> None:
    """Raise ValueError if M deviates from symmetry by more than tol (relative)."""
    dev = np.max(np.abs(m - np.swapaxes(m, -1, -2)))
    scale = max(1.0, float(np.max(np.abs(m))))
    if dev > tol * scale:
        raise ValueError(f"{name} is not symmetric within tolerance: deviation {dev:.3e}")


def sym_inv(m: np.ndarray, floor_rel: float = 1e-12) -> np.ndarray:
    """Inverse of a symmetric positive (semi)definite matrix via eigendecomposition.

    Eigenvalues below floor_rel * lambda_max are floored there before inverting,
    which keeps ill-conditioned information matrices from blowing up.
    """
    w, v = np.linalg.eigh(symmetrize(m))
    wmax = np.max(np.abs(w), axis=-1, keepdims=True)
    if np.any(wmax == 0.0):
        raise np.linalg.LinAlgError("cannot invert a zero matrix")
    w = np.maximum(w, floor_rel * wmax)
    return np.einsum("...ij,...j,...kj->...ik", v, 1.0 / w, v)


def sym_pinv(m: np.ndarray, rel_tol: float | None = None) -> np.ndarray:
    """Moore-Penrose pseudoinverse of a symmetric PSD matrix.

    Eigenvalues below rel_tol * lambda_max are treated as exact zeros.
    Default cutoff is 1e-10 * n (n = matrix dimension).
    """
    m = np.asarray(m, dtype=float)
    check_symmetric(m, name="pseudo_inverse input")
    n = m.shape[-1]
    if rel_tol is None:
        rel_tol = 1e-10 * n
    w, v = np.linalg.eigh(symmetrize(m))
    wmax = np.max(np.abs(w), axis=-1, keepdims=True)
    cut = rel_tol * np.maximum(wmax, np.finfo(float).tiny)
    winv = np.where(np.abs(w) > cut, 1.0 / np.where(np.abs(w) > cut, w, 1.0), 0.0)
    return np.einsum("...ij,...j,...kj->...ik", v, winv, v)


def psd_sqrt(m: np.ndarray, tol: float = SYM_TOL) -> np.ndarray:
    """Symmetric PSD square root Y with Y^T Y = Y Y = M.

    Eigenvalues below the numerical noise floor (n * eps * lambda_max,
    including all negatives) are clamped to zero, so rank-deficient
    covariances keep their support: sqrt would otherwise amplify O(eps)
    noise eigenvalues to O(sqrt(eps)).
    """
    m = np.asarray(m, dtype=float)
    check_symmetric(m, tol=tol, name="psd_sqrt input")
    w, v = np.linalg.eigh(symmetrize(m))
    floor = m.shape[-1] * np.finfo(float).eps * np.max(np.abs(w), axis=-1,
                                                       keepdims=True)
    w = np.where(w > floor, w, 0.0)
    return np.einsum("...ij,...j,...kj->...ik", v, np.sqrt(w), v)


def _inv2_batched(a: np.ndarray) -> np.ndarray:
    det = a[..., 0, 0] * a[..., 1, 1] - a[..., 0, 1] * a[..., 1, 0]
    out = np.empty_like(a)
    out[..., 0, 0] = a[..., 1, 1]
    out[..., 1, 1] = a[..., 0, 0]
    out[..., 0, 1] = -a[..., 0, 1]
    out[..., 1, 0] = -a[..., 1, 0]
    out /= det[..., None, None]
    return out


def spd_inv_batched(m: np.ndarray) -> np.ndarray:
    """Fast batched inverse for well-conditioned SPD stacks (filter hot path).

    Uses closed-form cofactor inverses for n in {1, 2, 4} and LAPACK otherwise.
    Symmetrizes the result; callers that may see singular input must use
    sym_pinv instead.
    """
    n = m.shape[-1]
    if n == 1:
        return 1.0 / m
    if n == 2:
        return symmetrize(_inv2_batched(m))
    return symmetrize(np.linalg.inv(m))


def observability_matrix(a: np.ndarray, c: np.ndarray) -> np.ndarray:
    """Stack [C; CA; ...; CA^(n-1)] for the pair (A, C)."""
    n = a.shape[0]
    blocks = []
    ca = np.asarray(c, dtype=float)
    for _ in range(n):
        blocks.append(ca)
        ca = ca @ a
    return np.vstack(blocks)


def is_observable(a: np.ndarray, c: np.ndarray, rtol: float = 1e-8) -> bool:
    """Rank test on the observability matrix, thresholded at rtol * sigma_max."""
    obs = observability_matrix(a, c)
    s = np.linalg.svd(obs, compute_uv=False)
    if s.size == 0 or s[0] == 0.0:
        return False
    return int(np.sum(s > rtol * s[0])) >= a.shape[0]


def spectral_radius(m: np.ndarray) -> float:
    return float(np.max(np.abs(np.linalg.eigvals(m))))


def min_eig_sym(m: np.ndarray) -> float:
    """Smallest eigenvalue of a symmetric matrix (symmetrized first)."""
    return float(np.min(np.linalg.eigvalsh(symmetrize(m))))
