"""Dense kernels: thin QR, symmetric eigensolve and regularized solves.

Production paths call LAPACK through numpy; ``householder_qr`` and
``jacobi_eig`` are self-contained reference implementations kept for
cross-checking the LAPACK results and for tiny problems.
"""
from typing import NamedTuple

import numpy as np

PSD_CLAMP = 1e-10
PINV_RCOND = 1e-10


class InconsistentSystemError(ValueError):
    """Right-hand side has a component outside the range of a singular matrix."""


class NonConvergenceError(RuntimeError):
    pass


class EigenDecomposition(NamedTuple):
    values: np.ndarray  # descending
    vectors: np.ndarray  # columns, orthonormal


def _as_finite_matrix(A, name="A"):
    A = np.asarray(A, dtype=np.float64)
    if A.ndim != 2:
        raise ValueError(f"{name} must be 2-D, got shape {A.shape}")
    if not np.all(np.isfinite(A)):
        raise ValueError(f"{name} contains non-finite entries")
    return A


def _fix_qr_signs(Q, R):
    signs = np.where(np.diag(R) < 0, -1.0, 1.0)
    return Q * signs, R * signs[:, None]


def qr_thin(V):
    """Thin QR ``V = Q R`` with ``Q`` p x n orthonormal and ``diag(R) >= 0``.

    Rank-deficient input is allowed; use :func:`qr_rank` to flag it.
    """
    V = _as_finite_matrix(V, "V")
    p, n = V.shape
    if p < n:
        raise ValueError(f"qr_thin needs rows >= cols, got {V.shape}")
    if n == 0:
        return np.zeros((p, 0)), np.zeros((0, 0))
    Q, R = np.linalg.qr(V, mode="reduced")
    return _fix_qr_signs(Q, np.triu(R))


def householder_qr(V):
    """Reference Householder QR with the same sign convention as :func:`qr_thin`."""
    V = _as_finite_matrix(V, "V")
    p, n = V.shape
    if p < n:
        raise ValueError(f"householder_qr needs rows >= cols, got {V.shape}")
    R = V.copy()
    reflectors = []
    for j in range(n):
        x = R[j:, j]
        alpha = np.linalg.norm(x)
        v = x.copy()
        if alpha == 0.0:
            reflectors.append(None)
            continue
        v[0] += np.copysign(alpha, x[0]) if x[0] != 0 else alpha
        v /= np.linalg.norm(v)
        R[j:, j:] -= 2.0 * np.outer(v, v @ R[j:, j:])
        reflectors.append(v)
    Q = np.eye(p, n)
    for j in reversed(range(n)):
        v = reflectors[j]
        if v is not None:
            Q[j:, :] -= 2.0 * np.outer(v, v @ Q[j:, :])
    return _fix_qr_signs(Q, np.triu(R[:n, :]))


def qr_rank(R, tol=1e-12):
    """Numerical rank of a triangular factor from the magnitude of its diagonal."""
    d = np.abs(np.diag(R))
    if d.size == 0 or d.max() == 0.0:
        return 0
    return int(np.sum(d > tol * d.max()))


def _check_symmetric(A, tol):
    scale = max(1.0, np.abs(A).max(initial=0.0))
    asym = np.abs(A - A.T).max(initial=0.0)
    if asym > tol * scale:
        raise ValueError(f"matrix is not symmetric (max |A - A^T| = {asym:.3e})")


def sym_eig(A, method="lapack", sym_tol=1e-12):
    """Eigendecomposition of a symmetric matrix, eigenvalues in descending order.

    ``method="jacobi"`` uses the cyclic Jacobi reference solver instead of LAPACK.
    """
    A = _as_finite_matrix(A)
    if A.shape[0] != A.shape[1]:
        raise ValueError(f"sym_eig needs a square matrix, got {A.shape}")
    _check_symmetric(A, sym_tol)
    A = 0.5 * (A + A.T)
    if method == "lapack":
        w, V = np.linalg.eigh(A)
    elif method == "jacobi":
        w, V = jacobi_eig(A)
    else:
        raise ValueError(f"unknown eigensolver {method!r}")
    order = np.argsort(-w, kind="stable")
    return EigenDecomposition(w[order], V[:, order])


def jacobi_eig(A, tol=1e-14, max_sweeps=60):
    """Cyclic Jacobi rotations. Returns unsorted ``(values, vectors)``."""
    A = np.array(A, dtype=np.float64)
    n = A.shape[0]
    V = np.eye(n)
    total = np.linalg.norm(A)
    if n < 2 or total == 0.0:
        return np.diag(A).copy(), V
    for _ in range(max_sweeps):
        off = np.sqrt(max(np.sum(A * A) - np.sum(np.diag(A) ** 2), 0.0))
        if off <= tol * total:
            return np.diag(A).copy(), V
        for p in range(n - 1):
            for q in range(p + 1, n):
                apq = A[p, q]
                if abs(apq) <= 1e-300:
                    continue
                theta = (A[q, q] - A[p, p]) / (2.0 * apq)
                t = np.copysign(1.0, theta) / (abs(theta) + np.sqrt(theta * theta + 1.0))
                c = 1.0 / np.sqrt(t * t + 1.0)
                s = t * c
                ap = A[:, p].copy()
                aq = A[:, q].copy()
                A[:, p] = c * ap - s * aq
                A[:, q] = s * ap + c * aq
                ap = A[p, :].copy()
                aq = A[q, :].copy()
                A[p, :] = c * ap - s * aq
                A[q, :] = s * ap + c * aq
                vp = V[:, p].copy()
                vq = V[:, q].copy()
                V[:, p] = c * vp - s * vq
                V[:, q] = s * vp + c * vq
    raise NonConvergenceError(f"Jacobi eigensolver did not converge in {max_sweeps} sweeps")


def clamp_psd(values):
    """Zero out eigenvalues in ``[-PSD_CLAMP * lambda_max, 0)``; larger negatives are kept."""
    values = np.array(values, dtype=np.float64)
    if values.size == 0:
        return values
    lam_max = max(values.max(), 0.0)
    noise = (values < 0) & (values >= -PSD_CLAMP * lam_max)
    values[noise] = 0.0
    return values


def pinv_psd(A, rcond=PINV_RCOND):
    """Moore-Penrose pseudoinverse of a symmetric PSD matrix with a relative cutoff."""
    w, V = sym_eig(A, sym_tol=1e-8)
    w = clamp_psd(w)
    keep = w > rcond * max(w.max(initial=0.0), 0.0)
    inv = np.zeros_like(w)
    inv[keep] = 1.0 / w[keep]
    return (V * inv) @ V.T


def solve_regularized(A, beta, b, rcond=PINV_RCOND):
    """Solve ``(A + beta I) x = b`` for symmetric PSD ``A``.

    With ``beta == 0`` the minimum-norm solution ``A^+ b`` is returned, and an
    :class:`InconsistentSystemError` is raised when ``b`` is not in range(A).
    """
    A = _as_finite_matrix(A)
    b = np.asarray(b, dtype=np.float64)
    n = A.shape[0]
    if A.shape != (n, n) or b.shape[0] != n:
        raise ValueError(f"dimension mismatch: A {A.shape}, b {b.shape}")
    if beta < 0:
        raise ValueError("beta must be non-negative")
    if not np.all(np.isfinite(b)):
        raise ValueError("b contains non-finite entries")
    if beta > 0:
        w, V = sym_eig(A, sym_tol=1e-8)
        w = clamp_psd(w)
        x = V @ ((V.T @ b) / (np.maximum(w, 0.0) + beta))
        return x
    w, V = sym_eig(A, sym_tol=1e-8)
    w = clamp_psd(w)
    keep = w > rcond * max(w.max(initial=0.0), 0.0)
    coef = V.T @ b
    bnorm = np.linalg.norm(b)
    off = np.linalg.norm(coef[~keep])
    if bnorm > 0 and off > 1e-8 * bnorm:
        raise InconsistentSystemError(
            f"b has a component of relative size {off / bnorm:.3e} outside range(A)"
        )
    return V[:, keep] @ (coef[keep] / w[keep])
