"""Client curvature: GGN/Fisher products, dense assembly and low-rank sketches.

All operators act on the trainable coordinates only (length ``p_eff``) when
``theta`` is a :class:`~fipa.models.ParamVector` carrying a mask.
"""
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .linalg import qr_thin, sym_eig
from .models import (ParamVector, apply_output_hessian, forward, jvp, param_jacobian_batch,
                     unpack_dataset, vjp)
from .problems import pde_residual_jacobians

DENSE_CAP = 2000
EIG_FLOOR = 1e-12
JACOBIAN_CACHE = 4_000_000  # entries of N x C x p kept for block products


@dataclass
class SketchConfig:
    r: int
    s: int = 5
    q: int = 4
    seed: int = 0

    def __post_init__(self):
        if self.r < 1 or self.s < 0 or self.q < 1:
            raise ValueError(f"invalid sketch config r={self.r}, s={self.s}, q={self.q}")

    @property
    def L(self):
        return self.r + self.s


@dataclass
class FisherSketch:
    """Rank-r eigenpairs ``(U, lam)`` of a client's curvature; ``weight`` is N_m / N."""

    U: np.ndarray
    lam: np.ndarray
    weight: Optional[float] = None

    def __post_init__(self):
        self.U = np.asarray(self.U, dtype=np.float64)
        self.lam = np.asarray(self.lam, dtype=np.float64).reshape(-1)
        if self.U.ndim != 2 or self.U.shape[1] != self.lam.size:
            raise ValueError(f"U {self.U.shape} and lambda {self.lam.shape} disagree")

    @property
    def p(self):
        return self.U.shape[0]

    @property
    def r(self):
        return self.lam.size

    def dense(self):
        return (self.U * self.lam) @ self.U.T

    def truncate(self, r):
        return FisherSketch(self.U[:, :r].copy(), self.lam[:r].copy(), self.weight)


def _mask(theta, p):
    if isinstance(theta, ParamVector):
        return theta.mask
    return np.ones(p, dtype=bool)


class CurvatureOperator:
    """Matrix-free products with one client's GGN at a fixed parameter point."""

    p: int

    def matvec(self, v):
        raise NotImplementedError

    def matmat(self, V):
        V = np.asarray(V, dtype=np.float64)
        return np.stack([self.matvec(V[:, j]) for j in range(V.shape[1])], axis=1)

    def project(self, V):
        """``V^T H V`` accumulated over samples."""
        raise NotImplementedError

    def dense(self):
        raise NotImplementedError


class OutputLossCurvature(CurvatureOperator):
    """``(1/N) sum_i J_i^T S_i J_i`` for MSE or softmax cross-entropy."""

    def __init__(self, spec, theta, dataset, loss_kind, dense_cap=DENSE_CAP):
        self.spec, self.theta, self.loss_kind = spec, theta, loss_kind
        self.X, _ = unpack_dataset(dataset)
        self.mask = _mask(theta, spec.n_params)
        self.p = int(self.mask.sum())
        self.Z = forward(spec, theta, self.X)
        self.dense_cap = dense_cap

    def _full(self, v):
        full = np.zeros(self.spec.n_params)
        full[self.mask] = v
        return full

    def _jv(self, v):
        return jvp(self.spec, self.theta, self.X, self._full(v))

    def matvec(self, v):
        v = np.asarray(v, dtype=np.float64)
        if v.shape != (self.p,):
            raise ValueError(f"expected a vector of length {self.p}, got {v.shape}")
        SJv = apply_output_hessian(self.loss_kind, self.Z, self._jv(v))
        return vjp(self.spec, self.theta, self.X, SJv)[self.mask] / len(self.X)

    def _jacobian(self):
        """Explicit masked Jacobian, cached when small enough; None otherwise."""
        if not hasattr(self, "_J"):
            size = len(self.X) * self.Z.shape[1] * self.spec.n_params
            self._J = None
            if size <= JACOBIAN_CACHE:
                self._J = param_jacobian_batch(self.spec, self.theta, self.X)[:, :, self.mask]
        return self._J

    def _jv_block(self, V):
        J = self._jacobian()
        if J is not None:
            return np.einsum("ncp,pl->ncl", J, V)
        return np.stack([self._jv(V[:, j]) for j in range(V.shape[1])], axis=2)

    def _apply_S(self, JV):
        if self.loss_kind == "mse":
            return JV
        return np.stack([apply_output_hessian(self.loss_kind, self.Z, JV[:, :, j])
                         for j in range(JV.shape[2])], axis=2)

    def matmat(self, V):
        V = np.asarray(V, dtype=np.float64)
        J = self._jacobian()
        if J is None:
            return super().matmat(V)
        SJV = self._apply_S(self._jv_block(V))
        return np.einsum("ncp,ncl->pl", J, SJV) / len(self.X)

    def project(self, V):
        JV = self._jv_block(V)  # (N, C, L)
        SJV = self._apply_S(JV)
        S = np.einsum("ncl,nck->lk", JV, SJV) / len(self.X)
        return 0.5 * (S + S.T)

    def dense(self):
        if self.p > self.dense_cap:
            raise ValueError(f"p_eff = {self.p} exceeds the dense cap {self.dense_cap}")
        J = param_jacobian_batch(self.spec, self.theta, self.X)[:, :, self.mask]
        if self.loss_kind == "mse":
            SJ = J
        else:
            P = np.exp(self.Z - self.Z.max(axis=1, keepdims=True))
            P /= P.sum(axis=1, keepdims=True)
            SJ = P[:, :, None] * J - P[:, :, None] * np.einsum("nc,ncp->np", P, J)[:, None, :]
        n, C, p = J.shape
        H = J.reshape(n * C, p).T @ SJ.reshape(n * C, p) / n
        return 0.5 * (H + H.T)


class PdeCurvature(CurvatureOperator):
    """Interior plus penalised boundary Gauss-Newton curvature of a PINN loss.

    Residual rows carry the Monte-Carlo quadrature weights, so the operator is
    ``J_int^T J_int / N_int + beta_bc J_bc^T J_bc / N_bc``, the exact GGN of
    :func:`fipa.problems.pde_local_loss`.
    """

    def __init__(self, spec, theta, interior, boundary, problem, beta_bc, dense_cap=DENSE_CAP):
        if beta_bc <= 0:
            raise ValueError("boundary penalty must be positive")
        if len(interior) == 0 or boundary is None or len(boundary) == 0:
            raise ValueError("PDE curvature needs interior and boundary points")
        mask = _mask(theta, spec.n_params)
        J_int, J_bc = pde_residual_jacobians(spec, theta, problem, interior, boundary)
        self.J_int = J_int[:, mask] / np.sqrt(len(interior))
        self.J_bc = J_bc[:, mask] * np.sqrt(beta_bc / len(boundary))
        self.p = int(mask.sum())
        self.dense_cap = dense_cap

    def parts(self, v):
        """Interior and boundary contributions to ``H v`` separately."""
        v = np.asarray(v, dtype=np.float64)
        if v.shape != (self.p,):
            raise ValueError(f"expected a vector of length {self.p}, got {v.shape}")
        return self.J_int.T @ (self.J_int @ v), self.J_bc.T @ (self.J_bc @ v)

    def matvec(self, v):
        a, b = self.parts(v)
        return a + b

    def matmat(self, V):
        return self.J_int.T @ (self.J_int @ V) + self.J_bc.T @ (self.J_bc @ V)

    def project(self, V):
        A, B = self.J_int @ V, self.J_bc @ V
        S = A.T @ A + B.T @ B
        return 0.5 * (S + S.T)

    def dense(self):
        if self.p > self.dense_cap:
            raise ValueError(f"p_eff = {self.p} exceeds the dense cap {self.dense_cap}")
        return self.J_int.T @ self.J_int + self.J_bc.T @ self.J_bc


def local_curvature(spec, theta, dataset, problem, dense_cap=DENSE_CAP):
    """Curvature operator of a client objective for any problem kind."""
    if problem.kind == "pde":
        return PdeCurvature(spec, theta, dataset.inputs, dataset.boundary, problem,
                            problem.beta_bc, dense_cap)
    return OutputLossCurvature(spec, theta, dataset, problem.loss_kind, dense_cap)


def fim_vector_product(spec, theta, dataset, loss_kind, v):
    """``H v`` sample by sample, without forming ``H``."""
    return OutputLossCurvature(spec, theta, dataset, loss_kind).matvec(v)


def dense_fim(spec, theta, dataset, loss_kind, dense_cap=DENSE_CAP):
    return OutputLossCurvature(spec, theta, dataset, loss_kind, dense_cap).dense()


def pde_fim_vector_product(spec, theta, interior_pts, boundary_pts, problem, beta_bc, v):
    return PdeCurvature(spec, theta, interior_pts, boundary_pts, problem, beta_bc).matvec(v)


def sketch_operator(op, cfg, max_restarts=3):
    """Top-r eigenpairs of ``op`` by subspace iteration and Rayleigh-Ritz projection."""
    p = op.p
    if cfg.L > p:
        raise ValueError(f"sketch width r + s = {cfg.L} exceeds p_eff = {p}")
    for attempt in range(max_restarts + 1):
        rng = np.random.default_rng([cfg.seed, attempt])
        V = rng.standard_normal((p, cfg.L))
        ok = True
        for _ in range(cfg.q):
            W = op.matmat(V)
            if not np.all(np.isfinite(W)):
                ok = False
                break
            V, _ = qr_thin(W)
            if np.abs(V.T @ V - np.eye(cfg.L)).max() > 1e-8:
                ok = False
                break
        if ok:
            break
    else:
        raise RuntimeError(f"subspace iteration broke down after {max_restarts} restarts")
    vals, vecs = sym_eig(op.project(V), sym_tol=1e-8)
    vals, vecs = vals[: cfg.r], vecs[:, : cfg.r]
    lam_max = max(vals.max(initial=0.0), 0.0)
    keep = vals > EIG_FLOOR * lam_max if lam_max > 0 else np.zeros(vals.size, dtype=bool)
    return FisherSketch(V @ vecs[:, keep], vals[keep])


def sketch_fim(spec, theta, dataset, loss_kind, cfg, problem=None):
    """Low-rank sketch of a client's curvature; ``problem`` is required for PDE clients."""
    if problem is not None:
        op = local_curvature(spec, theta, dataset, problem)
    else:
        op = OutputLossCurvature(spec, theta, dataset, loss_kind)
    return sketch_operator(op, cfg)


def exact_sketch(op, r=None):
    """Top-r eigenpairs from the dense matrix (full rank when ``r`` is None)."""
    vals, vecs = sym_eig(op.dense(), sym_tol=1e-8)
    if r is not None:
        vals, vecs = vals[:r], vecs[:, :r]
    lam_max = max(vals.max(initial=0.0), 0.0)
    keep = vals > EIG_FLOOR * lam_max if lam_max > 0 else np.zeros(vals.size, dtype=bool)
    return FisherSketch(vecs[:, keep], vals[keep])
