"""Centralized damped Gauss-Newton reference and federated-vs-centralized gap diagnostics.

The reference map is ``T(theta) = theta - gamma H(theta)^-1 g(theta)`` where
``H`` and ``g`` come from the pooled data of all clients, each client
weighted by ``N_m / N``. For least-squares problems the pooled objective is
``0.5 ||xi(theta)||^2`` with a stacked residual ``xi`` whose rows carry
``sqrt`` of those weights, so ``H = J^T J`` and ``g = J^T xi``.
"""
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .linalg import PINV_RCOND, sym_eig
from .models import ParamVector, forward, param_jacobian_batch
from .problems import pde_residual_jacobians, pde_residuals

SINGULAR_RTOL = 1e-12


class SingularCurvatureError(ValueError):
    def __init__(self, eigenvalues):
        self.eigenvalues = np.asarray(eigenvalues)
        lo, hi = self.eigenvalues[-1], self.eigenvalues[0]
        super().__init__(f"Gauss-Newton matrix is singular: lambda_min = {lo:.3e}, "
                         f"lambda_max = {hi:.3e}, "
                         f"{int(np.sum(self.eigenvalues <= SINGULAR_RTOL * hi))} "
                         f"of {self.eigenvalues.size} eigenvalues below the threshold")


def _as_param(theta):
    return theta if isinstance(theta, ParamVector) else ParamVector(theta)


class AffineResidual:
    """``xi(theta) = A theta - c`` on all coordinates; handy for closed-form checks."""

    def __init__(self, A, c):
        self.A = np.atleast_2d(np.asarray(A, dtype=np.float64))
        self.c = np.asarray(c, dtype=np.float64).reshape(-1)

    def residual_and_jacobian(self, theta):
        theta = _as_param(theta)
        return self.A @ theta.values - self.c, self.A[:, theta.mask]

    def loss(self, theta):
        xi, _ = self.residual_and_jacobian(theta)
        return 0.5 * float(xi @ xi)


class CentralizedSystem:
    """Pooled least-squares system of a federation (MSE or PDE clients)."""

    def __init__(self, spec, problem, clients):
        if problem.loss_kind not in ("mse", "pde"):
            raise ValueError("the Gauss-Newton reference needs a least-squares loss")
        if not clients:
            raise ValueError("no clients")
        self.spec, self.problem = spec, problem
        self.clients = sorted(clients, key=lambda c: c.client_id)
        n = np.array([c.n_samples for c in self.clients], dtype=np.float64)
        self.weights = n / n.sum()

    def _client_rows(self, theta, c, w):
        spec, prob = self.spec, self.problem
        if prob.kind == "pde":
            r_int, r_bc = pde_residuals(spec, theta, prob, c.inputs, c.boundary,
                                        c.targets, c.boundary_targets)
            J_int, J_bc = pde_residual_jacobians(spec, theta, prob, c.inputs, c.boundary)
            s_int = np.sqrt(w / len(r_int))
            xi, J = [s_int * r_int], [s_int * J_int]
            if len(r_bc):
                s_bc = np.sqrt(w * prob.beta_bc / len(r_bc))
                xi.append(s_bc * r_bc)
                J.append(s_bc * J_bc)
            return np.concatenate(xi), np.concatenate(J)
        X = np.asarray(c.inputs, dtype=np.float64)
        X = X[:, None] if X.ndim == 1 else X
        Z = forward(spec, theta, X)
        R = Z - np.asarray(c.targets, dtype=np.float64).reshape(Z.shape)
        Jb = param_jacobian_batch(spec, theta, X)
        s = np.sqrt(w / len(X))
        return s * R.reshape(-1), s * Jb.reshape(-1, spec.n_params)

    def residual_and_jacobian(self, theta):
        theta = _as_param(theta)
        parts = [self._client_rows(theta, c, w) for c, w in zip(self.clients, self.weights)]
        xi = np.concatenate([x for x, _ in parts])
        J = np.concatenate([j for _, j in parts])
        return xi, J[:, theta.mask]

    def loss(self, theta):
        xi, _ = self.residual_and_jacobian(theta)
        return 0.5 * float(xi @ xi)


@dataclass
class GnInfo:
    loss: float
    step_norm: float
    singular: bool
    lam_min: float
    lam_max: float


def gn_direction(H, g, strict=False):
    """``H^-1 g``; a near-singular ``H`` raises in strict mode, else falls back to ``H^+ g``."""
    w, V = sym_eig(H, sym_tol=1e-8)
    lam_max = max(w[0], 0.0)
    singular = not (lam_max > 0 and w[-1] > SINGULAR_RTOL * lam_max)
    if singular and strict:
        raise SingularCurvatureError(w)
    keep = w > (PINV_RCOND if singular else 0.0) * lam_max
    inv = np.zeros_like(w)
    inv[keep] = 1.0 / w[keep]
    return V @ (inv * (V.T @ g)), singular, float(w[-1]), float(w[0])


def gn_map(system, theta, gamma, strict=False):
    """One damped GN step from ``theta``; returns the new parameters and a :class:`GnInfo`."""
    theta = _as_param(theta)
    xi, J = system.residual_and_jacobian(theta)
    H, g = J.T @ J, J.T @ xi
    d, singular, lo, hi = gn_direction(0.5 * (H + H.T), g, strict)
    info = GnInfo(0.5 * float(xi @ xi), float(gamma * np.linalg.norm(d)), singular, lo, hi)
    return theta.apply_update(theta.expand(-gamma * d)), info


@dataclass
class GnState:
    theta: ParamVector
    gamma: float
    k: int = 0
    history: list = field(default_factory=list)  # (k, loss, ||theta - theta*|| or None)
    singular: bool = False

    def __post_init__(self):
        if not 0.0 < self.gamma <= 1.0:
            raise ValueError("damping gamma must lie in (0, 1]")


def _err(theta, theta_star):
    if theta_star is None:
        return None
    return float(np.linalg.norm(_as_param(theta).values - np.asarray(theta_star)))


def gn_step(system, state, strict=False, theta_star=None):
    new, info = gn_map(system, state.theta, state.gamma, strict)
    history = list(state.history)
    if not history:
        history.append((state.k, info.loss, _err(state.theta, theta_star)))
    history.append((state.k + 1, system.loss(new), _err(new, theta_star)))
    return GnState(new, state.gamma, state.k + 1, history, state.singular or info.singular)


def gn_trajectory(system, theta0, gamma, K, strict=False, theta_star=None):
    """States ``theta_GN^(0..K)`` starting from the shared initialization ``theta0``."""
    if K < 1:
        raise ValueError("K must be >= 1")
    states = [GnState(_as_param(theta0).copy(), gamma)]
    for _ in range(K):
        states.append(gn_step(system, states[-1], strict, theta_star))
    return states


def contraction_estimate(values, window=0.5):
    """``exp`` of the least-squares slope of ``log(values)`` over the trailing window."""
    v = np.asarray(values, dtype=np.float64).reshape(-1)
    if v.size < 3:
        raise ValueError("need at least 3 history points")
    n = max(3, int(np.ceil(window * v.size)))
    tail = v[-n:]
    if np.any(~np.isfinite(tail)) or np.any(tail <= 0):
        raise ValueError("contraction estimate needs positive finite values")
    k = np.arange(v.size - n, v.size, dtype=np.float64)
    slope = np.polyfit(k, np.log(tail), 1)[0]
    return float(np.exp(slope))


def trajectory_contraction(states, window=0.5):
    """Contraction rate of a GN trajectory (states or parameter vectors) from its step norms.

    ``||theta_{k+1} - theta_k||`` shrinks at the same rate as the error to the
    (unknown) fixed point, so no reference solution is needed.
    """
    thetas = [_as_param(s.theta if isinstance(s, GnState) else s).values for s in states]
    steps = [np.linalg.norm(b - a) for a, b in zip(thetas, thetas[1:])]
    steps = np.asarray(steps)
    steps = steps[steps > 0]
    return contraction_estimate(steps, window)


@dataclass
class GapRecord:
    k: int
    e_k: float
    delta_k: Optional[float]


def gap_diagnostics(fed_thetas, gn_thetas, system, gamma):
    """``e_k = ||theta_k - theta_GN_k||`` and ``delta_k = ||theta_{k+1} - T(theta_k)||``."""
    fed = [_as_param(t) for t in fed_thetas]
    ref = [_as_param(t) for t in gn_thetas]
    if len(fed) != len(ref):
        raise ValueError(f"trajectory lengths differ: {len(fed)} vs {len(ref)}")
    if len(fed) == 0:
        return []
    if not np.array_equal(fed[0].values, ref[0].values):
        raise ValueError("trajectories must share the starting point")
    out = []
    for k, (a, b) in enumerate(zip(fed, ref)):
        delta = None
        if k + 1 < len(fed):
            t_gn, _ = gn_map(system, a, gamma)
            delta = float(np.linalg.norm(fed[k + 1].values - t_gn.values))
        out.append(GapRecord(k, float(np.linalg.norm(a.values - b.values)), delta))
    return out


def recursion_holds(gaps, rho_hat, slack=1e-8):
    """Per-step truth of ``e_{k+1} <= rho_hat e_k + delta_k + slack``."""
    return np.array([nxt.e_k <= rho_hat * cur.e_k + cur.delta_k + slack
                     for cur, nxt in zip(gaps, gaps[1:])], dtype=bool)
