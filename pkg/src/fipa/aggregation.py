"""Server aggregation: FedAvg and Fisher-informed parameterwise aggregation.

FIPA merges client updates with matrix weights
``B_m = (N_m/N) Hhat^+ Hhat_m`` built from the clients' low-rank curvature
sketches. The dense rule materialises ``p x p`` matrices and serves as the
reference for the QR rule, which only works in the stacked sketch subspace.
"""
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .curvature import DENSE_CAP, FisherSketch
from .linalg import pinv_psd, qr_thin, solve_regularized, sym_eig
from .models import ParamVector

RULES = ("fedavg", "fipa_dense", "fipa_qr")
BYTES_PER_SCALAR = 8
STACKED_CAP = 5000


@dataclass
class ClientUpdate:
    client_id: int
    n_samples: int
    delta: np.ndarray  # full length p, zeros on frozen coordinates
    sketch: Optional[FisherSketch] = None
    bytes_up: int = field(default=None)
    p_eff: Optional[int] = None

    def __post_init__(self):
        self.delta = np.asarray(self.delta, dtype=np.float64)
        if self.p_eff is None:
            self.p_eff = self.sketch.p if self.sketch is not None else self.delta.size
        if self.bytes_up is None:
            self.bytes_up = upload_bytes(self.p_eff, self.sketch.r if self.sketch else None)


def upload_bytes(p_eff, r=None):
    """Payload of one client: the update, plus ``U`` and ``lambda`` when a sketch is sent."""
    if r is None:
        return BYTES_PER_SCALAR * p_eff
    return BYTES_PER_SCALAR * (p_eff + p_eff * r + r)


@dataclass
class ServerConfig:
    rule: str = "fedavg"
    beta_reg: float = 0.0
    gamma: float = 1.0

    def __post_init__(self):
        if self.rule not in RULES:
            raise ValueError(f"unknown aggregation rule {self.rule!r}")
        if self.beta_reg < 0:
            raise ValueError("beta_reg must be non-negative")
        if self.gamma <= 0:
            raise ValueError("gamma must be positive")
        if self.rule == "fipa_qr" and self.beta_reg <= 0:
            raise ValueError("fipa_qr needs beta_reg > 0; use fipa_dense for beta_reg = 0")


@dataclass
class SolveDiagnostics:
    r_tot: int = 0
    condition: float = float("nan")
    off_subspace: float = float("nan")
    fallback: bool = False


def _sorted(updates):
    if not updates:
        raise ValueError("no client updates to aggregate")
    p = updates[0].delta.size
    for u in updates:
        if u.delta.size != p:
            raise ValueError("client updates have inconsistent dimensions")
    return sorted(updates, key=lambda u: u.client_id)


def client_weights(updates):
    n = np.array([u.n_samples for u in updates], dtype=np.float64)
    return n / n.sum()


def fedavg_aggregate(theta, updates):
    """``theta + sum_m (N_m / N) delta_m``, accumulated in client-id order."""
    updates = _sorted(updates)
    if updates[0].delta.size != theta.p:
        raise ValueError("update length does not match the model")
    step = np.zeros(theta.p)
    for w, u in zip(client_weights(updates), updates):
        step += w * u.delta
    return theta.apply_update(step)


def _weighted_sketches(sketches, weights):
    if weights is None:
        weights = [s.weight for s in sketches]
    if any(w is None for w in weights):
        raise ValueError("every sketch needs an aggregation weight N_m / N")
    return list(sketches), np.asarray(weights, dtype=np.float64)


def aggregate_curvature(sketches, weights=None):
    sketches, w = _weighted_sketches(sketches, weights)
    p = sketches[0].p
    if p > DENSE_CAP:
        raise ValueError(f"p = {p} exceeds the dense cap {DENSE_CAP}")
    H = np.zeros((p, p))
    for wm, s in zip(w, sketches):
        H += wm * s.dense()
    return H


def fipa_weights_dense(sketches, weights=None):
    """Matrix weights ``B_m = w_m Hhat^+ Hhat_m`` with ``Hhat = sum_m w_m Hhat_m``."""
    sketches, w = _weighted_sketches(sketches, weights)
    if len({s.p for s in sketches}) != 1:
        raise ValueError("sketches disagree on the parameter dimension")
    H_pinv = pinv_psd(aggregate_curvature(sketches, w))
    return [wm * H_pinv @ s.dense() for wm, s in zip(w, sketches)]


def _reduced_deltas(theta, updates):
    return [theta.restrict(u.delta) for u in updates]


def _missing_sketch(updates):
    for u in updates:
        if u.sketch is None:
            raise ValueError(f"client {u.client_id} sent no curvature sketch")


def _rhs(updates, deltas, w):
    """``b = sum_m w_m U_m Lambda_m U_m^T delta_m``."""
    b = np.zeros(deltas[0].size)
    for wm, u, d in zip(w, updates, deltas):
        s = u.sketch
        b += wm * (s.U @ (s.lam * (s.U.T @ d)))
    return b


def fipa_aggregate_dense(theta, updates, cfg):
    """Dense FIPA: ``theta + gamma Hhat^+ b`` (``(Hhat + beta I)^-1`` when ``beta_reg > 0``)."""
    updates = _sorted(updates)
    _missing_sketch(updates)
    w = client_weights(updates)
    if sum(u.sketch.r for u in updates) == 0:
        return fedavg_aggregate(theta, updates)
    H = aggregate_curvature([u.sketch for u in updates], w)
    b = _rhs(updates, _reduced_deltas(theta, updates), w)
    if cfg.beta_reg > 0:
        step = solve_regularized(H, cfg.beta_reg, b)
    else:
        step = pinv_psd(H) @ b
    return theta.apply_update(cfg.gamma * step)


def fipa_aggregate_qr(theta, updates, cfg, stacked_cap=STACKED_CAP):
    """FIPA in the stacked sketch subspace via a thin QR of ``[U_1 ... U_M]``.

    Solves ``(K + beta I) z = Q^T b`` with ``K = R Sigma R^T`` and maps back as
    ``Q z + (b - Q Q^T b) / beta``, which equals ``(Hhat + beta I)^-1 b``.
    """
    if cfg.beta_reg <= 0:
        raise ValueError("fipa_qr needs beta_reg > 0; use the dense rule for beta = 0")
    updates = _sorted(updates)
    _missing_sketch(updates)
    w = client_weights(updates)
    r_tot = sum(u.sketch.r for u in updates)
    if r_tot == 0:
        return fedavg_aggregate(theta, updates), SolveDiagnostics(0, fallback=True)
    if r_tot > stacked_cap:
        raise ValueError(f"stacked rank {r_tot} exceeds the cap {stacked_cap}")
    V = np.concatenate([u.sketch.U for u in updates], axis=1)
    sigma = np.concatenate([wm * u.sketch.lam for wm, u in zip(w, updates)])
    p = V.shape[0]
    if r_tot <= p:
        Q, R = qr_thin(V)
    else:
        # more sketch columns than parameters: the whole space is the subspace
        Q, R = np.eye(p), V
    K = (R * sigma) @ R.T
    K = 0.5 * (K + K.T)
    b = _rhs(updates, _reduced_deltas(theta, updates), w)
    Qb = Q.T @ b
    z = solve_regularized(K, cfg.beta_reg, Qb)
    resid = b - Q @ Qb
    step = Q @ z + resid / cfg.beta_reg
    eig = sym_eig(K, sym_tol=1e-8).values
    bnorm = np.linalg.norm(b)
    diag = SolveDiagnostics(
        r_tot=r_tot,
        condition=float((max(eig[0], 0.0) + cfg.beta_reg) / (max(eig[-1], 0.0) + cfg.beta_reg)),
        off_subspace=float(np.linalg.norm(resid) / bnorm) if bnorm > 0 else 0.0,
    )
    return theta.apply_update(cfg.gamma * step), diag


def aggregate(theta, updates, cfg):
    """Dispatch on ``cfg.rule``; always returns ``(theta, SolveDiagnostics)``."""
    if cfg.rule == "fedavg":
        return fedavg_aggregate(theta, updates), SolveDiagnostics()
    if cfg.rule == "fipa_dense":
        updates = _sorted(updates)
        r_tot = sum(u.sketch.r for u in updates if u.sketch is not None)
        new = fipa_aggregate_dense(theta, updates, cfg)
        return new, SolveDiagnostics(r_tot=r_tot, fallback=r_tot == 0)
    return fipa_aggregate_qr(theta, updates, cfg)
