"""Round orchestration for simulated federated training."""
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

from .aggregation import (BYTES_PER_SCALAR, ClientUpdate, ServerConfig, SolveDiagnostics, aggregate,
                          upload_bytes)
from .curvature import SketchConfig, exact_sketch, local_curvature, sketch_operator
from .models import ParamVector, loss_and_gradient
from .problems import ClientDataset, eval_metric, pde_residual_jacobians, pde_residuals

OPTIMIZERS = ("sgd", "adam")


# -- partitioners -------------------------------------------------------------

def _labels(target, X):
    if target is None:
        return np.zeros((len(X), 0))
    return np.asarray(target(X), dtype=np.float64).reshape(len(X), -1)


def interval_bounds(domain, M, sizes=None):
    a, b = domain
    if M < 1:
        raise ValueError("need at least one client")
    if sizes is None:
        sizes = np.full(M, 1.0 / M)
    sizes = np.asarray(sizes, dtype=np.float64)
    if sizes.shape != (M,) or np.any(sizes <= 0) or abs(sizes.sum() - 1.0) > 1e-9:
        raise ValueError(f"proportions must be {M} positive numbers summing to 1")
    edges = a + (b - a) * np.concatenate([[0.0], np.cumsum(sizes)])
    edges[-1] = b
    return edges


def partition_interval(domain, M, sizes=None, n_per_client=100, seed=0, target=None):
    """Client ``m`` samples uniformly from the ``m``-th subinterval of ``domain``."""
    edges = interval_bounds(domain, M, sizes)
    rng = np.random.default_rng(seed)
    clients = []
    for m in range(M):
        X = edges[m] + (edges[m + 1] - edges[m]) * rng.random((n_per_client, 1))
        clients.append(ClientDataset(m, X, _labels(target, X), ((edges[m], edges[m + 1]),)))
    return clients


def grid_cells(rows, cols):
    """Cell of client ``i * cols + j`` is ``[j/cols, (j+1)/cols] x [i/rows, (i+1)/rows]``."""
    if rows < 1 or cols < 1:
        raise ValueError("grid needs at least one row and one column")
    return [((j / cols, (j + 1) / cols), (i / rows, (i + 1) / rows))
            for i in range(rows) for j in range(cols)]


def partition_grid(rows, cols, n_per_client=100, seed=0, target=None):
    rng = np.random.default_rng(seed)
    clients = []
    for m, cell in enumerate(grid_cells(rows, cols)):
        lo = np.array([c[0] for c in cell])
        hi = np.array([c[1] for c in cell])
        X = lo + (hi - lo) * rng.random((n_per_client, 2))
        clients.append(ClientDataset(m, X, _labels(target, X), cell))
    return clients


def split_box(d, M=2, axis=0, sizes=None):
    """Split ``[0, 1]^d`` into ``M`` slabs along one coordinate."""
    edges = interval_bounds((0.0, 1.0), M, sizes)
    regions = []
    for m in range(M):
        region = [(0.0, 1.0)] * d
        region[axis] = (float(edges[m]), float(edges[m + 1]))
        regions.append(tuple(region))
    return regions


def _largest_remainder(props, n):
    raw = props * n
    counts = np.floor(raw).astype(int)
    short = n - counts.sum()
    if short > 0:
        order = np.argsort(-(raw - counts), kind="stable")
        counts[order[:short]] += 1
    return counts


def partition_dirichlet_labels(X, y, M, alpha, seed=0):
    """Label-skewed split: per-label client shares drawn from ``Dirichlet(alpha)``."""
    if alpha <= 0:
        raise ValueError("alpha must be positive")
    if M < 1:
        raise ValueError("need at least one client")
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y).astype(int)
    if len(y) < M:
        raise ValueError(f"{len(y)} samples cannot fill {M} clients")
    rng = np.random.default_rng(seed)
    owner = np.empty(len(y), dtype=int)
    for c in np.unique(y):
        idx = rng.permutation(np.flatnonzero(y == c))
        counts = _largest_remainder(rng.dirichlet(alpha * np.ones(M)), len(idx))
        owner[idx] = np.repeat(np.arange(M), counts)
    for m in range(M):
        if not np.any(owner == m):
            sizes = np.bincount(owner, minlength=M)
            donor = int(np.argmax(sizes))
            owner[np.flatnonzero(owner == donor)[-1]] = m
    return [ClientDataset(m, X[owner == m], y[owner == m]) for m in range(M)]


# -- local training -----------------------------------------------------------

def local_loss_and_gradient(spec, theta, dataset, problem):
    """Mean local loss and its full-length gradient for any problem kind."""
    if problem.kind != "pde":
        return loss_and_gradient(spec, theta, dataset, problem.loss_kind)
    Xb, gb = dataset.boundary, dataset.boundary_targets
    r_int, r_bc = pde_residuals(spec, theta, problem, dataset.inputs, Xb,
                                dataset.targets, gb)
    J_int, J_bc = pde_residual_jacobians(spec, theta, problem, dataset.inputs, Xb)
    beta = problem.beta_bc
    loss = 0.5 * np.mean(r_int ** 2)
    grad = J_int.T @ r_int / len(r_int)
    if len(r_bc):
        loss += 0.5 * beta * np.mean(r_bc ** 2)
        grad += beta * (J_bc.T @ r_bc) / len(r_bc)
    if isinstance(theta, ParamVector):
        grad[~theta.mask] = 0.0
    return float(loss), grad


@dataclass
class RoundConfig:
    local_epochs: int = 1
    local_optimizer: str = "adam"
    lr: float = 1e-3
    batch_size: Optional[int] = None  # None means full batch
    prox_mu: float = 0.0
    participation_fraction: float = 1.0
    sketch: Optional[SketchConfig] = None  # None with a FIPA rule means exact full rank
    server: ServerConfig = field(default_factory=ServerConfig)
    seed: int = 0
    adaptive_energy: Optional[float] = None

    def __post_init__(self):
        if self.local_epochs < 0:
            raise ValueError("local_epochs must be >= 0")
        if self.local_optimizer not in OPTIMIZERS:
            raise ValueError(f"unknown optimizer {self.local_optimizer!r}")
        if not 0.0 < self.participation_fraction <= 1.0:
            raise ValueError("participation_fraction must be in (0, 1]")
        if self.prox_mu < 0:
            raise ValueError("prox_mu must be >= 0")
        if self.adaptive_energy is not None and not 0.0 < self.adaptive_energy < 1.0:
            raise ValueError("adaptive_energy must be in (0, 1)")


def local_train(spec, theta, dataset, cfg, problem, rng=None):
    """Run ``cfg.local_epochs`` epochs from ``theta``; return the update and the final loss.

    The objective is the local loss plus ``prox_mu / 2 ||theta - theta_start||^2``.
    Optimizer state starts fresh on every call.
    """
    rng = np.random.default_rng(cfg.seed) if rng is None else rng
    start = theta.values.copy()
    mask = theta.mask
    current = theta.copy()
    n = dataset.n_samples
    bs = n if cfg.batch_size is None else min(int(cfg.batch_size), n)
    m1 = np.zeros_like(start)
    m2 = np.zeros_like(start)
    b1, b2, eps = 0.9, 0.999, 1e-8
    t = 0
    for _ in range(cfg.local_epochs):
        order = rng.permutation(n) if bs < n else np.arange(n)
        for lo in range(0, n, bs):
            batch = dataset if bs == n else dataset.subset(order[lo:lo + bs])
            _, g = local_loss_and_gradient(spec, current, batch, problem)
            if cfg.prox_mu > 0:
                g = g + cfg.prox_mu * (current.values - start)
            g[~mask] = 0.0
            if cfg.local_optimizer == "sgd":
                step = -cfg.lr * g
            else:
                t += 1
                m1 = b1 * m1 + (1 - b1) * g
                m2 = b2 * m2 + (1 - b2) * g * g
                step = -cfg.lr * (m1 / (1 - b1 ** t)) / (np.sqrt(m2 / (1 - b2 ** t)) + eps)
            values = current.values.copy()
            values[mask] += step[mask]
            current = ParamVector(values, mask)
    delta = current.values - start
    delta[~mask] = 0.0
    final_loss, _ = local_loss_and_gradient(spec, current, dataset, problem)
    return delta, final_loss


def adaptive_rank(eigenvalues, energy_threshold=0.99):
    """Smallest ``r`` whose leading eigenvalues hold the requested share of the spectrum.

    Returns ``(r, fallback)``; an all-zero spectrum gives ``(0, True)``.
    """
    lam = np.asarray(eigenvalues, dtype=np.float64)
    if not 0.0 < energy_threshold < 1.0:
        raise ValueError("energy threshold must be in (0, 1)")
    if lam.size and (np.any(np.diff(lam) > 1e-12 * max(abs(lam[0]), 1.0)) or lam.min() < 0):
        raise ValueError("eigenvalues must be non-negative and non-increasing")
    total = lam.sum()
    if lam.size == 0 or total <= 0:
        return 0, True
    cum = np.cumsum(lam)
    r = int(np.searchsorted(cum, energy_threshold * total - 1e-15 * total) + 1)
    return max(1, min(r, lam.size)), False


# -- rounds -------------------------------------------------------------------

@dataclass
class RoundRecord:
    k: int
    rule: str
    train_losses: dict
    test_metric: float
    bytes_up: int
    bytes_down: int
    ranks: dict
    participants: list
    wall_ms: float = 0.0
    diagnostics: SolveDiagnostics = field(default_factory=SolveDiagnostics)
    rho_hat: Optional[float] = None
    e_k: Optional[float] = None
    delta_k: Optional[float] = None

    @property
    def train_loss_mean(self):
        return float(np.mean(list(self.train_losses.values())))

    @property
    def r_tot(self):
        return int(sum(self.ranks.values()))


def sample_participants(n_clients, fraction, seed, k):
    m = max(1, int(round(fraction * n_clients)))
    if m >= n_clients:
        return list(range(n_clients))
    rng = np.random.default_rng([seed, k, 7])
    return sorted(int(i) for i in rng.choice(n_clients, size=m, replace=False))


def client_sketch(spec, theta, dataset, problem, cfg, k):
    """Curvature sketch of one client at the broadcast parameters."""
    op = local_curvature(spec, theta, dataset, problem)
    if cfg.sketch is None:
        sketch = exact_sketch(op)
    else:
        sk = replace(cfg.sketch, seed=int(np.random.default_rng(
            [cfg.seed, k, dataset.client_id, 3]).integers(2 ** 31)))
        sketch = sketch_operator(op, sk)
    if cfg.adaptive_energy is not None:
        r, _ = adaptive_rank(sketch.lam, cfg.adaptive_energy)
        sketch = sketch.truncate(r)
    return sketch


def _client_work(spec, theta, c, cfg, problem, k, fipa):
    # every client draws from its own seeded stream, so scheduling order is irrelevant
    rng = np.random.default_rng([cfg.seed, k, c.client_id])
    delta, loss = local_train(spec, theta, c, cfg, problem, rng)
    sketch = client_sketch(spec, theta, c, problem, cfg, k) if fipa else None
    return delta, loss, sketch


def run_round(spec, theta, clients, cfg, problem, k=0, workers=1):
    """One communication round: broadcast, local training, optional sketches, aggregation."""
    t0 = time.perf_counter()
    ids = sample_participants(len(clients), cfg.participation_fraction, cfg.seed, k)
    chosen = [clients[i] for i in ids]
    n_total = sum(c.n_samples for c in chosen)
    fipa = cfg.server.rule != "fedavg"
    work = lambda c: _client_work(spec, theta, c, cfg, problem, k, fipa)
    if workers > 1 and len(chosen) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(work, chosen))
    else:
        results = [work(c) for c in chosen]
    updates, losses, ranks = [], {}, {}
    for c, (delta, loss, sketch) in zip(chosen, results):
        if sketch is not None:
            sketch.weight = c.n_samples / n_total
            ranks[c.client_id] = sketch.r
        updates.append(ClientUpdate(c.client_id, c.n_samples, delta, sketch, p_eff=theta.p_eff))
        losses[c.client_id] = loss
    new_theta, diag = aggregate(theta, updates, cfg.server)
    record = RoundRecord(
        k=k,
        rule=cfg.server.rule,
        train_losses=losses,
        test_metric=eval_metric(problem, spec, new_theta),
        bytes_up=sum(u.bytes_up for u in updates),
        bytes_down=BYTES_PER_SCALAR * theta.p * len(chosen),
        ranks=ranks,
        participants=ids,
        wall_ms=1e3 * (time.perf_counter() - t0),
        diagnostics=diag,
    )
    return new_theta, record


@dataclass
class Schedule:
    total_rounds: int
    warmup_rounds: int = 0
    main_rule: ServerConfig = field(default_factory=ServerConfig)
    warmup_rule: str = "fedavg"
    warmup_overrides: dict = field(default_factory=dict)  # RoundConfig fields for warmup rounds

    def __post_init__(self):
        if not 0 <= self.warmup_rounds <= self.total_rounds:
            raise ValueError("warmup_rounds must lie in [0, total_rounds]")
        if self.warmup_rule != "fedavg":
            raise ValueError("only FedAvg warmup is supported")

    def server_for(self, k):
        if k < self.warmup_rounds:
            return ServerConfig("fedavg")
        return self.main_rule

    def round_config(self, cfg, k):
        if k < self.warmup_rounds:
            return replace(cfg, server=ServerConfig("fedavg"), **self.warmup_overrides)
        return replace(cfg, server=self.main_rule)


@dataclass
class ExperimentResult:
    records: list
    theta: ParamVector
    history: list  # parameters before round 0, after round 0, ...


def run_experiment(problem, spec, clients, schedule, cfg, theta0, start_round=0,
                   keep_history=False, callback=None, workers=1):
    """Warmup rounds with FedAvg, then the main rule, evaluating every round."""
    theta = theta0.copy()
    records = []
    history = [theta.copy()] if keep_history else []
    for k in range(schedule.total_rounds):
        round_cfg = schedule.round_config(cfg, k)
        theta, rec = run_round(spec, theta, clients, round_cfg, problem, start_round + k, workers)
        records.append(rec)
        if keep_history:
            history.append(theta.copy())
        if callback is not None:
            callback(rec)
    return ExperimentResult(records, theta, history)


def compare_from_checkpoint(problem, spec, clients, cfg, theta, rounds, rules,
                            start_round=0, keep_history=False):
    """Continue training from one checkpoint under several server rules."""
    out = {}
    for name, server in rules.items():
        sched = Schedule(rounds, 0, server)
        out[name] = run_experiment(problem, spec, clients, sched, cfg, theta,
                                   start_round=start_round, keep_history=keep_history)
    return out


def expected_round_bytes(rule, p, p_eff, ranks):
    """Analytic ``(bytes_up, bytes_down)`` of a round given the per-client ranks."""
    n = len(ranks)
    if rule == "fedavg":
        up = n * upload_bytes(p_eff)
    else:
        up = sum(upload_bytes(p_eff, r) for r in ranks)
    return up, BYTES_PER_SCALAR * p * n
