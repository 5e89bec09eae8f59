"""Build experiments from a validated config and write their metrics."""
import csv
import hashlib
import io
import json
import os
from pathlib import Path

import numpy as np

from .aggregation import ServerConfig
from .config import to_dict
from .curvature import SketchConfig
from .federation import (RoundConfig, Schedule, partition_dirichlet_labels, partition_grid,
                         partition_interval, run_experiment, split_box)
from .gn_reference import CentralizedSystem, gap_diagnostics, gn_trajectory, trajectory_contraction
from .models import MlpSpec, init_params, layer_mask
from .problems import (ClientDataset, classification_problem, draw_training_pool,
                       gaussian_mixture_target, nonlinear_elliptic_problem, pde_client,
                       poisson_problem, sine_target)

OUTPUT_ENV = "FIPA_OUTPUT_DIR"
CSV_COLUMNS = ("k", "rule", "train_loss_mean", "test_metric", "bytes_up", "bytes_down", "r_tot",
               "rho_hat", "e_k", "delta_k", "wall_ms")


def build_problem(cfg):
    p = cfg.problem
    if p.kind == "sine":
        return sine_target(p.frequency)
    if p.kind == "gaussian_mixture":
        return gaussian_mixture_target(seed=cfg.seed)
    if p.kind == "poisson":
        return poisson_problem(p.d, p.beta_bc)
    if p.kind == "nonlinear_elliptic":
        return nonlinear_elliptic_problem(p.reaction, p.reaction_params or None, p.beta_bc)
    return classification_problem(p.n_classes, p.d, p.spread, p.n_test_per_class, cfg.seed,
                                  p.noise)


def build_clients(cfg, problem):
    f, seed = cfg.federation, cfg.seed
    if problem.kind == "classification":
        pool = draw_training_pool(problem, f.n_per_class, seed + 1)
        return partition_dirichlet_labels(pool.inputs, pool.labels, f.n_clients,
                                          f.dirichlet_alpha, seed)
    if problem.kind == "pde":
        rng = np.random.default_rng(seed)
        return [pde_client(problem, m, region, f.n_per_client, f.n_boundary, rng)
                for m, region in enumerate(split_box(problem.d, f.n_clients, 0, f.sizes))]
    if f.partition == "grid":
        return partition_grid(f.grid[0], f.grid[1], f.n_per_client, seed, problem.label)
    return partition_interval((0.0, 1.0), f.n_clients, f.sizes, f.n_per_client, seed,
                              problem.label)


def build_round_config(cfg):
    f = cfg.federation
    sketch = None
    if f.sketch_rank is not None:
        sketch = SketchConfig(f.sketch_rank, f.sketch_oversample, f.sketch_power_iters)
    return RoundConfig(local_epochs=f.local_epochs, local_optimizer=f.local_optimizer, lr=f.lr,
                       batch_size=f.batch_size, prox_mu=f.prox_mu,
                       participation_fraction=f.participation_fraction, sketch=sketch,
                       server=ServerConfig(f.rule, f.beta_reg, f.gamma), seed=cfg.seed,
                       adaptive_energy=f.adaptive_energy)


def build_schedule(cfg):
    f = cfg.federation
    overrides = {}
    if f.warmup_lr is not None:
        overrides["lr"] = f.warmup_lr
    if f.warmup_batch_size is not None:
        overrides["batch_size"] = f.warmup_batch_size
    return Schedule(f.rounds, f.warmup_rounds, ServerConfig(f.rule, f.beta_reg, f.gamma),
                    warmup_overrides=overrides)


def build_experiment(cfg):
    problem = build_problem(cfg)
    spec = MlpSpec(tuple(cfg.model.widths), cfg.model.activation)
    mask = None
    if cfg.model.trainable_layers is not None:
        mask = layer_mask(spec, cfg.model.trainable_layers)
    clients = build_clients(cfg, problem)
    theta0 = init_params(spec, cfg.seed, mask)
    return problem, spec, clients, build_schedule(cfg), build_round_config(cfg), theta0


def attach_gn_diagnostics(records, history, system, gamma, start):
    """Fill ``rho_hat``, ``e_k``, ``delta_k`` for rounds ``start..`` against a GN reference.

    ``history[j]`` holds the parameters before round ``j``; the reference starts
    from ``history[start]`` so ``e_0 = 0`` at the first main-phase round.
    """
    fed = history[start:]
    if len(fed) < 2:
        return
    ref = [s.theta for s in gn_trajectory(system, fed[0], gamma, len(fed) - 1)]
    gaps = gap_diagnostics(fed, ref, system, gamma)
    try:
        rho = trajectory_contraction(ref)
    except ValueError:
        rho = None
    for rec, gap in zip(records[start:], gaps):
        rec.e_k, rec.delta_k, rec.rho_hat = gap.e_k, gap.delta_k, rho


def run_config(cfg, workers=1, timing=None):
    """Run one configured experiment; returns ``(records, final theta)``."""
    problem, spec, clients, schedule, round_cfg, theta0 = build_experiment(cfg)
    gn = cfg.diagnostics.gn_reference
    result = run_experiment(problem, spec, clients, schedule, round_cfg, theta0,
                            keep_history=gn, workers=workers)
    if gn:
        system = CentralizedSystem(spec, problem, clients)
        attach_gn_diagnostics(result.records, result.history, system, cfg.diagnostics.gn_gamma,
                              schedule.warmup_rounds)
    timing = cfg.output.timing if timing is None else timing
    if not timing:
        for rec in result.records:
            rec.wall_ms = 0.0
    return result.records, result.theta


def _fmt(x):
    if x is None:
        return ""
    if isinstance(x, (int, np.integer)) and not isinstance(x, bool):
        return str(int(x))
    return format(float(x), ".17g")


def rounds_csv(records):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_COLUMNS)
    for r in records:
        w.writerow([r.k, r.rule, _fmt(r.train_loss_mean), _fmt(r.test_metric), r.bytes_up,
                    r.bytes_down, r.r_tot, _fmt(r.rho_hat), _fmt(r.e_k), _fmt(r.delta_k),
                    _fmt(r.wall_ms)])
    return buf.getvalue()


def read_rounds_csv(path):
    with open(path, newline="", encoding="utf-8") as fh:
        return list(csv.DictReader(fh))


def build_id():
    """Content hash of the package sources, in the style of a short commit id."""
    h = hashlib.sha1()
    for path in sorted(Path(__file__).parent.glob("*.py")):
        h.update(path.name.encode())
        h.update(path.read_bytes())
    return h.hexdigest()[:12]


def summarize(cfg, records):
    higher_better = cfg.problem.kind == "classification"
    metrics = [r.test_metric for r in records]
    best = max(metrics) if higher_better else min(metrics)
    return {
        "seed": cfg.seed,
        "build_id": build_id(),
        "n_rounds": len(records),
        "metric": {"classification": "accuracy", "poisson": "relative_l2",
                   "nonlinear_elliptic": "relative_l2"}.get(cfg.problem.kind, "mse"),
        "final_test_metric": metrics[-1],
        "best_test_metric": best,
        "best_round": int(records[metrics.index(best)].k),
        "final_train_loss_mean": records[-1].train_loss_mean,
        "total_bytes_up": int(sum(r.bytes_up for r in records)),
        "total_bytes_down": int(sum(r.bytes_down for r in records)),
        "config": to_dict(cfg),
    }


def atomic_write(path, text):
    """Write via a temporary file in the same directory, then rename over ``path``."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(f".{path.name}.tmp{os.getpid()}")
    with open(tmp, "w", encoding="utf-8", newline="") as fh:
        fh.write(text)
        fh.flush()
        os.fsync(fh.fileno())
    os.replace(tmp, path)


def resolve_output_dir(cfg, flag=None):
    """``--out`` flag, then the environment override, then the config value."""
    return Path(flag or os.environ.get(OUTPUT_ENV) or cfg.output.directory)


def write_outputs(cfg, records, out_dir):
    out_dir = Path(out_dir)
    written = []
    if "csv" in cfg.output.formats:
        atomic_write(out_dir / "rounds.csv", rounds_csv(records))
        written.append(out_dir / "rounds.csv")
    if "json" in cfg.output.formats:
        atomic_write(out_dir / "summary.json",
                     json.dumps(summarize(cfg, records), indent=2, sort_keys=True) + "\n")
        written.append(out_dir / "summary.json")
    return written
