"""Experiment configuration: YAML documents validated into typed blocks.

Every block rejects unknown keys. Validation collects all problems before
reporting, each tagged with a dotted path such as
``federation.participation_fraction``.
"""
from typing import List, Literal, Optional

import yaml
from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator


class ConfigError(ValueError):
    """All validation failures of one document, as ``(path, message)`` pairs."""

    def __init__(self, errors):
        self.errors = list(errors)
        super().__init__("; ".join(f"{p}: {m}" for p, m in self.errors))

    def as_record(self):
        return {"error": "invalid_config",
                "errors": [{"path": p, "message": m} for p, m in self.errors]}


class _Block(BaseModel):
    model_config = ConfigDict(extra="forbid", validate_default=True)


class ProblemBlock(_Block):
    kind: Literal["sine", "gaussian_mixture", "poisson", "nonlinear_elliptic",
                  "classification"] = "sine"
    frequency: int = Field(2, ge=1)  # sin(n pi x)
    d: int = Field(1, ge=1, le=3)  # PDE dimension / classification input dimension
    reaction: Literal["allen_cahn", "bratu", "fisher", "reaction_diffusion"] = "allen_cahn"
    reaction_params: dict = Field(default_factory=dict)
    beta_bc: float = Field(100.0, gt=0)
    n_classes: int = Field(10, ge=2)
    spread: float = Field(3.0, gt=0)
    noise: float = Field(1.0, gt=0)
    n_test_per_class: int = Field(200, ge=1)


class ModelBlock(_Block):
    widths: List[int] = Field(default_factory=lambda: [1, 32, 32, 1], min_length=2)
    activation: Literal["tanh", "identity", "relu"] = "tanh"
    trainable_layers: Optional[List[int]] = None

    @model_validator(mode="after")
    def _check(self):
        if any(w < 1 for w in self.widths):
            raise ValueError("layer widths must be positive")
        if self.trainable_layers is not None:
            n = len(self.widths) - 1
            if not self.trainable_layers or any(not 0 <= i < n for i in self.trainable_layers):
                raise ValueError(f"trainable_layers must be a non-empty subset of 0..{n - 1}")
        return self


class FederationBlock(_Block):
    n_clients: int = Field(2, ge=1)
    partition: Literal["interval", "grid", "slabs", "dirichlet"] = "interval"
    sizes: Optional[List[float]] = None  # relative subdomain sizes
    grid: Optional[List[int]] = None  # rows, cols for the grid partition
    n_per_client: int = Field(1000, ge=1)
    n_boundary: int = Field(64, ge=0)  # PDE boundary points per client (d >= 2)
    dirichlet_alpha: float = Field(0.05, gt=0)
    n_per_class: int = Field(300, ge=1)  # classification training pool
    rounds: int = Field(300, ge=1)
    warmup_rounds: int = Field(0, ge=0)
    rule: Literal["fedavg", "fipa_dense", "fipa_qr"] = "fipa_dense"
    beta_reg: float = Field(0.0, ge=0)
    gamma: float = Field(1.0, gt=0)
    local_epochs: int = Field(5, ge=0)
    local_optimizer: Literal["adam", "sgd"] = "adam"
    lr: float = Field(1e-3, gt=0)
    batch_size: Optional[int] = Field(None, ge=1)
    prox_mu: float = Field(0.0, ge=0)
    participation_fraction: float = Field(1.0, gt=0, le=1)
    warmup_lr: Optional[float] = Field(None, gt=0)
    warmup_batch_size: Optional[int] = Field(None, ge=1)
    sketch_rank: Optional[int] = Field(None, ge=1)  # None: exact full-rank curvature
    sketch_oversample: int = Field(5, ge=0)
    sketch_power_iters: int = Field(4, ge=1)
    adaptive_energy: Optional[float] = Field(None, gt=0, lt=1)

    @model_validator(mode="after")
    def _check(self):
        if self.warmup_rounds > self.rounds:
            raise ValueError("warmup_rounds exceeds rounds")
        if self.rule == "fipa_qr" and self.beta_reg <= 0:
            raise ValueError("rule fipa_qr needs beta_reg > 0")
        if self.partition == "grid" and (self.grid is None or len(self.grid) != 2
                                         or self.grid[0] * self.grid[1] != self.n_clients):
            raise ValueError("grid partition needs grid = [rows, cols] with rows * cols = n_clients")
        if self.sizes is not None and (len(self.sizes) != self.n_clients
                                       or any(s <= 0 for s in self.sizes)):
            raise ValueError("sizes needs one positive entry per client")
        return self


class DiagnosticsBlock(_Block):
    gn_reference: bool = False
    gn_gamma: float = Field(0.5, gt=0, le=1)


class OutputBlock(_Block):
    directory: str = "runs/default"
    formats: List[Literal["csv", "json"]] = Field(default_factory=lambda: ["csv", "json"])
    timing: bool = False  # wall-clock column; off keeps rounds.csv byte-reproducible


class ExperimentConfig(_Block):
    seed: int = Field(0, ge=0)
    problem: ProblemBlock = Field(default_factory=ProblemBlock)
    model: ModelBlock = Field(default_factory=ModelBlock)
    federation: FederationBlock = Field(default_factory=FederationBlock)
    diagnostics: DiagnosticsBlock = Field(default_factory=DiagnosticsBlock)
    output: OutputBlock = Field(default_factory=OutputBlock)

    @model_validator(mode="after")
    def _check(self):
        p, m, f = self.problem, self.model, self.federation
        d_in = {"sine": 1, "gaussian_mixture": 2}.get(p.kind, p.d)
        d_out = p.n_classes if p.kind == "classification" else 1
        if m.widths[0] != d_in or m.widths[-1] != d_out:
            raise ValueError(f"model.widths must start with {d_in} and end with {d_out} "
                             f"for problem {p.kind}")
        if p.kind in ("poisson", "nonlinear_elliptic") and m.activation != "tanh":
            raise ValueError("PDE problems need a twice-differentiable activation (tanh)")
        if p.kind == "nonlinear_elliptic" and p.d != 1:
            raise ValueError("nonlinear elliptic problems are one-dimensional")
        if self.diagnostics.gn_reference and p.kind == "classification":
            raise ValueError("the Gauss-Newton reference needs a least-squares problem")
        allowed = {"sine": ("interval",), "gaussian_mixture": ("grid",),
                   "poisson": ("slabs", "interval"), "nonlinear_elliptic": ("slabs", "interval"),
                   "classification": ("dirichlet",)}[p.kind]
        if f.partition not in allowed:
            raise ValueError(f"partition {f.partition!r} does not apply to {p.kind}; "
                             f"use one of {list(allowed)}")
        return self


def _path(loc):
    return ".".join(str(x) for x in loc) or "<root>"


def _format_errors(exc):
    out = []
    for e in exc.errors():
        loc = [x for x in e["loc"]]
        msg = e["msg"]
        if e["type"] == "extra_forbidden":
            msg = "unknown key"
        out.append((_path(loc), msg.removeprefix("Value error, ")))
    return out


def parse_config(text):
    """Validated :class:`ExperimentConfig` from YAML text; raises :class:`ConfigError`."""
    try:
        data = yaml.safe_load(text) if text.strip() else {}
    except yaml.YAMLError as exc:
        raise ConfigError([("<document>", f"not valid YAML: {exc}")]) from None
    if data is None:
        data = {}
    if not isinstance(data, dict):
        raise ConfigError([("<root>", "expected a mapping of sections")])
    try:
        return ExperimentConfig.model_validate(data)
    except ValidationError as exc:
        raise ConfigError(_format_errors(exc)) from None


def load_config(path):
    with open(path, encoding="utf-8") as fh:
        return parse_config(fh.read())


def to_dict(cfg):
    return cfg.model_dump(mode="json")


def serialize_config(cfg):
    """YAML echo of every effective value; ``parse_config`` of it gives ``cfg`` back."""
    return yaml.safe_dump(to_dict(cfg), sort_keys=False)


def set_path(cfg, dotted, value):
    """Copy of ``cfg`` with one dotted key replaced, revalidated."""
    data = to_dict(cfg)
    node = data
    keys = dotted.split(".")
    for key in keys[:-1]:
        if not isinstance(node, dict) or key not in node:
            raise ConfigError([(dotted, "unknown key")])
        node = node[key]
    if not isinstance(node, dict) or keys[-1] not in node:
        raise ConfigError([(dotted, "unknown key")])
    node[keys[-1]] = value
    try:
        return ExperimentConfig.model_validate(data)
    except ValidationError as exc:
        raise ConfigError(_format_errors(exc)) from None
