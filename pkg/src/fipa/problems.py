"""Regression, PDE and classification tasks with their samplers and test metrics."""
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .models import forward, input_laplacian_batch, laplacian_residual_jacobian

PROBLEM_KINDS = ("regression", "pde", "classification")
ELLIPTIC_KINDS = ("allen_cahn", "bratu", "fisher", "reaction_diffusion")


@dataclass
class ClientDataset:
    """One client's private data.

    For PDE clients ``inputs``/``targets`` hold interior collocation points and the
    source term there, and ``boundary``/``boundary_targets`` the Dirichlet data.
    """

    client_id: int
    inputs: np.ndarray
    targets: np.ndarray
    region: Optional[tuple] = None
    boundary: Optional[np.ndarray] = None
    boundary_targets: Optional[np.ndarray] = None

    def __post_init__(self):
        self.inputs = np.asarray(self.inputs, dtype=np.float64)
        if self.inputs.ndim == 1:
            self.inputs = self.inputs[:, None]
        if len(self.inputs) == 0:
            raise ValueError(f"client {self.client_id} has no samples")
        self.targets = np.asarray(self.targets)

    @property
    def n_samples(self):
        return len(self.inputs)

    def subset(self, idx):
        return ClientDataset(self.client_id, self.inputs[idx], self.targets[idx], self.region,
                             self.boundary, self.boundary_targets)


@dataclass
class Problem:
    kind: str
    d: int
    C: int
    loss_kind: str
    name: str = ""
    exact: Optional[Callable] = None  # (N, d) -> (N,) or (N, C)
    source: Optional[Callable] = None  # PDE right-hand side f
    reaction: Optional[Callable] = None  # G(u)
    reaction_prime: Optional[Callable] = None  # G'(u)
    boundary_value: Optional[Callable] = None  # g_D
    test_inputs: Optional[np.ndarray] = None
    test_targets: Optional[np.ndarray] = None
    beta_bc: float = 100.0
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in PROBLEM_KINDS:
            raise ValueError(f"unknown problem kind {self.kind!r}")
        if self.kind == "pde" and (self.C != 1 or self.exact is None):
            raise ValueError("PDE problems need a scalar output and an exact solution")

    def label(self, X):
        """Regression targets ``(N, C)`` for inputs ``X``."""
        return np.asarray(self.exact(X), dtype=np.float64).reshape(len(X), self.C)


def _unit_grid(d, n_per_dim):
    axes = [np.linspace(0.0, 1.0, n_per_dim)] * d
    mesh = np.meshgrid(*axes, indexing="ij")
    return np.stack([m.ravel() for m in mesh], axis=1)


def sine_target(n):
    """``u(x) = sin(n pi x)`` on [0, 1], tested on 1000 uniform grid points."""
    if n < 1:
        raise ValueError("frequency multiplier must be >= 1")

    def exact(X):
        return np.sin(n * np.pi * np.asarray(X)[:, 0])

    X_test = np.linspace(0.0, 1.0, 1000)[:, None]
    return Problem("regression", 1, 1, "mse", name=f"sine{n}", exact=exact,
                   test_inputs=X_test, test_targets=exact(X_test)[:, None], params={"n": n})


@dataclass
class GaussianMixtureSpec:
    weights: np.ndarray
    centers: np.ndarray  # (K, 2)
    sigmas: np.ndarray

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=np.float64).reshape(-1)
        self.centers = np.asarray(self.centers, dtype=np.float64).reshape(-1, 2)
        self.sigmas = np.asarray(self.sigmas, dtype=np.float64).reshape(-1)
        if not (len(self.weights) == len(self.centers) == len(self.sigmas)):
            raise ValueError("mixture component arrays differ in length")
        if np.any(self.sigmas <= 0):
            raise ValueError("mixture widths must be positive")

    @classmethod
    def random(cls, seed, n_components=6):
        rng = np.random.default_rng(seed)
        return cls(rng.uniform(0.5, 1.5, n_components),
                   rng.uniform(0.1, 0.9, (n_components, 2)),
                   rng.uniform(0.08, 0.2, n_components))

    def __call__(self, X):
        X = np.asarray(X, dtype=np.float64)
        sq = np.sum((X[:, None, :] - self.centers[None, :, :]) ** 2, axis=2)
        return np.exp(-sq / (2.0 * self.sigmas ** 2)) @ self.weights


def gaussian_mixture_target(spec=None, seed=0):
    """Gaussian-mixture surface on [0, 1]^2 (six random components by default)."""
    if spec is None:
        spec = GaussianMixtureSpec.random(seed)
    X_test = _unit_grid(2, 64)
    return Problem("regression", 2, 1, "mse", name="gaussian_mixture", exact=spec,
                   test_inputs=X_test, test_targets=spec(X_test)[:, None],
                   params={"mixture": spec})


def _test_grid(d):
    if d == 1:
        return np.linspace(0.0, 1.0, 1000)[:, None]
    if d == 2:
        return _unit_grid(2, 64)
    n = max(2, int(np.floor(20000 ** (1.0 / d))))
    return _unit_grid(d, n)


def poisson_problem(d, beta_bc=100.0):
    """``-Lap u = f`` on [0, 1]^d with ``u = prod sin(pi x_i)`` and zero Dirichlet data."""
    if d < 1:
        raise ValueError("dimension must be >= 1")

    def exact(X):
        return np.prod(np.sin(np.pi * np.asarray(X)), axis=1)

    def source(X):
        return d * np.pi ** 2 * exact(X)

    X_test = _test_grid(d)
    return Problem("pde", d, 1, "pde", name=f"poisson{d}d", exact=exact, source=source,
                   reaction=np.zeros_like, reaction_prime=np.zeros_like,
                   boundary_value=lambda X: np.zeros(len(X)),
                   test_inputs=X_test, test_targets=exact(X_test)[:, None], beta_bc=beta_bc,
                   params={"d": d})


def reaction_term(kind, params=None):
    """``(G, G')`` for the named 1D nonlinear elliptic equation."""
    params = dict(params or {})
    if kind == "allen_cahn":
        eps = params.get("epsilon", 1.0)
        return (lambda u: (u ** 3 - u) / eps ** 2), (lambda u: (3 * u ** 2 - 1) / eps ** 2)
    if kind == "bratu":
        lam = params.get("lambda", 1.0)
        return (lambda u: -lam * np.exp(u)), (lambda u: -lam * np.exp(u))
    if kind == "fisher":
        rho = params.get("rho", 1.0)
        return (lambda u: -rho * u * (1 - u)), (lambda u: -rho * (1 - 2 * u))
    if kind == "reaction_diffusion":
        kappa = params.get("kappa", 1.0)
        return (lambda u: kappa * u ** 2), (lambda u: 2 * kappa * u)
    raise ValueError(f"unknown nonlinear elliptic equation {kind!r}")


def nonlinear_elliptic_problem(kind, params=None, beta_bc=100.0):
    """1D ``-u'' + G(u) = f`` on [0, 1] with manufactured solution ``sin(pi x)``."""
    G, dG = reaction_term(kind, params)

    def exact(X):
        return np.sin(np.pi * np.asarray(X)[:, 0])

    def source(X):
        u = exact(X)
        return np.pi ** 2 * u + G(u)

    X_test = _test_grid(1)
    return Problem("pde", 1, 1, "pde", name=kind, exact=exact, source=source,
                   reaction=G, reaction_prime=dG,
                   boundary_value=lambda X: np.zeros(len(X)),
                   test_inputs=X_test, test_targets=exact(X_test)[:, None], beta_bc=beta_bc,
                   params=dict(params or {}))


def sample_box(rng, n, region):
    lo = np.array([r[0] for r in region])
    hi = np.array([r[1] for r in region])
    return lo + (hi - lo) * rng.random((n, len(region)))


def sample_boundary(rng, n, region, tol=1e-12):
    """Points on the part of the unit-cube boundary that lies inside ``region``.

    In 1D the touched endpoints are returned once each; otherwise ``n`` points are
    spread over the touched faces in proportion to their area.
    """
    d = len(region)
    faces = []
    for i, (lo, hi) in enumerate(region):
        for side in (0.0, 1.0):
            if abs((lo if side == 0.0 else hi) - side) <= tol:
                area = float(np.prod([region[j][1] - region[j][0] for j in range(d) if j != i]))
                faces.append((i, side, area))
    if not faces:
        return np.zeros((0, d))
    if d == 1:
        return np.array([[side] for _, side, _ in faces])
    areas = np.array([f[2] for f in faces])
    counts = rng.multinomial(n, areas / areas.sum())
    pts = []
    for (i, side, _), c in zip(faces, counts):
        P = sample_box(rng, c, region)
        P[:, i] = side
        pts.append(P)
    return np.concatenate(pts, axis=0)


def pde_client(problem, client_id, region, n_interior, n_boundary, rng):
    X = sample_box(rng, n_interior, region)
    Xb = sample_boundary(rng, n_boundary, region)
    return ClientDataset(client_id, X, problem.source(X)[:, None], tuple(region),
                         Xb, problem.boundary_value(Xb))


def pde_residuals(spec, theta, problem, interior, boundary, interior_rhs=None, boundary_rhs=None):
    """Interior ``-Lap u + G(u) - f`` and boundary ``u - g_D`` residuals."""
    f = problem.source(interior) if interior_rhs is None else np.ravel(interior_rhs)
    u, lap = input_laplacian_batch(spec, theta, interior)
    r_int = -lap + problem.reaction(u) - f
    r_bc = np.zeros(0)
    if boundary is not None and len(boundary):
        g = problem.boundary_value(boundary) if boundary_rhs is None else np.ravel(boundary_rhs)
        r_bc = forward(spec, theta, boundary)[:, 0] - g
    return r_int, r_bc


def pde_residual_jacobians(spec, theta, problem, interior, boundary):
    """Parameter Jacobians of the interior and boundary residuals, ``(N_int, p)``, ``(N_bc, p)``."""
    u, _ = input_laplacian_batch(spec, theta, interior)
    J_int = laplacian_residual_jacobian(spec, theta, interior, problem.reaction_prime(u), -1.0)
    if boundary is None or len(boundary) == 0:
        return J_int, np.zeros((0, spec.n_params))
    J_bc = laplacian_residual_jacobian(spec, theta, boundary, 1.0, 0.0)
    return J_int, J_bc


def pde_local_loss(spec, theta, interior_pts, boundary_pts, problem, beta_bc):
    """``0.5 mean(r_int^2) + 0.5 beta_bc mean(r_bc^2)``."""
    if beta_bc <= 0:
        raise ValueError("boundary penalty must be positive")
    if len(interior_pts) == 0 or boundary_pts is None or len(boundary_pts) == 0:
        raise ValueError("PDE loss needs interior and boundary points")
    r_int, r_bc = pde_residuals(spec, theta, problem, interior_pts, boundary_pts)
    return 0.5 * np.mean(r_int ** 2) + 0.5 * beta_bc * np.mean(r_bc ** 2)


@dataclass
class ClassificationPool:
    inputs: np.ndarray
    labels: np.ndarray
    centers: np.ndarray


def synthetic_classification(n_classes, n_per_class, d, spread, seed, noise=1.0, centers=None):
    """Isotropic Gaussian blobs, one per class, centred on a sphere of radius ``spread``."""
    if n_classes < 2:
        raise ValueError("need at least two classes")
    rng = np.random.default_rng(seed)
    if centers is None:
        dirs = rng.normal(size=(n_classes, d))
        dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
        centers = spread * dirs
    labels = np.repeat(np.arange(n_classes), n_per_class)
    X = centers[labels] + noise * rng.normal(size=(len(labels), d))
    return ClassificationPool(X, labels, centers)


def classification_problem(n_classes=10, d=2, spread=3.0, n_test_per_class=200, seed=0, noise=1.0):
    """Blob classification task; the test set shares the class centres of the training pool."""
    test = synthetic_classification(n_classes, n_test_per_class, d, spread, seed, noise)
    return Problem("classification", d, n_classes, "softmax_ce", name="blobs",
                   test_inputs=test.inputs, test_targets=test.labels,
                   params={"centers": test.centers, "noise": noise, "spread": spread,
                           "seed": seed})


def draw_training_pool(problem, n_per_class, seed):
    p = problem.params
    return synthetic_classification(problem.C, n_per_class, problem.d, p["spread"], seed,
                                    p["noise"], centers=p["centers"])


def relative_l2(pred, exact):
    pred = np.ravel(pred)
    exact = np.ravel(exact)
    return float(np.linalg.norm(pred - exact) / np.linalg.norm(exact))


def accuracy(pred_labels, labels):
    pred_labels = np.ravel(pred_labels)
    return float(np.mean(pred_labels == np.ravel(labels)))


def eval_metric(problem, spec, theta):
    """Test MSE (regression), relative L2 error (PDE) or top-1 accuracy (classification)."""
    out = forward(spec, theta, problem.test_inputs)
    if problem.kind == "regression":
        return float(np.mean((out - problem.test_targets) ** 2))
    if problem.kind == "pde":
        return relative_l2(out[:, 0], problem.test_targets[:, 0])
    return accuracy(np.argmax(out, axis=1), problem.test_targets)
