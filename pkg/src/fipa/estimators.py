"""scikit-learn style estimators that train an MLP by simulated federated rounds.

``groups`` assigns every training row to a client, so the same arrays a
centralized estimator would take describe the federation.
"""
import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin, RegressorMixin
from sklearn.utils.multiclass import check_classification_targets
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from .aggregation import RULES, ServerConfig
from .curvature import SketchConfig
from .federation import RoundConfig, Schedule, run_experiment
from .models import MlpSpec, forward, init_params, softmax
from .problems import ClientDataset, Problem


class _FederatedMLP(BaseEstimator):
    def __init__(self, hidden_layer_sizes=(32, 32), activation="tanh", rounds=100,
                 warmup_rounds=0, rule="fipa_dense", local_epochs=5, lr=1e-3,
                 batch_size=None, warmup_lr=None, prox_mu=0.0, sketch_rank=None,
                 adaptive_energy=None, beta_reg=0.0, gamma=1.0, random_state=0):
        self.hidden_layer_sizes = hidden_layer_sizes
        self.activation = activation
        self.rounds = rounds
        self.warmup_rounds = warmup_rounds
        self.rule = rule
        self.local_epochs = local_epochs
        self.lr = lr
        self.batch_size = batch_size
        self.warmup_lr = warmup_lr
        self.prox_mu = prox_mu
        self.sketch_rank = sketch_rank
        self.adaptive_energy = adaptive_energy
        self.beta_reg = beta_reg
        self.gamma = gamma
        self.random_state = random_state

    def _check_params(self):
        if self.rule not in RULES:
            raise ValueError(f"rule must be one of {RULES}, got {self.rule!r}")
        if not 0 <= self.warmup_rounds <= self.rounds or self.rounds < 1:
            raise ValueError("need rounds >= 1 and 0 <= warmup_rounds <= rounds")

    def _clients(self, X, Y, groups):
        if groups is None:
            groups = np.zeros(len(X), dtype=int)
        groups = np.asarray(groups)
        if groups.shape != (len(X),):
            raise ValueError(f"groups must have shape ({len(X)},), got {groups.shape}")
        ids = np.unique(groups)
        return [ClientDataset(m, X[groups == g], Y[groups == g]) for m, g in enumerate(ids)]

    def _train(self, X, Y, groups, problem):
        self._check_params()
        seed = 0 if self.random_state is None else int(self.random_state)
        widths = (X.shape[1], *tuple(self.hidden_layer_sizes), problem.C)
        self.spec_ = MlpSpec(widths, self.activation)
        clients = self._clients(X, Y, groups)
        sketch = SketchConfig(self.sketch_rank) if self.sketch_rank else None
        server = ServerConfig(self.rule, self.beta_reg, self.gamma)
        cfg = RoundConfig(local_epochs=self.local_epochs, lr=self.lr, batch_size=self.batch_size,
                          prox_mu=self.prox_mu, sketch=sketch, server=server, seed=seed,
                          adaptive_energy=self.adaptive_energy)
        overrides = {"lr": self.warmup_lr} if self.warmup_lr is not None else {}
        sched = Schedule(self.rounds, self.warmup_rounds, server, warmup_overrides=overrides)
        result = run_experiment(problem, self.spec_, clients, sched, cfg,
                                init_params(self.spec_, seed))
        self.theta_ = result.theta
        self.records_ = result.records
        self.n_clients_ = len(clients)
        self.n_features_in_ = X.shape[1]
        return self

    def _raw_output(self, X):
        check_is_fitted(self, "theta_")
        X = check_array(X, dtype=np.float64)
        if X.shape[1] != self.n_features_in_:
            raise ValueError(f"X has {X.shape[1]} features, expected {self.n_features_in_}")
        return forward(self.spec_, self.theta_, X)


class FIPARegressor(RegressorMixin, _FederatedMLP):
    """Federated MLP regressor with Fisher-informed or averaged aggregation."""

    def fit(self, X, y, groups=None):
        X, y = check_X_y(X, y, dtype=np.float64, multi_output=True, y_numeric=True)
        self._y_1d = y.ndim == 1
        Y = y.reshape(len(y), -1)
        problem = Problem("regression", X.shape[1], Y.shape[1], "mse",
                          test_inputs=X, test_targets=Y)
        return self._train(X, Y, groups, problem)

    def predict(self, X):
        out = self._raw_output(X)
        return out[:, 0] if self._y_1d else out


class FIPAClassifier(ClassifierMixin, _FederatedMLP):
    """Federated softmax MLP classifier; ``rule='fipa_qr'`` needs ``beta_reg > 0``."""

    def fit(self, X, y, groups=None):
        X, y = check_X_y(X, y, dtype=np.float64)
        check_classification_targets(y)
        self.classes_, codes = np.unique(y, return_inverse=True)
        if len(self.classes_) < 2:
            raise ValueError("need at least two classes")
        problem = Problem("classification", X.shape[1], len(self.classes_), "softmax_ce",
                          test_inputs=X, test_targets=codes)
        return self._train(X, codes, groups, problem)

    def predict_proba(self, X):
        return softmax(self._raw_output(X))

    def predict(self, X):
        return self.classes_[np.argmax(self._raw_output(X), axis=1)]
