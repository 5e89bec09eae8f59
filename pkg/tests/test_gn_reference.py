import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from fipa.curvature import dense_fim
from fipa.gn_reference import (AffineResidual, CentralizedSystem, GapRecord, GnState,
                               SingularCurvatureError, contraction_estimate, gap_diagnostics,
                               gn_direction, gn_map, gn_step, gn_trajectory, recursion_holds,
                               trajectory_contraction)
from fipa.models import MlpSpec, ParamVector, forward, init_params, loss_and_gradient
from fipa.problems import ClientDataset, Problem, poisson_problem, pde_client, sine_target
from fipa.federation import local_loss_and_gradient, partition_interval


def affine(p=4, seed=0):
    rng = np.random.default_rng(seed)
    A = rng.standard_normal((p + 3, p))
    theta_star = rng.standard_normal(p)
    return AffineResidual(A, A @ theta_star), theta_star


def teacher_system():
    spec = MlpSpec((1, 6, 1))
    t_star = init_params(spec, 3).values
    X = np.linspace(0, 1, 40)[:, None]
    Y = forward(spec, t_star, X)
    clients = [ClientDataset(0, X[:20], Y[:20]), ClientDataset(1, X[20:], Y[20:])]
    prob = Problem("regression", 1, 1, "mse", test_inputs=X, test_targets=Y)
    return spec, CentralizedSystem(spec, prob, clients), t_star


def test_fixed_point_at_zero_residual():
    # [TRIVIAL] g = 0 at a zero-residual solution
    system, theta_star = affine()
    new, info = gn_map(system, theta_star, 0.7)
    assert np.abs(new.values - theta_star).max() <= 1e-12
    assert info.loss <= 1e-24
    _, teacher, t_star = teacher_system()
    new, _ = gn_map(teacher, t_star, 0.5)
    assert np.abs(new.values - t_star).max() <= 1e-12


def test_identity_residual_halves_error():
    # [TRIVIAL] A = I, gamma = 1/2 halves the error
    theta_star = np.array([1.0, -2.0, 0.5])
    system = AffineResidual(np.eye(3), theta_star)
    theta = ParamVector(np.zeros(3))
    for _ in range(4):
        new, _ = gn_map(system, theta, 0.5)
        ratio = np.linalg.norm(new.values - theta_star) / np.linalg.norm(theta.values - theta_star)
        assert ratio == pytest.approx(0.5, abs=1e-15)
        theta = new


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10_000), st.floats(0.05, 1.0))
def test_affine_error_ratio_is_one_minus_gamma(seed, gamma):
    # [DERIVED] affine residual: e' = (1 - gamma) e
    system, theta_star = affine(seed=seed)
    theta = ParamVector(theta_star + np.random.default_rng(seed).standard_normal(theta_star.size))
    new, _ = gn_map(system, theta, gamma)
    e0 = np.linalg.norm(theta.values - theta_star)
    e1 = np.linalg.norm(new.values - theta_star)
    assert e1 == pytest.approx((1 - gamma) * e0, rel=1e-9, abs=1e-12)


def test_affine_loss_decays_by_one_minus_gamma_squared():
    # [DERIVED] loss ratio (1 - gamma)^2 = 0.49
    system, theta_star = affine(seed=1)
    states = gn_trajectory(system, np.zeros(theta_star.size), 0.3, 6, theta_star=theta_star)
    losses = np.array([h[1] for h in states[-1].history])
    np.testing.assert_allclose(losses[1:] / losses[:-1], 0.49, rtol=1e-8)
    errs = [h[2] for h in states[-1].history]
    assert contraction_estimate(errs) == pytest.approx(0.7, abs=1e-6)
    assert trajectory_contraction(states) == pytest.approx(0.7, abs=1e-6)


def test_trajectory_length_and_single_step():
    system, theta_star = affine(seed=2)
    theta0 = np.zeros(theta_star.size)
    states = gn_trajectory(system, theta0, 0.5, 1)
    assert len(states) == 2 and states[0].k == 0 and states[1].k == 1
    one = gn_step(system, GnState(ParamVector(theta0), 0.5))
    np.testing.assert_array_equal(states[1].theta.values, one.theta.values)
    with pytest.raises(ValueError):
        gn_trajectory(system, theta0, 0.5, 0)
    with pytest.raises(ValueError):
        GnState(ParamVector(theta0), 1.5)


def test_centralized_curvature_and_gradient_match_dense_oracles():
    # [DERIVED] pooled J^T J and J^T xi vs weighted client oracles
    prob = sine_target(2)
    spec = MlpSpec((1, 5, 1))
    clients = partition_interval((0, 1), 2, [0.3, 0.7], 25, 1, prob.label)
    clients[1] = clients[1].subset(np.arange(15))  # unequal sizes exercise the weights
    system = CentralizedSystem(spec, prob, clients)
    theta = init_params(spec, 4)
    xi, J = system.residual_and_jacobian(theta)
    w = np.array([25, 15]) / 40
    H_ref = sum(wm * dense_fim(spec, theta, c, "mse") for wm, c in zip(w, clients))
    g_ref = sum(wm * loss_and_gradient(spec, theta, c, "mse")[1] for wm, c in zip(w, clients))
    assert np.abs(J.T @ J - H_ref).max() <= 1e-8
    assert np.abs(J.T @ xi - g_ref).max() <= 1e-8
    # finite differences of the pooled loss
    h = 1e-6
    fd = np.array([(system.loss(theta.values + h * e) - system.loss(theta.values - h * e)) / (2 * h)
                   for e in np.eye(spec.n_params)])
    assert np.linalg.norm(fd - J.T @ xi) <= 1e-6 * np.linalg.norm(fd)


def test_centralized_pde_gradient_matches_client_losses():
    # [DERIVED] weighted sum of client PDE losses
    prob = poisson_problem(1)
    spec = MlpSpec((1, 4, 1))
    rng = np.random.default_rng(5)
    clients = [pde_client(prob, 0, ((0.0, 0.5),), 16, 2, rng),
               pde_client(prob, 1, ((0.5, 1.0),), 24, 2, rng)]
    system = CentralizedSystem(spec, prob, clients)
    theta = init_params(spec, 5)
    xi, J = system.residual_and_jacobian(theta)
    w = np.array([16, 24]) / 40
    parts = [local_loss_and_gradient(spec, theta, c, prob) for c in clients]
    assert 0.5 * xi @ xi == pytest.approx(sum(wm * l for wm, (l, _) in zip(w, parts)), rel=1e-12)
    np.testing.assert_allclose(J.T @ xi, sum(wm * g for wm, (_, g) in zip(w, parts)), atol=1e-10)


def test_centralized_rejects_cross_entropy():
    prob = Problem("classification", 2, 3, "softmax_ce")
    with pytest.raises(ValueError):
        CentralizedSystem(MlpSpec((2, 3)), prob, [ClientDataset(0, np.zeros((2, 2)), [0, 1])])


def test_teacher_problem_converges_at_the_damped_rate():
    # [PAPER] GN contracts at 1 - gamma near a zero-residual solution
    _, system, t_star = teacher_system()
    theta0 = t_star + 1e-2 * np.random.default_rng(0).standard_normal(t_star.size)
    states = gn_trajectory(system, theta0, 0.5, 12)
    losses = np.array([h[1] for h in states[-1].history])
    assert np.all(np.diff(losses) < 0)
    assert trajectory_contraction(states) == pytest.approx(0.5, abs=0.01)


def test_singular_curvature_strict_and_fallback():
    # [DERIVED] pinv of diag(2, 0) applied to (4, 0)
    H = np.diag([2.0, 0.0])
    g = np.array([4.0, 0.0])
    with pytest.raises(SingularCurvatureError, match="singular"):
        gn_direction(H, g, strict=True)
    d, singular, lo, hi = gn_direction(H, g)
    np.testing.assert_allclose(d, [2.0, 0.0])
    assert singular and lo == 0.0 and hi == 2.0
    d, singular, _, _ = gn_direction(np.diag([2.0, 1.0]), g)
    assert not singular


def test_contraction_estimate_examples():
    # [TRIVIAL] exact geometric and constant sequences
    assert contraction_estimate([1, 0.5, 0.25, 0.125], window=1.0) == pytest.approx(0.5, abs=1e-10)
    assert contraction_estimate([1, 0.5, 0.25, 0.125]) == pytest.approx(0.5, abs=1e-10)
    assert contraction_estimate([3.0] * 6) == pytest.approx(1.0, abs=1e-12)
    with pytest.raises(ValueError):
        contraction_estimate([1.0, 0.5])
    with pytest.raises(ValueError):
        contraction_estimate([1.0, 0.5, 0.0, 0.1])


def test_contraction_uses_only_the_tail():
    v = np.concatenate([np.full(10, 5.0), 0.3 ** np.arange(10)])
    assert contraction_estimate(v) == pytest.approx(0.3, rel=1e-10)


def test_gap_identical_trajectories_are_zero():
    # [TRIVIAL] identical trajectories have zero gap
    system, theta_star = affine(seed=3)
    states = gn_trajectory(system, np.zeros(theta_star.size), 0.4, 5)
    thetas = [s.theta for s in states]
    gaps = gap_diagnostics(thetas, thetas, system, 0.4)
    assert [g.e_k for g in gaps] == [0.0] * 6
    assert all(g.delta_k <= 1e-14 for g in gaps[:-1]) and gaps[-1].delta_k is None


def test_gap_shared_start_and_recursion_on_perturbed_run():
    # [DERIVED] affine T contracts by 1 - gamma, so the recursion holds
    system, theta_star = affine(seed=4)
    gamma = 0.5
    ref = [s.theta for s in gn_trajectory(system, np.zeros(theta_star.size), gamma, 8)]
    rng = np.random.default_rng(4)
    fed = [ref[0]]
    for _ in range(8):
        nxt, _ = gn_map(system, fed[-1], gamma)
        fed.append(ParamVector(nxt.values + 1e-3 * rng.standard_normal(theta_star.size)))
    gaps = gap_diagnostics(fed, ref, system, gamma)
    assert gaps[0].e_k == 0.0
    # affine map contracts by exactly 1 - gamma, so the recursion must hold every step
    assert recursion_holds(gaps, 1 - gamma).all()
    with pytest.raises(ValueError):
        gap_diagnostics(fed[:-1], ref, system, gamma)
    with pytest.raises(ValueError):
        gap_diagnostics([ParamVector(np.ones(theta_star.size))] + fed[1:], ref, system, gamma)


def test_recursion_holds_flags_violations():
    gaps = [GapRecord(0, 0.0, 1.0), GapRecord(1, 1.0, 0.1), GapRecord(2, 5.0, None)]
    np.testing.assert_array_equal(recursion_holds(gaps, 0.5), [True, False])
