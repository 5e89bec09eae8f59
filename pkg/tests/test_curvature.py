import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from fipa.curvature import (FisherSketch, OutputLossCurvature, PdeCurvature, SketchConfig,
                            dense_fim, exact_sketch, fim_vector_product, pde_fim_vector_product,
                            sketch_fim, sketch_operator)
from fipa.linalg import sym_eig
from fipa.models import MlpSpec, init_params, layer_mask, param_jacobian_batch
from fipa.problems import Problem, poisson_problem, sample_boundary, sample_box


def linear_scalar():
    # f = theta * x, no bias: identity net with a zero bias we never touch
    spec = MlpSpec((1, 1), "identity")
    theta = init_params(spec, 0, layer_mask(spec, [0]))
    theta.mask[1] = False  # freeze the bias so p_eff = 1
    return spec, theta, (np.array([[1.0], [2.0]]), np.zeros((2, 1)))


def small_net(seed=0, widths=(2, 5, 3), n=12):
    rng = np.random.default_rng(seed)
    spec = MlpSpec(widths)
    return spec, init_params(spec, seed), (rng.standard_normal((n, widths[0])),
                                           rng.standard_normal((n, widths[-1])))


def test_linear_scalar_fvp_and_dense():
    # [DERIVED] linear scalar model: H = X^T X / n
    spec, theta, data = linear_scalar()
    np.testing.assert_allclose(fim_vector_product(spec, theta, data, "mse", np.array([2.0])), [5.0])
    np.testing.assert_allclose(dense_fim(spec, theta, data, "mse"), [[2.5]])


def test_fvp_zero_vector():
    # [TRIVIAL] H 0 = 0
    spec, theta, data = small_net()
    out = fim_vector_product(spec, theta, data, "mse", np.zeros(spec.n_params))
    np.testing.assert_array_equal(out, 0.0)


@pytest.mark.parametrize("kind", ["mse", "softmax_ce"])
def test_matrix_free_equals_dense(kind):
    # [DERIVED] dual route: matrix-free products vs dense FIM, 1e-10
    spec, theta, (X, Y) = small_net(1)
    data = (X, Y if kind == "mse" else np.zeros(len(X), int))
    H = dense_fim(spec, theta, data, kind)
    rng = np.random.default_rng(2)
    for _ in range(20):
        v = rng.standard_normal(spec.n_params)
        err = np.linalg.norm(fim_vector_product(spec, theta, data, kind, v) - H @ v)
        assert err <= 1e-10 * np.linalg.norm(v)


def test_dense_mse_is_scaled_gram():
    # [DERIVED] MSE curvature is J^T J / n
    spec, theta, data = small_net(3, widths=(2, 4, 1))
    J = param_jacobian_batch(spec, theta, data[0])[:, 0, :]
    np.testing.assert_allclose(dense_fim(spec, theta, data, "mse"), J.T @ J / len(J), atol=1e-13)


@settings(max_examples=15, deadline=None)
@given(st.integers(0, 1000), st.sampled_from(["mse", "softmax_ce"]))
def test_dense_symmetric_psd(seed, kind):
    spec, theta, (X, Y) = small_net(seed)
    H = dense_fim(spec, theta, (X, Y if kind == "mse" else np.zeros(len(X), int)), kind)
    assert np.abs(H - H.T).max() <= 1e-12
    assert np.linalg.eigvalsh(H).min() >= -1e-10


@settings(max_examples=15, deadline=None)
@given(st.integers(0, 1000), st.floats(-3, 3), st.floats(-3, 3))
def test_fvp_is_linear(seed, a, b):
    spec, theta, data = small_net(seed)
    rng = np.random.default_rng(seed)
    u, v = rng.standard_normal((2, spec.n_params))
    op = OutputLossCurvature(spec, theta, data, "mse")
    lhs = op.matvec(a * u + b * v)
    rhs = a * op.matvec(u) + b * op.matvec(v)
    assert np.linalg.norm(lhs - rhs) <= 1e-12 * (1 + np.linalg.norm(rhs))


def test_block_products_match_matvec():
    spec, theta, data = small_net(4)
    op = OutputLossCurvature(spec, theta, data, "mse")
    V = np.random.default_rng(4).standard_normal((spec.n_params, 3))
    cols = np.stack([op.matvec(V[:, j]) for j in range(3)], axis=1)
    np.testing.assert_allclose(op.matmat(V), cols, atol=1e-12)
    np.testing.assert_allclose(op.project(V), V.T @ cols, atol=1e-12)


def test_masked_operator_is_principal_submatrix():
    # [DERIVED] masking selects rows and columns of H
    spec, theta, data = small_net(5)
    full = dense_fim(spec, theta, data, "mse")
    masked = init_params(spec, 5, layer_mask(spec, [-1]))
    H = dense_fim(spec, masked, data, "mse")
    np.testing.assert_allclose(H, full[np.ix_(masked.mask, masked.mask)], atol=1e-13)


def test_empty_dataset_and_dense_cap():
    spec, theta, _ = small_net()
    with pytest.raises(ValueError):
        fim_vector_product(spec, theta, (np.zeros((0, 2)), np.zeros((0, 3))), "mse",
                           np.zeros(spec.n_params))
    with pytest.raises(ValueError):
        dense_fim(spec, theta, small_net()[2], "mse", dense_cap=5)


def test_rank_one_sketch_is_exact():
    # [TRIVIAL] a rank-one H is recovered exactly
    spec, theta, (X, Y) = small_net(6, widths=(2, 4, 1), n=1)
    data = (X, Y)
    H = dense_fim(spec, theta, data, "mse")
    sk = sketch_fim(spec, theta, data, "mse", SketchConfig(1))
    top = sym_eig(H)
    assert sk.lam[0] == pytest.approx(top.values[0], rel=1e-8)
    assert abs(abs(sk.U[:, 0] @ top.vectors[:, 0]) - 1) <= 1e-6


def test_full_rank_sketch_matches_dense_eigenvalues():
    # [DERIVED] r = p reproduces eigh of the dense H
    spec, theta, data = small_net(7, widths=(2, 3, 2), n=40)
    p = spec.n_params
    sk = sketch_fim(spec, theta, data, "mse", SketchConfig(p, s=0, q=3))
    ref = sym_eig(dense_fim(spec, theta, data, "mse")).values
    keep = ref[: sk.r]
    np.testing.assert_allclose(sk.lam, keep, rtol=1e-6)


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 10_000), st.integers(1, 6))
def test_sketch_structure(seed, r):
    spec, theta, (X, Y) = small_net(seed % 50)
    if seed % 2:
        sk = sketch_fim(spec, theta, (X, np.zeros(len(X), int)), "softmax_ce", SketchConfig(r, seed=seed))
    else:
        sk = sketch_fim(spec, theta, (X, Y), "mse", SketchConfig(r, seed=seed))
    assert sk.r <= r
    assert np.all(sk.lam >= 0) and np.all(np.diff(sk.lam) <= 0)
    assert np.abs(sk.U.T @ sk.U - np.eye(sk.r)).max() <= 1e-8


def test_sketch_error_monotone_in_rank():
    # [DERIVED] Eckart-Young: error cannot grow with rank
    spec, theta, data = small_net(8, n=30)
    H = dense_fim(spec, theta, data, "mse")
    errs = [np.linalg.norm(H - sketch_fim(spec, theta, data, "mse", SketchConfig(r, q=6)).dense())
            for r in (2, 4, 8, 16)]
    assert all(b <= a + 1e-10 for a, b in zip(errs, errs[1:]))


class DiagOp:
    """Known spectrum for sketch accuracy checks."""

    def __init__(self, lam, seed=0):
        self.p = len(lam)
        Q = np.linalg.qr(np.random.default_rng(seed).standard_normal((self.p, self.p)))[0]
        self.H = (Q * lam) @ Q.T

    def matmat(self, V):
        return self.H @ V

    def project(self, V):
        return V.T @ self.H @ V

    def dense(self):
        return self.H


def test_sketch_eigenvalues_within_five_percent_on_separated_spectrum():
    # [DERIVED] known diagonal spectrum with a gap
    lam = np.concatenate([[100, 50, 25, 12], 0.5 ** np.arange(30)])
    op = DiagOp(lam, seed=3)
    sk = sketch_operator(op, SketchConfig(4, s=5, q=4))
    np.testing.assert_allclose(sk.lam, lam[:4], rtol=0.05)


def test_eigenvalue_floor_drops_null_directions():
    # [DERIVED] eigenvalues below 1e-12 lam_max are dropped
    lam = np.array([1.0, 1e-14, 0.0, 0.0, 0.0, 0.0])
    sk = sketch_operator(DiagOp(lam), SketchConfig(3, s=1, q=3))
    assert sk.r == 1
    assert exact_sketch(DiagOp(lam)).r == 1


def test_sketch_width_over_p_rejected():
    with pytest.raises(ValueError):
        sketch_operator(DiagOp(np.ones(4)), SketchConfig(3, s=2))


def test_sketch_is_seed_deterministic():
    spec, theta, data = small_net(9)
    a = sketch_fim(spec, theta, data, "mse", SketchConfig(3, seed=11))
    b = sketch_fim(spec, theta, data, "mse", SketchConfig(3, seed=11))
    np.testing.assert_array_equal(a.U, b.U)
    np.testing.assert_array_equal(a.lam, b.lam)


def test_fisher_sketch_shape_check():
    with pytest.raises(ValueError):
        FisherSketch(np.zeros((4, 2)), np.zeros(3))


@pytest.mark.parametrize("bad", [dict(r=0), dict(r=1, s=-1), dict(r=1, q=0)])
def test_sketch_config_validation(bad):
    with pytest.raises(ValueError):
        SketchConfig(**bad)


def pde_setup(d=2, seed=0):
    prob = poisson_problem(d)
    spec = MlpSpec((d, 5, 1))
    rng = np.random.default_rng(seed)
    region = [(0.0, 1.0)] * d
    return prob, spec, init_params(spec, seed), sample_box(rng, 20, region), \
        sample_boundary(rng, 10, region)


def test_pde_fvp_splits_into_interior_and_boundary():
    # [DERIVED] H = H_int + beta H_bc with quadrature weights
    prob, spec, theta, Xi, Xb = pde_setup()
    v = np.random.default_rng(1).standard_normal(spec.n_params)
    a1, b1 = PdeCurvature(spec, theta, Xi, Xb, prob, 1.0).parts(v)
    a2, b2 = PdeCurvature(spec, theta, Xi, Xb, prob, 2.0).parts(v)
    np.testing.assert_allclose(a1, a2, atol=1e-14)
    np.testing.assert_allclose(b2, 2 * b1, atol=1e-12)
    np.testing.assert_allclose(pde_fim_vector_product(spec, theta, Xi, Xb, prob, 2.0, v),
                               a1 + 2 * b1, atol=1e-12)
    np.testing.assert_array_equal(pde_fim_vector_product(spec, theta, Xi, Xb, prob, 2.0,
                                                         np.zeros(spec.n_params)), 0.0)


def test_pde_fvp_hand_oracle_affine_net():
    # [DERIVED] affine net: H = beta Jb^T Jb / 2, Jb = [[0, 1], [1, 1]]
    # u = w x + c in 1D: -u'' = 0 so interior rows do not depend on w, only on G' = 0.
    prob = poisson_problem(1)
    spec = MlpSpec((1, 1), "identity")
    theta = np.array([0.7, -0.2])
    Xi = np.array([[0.25], [0.5]])
    Xb = np.array([[0.0], [1.0]])
    beta = 3.0
    op = PdeCurvature(spec, theta, Xi, Xb, prob, beta)
    # interior residual -u'' - f has zero parameter gradient; boundary rows are [x, 1]
    Jb = np.array([[0.0, 1.0], [1.0, 1.0]])
    np.testing.assert_allclose(op.dense(), beta * Jb.T @ Jb / 2, atol=1e-14)


def test_pde_dense_matches_matvec_and_is_psd():
    prob, spec, theta, Xi, Xb = pde_setup(seed=2)
    op = PdeCurvature(spec, theta, Xi, Xb, prob, 10.0)
    H = op.dense()
    v = np.random.default_rng(3).standard_normal(spec.n_params)
    np.testing.assert_allclose(op.matvec(v), H @ v, atol=1e-10)
    assert np.linalg.eigvalsh(H).min() >= -1e-10


def test_pde_operator_rejects_bad_inputs():
    prob, spec, theta, Xi, Xb = pde_setup()
    with pytest.raises(ValueError):
        PdeCurvature(spec, theta, Xi, Xb, prob, 0.0)
    with pytest.raises(ValueError):
        PdeCurvature(spec, theta, Xi, np.zeros((0, 2)), prob, 1.0)


def test_pde_problem_dataclass_guard():
    with pytest.raises(ValueError):
        Problem("pde", 1, 1, "pde")
