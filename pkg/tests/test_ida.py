import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from gpc_phs.gp import STRUCTURES, Hyperparameters, RegressionDataset, fit
from gpc_phs.ida import (
    DesignInfeasible,
    DesiredDesign,
    ExactPosterior,
    NoAnnihilator,
    RankLoss,
    SaddleRejected,
    certify,
    closed_loop,
    control_input,
    design_template,
    desired_hamiltonian,
    grid_nodes,
    left_annihilator,
    matching_residual,
    robustness_margin,
    robustness_margin_batch,
    solve_equilibrium_shift,
)
from gpc_phs.phs import ContractViolation, PlantModel, integrate, microactuator, simulate

X3_D = math.sqrt(2.5)  # dH/dx1 = 10 (x1 - 1)^3 + x3^2 / 2 = 0 at x1 = 0.5
C_D = X3_D + 0.5 * X3_D / 2  # dH/dx3 + 2 (x3 - c) = 0


@pytest.fixture(scope="module")
def exact():
    return ExactPosterior(microactuator())


@pytest.fixture(scope="module")
def exact_design(exact):
    return solve_equilibrium_shift(exact, design_template(exact), 0.5)


@pytest.fixture(scope="module")
def gp_model():
    plant = microactuator()
    t = np.linspace(0, 20, 300)
    traj = simulate(plant, [0, 0, 1], lambda s: [math.sin(s)], 20.0, 1e-3, t_eval=t)
    X = traj.states + np.random.default_rng(0).normal(0, 0.03, traj.states.shape)
    Xdot = np.array([(plant.J(x) - plant.R(x)) @ plant.gradH(x) + plant.G(x) @ u for x, u in zip(traj.states, traj.inputs)])
    hyper = Hyperparameters(9.0, (0.6, 0.11, 0.13), {"b": 0.52, "r": 1.3}, (0.027, 0.027, 0.027))
    return fit(RegressionDataset(X, Xdot, traj.inputs, t), hyper, STRUCTURES["microactuator"])


@pytest.fixture(scope="module")
def gp_design(gp_model):
    return solve_equilibrium_shift(gp_model, design_template(gp_model), 0.5)


# -- annihilator ------------------------------------------------------------


@pytest.mark.parametrize("G", [[0, 0, 1], [0, 0, 1 / 1.0], [0, 0, 2.5], [0, 0, -1]])
def test_microactuator_annihilator(G):
    A = left_annihilator(np.array(G, dtype=float)[:, None]).Gperp
    np.testing.assert_array_equal(A, [[1, 0, 0], [0, 1, 0]])
    assert np.all(A @ np.array(G)[:, None] == 0)


def test_rank_deficient_input_matrix():
    with pytest.raises(NoAnnihilator):
        left_annihilator(np.zeros((3, 1)))
    with pytest.raises(NoAnnihilator):
        left_annihilator(np.array([[1.0, 2.0], [2.0, 4.0], [0.0, 0.0]]))


@settings(max_examples=50, deadline=None)
@given(
    G=arrays(float, (4, 2), elements=st.floats(-3, 3)).filter(lambda g: np.linalg.svd(g, compute_uv=False)[-1] > 0.1),
    scale=st.floats(0.2, 5.0),
)
def test_annihilator_properties(G, scale):
    A = left_annihilator(G).Gperp
    assert A.shape == (2, 4)
    assert np.max(np.abs(A @ G)) <= 1e-12 * max(1.0, np.max(np.abs(G)))
    np.testing.assert_allclose(A @ A.T, np.eye(2), atol=1e-12)
    # depends on the column space only
    np.testing.assert_allclose(left_annihilator(-scale * G).Gperp, A, atol=1e-10)


# -- design -----------------------------------------------------------------


def test_template_copies_unactuated_rows(exact):
    d = design_template(exact, r_d=2 / 3)
    JR = exact.JR(np.zeros(3))
    np.testing.assert_array_equal(d.JdRd[:2], JR[:2])
    np.testing.assert_array_equal(d.Jd, -d.Jd.T)
    np.testing.assert_allclose(np.diag(d.Rd), [0, 0.5, 1.5])


def test_design_invariants_are_enforced():
    lo, hi = -2 * np.ones(3), 2 * np.ones(3)
    with pytest.raises(ContractViolation):
        DesiredDesign(np.eye(3), np.zeros((3, 3)), 0.0, np.zeros(3), lo, hi)
    with pytest.raises(ContractViolation):
        DesiredDesign(np.zeros((3, 3)), -np.eye(3), 0.0, np.zeros(3), lo, hi)
    with pytest.raises(ContractViolation):
        DesiredDesign(np.zeros((3, 3)), np.ones((3, 3)), 0.0, np.zeros(3), lo, hi)
    with pytest.raises(ContractViolation):
        DesiredDesign(np.zeros((3, 3)), np.eye(3), 0.0, np.array([0, 0, 3.0]), lo, hi)


def test_equilibrium_shift_with_true_hamiltonian(exact_design):
    np.testing.assert_allclose(exact_design.x_d, [0.5, 0.0, 1.581139], atol=1e-6)
    assert exact_design.c == pytest.approx(1.976424, abs=1e-6)
    np.testing.assert_allclose(exact_design.x_d[2], X3_D, atol=1e-9)
    assert exact_design.c == pytest.approx(C_D, abs=1e-9)


def test_true_design_is_a_minimum(exact, exact_design):
    _, g = desired_hamiltonian(exact_design, exact, exact_design.x_d)
    assert np.linalg.norm(g) <= 1e-6
    # analytic Hessian of H + (x3 - c)^2 at x_d
    x1, _, x3 = exact_design.x_d
    H = np.array([[30 * (x1 - 1) ** 2, 0, x3], [0, 1, 0], [x3, 0, x1 + 2]])
    assert np.min(np.linalg.eigvalsh(H)) > 0
    v0, _ = desired_hamiltonian(exact_design, exact, exact_design.x_d)
    rng = np.random.default_rng(0)
    for _ in range(100):
        d = rng.normal(size=3)
        d *= 0.05 / np.linalg.norm(d)
        assert desired_hamiltonian(exact_design, exact, exact_design.x_d + d)[0] > v0


def test_gp_design_is_stationary_minimum(gp_model, gp_design):
    v0, g = desired_hamiltonian(gp_design, gp_model, gp_design.x_d)
    assert np.linalg.norm(g) <= 1e-6
    assert gp_design.x_d[0] == 0.5
    rng = np.random.default_rng(1)
    for _ in range(100):
        d = rng.normal(size=3)
        d *= 0.05 / np.linalg.norm(d)
        assert desired_hamiltonian(gp_design, gp_model, gp_design.x_d + d)[0] > v0


def test_desired_gradient_matches_finite_differences(gp_model, gp_design):
    rng = np.random.default_rng(2)
    h = 1e-6
    for x in rng.uniform(-1.5, 1.5, (30, 3)):
        _, g = desired_hamiltonian(gp_design, gp_model, x)
        fd = np.array(
            [(desired_hamiltonian(gp_design, gp_model, x + e)[0] - desired_hamiltonian(gp_design, gp_model, x - e)[0]) / (2 * h) for e in h * np.eye(3)]
        )
        assert np.max(np.abs(g - fd)) <= 1e-4 * max(1.0, np.max(np.abs(g)))


def test_shift_rejects_bad_requests(exact):
    t = design_template(exact)
    with pytest.raises(ContractViolation):
        solve_equilibrium_shift(exact, t, 3.0)
    with pytest.raises(ContractViolation):
        solve_equilibrium_shift(exact, t, 0.5, fixed_index=2)


def _quadratic_plant(diag):
    D = np.diag(diag)
    return ExactPosterior(
        PlantModel(
            3,
            1,
            lambda x: np.array([[0.0, 1, 0], [-1, 0, 0], [0, 0, 0]]),
            lambda x: np.diag([0.0, 0.5, 1.0]),
            lambda x: np.array([[0.0], [0.0], [1.0]]),
            lambda x: 0.5 * x @ D @ x,
            lambda x: D @ x,
        )
    )


def test_saddle_is_rejected():
    # H = (-x1^2 + x2^2 + x3^2) / 2 has only saddles once the shift is added
    model = _quadratic_plant([-1.0, 1.0, 1.0])
    with pytest.raises(SaddleRejected):
        solve_equilibrium_shift(model, design_template(model), 0.0)


def test_no_stationary_point_is_infeasible():
    # dHd/dx1 = 1 never vanishes
    plant = PlantModel(
        3,
        1,
        lambda x: np.zeros((3, 3)),
        lambda x: np.diag([1.0, 1.0, 1.0]),
        lambda x: np.array([[0.0], [0.0], [1.0]]),
        lambda x: x[0] + 0.5 * x[1] ** 2,
        lambda x: np.array([1.0, x[1], 0.0]),
    )
    model = ExactPosterior(plant)
    with pytest.raises(DesignInfeasible):
        solve_equilibrium_shift(model, design_template(model), 0.5)


def test_design_json_round_trip(gp_design):
    back = DesiredDesign.from_json(gp_design.to_json())
    np.testing.assert_array_equal(back.Jd, gp_design.Jd)
    np.testing.assert_array_equal(back.Rd, gp_design.Rd)
    np.testing.assert_array_equal(back.x_d, gp_design.x_d)
    assert back.c == gp_design.c


# -- matching and robustness ------------------------------------------------


def test_matching_residual_vanishes(gp_model, gp_design, exact, exact_design):
    rng = np.random.default_rng(3)
    for x in rng.uniform(-2, 2, (100, 3)):
        assert np.max(np.abs(matching_residual(gp_model, gp_design, x))) <= 1e-8
        assert np.max(np.abs(matching_residual(exact, exact_design, x))) <= 1e-8


def test_matching_residual_detects_extra_damping(exact, exact_design):
    Rd = exact_design.Rd.copy()
    Rd[1, 1] += 1.0
    bumped = DesiredDesign(exact_design.Jd, Rd, exact_design.c, exact_design.x_d, exact_design.box_lo, exact_design.box_hi)
    for x in np.random.default_rng(4).uniform(-2, 2, (20, 3)):
        _, g = desired_hamiltonian(bumped, exact, x)
        # G_perp (mu - (Jd - Rd - e2 e2^T) grad) picks up + dHd/dx2 in its second row
        np.testing.assert_allclose(matching_residual(exact, bumped, x), [0.0, g[1]], atol=1e-12)
    x_zero = np.array([0.3, 0.0, 0.0])
    assert np.all(matching_residual(exact, bumped, x_zero) == 0)


def test_margin_equals_corner_enumeration(gp_model, gp_design):
    beta = np.array([2.0, 1.0, 0.5])
    X = np.random.default_rng(5).uniform(-2, 2, (50, 3))
    fast = robustness_margin_batch(gp_model, gp_design, beta, X)
    var = gp_model.dynamics_variance(X)
    for x, v, m in zip(X, var, fast):
        _, g = desired_hamiltonian(gp_design, gp_model, x)
        base = g @ gp_design.Rd @ g
        brute = min(base - g @ (np.array(s) * beta * v) for s in itertools.product((-1, 1), repeat=3))
        assert m == pytest.approx(brute, abs=1e-12 * max(1.0, abs(brute)))


def test_margin_special_cases(exact, exact_design, gp_model, gp_design):
    x = np.array([0.2, -0.4, 0.9])
    _, g = desired_hamiltonian(exact_design, exact, x)
    assert robustness_margin(exact, exact_design, 2.0, x) == pytest.approx(g @ exact_design.Rd @ g)
    assert robustness_margin(gp_model, gp_design, 2.0, gp_design.x_d) == pytest.approx(0.0, abs=1e-11)
    with pytest.raises(ContractViolation):
        robustness_margin(gp_model, gp_design, [-1.0, 0, 0], x)


# -- certificate ------------------------------------------------------------


def test_grid_order_is_lexicographic():
    nodes = grid_nodes([0, 0], [1, 1], (2, 3))
    np.testing.assert_array_equal(nodes, [[0, 0], [0, 0.5], [0, 1], [1, 0], [1, 0.5], [1, 1]])


def test_certificate_passes_with_exact_model(exact, exact_design):
    cert = certify(exact, exact_design, 2.0, grid=(5, 5, 5))
    assert cert.max_matching_residual <= 1e-10
    assert cert.min_robustness_margin >= 0
    assert cert.passed


def test_zero_beta_gives_nonnegative_margins(gp_model, gp_design):
    cert = certify(gp_model, gp_design, 0.0, grid=(7, 7, 7))
    assert cert.min_robustness_margin >= 0
    assert cert.negative_margin_nodes == 0


def test_refined_grid_is_at_least_as_pessimistic(gp_model, gp_design):
    coarse = certify(gp_model, gp_design, 2.0, grid=(11, 11, 11))
    fine = certify(gp_model, gp_design, 2.0, grid=(21, 21, 21))
    assert fine.min_robustness_margin <= coarse.min_robustness_margin + 1e-12
    assert fine.max_matching_residual >= coarse.max_matching_residual - 1e-12


def test_certificate_pass_flag_matches_invariant(gp_model, gp_design):
    cert = certify(gp_model, gp_design, 2.0, grid=(5, 5, 5))
    assert cert.passed == (cert.max_matching_residual <= cert.tol_match and cert.min_robustness_margin >= 0)
    d = cert.to_dict()
    assert d["passed"] == cert.passed
    assert len(d["worst_margin_point"]) == 3
    with pytest.raises(ContractViolation):
        certify(gp_model, gp_design, 2.0, grid=(1, 5, 5))


# -- control ----------------------------------------------------------------


def test_control_is_scaled_third_mismatch(gp_model, gp_design):
    r_hat = gp_model.hyper.phys["r"]
    for x in np.random.default_rng(6).uniform(-2, 2, (20, 3)):
        _, g = desired_hamiltonian(gp_design, gp_model, x)
        mismatch = gp_design.JdRd @ g - gp_model.dynamics_mean(x[None])[0]
        assert control_input(gp_model, gp_design, x)[0] == pytest.approx(r_hat * mismatch[2], rel=1e-12, abs=1e-12)


def test_control_zero_when_already_matched(exact):
    # with Jd - Rd equal to J - R and no shift the plant already is the target
    JR = exact.JR(np.zeros(3))
    design = DesiredDesign((JR - JR.T) / 2, -(JR + JR.T) / 2, 0.0, np.array([1.0, 0, 0]), -2 * np.ones(3), 2 * np.ones(3))
    # the shift term is (x3 - 0)^2, so probe on x3 = 0
    for x in np.random.default_rng(7).uniform(-2, 2, (10, 3)):
        x[2] = 0.0
        assert control_input(exact, design, x)[0] == pytest.approx(0.0, abs=1e-14)


def test_control_is_linear_in_mismatch(gp_model, gp_design):
    x = np.array([0.1, 0.2, 0.3])
    G = gp_model.G(x)
    m = gp_design.JdRd @ desired_hamiltonian(gp_design, gp_model, x)[1] - gp_model.dynamics_mean(x[None])[0]
    u1 = np.linalg.solve(G.T @ G, G.T @ m)
    u2 = np.linalg.solve(G.T @ G, G.T @ (2 * m))
    np.testing.assert_allclose(u2, 2 * u1, rtol=1e-14)
    np.testing.assert_allclose(control_input(gp_model, gp_design, x), u1, rtol=1e-12)


def test_rank_loss(exact_design):
    plant = microactuator()
    dead = ExactPosterior(PlantModel(3, 1, plant.J, plant.R, lambda x: np.zeros((3, 1)), plant.H, plant.gradH))
    with pytest.raises(RankLoss):
        control_input(dead, exact_design, np.zeros(3))


def test_closed_loop_with_exact_model_decreases_hd(exact, exact_design):
    plant = microactuator()
    f = closed_loop(plant, exact, exact_design)
    times, states = integrate(f, [0.0, 0.0, 1.0], 13.0, 1e-3, t_eval=np.arange(0, 13.0001, 0.01))
    Hd = np.array([desired_hamiltonian(exact_design, exact, x)[0] for x in states])
    assert np.max(np.diff(Hd)) <= 1e-4
    assert abs(states[-1, 0] - 0.5) < 0.02
