import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import central_diff, grid_projection, one_d_saddle
from icnnopf.icnn import init_model
from icnnopf.saddle import (AffineConstraint, BoxSet, DeviceSet, OpfProblem, QuadraticCost, SaddleState,
                            SolverConfig, StepSize, SurrogateConstraint, balanced_weights, contraction_factor,
                            estimate_step_size, fixed_point_residual, initial_state, lagrangian_value,
                            monotone_map, phi_eval, project_box_disk, regularization_sweep, sample_iterates,
                            solve_saddle, step_size_from_constants)


def one_d_problem():
    # min x^2  s.t.  1 - x <= 0
    return OpfProblem(QuadraticCost([2.0]), BoxSet([-5.0], [5.0]),
                      {"g": AffineConstraint(np.array([[-1.0]]), np.array([1.0]), np.array([0.0]))})


def surrogate_problem(seed=0, n_dev=2, m=3):
    rng = np.random.default_rng(seed)
    model = init_model((2 * m, 8, 8, 4), augmented=True, seed=seed)
    sel = np.zeros((m, 2 * n_dev))
    sel[0, 0] = sel[1, 1] = sel[2, 2] = 1.0
    con = SurrogateConstraint(model, rng.normal(size=m) * 0.1, sel, np.full(4, 0.5))
    dev = DeviceSet(np.full(n_dev, 0.5), np.full(n_dev, 0.6))
    return OpfProblem(QuadraticCost(np.ones(2 * n_dev), rng.normal(size=2 * n_dev)), dev, {"v": con}, reg_scale=2.0)


# --- projection ------------------------------------------------------------

def test_projection_examples():
    assert np.allclose(project_box_disk(3.0, 4.0, 2.0, 2.5), (1.5, 2.0))
    assert np.allclose(project_box_disk(0.1, 0.1, 2.0, 2.5), (0.1, 0.1))
    assert np.allclose(project_box_disk(-1.0, 0.2, 2.0, 2.5), (0.0, 0.2))
    # both constraints active: p clipped to p_bar, q to the disk
    p, q = project_box_disk(3.0, 0.5, 0.5, 0.6)
    assert p == pytest.approx(0.5) and q == pytest.approx(np.sqrt(0.6 ** 2 - 0.25))
    with pytest.raises(ValueError):
        project_box_disk(0.0, 0.0, 1.0, 0.0)


@settings(max_examples=60, deadline=None)
@given(st.floats(-2, 2), st.floats(-2, 2), st.floats(0.0, 1.0), st.floats(0.1, 1.0))
def test_projection_matches_grid_oracle(p, q, p_bar, s_bar):
    pp, qq = project_box_disk(p, q, p_bar, s_bar)
    gp, gq = grid_projection(p, q, p_bar, s_bar)
    ours, grid = np.hypot(pp - p, qq - q), np.hypot(gp - p, gq - q)
    assert ours <= grid + 1e-12
    assert ours >= grid - 2e-3  # grid resolution
    assert 0 <= pp <= p_bar + 1e-12 and pp ** 2 + qq ** 2 <= s_bar ** 2 + 1e-12


@settings(max_examples=60, deadline=None)
@given(st.lists(st.floats(-3, 3), min_size=6, max_size=6), st.booleans())
def test_device_projection_idempotent_and_feasible(vals, vvo):
    dev = DeviceSet([0.5, 0.2, 1.0], [0.6, 0.6, 0.8], vvo=vvo)
    once = dev.project(np.array(vals))
    assert dev.contains(once)
    assert np.array_equal(dev.project(once), once)


def test_vvo_projection():
    dev = DeviceSet([0.5, 0.5], [0.6, 0.6], vvo=True)
    out = dev.project(np.array([0.3, -0.2, 0.9, -0.1]))
    assert np.array_equal(out, [0.0, 0.0, 0.6, -0.1])
    assert not dev.contains(np.array([0.1, 0.0, 0.0, 0.0]))


# --- regularized Lagrangian ---------------------------------------------------

def test_gradients_match_finite_differences(rng):
    prob = surrogate_problem()
    cfg = SolverConfig(upsilon=0.03, epsilon=0.02)
    x = prob.feasible.sample(rng, 1)[0]
    lam = rng.uniform(0, 2, 4)
    state = SaddleState(x, {"v": lam})
    gx, gd = phi_eval(prob, state, cfg)
    fx = lambda y: lagrangian_value(prob, SaddleState(y, {"v": lam}), cfg)  # noqa: E731
    fl = lambda mu: lagrangian_value(prob, SaddleState(x, {"v": mu}), cfg)  # noqa: E731
    assert np.allclose(central_diff(fx, x, 1e-6)[0], gx, atol=1e-7)
    assert np.allclose(central_diff(fl, lam, 1e-6)[0], gd["v"], atol=1e-7)


def test_no_duals_no_regularization_gives_cost_gradient():
    prob = surrogate_problem()
    cfg = SolverConfig(upsilon=1e-300, epsilon=1e-300)
    x = np.array([0.1, 0.2, -0.3, 0.4])
    gx, _ = phi_eval(prob, SaddleState(x, {"v": np.zeros(4)}), cfg)
    assert np.allclose(gx, prob.objective.grad(x), atol=1e-15)


def test_primal_block_with_augmented_regularizer():
    prob = surrogate_problem()
    cfg = SolverConfig(upsilon=0.05, epsilon=0.01)
    x = np.array([0.1, 0.2, -0.3, 0.4])
    gx, _ = phi_eval(prob, SaddleState(x, {"v": np.zeros(4)}), cfg)
    assert np.allclose(gx, prob.objective.diag * x + prob.objective.linear + 2 * 0.05 * x, atol=1e-15)


def test_map_is_strongly_monotone(rng):
    prob = surrogate_problem(seed=3)
    cfg = SolverConfig(upsilon=0.02, epsilon=0.01)
    z1, z2 = sample_iterates(prob, cfg, rng, 1000), sample_iterates(prob, cfg, rng, 1000)
    for a, b in zip(z1, z2):
        gap = (monotone_map(prob, a, cfg) - monotone_map(prob, b, cfg)) @ (a - b)
        assert gap >= cfg.eta * np.sum((a - b) ** 2) - 1e-10


# --- step size -----------------------------------------------------------------

def test_step_size_formula():
    assert step_size_from_constants(0.01, 10.0) == pytest.approx(2e-4)
    assert step_size_from_constants(0.01, 10.0, 0.5) == pytest.approx(1e-4)
    assert contraction_factor(2e-4, 0.01, 10.0) == pytest.approx(1.0)
    assert contraction_factor(1e-4, 0.01, 10.0) < 1.0
    assert StepSize(1e-4, 0.01, 10.0).rho == contraction_factor(1e-4, 0.01, 10.0)


def test_estimated_step_contracts():
    prob = one_d_problem()
    cfg = SolverConfig(upsilon=0.01, epsilon=0.01)
    step = estimate_step_size(prob, cfg)
    assert 0 < step.mu < 2 * cfg.eta / step.lipschitz ** 2
    assert step.rho < 1.0


def test_solver_config_validation():
    for bad in (dict(upsilon=0), dict(epsilon=-1), dict(mu=0.0), dict(safety=1.5), dict(stop_tol=0),
                dict(max_iter=0)):
        with pytest.raises(ValueError):
            SolverConfig(**bad)
    assert SolverConfig(upsilon=0.1, epsilon=0.2).eta == 0.1


# --- iteration -------------------------------------------------------------------

def test_one_d_closed_form_and_contraction():
    prob = one_d_problem()
    cfg = SolverConfig(upsilon=0.01, epsilon=0.01, stop_tol=1e-11, max_iter=100000)
    st_ = solve_saddle(prob, cfg)
    x_star, lam_star = one_d_saddle(0.01, 0.01)
    assert st_.converged
    assert abs(st_.x_tilde[0] - x_star) <= 1e-6
    assert abs(st_.duals["g"][0] - lam_star) <= 1e-5
    assert st_.history["x"].shape[0] == st_.iter + 1
    assert contraction_factor(st_.mu, cfg.eta, st_.lipschitz) < 1.0


def test_contraction_ratio_along_path():
    prob = one_d_problem()
    cfg = SolverConfig(upsilon=0.01, epsilon=0.01, max_iter=3000)
    step = estimate_step_size(prob, cfg)
    assert step.rho < 1.0
    x_star, lam_star = one_d_saddle(0.01, 0.01)
    z = np.array([0.0, 0.0])
    dist = [np.hypot(*(z - [x_star, lam_star]))]
    for _ in range(3000):
        gx, gl = monotone_map(prob, z, cfg)
        z = np.array([np.clip(z[0] - step.mu * gx, -5, 5), max(0.0, z[1] - step.mu * gl)])
        dist.append(np.hypot(*(z - [x_star, lam_star])))
    dist = np.array(dist)
    ok = dist[:-1] > 1e-12
    assert np.all(dist[1:][ok] / dist[:-1][ok] <= step.rho + 1e-6)


def test_history_and_invariants():
    prob = surrogate_problem(seed=5)
    cfg = SolverConfig(upsilon=0.05, epsilon=0.05, max_iter=2000, stop_tol=1e-9)
    st_ = solve_saddle(prob, cfg)
    h = st_.history
    assert h["x"].shape == (st_.iter + 1, prob.n_x)
    assert all(prob.feasible.contains(x) for x in h["x"])
    assert np.all(h["lambda_min"] >= 0)
    assert h["objective"].size == h["step_norm"].size == st_.iter
    if st_.converged:
        assert fixed_point_residual(prob, st_, cfg) <= 10 * cfg.stop_tol


def test_slack_constraint_keeps_dual_at_zero():
    prob = OpfProblem(QuadraticCost([2.0]), BoxSet([-5.0], [5.0]),
                      {"g": AffineConstraint(np.array([[1.0]]), np.array([0.0]), np.array([10.0]))})
    cfg = SolverConfig(upsilon=0.01, epsilon=0.01, stop_tol=1e-12, max_iter=50000)
    st_ = solve_saddle(prob, cfg, x0=[1.0])
    assert np.all(st_.history["lambda_max"] == 0.0)
    assert abs(st_.x_tilde[0]) < 1e-6


def test_max_iter_reported():
    cfg = SolverConfig(upsilon=0.01, epsilon=0.01, max_iter=5)
    st_ = solve_saddle(one_d_problem(), cfg)
    assert st_.iter == 5 and not st_.converged


def test_huge_step_raises():
    prob = OpfProblem(QuadraticCost([2.0]), BoxSet([-np.inf], [np.inf]),
                      {"g": AffineConstraint(np.array([[-1.0]]), np.array([1.0]), np.array([0.0]))})
    cfg = SolverConfig(upsilon=0.01, epsilon=0.01, mu=1e3, max_iter=10000)
    with pytest.raises(FloatingPointError, match="non-finite"), np.errstate(over="ignore", invalid="ignore"):
        solve_saddle(prob, cfg, x0=[1.0])


def test_initial_state_is_projected():
    prob = surrogate_problem()
    s = initial_state(prob, np.array([5.0, 5.0, 5.0, 5.0]))
    assert prob.feasible.contains(s.x_tilde) and np.all(s.lambda_v == 0) and s.lambda_p is None


@settings(max_examples=8, deadline=None)
@given(st.floats(0.5, 3.0), st.floats(0.5, 3.0), st.floats(0.6, 1.5))
def test_two_d_qp_family(d1, d2, b):
    # min 0.5 d1 x1^2 + 0.5 d2 x2^2  s.t.  b - x1 - x2 <= 0
    prob = OpfProblem(QuadraticCost([d1, d2]), BoxSet([-5.0, -5.0], [5.0, 5.0]),
                      {"g": AffineConstraint(np.array([[-1.0, -1.0]]), np.array([b]), np.array([0.0]))})
    ups = eps = 0.01
    cfg = SolverConfig(upsilon=ups, epsilon=eps, stop_tol=1e-9, max_iter=200000)
    st_ = solve_saddle(prob, cfg, record_path=False)
    # closed form: x_i = lam / (d_i + ups), b - sum(x) = eps * lam
    lam = b / (eps + 1 / (d1 + ups) + 1 / (d2 + ups))
    assert np.allclose(st_.x_tilde, [lam / (d1 + ups), lam / (d2 + ups)], atol=1e-6)


# --- regularization sweep ------------------------------------------------------------

def test_sweep_rows_track_closed_form():
    cfg = SolverConfig(upsilon=0.02, epsilon=0.02, stop_tol=1e-9, max_iter=200000, safety=1.0)
    rows = regularization_sweep(one_d_problem(), cfg, 2)
    assert len(regularization_sweep(one_d_problem(), cfg, 1)) == 2
    obj = [r.objective for r in rows]
    assert abs(obj[2] - obj[1]) < abs(obj[1] - obj[0])
    assert rows[1].upsilon == 0.01 and rows[1].epsilon == 0.01
    gaps = [1 - r.x_tilde[0] for r in rows]
    assert gaps[1] < gaps[0]
    for r in rows:
        assert r.x_tilde[0] == pytest.approx(one_d_saddle(r.upsilon, r.epsilon)[0], abs=1e-5)
    with pytest.raises(ValueError):
        regularization_sweep(one_d_problem(), cfg, 0)


def test_balanced_weights_normalize_rows():
    prob = OpfProblem(QuadraticCost([1.0, 1.0]), BoxSet([-1, -1], [1, 1]),
                      {"a": AffineConstraint(np.array([[300.0, 400.0]]), np.zeros(1), np.ones(1)),
                       "b": AffineConstraint(np.zeros((1, 2)), np.zeros(1), np.ones(1))})
    w = balanced_weights(prob)
    assert w["a"] == pytest.approx(1 / 500) and w["b"] == 1.0
    with pytest.raises(ValueError):
        OpfProblem(prob.objective, prob.feasible, prob.constraints, weights={"a": 0.0})


def test_sweep_warm_start_matches_cold_start():
    cfg = SolverConfig(upsilon=0.02, epsilon=0.02, stop_tol=1e-9, max_iter=200000)
    warm = regularization_sweep(one_d_problem(), cfg, 1)
    cold = regularization_sweep(one_d_problem(), cfg, 1, warm_start=False)
    assert warm[1].x_tilde[0] == pytest.approx(cold[1].x_tilde[0], abs=1e-6)
    assert warm[1].iterations < cold[1].iterations
    # starting at the saddle point stops at once
    x_star, lam_star = one_d_saddle(0.01, 0.01)
    st_ = solve_saddle(one_d_problem(), SolverConfig(upsilon=0.01, epsilon=0.01, stop_tol=1e-9),
                       x0=[x_star], duals0={"g": [lam_star]})
    assert st_.iter == 1 and st_.converged
