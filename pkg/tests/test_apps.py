import numpy as np
import pytest

from icnnopf.apps import (BEFORE_AFTER_HEADER, OPF_SOLVER, Context, Costs, ExperimentReport, MseRow,
                          before_after_rows, build_icnn_problem, build_lindistflow_problem, context_at_scale,
                          context_features, emit_report, fit_surrogate, load_context, run_mse_comparison,
                          save_context, solve_coordinated_pq, solve_problem, solve_vvo,
                          synthesize_violation_context, trace_rows, write_csv)
from icnnopf.dataset import build_dataset, sample_scenarios
from icnnopf.icnn import TrainConfig
from icnnopf.powerflow import PowerFlowError


@pytest.fixture(scope="module")
def hot(case33):
    return synthesize_violation_context(case33)


@pytest.fixture(scope="module")
def pq_out(case33, hot, small_models):
    return solve_coordinated_pq(case33, hot, *small_models[:2])


def test_violation_context(case33, hot):
    assert hot.load_scale == pytest.approx(1.2)
    assert hot.case_id == case33.digest
    with pytest.raises(PowerFlowError):
        synthesize_violation_context(case33, min_violations=40, max_scale=1.5)


def test_context_round_trip(hot):
    assert load_context(save_context(hot)) == hot
    with pytest.raises(ValueError):
        load_context('{"format": "other"}')


def test_context_features_zero_controls(case33, hot):
    f = context_features(case33, hot)
    assert f.size == 2 * (case33.n_bus - 1)
    assert np.array_equal(f[: case33.n_bus - 1], hot.p_u[case33.non_slack])
    with pytest.raises(ValueError):
        context_features(case33, Context(np.zeros(3), np.zeros(3)))


def test_calm_context_needs_no_control(case33, small_models):
    mv, mp = small_models[:2]
    out = solve_coordinated_pq(case33, context_at_scale(case33, 0.8), mv, mp)
    assert out.pre_violations == 0 and out.post_violations == 0
    assert np.max(np.abs(out.controls)) <= 1e-6
    assert all(np.all(v == 0) for v in out.state.duals.values())


def test_violation_context_is_cleared(case33, hot, small_models, pq_out):
    mv, mp = small_models[:2]
    out = pq_out
    assert out.pre_violations >= 3
    assert out.post_violations == 0
    assert out.post_excess < out.pre_excess
    assert out.objective_value == pytest.approx(0.5 * np.sum(out.controls ** 2))
    # doubling the cost rescales the objective; the controls still clear the violations
    twice = solve_coordinated_pq(case33, hot, mv, mp, costs=Costs().scaled(2.0))
    assert twice.post_violations == out.post_violations


def test_vvo_uses_reactive_power_only(case33, hot, small_models):
    mv, mp = small_models[:2]
    out = solve_vvo(case33, hot, mv, mp)
    nd = case33.controllable.size
    assert np.all(out.controls[:nd] == 0)
    assert np.all(np.abs(out.controls[nd:]) <= 0.6 + 1e-12)
    assert out.post_violations == 0


def test_free_active_power_beats_vvo(case33, hot, small_models):
    mv, mp = small_models[:2]
    costs = Costs(d_p=0.0, d_q=1.0)
    pq = solve_coordinated_pq(case33, hot, mv, mp, costs=costs)
    vvo = solve_vvo(case33, hot, mv, mp, costs=costs)
    assert pq.objective_value <= vvo.objective_value + 1e-6


def test_lindistflow_baseline(case33, hot):
    prob = build_lindistflow_problem(case33, hot)
    assert prob.meta["model"] == "B2" and prob.reg_scale == 1.0
    out = solve_problem(case33, hot, prob)
    assert out.post_violations == 0
    assert np.all(np.isnan(out.predicted_v))


def test_lindistflow_baseline_rejects_meshed(case33_meshed):
    with pytest.raises(PowerFlowError, match="radial"):
        build_lindistflow_problem(case33_meshed, context_at_scale(case33_meshed, 1.2))


def test_problem_dimension_checks(case33, case33_meshed, small_models):
    mv, mp = small_models[:2]
    prob = build_icnn_problem(case33, context_at_scale(case33, 1.0), mv, mp)
    assert prob.reg_scale == 2.0 and prob.n_x == 12
    assert set(prob.weights) == {"v", "p"}
    with pytest.raises(ValueError, match="dimensions"):
        build_icnn_problem(case33, context_at_scale(case33, 1.0), mv, mv)
    with pytest.raises(ValueError, match="objective"):
        build_icnn_problem(case33, context_at_scale(case33, 1.0), mv, mp, objective="loss")


def test_mse_table(case33, small_dataset, small_models):
    iv, ip, mv, mp = small_models
    rows = run_mse_comparison(case33, small_dataset, {"A3": (mv, mp), "A4": (iv, ip)})
    by = {r.model: r for r in rows}
    assert [r.model for r in rows] == ["A1", "A2", "A3", "A4"]
    assert by["A1"].v_mse == 0.0 and by["A1"].p_mse == 0.0
    for col in ("v_mse", "p_mse"):
        a2, a3, a4 = (getattr(by[k], col) for k in ("A2", "A3", "A4"))
        assert a3 <= 10 * a4 and a3 <= a2 and a4 <= a2


def test_mse_table_meshed_has_dash(case33_meshed):
    ds = build_dataset(case33_meshed, sample_scenarios(case33_meshed, 60, seed=0))
    mv, _ = fit_surrogate(ds, "v", (8,), cfg=TrainConfig(epochs=1))
    mp, _ = fit_surrogate(ds, "p", (8,), cfg=TrainConfig(epochs=1))
    rows = run_mse_comparison(case33_meshed, ds, {"A4": (mv, mp)})
    assert rows[1] == MseRow("A2", None, None)
    assert write_csv([{"model": "A2", "v": None}]).splitlines()[1] == "A2,-"


def test_mse_case_mismatch(case33_meshed, small_dataset):
    with pytest.raises(ValueError, match="different case"):
        run_mse_comparison(case33_meshed, small_dataset, {})


def test_report_files(tmp_path, case33, pq_out):
    out = pq_out
    ba = before_after_rows(case33, out)
    assert len(ba) == case33.n_bus and all(r["oracle"] == "newton" for r in ba)
    tr = trace_rows(case33, out.state, 100)
    rep = ExperimentReport([MseRow("A1", 0.0, 0.0)], ba, tr, [("x", 1.5), ("ok", True)], {"seed": 0})
    a, b = tmp_path / "a", tmp_path / "b"
    files_a, files_b = emit_report(rep, a), emit_report(rep, b)
    for fa, fb in zip(files_a, files_b):
        assert fa.read_bytes() == fb.read_bytes()
    lines = (a / "before_after.csv").read_text().splitlines()
    assert lines[0] == ",".join(BEFORE_AFTER_HEADER) and len(lines) == case33.n_bus + 1
    assert (a / "summary.txt").read_text().startswith("x: 1.5\nok: true\n")
    trace = (a / "convergence_trace.csv").read_text().splitlines()
    assert trace[0].startswith("iter,p_14,p_18")
    assert len(trace) == 1 + len(range(0, out.state.iter + 1, 100))


def test_empty_trace_is_header_only(tmp_path):
    emit_report(ExperimentReport(), tmp_path)
    assert (tmp_path / "convergence_trace.csv").read_text() == "iter\n"
    assert (tmp_path / "mse_table.csv").read_text() == "model,v_dev_mse,p_dev_mse\n"


def test_default_solver_settings():
    assert OPF_SOLVER.upsilon == OPF_SOLVER.epsilon == 1e-2
