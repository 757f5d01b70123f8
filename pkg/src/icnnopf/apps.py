"""Application layer: surrogate fitting, ICNN-constrained OPF (coordinated
real/reactive control and Volt/VAr), the LinDistFlow baseline, MSE
comparisons and report files.

Model naming in reports:

* ``A1`` Newton AC power flow (ground truth)
* ``A2`` LinDistFlow (radial cases only)
* ``A3`` plain MLP surrogate
* ``A4`` ICNN surrogate
* ``B2`` OPF on the LinDistFlow model
"""

from __future__ import annotations

import csv
import io
import json
import logging
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .dataset import DEFAULT_P_BAR, DEFAULT_S_BAR, LabeledDataset, control_selector, injection_features
from .icnn import IcnnModel, TrainConfig, init_model, linear_warm_start, train
from .network import NetworkCase
from .powerflow import (DeviationTargets, Injection, PowerFlowError, deviation_targets, lindistflow,
                        lindistflow_matrices, newton_power_flow, nominal_injection)
from .saddle import (AffineConstraint, DeviceSet, OpfProblem, QuadraticCost, SaddleState, SolverConfig,
                     SurrogateConstraint, balanced_weights, solve_saddle)

log = logging.getLogger(__name__)

KAPPA = 0.005
OBJECTIVES = ("coordinated-pq", "vvo")
# solver defaults for the OPF applications (the solver's own defaults are more conservative)
OPF_SOLVER = SolverConfig(upsilon=1e-2, epsilon=1e-2, stop_tol=1e-8, max_iter=50000)


# --------------------------------------------------------------------------
# surrogates

def fit_surrogate(ds: LabeledDataset, target: str, hidden=(64, 64), convex_mode: bool = True,
                  cfg: TrainConfig | None = None, beta: float = 5.0, seed: int = 0):
    """Train a voltage (``target='v'``) or flow (``'p'``) surrogate on ``ds``.

    The output layer starts at the least-squares affine fit of the training
    split; gradient descent then trains all layers. Returns
    ``(model, history)``.
    """
    if target not in ("v", "p"):
        raise ValueError("target must be 'v' or 'p'")
    cfg = TrainConfig() if cfg is None else cfg
    X, V, P = ds.rows("train")
    Xv, Vv, Pv = ds.rows("val")
    Y, Yv, ns = (V, Vv, ds.norm_v) if target == "v" else (P, Pv, ds.norm_p)
    model = init_model((X.shape[1], *hidden, Y.shape[1]), beta=beta, convex_mode=convex_mode,
                       augmented=True, seed=seed, norm_stats=ns)
    model = linear_warm_start(model, X, Y)
    return train(model, X, Y, cfg, Xv, Yv)


# --------------------------------------------------------------------------
# contexts

@dataclass(frozen=True, eq=False)
class Context:
    """Uncontrollable per-bus injections ``(p_u, q_u)`` and how they were made."""

    p_u: np.ndarray
    q_u: np.ndarray
    load_scale: float = 1.0
    case_id: str = ""

    def __eq__(self, other):
        if not isinstance(other, Context):
            return NotImplemented
        return (self.load_scale == other.load_scale and self.case_id == other.case_id
                and np.array_equal(self.p_u, other.p_u) and np.array_equal(self.q_u, other.q_u))


def context_at_scale(case: NetworkCase, scale: float) -> Context:
    inj = nominal_injection(case, scale)
    return Context(inj.p, inj.q, float(scale), case.digest)


def synthesize_violation_context(case: NetworkCase, min_violations: int = 3, step: float = 0.05,
                                 max_scale: float = 3.0) -> Context:
    """Smallest load scaling on the grid ``1, 1+step, ...`` whose Newton
    solution violates the voltage bounds at ``min_violations`` buses or more."""
    k = 0
    while True:
        scale = round(1.0 + k * step, 10)
        if scale > max_scale:
            raise PowerFlowError(f"no load scaling up to {max_scale} violates {min_violations} buses")
        ctx = context_at_scale(case, scale)
        sol = newton_power_flow(case, Injection(ctx.p_u, ctx.q_u))
        if sol.converged and deviation_targets(case, sol).violated_buses().size >= min_violations:
            return ctx
        k += 1


def save_context(ctx: Context) -> str:
    doc = {"format": "icnnopf-context", "version": 1, "case_id": ctx.case_id, "load_scale": ctx.load_scale,
           "p_u": [float(v) for v in ctx.p_u], "q_u": [float(v) for v in ctx.q_u]}
    return json.dumps(doc, sort_keys=True, indent=1) + "\n"


def load_context(text: str) -> Context:
    doc = json.loads(text)
    if doc.get("format") != "icnnopf-context":
        raise ValueError("not a context file")
    return Context(np.array(doc["p_u"], dtype=float), np.array(doc["q_u"], dtype=float),
                   float(doc["load_scale"]), doc["case_id"])


# --------------------------------------------------------------------------
# problem construction

@dataclass(frozen=True)
class Costs:
    """Per-device quadratic cost coefficients (cost per pu^2)."""

    d_p: float | np.ndarray = 1.0
    d_q: float | np.ndarray = 1.0

    def scaled(self, factor: float) -> "Costs":
        return Costs(np.asarray(self.d_p) * factor, np.asarray(self.d_q) * factor)


def _devices(case, objective, p_bar, s_bar):
    if objective not in OBJECTIVES:
        raise ValueError(f"objective must be one of {OBJECTIVES}")
    nd = case.controllable.size
    if nd == 0:
        raise ValueError("case has no controllable buses")
    return DeviceSet(np.full(nd, p_bar), np.full(nd, s_bar), vvo=objective == "vvo")


def _cost(devices, costs):
    nd = devices.n_devices
    d = np.concatenate([np.broadcast_to(np.asarray(costs.d_p, dtype=float), (nd,)),
                        np.broadcast_to(np.asarray(costs.d_q, dtype=float), (nd,))])
    if devices.vvo:
        d[:nd] = 0.0
    return QuadraticCost(d)


def context_features(case: NetworkCase, ctx: Context) -> np.ndarray:
    """Non-augmented surrogate input of the context alone (controls at zero)."""
    if ctx.p_u.shape != (case.n_bus,):
        raise ValueError("context does not match the case")
    half = injection_features(case, ctx.p_u, ctx.q_u)
    return half[: half.size // 2]


def build_icnn_problem(case: NetworkCase, ctx: Context, model_v: IcnnModel, model_p: IcnnModel,
                       costs: Costs = Costs(), objective: str = "coordinated-pq",
                       p_bar: float = DEFAULT_P_BAR, s_bar: float = DEFAULT_S_BAR) -> OpfProblem:
    devices = _devices(case, objective, p_bar, s_bar)
    base = context_features(case, ctx)
    S = control_selector(case)
    dev = deviation_targets(case, newton_power_flow(case, nominal_injection(case, 0.0)))
    for m, n_out in ((model_v, case.n_bus), (model_p, case.n_branch)):
        if m.n_inputs != 2 * base.size or m.n_outputs != n_out:
            raise ValueError("surrogate dimensions do not match the case")
    cons = {"v": SurrogateConstraint(model_v, base, S, dev.delta_v),
            "p": SurrogateConstraint(model_p, base, S, dev.delta_p)}
    # augmented input [x; -x] doubles the squared norm of the regularizer
    prob = OpfProblem(_cost(devices, costs), devices, cons, reg_scale=2.0, kind=objective,
                      meta={"case_id": case.digest, "model": "A4"})
    return replace(prob, weights=balanced_weights(prob))


def build_lindistflow_problem(case: NetworkCase, ctx: Context, costs: Costs = Costs(),
                              objective: str = "coordinated-pq", p_bar: float = DEFAULT_P_BAR,
                              s_bar: float = DEFAULT_S_BAR) -> OpfProblem:
    """B2: same objective and devices, constraints from the LinDistFlow model.

    Squared voltages ``1 + 2 (R p + X q)`` must lie within the squared bounds
    and flows ``T p`` within the branch limits; each two-sided bound is
    written as a pair ``+-(y - mid) <= half_width``.
    """
    devices = _devices(case, objective, p_bar, s_bar)
    R, X, T = lindistflow_matrices(case)
    ctrl = case.controllable
    nd = ctrl.size
    Av = 2.0 * np.hstack([R[:, ctrl], X[:, ctrl]])
    cv = 1.0 + 2.0 * (R @ ctx.p_u + X @ ctx.q_u)
    lo2, hi2 = case.bus_array("v_min") ** 2, case.bus_array("v_max") ** 2
    Ap = np.hstack([T[:, ctrl], np.zeros((case.n_branch, nd))])
    cp = T @ ctx.p_u
    plo, phi = case.branch_array("p_min"), case.branch_array("p_max")

    def pair(A, c, lo, hi):
        mid, half = 0.5 * (lo + hi), 0.5 * (hi - lo)
        return AffineConstraint(np.vstack([A, -A]), np.concatenate([c - mid, mid - c]), np.concatenate([half, half]))

    cons = {"v": pair(Av, cv, lo2, hi2), "p": pair(Ap, cp, plo, phi)}
    prob = OpfProblem(_cost(devices, costs), devices, cons, reg_scale=1.0, kind=objective,
                      meta={"case_id": case.digest, "model": "B2"})
    return replace(prob, weights=balanced_weights(prob))


# --------------------------------------------------------------------------
# solve and verify

@dataclass(eq=False)
class OpfOutcome:
    objective_kind: str
    model: str
    controls: np.ndarray  # [p^c; q^c] over devices
    state: SaddleState
    pre: DeviationTargets
    predicted_v: np.ndarray
    post: DeviationTargets
    kappa: float
    objective_value: float = float("nan")  # cost at the returned controls
    problem: OpfProblem | None = None

    @property
    def pre_violations(self) -> int:
        return int(self.pre.violated_buses().size)

    @property
    def post_violations(self) -> int:
        """Buses whose Newton-verified deviation exceeds ``delta_v + kappa``."""
        return int(self.post.violated_buses(self.kappa).size)

    @property
    def pre_excess(self) -> float:
        return float(np.max(self.pre.v_dev - self.pre.delta_v, initial=0.0))

    @property
    def post_excess(self) -> float:
        return float(np.max(self.post.v_dev - self.post.delta_v, initial=0.0))


def controlled_injection(case: NetworkCase, ctx: Context, controls: np.ndarray) -> Injection:
    ctrl = case.controllable
    nd = ctrl.size
    p, q = ctx.p_u.copy(), ctx.q_u.copy()
    p[ctrl] += controls[:nd]
    q[ctrl] += controls[nd:]
    return Injection(p, q)


def verify_controls(case: NetworkCase, ctx: Context, controls: np.ndarray) -> DeviationTargets:
    sol = newton_power_flow(case, controlled_injection(case, ctx, controls))
    if not sol.converged:
        raise PowerFlowError(f"verification power flow did not converge: {sol.message}")
    return deviation_targets(case, sol)


def solve_problem(case: NetworkCase, ctx: Context, prob: OpfProblem, cfg: SolverConfig = OPF_SOLVER,
                  kappa: float = KAPPA, x0=None) -> OpfOutcome:
    """Run the saddle solver on ``prob`` and verify its controls with Newton power flow."""
    state = solve_saddle(prob, cfg, x0)
    pre = verify_controls(case, ctx, np.zeros(prob.n_x))
    post = verify_controls(case, ctx, state.x_tilde)
    vc = prob.constraints["v"]
    pred = vc.value(state.x_tilde) if isinstance(vc, SurrogateConstraint) else np.full(case.n_bus, np.nan)
    return OpfOutcome(prob.kind, prob.meta.get("model", ""), state.x_tilde.copy(), state, pre, pred, post, kappa,
                      prob.objective.value(state.x_tilde), prob)


def solve_coordinated_pq(case, ctx, model_v, model_p, costs=Costs(), cfg=None, kappa=KAPPA, **kw) -> OpfOutcome:
    prob = build_icnn_problem(case, ctx, model_v, model_p, costs, "coordinated-pq", **kw)
    return solve_problem(case, ctx, prob, cfg or OPF_SOLVER, kappa)


def solve_vvo(case, ctx, model_v, model_p, costs=Costs(), cfg=None, kappa=KAPPA, **kw) -> OpfOutcome:
    prob = build_icnn_problem(case, ctx, model_v, model_p, costs, "vvo", **kw)
    return solve_problem(case, ctx, prob, cfg or OPF_SOLVER, kappa)


# --------------------------------------------------------------------------
# model comparison

@dataclass(frozen=True)
class MseRow:
    model: str
    v_mse: float | None  # None renders as a dash (model not applicable)
    p_mse: float | None


def run_mse_comparison(case: NetworkCase, ds: LabeledDataset, models: dict, part: str = "test") -> list[MseRow]:
    """MSE of each model's deviation predictions against the Newton labels.

    ``models`` maps a row name (``"A3"``, ``"A4"``) to ``(model_v, model_p)``.
    ``A1`` (labels against themselves) and ``A2`` (LinDistFlow, a dash on
    meshed cases) are always included.
    """
    if ds.case_id != case.digest:
        raise ValueError("dataset was generated for a different case")
    X, V, P = ds.rows(part)
    rows = [MseRow("A1", float(np.mean((V - V) ** 2)), float(np.mean((P - P) ** 2)))]
    if case.topology_kind == "radial":
        idx = ds.split[part]
        ctx, ctrl = ds.context[idx], ds.controls[idx]
        n = case.n_bus
        vv, pp = [], []
        for k in range(idx.size):
            c = Context(ctx[k, :n], ctx[k, n:])
            sol = lindistflow(case, controlled_injection(case, c, ctrl[k]))
            dev = deviation_targets(case, sol)
            vv.append(dev.v_dev)
            pp.append(dev.p_dev)
        rows.append(MseRow("A2", float(np.mean((np.array(vv) - V) ** 2)), float(np.mean((np.array(pp) - P) ** 2))))
    else:
        rows.append(MseRow("A2", None, None))
    for name in sorted(models):
        mv, mp = models[name]
        rows.append(MseRow(name, float(np.mean((mv.predict(X) - V) ** 2)), float(np.mean((mp.predict(X) - P) ** 2))))
    return rows


# --------------------------------------------------------------------------
# reports

@dataclass(eq=False)
class ExperimentReport:
    mse_table: list[MseRow] = field(default_factory=list)
    before_after: list[dict] = field(default_factory=list)
    convergence_trace: list[dict] = field(default_factory=list)
    summary: list[tuple[str, object]] = field(default_factory=list)
    config_echo: dict = field(default_factory=dict)


def _fmt(v) -> str:
    if v is None:
        return "-"
    if isinstance(v, (bool, np.bool_)):
        return str(bool(v)).lower()
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return str(v)


def before_after_rows(case: NetworkCase, outcome: OpfOutcome) -> list[dict]:
    ids = [b.id for b in case.buses]
    return [{"bus": ids[i], "v_dev_pre": outcome.pre.v_dev[i], "v_dev_predicted": outcome.predicted_v[i],
             "v_dev_post": outcome.post.v_dev[i], "delta_v": outcome.post.delta_v[i], "oracle": "newton"}
            for i in range(case.n_bus)]


def trace_rows(case: NetworkCase, state: SaddleState, every: int = 1) -> list[dict]:
    """Per-iteration device controls (requires a recorded path)."""
    path = state.history.get("x")
    if path is None:
        return []
    ids = [case.buses[i].id for i in case.controllable]
    nd = len(ids)
    rows = []
    for k in range(0, path.shape[0], every):
        row = {"iter": k}
        row.update({f"p_{b}": path[k, j] for j, b in enumerate(ids)})
        row.update({f"q_{b}": path[k, nd + j] for j, b in enumerate(ids)})
        rows.append(row)
    return rows


def solver_trace_rows(state: SaddleState) -> list[dict]:
    h = state.history
    return [{"iter": k + 1, "objective": h["objective"][k], "max_surrogate_violation": h["max_violation"][k],
             "step_norm": h["step_norm"][k], "lambda_max": h["lambda_max"][k]} for k in range(state.iter)]


def write_csv(rows: list[dict], header: list[str] | None = None) -> str:
    header = list(rows[0]) if rows and header is None else (header or [])
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for r in rows:
        w.writerow([_fmt(r[k]) for k in header])
    return buf.getvalue()


MSE_HEADER = ["model", "v_dev_mse", "p_dev_mse"]
BEFORE_AFTER_HEADER = ["bus", "v_dev_pre", "v_dev_predicted", "v_dev_post", "delta_v", "oracle"]
SOLVER_TRACE_HEADER = ["iter", "objective", "max_surrogate_violation", "step_norm", "lambda_max"]


def emit_report(report: ExperimentReport, out_dir) -> list[Path]:
    """Write ``mse_table.csv``, ``before_after.csv``, ``convergence_trace.csv``
    and ``summary.txt`` to ``out_dir``. Output bytes depend only on the report."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    mse = [{"model": r.model, "v_dev_mse": r.v_mse, "p_dev_mse": r.p_mse} for r in report.mse_table]
    trace_header = list(report.convergence_trace[0]) if report.convergence_trace else ["iter"]
    files = {
        "mse_table.csv": write_csv(mse, MSE_HEADER),
        "before_after.csv": write_csv(report.before_after, BEFORE_AFTER_HEADER),
        "convergence_trace.csv": write_csv(report.convergence_trace, trace_header),
    }
    lines = [f"{k}: {_fmt(v)}" for k, v in report.summary]
    lines.append("config: " + json.dumps(report.config_echo, sort_keys=True, default=_fmt))
    files["summary.txt"] = "\n".join(lines) + "\n"
    written = []
    for name, text in files.items():
        p = out / name
        p.write_text(text, encoding="utf-8")
        written.append(p)
    return written


def build_report(case: NetworkCase, ds: LabeledDataset, icnn: tuple, mlp: tuple | None, ctx: Context,
                 costs: Costs = Costs(), cfg: SolverConfig = OPF_SOLVER, kappa: float = KAPPA,
                 config_echo: dict | None = None, trace_every: int = 10) -> ExperimentReport:
    """Model comparison plus coordinated, VVO and (radial only) B2 solves on ``ctx``."""
    models = {"A4": icnn} if mlp is None else {"A3": mlp, "A4": icnn}
    mse = run_mse_comparison(case, ds, models)
    pq = solve_coordinated_pq(case, ctx, *icnn, costs=costs, cfg=cfg, kappa=kappa)
    vvo = solve_vvo(case, ctx, *icnn, costs=costs, cfg=cfg, kappa=kappa)
    summary = [("case_id", case.digest), ("context_load_scale", ctx.load_scale),
               ("kappa", kappa), ("pre_violations", pq.pre_violations), ("pre_max_excess", pq.pre_excess)]
    runs = [("coordinated_pq", pq), ("vvo", vvo)]
    if case.topology_kind == "radial":
        runs.append(("b2_lindistflow", solve_problem(case, ctx, build_lindistflow_problem(case, ctx, costs), cfg, kappa)))
    for name, out in runs:
        summary += [(f"{name}_iterations", out.state.iter), (f"{name}_converged", out.state.converged),
                    (f"{name}_objective", out.objective_value), (f"{name}_post_violations", out.post_violations),
                    (f"{name}_post_max_excess", out.post_excess)]
    echo = dict(config_echo or {})
    echo.update({"case_id": case.digest, "dataset_seed": ds.seed, "upsilon": cfg.upsilon, "epsilon": cfg.epsilon,
                 "stop_tol": cfg.stop_tol, "max_iter": cfg.max_iter, "solver_seed": cfg.seed,
                 "d_p": np.asarray(costs.d_p).tolist(), "d_q": np.asarray(costs.d_q).tolist()})
    return ExperimentReport(mse, before_after_rows(case, pq), trace_rows(case, pq.state, trace_every), summary, echo)
