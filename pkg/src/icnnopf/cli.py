"""Command-line entry point.

Subcommands: ``case validate``, ``pf run``, ``data gen``, ``train``,
``opf context``, ``opf solve``, ``eval mse``, ``eval opf``, ``report``.
Relative output paths are resolved against ``--out-dir``. Every output is
deterministic for fixed inputs and ``--seed``.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import apps
from .dataset import SamplerSpec, build_dataset, load_dataset, sample_scenarios, save_dataset
from .icnn import TrainConfig, load_model, save_model
from .network import CaseError, load_case, parse_case, validate_bounds
from .powerflow import Injection, PowerFlowError, deviation_targets, lindistflow, newton_power_flow, nominal_injection
from .saddle import SolverConfig

log = logging.getLogger("icnnopf")


def _out(args, path) -> Path:
    p = Path(path)
    if not p.is_absolute():
        p = Path(args.out_dir) / p
    p.parent.mkdir(parents=True, exist_ok=True)
    return p


def _sha(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _model(path):
    return load_model(Path(path).read_text(encoding="utf-8"))


def _context(args, case):
    if getattr(args, "context", None):
        ctx = apps.load_context(Path(args.context).read_text(encoding="utf-8"))
        if ctx.case_id and ctx.case_id != case.digest:
            raise ValueError("context file was made for a different case")
        return ctx
    return apps.synthesize_violation_context(case, args.min_violations)


def _solver_cfg(args) -> SolverConfig:
    d = apps.OPF_SOLVER
    return SolverConfig(upsilon=args.upsilon, epsilon=args.epsilon, mu=args.mu, max_iter=args.max_iter,
                        stop_tol=args.stop_tol, lipschitz_samples=d.lipschitz_samples, safety=d.safety,
                        lambda_cap=d.lambda_cap, seed=args.seed)


# --------------------------------------------------------------------------
# commands

def cmd_case_validate(args) -> int:
    try:
        if Path(args.case).exists():
            case = parse_case(Path(args.case).read_text(encoding="utf-8"), name=args.case)
        else:
            case = load_case(args.case)
    except CaseError as exc:
        for part in str(exc).split("; "):
            print(f"error: {part}")
        return 1
    diags = validate_bounds(case)
    for d in diags:
        print(f"error: {d}")
    if not diags:
        print(f"ok: {case.n_bus} buses, {case.n_branch} branches, {case.topology_kind}, "
              f"{case.controllable.size} controllable, digest {case.digest}")
    return 1 if diags else 0


def _read_injections(path, case) -> Injection:
    """CSV with header ``bus,p,q`` (per-unit, generation positive); absent buses inject zero."""
    p, q = np.zeros(case.n_bus), np.zeros(case.n_bus)
    with open(path, encoding="utf-8", newline="") as fh:
        for row in csv.DictReader(fh):
            i = case.index.get(int(row["bus"]))
            if i is None:
                raise ValueError(f"injection file names unknown bus {row['bus']}")
            p[i], q[i] = float(row["p"]), float(row["q"])
    return Injection(p, q)


def cmd_pf_run(args) -> int:
    case = load_case(args.case)
    inj = _read_injections(args.injections, case) if args.injections else nominal_injection(case, args.scale)
    sol = lindistflow(case, inj) if args.method == "lindistflow" else newton_power_flow(case, inj, tol=args.tol)
    doc = {"method": sol.method, "converged": sol.converged, "iterations": sol.iterations,
           "max_mismatch": sol.max_mismatch, "message": sol.message, "bus_ids": [b.id for b in case.buses],
           "v_mag": sol.v_mag.tolist(), "v_ang": sol.v_ang.tolist(), "branch_p": sol.branch_p.tolist()}
    if sol.converged:
        doc["violated_buses"] = [case.buses[i].id for i in deviation_targets(case, sol).violated_buses()]
    text = json.dumps(doc, sort_keys=True, indent=1) + "\n"
    if args.out:
        _out(args, args.out).write_text(text, encoding="utf-8")
    else:
        sys.stdout.write(text)
    if not sol.converged:
        print(f"power flow failed: {sol.message}", file=sys.stderr)
        return 2
    return 0


def cmd_data_gen(args) -> int:
    case = load_case(args.case)
    spec = SamplerSpec((args.load_lo, args.load_hi), (0.0, args.p_bar), (-args.s_bar, args.s_bar))
    scen = sample_scenarios(case, args.count, spec, seed=args.seed)
    ds = build_dataset(case, scen)
    path = _out(args, args.out)
    save_dataset(ds, path)
    print(f"wrote {len(ds)} scenarios ({ds.dropped} dropped) to {path}")
    return 0


def cmd_train(args) -> int:
    ds = load_dataset(args.dataset)
    hidden = tuple(int(w) for w in args.layers.split(",") if w)
    target = args.target[0]
    cfg = TrainConfig(learning_rate=args.lr, epochs=args.epochs, batch_size=args.batch_size, seed=args.seed)
    model, _ = apps.fit_surrogate(ds, target, hidden, convex_mode=args.convex, cfg=cfg, beta=args.beta,
                                  seed=args.seed)
    path = _out(args, args.out)
    path.write_text(save_model(model), encoding="utf-8")
    X, V, P = ds.rows("test")
    Y = V if target == "v" else P
    mse = float(np.mean((model.predict(X) - Y) ** 2))
    print(f"wrote {path}; held-out MSE {mse!r}")
    return 0


def cmd_opf_context(args) -> int:
    case = load_case(args.case)
    if args.scale is not None:
        ctx = apps.context_at_scale(case, args.scale)
    else:
        ctx = apps.synthesize_violation_context(case, args.min_violations)
    path = _out(args, args.out)
    path.write_text(apps.save_context(ctx), encoding="utf-8")
    print(f"wrote context (load scale {ctx.load_scale!r}) to {path}")
    return 0


def _opf_outcome(args):
    case = load_case(args.case)
    ctx = _context(args, case)
    mv, mp = _model(args.model_v), _model(args.model_p)
    costs = apps.Costs(args.d_p, args.d_q)
    prob = apps.build_icnn_problem(case, ctx, mv, mp, costs, args.objective)
    return case, ctx, apps.solve_problem(case, ctx, prob, _solver_cfg(args), args.kappa)


def cmd_opf_solve(args) -> int:
    case, ctx, out = _opf_outcome(args)
    st = out.state
    ids = [case.buses[i].id for i in case.controllable]
    nd = len(ids)
    doc = {"objective_kind": out.objective_kind, "iterations": st.iter, "converged": st.converged,
           "mu": st.mu, "objective": out.objective_value, "load_scale": ctx.load_scale,
           "controls": {str(b): {"p": float(out.controls[j]), "q": float(out.controls[nd + j])}
                        for j, b in enumerate(ids)},
           "pre_violations": out.pre_violations, "post_violations": out.post_violations,
           "pre_max_excess": out.pre_excess, "post_max_excess": out.post_excess, "kappa": out.kappa,
           "verification": "newton"}
    _out(args, args.out).write_text(json.dumps(doc, sort_keys=True, indent=1) + "\n", encoding="utf-8")
    if args.trace:
        _out(args, args.trace).write_text(apps.write_csv(apps.solver_trace_rows(st), apps.SOLVER_TRACE_HEADER),
                                          encoding="utf-8")
    print(f"{out.objective_kind}: {st.iter} iterations (converged={st.converged}); "
          f"violations {out.pre_violations} -> {out.post_violations}")
    return 0 if out.post_violations == 0 else 3


def cmd_eval_mse(args) -> int:
    case = load_case(args.case)
    ds = load_dataset(args.data)
    models = {"A4": (_model(args.model_v), _model(args.model_p))}
    if args.mlp_v and args.mlp_p:
        models["A3"] = (_model(args.mlp_v), _model(args.mlp_p))
    rows = apps.run_mse_comparison(case, ds, models)
    text = apps.write_csv([{"model": r.model, "v_dev_mse": r.v_mse, "p_dev_mse": r.p_mse} for r in rows],
                          apps.MSE_HEADER)
    _out(args, args.out).write_text(text, encoding="utf-8")
    sys.stdout.write(text)
    return 0


def cmd_eval_opf(args) -> int:
    case, ctx, out = _opf_outcome(args)
    text = apps.write_csv(apps.before_after_rows(case, out), apps.BEFORE_AFTER_HEADER)
    _out(args, args.out).write_text(text, encoding="utf-8")
    print(f"{out.objective_kind}: violations {out.pre_violations} -> {out.post_violations} "
          f"(allowance {out.kappa!r})")
    return 0 if out.post_violations == 0 else 3


def cmd_report(args) -> int:
    case = load_case(args.case)
    ds = load_dataset(args.data)
    ctx = _context(args, case)
    icnn = (_model(args.model_v), _model(args.model_p))
    mlp = (_model(args.mlp_v), _model(args.mlp_p)) if args.mlp_v and args.mlp_p else None
    echo = {"seed": args.seed, "kappa": args.kappa, "dataset_sha256": _sha(args.data),
            "model_v_sha256": _sha(args.model_v), "model_p_sha256": _sha(args.model_p)}
    rep = apps.build_report(case, ds, icnn, mlp, ctx, apps.Costs(args.d_p, args.d_q), _solver_cfg(args),
                            args.kappa, echo, args.trace_every)
    files = apps.emit_report(rep, _out(args, args.report_dir))
    for f in files:
        print(f"wrote {f}")
    return 0


# --------------------------------------------------------------------------
# parser

def _bool(text: str) -> bool:
    t = text.strip().lower()
    if t in ("true", "1", "yes"):
        return True
    if t in ("false", "0", "no"):
        return False
    raise argparse.ArgumentTypeError(f"expected true or false, got {text!r}")


def _add_opf_args(p, need_out=True):
    p.add_argument("--case", required=True, help="case file or bundled case name")
    p.add_argument("--context", help="context file (default: synthesize a violation context)")
    p.add_argument("--min-violations", type=int, default=3)
    p.add_argument("--model-v", required=True)
    p.add_argument("--model-p", required=True)
    p.add_argument("--objective", choices=apps.OBJECTIVES, default="coordinated-pq")
    d = apps.OPF_SOLVER
    p.add_argument("--upsilon", type=float, default=d.upsilon)
    p.add_argument("--epsilon", type=float, default=d.epsilon)
    p.add_argument("--mu", type=float, default=None, help="fixed step size (default: estimated)")
    p.add_argument("--max-iter", type=int, default=d.max_iter)
    p.add_argument("--stop-tol", type=float, default=d.stop_tol)
    p.add_argument("--kappa", type=float, default=apps.KAPPA, help="model-error allowance on verified deviations")
    p.add_argument("--d-p", type=float, default=1.0)
    p.add_argument("--d-q", type=float, default=1.0)


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="icnnopf", description=__doc__.splitlines()[0])
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--out-dir", default=".")
    ap.add_argument("--log-level", default="WARNING", choices=["DEBUG", "INFO", "WARNING", "ERROR"])
    sub = ap.add_subparsers(dest="group", required=True)

    g = sub.add_parser("case").add_subparsers(dest="cmd", required=True)
    p = g.add_parser("validate")
    p.add_argument("--case", required=True)
    p.set_defaults(func=cmd_case_validate)

    g = sub.add_parser("pf").add_subparsers(dest="cmd", required=True)
    p = g.add_parser("run")
    p.add_argument("--case", required=True)
    p.add_argument("--injections", help="CSV bus,p,q in per-unit (default: the case's loads)")
    p.add_argument("--scale", type=float, default=1.0, help="load scaling when --injections is absent")
    p.add_argument("--method", choices=["newton", "lindistflow"], default="newton")
    p.add_argument("--tol", type=float, default=1e-8)
    p.add_argument("--out")
    p.set_defaults(func=cmd_pf_run)

    g = sub.add_parser("data").add_subparsers(dest="cmd", required=True)
    p = g.add_parser("gen")
    p.add_argument("--case", required=True)
    p.add_argument("--count", type=int, default=5000)
    p.add_argument("--load-lo", type=float, default=0.6)
    p.add_argument("--load-hi", type=float, default=1.4)
    p.add_argument("--p-bar", type=float, default=0.5)
    p.add_argument("--s-bar", type=float, default=0.6)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_data_gen)

    p = sub.add_parser("train")
    p.add_argument("--dataset", "--data", dest="dataset", required=True)
    p.add_argument("--target", choices=["vdev", "pdev", "v", "p"], required=True)
    p.add_argument("--convex", type=_bool, default=True, help="true: ICNN, false: plain MLP baseline")
    p.add_argument("--layers", "--hidden", dest="layers", default="64,64")
    p.add_argument("--beta", type=float, default=5.0)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--epochs", type=int, default=30)
    p.add_argument("--batch-size", type=int, default=64)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train)

    g = sub.add_parser("opf").add_subparsers(dest="cmd", required=True)
    p = g.add_parser("context")
    p.add_argument("--case", required=True)
    p.add_argument("--scale", type=float, default=None, help="fixed load scale instead of synthesis")
    p.add_argument("--min-violations", type=int, default=3)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_opf_context)
    p = g.add_parser("solve")
    _add_opf_args(p)
    p.add_argument("--out", required=True)
    p.add_argument("--trace", help="per-iteration CSV trace")
    p.set_defaults(func=cmd_opf_solve)

    g = sub.add_parser("eval").add_subparsers(dest="cmd", required=True)
    p = g.add_parser("mse")
    p.add_argument("--case", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--model-v", required=True)
    p.add_argument("--model-p", required=True)
    p.add_argument("--mlp-v")
    p.add_argument("--mlp-p")
    p.add_argument("--out", default="mse_table.csv")
    p.set_defaults(func=cmd_eval_mse)
    p = g.add_parser("opf")
    _add_opf_args(p)
    p.add_argument("--out", default="before_after.csv")
    p.set_defaults(func=cmd_eval_opf)

    p = sub.add_parser("report")
    _add_opf_args(p)
    p.add_argument("--data", required=True)
    p.add_argument("--mlp-v")
    p.add_argument("--mlp-p")
    p.add_argument("--trace-every", type=int, default=10)
    p.add_argument("--report-dir", default="report")
    p.set_defaults(func=cmd_report)
    for action in _leaf_parsers(ap):
        action.add_argument("--seed", type=int, default=argparse.SUPPRESS)
    return ap


def _leaf_parsers(parser):
    for act in parser._actions:
        if isinstance(act, argparse._SubParsersAction):
            for child in act.choices.values():
                if any(isinstance(a, argparse._SubParsersAction) for a in child._actions):
                    yield from _leaf_parsers(child)
                else:
                    yield child


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=getattr(logging, args.log_level), format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (CaseError, PowerFlowError, ValueError, FloatingPointError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
