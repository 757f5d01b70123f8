import json

import pytest

from icnnopf.cli import build_parser, main
from pipeline import ARTIFACTS, run_pipeline


@pytest.fixture(scope="module")
def run(tmp_path_factory):
    out = tmp_path_factory.mktemp("cli")
    return out, run_pipeline(out)


def test_pipeline_outputs(run):
    out, codes = run
    assert codes == [0, 0, 0, 0, 0]
    for name in ARTIFACTS:
        assert (out / name).stat().st_size > 0
    doc = json.loads((out / "opf.json").read_text())
    assert doc["verification"] == "newton" and doc["post_violations"] == 0 and doc["pre_violations"] >= 3
    assert set(doc["controls"]) == {"14", "18", "22", "25", "30", "33"}
    trace = (out / "trace.csv").read_text().splitlines()
    assert trace[0] == "iter,objective,max_surrogate_violation,step_norm,lambda_max"
    assert len(trace) == doc["iterations"] + 1
    summary = (out / "report/summary.txt").read_text()
    assert "coordinated_pq_post_violations: 0" in summary and "b2_lindistflow_iterations" in summary


def test_eval_commands(run, capsys):
    out, _ = run
    models = ["--model-v", str(out / "v.json"), "--model-p", str(out / "p.json")]
    assert main(["--out-dir", str(out), "eval", "mse", "--case", "ieee33", "--data", str(out / "data.npz"),
                 *models, "--out", "mse.csv"]) == 0
    rows = (out / "mse.csv").read_text().splitlines()
    assert rows[0] == "model,v_dev_mse,p_dev_mse" and rows[1] == "A1,0.0,0.0" and rows[3].startswith("A4,")
    assert main(["--out-dir", str(out), "eval", "opf", "--case", "ieee33", *models, "--objective", "vvo",
                 "--out", "ba.csv"]) == 0
    assert len((out / "ba.csv").read_text().splitlines()) == 34
    capsys.readouterr()


def test_case_validate(tmp_path, capsys):
    assert main(["case", "validate", "--case", "ieee33"]) == 0
    assert "33 buses" in capsys.readouterr().out
    bad = tmp_path / "bad.case"
    bad.write_text("[header]\ns_base_kva = 100\nv_base_kv = 12.66\nper_unit = true\n\n[buses]\n1 load 0 0 0.9 1.1 0\n")
    assert main(["case", "validate", "--case", str(bad)]) == 1
    assert "missing slack" in capsys.readouterr().out


def test_pf_run(tmp_path, capsys):
    assert main(["--out-dir", str(tmp_path), "pf", "run", "--case", "ieee33", "--out", "pf.json"]) == 0
    doc = json.loads((tmp_path / "pf.json").read_text())
    assert doc["converged"] and min(doc["v_mag"]) == pytest.approx(0.91309, abs=1e-5)
    inj = tmp_path / "inj.csv"
    inj.write_text("bus,p,q\n18,-1.0,-0.5\n")
    assert main(["pf", "run", "--case", "ieee33", "--injections", str(inj), "--method", "lindistflow"]) == 0
    assert json.loads(capsys.readouterr().out)["method"] == "lindistflow"
    assert main(["pf", "run", "--case", "ieee33", "--scale", "40", "--out", str(tmp_path / "x.json")]) == 2
    inj.write_text("bus,p,q\n99,0,0\n")
    assert main(["pf", "run", "--case", "ieee33", "--injections", str(inj)]) == 1


def test_errors_exit_nonzero(tmp_path, capsys):
    assert main(["train", "--data", str(tmp_path / "missing.npz"), "--target", "v", "--out", "m.json"]) == 1
    assert "error:" in capsys.readouterr().err
    with pytest.raises(SystemExit):
        build_parser().parse_args(["train", "--data", "x", "--target", "v", "--convex", "maybe", "--out", "m"])


def test_seed_accepted_after_subcommand():
    args = build_parser().parse_args(["data", "gen", "--case", "ieee33", "--out", "d", "--seed", "5"])
    assert args.seed == 5 and args.count == 5000
    args = build_parser().parse_args(["train", "--dataset", "d", "--target", "vdev", "--out", "m"])
    assert args.lr == 1e-3 and args.convex is True and args.layers == "64,64"
