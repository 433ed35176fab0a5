import json
import os
from pathlib import Path

import numpy as np
import pytest

from stabcon import cli, pipeline
from stabcon.errors import UnfittableMetricError
from stabcon.io import bundled_path, load_config, load_constraint, validate
from stabcon.pipeline import ArtifactBundle, TargetResult, export_report, run_pipeline, slug
from stabcon.scenarios import load_dataset, partition
from stabcon.surrogate import SocSurrogate, verify

GOLDEN = Path(__file__).parent / "golden"


@pytest.fixture(scope="module")
def base_config():
    return load_config(bundled_path("ninebus_config.json")).replace(n_c=2)


def run(config, model, out, **changes):
    return run_pipeline(config.replace(**changes), model, out=out)


def check_golden(name, text):
    path = GOLDEN / name
    if os.environ.get("UPDATE_GOLDEN"):
        path.parent.mkdir(exist_ok=True)
        path.write_text(text)
    assert text == path.read_text()


def test_slug():
    assert slug("g4[bus7,W1]") == "g4_bus7_W1"
    assert slug("g2") == "g2"


# ------------------------------------------------------------ artifacts

@pytest.fixture(scope="module")
def g3_run(base_config, ninebus, tmp_path_factory):
    return run(base_config, ninebus, tmp_path_factory.mktemp("g3"), metrics=("g3",))


def test_single_metric_artifacts(g3_run):
    out = g3_run.out_dir
    assert [p.name for p in (out / "constraints").iterdir()] == ["g3_bus7.json"]
    assert sorted(p.name for p in (out / "datasets").iterdir()) == ["g3_bus7.csv", "g3_bus7.json"]
    assert (out / "report.txt").exists() and (out / "report.json").exists() and (out / "run.log").exists()
    assert g3_run.exit_code == 0
    validate(json.loads((out / "constraints" / "g3_bus7.json").read_text()), "constraint")


def test_round_trip_verify_counts(g3_run):
    out = g3_run.out_dir
    res = g3_run.result("g3[bus7]")
    sur = SocSurrogate.from_dict(load_constraint(out / res.constraint_path))
    ds = load_dataset(out / res.dataset_path)
    report = verify(sur, partition(ds, sur.g_lim, sur.nu))
    summary = report.summary()
    del summary["omega2_rms"]
    assert summary == res.counts
    assert res.misclassified() == (0, 0)
    assert report.omega2_rms == pytest.approx(res.omega2_rms, rel=1e-12)


def test_metric_values_csv(g3_run):
    lines = (g3_run.out_dir / "metrics" / "g3_bus7.csv").read_text().splitlines()
    assert lines[0] == "scenario_id,metric,value,limit,feasible"
    assert len(lines) == 1 + g3_run.n_scenarios


def test_g3_report_golden(g3_run):
    text, data = export_report(g3_run, timing=False)
    assert "wall_time_s" not in data
    check_golden("report_g3.txt", text)


def test_exact_metrics_skip_fitting(base_config, ninebus, tmp_path):
    bundle = run(base_config, ninebus, tmp_path, metrics=("g5", "g6"))
    assert {r.method for r in bundle.results} == {"exact"}
    log = (tmp_path / "run.log").read_text()
    assert "fitting" not in log and "exact cone" in log
    assert all(r.misclassified() == (0, 0) for r in bundle.results)
    for r in bundle.results:
        assert load_constraint(tmp_path / r.constraint_path)["diagnostics"]["exact_disagreements"] == 0
    check_golden("report_exact.txt", export_report(bundle, timing=False)[0])


def test_equality_metrics(base_config, ninebus, tmp_path):
    bundle = run(base_config, ninebus, tmp_path, metrics=("h1", "h3"))
    for name in ("h1", "h3"):
        data = load_constraint(tmp_path / "constraints" / f"{name}.json")
        assert data["metric"] == name
    h3 = load_constraint(tmp_path / "constraints" / "h3.json")
    assert [t["target"] for t in h3["targets"]] == ["Gamma[W1]", "Gamma[W2]"]
    assert bundle.result("h1").max_rel_residual is not None


def test_evaluate_mode_writes_no_constraints(base_config, ninebus, tmp_path):
    bundle = run_pipeline(base_config.replace(metrics=("g1",)), ninebus, fit=False, out=tmp_path)
    assert not (tmp_path / "constraints").exists()
    assert all(r.method == "evaluate" for r in bundle.results)
    assert (tmp_path / "datasets" / "g1_W1.csv").exists()


def test_unwritable_output_fails_before_compute(base_config, ninebus, tmp_path, monkeypatch):
    blocker = tmp_path / "file"
    blocker.write_text("")

    def boom(*a, **k):
        raise AssertionError("compute started")

    monkeypatch.setattr(pipeline, "enumerate_scenarios", boom)
    with pytest.raises(OSError):
        run(base_config, ninebus, blocker / "out", metrics=("g3",))


def test_runs_are_byte_identical(base_config, ninebus, tmp_path):
    a = run(base_config, ninebus, tmp_path / "a", metrics=("g2", "g4"))
    b = run(base_config, ninebus, tmp_path / "b", metrics=("g2", "g4"), workers=3)
    for sub in ("constraints", "datasets", "metrics"):
        files = sorted(p.name for p in (a.out_dir / sub).iterdir())
        assert files == sorted(p.name for p in (b.out_dir / sub).iterdir())
        for f in files:
            assert (a.out_dir / sub / f).read_bytes() == (b.out_dir / sub / f).read_bytes()
    assert export_report(a, timing=False) == export_report(b, timing=False)


def test_failure_is_isolated(base_config, ninebus, tmp_path, monkeypatch):
    def refuse(ds, *a, **k):
        if ds.metric.startswith("g1"):
            raise UnfittableMetricError("no separating cone", {"attempts": [0.1]})
        return real(ds, *a, **k)

    real = pipeline.tune_nu
    monkeypatch.setattr(pipeline, "tune_nu", refuse)
    bundle = run(base_config, ninebus, tmp_path, metrics=("g1", "g2", "g5"))
    assert bundle.exit_code == 1
    assert bundle.result("g1[W1]").status == "unfittable"
    assert bundle.result("g2").status == "ok" and bundle.result("g5[W1]").status == "ok"
    assert "unfittable" in (tmp_path / "run.log").read_text()
    assert "exit status: 1" in (tmp_path / "report.txt").read_text()


def test_mixed_status_report_golden():
    counts = {"omega1": {"n": 3, "misclassified": 0}, "omega2": {"n": 2, "misclassified": 0},
              "omega3": {"n": 5, "misclassified": 0}}
    bundle = ArtifactBundle(Path("out"), "toy", 10, 1, results=[
        TargetResult("g1[W1]", "g1", "fit", n_samples=10, counts=counts, omega2_rms=0.012, nu=0.25),
        TargetResult("g2", "g2", "fit", "unfittable", n_samples=10, message="no separating cone after 20 widenings"),
        TargetResult("g3[bus7]", "g3", "fit", "error", message="SingularNetworkError: no voltage source online"),
        TargetResult("h1", "h1", "regression", n_samples=10, max_rel_residual=0.031),
    ])
    text, data = export_report(bundle, timing=False)
    assert data["exit_code"] == 1
    check_golden("report_mixed.txt", text)


# ------------------------------------------------------------------ CLI

@pytest.fixture(scope="module")
def cli_run(tmp_path_factory):
    out = tmp_path_factory.mktemp("cli")
    rc = cli.main(["fit", "--metrics", "g3,g5", "--nc", "2", "--out", str(out)])
    return rc, out


def test_cli_fit(cli_run):
    rc, out = cli_run
    assert rc == 0
    assert (out / "constraints" / "g3_bus7.json").exists()
    assert (out / "constraints" / "g5_W2.json").exists()


def test_cli_verify(cli_run, capsys):
    _, out = cli_run
    rc = cli.main(["verify", str(out / "constraints" / "g3_bus7.json"), str(out / "datasets" / "g3_bus7.csv")])
    report = json.loads(capsys.readouterr().out)
    assert rc == 0 and report["conservative"]


def test_cli_verify_flags_loosened_constraint(cli_run, tmp_path, capsys):
    _, out = cli_run
    data = load_constraint(out / "constraints" / "g3_bus7.json")
    data["d"] += 100.0
    loose = tmp_path / "loose.json"
    loose.write_text(json.dumps(data))
    assert cli.main(["verify", str(loose), str(out / "datasets" / "g3_bus7.csv")]) == 1
    assert not json.loads(capsys.readouterr().out)["conservative"]


def test_cli_verify_mismatched_dataset(cli_run, capsys):
    _, out = cli_run
    rc = cli.main(["verify", str(out / "constraints" / "g3_bus7.json"), str(out / "datasets" / "g5_W1.csv")])
    assert rc == 2 and "do not match" in capsys.readouterr().err


@pytest.mark.parametrize("fmt", ["json", "text", "csv"])
def test_cli_export(cli_run, fmt, tmp_path, capsys):
    _, out = cli_run
    src = out / "constraints" / "g3_bus7.json"
    assert cli.main(["export", str(src), "--format", fmt]) == 0
    text = capsys.readouterr().out
    if fmt == "json":
        assert json.loads(text) == load_constraint(src)
    elif fmt == "text":
        assert text.startswith("g3[bus7]: || A X + b ||")
    else:
        rows = text.splitlines()
        data = load_constraint(src)
        assert rows[0].split(",") == ["row", *data["variables"], "b"]
        assert len(rows) == 1 + len(data["A"]) + 1
        np.testing.assert_array_equal([float(v) for v in rows[-1].split(",")[1:]], [*data["c"], data["d"]])
    target = tmp_path / f"c.{fmt}"
    assert cli.main(["export", str(src), "--format", fmt, "--output", str(target)]) == 0
    assert target.read_text() == text


def test_cli_errors_exit_two(tmp_path, capsys):
    blocker = tmp_path / "file"
    blocker.write_text("")
    assert cli.main(["fit", "--metrics", "g5", "--out", str(blocker / "x")]) == 2
    assert cli.main(["fit", "--metrics", "g42"]) == 2
    bad = tmp_path / "net.json"
    bad.write_text("{")
    assert cli.main(["evaluate", "--network", str(bad)]) == 2
    assert capsys.readouterr().err.count("error:") == 3
