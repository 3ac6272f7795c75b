import json

import numpy as np
import pytest
import yaml

from trajpredict.cli import main
from trajpredict.geo import read_trajectories_csv
from trajpredict.metrics import read_records_csv
from trajpredict.nn import load_model
from trajpredict.pipeline import ConfigError, PipelineConfig
from trajpredict.synth import ScenarioSpec

TINY = {
    "scenario": {"n_trajectories": 24, "seed": 2},
    "n_test": 4,
    "bc_epochs": 3,
    "gail": {"iterations": 2, "batch_samples": 300, "disc_epochs": 2},
    "m_values": [0.0, 0.5],
    "repetitions": 2,
}


def _write_config(path, **extra):
    path.write_text(yaml.safe_dump({**TINY, **extra}))
    return str(path)


@pytest.fixture(scope="module")
def tiny_run(tmp_path_factory):
    root = tmp_path_factory.mktemp("tiny")
    out = root / "run"
    assert main(["pipeline", "--config", _write_config(root / "cfg.yaml"), "--out-dir", str(out)]) == 0
    return out


def test_pipeline_artifacts(tiny_run):
    mult, one = tiny_run / "MultPolicies", tiny_run / "OnePolicy"
    for f in ("clusters.json", "forest.json", "cluster0.json", "cluster1.json", "cluster0_bc.json",
              "cluster0_diagnostics.csv", "metrics.csv"):
        assert (mult / f).exists(), f
    assert not (mult / "cluster2.json").exists()
    assert (one / "policy.json").exists() and not (one / "forest.json").exists()
    manifest = json.loads((tiny_run / "manifest.json").read_text())
    assert len(manifest["settings"]["MultPolicies"]["policies"]) == 2
    assert manifest["settings"]["OnePolicy"].get("forest") is None
    resolved = PipelineConfig.load(tiny_run / "config.yaml")
    assert resolved.repetitions == 2 and resolved.gail["iterations"] == 2 and resolved.log_std == 0.9
    recs = read_records_csv(tiny_run / "metrics.csv")
    for setting in ("MultPolicies", "OnePolicy"):
        for m in (0.0, 0.5):
            assert sum(r.setting == setting and r.m == m for r in recs) == 2 * 4
    summary = (tiny_run / "summary.csv").read_text().splitlines()
    assert len(summary) == 1 + 2 * 2 * 8


def test_overrides_and_config_errors(tmp_path, capsys):
    assert main(["pipeline", "--config", _write_config(tmp_path / "c.yaml", m_values=[1.0])]) == 2
    assert main(["pipeline", "--config", _write_config(tmp_path / "d.yaml", bogus=1)]) == 2
    assert main(["pipeline", "--config", _write_config(tmp_path / "e.yaml"), "--set", "rollout=sideways"]) == 2
    assert main(["pipeline", "--config", str(tmp_path / "missing.yaml")]) == 2
    assert "configuration error" in capsys.readouterr().err
    with pytest.raises(ConfigError):
        PipelineConfig(trajectories="x.csv").validate()


def test_stage_failure_names_stage_and_keeps_artifacts(tmp_path, capsys):
    out = tmp_path / "run"
    cfg = _write_config(tmp_path / "c.yaml", bc_folds=100000)
    assert main(["pipeline", "--config", cfg, "--out-dir", str(out)]) == 1
    assert "train_gail[MultPolicies/cluster0]" in capsys.readouterr().err
    assert (out / "config.yaml").exists() and (out / "MultPolicies" / "clusters.json").exists()


def test_predict_determinism(tiny_run, tmp_path):
    test_csv = str(tiny_run / "data" / "test.csv")
    outs = {}
    for name, extra in [("m1", ["--mean"]), ("m2", ["--mean"]), ("s1", []), ("s2", []), ("s3", ["--seed", "5"])]:
        path = tmp_path / f"{name}.csv"
        assert main(["predict", "--run-dir", str(tiny_run), "--trajectories", test_csv, "--m", "0.2",
                     "--out", str(path), *extra]) == 0
        outs[name] = path.read_bytes()
    assert outs["m1"] == outs["m2"] and outs["s1"] == outs["s2"] and outs["s1"] != outs["s3"]
    preds = read_trajectories_csv(tmp_path / "m1.csv")
    actual = read_trajectories_csv(test_csv)
    assert [p.id for p in preds] == [f"{t.id}_pred" for t in actual]
    start = int(np.floor(0.2 * (len(actual[0]) - 1)))
    assert np.array_equal(preds[0].positions[0], actual[0].positions[start])
    assert main(["evaluate", "--pred", str(tmp_path / "s1.csv"), "--actual", test_csv, "--ref", "-1.3", "40.55", "600",
                 "--out", str(tmp_path / "ev.csv"), "--summary", str(tmp_path / "sum.csv")]) == 0
    assert len(read_records_csv(tmp_path / "ev.csv")) == len(actual)


def test_predict_rejects_schema_mismatch(tiny_run, tmp_path, capsys):
    args = ["predict", "--setting", "OnePolicy", "--policy", str(tiny_run / "MultPolicies" / "cluster0.json"),
            "--grid", str(tiny_run / "data" / "weather_grid.csv"), "--arrivals", str(tiny_run / "data" / "arrivals.csv"),
            "--dest", "-1.3", "40.55", "600", "--mean-duration", "600",
            "--trajectories", str(tiny_run / "data" / "test.csv"), "--out", str(tmp_path / "p.csv")]
    assert main(args) == 1
    assert "schema" in capsys.readouterr().err


def test_stagewise_commands(tmp_path, capsys):
    spec = tmp_path / "spec.yaml"
    ScenarioSpec(n_trajectories=16, seed=5).save(spec)
    d = tmp_path / "raw"
    assert main(["synth", "--spec", str(spec), "--out", str(d)]) == 0
    pre = str(tmp_path / "pre.csv")
    assert main(["preprocess", "--trajectories", str(d / "raw_trajectories.csv"), "--grid", str(d / "weather_grid.csv"),
                 "--arrivals", str(d / "arrivals.csv"), "--origin", "0.2", "40.8", "300", "--dest", "-1.3", "40.55",
                 "600", "--out", pre]) == 0
    assert "kept 16 rejected 0" in capsys.readouterr().out
    clusters = str(tmp_path / "clusters.json")
    assert main(["cluster", "--trajectories", pre, "--k-max", "4", "--out", clusters]) == 0
    assert capsys.readouterr().out.startswith("k=2")
    assert main(["train-classifier", "--trajectories", pre, "--clusters", clusters, "--arrivals",
                 str(d / "arrivals.csv"), "--trees", "5", "--out", str(tmp_path / "forest.json")]) == 0
    bc = str(tmp_path / "bc.json")
    common = ["--trajectories", pre, "--clusters", clusters, "--cluster", "0"]
    assert main(["train-bc", *common, "--epochs", "2", "--out", bc]) == 0
    assert load_model(bc).log_std.tolist() == [0.9] * 3
    assert main(["train-gail", *common, "--policy", bc, "--grid", str(d / "weather_grid.csv"), "--dest", "-1.3",
                 "40.55", "600", "--iterations", "1", "--batch-samples", "100", "--disc-epochs", "1",
                 "--diagnostics", str(tmp_path / "diag.csv"), "--out", str(tmp_path / "gail.json")]) == 0
    assert len((tmp_path / "diag.csv").read_text().splitlines()) == 2
    assert main(["train-bc", "--trajectories", pre, "--arrival-context", "--arrivals", str(d / "arrivals.csv"),
                 "--epochs", "1", "--out", str(tmp_path / "one.json")]) == 0
    assert len(load_model(tmp_path / "one.json").state_stats.names) == 10 + 5
