import csv
import hashlib
import json

import numpy as np
import pytest

from interopt.cli import main
from interopt.dataset import FeatureSchema, FeatureSpec, load_csv, load_schema, save_schema
from interopt.emulator import load_model, r_squared


def run(*argv):
    return main([str(a) for a in argv])


def sha(path):
    return hashlib.sha256(path.read_bytes()).hexdigest()


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    assert run("synth", "--count", 50, "--seed", 7, "--noise", 0.05, "--out", root / "s", "--quiet") == 0
    (root / "fast.json").write_text(json.dumps({"train": {"max_epochs": 200},
                                                "interopt": {"n_ensemble": 20, "max_blocks": 3,
                                                             "iters_per_block": 4}}))
    assert run("train", "--data", root / "s/data.csv", "--schema", root / "s/schema.json",
               "--config", root / "fast.json", "--out", root / "t", "--quiet") == 0
    return root


def test_synth_rerun_identical(tmp_path):
    assert run("synth", "--count", 50, "--seed", 7, "--out", tmp_path / "a", "--quiet") == 0
    assert run("synth", "--count", 50, "--seed", 7, "--out", tmp_path / "b", "--quiet") == 0
    for name in ("data.csv", "truth.json", "schema.json"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
    assert len((tmp_path / "a/data.csv").read_text().splitlines()) == 51


def test_usage_errors(tmp_path, capsys):
    assert run("synth", "--count", 0, "--out", tmp_path) == 2
    assert "usage error" in capsys.readouterr().err
    assert run("frobnicate") == 2
    assert run("train") == 2


def test_manifest_lists_outputs(workspace):
    m = json.loads((workspace / "t/run_manifest.json").read_text())
    assert m["command"] == "train" and m["seeds"] == {"seed": 0}
    for name, digest in m["outputs"].items():
        assert sha(workspace / "t" / name) == digest
    assert str(workspace / "s/data.csv") in m["inputs"]
    assert m["config"]["max_epochs"] == 200
    assert not list((workspace / "t").glob(".*"))  # no temp files left behind


def test_train_fit_report_matches_artifact(workspace, capsys):
    model = load_model(workspace / "t/model.json")
    data = load_csv(workspace / "s/data.csv", load_schema(workspace / "s/schema.json"))
    fit = json.loads((workspace / "t/fit_report.json").read_text())["fit_r2"]
    assert fit == r_squared(model.predict(data.X), data.y)


def test_train_degenerate_feature_exit_1(tmp_path, workspace, capsys):
    rows = (workspace / "s/data.csv").read_text().splitlines()
    header = rows[0].split(",")
    k = header.index("toc")
    out = [rows[0]] + [",".join(c if i != k else "3.0" for i, c in enumerate(r.split(","))) for r in rows[1:]]
    (tmp_path / "flat.csv").write_text("\n".join(out) + "\n")
    assert run("train", "--data", tmp_path / "flat.csv", "--schema", workspace / "s/schema.json",
               "--out", tmp_path, "--quiet") == 1
    assert "toc" in capsys.readouterr().err


def test_train_schema_mismatch_exit_1(tmp_path, workspace):
    other = FeatureSchema((FeatureSpec("p", "adjustable"), FeatureSpec("q", "target")))
    save_schema(other, tmp_path / "o.json")
    assert run("train", "--data", workspace / "s/data.csv", "--schema", tmp_path / "o.json",
               "--out", tmp_path, "--quiet") == 1


def test_corrupted_artifact_exit_1(tmp_path, workspace, capsys):
    text = (workspace / "t/model.json").read_text()
    (tmp_path / "m.json").write_text(text.replace('"activation": "tanh"', '"activation": "relu"'))
    assert run("explain", "--model", tmp_path / "m.json", "--data", workspace / "s/data.csv",
               "--out", tmp_path, "--quiet") == 1
    assert "ModelIntegrityError" in capsys.readouterr().err


def test_cv_outputs(tmp_path, workspace):
    rows = (workspace / "s/data.csv").read_text().splitlines()[:13]
    (tmp_path / "small.csv").write_text("\n".join(rows) + "\n")
    (tmp_path / "c.json").write_text('{"max_epochs": 30}')
    assert run("cv", "--data", tmp_path / "small.csv", "--schema", workspace / "s/schema.json",
               "--config", tmp_path / "c.json", "--out", tmp_path / "cv", "--quiet") == 0
    rep = json.loads((tmp_path / "cv/cv_report.json").read_text())
    with open(tmp_path / "cv/cv_predictions.csv") as fh:
        preds = list(csv.DictReader(fh))
    assert len(preds) == 12
    obs = [float(r["observed"]) for r in preds]
    assert rep["cv_r2"] == pytest.approx(r_squared([float(r["cv_predicted"]) for r in preds], obs))


def test_explain_exact_efficiency_and_ordering(tmp_path, workspace):
    assert run("explain", "--model", workspace / "t/model.json", "--data", workspace / "s/data.csv",
               "--exact", "--background", 32, "--out", tmp_path, "--quiet") == 0
    with open(tmp_path / "attributions.csv") as fh:
        rows = list(csv.reader(fh))
    names = rows[0][1:-2]
    phi = np.array([[float(v) for v in r[1:-2]] for r in rows[1:]])
    base = np.array([float(r[-2]) for r in rows[1:]])
    pred = np.array([float(r[-1]) for r in rows[1:]])
    assert np.max(np.abs(phi.sum(axis=1) + base - pred)) <= 1e-9
    g = json.loads((tmp_path / "global_importance.json").read_text())
    mean_abs = np.abs(phi).mean(axis=0)
    assert [e["feature"] for e in g["importance"]] == [names[k] for k in np.argsort(-mean_abs, kind="stable")]
    assert (tmp_path / "importance.svg").read_text().startswith("<svg")


def test_explain_sampled_is_reproducible(tmp_path, workspace):
    for d in ("a", "b"):
        assert run("explain", "--model", workspace / "t/model.json", "--data", workspace / "s/data.csv",
                   "--sampled", 1, "--seed", 1, "--out", tmp_path / d, "--quiet") == 0
    for name in ("attributions.csv", "global_importance.json", "importance.svg"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_explain_exact_cap_exit_2(tmp_path, capsys):
    specs = [FeatureSpec(f"x{i}", "adjustable") for i in range(17)] + [FeatureSpec("y", "target")]
    save_schema(FeatureSchema(tuple(specs)), tmp_path / "wide.json")
    (tmp_path / "c.json").write_text('{"max_epochs": 5}')
    assert run("synth", "--count", 20, "--schema", tmp_path / "wide.json", "--out", tmp_path / "s", "--quiet") == 0
    assert run("train", "--data", tmp_path / "s/data.csv", "--schema", tmp_path / "wide.json",
               "--config", tmp_path / "c.json", "--out", tmp_path / "t", "--quiet") == 0
    capsys.readouterr()
    assert run("explain", "--model", tmp_path / "t/model.json", "--data", tmp_path / "s/data.csv",
               "--out", tmp_path / "e", "--quiet") == 2
    assert "--sampled" in capsys.readouterr().err
    assert run("explain", "--model", tmp_path / "t/model.json", "--data", tmp_path / "s/data.csv",
               "--sampled", 4, "--out", tmp_path / "e", "--quiet") == 0


def _optimize(workspace, out, *extra, data=None):
    return run("optimize", "--model", workspace / "t/model.json", "--data", data or workspace / "s/data.csv",
               "--config", workspace / "fast.json", "--out", out, "--quiet", *extra)


def test_optimize_deterministic_and_no_input_mutation(tmp_path, workspace):
    before = sha(workspace / "s/data.csv"), sha(workspace / "t/model.json")
    assert _optimize(workspace, tmp_path / "a") == 0
    assert _optimize(workspace, tmp_path / "b") == 0
    for name in ("campaign.json", "campaign_summary.csv", "distribution.csv"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
    assert (sha(workspace / "s/data.csv"), sha(workspace / "t/model.json")) == before


def test_optimize_single_well_matches_all(tmp_path, workspace):
    rows = (workspace / "s/data.csv").read_text().splitlines()[:2]
    (tmp_path / "one.csv").write_text("\n".join(rows) + "\n")
    wid = rows[1].split(",")[0]
    assert _optimize(workspace, tmp_path / "w", "--well", wid, data=tmp_path / "one.csv") == 0
    assert _optimize(workspace, tmp_path / "all", "--all", data=tmp_path / "one.csv") == 0
    a = json.loads((tmp_path / "w/campaign.json").read_text())["wells"]
    b = json.loads((tmp_path / "all/campaign.json").read_text())["wells"]
    assert a == b and a[0]["id"] == wid


def test_optimize_unknown_well_exit_2(tmp_path, workspace):
    assert _optimize(workspace, tmp_path, "--well", "no-such-well") == 2


def test_optimize_ablation_rows(tmp_path, workspace):
    rows = (workspace / "s/data.csv").read_text().splitlines()[:4]
    (tmp_path / "few.csv").write_text("\n".join(rows) + "\n")
    assert _optimize(workspace, tmp_path / "ab", "--ablation", data=tmp_path / "few.csv") == 0
    lines = (tmp_path / "ab/ablation.csv").read_text().splitlines()
    assert len(lines) == 5 and lines[0].startswith("block_optimization,adaptive_step")


def test_report_counts(tmp_path, workspace):
    assert _optimize(workspace, tmp_path / "o") == 0
    assert run("report", "--campaign", tmp_path / "o/campaign.json", "--out", tmp_path / "r", "--quiet") == 0
    with open(tmp_path / "r/distribution.csv") as fh:
        dist = list(csv.DictReader(fh))
    with open(tmp_path / "o/campaign_summary.csv") as fh:
        wells = list(csv.DictReader(fh))
    assert sum(int(r["count"]) for r in dist) == len(wells) == 50
    pct = np.array([float(w["reduction_pct"]) for w in wells])
    edges = [-np.inf, 1, 5, 10, 20, 30, np.inf]
    recount = [int(np.sum((pct >= lo) & (pct < hi))) for lo, hi in zip(edges, edges[1:])]
    assert [int(r["count"]) for r in dist] == recount
    for name in ("histogram.svg", "curves.svg"):
        assert "<svg" in (tmp_path / "r" / name).read_text()


def test_report_empty_campaign_exit_2(tmp_path, workspace):
    assert _optimize(workspace, tmp_path / "o") == 0
    d = json.loads((tmp_path / "o/campaign.json").read_text())
    d["wells"] = []
    (tmp_path / "empty.json").write_text(json.dumps(d))
    assert run("report", "--campaign", tmp_path / "empty.json", "--out", tmp_path / "r", "--quiet") == 2
    (tmp_path / "junk.json").write_text("{}")
    assert run("report", "--campaign", tmp_path / "junk.json", "--out", tmp_path / "r", "--quiet") == 1
