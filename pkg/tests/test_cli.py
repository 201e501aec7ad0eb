import json
import subprocess
import sys

import pytest

from goweb import cli, nncore

TINY = {
    "n_categories": 2, "leaves_per_category": 3,
    "synth": {"n_users": 24, "pages_per_goal": 10, "weak_per_goal": 20, "weak_nongoal": 10,
              "p_active_day": 0.5, "period_days": 10, "train_days": 7, "horizon_days": 3},
    "recon": {"dim": 4, "epochs": 5},
    "estimator": {"d_h": 4, "d_c": 8, "host_buckets": 64, "content_buckets": 256, "epochs": 2},
    "model": {"d_h": 4, "d_c": 8, "d_V": 8, "hidden": 8, "heads": 2, "host_buckets": 64, "content_buckets": 256},
    "rec_train": {"epochs": 1}, "rev_train": {"epochs": 1},
    "min_page_count": 3, "min_session_len": 4, "p_pop": 2,
}


def _chain(root, cfg):
    w = root / "w"
    common = ["--config", str(cfg), "--seed", "1"]
    steps = [
        ["synth", "--out", w],
        ["train-goals", "--taxonomy", w / "taxonomy.json", "--out", w / "goals.tsv"],
        ["eval-recon", "--taxonomy", w / "taxonomy.json", "--goals", w / "goals.tsv", "--out", w / "recon.json"],
        ["train-estimator", "--weak", w / "weak_labels.jsonl", "--goals", w / "goals.tsv", "--out", w / "est.json"],
        ["eval-estimator", "--weak", w / "weak_labels.jsonl", "--estimator", w / "est.json",
         "--taxonomy", w / "taxonomy.json", "--out", w / "est_eval.json"],
        ["train-rec", "--events", w / "events.jsonl", "--estimator", w / "est.json", "--out", w / "rec.json"],
        ["eval-rec", "--events", w / "events.jsonl", "--model", w / "rec.json", "--out", w / "rec_eval.json"],
        ["train-revisit", "--events", w / "events.jsonl", "--estimator", w / "est.json", "--mode", "np",
         "--out", w / "rev.json"],
        ["eval-revisit", "--events", w / "events.jsonl", "--model", w / "rev.json", "--split", "test_cold",
         "--empty-history", "--out", w / "rev_eval.json"],
        ["cluster", "--events", w / "events.jsonl", "--estimator", w / "est.json", "--sidecar", w / "sidecar.json",
         "--out", w / "clusters.json"],
        ["eval-cluster", "--events", w / "events.jsonl", "--estimator", w / "est.json",
         "--sidecar", w / "sidecar.json", "--out", w / "cluster_eval.json"],
        ["analyze", "--events", w / "events.jsonl", "--sidecar", w / "sidecar.json",
         "--taxonomy", w / "taxonomy.json", "--estimator", w / "est.json", "--out", w / "analysis.json"],
        ["gradcheck", "--out", w / "grad.json"],
    ]
    for step in steps:
        assert cli.main([str(x) for x in step] + common) == 0, step[0]
    return w


@pytest.fixture(scope="module")
def runs(tmp_path_factory):
    out = []
    for tag in ("a", "b"):
        root = tmp_path_factory.mktemp(tag)
        cfg = root / "tiny.json"
        cfg.write_text(json.dumps(TINY))
        out.append(_chain(root, cfg))
    return out


def test_every_command_writes_its_artifact(runs):
    w = runs[0]
    expected = {"taxonomy.json", "events.jsonl", "sidecar.json", "weak_labels.jsonl", "config.json",
                "goals.tsv", "goals.tsv.report.json", "recon.json", "est.json", "est_eval.json", "rec.json",
                "rec_eval.json", "rev.json", "rev_eval.json", "clusters.json", "cluster_eval.json",
                "analysis.json", "grad.json"}
    assert expected <= {p.name for p in w.iterdir()}


def test_reruns_are_byte_identical(runs):
    a, b = runs
    names = sorted(p.name for p in a.iterdir())
    assert names == sorted(p.name for p in b.iterdir())
    for name in names:
        assert (a / name).read_bytes() == (b / name).read_bytes(), name


def test_artifacts_embed_resolved_config(runs):
    w = runs[0]
    for name in ("recon.json", "rec_eval.json", "analysis.json", "cluster_eval.json"):
        cfg = json.loads((w / name).read_text())["config"]
        assert cfg["seed"] == 1 and cfg["model"]["d_V"] == 8
    _, config, extra = nncore.load_checkpoint(w / "rev.json")
    assert extra["run_config"]["model"]["mode"] == "np" and config["model"]["mode"] == "np"


def test_analysis_has_every_section(runs):
    report = json.loads((runs[0] / "analysis.json").read_text())
    assert {"matrix", "within_category_rate"} <= set(report["confusion"])
    assert report["revisit_durations"]["histogram"]
    assert report["single_goal_session_rate"]
    assert report["planted_affinity_order"]


def test_summary_line_is_single(tmp_path, capsys):
    assert cli.main(["gradcheck"]) == 0
    out = capsys.readouterr().out
    assert out.count("\n") == 1 and out.startswith("gradcheck: 8 paths passed")


def test_missing_checkpoint_exit_2(tmp_path, capsys):
    code = cli.main(["eval-rec", "--events", str(tmp_path / "e.jsonl"), "--model", str(tmp_path / "nope.json"),
                     "--out", str(tmp_path / "o.json")])
    assert code == 2
    assert "checkpoint not found" in capsys.readouterr().err


def test_missing_config_file_exit_2(tmp_path, capsys):
    assert cli.main(["gradcheck", "--config", str(tmp_path / "none.json")]) == 2
    assert "config file not found" in capsys.readouterr().err


def test_bad_config_exit_3(tmp_path, capsys):
    cfg = tmp_path / "bad.json"
    cfg.write_text(json.dumps({"model": {"no_such_key": 1}}))
    assert cli.main(["gradcheck", "--config", str(cfg)]) == 3
    assert "unknown key" in capsys.readouterr().err


def test_bad_taxonomy_exit_3(tmp_path):
    tax = tmp_path / "tax.json"
    tax.write_text(json.dumps({"nodes": [{"id": 0, "name": "a", "layer": 0}, {"id": 1, "name": "b", "layer": 0}],
                               "edges": []}))
    assert cli.main(["train-goals", "--taxonomy", str(tax), "--out", str(tmp_path / "g.tsv")]) == 3


def test_gradient_failure_exit_4(monkeypatch, capsys):
    from goweb import gradsuite

    def broken(seed=0, **kw):
        return {"linear": nncore.GradCheckReport(0.5, 1e-4, {"lin.W": 0.5})}
    monkeypatch.setattr(gradsuite, "run_grad_suite", broken)
    assert cli.main(["gradcheck"]) == 4
    assert "linear" in capsys.readouterr().err


def test_module_entry_point_runs():
    proc = subprocess.run([sys.executable, "-m", "goweb.cli", "--help"], capture_output=True, text=True)
    assert proc.returncode == 0 and "eval-cluster" in proc.stdout
