"""End-to-end tests for the command-line interface.

All subcommands run in-process through main() so exit codes and artifacts
can be checked without spawning subprocesses.
"""

import json

import pytest

from doordiff.cli import main
from doordiff.dataset import read_dataset, read_manifest
from doordiff.diffusion import DiffusionPlanner

TINY = {"horizon": 8, "diffusion_steps": 4, "channels": [8, 8], "heads": 2,
        "force_tokens": 2, "token_dim": 4, "force_hidden": 8,
        "film_hidden": 8, "time_embed_dim": 4}


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    """One shared gen-data -> train run; read-only for the tests below."""
    root = tmp_path_factory.mktemp("cli")
    data = root / "data"
    rc = main(["gen-data", "--count", "6", "--test-count", "3",
               "--horizon", "8", "--seed", "5", "--out", str(data)])
    assert rc == 0
    cfg = root / "tiny.json"
    cfg.write_text(json.dumps(TINY))
    model = root / "model"
    rc = main(["train", "--data", str(data), "--config", str(cfg),
               "--epochs", "1", "--seed", "2", "--out", str(model)])
    assert rc == 0
    return root, data, model


def test_gen_data_files_match_manifest(pipeline):
    _, data, _ = pipeline
    manifest = read_manifest(data / "manifest.json")
    assert manifest.counts["train"] == len(read_dataset(data / "train.jsonl"))
    assert manifest.counts["seen_test"] == len(read_dataset(data / "seen_test.jsonl"))
    assert manifest.counts["unseen_test"] == len(read_dataset(data / "unseen_test.jsonl"))
    assert manifest.horizon == 8
    assert manifest.normalization  # non-empty corpus has statistics
    pools = read_dataset(data / "seen_test.jsonl")
    assert all(d.termination == "none" and not d.steps for d in pools)


def test_gen_data_reruns_byte_identical(tmp_path):
    args = ["gen-data", "--count", "3", "--test-count", "2",
            "--horizon", "8", "--seed", "11"]
    assert main(args + ["--out", str(tmp_path / "a")]) == 0
    assert main(args + ["--out", str(tmp_path / "b")]) == 0
    for name in ("train.jsonl", "seen_test.jsonl", "unseen_test.jsonl",
                 "manifest.json"):
        assert (tmp_path / "a" / name).read_bytes() == \
               (tmp_path / "b" / name).read_bytes()


def test_gen_data_zero_count_then_train_fails_cleanly(tmp_path):
    data = tmp_path / "empty"
    assert main(["gen-data", "--count", "0", "--test-count", "2",
                 "--horizon", "8", "--seed", "1", "--out", str(data)]) == 0
    manifest = read_manifest(data / "manifest.json")
    assert manifest.counts["train"] == 0
    assert manifest.normalization == {}
    assert main(["train", "--data", str(data), "--epochs", "1",
                 "--out", str(tmp_path / "m")]) == 2


def test_train_artifacts(pipeline):
    _, _, model = pipeline
    planner = DiffusionPlanner.load(model / "model.ckpt")
    assert planner.config.horizon == 8
    curve = json.loads((model / "loss_curve.json").read_text())
    assert len(curve["losses"]) == 1
    meta = json.loads((model / "train_meta.json").read_text())
    assert meta["config"]["diffusion_steps"] == 4
    assert meta["seed"] == 2


def test_train_rejects_unknown_config_field(pipeline, tmp_path):
    _, data, _ = pipeline
    cfg = tmp_path / "bad.json"
    cfg.write_text(json.dumps({"bogus_field": 1}))
    assert main(["train", "--data", str(data), "--config", str(cfg),
                 "--epochs", "1", "--out", str(tmp_path / "m")]) == 1


def test_train_horizon_mismatch_is_a_data_error(pipeline, tmp_path):
    _, data, _ = pipeline
    cfg = tmp_path / "h16.json"
    cfg.write_text(json.dumps(dict(TINY, horizon=16)))
    assert main(["train", "--data", str(data), "--config", str(cfg),
                 "--epochs", "1", "--out", str(tmp_path / "m")]) == 2


def test_eval_oracle_writes_traces_and_report(pipeline):
    root, data, _ = pipeline
    out = root / "ev_oracle"
    rc = main(["eval", "--data", str(data), "--planner", "oracle",
               "--pool", "seen", "--seed", "3", "--out", str(out)])
    assert rc == 0
    assert len(list((out / "traces").glob("*.jsonl"))) == 3
    csv = (out / "report.csv").read_text()
    assert csv.splitlines()[0] == "# doordiff-report v1"
    assert "oracle,seen,3," in csv
    meta = json.loads((out / "eval_meta.json").read_text())
    assert meta["planner"] == "oracle" and meta["pool"] == "seen"


def test_eval_checkpoint_labels_and_vision_only(pipeline):
    root, data, model = pipeline
    out_vt = root / "ev_vt"
    rc = main(["eval", "--data", str(data), "--checkpoint", str(model / "model.ckpt"),
               "--pool", "seen", "--seed", "3", "--out", str(out_vt)])
    assert rc == 0
    assert "V+T,seen,3," in (out_vt / "report.csv").read_text()
    out_v = root / "ev_v"
    rc = main(["eval", "--data", str(data), "--checkpoint", str(model / "model.ckpt"),
               "--vision-only", "--pool", "seen", "--seed", "3", "--out", str(out_v)])
    assert rc == 0
    assert "V,seen,3," in (out_v / "report.csv").read_text()


def test_eval_requires_checkpoint_for_learned_planner(pipeline, tmp_path):
    _, data, _ = pipeline
    assert main(["eval", "--data", str(data), "--out", str(tmp_path / "x")]) == 1


def test_eval_missing_data_directory(tmp_path):
    rc = main(["eval", "--data", str(tmp_path / "nope"), "--planner", "oracle",
               "--out", str(tmp_path / "x")])
    assert rc == 2


def test_eval_bad_threshold_list(pipeline, tmp_path):
    _, data, _ = pipeline
    rc = main(["eval", "--data", str(data), "--planner", "oracle",
               "--thresholds", "5,ten", "--out", str(tmp_path / "x")])
    assert rc == 1


def test_rollout_writes_trace_and_svg(pipeline):
    root, data, _ = pipeline
    out = root / "ro"
    rc = main(["rollout", "--data", str(data), "--planner", "oracle",
               "--scene-index", "1", "--plot", "--seed", "4", "--out", str(out)])
    assert rc == 0
    assert (out / "trace.jsonl").exists()
    svg = (out / "trace.svg").read_text()
    assert svg.startswith("<svg ") and svg.rstrip().endswith("</svg>")
    meta = json.loads((out / "rollout_meta.json").read_text())
    assert meta["scene_index"] == 1


def test_rollout_scene_index_out_of_range(pipeline, tmp_path):
    _, data, _ = pipeline
    rc = main(["rollout", "--data", str(data), "--planner", "oracle",
               "--scene-index", "99", "--out", str(tmp_path / "x")])
    assert rc == 1


def test_report_merges_eval_directories(pipeline, tmp_path):
    root, _, _ = pipeline
    out = tmp_path / "merged"
    rc = main(["report", str(root / "ev_oracle"), str(root / "ev_vt"),
               "--out", str(out)])
    assert rc == 0
    csv = (out / "report.csv").read_text()
    assert "oracle,seen" in csv and "V+T,seen" in csv
    # merged rows are rebuilt from traces and match the originals
    original = (root / "ev_oracle" / "report.csv").read_text().splitlines()[-1]
    assert original in csv.splitlines()
    out2 = tmp_path / "merged2"
    assert main(["report", str(root / "ev_oracle"), str(root / "ev_vt"),
                 "--out", str(out2)]) == 0
    assert (out / "report.csv").read_bytes() == (out2 / "report.csv").read_bytes()


def test_report_without_directories_is_usage_error(tmp_path):
    assert main(["report", "--out", str(tmp_path / "x")]) == 1


def test_report_on_non_eval_directory(tmp_path):
    (tmp_path / "junk").mkdir()
    assert main(["report", str(tmp_path / "junk"), "--out", str(tmp_path / "x")]) == 2


def test_unknown_subcommand_is_usage_error():
    assert main(["frobnicate"]) == 1
