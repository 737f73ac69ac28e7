import json

import numpy as np
import pytest

from strippool.cli import main, read_manifest
from strippool.config import RunConfig
from strippool.io import load_checkpoint, read_pgm

SMALL = {"size": 32, "noise": 0.05, "blob_size": [5, 7], "band_width": [4, 8]}


def write_config(tmp_path, name="cfg.json", **overrides):
    cfg = {"model": "1mpm", "train": {"max_iter": 20, "batch_size": 2, "crop_size": 32, "base_lr": 0.05},
           "scene": SMALL, "train_size": 8, "test_size": 4}
    cfg.update(overrides)
    path = tmp_path / name
    path.write_text(json.dumps(cfg))
    return path


def loss_rows(run):
    lines = (run / "loss.csv").read_text().splitlines()
    assert lines[0] == "iter,lr,main_loss,aux_loss"
    return [[float(v) for v in line.split(",")] for line in lines[1:]]


# ---------------------------------------------------------------- train


def test_missing_model_field_is_config_error(tmp_path, capsys):
    path = tmp_path / "cfg.json"
    path.write_text(json.dumps({"train": {}}))
    assert main(["train", str(path), "--out", str(tmp_path / "run")]) == 2
    assert "'model'" in capsys.readouterr().err


def test_unknown_field_and_bad_json_are_config_errors(tmp_path):
    assert main(["train", str(write_config(tmp_path, epochs=3)), "--out", str(tmp_path / "a")]) == 2
    bad = tmp_path / "bad.json"
    bad.write_text("{not json")
    assert main(["train", str(bad), "--out", str(tmp_path / "b")]) == 2


def test_missing_config_file_is_io_error(tmp_path):
    assert main(["train", str(tmp_path / "nope.json"), "--out", str(tmp_path / "run")]) == 3


def test_smoke_training_writes_run_and_lowers_loss(tmp_path):
    run = tmp_path / "run"
    cfg = write_config(tmp_path, train={"max_iter": 200, "batch_size": 2, "crop_size": 32, "base_lr": 0.05})
    assert main(["train", str(cfg), "--out", str(run)]) == 0
    rows = loss_rows(run)
    assert len(rows) == 200 and [r[0] for r in rows] == list(range(200))
    assert np.mean([r[2] for r in rows[-20:]]) < 0.5 * np.mean([r[2] for r in rows[:20]])
    events = read_manifest(run)
    assert [e["event"] for e in events] == ["start", "end"]
    assert events[1]["status"] == "ok"
    assert set(events[1]["outputs"]) == {"loss.csv", "config.json", "checkpoint.spt", "checkpoint.json"}
    assert events[0]["seed"] == 0 and events[0]["config"]["model"] == "1mpm"
    assert "head.predict.weight" in load_checkpoint(run)


def test_run_directory_is_never_reused(tmp_path):
    cfg = write_config(tmp_path)
    assert main(["train", str(cfg), "--out", str(tmp_path / "run")]) == 0
    before = (tmp_path / "run" / "manifest.jsonl").read_text()
    assert main(["train", str(cfg), "--out", str(tmp_path / "run")]) == 3
    assert (tmp_path / "run" / "manifest.jsonl").read_text() == before


def test_seed_environment_override(tmp_path, monkeypatch):
    cfg = write_config(tmp_path)
    assert main(["train", str(cfg), "--out", str(tmp_path / "a")]) == 0
    monkeypatch.setenv("SPNET_SEED", "5")
    assert main(["train", str(cfg), "--out", str(tmp_path / "b")]) == 0
    assert read_manifest(tmp_path / "b")[0]["seed"] == 5
    assert loss_rows(tmp_path / "a") != loss_rows(tmp_path / "b")


@pytest.mark.filterwarnings("ignore::RuntimeWarning")  # overflow on the way to the non-finite loss
def test_diverging_run_is_marked_failed(tmp_path):
    run = tmp_path / "run"
    cfg = write_config(tmp_path, train={"max_iter": 50, "batch_size": 2, "crop_size": 32, "base_lr": 1e6})
    assert main(["train", str(cfg), "--out", str(run)]) == 4
    events = read_manifest(run)
    assert events[-1]["event"] == "end" and events[-1]["status"] == "failed"
    assert not (run / "checkpoint.spt").exists()


def test_saved_config_is_a_fixed_point(tmp_path):
    run = tmp_path / "run"
    assert main(["train", str(write_config(tmp_path)), "--out", str(run)]) == 0
    text = (run / "config.json").read_text().strip()
    assert RunConfig.from_json(text).to_json() == text


# ---------------------------------------------------------------- eval


@pytest.fixture(scope="module")
def overfit_run(tmp_path_factory):
    root = tmp_path_factory.mktemp("overfit")
    cfg = write_config(root, model="2mpm+spm", train_size=1, test_size=1, scene={"size": 64},
                       train={"max_iter": 200, "batch_size": 1, "crop_size": 64, "base_lr": 0.05,
                              "flip_prob": 0.0})
    assert main(["train", str(cfg), "--out", str(root / "run")]) == 0
    return root / "run"


def test_eval_after_overfitting(overfit_run, tmp_path):
    out = tmp_path / "ev"
    assert main(["eval", str(overfit_run), "--split", "train", "--out", str(out)]) == 0
    metrics = json.loads((out / "metrics.json").read_text())
    assert metrics["pixel_acc"] >= 0.99
    assert set(metrics) >= {"confusion", "per_class_iou", "miou", "pixel_acc", "config", "seed"}
    assert read_pgm(out / "pred_0000.pgm").shape == (64, 64)
    assert read_manifest(out)[-1]["status"] == "ok"


def test_unit_scale_eval_matches_default_byte_for_byte(overfit_run, tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    assert main(["eval", str(overfit_run), "--out", str(a)]) == 0
    assert main(["eval", str(overfit_run), "--scales", "1.0", "--out", str(b)]) == 0
    for name in ("metrics.json", "pred_0000.pgm"):
        assert (a / name).read_bytes() == (b / name).read_bytes()


def test_full_protocol_eval_runs(overfit_run, tmp_path):
    out = tmp_path / "ms"
    assert main(["eval", str(overfit_run), "--multi-scale", "--flip", "--out", str(out)]) == 0
    assert np.isfinite(json.loads((out / "metrics.json").read_text())["miou"])


def test_corrupt_checkpoint_is_io_error(overfit_run, tmp_path, capsys):
    import shutil

    run = tmp_path / "run"
    shutil.copytree(overfit_run, run)
    blob = (run / "checkpoint.spt").read_bytes()
    (run / "checkpoint.spt").write_bytes(b"JUNK" + blob[4:])
    assert main(["eval", str(run), "--out", str(tmp_path / "ev")]) == 3
    assert "magic" in capsys.readouterr().err


def test_checkpoint_for_other_model_names_the_tensor(overfit_run, tmp_path, capsys):
    other = write_config(tmp_path, model="base-fcn")
    assert main(["eval", str(overfit_run), "--config", str(other), "--out", str(tmp_path / "ev")]) == 2
    assert "head." in capsys.readouterr().err


def test_bad_scales_rejected(overfit_run, tmp_path):
    assert main(["eval", str(overfit_run), "--scales", "1.0,x", "--out", str(tmp_path / "ev")]) == 2


# ---------------------------------------------------------------- gradcheck, params, bench, gen-data


def test_gradcheck_single_op(capsys):
    assert main(["gradcheck", "--op", "strip_pool_h"]) == 0
    assert "strip_pool_h" in capsys.readouterr().out


def test_gradcheck_broken_adjoint_fails():
    assert main(["gradcheck", "--op", "conv2d", "--trials", "3", "--break-adjoint"]) == 4


def test_gradcheck_unknown_op():
    assert main(["gradcheck", "--op", "softmax9"]) == 2
    assert main(["gradcheck"]) == 2


def test_params_full_two_mpm(capsys):
    assert main(["params", "--preset", "2mpm"]) == 0
    out = capsys.readouterr().out
    line = next(x for x in out.splitlines() if x.startswith("delta vs base-fcn"))
    assert abs(float(line.split()[-1].rstrip("M")) - 8.8) <= 0.05 * 8.8


def test_params_base_delta_zero_and_reproducible(capsys):
    assert main(["params", "--preset", "base-fcn"]) == 0
    first = capsys.readouterr().out
    assert "delta vs base-fcn: +0.00M" in first
    assert main(["params", "--preset", "base-fcn"]) == 0
    assert capsys.readouterr().out == first


def test_params_from_spec_file(tmp_path, capsys):
    from strippool.network import preset_spec

    path = tmp_path / "spec.json"
    path.write_text(preset_spec("1mpm").to_json())
    assert main(["params", "--spec", str(path), "--scale", "toy"]) == 0
    assert "total" in capsys.readouterr().out
    path.write_text('{"backbone": {"blocks": [1]}}')
    assert main(["params", "--spec", str(path)]) == 2
    path.write_text("{oops")
    assert main(["params", "--spec", str(path)]) == 2


def test_bench_strip_pool_row_counts(tmp_path, capsys):
    out = tmp_path / "b.csv"
    assert main(["bench", "--op", "strip_pool_h", "--shape", "1,4,8,6", "--out", str(out)]) == 0
    header, row = out.read_text().splitlines()[:2]
    rec = dict(zip(header.split(","), row.split(",")))
    assert int(rec["flops"]) == 4 * 8 * 6 + 4 * 8
    assert int(rec["memory_entries"]) == 4 * 8


def test_bench_affinity_memory_is_quadratic(capsys):
    assert main(["bench", "--op", "affinity", "--shape", "1,16,64,64", "--reps", "10"]) == 0
    header, row = capsys.readouterr().out.splitlines()[:2]
    rec = dict(zip(header.split(","), row.split(",")))
    assert int(rec["memory_entries"]) == (64 * 64) ** 2


def test_bench_strip_module_scales_linearly(capsys):
    assert main(["bench", "--op", "spm_forward", "--shape", "1,32,64,64", "--sweep", "4", "--reps", "10"]) == 0
    line = capsys.readouterr().out.strip().splitlines()[-1]
    exponent = float(line.rsplit("^", 1)[1])
    assert 0.8 <= exponent <= 1.3


def test_bench_rejects_few_reps():
    assert main(["bench", "--op", "strip_pool_h", "--reps", "5"]) == 2


def test_gen_data_writes_readable_samples(tmp_path):
    from strippool.io import read_spt

    scene = tmp_path / "scene.json"
    scene.write_text(json.dumps(SMALL))
    out = tmp_path / "data"
    assert main(["gen-data", "--scene", str(scene), "--count", "3", "--seed", "2", "--out", str(out)]) == 0
    assert read_spt(out / "image_0002.spt").shape == (3, 32, 32)
    assert read_pgm(out / "labels_0002.pgm").max() < 6
    assert len(read_manifest(out)[-1]["outputs"]) == 6
