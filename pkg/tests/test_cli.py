import hashlib
import json
from pathlib import Path

import numpy as np
import pytest

from dualprint.cli import main
from dualprint.matching import Template, write_template

from conftest import make_minutia

SYNTH_ARGS = ["--n-fingers", "4", "--n-impressions", "2",
              "--test-fraction", "0.5", "--image-size", "160",
              "--n-minutiae", "3", "--seed", "11"]


def tree_digest(root):
    digest = hashlib.sha256()
    for path in sorted(Path(root).rglob("*")):
        if path.is_file():
            digest.update(path.relative_to(root).as_posix().encode())
            digest.update(path.read_bytes())
    return digest.hexdigest()


@pytest.fixture(scope="module")
def dataset_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("cli_ds") / "data"
    assert main(["synth", *SYNTH_ARGS, "--out", str(out)]) == 0
    return out


@pytest.fixture(scope="module")
def run_dir(dataset_dir, tmp_path_factory):
    out = tmp_path_factory.mktemp("cli_run") / "run"
    code = main(["train", "--manifest", str(dataset_dir),
                 "--out", str(out), "--max-epochs", "1", "--batch-size", "16"])
    assert code == 0
    return out


# ---------------------------------------------------------------------------
# Dataset generation.


def test_synth_writes_expected_files(dataset_dir):
    records = json.loads((dataset_dir / "manifest.json").read_text())
    # 4 fingers x 2 impressions x (live + spoof)
    assert len(records) == 16
    pngs = list(dataset_dir.rglob("*.png"))
    assert len(pngs) == 16
    assert {r["split"] for r in records} == {"train", "val", "test"}


def test_synth_refuses_to_overwrite(dataset_dir, capsys):
    assert main(["synth", *SYNTH_ARGS, "--out", str(dataset_dir)]) == 2
    assert "--force" in capsys.readouterr().err


def test_synth_is_reproducible(dataset_dir, tmp_path):
    twin = tmp_path / "twin"
    assert main(["synth", *SYNTH_ARGS, "--out", str(twin)]) == 0
    assert tree_digest(twin) == tree_digest(dataset_dir)


def test_patches_dumps_pngs(dataset_dir, tmp_path):
    records = json.loads((dataset_dir / "manifest.json").read_text())
    record = records[0]
    out = tmp_path / "patches"
    code = main(["patches",
                 "--image", str(dataset_dir / record["image"]),
                 "--minutiae", str(dataset_dir / record["minutiae"]),
                 "--out", str(out), "--out-size", "96"])
    assert code == 0
    assert len(list(out.glob("patch_*.png"))) == 3


# ---------------------------------------------------------------------------
# Training and evaluation.


def test_train_writes_run_artifacts(run_dir):
    assert (run_dir / "model.dpn").is_file()
    assert (run_dir / "run_config.json").is_file()
    history = (run_dir / "history.csv").read_text().splitlines()
    assert history[0] == ("epoch,lr,train_lsd,train_lm,train_total,"
                          "val_lsd,val_lm,val_total")
    assert len(history) == 2  # one epoch


def test_train_respects_flag_overrides(run_dir):
    cfg = json.loads((run_dir / "run_config.json").read_text())
    assert cfg["train"]["max_epochs"] == 1
    assert cfg["train"]["batch_size"] == 16
    assert cfg["variant"] == "tiny"


def test_eval_spoof_writes_report(dataset_dir, run_dir, tmp_path, capsys):
    out = tmp_path / "pad"
    code = main(["eval-spoof", "--manifest", str(dataset_dir),
                 "--model-dir", str(run_dir), "--out", str(out),
                 "--histogram-bins", "4"])
    assert code == 0
    report = json.loads((out / "pad_report.json").read_text())
    assert report["acer"] == (report["apcer"] + report["bpcer"]) / 2.0
    assert report["counts"] == {"live": 4, "spoof": 4}
    assert (out / "pad_histogram.csv").is_file()
    assert "ACER" in capsys.readouterr().out


def test_eval_match_writes_report(dataset_dir, run_dir, tmp_path, capsys):
    out = tmp_path / "match"
    code = main(["eval-match", "--manifest", str(dataset_dir),
                 "--model-dir", str(run_dir), "--out", str(out),
                 "--far-targets", "1.0"])
    assert code == 0
    report = json.loads((out / "match_report.json").read_text())
    assert report["counts"]["genuine_pairs"] == 2
    assert report["counts"]["imposter_pairs"] == 1
    assert "FRR@FAR" in capsys.readouterr().out


def test_eval_spoof_needs_spoof_samples(run_dir, tmp_path, capsys):
    liveonly = tmp_path / "liveonly"
    assert main(["synth", "--n-fingers", "2", "--n-impressions", "2",
                 "--spoof-ratio", "0", "--image-size", "160",
                 "--n-minutiae", "3", "--test-fraction", "0.5",
                 "--out", str(liveonly)]) == 0
    code = main(["eval-spoof", "--manifest", str(liveonly),
                 "--model-dir", str(run_dir), "--out", str(tmp_path / "pad")])
    assert code == 3
    assert "data error" in capsys.readouterr().err


# ---------------------------------------------------------------------------
# Experiment grids.


def test_sweep_split_tabulates_rows(dataset_dir, tmp_path, capsys):
    out = tmp_path / "sweep"
    code = main(["sweep-split", "--manifest", str(dataset_dir),
                 "--splits", "0", "1", "--max-epochs", "1",
                 "--batch-size", "16", "--out", str(out)])
    assert code == 0
    rows = json.loads((out / "split_sweep.json").read_text())
    assert [row["split_point"] for row in rows] == [0, 1]
    assert rows[0]["params_total"] != rows[1]["params_total"]
    printed = capsys.readouterr().out
    assert "split" in printed and "params" in printed


def test_suppress_runs_the_flag_grid(dataset_dir, tmp_path, capsys):
    out = tmp_path / "grid"
    code = main(["suppress", "--manifest", str(dataset_dir),
                 "--max-epochs", "1", "--batch-size", "16",
                 "--out", str(out)])
    assert code == 0
    rows = json.loads((out / "suppression.json").read_text())
    assert [(row["s_sd"], row["s_m"]) for row in rows] == \
        [(1, 1), (-1, 1), (1, -1)]
    assert all("ace_pct" in row and "frr_pct" in row for row in rows)
    assert capsys.readouterr().out.count("\n") >= 4


# ---------------------------------------------------------------------------
# Benchmarks.


def test_bench_writes_report(tmp_path, capsys):
    out = tmp_path / "bench"
    code = main(["bench", "--images", "1", "--minutiae", "2", "--reps", "1",
                 "--out", str(out)])
    assert code == 0
    report = json.loads((out / "bench.json").read_text())
    assert set(report["modes"]) == {"joint", "series", "parallel"}
    assert "speedup" in capsys.readouterr().out


def test_bench_spec_aliases(tmp_path):
    out = tmp_path / "bench2"
    code = main(["bench", "--images", "1", "--minutiae", "2", "--reps", "1",
                 "--spec", "tiny", "--split", "1", "--out", str(out)])
    assert code == 0
    cfg = json.loads((out / "run_config.json").read_text())
    assert cfg["variant"] == "tiny" and cfg["split_point"] == 1


def test_bench_kernels_cli(tmp_path, capsys):
    out = tmp_path / "kern"
    code = main(["bench-kernels", "--n-patches", "2", "--repetitions", "1",
                 "--out", str(out)])
    assert code == 0
    report = json.loads((out / "kernels.json").read_text())
    assert "numpy" in report["backends"]
    assert "speedup" in capsys.readouterr().out


# ---------------------------------------------------------------------------
# One-off commands.


def test_match_compares_template_files(tmp_path, rng, capsys):
    desc = rng.standard_normal((4, 64)).astype(np.float32)
    desc /= np.linalg.norm(desc, axis=1, keepdims=True)
    minutiae = [make_minutia(60 + 30 * k, 80, theta=0.2 * k) for k in range(4)]
    template = Template(minutiae, desc)
    a = tmp_path / "a.dpt"
    b = tmp_path / "b.dpt"
    write_template(template, a)
    write_template(template, b)
    assert main(["match", "--template-a", str(a), "--template-b", str(b)]) == 0
    out = capsys.readouterr().out
    assert "score 0.5000" in out  # 4 of kappa=8 perfect correspondences


def test_export_embeddings_cli(dataset_dir, run_dir, tmp_path, capsys):
    out = tmp_path / "emb"
    code = main(["export-embeddings", "--manifest", str(dataset_dir),
                 "--model-dir", str(run_dir), "--split", "test",
                 "--out", str(out)])
    assert code == 0
    rows = (out / "embeddings.csv").read_text().strip().splitlines()
    assert len(rows) == 1 + 8 * 3  # header + 8 test images x 3 minutiae
    assert "wrote 24 descriptor rows" in capsys.readouterr().out


def test_info_lists_split_table(capsys):
    assert main(["info", "--variant", "tiny"]) == 0
    out = capsys.readouterr().out
    assert "variant tiny" in out
    assert out.count("split ") >= 4


# ---------------------------------------------------------------------------
# Configuration plumbing.


def test_config_file_with_flag_override(dataset_dir, tmp_path):
    cfg_file = tmp_path / "cfg.json"
    cfg_file.write_text(json.dumps({
        "variant": "tiny",
        "weights": {"w_sd": 2.0, "w_m": 5.0},
        "train": {"max_epochs": 1, "batch_size": 16},
    }))
    out = tmp_path / "run"
    code = main(["train", "--manifest", str(dataset_dir),
                 "--config", str(cfg_file), "--w-m", "7.5",
                 "--out", str(out)])
    assert code == 0
    resolved = json.loads((out / "run_config.json").read_text())
    assert resolved["weights"]["w_sd"] == 2.0
    assert resolved["weights"]["w_m"] == 7.5  # flag wins over file


def test_unknown_config_key_fails_cleanly(dataset_dir, tmp_path, capsys):
    cfg_file = tmp_path / "bad.json"
    cfg_file.write_text(json.dumps({"optimizer": "sgd"}))
    code = main(["train", "--manifest", str(dataset_dir),
                 "--config", str(cfg_file), "--out", str(tmp_path / "x")])
    assert code == 2
    assert "config error" in capsys.readouterr().err


def test_missing_config_file(dataset_dir, tmp_path, capsys):
    code = main(["train", "--manifest", str(dataset_dir),
                 "--config", str(tmp_path / "absent.json"),
                 "--out", str(tmp_path / "y")])
    assert code == 2
    assert "not found" in capsys.readouterr().err


def test_missing_manifest_is_a_data_error(tmp_path, capsys):
    code = main(["train", "--manifest", str(tmp_path / "nowhere"),
                 "--out", str(tmp_path / "z"), "--max-epochs", "1"])
    assert code in (2, 3)
    assert capsys.readouterr().err
