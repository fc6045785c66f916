import csv

import numpy as np
import pytest

from boltzformer.cli import main
from boltzformer.grid import read_pbm

from helpers import TINY_INI


@pytest.fixture
def ini(tmp_path):
    path = tmp_path / "tiny.ini"
    path.write_text(TINY_INI)
    return path


@pytest.fixture
def trained(ini, tmp_path):
    out = tmp_path / "run"
    assert main(["-q", "train", "--config", str(ini), "--out", str(out)]) == 0
    return out


def read_rows(path):
    with open(path, newline="") as fh:
        return list(csv.reader(fh))


def test_train_outputs(trained):
    assert (trained / "model.ckpt").stat().st_size > 0
    rows = read_rows(trained / "metrics.csv")
    assert rows[0] == ["epoch", "split", "loss_dice", "loss_bce", "dice_small", "dice_large", "dice_all",
                       "attended_pairs_mean"]
    assert [r[1] for r in rows[1:]] == ["train", "val"]
    raw = (trained / "metrics.csv").read_bytes()
    assert b"\r" not in raw and raw.endswith(b"\n")
    assert "[sampler]" in (trained / "resolved_config.ini").read_text()


def test_train_is_byte_identical(ini, trained, tmp_path):
    again = tmp_path / "again"
    assert main(["-q", "train", "--config", str(ini), "--out", str(again)]) == 0
    for name in ("metrics.csv", "model.ckpt", "resolved_config.ini"):
        assert (again / name).read_bytes() == (trained / name).read_bytes()


def test_missing_out_dir_is_created(ini, tmp_path):
    out = tmp_path / "a" / "b" / "c"
    assert main(["-q", "train", "--config", str(ini), "--out", str(out)]) == 0
    assert (out / "model.ckpt").exists()


def test_default_output_root_from_env(ini, tmp_path, monkeypatch):
    monkeypatch.setenv("BOLTZFORMER_OUT", str(tmp_path / "root"))
    assert main(["-q", "gen-data", "--config", str(ini), "--split", "val", "--limit", "3"]) == 0
    assert (tmp_path / "root" / "gen-data" / "val_index.csv").exists()


def test_eval_outputs(trained, tmp_path):
    out = tmp_path / "eval"
    assert main(["-q", "eval", "--checkpoint", str(trained / "model.ckpt"), "--out", str(out)]) == 0
    rows = read_rows(out / "eval.csv")
    assert [r[0] for r in rows[1:]] == ["small", "large", "all"]
    assert len(list((out / "masks").glob("*.pgm"))) == 8
    pbm = read_pbm(out / "masks" / "example_09000.pbm")
    assert pbm.shape == (32, 32)
    again = tmp_path / "eval2"
    assert main(["-q", "eval", "--checkpoint", str(trained / "model.ckpt"), "--out", str(again)]) == 0
    for name in ("eval.csv", "per_example.csv"):
        assert (again / name).read_bytes() == (out / name).read_bytes()


def test_viz_sampling(trained, tmp_path):
    out = tmp_path / "viz"
    assert main(["-q", "viz-sampling", "--checkpoint", str(trained / "model.ckpt"), "--index", "9003",
                 "--out", str(out)]) == 0
    assert len(list(out.glob("layer*_query0.pgm"))) == 3
    side = (out / "layer0_query0.pgm.txt").read_text()
    assert "sampled_indices = " in side and "temperature = 1.0" in side


def test_viz_untrained_and_bad_index(ini, tmp_path):
    out = tmp_path / "viz"
    assert main(["-q", "viz-sampling", "--config", str(ini), "--index", "5", "--out", str(out)]) == 0
    assert len(list(out.glob("layer*_query0.pgm"))) == 3
    assert main(["-q", "viz-sampling", "--config", str(ini), "--index", "-1", "--out", str(out)]) == 2
    assert main(["-q", "viz-sampling", "--config", str(ini), "--index", "10000", "--out", str(out)]) == 2


def test_bench_counts(ini, tmp_path):
    out = tmp_path / "bench"
    assert main(["-q", "bench", "--config", str(ini), "--n", "6", "--out", str(out)]) == 0
    summary = {r[0]: r for r in read_rows(out / "compute_summary.csv")[1:]}
    # 2 queries over 2x2, 4x4 and 8x8 levels
    full_per_forward = 2 * (4 + 16 + 64)
    assert int(summary["full"][2]) == 6 * full_per_forward
    assert int(summary["threshold"][2]) <= int(summary["full"][2])
    layers = read_rows(out / "compute_layers.csv")[1:]
    for r in layers:
        if r[0] == "boltzmann":
            assert float(r[5]) <= int(r[7])
    assert (out / "timing.txt").exists()
    again = tmp_path / "bench2"
    assert main(["-q", "bench", "--config", str(ini), "--n", "6", "--out", str(again)]) == 0
    for name in ("compute_summary.csv", "compute_layers.csv"):
        assert (again / name).read_bytes() == (out / name).read_bytes()


def test_bench_unknown_policy(ini, tmp_path):
    assert main(["-q", "bench", "--config", str(ini), "--policies", "full,dense", "--out", str(tmp_path)]) == 2


def test_ablate_tau0(ini, tmp_path):
    out = tmp_path / "abl"
    assert main(["-q", "ablate", "--config", str(ini), "--axis", "tau0", "--out", str(out)]) == 0
    rows = read_rows(out / "summary_tau0.csv")
    assert rows[0][:5] == ["axis", "value", "dice_small", "dice_large", "dice_all"]
    assert [r[1] for r in rows[1:]] == ["0.25", "0.5", "1", "2"]


def test_ablate_m_subset(ini, tmp_path):
    out = tmp_path / "abl"
    assert main(["-q", "ablate", "--config", str(ini), "--axis", "m", "--values", "1,10", "--out", str(out)]) == 0
    rows = read_rows(out / "summary_m.csv")
    assert [r[1] for r in rows[1:]] == ["1", "10"]
    assert all(r[2] != "" and r[3] != "" for r in rows[1:])


def test_ablate_unknown_axis(ini, tmp_path):
    assert main(["-q", "ablate", "--config", str(ini), "--axis", "depth", "--out", str(tmp_path)]) == 2


def test_gen_data(ini, tmp_path):
    out = tmp_path / "data"
    assert main(["-q", "gen-data", "--config", str(ini), "--split", "test", "--limit", "4", "--out", str(out)]) == 0
    assert len(list((out / "test").glob("*.pgm"))) == 4
    rows = read_rows(out / "test_index.csv")
    assert [r[0] for r in rows[1:]] == ["9000", "9001", "9002", "9003"]


def test_exit_codes(ini, tmp_path):
    bad = tmp_path / "bad.ini"
    bad.write_text("[train]\nlearning_rate = 1\n")
    assert main(["-q", "train", "--config", str(bad), "--out", str(tmp_path / "x")]) == 2
    assert main(["-q", "train", "--config", str(tmp_path / "missing.ini"), "--out", str(tmp_path / "x")]) == 4
    code = main(["-q", "train", "--config", str(ini), "--set", "train.lr=1e300", "--set", "train.max_epochs=3",
                 "--out", str(tmp_path / "nan")])
    assert code == 3
    assert "epoch = " in (tmp_path / "nan" / "numerical_failure.txt").read_text()


def test_set_overrides_file(ini, tmp_path):
    out = tmp_path / "o"
    assert main(["-q", "gen-data", "--config", str(ini), "--set", "data.noise=0", "--limit", "1",
                 "--out", str(out)]) == 0
    assert "noise = 0.0" in (out / "resolved_config.ini").read_text()
    img = np.frombuffer((out / "train" / "example_00000.pgm").read_bytes()[-256:], dtype=np.uint8)
    assert len(np.unique(img)) <= 5
