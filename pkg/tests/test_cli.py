"""End-to-end checks of the command-line driver: exit codes, output files,
determinism across reruns and worker counts, and setting precedence."""

import json
import os
import pathlib

import numpy as np
import pytest

from modiff.cli import main
from modiff.diffusion import load_denoiser, make_denoiser
from modiff.rng import RngState

FAST_TRAIN = [
    "--epochs", "2", "--batch", "16", "--hidden", "8,8",
    "--time-embed", "4", "--timesteps", "10",
]


def _bundle_bytes(path):
    root = pathlib.Path(path)
    return {p.name: p.read_bytes() for p in sorted(root.iterdir())}


@pytest.fixture(scope="module")
def bundle(tmp_path_factory):
    out = tmp_path_factory.mktemp("cli") / "bundle"
    rc = main(["train", *FAST_TRAIN, "--seed", "3", "--out", str(out)])
    assert rc == 0
    return out


# --- train --------------------------------------------------------------


def test_train_writes_bundle_and_prints_loss(bundle, capsys):
    assert (bundle / "manifest.json").exists()
    rc = main(["train", *FAST_TRAIN, "--seed", "3", "--out", str(bundle)])
    assert rc == 0
    out = capsys.readouterr().out
    assert "final loss" in out


def test_train_same_seed_same_bytes(tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    assert main(["train", *FAST_TRAIN, "--seed", "7", "--out", str(a)]) == 0
    assert main(["train", *FAST_TRAIN, "--seed", "7", "--out", str(b)]) == 0
    assert _bundle_bytes(a) == _bundle_bytes(b)


def test_train_zero_epochs_is_seeded_init(tmp_path):
    out = tmp_path / "init"
    rc = main(["train", "--epochs", "0", "--hidden", "8,8", "--time-embed", "4",
               "--seed", "11", "--out", str(out)])
    assert rc == 0
    net = load_denoiser(out)
    ref = make_denoiser(RngState(11).fork(1), hidden=(8, 8), time_embed=4)
    for got, want in zip(net.layers, ref.layers):
        assert np.array_equal(got.weight, want.weight)
        assert np.array_equal(got.bias, want.bias)


def test_train_divergence_exits_one_with_epoch(tmp_path, capsys):
    with np.errstate(over="ignore", invalid="ignore"):
        rc = main(["train", *FAST_TRAIN, "--lr", "1e12", "--seed", "0",
                   "--out", str(tmp_path / "div")])
    assert rc == 1
    assert "epoch" in capsys.readouterr().err


# --- seed precedence ----------------------------------------------------


def test_env_seed_matches_explicit_flag(tmp_path, monkeypatch):
    flag = tmp_path / "flag"
    env = tmp_path / "env"
    assert main(["train", "--epochs", "0", "--seed", "21", "--out", str(flag)]) == 0
    monkeypatch.setenv("MODIFF_SEED", "21")
    assert main(["train", "--epochs", "0", "--out", str(env)]) == 0
    assert _bundle_bytes(flag) == _bundle_bytes(env)


def test_explicit_flag_beats_env_seed(tmp_path, monkeypatch):
    monkeypatch.setenv("MODIFF_SEED", "99")
    a = tmp_path / "a"
    b = tmp_path / "b"
    assert main(["train", "--epochs", "0", "--seed", "21", "--out", str(a)]) == 0
    monkeypatch.delenv("MODIFF_SEED")
    assert main(["train", "--epochs", "0", "--seed", "21", "--out", str(b)]) == 0
    assert _bundle_bytes(a) == _bundle_bytes(b)


def test_bad_env_seed_is_config_error(tmp_path, monkeypatch):
    monkeypatch.setenv("MODIFF_SEED", "not-a-number")
    rc = main(["train", "--epochs", "0", "--out", str(tmp_path / "x")])
    assert rc == 2


def test_config_file_supplies_settings_and_flags_win(tmp_path):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({
        "epochs": 2, "batch": 16, "hidden": [8, 8], "time_embed": 4,
        "timesteps": 10, "seed": 7,
    }))
    from_cfg = tmp_path / "from_cfg"
    assert main(["train", "--config", str(cfg), "--out", str(from_cfg)]) == 0
    plain = tmp_path / "plain"
    assert main(["train", *FAST_TRAIN, "--seed", "7", "--out", str(plain)]) == 0
    assert _bundle_bytes(from_cfg) == _bundle_bytes(plain)

    overridden = tmp_path / "overridden"
    assert main(["train", "--config", str(cfg), "--epochs", "0",
                 "--out", str(overridden)]) == 0
    assert _bundle_bytes(overridden) != _bundle_bytes(plain)


def test_malformed_config_exits_two(tmp_path):
    cfg = tmp_path / "broken.json"
    cfg.write_text("{not json")
    assert main(["train", "--config", str(cfg), "--out", str(tmp_path / "x")]) == 2


# --- sweep --------------------------------------------------------------

SWEEP_ARGS = ["--seeds", "0,1", "--modes", "fp,direct,ec", "--bits", "4,8",
              "--timesteps", "8", "--n", "4"]


def test_sweep_row_count_is_exact(bundle, tmp_path):
    out = tmp_path / "sweep.csv"
    rc = main(["sweep", "--bundle", str(bundle), *SWEEP_ARGS, "--out", str(out)])
    assert rc == 0
    lines = out.read_text().splitlines()
    # header + seeds * modes * bits * steps * layers
    assert len(lines) == 1 + 2 * 3 * 2 * 8 * 3


def test_sweep_fp_rows_have_zero_drift_and_32_bits(bundle, tmp_path):
    out = tmp_path / "sweep.csv"
    main(["sweep", "--bundle", str(bundle), *SWEEP_ARGS, "--out", str(out)])
    rows = [ln.split(",") for ln in out.read_text().splitlines()[1:]]
    fp_rows = [r for r in rows if r[1] == "fp"]
    assert len(fp_rows) == 2 * 2 * 8 * 3  # fp repeated once per bits entry
    assert all(float(r[6]) == 0.0 and r[3] == "32" for r in fp_rows)
    assert any(float(r[6]) > 0.0 for r in rows if r[1] == "direct")


def test_sweep_rerun_and_jobs_are_byte_identical(bundle, tmp_path):
    serial1 = tmp_path / "s1.csv"
    serial2 = tmp_path / "s2.csv"
    parallel = tmp_path / "p.csv"
    base = ["sweep", "--bundle", str(bundle), *SWEEP_ARGS]
    assert main([*base, "--out", str(serial1)]) == 0
    assert main([*base, "--out", str(serial2)]) == 0
    assert main([*base, "--out", str(parallel), "--jobs", "2"]) == 0
    assert serial1.read_bytes() == serial2.read_bytes()
    assert serial1.read_bytes() == parallel.read_bytes()


def test_sweep_missing_bundle_exits_two(tmp_path, capsys):
    rc = main(["sweep", "--bundle", str(tmp_path / "nope"),
               "--out", str(tmp_path / "o.csv")])
    assert rc == 2
    assert "error" in capsys.readouterr().err


def test_sweep_unknown_mode_exits_two(bundle, tmp_path):
    rc = main(["sweep", "--bundle", str(bundle), "--modes", "fp,warp",
               "--out", str(tmp_path / "o.csv")])
    assert rc == 2


# --- verify -------------------------------------------------------------


def test_verify_passes_and_prints_one_line_per_suite(capsys):
    rc = main(["verify", "--trials", "200"])
    assert rc == 0
    out = capsys.readouterr().out
    lines = [ln for ln in out.splitlines() if ln.startswith("[")]
    assert len(lines) == 10
    assert all(ln.startswith("[PASS]") for ln in lines)


def test_verify_broken_quantizer_exits_one(capsys):
    rc = main(["verify", "--trials", "150", "--inject-broken-quantizer"])
    assert rc == 1
    captured = capsys.readouterr()
    assert "[FAIL]" in captured.out
    assert "counterexample seed" in captured.out


# --- stats --------------------------------------------------------------


def test_stats_csv_shape_and_summary(bundle, tmp_path, capsys):
    out = tmp_path / "stats.csv"
    rc = main(["stats", "--bundle", str(bundle), "--timesteps", "8",
               "--n", "4", "--out", str(out)])
    assert rc == 0
    lines = out.read_text().splitlines()
    assert lines[0].startswith("step,layer,act_min")
    assert len(lines) == 1 + 8 * 3
    printed = capsys.readouterr().out
    assert "ratio" in printed
    # first recorded step has no predecessor, so difference cells are empty
    first = lines[1].split(",")
    assert first[7] == ""


# --- bops ---------------------------------------------------------------


def test_bops_table_lists_requested_widths(capsys):
    rc = main(["bops", "--dims", "18,64,64,2", "--bits", "8,4,3", "--batch", "16"])
    assert rc == 0
    out = capsys.readouterr().out
    assert "fp32" in out
    assert "0.2500" in out  # 8-bit row is a quarter of the fp cost
    assert "0.1250" in out
    rows = [ln for ln in out.splitlines() if ln.strip() and ln.lstrip()[0].isdigit()]
    assert len(rows) == 4  # fp + three requested widths


def test_bops_from_bundle_matches_dims(bundle, capsys):
    assert main(["bops", "--bundle", str(bundle), "--bits", "4", "--batch", "2"]) == 0
    from_bundle = capsys.readouterr().out
    assert main(["bops", "--dims", "6,8,8,2", "--bits", "4", "--batch", "2"]) == 0
    assert capsys.readouterr().out == from_bundle
