import re
import subprocess
import sys

import numpy as np
import pytest

from growthcast.cli import main
from growthcast.config import ConfigError, RunConfig, dump_config, load_config, parse_config_text
from growthcast.data import load_mask, load_raster, save_mask

FAST = """\
# desk-scale settings
seg_components = 2
seg_features = 32
seg_labels = 32
min_area = 16
tile_size = 64
layers = 2
filters = 4
batch_size = 2
epochs = 3
"""

ERROR_LINE = re.compile(r"^[A-Za-z]+Error: [^\n]+\n$")


@pytest.fixture
def fast_cfg(tmp_path):
    p = tmp_path / "fast.cfg"
    p.write_text(FAST)
    return str(p)


def run(argv, capsys):
    code = main([str(a) for a in argv])
    out = capsys.readouterr()
    return code, out.out, out.err


# ---------------------------------------------------------------- config

def test_defaults_and_precedence(tmp_path):
    assert load_config().seed == 42
    p = tmp_path / "c.cfg"
    p.write_text("seed = 7\nthreshold = 0.3\n")
    cfg = load_config(p)
    assert (cfg.seed, cfg.threshold) == (7, 0.3)
    cfg = load_config(p, {"seed": 9, "threshold": None})
    assert (cfg.seed, cfg.threshold) == (9, 0.3)


def test_config_parsing_rules():
    v = parse_config_text("# comment\n\ntile-size = 64  # trailing\nreference = none\n")
    assert v == {"tile_size": 64, "reference": None}
    with pytest.raises(ConfigError, match="unknown key 'colour'"):
        parse_config_text("colour = red\n")
    with pytest.raises(ConfigError, match="expected key = value"):
        parse_config_text("just words\n")
    with pytest.raises(ConfigError, match="seed: expected int"):
        parse_config_text("seed = many\n")


@pytest.mark.parametrize("text,field", [("dates = 1", "dates"), ("tile_size = 4", "tile_size"),
                                        ("threshold = 2", "threshold"), ("seg_labels = 0", "n_labels"),
                                        ("output_peephole = later", "output_peephole"),
                                        ("connectivity = 6", "connectivity")])
def test_invalid_values_name_the_field(tmp_path, text, field):
    p = tmp_path / "c.cfg"
    p.write_text(text + "\n")
    with pytest.raises(ConfigError, match=field):
        load_config(p)


def test_dump_round_trips():
    cfg = RunConfig(seed=3, reference="a.png")
    assert load_config(None, parse_config_text(dump_config(cfg))) == cfg


# ---------------------------------------------------------------- commands

@pytest.fixture
def series(tmp_path, capsys):
    out = tmp_path / "s"
    assert run(["synth", "--out", out, "--seed", 42], capsys)[0] == 0
    return out


def test_synth_outputs_and_determinism(tmp_path, capsys, series):
    names = sorted(p.name for p in series.iterdir())
    assert names == ["growth_stats.csv"] + [f"mask_{t}.png" for t in (1, 2, 3)] + [
        f"render_{t}.png" for t in (1, 2, 3)]
    again = tmp_path / "again"
    run(["synth", "--out", again, "--seed", 42], capsys)
    for p in series.iterdir():
        assert p.read_bytes() == (again / p.name).read_bytes()
    other = tmp_path / "other"
    run(["synth", "--out", other, "--seed", 43], capsys)
    assert (other / "mask_1.png").read_bytes() != (series / "mask_1.png").read_bytes()


def test_synth_invalid_dates(tmp_path, capsys):
    p = tmp_path / "c.cfg"
    p.write_text("dates = 1\n")
    code, _, err = run(["synth", "--config", p, "--out", tmp_path / "x"], capsys)
    assert code == 2 and ERROR_LINE.match(err) and "dates" in err


def test_segment_with_reference(tmp_path, capsys, series, fast_cfg):
    out = tmp_path / "seg"
    argv = ["segment", series / "render_1.png", "--config", fast_cfg, "--out", out,
            "--reference", series / "mask_1.png"]
    assert run(argv, capsys)[0] == 0
    mask, truth = load_mask(out / "render_1_mask.png"), load_mask(series / "mask_1.png")
    assert (mask & truth).sum() / (mask | truth).sum() >= 0.8
    first = (out / "render_1_mask.png").read_bytes()
    assert run(argv, capsys)[0] == 0
    assert (out / "render_1_mask.png").read_bytes() == first


def test_segment_block_count(tmp_path, capsys, series, fast_cfg, caplog):
    import logging
    caplog.set_level(logging.INFO, logger="growthcast")
    out = tmp_path / "seg"
    run(["segment", series / "render_1.png", "--config", fast_cfg, "--out", out, "--block-size", 48,
         "--urban-label", 0], capsys)
    blocks = [r for r in caplog.records if r.getMessage().startswith("block ")]
    assert len(blocks) == 3 * 3  # ceil(128/48)^2
    assert load_mask(out / "render_1_mask.png").shape == (128, 128)


def test_segment_without_label_choice_lists_histogram(tmp_path, capsys, series, fast_cfg):
    out = tmp_path / "seg"
    code, _, err = run(["segment", series / "render_1.png", "--config", fast_cfg, "--out", out], capsys)
    assert code == 2 and ERROR_LINE.match(err)
    assert err.startswith("LabelSelectionError:") and "label histogram" in err
    assert (out / "render_1_labels.png").exists()


def test_clean_and_tile(tmp_path, capsys):
    m = np.zeros((40, 40), np.uint8)
    m[5:25, 5:25] = 1
    m[35, 35] = 1
    save_mask(m, tmp_path / "m.png")
    assert run(["clean", tmp_path / "m.png", "--out", tmp_path / "o"], capsys)[0] == 0
    cleaned = load_mask(tmp_path / "o" / "m_clean.png")
    assert cleaned[35, 35] == 0 and cleaned[5:25, 5:25].all()
    assert run(["tile", tmp_path / "m.png", "--out", tmp_path / "t", "--tile-size", 16], capsys)[0] == 0
    tiles = sorted((tmp_path / "t" / "m").glob("tile_*.png"))
    assert len(tiles) == 9
    grid = (tmp_path / "t" / "m" / "grid.txt").read_text()
    assert "pad_bottom = 8" in grid and "pad_right = 8" in grid


def test_train_predict_evaluate(tmp_path, capsys, series, fast_cfg):
    masks = [series / f"mask_{t}.png" for t in (1, 2, 3)]
    run_dir = tmp_path / "run"
    assert run(["train", *masks, "--config", fast_cfg, "--out", run_dir], capsys)[0] == 0
    log_lines = (run_dir / "train_log.csv").read_text().splitlines()
    assert log_lines[0].startswith("epoch,") and len(log_lines) == 4
    ckpt = (run_dir / "model.gckp").read_bytes()

    run_b = tmp_path / "run_b"
    run(["train", *masks, "--config", fast_cfg, "--out", run_b], capsys)
    assert (run_b / "model.gckp").read_bytes() == ckpt

    assert run(["predict", run_dir / "model.gckp", masks[1], "--config", fast_cfg, "--out", run_dir],
               capsys)[0] == 0
    prob = load_raster(run_dir / "prediction.urtn").pixels
    assert prob.shape == (1, 128, 128) and prob.min() > 0 and prob.max() < 1

    code, out, _ = run(["evaluate", masks[2], run_dir / "prediction.urtn", masks[1], "--config",
                        fast_cfg, "--out", run_dir], capsys)
    assert code == 0
    assert "SSIM" in out and "convlstm: accuracy" in out and "persistence: accuracy" in out
    csv_text = (run_dir / "report.csv").read_text()
    assert csv_text.count("convlstm,") == 4 + 2 and csv_text.count("persistence,") == 4 + 2


def test_evaluate_perfect_prediction(tmp_path, capsys, series, fast_cfg):
    m = series / "mask_3.png"
    code, out, _ = run(["evaluate", m, m, "--config", fast_cfg, "--out", tmp_path / "e"], capsys)
    assert code == 0
    assert "convlstm: accuracy 100.00%  kappa 1.0000" in out
    assert "convlstm,mean,0.0000,0.0000,inf,1.0000" in (tmp_path / "e" / "report.csv").read_text()


def test_train_needs_three_dates(tmp_path, capsys, series):
    code, _, err = run(["train", series / "mask_1.png", series / "mask_2.png", "--out", tmp_path / "r"],
                       capsys)
    assert code == 3 and "validation requires k=2, m=3" in err and ERROR_LINE.match(err)


def test_train_grid_mismatch(tmp_path, capsys, series):
    save_mask(np.zeros((64, 64), np.uint8), tmp_path / "small.png")
    code, _, err = run(["train", series / "mask_1.png", series / "mask_2.png", tmp_path / "small.png",
                        "--tile-size", 64, "--out", tmp_path / "r"], capsys)
    assert code == 3 and "grid mismatch" in err


def test_corrupt_checkpoint_is_data_error(tmp_path, capsys, series):
    bad = tmp_path / "bad.gckp"
    bad.write_bytes(b"GCKP9garbage")
    code, _, err = run(["predict", bad, series / "mask_1.png", "--out", tmp_path / "p"], capsys)
    assert code == 3 and err.startswith("CheckpointError:")


def test_missing_input_and_bad_flags(tmp_path, capsys):
    code, _, err = run(["clean", tmp_path / "nope.png", "--out", tmp_path / "o"], capsys)
    assert code == 3 and err.startswith("DataError:")
    code, _, err = run(["clean"], capsys)
    assert code == 2 and ERROR_LINE.match(err)
    code, _, err = run(["bogus"], capsys)
    assert code == 2 and ERROR_LINE.match(err)


def test_unwritable_out_dir(tmp_path, capsys):
    blocker = tmp_path / "file"
    blocker.write_text("")
    code, _, err = run(["synth", "--out", blocker / "sub"], capsys)
    assert code == 3 and ERROR_LINE.match(err)


def test_log_level_env(monkeypatch, capsys, tmp_path):
    monkeypatch.setenv("GROWTHCAST_LOG", "chatty")
    code, _, err = run(["synth", "--out", tmp_path / "x"], capsys)
    assert code == 2 and "GROWTHCAST_LOG" in err


def test_console_script_exit_code(tmp_path):
    proc = subprocess.run([sys.executable, "-m", "growthcast.cli", "train", "a.png"],
                          capture_output=True, text=True, cwd=tmp_path)
    assert proc.returncode == 3
    assert ERROR_LINE.match(proc.stderr)
