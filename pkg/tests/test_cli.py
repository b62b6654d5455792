"""CLI surface: config resolution, subcommands, exit codes, determinism."""

import json

import numpy as np
import pytest

from terrafill import cli
from terrafill.raster import (
    GridTile,
    grid_to_points,
    load_ascii_grid,
    save_ascii_grid,
    save_points_csv,
    synth_terrain,
)


def run(*argv):
    return cli.main([str(a) for a in argv])


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    """Shared DEM, sparse raster, tile dir, and toy training config."""
    root = tmp_path_factory.mktemp("cliws")
    dem = root / "dem.asc"
    assert run("synth", "--seed", 3, "--size", 33, "--out", dem) == 0
    sparse = root / "sparse.asc"
    assert run("mask", "--dem", dem, "--ratio", 0.8, "--seed", 1, "--out", sparse) == 0
    tiles = root / "tiles"
    assert run("tile", "--dem", dem, "--tile-size", 8, "--out-dir", tiles) == 0
    cfg = root / "toy.config"
    cfg.write_text(
        "# toy model\n"
        "tile_side = 8\n"
        "enc_depth = 2\n"
        "enc_dim = 32\n"
        "dec_depth = 2\n"
        "dec_dim = 32\n"
        "heads = 2\n"
        "epochs = 1\n"
        "learning_rate = 0.001\n"
    )
    return root


class TestConfigPlumbing:
    def test_parse_config_file(self, tmp_path):
        p = tmp_path / "c.config"
        p.write_text("# comment\nseed = 4\n\nsize=9  # trailing\nseed = 5\n")
        assert cli.parse_config_file(p) == {"seed": "5", "size": "9"}

    def test_bad_line_rejected(self, tmp_path):
        p = tmp_path / "c.config"
        p.write_text("just some words\n")
        with pytest.raises(ValueError, match="c.config:1"):
            cli.parse_config_file(p)

    def test_unknown_config_key_is_usage_error(self, tmp_path):
        p = tmp_path / "c.config"
        p.write_text("sizzle = 9\n")
        code = run("synth", "--config", p, "--out", tmp_path / "x.asc")
        assert code == cli.EXIT_USAGE

    def test_flags_override_file(self, tmp_path):
        p = tmp_path / "c.config"
        p.write_text("seed = 1\nsize = 9\n")
        a, b = tmp_path / "a.asc", tmp_path / "b.asc"
        assert run("synth", "--config", p, "--out", a) == 0
        assert run("synth", "--config", p, "--seed", 2, "--out", b) == 0
        assert load_ascii_grid(a).values.shape == (9, 9)
        assert not np.array_equal(load_ascii_grid(a).values, load_ascii_grid(b).values)

    def test_rerun_from_resolved_config_reproduces(self, tmp_path):
        a, b = tmp_path / "a.asc", tmp_path / "b.asc"
        assert run("synth", "--seed", 11, "--size", 17, "--out", a) == 0
        conf = tmp_path / "a.asc.config"
        assert conf.exists()
        assert run("synth", "--config", conf, "--out", b) == 0
        assert a.read_bytes() == b.read_bytes()

    def test_build_run_config(self):
        params = cli._train_config_params()
        resolved = {p.name: p.default for p in params}
        resolved.update({"tile_side": 8, "heads": 2, "enc_dim": 32, "enc_depth": 2,
                         "dec_dim": 32, "dec_depth": 2, "gamma": 0.5, "epochs": 3})
        model, train = cli.build_run_config(resolved)
        assert model.tile_side == 8 and model.heads == 2
        assert train.epochs == 3 and train.loss.gamma == 0.5


class TestSynthTileMask:
    def test_synth_deterministic(self, tmp_path):
        a, b = tmp_path / "a.asc", tmp_path / "b.asc"
        run("synth", "--seed", 9, "--size", 17, "--out", a)
        run("synth", "--seed", 9, "--size", 17, "--out", b)
        assert a.read_bytes() == b.read_bytes()

    def test_synth_header_size(self, tmp_path):
        out = tmp_path / "t.asc"
        run("synth", "--seed", 0, "--size", 65, "--out", out)
        head = out.read_text().splitlines()[:2]
        assert head[0].split() == ["ncols", "65"]
        assert head[1].split() == ["nrows", "65"]

    def test_missing_out_is_usage_error(self):
        assert run("synth", "--size", 9) == cli.EXIT_USAGE

    def test_tile_writes_expected_count(self, workspace):
        files = sorted((workspace / "tiles").glob("*.asc"))
        assert len(files) == 16  # 33x33, tile 8, stride 8

    def test_mask_achieves_ratio(self, workspace):
        sparse = load_ascii_grid(workspace / "sparse.asc")
        n = sparse.width * sparse.height
        assert abs((~sparse.valid).sum() / n - 0.8) < 1.0 / n

    def test_mask_uniform_strategy(self, workspace, tmp_path):
        out = tmp_path / "u.asc"
        assert run("mask", "--dem", workspace / "dem.asc", "--ratio", 0.75,
                   "--strategy", "uniform", "--out", out) == 0
        t = load_ascii_grid(out)
        assert t.valid.sum() == int(np.ceil(0.25 * 33 * 33))


class TestTrain:
    def test_epochs_zero_writes_initial_checkpoint(self, workspace, tmp_path):
        out = tmp_path / "init.ckpt"
        code = run("train", "--config", workspace / "toy.config",
                   "--data-dir", workspace / "tiles", "--out", out, "--epochs", 0)
        assert code == 0
        from terrafill.train import load_checkpoint

        ckpt = load_checkpoint(out)
        assert ckpt.epoch == 0 and ckpt.train_history == []
        log = (tmp_path / "init.ckpt.log.csv").read_text().splitlines()
        assert log == ["epoch,train_loss,val_loss,val_rmse"]

    def test_deterministic_logs(self, workspace, tmp_path):
        outs = []
        for name in ("a.ckpt", "b.ckpt"):
            out = tmp_path / name
            assert run("train", "--config", workspace / "toy.config",
                       "--data-dir", workspace / "tiles", "--out", out) == 0
            outs.append(out)
        a, b = outs
        assert (tmp_path / "a.ckpt.log.csv").read_bytes() == (
            tmp_path / "b.ckpt.log.csv"
        ).read_bytes()
        assert a.read_bytes() == b.read_bytes()

    def test_resume_continues_epoch_counter(self, workspace, tmp_path):
        first = tmp_path / "e1.ckpt"
        run("train", "--config", workspace / "toy.config",
            "--data-dir", workspace / "tiles", "--out", first, "--epochs", 1)
        second = tmp_path / "e3.ckpt"
        code = run("train", "--config", workspace / "toy.config",
                   "--data-dir", workspace / "tiles", "--out", second,
                   "--resume", first, "--epochs", 3)
        assert code == 0
        from terrafill.train import load_checkpoint

        ckpt = load_checkpoint(second)
        assert ckpt.epoch == 3
        assert len(ckpt.train_history) == 3

    def test_numeric_blowup_exits_3(self, workspace, tmp_path):
        code = run("train", "--config", workspace / "toy.config",
                   "--data-dir", workspace / "tiles", "--out", tmp_path / "x.ckpt",
                   "--learning-rate", "1e200", "--precision", "double",
                   "--epochs", 4)
        assert code == cli.EXIT_NUMERIC

    def test_empty_data_dir_exits_4(self, workspace, tmp_path):
        empty = tmp_path / "none"
        empty.mkdir()
        code = run("train", "--config", workspace / "toy.config",
                   "--data-dir", empty, "--out", tmp_path / "x.ckpt")
        assert code == cli.EXIT_EMPTY


@pytest.fixture(scope="module")
def trained(workspace):
    out = workspace / "model.ckpt"
    assert run("train", "--config", workspace / "toy.config",
               "--data-dir", workspace / "tiles", "--out", out, "--epochs", 2) == 0
    return out


class TestInfer:
    def test_fully_valid_input_round_trips(self, workspace, trained, tmp_path):
        out = tmp_path / "same.asc"
        assert run("infer", "--checkpoint", trained, "--in", workspace / "dem.asc",
                   "--out", out) == 0
        a = load_ascii_grid(workspace / "dem.asc")
        b = load_ascii_grid(out)
        np.testing.assert_array_equal(a.values, b.values)

    def test_sparse_input_fills_everything(self, workspace, trained, tmp_path):
        out = tmp_path / "filled.asc"
        assert run("infer", "--checkpoint", trained, "--in", workspace / "sparse.asc",
                   "--out", out) == 0
        t = load_ascii_grid(out)
        assert t.valid.all()
        sparse = load_ascii_grid(workspace / "sparse.asc")
        np.testing.assert_array_equal(t.values[sparse.valid], sparse.values[sparse.valid])

    def test_csv_input_matches_asc_input(self, workspace, trained, tmp_path):
        sparse = load_ascii_grid(workspace / "sparse.asc")
        pts = tmp_path / "pts.csv"
        save_points_csv(grid_to_points(sparse), pts)
        a, b = tmp_path / "a.asc", tmp_path / "b.asc"
        assert run("infer", "--checkpoint", trained, "--in", workspace / "sparse.asc",
                   "--out", a) == 0
        assert run("infer", "--checkpoint", trained, "--points", pts,
                   "--template", workspace / "dem.asc", "--out", b) == 0
        assert a.read_bytes() == b.read_bytes()

    def test_all_nodata_input_exits_4(self, workspace, trained, tmp_path):
        t = synth_terrain(seed=0, size=9)
        empty = GridTile(
            np.full(t.shape, t.nodata), np.zeros(t.shape, bool), t.cell_size, t.origin
        )
        p = tmp_path / "empty.asc"
        save_ascii_grid(empty, p)
        assert run("infer", "--checkpoint", trained, "--in", p,
                   "--out", tmp_path / "o.asc") == cli.EXIT_EMPTY

    def test_raster_smaller_than_tile_exits_5(self, workspace, trained, tmp_path):
        small = tmp_path / "small.asc"
        run("synth", "--seed", 1, "--size", 5, "--out", small)
        assert run("infer", "--checkpoint", trained, "--in", small,
                   "--out", tmp_path / "o.asc") == cli.EXIT_GEOMETRY


class TestInterp:
    def test_ok_needs_two_samples(self, workspace, tmp_path):
        t = synth_terrain(seed=2, size=9)
        t.valid[:] = False
        t.valid[0, 0] = True
        t.values[~t.valid] = t.nodata
        p = tmp_path / "one.asc"
        save_ascii_grid(t, p)
        assert run("interp", "--method", "ok", "--in", p,
                   "--out", tmp_path / "o.asc") == cli.EXIT_USAGE

    def test_nn_exact_at_samples(self, workspace, tmp_path):
        out = tmp_path / "nn.asc"
        assert run("interp", "--method", "nn", "--in", workspace / "sparse.asc",
                   "--out", out) == 0
        sparse = load_ascii_grid(workspace / "sparse.asc")
        filled = load_ascii_grid(out)
        np.testing.assert_array_equal(
            filled.values[sparse.valid], sparse.values[sparse.valid]
        )

    def test_deterministic(self, workspace, tmp_path):
        a, b = tmp_path / "a.asc", tmp_path / "b.asc"
        for out in (a, b):
            assert run("interp", "--method", "ok", "--in", workspace / "sparse.asc",
                       "--k", 10, "--out", out) == 0
        assert a.read_bytes() == b.read_bytes()

    def test_unknown_method_is_usage_error(self, workspace, tmp_path):
        assert run("interp", "--method", "spline", "--in", workspace / "sparse.asc",
                   "--out", tmp_path / "o.asc") == cli.EXIT_USAGE


class TestEval:
    def test_identical_rasters(self, workspace, tmp_path, capsys):
        out = tmp_path / "rep.json"
        area = 30.0 * 30.0
        code = run("eval", "--pred", workspace / "dem.asc", "--ref", workspace / "dem.asc",
                   "--thresholds", f"{4 * area},{16 * area}", "--out", out)
        assert code == 0
        doc = json.loads(out.read_text())
        assert doc["elevation"]["rmse"] == 0.0
        assert all(s["precision"] == 1.0 for s in doc["streams"])
        csv_lines = (tmp_path / "rep.csv").read_text().strip().splitlines()
        assert len(csv_lines) - 1 == 8 + 3 * 2

    def test_geometry_mismatch_exits_5(self, workspace, tmp_path):
        other = tmp_path / "other.asc"
        run("synth", "--seed", 4, "--size", 17, "--out", other)
        assert run("eval", "--pred", other, "--ref", workspace / "dem.asc",
                   "--out", tmp_path / "r.json") == cli.EXIT_GEOMETRY


class TestSweep:
    def test_sparsity_sweep_shape(self, workspace, tmp_path):
        out_dir = tmp_path / "sw"
        code = run("sweep", "--kind", "sparsity", "--dem", workspace / "dem.asc",
                   "--levels", "0.5,0.9", "--methods", "idw,nn", "--k", 8,
                   "--out-dir", out_dir)
        assert code == 0
        lines = (out_dir / "sparsity_sweep.csv").read_text().strip().splitlines()
        assert lines[0] == "level,method,mean,std,mae,rmse"
        assert len(lines) - 1 == 2 * 2
        assert (out_dir / "summary.txt").exists()
        assert (out_dir / "resolved.config").exists()

    def test_mask_ratio_sweep_shape(self, workspace, tmp_path):
        out_dir = tmp_path / "swm"
        code = run("sweep", "--kind", "mask_ratio", "--data-dir", workspace / "tiles",
                   "--config", workspace / "toy.config", "--ratios", "0.5,0.9",
                   "--out-dir", out_dir)
        assert code == 0
        lines = (out_dir / "mask_ratio_sweep.csv").read_text().strip().splitlines()
        assert lines[0] == "ratio,mean,std,mae,rmse"
        assert len(lines) - 1 == 2
        assert (out_dir / "model_r0.5.params").exists()
        assert (out_dir / "model_r0.9.params").exists()

    def test_empty_levels_is_usage_error(self, workspace, tmp_path):
        assert run("sweep", "--kind", "sparsity", "--dem", workspace / "dem.asc",
                   "--levels", "", "--out-dir", tmp_path / "x") == cli.EXIT_USAGE

    def test_unknown_kind_is_usage_error(self, workspace, tmp_path):
        assert run("sweep", "--kind", "wavelength",
                   "--out-dir", tmp_path / "x") == cli.EXIT_USAGE


class TestEnvironment:
    def test_bad_terra_threads_is_usage_error(self, monkeypatch, tmp_path):
        monkeypatch.setenv("TERRA_THREADS", "many")
        assert run("synth", "--out", tmp_path / "x.asc") == cli.EXIT_USAGE

    def test_terra_threads_accepted(self, monkeypatch, tmp_path):
        monkeypatch.setenv("TERRA_THREADS", "1")
        assert run("synth", "--size", 9, "--out", tmp_path / "x.asc") == 0
