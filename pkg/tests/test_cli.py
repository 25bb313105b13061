"""CLI contract tests: config parsing, overrides, exit codes, subcommand
side effects, selfcheck detectability."""

import numpy as np
import pytest

import insloc.roialign as roialign_mod
from insloc.cli import (ConfigError, build_parser, build_train_config, main,
                        parse_config)
from insloc.imaging import read_ppm
from insloc.trainer import load_checkpoint


def run_cli(args):
    return main(args)


class TestConfigParsing:
    def test_defaults_when_no_file(self):
        v = parse_config(None, [])
        assert v["mode"] == "insloc-c4"
        assert v["steps"] == 2000
        assert v["temperature"] == 0.2

    def test_file_parsing(self, tmp_path):
        cfg = tmp_path / "run.cfg"
        cfg.write_text("steps = 10\nmode = insloc-fpn  # comment\n\n# full line\n")
        v = parse_config(str(cfg), [])
        assert v["steps"] == 10 and v["mode"] == "insloc-fpn"

    def test_unknown_key_rejected(self, tmp_path):
        cfg = tmp_path / "run.cfg"
        cfg.write_text("bogus_key = 1\n")
        with pytest.raises(ConfigError, match="bogus_key"):
            parse_config(str(cfg), [])

    def test_out_of_range_value_names_key(self):
        with pytest.raises(ConfigError, match="temperature"):
            parse_config(None, ["temperature=-1"])

    def test_set_overrides_file(self, tmp_path):
        cfg = tmp_path / "run.cfg"
        cfg.write_text("mode = insloc-c4\n")
        v = parse_config(str(cfg), ["mode=baseline-holistic"])
        assert v["mode"] == "baseline-holistic"

    def test_missing_config_file_names_path(self):
        with pytest.raises(ConfigError, match="nope.cfg"):
            parse_config("nope.cfg", [])

    def test_list_values(self):
        v = parse_config(None, ["anchor_strides=4,8,16", "widths=8,16,32,32"])
        assert v["anchor_strides"] == (4, 8, 16)
        assert v["widths"] == (8, 16, 32, 32)

    def test_bool_values(self):
        v = parse_config(None, ["box_aug=false", "channel_norm=true"])
        assert v["box_aug"] is False and v["channel_norm"] is True

    def test_bad_line_reports_location(self, tmp_path):
        cfg = tmp_path / "run.cfg"
        cfg.write_text("steps 10\n")
        with pytest.raises(ConfigError, match="run.cfg:1"):
            parse_config(str(cfg), [])

    def test_build_train_config_mode_variants(self):
        v = parse_config(None, ["mode=insloc-fpn"])
        tc = build_train_config(v)
        assert tc.backbone.variant == "fpn"
        assert tc.composition.fg_aspect == (0.5, 2.0)

    def test_help_lists_every_key(self, capsys):
        with pytest.raises(SystemExit):
            build_parser().parse_args(["--help"])
        out = capsys.readouterr().out
        from insloc.cli import KEYS
        for key in KEYS:
            assert key.name in out


SMALL = ["steps=2", "batch_size=2", "gallery_k=6", "gallery_size=32",
         "composite_size=32", "fg_scale_min=8", "fg_scale_max=24",
         "view_size=16", "queue_capacity=16", "widths=4,4,6,6",
         "embed_dim=8", "hidden_dim=6",
         "anchor_strides=4,8", "anchor_scales=8,12,16,24"]


def small_args(extra=()):
    out = []
    for kv in SMALL + list(extra):
        out += ["--set", kv]
    return out


class TestPretrainCommand:
    def test_writes_checkpoint_and_metrics(self, tmp_path):
        out = tmp_path / "run"
        code = run_cli(["pretrain"] + small_args([f"out_dir={out}"]))
        assert code == 0
        ckpt = load_checkpoint(out / "checkpoint.ilck")
        assert ckpt.step == 2
        lines = (out / "metrics.tsv").read_text().strip().split("\n")
        assert len(lines) == 2 and lines[0].startswith("0\t")

    def test_missing_config_exits_2(self, capsys):
        code = run_cli(["pretrain", "--config", "does-not-exist.cfg"])
        assert code == 2
        assert "does-not-exist.cfg" in capsys.readouterr().err

    def test_bad_value_exits_2(self, capsys):
        code = run_cli(["pretrain", "--set", "steps=-3"])
        assert code == 2
        assert "steps" in capsys.readouterr().err

    def test_set_overrides_config_file(self, tmp_path):
        cfg = tmp_path / "run.cfg"
        cfg.write_text("mode = insloc-c4\nsteps = 2\n")
        out = tmp_path / "run"
        code = run_cli(["pretrain", "--config", str(cfg)]
                       + small_args([f"out_dir={out}",
                                     "mode=baseline-holistic"]))
        assert code == 0


class TestProbeCommand:
    def test_probe_prints_tsv_row(self, tmp_path, capsys):
        out = tmp_path / "run"
        assert run_cli(["pretrain"] + small_args(
            [f"out_dir={out}", "probe_steps=20"])) == 0
        code = run_cli(["probe", "--M", "4"] + small_args(
            [f"out_dir={out}", "probe_steps=20", "probe_views_train=2",
             "probe_views_eval=2"]))
        assert code == 0
        lines = capsys.readouterr().out.strip().split("\n")
        row = [ln for ln in lines if ln.startswith("insloc-c4\t")][-1]
        mode, m, loc, cls, seed = row.split("\t")
        assert int(m) == 4
        assert 0.0 <= float(loc) <= 1.0 and 0.0 <= float(cls) <= 1.0

    def test_probe_deterministic(self, tmp_path, capsys):
        out = tmp_path / "run"
        assert run_cli(["pretrain"] + small_args(
            [f"out_dir={out}"])) == 0
        capsys.readouterr()  # drop the pretrain status line
        args = ["probe", "--M", "4"] + small_args(
            [f"out_dir={out}", "probe_steps=20", "probe_views_train=2",
             "probe_views_eval=2"])
        assert run_cli(args) == 0
        first = capsys.readouterr().out
        assert run_cli(args) == 0
        second = capsys.readouterr().out
        assert first == second

    def test_corrupt_checkpoint_exits_1(self, tmp_path, capsys):
        bad = tmp_path / "bad.ilck"
        bad.write_bytes(b"NOPE" + b"\x00" * 20)
        code = run_cli(["probe", "--checkpoint", str(bad)] + small_args())
        assert code == 1
        assert "ILCK" in capsys.readouterr().err

    def test_steps_zero_checkpoint_near_chance(self, tmp_path, capsys):
        out = tmp_path / "run"
        assert run_cli(["pretrain"] + small_args(
            [f"out_dir={out}", "steps=0", "gallery_k=12"])) == 0
        code = run_cli(["probe", "--M", "4"] + small_args(
            [f"out_dir={out}", "steps=0", "gallery_k=12", "probe_steps=30",
             "probe_views_train=3", "probe_views_eval=3"]))
        assert code == 0
        row = [ln for ln in capsys.readouterr().out.strip().split("\n")
               if ln.startswith("insloc-c4\t")][-1]
        loc, cls = float(row.split("\t")[2]), float(row.split("\t")[3])
        # untrained: classification near chance (1/12); localization is only
        # loosely bounded because scene statistics are position-readable
        assert cls < 0.5
        assert 0.0 < loc <= 1.0


class TestComposeCommand:
    def test_writes_pairs_and_tsv(self, tmp_path):
        out = tmp_path / "comps"
        code = run_cli(["compose", "--count", "3", "--out", str(out)]
                       + small_args())
        assert code == 0
        tsv = (out / "composites.tsv").read_text().strip().split("\n")
        assert len(tsv) == 3
        for line in tsv:
            name, x1, y1, x2, y2, inst, bg = line.split("\t")
            assert (out / name).is_file()
            img = read_ppm(out / name)
            assert img.shape == (32, 32, 3)
            assert 0 <= float(x1) < float(x2) <= 32
            assert 0 <= float(y1) < float(y2) <= 32
            assert inst != bg
        assert (out / "overlay_0000.ppm").is_file()

    def test_count_zero_only_tsv(self, tmp_path):
        out = tmp_path / "comps0"
        code = run_cli(["compose", "--count", "0", "--out", str(out)]
                       + small_args())
        assert code == 0
        assert (out / "composites.tsv").read_text() == ""
        assert len(list(out.glob("*.ppm"))) == 0

    def test_fixed_seed_identical_files(self, tmp_path):
        a, b = tmp_path / "a", tmp_path / "b"
        for out in (a, b):
            assert run_cli(["compose", "--count", "2", "--out", str(out)]
                           + small_args()) == 0
        for name in ("composite_0000.ppm", "overlay_0001.ppm",
                     "composites.tsv"):
            assert (a / name).read_bytes() == (b / name).read_bytes()


class TestSelfcheckCommand:
    def test_fresh_build_exits_0(self, capsys):
        assert run_cli(["selfcheck"]) == 0
        out = capsys.readouterr().out
        assert "PASS" in out and "FAIL" not in out

    def test_perturbed_bilinear_weight_fails_adjointness(self, monkeypatch,
                                                         capsys):
        monkeypatch.setattr(roialign_mod, "_FORWARD_WEIGHT_PERTURBATION", 5e-4)
        assert run_cli(["selfcheck"]) == 1
        captured = capsys.readouterr()
        assert "roialign-adjointness" in captured.err


class TestThreadCap:
    def test_invalid_thread_env_exits_2(self, monkeypatch, capsys):
        monkeypatch.setenv("INSLOC_THREADS", "zero")
        assert run_cli(["selfcheck"]) == 2
        assert "INSLOC_THREADS" in capsys.readouterr().err

    def test_valid_thread_env_accepted(self, monkeypatch):
        monkeypatch.setenv("INSLOC_THREADS", "4")
        assert run_cli(["selfcheck"]) == 0
