"""CLI: subcommands, exit codes, artifact files."""

import numpy as np
import pytest

from matchformer import data as D
from matchformer import matcher as M
from matchformer.cli import main
from matchformer.model import MatchModel
from matchformer.trainer import TrainConfig

TOY_CONFIG = """\
variant: lite
attention: la
channels: 8 8 8 16
coarse_channels: 8
fine_channels: 8
fusion_channels: 8
steps: 2
"""


@pytest.fixture
def pgm_pair(tmp_path):
    a = tmp_path / "a.pgm"
    b = tmp_path / "b.pgm"
    img = D.gen_pattern(0, 64, 64)
    D.write_pgm(a, img)
    D.write_pgm(b, img)
    return str(a), str(b)


class TestShapes:
    def test_lite_640x480(self, capsys):
        assert main(["shapes", "--variant", "lite", "--height", "480",
                     "--width", "640"]) == 0
        out = capsys.readouterr().out
        assert "120x160" in out and "coarse" in out and "192" in out

    def test_large_640x480(self, capsys):
        assert main(["shapes", "--variant", "large", "--height", "480",
                     "--width", "640"]) == 0
        out = capsys.readouterr().out
        assert "240x320" in out and "256" in out

    def test_indivisible_extent_is_usage_error(self):
        assert main(["shapes", "--variant", "lite", "--height", "100",
                     "--width", "640"]) == 2

    def test_unknown_flag_is_usage_error(self):
        with pytest.raises(SystemExit) as exc:
            main(["shapes", "--variant", "lite", "--height", "64",
                  "--width", "64", "--bogus"])
        assert exc.value.code == 2


class TestMatch:
    def test_writes_tsv_and_overlay_and_manifest(self, pgm_pair, tmp_path, capsys):
        a, b = pgm_pair
        out = tmp_path / "out"
        cfgfile = tmp_path / "toy.cfg"
        cfgfile.write_text(TOY_CONFIG)
        code = main(["match", a, b, "--out", str(out), "--config", str(cfgfile),
                     "--seed", "0", "--theta", "0.0"])
        assert code == 0
        matches = M.load_matches(out / "matches.tsv")
        assert len(matches) > 0
        assert (out / "overlay.ppm").exists()
        manifest = (out / "manifest.txt").read_text()
        assert "command: match" in manifest and "theta: 0.0" in manifest

    def test_missing_file_is_io_error(self, tmp_path, capsys):
        code = main(["match", str(tmp_path / "nope.pgm"), str(tmp_path / "nope2.pgm"),
                     "--out", str(tmp_path / "o")])
        assert code == 3
        assert "nope.pgm" in capsys.readouterr().err

    def test_empty_match_set_is_success_with_warning(self, tmp_path, capsys):
        a = tmp_path / "a.pgm"
        b = tmp_path / "b.pgm"
        D.write_pgm(a, np.full((64, 64), 0.5))
        D.write_pgm(b, np.full((64, 64), 0.5))
        cfgfile = tmp_path / "toy.cfg"
        cfgfile.write_text(TOY_CONFIG)
        out = tmp_path / "out"
        code = main(["match", str(a), str(b), "--out", str(out),
                     "--config", str(cfgfile), "--theta", "0.99"])
        assert code == 0
        assert len(M.load_matches(out / "matches.tsv")) == 0
        assert "warning" in capsys.readouterr().out


class TestTrain:
    def test_zero_steps_checkpoint_equals_init(self, tmp_path, capsys):
        cfgfile = tmp_path / "toy.cfg"
        cfgfile.write_text(TOY_CONFIG)
        out = tmp_path / "run"
        code = main(["train", "--out", str(out), "--config", str(cfgfile),
                     "--steps", "0", "--seed", "0"])
        assert code == 0
        cfg = TrainConfig(steps=0, seed=0, channels=(8, 8, 8, 16),
                          coarse_channels=8, fine_channels=8, fusion_channels=8)
        fresh = MatchModel(cfg.model_config(), seed=0)
        trained = MatchModel(cfg.model_config(), seed=1)
        trained.load(out / "checkpoint.txt")
        for (_, a), (_, b) in zip(fresh.named_parameters(),
                                  trained.named_parameters()):
            assert np.array_equal(a.data, b.data)
        assert (out / "metrics.csv").exists()
        assert (out / "manifest.txt").exists()

    def test_short_training_runs(self, tmp_path):
        cfgfile = tmp_path / "toy.cfg"
        cfgfile.write_text(TOY_CONFIG)
        out = tmp_path / "run"
        assert main(["train", "--out", str(out), "--config", str(cfgfile),
                     "--seed", "0"]) == 0
        lines = (out / "metrics.csv").read_text().splitlines()
        assert lines[0] == "step,loss_coarse,loss_fine,precision"
        assert len(lines) == 3  # header + 2 steps


class TestEval:
    def test_exact_matches_give_unit_accuracy(self, tmp_path, capsys):
        h_gt = D.random_homography(5, size=(64, 64))
        rng = np.random.default_rng(5)
        pts_a = rng.uniform(2, 62, size=(40, 2))
        pts = np.concatenate([pts_a, D.hom_apply(h_gt, pts_a)], axis=1)
        matches = M.MatchSet(points=np.concatenate([pts, np.ones((40, 1))], axis=1))
        mfile = tmp_path / "m.tsv"
        M.save_matches(mfile, matches)
        manifest = tmp_path / "manifest.tsv"
        D.save_manifest(manifest, [(5, h_gt)])
        out = tmp_path / "out"
        code = main(["eval", "--manifest", str(manifest), "--matches", str(mfile),
                     "--out", str(out)])
        assert code == 0
        report = (out / "report.csv").read_text()
        assert "accuracy@1px,1.0" in report
        assert "accuracy@3px,1.0" in report and "accuracy@5px,1.0" in report
        assert "mma@3px,1.0" in report

    def test_matches_file_requires_single_entry_manifest(self, tmp_path):
        manifest = tmp_path / "manifest.tsv"
        D.save_manifest(manifest, [(1, np.eye(3)), (2, np.eye(3))])
        mfile = tmp_path / "m.tsv"
        M.save_matches(mfile, M.MatchSet(points=np.zeros((0, 5))))
        code = main(["eval", "--manifest", str(manifest), "--matches", str(mfile),
                     "--out", str(tmp_path / "o")])
        assert code == 2

    def test_missing_manifest_is_io_error(self, tmp_path):
        assert main(["eval", "--manifest", str(tmp_path / "none.tsv"),
                     "--out", str(tmp_path / "o")]) == 3


class TestBench:
    def test_reports_table_convention_gflops(self, capsys):
        assert main(["bench", "--variant", "lite", "--attention", "sea"]) == 0
        out = capsys.readouterr().out
        assert "table convention" in out and "GFLOPs" in out

    def test_include_matcher_adds_category(self, capsys):
        assert main(["bench", "--variant", "lite", "--attention", "sea",
                     "--include-matcher"]) == 0
        assert "matcher" in capsys.readouterr().out


class TestDeterminism:
    def test_match_reruns_are_byte_identical_except_manifest(self, pgm_pair, tmp_path):
        a, b = pgm_pair
        cfgfile = tmp_path / "toy.cfg"
        cfgfile.write_text(TOY_CONFIG)
        outputs = []
        for name in ("run1", "run2"):
            out = tmp_path / name
            assert main(["match", a, b, "--out", str(out), "--config",
                         str(cfgfile), "--seed", "7", "--theta", "0.0"]) == 0
            outputs.append(out)
        assert (outputs[0] / "matches.tsv").read_bytes() \
            == (outputs[1] / "matches.tsv").read_bytes()
        assert (outputs[0] / "overlay.ppm").read_bytes() \
            == (outputs[1] / "overlay.ppm").read_bytes()
        strip = [l for l in (outputs[0] / "manifest.txt").read_text().splitlines()
                 if not l.startswith("timestamp")]
        strip2 = [l for l in (outputs[1] / "manifest.txt").read_text().splitlines()
                  if not l.startswith("timestamp")]
        assert strip == strip2


class TestSelftest:
    def test_clean_run_exits_zero(self, capsys):
        assert main(["selftest"]) == 0
        out = capsys.readouterr().out
        assert out.count("[PASS]") >= 8

    def test_injected_fault_exits_nonzero(self, capsys):
        assert main(["selftest", "--inject-fault", "softmax"]) == 4
        assert "[FAIL]" in capsys.readouterr().out
