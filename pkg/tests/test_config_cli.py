import csv

import numpy as np
import pytest

from vip2clip import __version__, data
from vip2clip.cli import main
from vip2clip.config import DEFAULTS, PRESETS, RunConfig, seed_int, substream
from vip2clip.errors import ConfigError, IoError

# small enough that a train+eval takes well under a second
TINY = {
    "backbone.grid": "8x8", "backbone.visual_dim": "32", "backbone.text_embed_dim": "16",
    "backbone.joint_dim": "16", "backbone.layers": "2", "data.size": "32", "data.n_train": "8",
    "data.n_val": "4", "data.n_test": "8", "data.area_min": "16", "data.area_max": "120",
    "train.epochs": "1", "train.batch": "4", "utpa.k": "10",
}


def tiny_args(**extra):
    out = []
    for k, v in {**TINY, **extra}.items():
        out += ["--set", f"{k}={v}"]
    return out


def read_csv(path):
    with open(path, newline="") as fh:
        return list(csv.reader(fh))


class TestRunConfig:
    def test_defaults(self):
        cfg = RunConfig()
        assert cfg["utpa.k"] == 50 and cfg["utpa.tau"] == 0.07 and cfg["prompt.length"] == 10
        assert cfg["train.lr"] == 1e-3 and cfg["map.sigma"] == 4.0

    def test_parse_comments_and_types(self):
        cfg = RunConfig.parse("# header\nutpa.k = 20  # fewer\nablate.fgp=yes\n\nloss.lambda=0.5\n")
        assert cfg["utpa.k"] == 20 and cfg["ablate.fgp"] is True and cfg["loss.lambda"] == 0.5

    def test_unknown_key(self):
        with pytest.raises(ConfigError, match="utpa.kk"):
            RunConfig.parse("utpa.kk=3")

    def test_bad_value(self):
        with pytest.raises(ConfigError):
            RunConfig({"utpa.k": "many"})
        with pytest.raises(ConfigError):
            RunConfig.parse("just a line")

    def test_dump_parse_round_trip(self):
        cfg = RunConfig({"utpa.tau": "0.1", "ablate.ica": "true", "data.textures": "grating"})
        again = RunConfig.parse(cfg.dumps())
        assert again.values == cfg.values
        assert cfg.dumps().startswith(f"# vip2clip {__version__}")

    def test_every_default_round_trips(self):
        assert RunConfig.parse(RunConfig().dumps()).values == DEFAULTS

    def test_presets(self):
        assert len(PRESETS) == 8
        cfg = RunConfig({"ablate.preset": "utpa+fgp"})
        opts = cfg.model_options()
        assert not opts.use_ica and opts.use_fgp and not opts.dual_branch
        with pytest.raises(ConfigError):
            RunConfig({"ablate.preset": "everything"})

    def test_builders(self):
        cfg = RunConfig(TINY)
        assert cfg.grid() == (8, 8)
        assert cfg.backbone_config().visual_dim == 32
        assert cfg.synth_config().counts == (("train", 8), ("val", 4), ("test", 8))
        with pytest.raises(ConfigError):
            RunConfig({"prompt.normal_word": "shiny"}).backbone_config()
        with pytest.raises(ConfigError):
            RunConfig({"prompt.dynamic": "9"}).n_static()

    def test_substreams_independent_and_stable(self):
        assert seed_int(42, "data") == seed_int(42, "data")
        assert len({seed_int(42, s) for s in ("backbone", "data", "init", "shuffle")}) == 4
        assert substream(1, "x").random() == substream(1, "x").random()

    def test_missing_file(self, tmp_path):
        with pytest.raises(IoError):
            RunConfig.load(tmp_path / "absent.txt")


class TestExitCodes:
    def test_unknown_key_exit_1(self, tmp_path, capsys):
        assert main(["train", "--out", str(tmp_path), "--set", "utpa.kk=3"]) == 1
        assert "utpa.kk" in capsys.readouterr().err

    def test_missing_config_exit_2(self, tmp_path, capsys):
        assert main(["train", "--out", str(tmp_path), "--config", str(tmp_path / "none.txt")]) == 2
        assert "none.txt" in capsys.readouterr().err

    def test_missing_checkpoint_exit_2(self, tmp_path):
        assert main(["eval", "--out", str(tmp_path), "--checkpoint", str(tmp_path / "x.vpck")] + tiny_args()) == 2

    def test_infer_without_input_exit_1(self, tmp_path):
        assert main(["infer", "--out", str(tmp_path)] + tiny_args()) == 1

    def test_version(self, capsys):
        with pytest.raises(SystemExit):
            main(["--version"])
        assert __version__ in capsys.readouterr().out


class TestCommands:
    def test_train_eval_infer(self, tmp_path, capsys):
        run = tmp_path / "run"
        assert main(["train", "--out", str(run)] + tiny_args()) == 0
        for name in ("config.txt", "train_log.csv", "checkpoint.vpck"):
            assert (run / name).exists()
        echoed = RunConfig.load(run / "config.txt")
        assert echoed["backbone.grid"] == "8x8" and echoed["data.n_train"] == 8

        # eval picks the config up from next to the checkpoint
        assert main(["eval", "--out", str(tmp_path / "ev"), "--checkpoint", str(run / "checkpoint.vpck")]) == 0
        rows = read_csv(tmp_path / "ev" / "eval.csv")
        assert rows[0] == ["metric", "value"] and rows[1][0] == "image_auroc"
        assert "pixel_aupro" in capsys.readouterr().out

        corpus = tmp_path / "corpus"
        data.write_split(data.generate(RunConfig(TINY).synth_config())["test"], corpus)
        args = ["--checkpoint", str(run / "checkpoint.vpck"), "--input", str(corpus)]
        assert main(["infer", "--out", str(tmp_path / "i1")] + args) == 0
        assert main(["infer", "--out", str(tmp_path / "i2")] + args) == 0
        scores = read_csv(tmp_path / "i1" / "scores.csv")
        assert scores[0] == ["id", "score", "label"] and len(scores) == 9
        assert scores == read_csv(tmp_path / "i2" / "scores.csv")
        for p in sorted((tmp_path / "i1").glob("*_map.png")):
            assert p.read_bytes() == (tmp_path / "i2" / p.name).read_bytes()

    def test_infer_appends(self, tmp_path):
        corpus = tmp_path / "corpus"
        data.write_split(data.generate(RunConfig(TINY).synth_config())["val"], corpus)
        for _ in range(2):
            assert main(["infer", "--out", str(tmp_path / "o"), "--input", str(corpus)] + tiny_args()) == 0
        assert len(read_csv(tmp_path / "o" / "scores.csv")) == 1 + 2 * 4

    def test_gen_data_layout(self, tmp_path):
        assert main(["gen-data", "--out", str(tmp_path)] + tiny_args()) == 0
        for split in ("train", "val", "test"):
            samples = data.load_mvtec_layout(tmp_path / split)
            assert len(samples) == int(TINY[f"data.n_{split}"])
        assert (tmp_path / "config.txt").exists()

    def test_train_from_disk(self, tmp_path):
        assert main(["gen-data", "--out", str(tmp_path / "d")] + tiny_args()) == 0
        # disk order is sorted by path, so only the sample set (not the batch order) matches memory
        memory = {s.id: s for s in data.generate(RunConfig(TINY).synth_config())["train"]}
        disk = {s.id: s for s in data.load_mvtec_layout(tmp_path / "d" / "train")}
        assert disk.keys() == memory.keys()
        assert all(np.array_equal(disk[k].image, memory[k].image) for k in disk)
        assert main(["train", "--out", str(tmp_path / "b")] + tiny_args(**{"data.root": str(tmp_path / "d")})) == 0
        assert len((tmp_path / "b" / "train_log.csv").read_text().splitlines()) == 2

    def test_gradcheck_command(self, tmp_path, capsys):
        assert main(["gradcheck", "--samples", "3", "--out", str(tmp_path)]) == 0
        assert "PASS" in (tmp_path / "gradcheck.txt").read_text()

    def test_sweep_topk(self, tmp_path):
        assert main(["sweep", "utpa.k", "1,10,20,50,100,200", "--out", str(tmp_path),
                     "--metrics", "pixel_auroc,image_auroc"] + tiny_args()) == 0
        rows = read_csv(tmp_path / "sweep.csv")
        assert rows[0] == ["key", "value", "metric", "result"]
        for metric in ("pixel_auroc", "image_auroc"):
            values = [r[1] for r in rows[1:] if r[2] == metric]
            assert values == ["1", "10", "20", "50", "100", "200"]
        assert all(np.isfinite(float(r[3])) for r in rows[1:])

    def test_sweep_rejects_bad_value_before_training(self, tmp_path):
        assert main(["sweep", "utpa.k", "10,zero", "--out", str(tmp_path)] + tiny_args()) == 1
        assert not (tmp_path / "sweep.csv").exists()

    def test_sweep_unknown_metric(self, tmp_path):
        assert main(["sweep", "utpa.k", "10", "--metrics", "accuracy", "--out", str(tmp_path)] + tiny_args()) == 1
