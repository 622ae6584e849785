import numpy as np
import pytest

from stabnet.cli import main
from stabnet.config import DEFAULTS, RunConfig, apply_overrides, parse_text
from stabnet.data import SplitManifest
from stabnet.errors import ConfigError
from stabnet.layers import load_network


@pytest.fixture
def blobs_conf(tmp_path):
    path = tmp_path / "run.conf"
    path.write_text(
        "# small blobs run\n"
        "dataset = blobs\n"
        "blobs_n_per_class = 60\n"
        "blobs_test_per_class = 50\n"
        "per_class = 5\n"
        "epochs = 3\n"
        "steps_per_epoch = 5\n"
        "arch = mlp\n"
        "hidden = 8\n"
        "out_dir = out\n"
    )
    return path


class TestConfig:
    def test_defaults_and_comments(self):
        values = parse_text("epochs = 7  # trailing comment\n\n# whole-line comment\n")
        cfg = RunConfig(values)
        assert cfg.as_int("epochs") == 7
        assert cfg.as_float("lambda1") == 0.1

    def test_unknown_key(self):
        with pytest.raises(ConfigError, match="epohcs"):
            parse_text("epohcs = 3\n")

    def test_missing_equals(self):
        with pytest.raises(ConfigError):
            parse_text("epochs 3\n")

    def test_overrides(self):
        assert apply_overrides({}, ["lambda1=0", " lr = 0.1 "]) == {"lambda1": "0", "lr": "0.1"}
        with pytest.raises(ConfigError):
            apply_overrides({}, ["nope=1"])

    @pytest.mark.parametrize("key,value", [("epochs", "x"), ("lr", "fast"), ("hflip", "maybe")])
    def test_bad_types(self, key, value):
        cfg = RunConfig({key: value})
        getter = {"epochs": cfg.as_int, "lr": cfg.as_float, "hflip": cfg.as_bool}[key]
        with pytest.raises(ConfigError):
            getter(key)

    def test_resolved_text_lists_every_key(self):
        text = RunConfig({"epochs": "4"}).to_text()
        assert parse_text(text)["epochs"] == "4"
        assert len(text.splitlines()) == len(DEFAULTS)

    def test_relative_paths_follow_config_file(self, blobs_conf):
        assert RunConfig.load(blobs_conf).path("out_dir") == blobs_conf.parent / "out"

    def test_architecture_presets(self):
        specs = RunConfig({"conv_channels": "4,8", "hidden": "16"}).architecture(10)
        assert specs[0].out == 4 and specs[-2].out == 10
        explicit = RunConfig({"arch": "fc out=3; softmax"}).architecture(3)
        assert [s.kind for s in explicit] == ["fc", "softmax"]

    def test_transform(self):
        cfg = RunConfig({"transform": "true", "crop": "24x24", "max_rotation": "20", "hflip": "yes"})
        spec = cfg.transform()
        assert spec.crop_to == (24, 24) and spec.max_rotation_deg == 20 and spec.hflip
        assert RunConfig().transform().is_identity


class TestSplit:
    def test_histogram_and_determinism(self, tmp_path, capsys, blobs_conf):
        outs = []
        for k in range(2):
            path = tmp_path / f"s{k}"
            assert main(["split", "--dataset", str(blobs_conf), "--per-class", "4", "--seed", "1",
                         "--out", str(path)]) == 0
            outs.append(path.read_bytes())
        assert outs[0] == outs[1]
        printed = capsys.readouterr().out
        assert "class 0: 4" in printed and "class 1: 4" in printed
        assert len(SplitManifest.load(tmp_path / "s0").labeled_idx) == 8

    def test_zero_per_class(self, tmp_path, blobs_conf):
        assert main(["split", "--dataset", str(blobs_conf), "--per-class", "0", "--out", str(tmp_path / "s")]) == 2

    def test_missing_dataset(self, tmp_path, capsys):
        missing = tmp_path / "nowhere"
        assert main(["split", "--dataset", str(missing), "--per-class", "1", "--out", str(tmp_path / "s")]) == 3
        assert str(missing) in capsys.readouterr().err


class TestTrain:
    def test_outputs(self, blobs_conf):
        assert main(["train", "--config", str(blobs_conf)]) == 0
        out = blobs_conf.parent / "out"
        rows = (out / "metrics.csv").read_text().splitlines()
        assert rows[0] == "epoch,objective,sup,ts,me,test_err_pct,seconds"
        assert len(rows) == 4
        assert load_network(out / "final.ckpt").num_classes == 2
        assert "epochs = 3" in (out / "config.resolved").read_text()

    def test_supervised_override(self, blobs_conf):
        assert main(["train", "--config", str(blobs_conf), "--override", "lambda1=0", "lambda2=0"]) == 0
        rows = (blobs_conf.parent / "out" / "metrics.csv").read_text().splitlines()[1:]
        for row in rows:
            _, objective, sup, *_ = row.split(",")
            assert objective == sup

    def test_byte_identical_reruns(self, blobs_conf):
        texts = []
        for k in range(2):
            assert main(["train", "--config", str(blobs_conf), "--override", f"out_dir=r{k}"]) == 0
            texts.append((blobs_conf.parent / f"r{k}" / "metrics.csv").read_bytes())
        assert texts[0] == texts[1]

    def test_missing_data_path(self, tmp_path, capsys):
        conf = tmp_path / "m.conf"
        conf.write_text(f"dataset = mnist\ndata_dir = {tmp_path / 'absent'}\n")
        assert main(["train", "--config", str(conf)]) == 3
        assert "absent" in capsys.readouterr().err

    def test_config_error(self, tmp_path):
        conf = tmp_path / "bad.conf"
        conf.write_text("learning_rate = 0.1\n")
        assert main(["train", "--config", str(conf)]) == 2

    def test_bad_override_value(self, blobs_conf):
        assert main(["train", "--config", str(blobs_conf), "--override", "lambda1=-1"]) == 2

    @pytest.mark.filterwarnings("ignore::RuntimeWarning")
    def test_numeric_abort(self, blobs_conf):
        assert main(["train", "--config", str(blobs_conf), "--override", "lr=1e30"]) == 4
        assert (blobs_conf.parent / "out" / "last_good.ckpt").exists()


class TestEval:
    @pytest.fixture
    def checkpoint(self, blobs_conf):
        assert main(["train", "--config", str(blobs_conf)]) == 0
        return blobs_conf.parent / "out" / "final.ckpt"

    def run(self, capsys, *args):
        capsys.readouterr()
        code = main(["eval", *args])
        return code, capsys.readouterr().out.strip()

    def test_deterministic_passes_agree(self, capsys, checkpoint, blobs_conf):
        c1, one = self.run(capsys, "--checkpoint", str(checkpoint), "--dataset", str(blobs_conf), "--passes", "1")
        c5, five = self.run(capsys, "--checkpoint", str(checkpoint), "--dataset", str(blobs_conf), "--passes", "5")
        assert c1 == c5 == 0 and one == five
        assert len(one.split(".")[1]) == 2

    def test_zero_passes(self, checkpoint, blobs_conf):
        assert main(["eval", "--checkpoint", str(checkpoint), "--dataset", str(blobs_conf), "--passes", "0"]) == 2

    def test_bad_checkpoint(self, tmp_path, blobs_conf):
        bad = tmp_path / "bad.ckpt"
        bad.write_bytes(b"garbage")
        assert main(["eval", "--checkpoint", str(bad), "--dataset", str(blobs_conf)]) == 3
        assert main(["eval", "--checkpoint", str(tmp_path / "none"), "--dataset", str(blobs_conf)]) == 3

    def test_predictions_csv(self, tmp_path, capsys, checkpoint, blobs_conf):
        out = tmp_path / "pred.csv"
        code, printed = self.run(capsys, "--checkpoint", str(checkpoint), "--dataset", str(blobs_conf),
                                 "--passes", "3", "--stochastic", "--predictions-out", str(out))
        assert code == 0
        lines = out.read_text().splitlines()
        assert lines[0] == "index,label,predicted,p0,p1" and len(lines) == 101
        wrong = sum(int(l.split(",")[1]) != int(l.split(",")[2]) for l in lines[1:])
        assert float(printed) == pytest.approx(100 * wrong / 100)


class TestGradcheck:
    def test_passes(self, capsys):
        assert main(["gradcheck", "--loss", "ts", "--trials", "5"]) == 0
        out = capsys.readouterr().out
        assert out.count("trial") >= 5 and "overall" in out

    @pytest.mark.parametrize("args", [["--loss", "kl"], ["--loss", "me", "--eps", "0"],
                                      ["--loss", "me", "--trials", "0"]])
    def test_parameter_errors(self, args):
        assert main(["gradcheck", *args]) == 2

    def test_layer_kind(self):
        assert main(["gradcheck", "--loss", "layer:randpool", "--trials", "3"]) == 0


def test_blobs_eval_matches_training_report(blobs_conf, capsys):
    assert main(["train", "--config", str(blobs_conf)]) == 0
    reported = float(capsys.readouterr().out.split("final test error ")[1].split("%")[0])
    ckpt = blobs_conf.parent / "out" / "final.ckpt"
    assert main(["eval", "--checkpoint", str(ckpt), "--dataset", str(blobs_conf)]) == 0
    assert float(capsys.readouterr().out) == pytest.approx(reported)
    assert np.isfinite(reported)
