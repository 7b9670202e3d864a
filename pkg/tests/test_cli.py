import dataclasses
import json

import numpy as np
import pytest

from cascadenl import cli, data, net, nlops
from cascadenl.geom import PointCloud

TOY = """\
# small enough to train in well under a second per epoch
stage_M = 16, 8, 4, 2
stage_K = 6, 4, 3, 2
stage_D = 4, 4, 4, 4
stage_Dplus = 6, 6, 6, 6
K_sp = 3
N_sp_cap = 8
num_classes = 4
scene_points = 600
scene_extent = 2.0
block_points = 64
batch_size = 2
total_epochs = 2
bench_sizes = 64, 128
"""


@pytest.fixture
def toy(tmp_path):
    path = tmp_path / "toy.cfg"
    path.write_text(TOY)
    return path


def run(*argv):
    return cli.main([str(a) for a in argv])


class TestConfig:
    def test_parse(self):
        values, rc = cli.parse_config_text("num_classes = 5  # comment\n\nlevels = 12\n")
        assert values == {"num_classes": "5", "levels": "12"}
        assert rc.network.num_classes == 5 and rc.network.level_set == {1, 2}

    @pytest.mark.parametrize("text", ["bogus = 1\n", "num_classes = 4\nnum_classes = 5\n",
                                      "just words\n", "stage_M = 4, 8, 2, 1\n",
                                      "use_relpos = maybe\n", "base_lr = fast\n"])
    def test_rejects(self, text):
        with pytest.raises(cli.ConfigError):
            cli.parse_config_text(text)

    def test_round_trip(self, toy):
        _, rc = cli.load_run_config(toy, {"seed": "7", "levels": "12"})
        _, again = cli.parse_config_text(cli.format_config(rc))
        assert again == rc
        assert rc.train.seed == 7 and rc.network.levels == "12"

    def test_unknown_key_exit_2(self, tmp_path, capsys):
        (tmp_path / "bad.cfg").write_text("colour = red\n")
        assert run("train", "--config", tmp_path / "bad.cfg", "--out", tmp_path / "o") == 2

    def test_missing_config_names_path(self, tmp_path, caplog):
        missing = tmp_path / "nowhere.cfg"
        assert run("train", "--config", missing) == 2
        assert str(missing) in caplog.text

    def test_missing_data_is_io_error(self, toy, tmp_path):
        assert run("train", "--config", toy, "--data", tmp_path / "none.txt",
                   "--out", tmp_path / "o") == 3


class TestTrainEval:
    def test_train_is_deterministic(self, toy, tmp_path, capsys):
        outs = []
        for name in ("a", "b"):
            out = tmp_path / name
            assert run("train", "--config", toy, "--epochs", 1, "--seed", 7, "--out", out) == 0
            outs.append(out)
        a, b = outs
        assert (a / "model.ckpt").read_bytes() == (b / "model.ckpt").read_bytes()
        assert (a / "metrics.jsonl").read_bytes() == (b / "metrics.jsonl").read_bytes()
        assert (a / "train_curve.png").stat().st_size > 0
        eff = (a / "effective.cfg").read_text()
        assert cli.parse_config_text(eff)[1].train.seed == 7

    def test_epoch_zero_lr(self, toy, tmp_path, capsys):
        assert run("train", "--config", toy, "--out", tmp_path) == 0
        first = json.loads(capsys.readouterr().out.splitlines()[0])
        assert first["epoch"] == 0 and first["lr"] == 0.05
        lines = (tmp_path / "metrics.jsonl").read_text().splitlines()
        assert len(lines) == 2

    def test_decay_boundary_checkpoints(self, tmp_path, capsys):
        cfg = tmp_path / "c.cfg"
        cfg.write_text(TOY + "decay_every = 1\n")
        assert run("train", "--config", cfg, "--out", tmp_path) == 0
        names = sorted(p.name for p in tmp_path.glob("ckpt_epoch*.bin"))
        assert names == ["ckpt_epoch0001.bin", "ckpt_epoch0002.bin"]
        assert (tmp_path / "ckpt_epoch0002.bin").read_bytes() == (tmp_path / "model.ckpt").read_bytes()

    def test_eval_twice_identical(self, toy, tmp_path, capsys):
        assert run("train", "--config", toy, "--out", tmp_path) == 0
        capsys.readouterr()
        lines = []
        for _ in range(2):
            assert run("eval", "--config", toy, "--out", tmp_path) == 0
            lines.append(capsys.readouterr().out.strip())
        assert lines[0] == lines[1]
        m = json.loads(lines[0])
        assert set(m) == {"oa", "macc", "miou", "per_class_iou"}
        assert 0 <= m["miou"] <= 1

    def test_eval_corrupt_checkpoint(self, toy, tmp_path, capsys):
        assert run("train", "--config", toy, "--out", tmp_path) == 0
        ckpt = tmp_path / "model.ckpt"
        ckpt.write_bytes(b"NOTACKPT" + ckpt.read_bytes()[8:])
        assert run("eval", "--config", toy, "--out", tmp_path) == 2

    def test_eval_missing_checkpoint(self, toy, tmp_path):
        assert run("eval", "--config", toy, "--checkpoint", tmp_path / "x.ckpt") == 2

    def test_eval_shape_mismatch(self, toy, tmp_path, capsys):
        net.save_checkpoint(tmp_path / "w.ckpt", {"cls.W": np.zeros((2, 2))})
        assert run("eval", "--config", toy, "--checkpoint", tmp_path / "w.ckpt") == 2

    def test_train_on_data_file(self, toy, tmp_path, capsys):
        cloud = data.generate_scene(data.default_scene_spec(seed=1, n_points=300, extent=1.5))
        data.save_cloud(cloud, tmp_path / "scene.txt")
        assert run("train", "--config", toy, "--data", tmp_path / "scene.txt",
                   "--epochs", 1, "--out", tmp_path) == 0
        # blocks carry relative xyz in front of the file's 6 channels
        assert "in_channels = 9" in (tmp_path / "effective.cfg").read_text()

    def test_unlabeled_data_rejected(self, toy, tmp_path):
        rng = np.random.default_rng(0)
        pos = rng.uniform(0, 1, size=(100, 3))
        data.save_cloud(PointCloud(pos, pos.copy()), tmp_path / "u.txt")
        assert run("train", "--config", toy, "--data", tmp_path / "u.txt", "--out", tmp_path) == 2


class TestEvaluateMerge:
    def test_missing_points_take_nearest_prediction(self, toy):
        _, rc = cli.load_run_config(toy, {})
        cfg = dataclasses.replace(rc.network, in_channels=9)
        rc = cli.RunConfig(network=cfg, block_points=16)
        cloud = data.generate_scene(data.default_scene_spec(seed=0, n_points=400, extent=2.0))
        params = net.init_params(cfg, 0)
        m = cli.evaluate(rc, params, [cloud], seed=0)
        assert 0 <= m["oa"] <= 1


class TestBench:
    def test_rows_and_files(self, toy, tmp_path, capsys):
        assert run("bench", "--config", toy, "--out", tmp_path) == 0
        out = capsys.readouterr().out.splitlines()
        assert out[0] == "n,variant,interactions,seconds,peak_bytes"
        rows = [line.split(",") for line in out[1:]]
        assert [(r[0], r[1]) for r in rows] == [("64", "cascaded"), ("64", "baseline"),
                                                 ("128", "cascaded"), ("128", "baseline")]
        assert rows[1][2] == str(64 * 64) and rows[3][2] == str(128 * 128)
        assert all(int(r[4]) > 0 for r in rows)
        assert (tmp_path / "bench.csv").read_text().splitlines() == out
        assert (tmp_path / "bench.png").stat().st_size > 0

    def test_cascaded_count(self, toy):
        _, rc = cli.load_run_config(toy, {})
        rows = cli.run_bench(rc)
        for r in rows:
            assert r["interactions"] == r["analytic"]
        r = rows[2]
        assert r["interactions"] == 16 * (6 + 3 + r["N_sp"])

    def test_mismatch_exit_4(self, toy, tmp_path, monkeypatch, capsys):
        monkeypatch.setattr(nlops, "pair_interaction_count", lambda *a: -1)
        assert run("bench", "--config", toy, "--out", tmp_path) == 4


class TestAblate:
    def test_three_rows_shared_order(self, toy, tmp_path, capsys):
        assert run("ablate", "--config", toy, "--epochs", 1, "--out", tmp_path) == 0
        out = capsys.readouterr().out.splitlines()
        assert out[0] == "levels,miou,macc,oa,shuffle"
        rows = [line.split(",") for line in out[1:]]
        assert [r[0] for r in rows] == ["1", "12", "123"]
        assert len({r[4] for r in rows}) == 1
        assert (tmp_path / "ablation.png").stat().st_size > 0
        for lv in ("1", "12", "123"):
            assert (tmp_path / f"model_L{lv}.ckpt").exists()
