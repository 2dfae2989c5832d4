import json

import numpy as np
import pytest

from ppmcount.cli import build_parser, main
from ppmcount.dataset import read_dataset, read_ppm, write_ppm

TINY = """\
stages=2
backbone_widths=4,4,8
ppm_scales=1,2,4
ppm_channels=4
stage1_widths=8,8
refine_width=4
refine_kernel=3
learning_rate=0.001
epochs=2
"""


def run(*argv):
    return main([str(a) for a in argv])


@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    data, runs = root / "data", root / "run"
    assert run("synth", "--out", data, "--n", 12, "--size", 32, "--count", "2,4", "--split", "0.5,0.25,0.25") == 0
    (root / "tiny.cfg").write_text(TINY)
    assert run("train", "--config", root / "tiny.cfg", "--data", data, "--out", runs) == 0
    return root, data, runs


class TestSynthAndTile:
    def test_synth_count(self, tmp_path):
        assert run("synth", "--count", 5, "--size", 64, "--n", 20, "--out", tmp_path / "d") == 0
        samples = read_dataset(tmp_path / "d")
        assert len(samples) == 20 and all(s.count == 5 for s in samples)
        assert (tmp_path / "d" / "manifest.tsv").exists()

    def test_synth_idempotent(self, tmp_path):
        for name in ("a", "b"):
            assert run("synth", "--n", 4, "--size", 32, "--count", "1,3", "--out", tmp_path / name) == 0
        for rel in ("manifest.tsv", "annotations.json", "images/synth_00003.ppm"):
            assert (tmp_path / "a" / rel).read_bytes() == (tmp_path / "b" / rel).read_bytes()

    def test_tile_1024(self, tmp_path):
        raster = np.zeros((1024, 1024, 3), dtype=np.uint8)
        write_ppm(tmp_path / "big.ppm", raster)
        record = {"image_path": "big.ppm", "width": 1024, "height": 1024, "points": [[513, 10], [5, 600]]}
        (tmp_path / "big.json").write_text(json.dumps([record]))
        assert run("tile", "--raster", tmp_path / "big.ppm", "--annotations", tmp_path / "big.json",
                   "--out", tmp_path / "t") == 0
        samples = read_dataset(tmp_path / "t")
        assert len(samples) == 4 and sum(s.count for s in samples) == 2


class TestErrors:
    def test_unknown_flag(self, capsys):
        with pytest.raises(SystemExit) as exc:
            run("synth", "--out", "x", "--colour", "red")
        assert exc.value.code != 0

    def test_unknown_config_key(self, tmp_path, capsys):
        (tmp_path / "bad.cfg").write_text("epochs=3\ncolour=red\n")
        assert run("train", "--config", tmp_path / "bad.cfg", "--data", tmp_path, "--out", tmp_path / "r") != 0
        assert "colour" in capsys.readouterr().err

    def test_missing_dataset(self, tmp_path, capsys):
        assert run("evaluate", "--data", tmp_path / "nope", "--detections", tmp_path / "d.csv") != 0
        assert "error" in capsys.readouterr().err

    def test_checkpoint_config_mismatch(self, trained, tmp_path, capsys):
        root, data, runs = trained
        cfg = (runs / "best.cfg").read_text().replace("refine_width=4", "refine_width=5")
        (tmp_path / "best.pkc").write_bytes((runs / "best.pkc").read_bytes())
        (tmp_path / "best.cfg").write_text(cfg)
        assert run("predict", "--model", tmp_path / "best.pkc", "--data", data, "--out", tmp_path / "d.csv") != 0
        assert "shape" in capsys.readouterr().err


class TestHelp:
    def test_top_level_defaults(self):
        text = build_parser().format_help()
        for needle in ("stages=4", "sigma_max=3.0", "sigma_min=1.0", "tau=0.35", "delta=1.0", "learning_rate=0.01"):
            assert needle in text

    def test_every_option_documents_default(self):
        parser = build_parser()
        for name, sub in parser._subparsers._group_actions[0].choices.items():
            for action in sub._actions:
                if action.option_strings and action.dest != "help":
                    assert action.help, f"{name} {action.dest} has no help"


class TestPipeline:
    def test_train_outputs(self, trained):
        _, _, runs = trained
        for name in ("best.pkc", "best.cfg", "last.pkc", "train_log.csv", "timing.tsv", "train.cfg", "model.cfg"):
            assert (runs / name).exists()
        assert "epochs=2" in (runs / "train.cfg").read_text()

    def test_train_idempotent_except_timing(self, trained, tmp_path):
        root, data, runs = trained
        assert run("train", "--config", root / "tiny.cfg", "--data", data, "--out", tmp_path / "again") == 0
        for name in ("best.pkc", "last.pkc", "train_log.csv", "train.cfg", "test_report.csv"):
            assert (runs / name).read_bytes() == (tmp_path / "again" / name).read_bytes()

    def test_cli_overrides_config_file(self, trained, tmp_path):
        root, data, _ = trained
        assert run("train", "--config", root / "tiny.cfg", "--epochs", 1, "--data", data, "--out", tmp_path / "r") == 0
        assert len((tmp_path / "r" / "train_log.csv").read_text().splitlines()) == 2

    def test_predict_evaluate_render(self, trained, tmp_path, capsys):
        _, data, runs = trained
        dets, maps = tmp_path / "d.csv", tmp_path / "maps"
        assert run("predict", "--model", runs / "best.pkc", "--data", data, "--split", "test",
                   "--out", dets, "--maps", maps) == 0
        assert dets.read_text().startswith("image_id,x_image,y_image,confidence")
        capsys.readouterr()

        assert run("evaluate", "--model", runs / "best.pkc", "--data", data, "--out", tmp_path / "r1.csv") == 0
        table = capsys.readouterr().out
        assert "tau=0.35 delta=1.0" in table and "MAE" in table
        assert run("evaluate", "--detections", dets, "--data", data, "--out", tmp_path / "r2.csv") == 0
        assert (tmp_path / "r1.csv").read_text() == (tmp_path / "r2.csv").read_text()

        image_id = sorted(p.stem for p in maps.iterdir())[0]
        image = data / "images" / f"{image_id}.ppm"
        out = tmp_path / "overlay.ppm"
        assert run("render", "--image", image, "--detections", dets, "--image-id", image_id,
                   "--circle", 8, "--out", out) == 0
        assert read_ppm(out).shape == read_ppm(image).shape
        assert run("render", "--map", maps / f"{image_id}.npy", "--out", tmp_path / "map.ppm") == 0
        assert read_ppm(tmp_path / "map.ppm").shape == (32, 32, 3)

    def test_render_zero_map_is_black(self, tmp_path):
        np.save(tmp_path / "z.npy", np.zeros((4, 4)))
        assert run("render", "--map", tmp_path / "z.npy", "--out", tmp_path / "z.ppm") == 0
        img = read_ppm(tmp_path / "z.ppm")
        assert img.shape == (32, 32, 3) and not img.any()

    def test_render_marks_detection(self, tmp_path):
        write_ppm(tmp_path / "b.ppm", np.zeros((16, 16, 3), dtype=np.uint8))
        (tmp_path / "d.csv").write_text("image_id,x_image,y_image,confidence\nb,5.0,6.0,0.9\n")
        assert run("render", "--image", tmp_path / "b.ppm", "--detections", tmp_path / "d.csv",
                   "--out", tmp_path / "o.ppm") == 0
        img = read_ppm(tmp_path / "o.ppm")
        assert tuple(img[6, 5]) == (255, 0, 0)
        assert (img[..., 0] == 255).sum() == 9
