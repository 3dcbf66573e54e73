import argparse
import csv
import json

import numpy as np
import pytest
import torch
from PIL import Image

from vcpseg import cli
from vcpseg.data import SynthConfig, synth_generate


def _config(path, train_root, **extra):
    text = (
        "seed: 1\n"
        "model: {tap_layers: [1, 2, 3, 4], image_size: 64}\n"
        "toy: {text_layers: 2, image_layers: 4, text_width: 32, image_width: 32, joint_dim: 32}\n"
        "train: {epochs: 1, batch_size: 4}\n"
    )
    if train_root is not None:
        text += f"dataset: {{train_root: {train_root}}}\n"
    for k, v in extra.items():
        text += f"{k}: {v}\n"
    path.write_text(text, encoding="utf-8")
    return path


@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    synth_generate(SynthConfig(root=str(root / "data"), count=4, products=["alpha"]))
    synth_generate(SynthConfig(root=str(root / "unseen"), count=4, products=["beta"], seed=5))
    cfg = _config(root / "run.yaml", root / "data")
    assert cli.main(["train", "--config", str(cfg), "--out", str(root / "run")]) == 0
    return root


class TestParser:
    def test_help(self, capsys):
        with pytest.raises(SystemExit) as info:
            cli.main(["--help"])
        assert info.value.code == 0
        assert "export-text-weights" in capsys.readouterr().out

    def test_bad_flag(self):
        with pytest.raises(SystemExit) as info:
            cli.main(["train", "--nonsense"])
        assert info.value.code == 2


class TestTrain:
    def test_outputs(self, trained):
        run = trained / "run"
        assert {p.name for p in run.iterdir()} >= {"model.vcp", "model.vcp.meta.json", "train_log.jsonl"}
        meta = json.loads((run / "model.vcp.meta.json").read_text())
        assert meta["train_products"] == ["alpha"]
        assert meta["metrics"]["steps"] == 1
        rec = json.loads((run / "train_log.jsonl").read_text().splitlines()[0])
        assert rec["step"] == 1 and "loss_total" in rec

    def test_missing_train_root(self, tmp_path, capsys):
        cfg = _config(tmp_path / "c.yaml", None)
        assert cli.main(["train", "--config", str(cfg)]) == 2
        assert "dataset.train_root" in capsys.readouterr().err

    def test_unknown_key(self, tmp_path, capsys):
        cfg = _config(tmp_path / "c.yaml", tmp_path, colour="red")
        assert cli.main(["train", "--config", str(cfg)]) == 2
        assert "colour" in capsys.readouterr().err

    def test_missing_config_file(self, tmp_path):
        assert cli.main(["train", "--config", str(tmp_path / "none.yaml")]) == 2

    def test_data_error(self, tmp_path):
        cfg = _config(tmp_path / "c.yaml", tmp_path / "absent")
        assert cli.main(["train", "--config", str(cfg), "--out", str(tmp_path / "o")]) == 3

    def test_divergence_exit_code(self, tmp_path, monkeypatch):
        synth_generate(SynthConfig(root=str(tmp_path / "d"), count=2))
        cfg = _config(tmp_path / "c.yaml", tmp_path / "d")
        out = tmp_path / "o"
        original = cli.engine.build_model

        def poisoned(c):
            model = original(c)
            with torch.no_grad():
                model.prompt.V.fill_(float("nan"))
            return model

        monkeypatch.setattr(cli.engine, "build_model", poisoned)
        assert cli.main(["train", "--config", str(cfg), "--out", str(out)]) == 4
        assert (out / "model.last_good.vcp").is_file()


class TestPredict:
    def test_outputs(self, trained, tmp_path):
        img = next((trained / "unseen" / "beta" / "test" / "defect").iterdir())
        assert cli.main(["predict", "--checkpoint", str(trained / "run" / "model.vcp"),
                         "--image", str(img), "--out", str(tmp_path)]) == 0
        amap = np.load(tmp_path / f"{img.stem}_map.npy")
        assert amap.shape == (64, 64) and amap.dtype == np.float32
        png = np.asarray(Image.open(tmp_path / f"{img.stem}_heatmap.png"))
        assert png.shape == (64, 64) and png.min() == 0 and png.max() == 255
        info = json.loads((tmp_path / f"{img.stem}.json").read_text())
        assert info["image_score"] == float(amap.max())

    def test_unreadable_image(self, trained, tmp_path):
        bad = tmp_path / "x.png"
        bad.write_bytes(b"garbage")
        assert cli.main(["predict", "--checkpoint", str(trained / "run" / "model.vcp"),
                         "--image", str(bad), "--out", str(tmp_path)]) == 3


class TestEval:
    def test_alpha_sweep(self, trained, tmp_path, capsys):
        code = cli.main(["eval", "--checkpoint", str(trained / "run" / "model.vcp"), "--dataset-root",
                         str(trained / "unseen"), "--alpha", "0", "0.5", "1", "--out", str(tmp_path)])
        assert code == 0
        rows = (tmp_path / "sweep.csv").read_text().splitlines()
        assert rows[0] == "alpha,auroc,pro,ap,image_auroc,image_ap"
        assert [r.split(",")[0] for r in rows[1:]] == ["0", "0.5", "1"]
        assert (tmp_path / "report_alpha0.5.csv").is_file()
        assert "warning" not in capsys.readouterr().err

    def test_overlap_warning(self, trained, tmp_path, capsys):
        assert cli.main(["eval", "--checkpoint", str(trained / "run" / "model.vcp"), "--dataset-root",
                         str(trained / "data"), "--out", str(tmp_path)]) == 0
        assert "alpha" in capsys.readouterr().err
        assert (tmp_path / "report.csv").read_text().startswith("product,auroc,pro,ap")

    def test_perfect_predictor(self, trained, tmp_path):
        def oracle(images):
            # ground truth itself, batch order matches ``samples``
            return perfect[: images.shape[0]], None

        from vcpseg.data import PreprocessSpec, load_batch, scan_dataset

        samples = scan_dataset(trained / "unseen", ("test",))
        _, masks = load_batch(samples, PreprocessSpec(size=(64, 64)))
        abn = masks.double()
        perfect = torch.stack([1 - abn, abn], dim=1)
        reports = cli.evaluate(oracle, samples, PreprocessSpec(size=(64, 64)), [0.75], batch_size=len(samples))
        assert reports[0.75].triple(reports[0.75].mean) == "100.0, 100.0, 100.0"

    def test_checkpoint_mismatch(self, trained, tmp_path):
        run = trained / "run"
        meta = json.loads((run / "model.vcp.meta.json").read_text())
        meta["config"]["toy"]["text_width"] = 64
        meta["config"]["toy"]["joint_dim"] = 64
        (tmp_path / "model.vcp").write_bytes((run / "model.vcp").read_bytes())
        (tmp_path / "model.vcp.meta.json").write_text(json.dumps(meta))
        with pytest.warns(UserWarning, match="content hash"):
            code = cli.main(["eval", "--checkpoint", str(tmp_path / "model.vcp"), "--dataset-root",
                             str(trained / "unseen")])
        assert code == 5


class TestExport:
    def test_rows(self, trained, tmp_path):
        folder = tmp_path / "imgs"
        folder.mkdir()
        src = next((trained / "unseen" / "beta" / "test" / "good").iterdir())
        for name in ("a.png", "b.png"):
            (folder / name).write_bytes(src.read_bytes())
        out = tmp_path / "w.csv"
        assert cli.main(["export-text-weights", "--checkpoint", str(trained / "run" / "model.vcp"),
                         "--images", str(folder), "--out", str(out)]) == 0
        rows = list(csv.reader(out.open()))
        assert len(rows) == 2 and len(rows[0]) == 1 + 32
        assert rows[0][1:] == rows[1][1:]

    def test_zero_mininet_without_post_vcp_is_image_independent(self, trained):
        model, _ = cli.model_from_checkpoint(trained / "run" / "model.vcp")
        model.cfg.post_vcp = False
        with torch.no_grad():
            model.prompt.mininet_w.zero_()
            model.prompt.mininet_b.zero_()
        imgs = torch.randn(2, 3, 64, 64)
        g = cli.text_weights(model, imgs)
        assert torch.equal(g[0], g[1])

    def test_bad_directory(self, trained, tmp_path):
        assert cli.main(["export-text-weights", "--checkpoint", str(trained / "run" / "model.vcp"),
                         "--images", str(tmp_path / "none"), "--out", str(tmp_path / "w.csv")]) == 3


def test_synth_command(tmp_path):
    cfg = _config(tmp_path / "c.yaml", None, synth="{count: 2, image_size: 32}")
    assert cli.main(["synth", "--config", str(cfg), "--out", str(tmp_path / "s")]) == 0
    assert len(list((tmp_path / "s").rglob("*.png"))) == 3


def test_parser_builds_namespace():
    args = cli.build_parser().parse_args(["eval", "--checkpoint", "c", "--dataset-root", "d"])
    assert isinstance(args, argparse.Namespace)
    assert (args.split, args.batch_size, args.alpha) == ("test", 8, None)
    assert args.checkpoint == ["c"]


def test_seed_list_reports_spread(tmp_path):
    synth_generate(SynthConfig(root=str(tmp_path / "d"), count=4, products=["alpha"]))
    synth_generate(SynthConfig(root=str(tmp_path / "u"), count=4, products=["beta"], seed=2))
    cfg = _config(tmp_path / "c.yaml", tmp_path / "d")
    assert cli.main(["train", "--config", str(cfg), "--seeds", "0", "1", "--out", str(tmp_path / "runs")]) == 0
    ckpts = [str(tmp_path / "runs" / f"seed_{s}" / "model.vcp") for s in (0, 1)]
    metas = [json.loads(open(c + ".meta.json").read()) for c in ckpts]
    assert [m["seed"] for m in metas] == [0, 1]
    assert cli.main(["eval", "--checkpoint", *ckpts, "--dataset-root", str(tmp_path / "u"),
                     "--out", str(tmp_path / "ev")]) == 0
    rows = list(csv.reader((tmp_path / "ev" / "seeds.csv").open()))
    assert [r[0] for r in rows[1:]] == ["beta", "mean"]
    assert rows[0][1:3] == ["auroc_mean", "auroc_std"]
