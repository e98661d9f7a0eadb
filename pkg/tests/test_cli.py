import json

import numpy as np
import pytest
import yaml

from deblur_mim.cli import EXIT_MISSING, EXIT_SCHEMA, EXIT_USAGE, main
from deblur_mim.data import save_image

TINY_MODEL = {"image_size": 16, "patch_size": 4, "enc_dim": 16, "enc_depth": 1, "enc_heads": 2,
              "dec_dim": 16, "dec_depth": 1, "dec_heads": 2}


def write_yaml(path, obj):
    path.write_text(yaml.safe_dump(obj))
    return path


def pretrain_cfg(tmp_path):
    return write_yaml(tmp_path / "pre.yaml", {
        "preset": "pretrain.desk", "model": TINY_MODEL, "epochs": 2, "batch_size": 8,
        "schedule": {"warmup_epochs": 1},
        "data": {"synth": {"count": 16, "image_side": 16, "spot_radius": 2.0, "labeled": False, "seed": 5}},
    })


def finetune_cfg(tmp_path, mode="finetune"):
    return write_yaml(tmp_path / f"{mode}.yaml", {
        "preset": f"{mode}.desk", "model": TINY_MODEL, "epochs": 2, "batch_size": 8, "schedule": {"warmup_epochs": 1},
        "data": {"synth": {"count": 30, "image_side": 16, "spot_radius": 2.0, "labeled": True, "seed": 6}},
    })


def last_err(capsys):
    err = capsys.readouterr().err.strip().splitlines()
    assert len(err) == 1
    return err[0]


class TestErrors:
    def test_unknown_flag(self, capsys):
        assert main(["pretrain", "--config", "x.yaml", "--bogus"]) == EXIT_USAGE
        assert last_err(capsys).startswith("error: usage:")

    def test_missing_file(self, capsys, tmp_path):
        assert main(["pretrain", "--config", str(tmp_path / "none.yaml")]) == EXIT_MISSING
        assert last_err(capsys).startswith("error: missing:")

    def test_schema_violation(self, capsys, tmp_path):
        cfg = write_yaml(tmp_path / "bad.yaml", {"preset": "pretrain.desk", "mask_ratoi": 0.5})
        assert main(["pretrain", "--config", str(cfg)]) == EXIT_SCHEMA
        assert "mask_ratoi" in last_err(capsys)

    def test_codes_distinct(self):
        assert len({EXIT_USAGE, EXIT_SCHEMA, EXIT_MISSING, 0, 1}) == 5

    def test_bad_degrade_param(self, capsys, tmp_path):
        save_image(np.zeros((4, 4)), tmp_path / "a.png")
        rc = main(["degrade", "--method", "gaussian", "--param", "sigma=-1",
                   "--in", str(tmp_path / "a.png"), "--out", str(tmp_path / "b.png")])
        assert rc == EXIT_SCHEMA


class TestDegrade:
    def test_identity_bytes(self, tmp_path):
        img = np.random.default_rng(0).integers(0, 256, size=(8, 8)) / 255
        save_image(img, tmp_path / "a.png")
        assert main(["degrade", "--method", "identity", "--in", str(tmp_path / "a.png"),
                     "--out", str(tmp_path / "b.png")]) == 0
        assert (tmp_path / "a.png").read_bytes() == (tmp_path / "b.png").read_bytes()

    def test_gaussian_param(self, tmp_path):
        save_image(np.eye(16), tmp_path / "a.png")
        assert main(["degrade", "--method", "gaussian", "--param", "sigma=2.0",
                     "--in", str(tmp_path / "a.png"), "--out", str(tmp_path / "b.png")]) == 0


class TestWorkflow:
    def test_end_to_end(self, tmp_path, capsys):
        spec = write_yaml(tmp_path / "synth.yaml", {"count": 12, "image_side": 16, "spot_radius": 2.0, "seed": 77})
        assert main(["synth", "--spec", str(spec), "--out", str(tmp_path / "data")]) == 0
        assert main(["pretrain", "--config", str(pretrain_cfg(tmp_path)), "--out", str(tmp_path / "p.ckpt")]) == 0
        assert (tmp_path / "p.ckpt.manifest.json").exists()
        capsys.readouterr()
        assert main(["eval", "--ckpt", str(tmp_path / "p.ckpt"), "--data", str(tmp_path / "data")]) == 0
        metrics = json.loads(capsys.readouterr().out)
        assert set(metrics) == {"acc", "f1", "auroc"}
        assert main(["reconstruct", "--ckpt", str(tmp_path / "p.ckpt"), "--data", str(tmp_path / "data"),
                     "--out", str(tmp_path / "rec")]) == 0
        assert len(list((tmp_path / "rec").glob("*_grid.png"))) == 12
        assert main(["finetune", "--config", str(finetune_cfg(tmp_path)), "--ckpt", str(tmp_path / "p.ckpt"),
                     "--out", str(tmp_path / "f.ckpt"), "--metrics", str(tmp_path / "f.jsonl")]) == 0
        assert len((tmp_path / "f.jsonl").read_text().splitlines()) == 3
        assert main(["linprobe", "--config", str(finetune_cfg(tmp_path, "linprobe")),
                     "--ckpt", str(tmp_path / "p.ckpt")]) == 0
        assert main(["finetune", "--config", str(finetune_cfg(tmp_path)), "--scratch", "--seed", "3"]) == 0

    def test_seed_flag_changes_run(self, tmp_path):
        cfg = str(pretrain_cfg(tmp_path))
        main(["pretrain", "--config", cfg, "--seed", "1", "--out", str(tmp_path / "a.ckpt")])
        main(["pretrain", "--config", cfg, "--seed", "2", "--out", str(tmp_path / "b.ckpt")])
        assert (tmp_path / "a.ckpt").read_bytes() != (tmp_path / "b.ckpt").read_bytes()

    def test_sweep_table(self, tmp_path, capsys):
        pre = yaml.safe_load(pretrain_cfg(tmp_path).read_text())
        ft = yaml.safe_load(finetune_cfg(tmp_path).read_text())
        cfg = write_yaml(tmp_path / "sweep.yaml", {"pretrain": pre, "finetune": ft, "seeds": [0]})
        capsys.readouterr()
        assert main(["sweep", "--config", str(cfg), "--axis", "mask_ratio", "--values", "0.5,0.75"]) == 0
        lines = capsys.readouterr().out.strip().splitlines()
        assert lines[0].startswith("axis\tvalue") and len(lines) == 3
