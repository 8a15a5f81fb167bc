import csv
import os

import pytest
import torch

from mphm.cli import main
from mphm.data import generate_dataset, load_image, save_image
from mphm.errors import NumericError


@pytest.fixture(scope="module")
def data_root(tmp_path_factory):
    root = tmp_path_factory.mktemp("clidata")
    generate_dataset(root, count=2, size=24, seed=0)
    return root


@pytest.fixture(scope="module")
def config_path(tmp_path_factory):
    path = tmp_path_factory.mktemp("clicfg") / "run.cfg"
    assert main(["gen-config", "--out", str(path)]) == 0
    return path


TINY_SETS = [
    "--set", "model.base_channels=8",
    "--set", "model.stage_depths=1,1,1,1,1",
    "--set", "model.hmm.d_state=4",
    "--set", "model.hmm.vssm_expand=1",
    "--set", "model.hmm.ffcm_hidden_factor=1.0",
    "--set", "model.stage_heads=2,2,2,2,2",
    "--set", "model.pfi.gdfn_expansion=1.0",
    "--set", "steps=2",
    "--set", "batch=1",
    "--set", "crop=24",
]


@pytest.fixture(scope="module")
def trained_dir(tmp_path_factory, data_root, config_path):
    out = tmp_path_factory.mktemp("clirun")
    code = main([
        "train", "--config", str(config_path), *TINY_SETS,
        "--set", f"data_dir={data_root}", "--set", f"out_dir={out}",
    ])
    assert code == 0
    return out


class TestHappyPaths:
    def test_gen_config_is_parseable(self, config_path):
        from mphm.config import load_run_config, RunConfig

        assert load_run_config(config_path) == RunConfig()

    def test_gen_data_writes_pairs(self, tmp_path):
        assert main(["gen-data", "--out", str(tmp_path), "--n", "2",
                     "--seed", "1", "--size", "16"]) == 0
        assert len(os.listdir(tmp_path / "rain")) == 2
        assert sorted(os.listdir(tmp_path / "rain")) == sorted(os.listdir(tmp_path / "norain"))

    def test_train_writes_checkpoint_and_logs(self, trained_dir, capsys):
        assert (trained_dir / "checkpoint.pt").exists()
        assert (trained_dir / "losses.csv").exists()
        assert (trained_dir / "run_config.txt").exists()

    def test_env_seed_overrides_set_flag(self, tmp_path, data_root, config_path, monkeypatch):
        monkeypatch.setenv("MPHM_SEED", "42")
        out = tmp_path / "envrun"
        code = main([
            "train", "--config", str(config_path), *TINY_SETS,
            "--set", "steps=1", "--set", "seed=3",
            "--set", f"data_dir={data_root}", "--set", f"out_dir={out}",
        ])
        assert code == 0
        text = (out / "run_config.txt").read_text()
        assert "\nseed = 42\n" in text

    def test_eval_writes_csv(self, trained_dir, data_root, tmp_path, capsys):
        out_csv = tmp_path / "eval.csv"
        code = main(["eval", "--ckpt", str(trained_dir / "checkpoint.pt"),
                     "--data", str(data_root), "--out", str(out_csv)])
        assert code == 0
        with open(out_csv, newline="") as f:
            rows = list(csv.DictReader(f))
        assert len(rows) == 3 and rows[-1]["image_id"] == "mean"
        assert "mean PSNR" in capsys.readouterr().out

    def test_infer_round_trip(self, trained_dir, data_root, tmp_path):
        src = next((data_root / "rain").iterdir())
        out_img = tmp_path / "derained.png"
        code = main(["infer", "--ckpt", str(trained_dir / "checkpoint.pt"),
                     "--in", str(src), "--out", str(out_img)])
        assert code == 0
        assert load_image(out_img).shape == load_image(src).shape

    def test_visualize_residual_heatmap(self, data_root, tmp_path):
        rain = next((data_root / "rain").iterdir())
        clean = data_root / "norain" / rain.name
        out = tmp_path / "heat.png"
        code = main(["visualize", "--kind", "residual_heatmap",
                     "--pred", str(rain), "--gt", str(clean), "--out", str(out)])
        assert code == 0
        assert load_image(out).shape == load_image(rain).shape

    def test_visualize_pca(self, trained_dir, data_root, tmp_path):
        rain = next((data_root / "rain").iterdir())
        out = tmp_path / "pca.png"
        code = main(["visualize", "--kind", "pca_features",
                     "--ckpt", str(trained_dir / "checkpoint.pt"),
                     "--in", str(rain), "--layer", "stage2", "--out", str(out)])
        assert code == 0
        assert load_image(out).shape == load_image(rain).shape


class TestExitCodes:
    def test_missing_config_file(self, tmp_path, capsys):
        code = main(["train", "--config", str(tmp_path / "absent.cfg")])
        assert code == 2
        assert "config error" in capsys.readouterr().err

    def test_unknown_override_key(self, config_path, capsys):
        code = main(["train", "--config", str(config_path), "--set", "stpes=2"])
        assert code == 2

    def test_eval_empty_dataset(self, trained_dir, tmp_path, capsys):
        os.makedirs(tmp_path / "rain")
        os.makedirs(tmp_path / "norain")
        code = main(["eval", "--ckpt", str(trained_dir / "checkpoint.pt"),
                     "--data", str(tmp_path), "--out", str(tmp_path / "e.csv")])
        assert code == 3
        assert "data error" in capsys.readouterr().err

    def test_missing_checkpoint(self, tmp_path, capsys):
        save_image(torch.rand(3, 8, 8), tmp_path / "in.png")
        code = main(["infer", "--ckpt", str(tmp_path / "absent.pt"),
                     "--in", str(tmp_path / "in.png"), "--out", str(tmp_path / "o.png")])
        assert code == 2

    def test_unknown_ablate_axis(self, config_path, tmp_path, capsys):
        code = main(["ablate", "--config", str(config_path), "--axis", "optimizer",
                     "--out", str(tmp_path)])
        assert code == 2
        assert "unknown ablation axis" in capsys.readouterr().err

    def test_visualize_missing_inputs(self, tmp_path, capsys):
        code = main(["visualize", "--kind", "pca_features", "--out", str(tmp_path / "o.png")])
        assert code == 2
        assert "--ckpt" in capsys.readouterr().err

    def test_unknown_pca_layer(self, trained_dir, data_root, tmp_path, capsys):
        rain = next((data_root / "rain").iterdir())
        code = main(["visualize", "--kind", "pca_features",
                     "--ckpt", str(trained_dir / "checkpoint.pt"),
                     "--in", str(rain), "--layer", "stage9", "--out", str(tmp_path / "o.png")])
        assert code == 2
        assert "valid hooks" in capsys.readouterr().err

    def test_numeric_failure_maps_to_4(self, config_path, monkeypatch, capsys):
        def blow_up(cfg):
            raise NumericError("synthetic failure")

        monkeypatch.setattr("mphm.train.train", blow_up)
        code = main(["train", "--config", str(config_path)])
        assert code == 4
        assert "numeric error" in capsys.readouterr().err
