import json
import os

import numpy as np
import pytest

from gaussfields import GridConfig, Rng, build_model, load_image
from gaussfields.checkpoint import load_checkpoint, save_checkpoint
from gaussfields.cli import main
from gaussfields.image import ImageBuffer, render_image, save_image
from gaussfields.mesh import load_obj


def write_config(path, cfg):
    path.write_text(json.dumps(cfg))
    return str(path)


def sdf_config(tmp_path, steps=3, **overrides):
    cfg = {
        "task": "sdf",
        "seed": 1,
        "encoder": {"levels": 4, "n_min": 4, "n_max": 16, "table_size_log2": 10},
        "decoder": {"kernels": 8},
        "fit": {"steps": steps, "batch_size": 64},
        "sdf": {"shape": {"kind": "sphere", "center": [0.5, 0.5, 0.5], "radius": 0.3}},
        "output": {"checkpoint": str(tmp_path / "model.gnf"),
                   "history_csv": str(tmp_path / "hist.csv")},
    }
    cfg.update(overrides)
    return write_config(tmp_path / "cfg.json", cfg)


def image_config(tmp_path, image_path, steps=3):
    cfg = {
        "task": "image",
        "seed": 1,
        "encoder": {"levels": 4, "n_min": 4, "n_max": 32, "table_size_log2": 10},
        "decoder": {"kernels": 8},
        "fit": {"steps": steps, "batch_size": 128},
        "image": {"path": str(image_path)},
        "output": {"checkpoint": str(tmp_path / "img.gnf")},
    }
    return write_config(tmp_path / "img_cfg.json", cfg)


class TestCheckpoint:
    def test_roundtrip_bit_identical(self, tmp_path):
        cfg = GridConfig(dim=3, levels=3, n_min=4, n_max=16, table_size=2 ** 9)
        model = build_model("sdf", cfg, n_kernels=8, seed=3)
        path = tmp_path / "model.gnf"
        save_checkpoint(path, model, step=17)
        loaded, step = load_checkpoint(path)
        assert step == 17
        assert loaded.task == "sdf"
        assert np.array_equal(loaded.grid.codes, model.grid.codes)
        assert np.array_equal(loaded.layer.mu, model.layer.mu)
        assert np.array_equal(loaded.layer.rho, model.layer.rho)
        assert np.array_equal(loaded.layer.w, model.layer.w)
        # save again: byte-identical file
        path2 = tmp_path / "model2.gnf"
        save_checkpoint(path2, loaded, step=17)
        assert path.read_bytes() == path2.read_bytes()

    def test_render_before_and_after_roundtrip(self, tmp_path):
        cfg = GridConfig(dim=2, levels=3, n_min=4, n_max=16, table_size=2 ** 9)
        model = build_model("image", cfg, n_kernels=8, seed=5)
        before = render_image(model, 16, 16)
        path = tmp_path / "img.gnf"
        save_checkpoint(path, model)
        loaded, _ = load_checkpoint(path)
        after = render_image(loaded, 16, 16)
        assert np.array_equal(before.data, after.data)

    def test_bad_magic_rejected(self, tmp_path):
        path = tmp_path / "junk.gnf"
        path.write_bytes(b"NOPE" + b"\x00" * 64)
        with pytest.raises(ValueError, match="magic"):
            load_checkpoint(path)


class TestFitCommands:
    def test_fit_sdf_writes_checkpoint_and_history(self, tmp_path, capsys):
        code = main(["fit-sdf", sdf_config(tmp_path, steps=3)])
        assert code == 0
        model, step = load_checkpoint(tmp_path / "model.gnf")
        assert step == 3
        hist = (tmp_path / "hist.csv").read_text().splitlines()
        assert len(hist) == 4

    def test_fit_sdf_zero_steps_checkpoints_init(self, tmp_path):
        code = main(["fit-sdf", sdf_config(tmp_path, steps=0)])
        assert code == 0
        model, step = load_checkpoint(tmp_path / "model.gnf")
        assert step == 0

    def test_unknown_config_key_exit_2(self, tmp_path, capsys):
        path = sdf_config(tmp_path)
        cfg = json.loads(open(path).read())
        cfg["typo_key"] = 1
        code = main(["fit-sdf", write_config(tmp_path / "bad.json", cfg)])
        assert code == 2
        assert "typo_key" in capsys.readouterr().err

    def test_missing_image_exit_2_names_path(self, tmp_path, capsys):
        code = main(["fit-image", image_config(tmp_path, tmp_path / "nope.png")])
        assert code == 2
        assert "nope.png" in capsys.readouterr().err

    def test_wrong_task_for_command_exit_2(self, tmp_path):
        code = main(["fit-image", sdf_config(tmp_path)])
        assert code == 2

    def test_fit_image_runs(self, tmp_path, rng):
        img_path = tmp_path / "target.png"
        save_image(img_path, ImageBuffer(rng.uniform(size=(16, 16, 3))))
        code = main(["fit-image", image_config(tmp_path, img_path, steps=3)])
        assert code == 0
        model, _ = load_checkpoint(tmp_path / "img.gnf")
        assert model.task == "image"

    def test_gnf_seed_env_override(self, tmp_path, monkeypatch):
        path_a = tmp_path / "a"
        path_b = tmp_path / "b"
        path_a.mkdir(), path_b.mkdir()
        monkeypatch.setenv("GNF_SEED", "123")
        main(["fit-sdf", sdf_config(path_a, steps=2)])
        main(["fit-sdf", sdf_config(path_b, steps=2)])
        a = (path_a / "model.gnf").read_bytes()
        b = (path_b / "model.gnf").read_bytes()
        assert a == b
        monkeypatch.setenv("GNF_SEED", "124")
        path_c = tmp_path / "c"
        path_c.mkdir()
        main(["fit-sdf", sdf_config(path_c, steps=2)])
        assert (path_c / "model.gnf").read_bytes() != a


class TestRenderCommand:
    def test_render_sdf_checkpoint_exit_2(self, tmp_path, capsys):
        main(["fit-sdf", sdf_config(tmp_path, steps=1)])
        code = main(["render", str(tmp_path / "model.gnf"),
                     "--out", str(tmp_path / "x.png")])
        assert code == 2
        assert "extract-mesh" in capsys.readouterr().err

    def test_render_image_deterministic_and_levels_flag(self, tmp_path, rng):
        img_path = tmp_path / "target.png"
        save_image(img_path, ImageBuffer(rng.uniform(size=(16, 16, 3))))
        main(["fit-image", image_config(tmp_path, img_path, steps=2)])
        ckpt = str(tmp_path / "img.gnf")
        main(["render", ckpt, "--out", str(tmp_path / "r1.png"),
              "--width", "16", "--height", "16", "--workers", "1"])
        main(["render", ckpt, "--out", str(tmp_path / "r2.png"),
              "--width", "16", "--height", "16", "--workers", "1"])
        assert (tmp_path / "r1.png").read_bytes() == (tmp_path / "r2.png").read_bytes()

        code = main(["render", ckpt, "--out", str(tmp_path / "r_lvl.png"),
                     "--width", "16", "--height", "16", "--levels", "2"])
        assert code == 0
        model, _ = load_checkpoint(ckpt)
        manual = render_image(model, 16, 16, levels=2)
        got = load_image(tmp_path / "r_lvl.png")
        assert np.max(np.abs(got.data - manual.data)) <= 1.0 / 510 + 1e-12


class TestExtractMesh:
    def test_extract_trained_sphere(self, tmp_path):
        cfg = sdf_config(tmp_path, steps=150,
                         fit={"steps": 150, "batch_size": 512})
        main(["fit-sdf", cfg])
        out = tmp_path / "mesh.obj"
        code = main(["extract-mesh", str(tmp_path / "model.gnf"),
                     "--out", str(out), "--resolution", "48"])
        assert code == 0
        mesh = load_obj(out)
        assert not mesh.is_empty

    def test_low_resolution_allowed(self, tmp_path):
        main(["fit-sdf", sdf_config(tmp_path, steps=1)])
        code = main(["extract-mesh", str(tmp_path / "model.gnf"),
                     "--out", str(tmp_path / "m.obj"), "--resolution", "8"])
        assert code == 0

    def test_empty_surface_warns_but_succeeds(self, tmp_path, capsys):
        # untrained model with weights forced positive -> no zero crossing
        cfg = GridConfig(dim=3, levels=2, n_min=4, n_max=8, table_size=2 ** 8)
        model = build_model("sdf", cfg, n_kernels=4, seed=0)
        model.layer.w[:] = 1.0
        model.layer.rho[:] = -10.0  # wide kernels, all responses ~1
        save_checkpoint(tmp_path / "pos.gnf", model)
        code = main(["extract-mesh", str(tmp_path / "pos.gnf"),
                     "--out", str(tmp_path / "empty.obj"), "--resolution", "16"])
        assert code == 0
        assert "empty" in capsys.readouterr().out.lower()
        assert load_obj(tmp_path / "empty.obj").is_empty


class TestBenchGradcheck:
    def test_bench_writes_csv(self, tmp_path, capsys):
        csv_path = tmp_path / "bench.csv"
        code = main(["bench", "--feature-dim", "8", "--width", "8",
                     "--kernels", "8", "--batch", "256", "--repeats", "2",
                     "--csv", str(csv_path)])
        assert code == 0
        lines = csv_path.read_text().splitlines()
        assert lines[0].startswith("model,")
        assert len(lines) == 3

    def test_bench_reference_config_prints_ratios(self, capsys):
        code = main(["bench", "--batch", "10000", "--repeats", "1"])
        assert code == 0
        out = capsys.readouterr().out
        assert "0.505" in out
        assert "NOTE" in out

    def test_bench_rejects_zero_batch(self, capsys):
        assert main(["bench", "--batch", "0"]) == 2

    def test_gradcheck_passes(self, capsys):
        code = main(["gradcheck", "--instances", "3"])
        assert code == 0
        out = capsys.readouterr().out
        assert out.count("[ok]") == 3
