"""Command-line entry point: fit-sdf, fit-image, fit-radiance, render,
extract-mesh, bench, gradcheck.

Configs are strict JSON: unknown keys are rejected with the offending path.
Exit codes: 0 ok, 1 check failure, 2 usage/config error, 3 numeric abort.
The GNF_SEED environment variable overrides the config seed.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import time

import numpy as np

from . import flops as flops_mod
from . import gradcheck as gradcheck_mod
from .checkpoint import load_checkpoint, save_checkpoint
from .grid import GridConfig
from .image import load_image, render_image, save_image
from .mesh import save_obj, save_ply
from .model import build_model, default_grid_config
from .numerics import Rng
from .radiance import (
    RadianceFitConfig,
    ToyScene,
    fit_radiance,
    load_scene,
    render_view,
    save_poses,
    toy_scene_views,
    two_sphere_scene,
)
from .sdf import make_oracle, marching_cubes
from .training import (
    FitConfig,
    TrainingDiverged,
    fit,
    sample_pixels,
    sample_sdf_points,
    write_history_csv,
)

EXIT_OK = 0
EXIT_CHECK_FAILED = 1
EXIT_USAGE = 2
EXIT_NUMERIC = 3


class ConfigError(Exception):
    pass


def _check_keys(obj: dict, allowed: set, required: set, path: str):
    if not isinstance(obj, dict):
        raise ConfigError(f"{path}: expected an object")
    for key in obj:
        if key not in allowed:
            raise ConfigError(f"{path}.{key}: unknown key")
    for key in required:
        if key not in obj:
            raise ConfigError(f"{path}.{key}: missing required key")


def _get(obj, key, typ, path, default=None):
    if key not in obj:
        return default
    val = obj[key]
    if typ is float and isinstance(val, int):
        val = float(val)
    if not isinstance(val, typ):
        raise ConfigError(f"{path}.{key}: expected {typ.__name__}")
    return val


def load_config(path: str) -> dict:
    try:
        with open(path) as fh:
            cfg = json.load(fh)
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}")
    except json.JSONDecodeError as e:
        raise ConfigError(f"{path}: invalid JSON ({e})")
    _check_keys(
        cfg,
        allowed={"task", "seed", "encoder", "decoder", "fit", "sdf", "image",
                 "radiance", "output"},
        required={"task"},
        path="config",
    )
    task = _get(cfg, "task", str, "config")
    if task not in ("sdf", "image", "radiance"):
        raise ConfigError(f"config.task: must be sdf, image or radiance, got {task!r}")
    if task not in cfg:
        raise ConfigError(f"config.{task}: missing section for task {task!r}")
    for section in ("sdf", "image", "radiance"):
        if section in cfg and section != task:
            raise ConfigError(f"config.{section}: does not belong to task {task!r}")
    return cfg


def _grid_config(cfg: dict, task: str, image_side: int = 256) -> GridConfig:
    base = default_grid_config(task, image_side=image_side)
    section = cfg.get("encoder", {})
    _check_keys(
        section,
        allowed={"levels", "n_min", "n_max", "features_per_level", "table_size_log2"},
        required=set(),
        path="config.encoder",
    )
    try:
        return GridConfig(
            dim=base.dim,
            levels=_get(section, "levels", int, "config.encoder", base.levels),
            n_min=_get(section, "n_min", int, "config.encoder", base.n_min),
            n_max=_get(section, "n_max", int, "config.encoder", base.n_max),
            features_per_level=_get(section, "features_per_level", int,
                                    "config.encoder", base.features_per_level),
            table_size=2 ** _get(section, "table_size_log2", int,
                                 "config.encoder", 19),
        )
    except ValueError as e:
        raise ConfigError(f"config.encoder: {e}")


def _decoder_config(cfg: dict, task: str) -> tuple[int, bool]:
    section = cfg.get("decoder", {})
    _check_keys(section, allowed={"kernels", "mode"}, required=set(),
                path="config.decoder")
    kernels = _get(section, "kernels", int, "config.decoder", 64)
    mode = _get(section, "mode", str, "config.decoder",
                "anisotropic" if task == "radiance" else "spherical")
    if mode not in ("spherical", "anisotropic"):
        raise ConfigError(
            f"config.decoder.mode: expected spherical or anisotropic, got {mode!r}"
        )
    if kernels < 1:
        raise ConfigError("config.decoder.kernels: must be >= 1")
    return kernels, mode == "spherical"


def _fit_config(cfg: dict, task: str, seed: int) -> FitConfig:
    section = cfg.get("fit", {})
    _check_keys(
        section,
        allowed={"steps", "batch_size", "epsilon", "lr_tables", "lr_decoder",
                 "decay_factor", "warmup_steps", "checkpoint_every",
                 "rays_per_batch", "samples_per_ray"},
        required=set(),
        path="config.fit",
    )
    defaults = FitConfig(task=task)
    steps = {"sdf": 20000, "image": 10000, "radiance": 3000}[task]
    return FitConfig(
        steps=_get(section, "steps", int, "config.fit", steps),
        batch_size=_get(section, "batch_size", int, "config.fit", defaults.batch_size),
        epsilon=_get(section, "epsilon", float, "config.fit", defaults.epsilon),
        seed=seed,
        task=task,
        lr_tables=_get(section, "lr_tables", float, "config.fit", defaults.lr_tables),
        lr_decoder=_get(section, "lr_decoder", float, "config.fit", defaults.lr_decoder),
        decay_factor=_get(section, "decay_factor", float, "config.fit",
                          defaults.decay_factor),
        warmup_steps=_get(section, "warmup_steps", int, "config.fit",
                          defaults.warmup_steps),
        checkpoint_every=_get(section, "checkpoint_every", int, "config.fit", 0),
    )


def _resolve_seed(cfg: dict) -> int:
    env = os.environ.get("GNF_SEED")
    if env is not None:
        try:
            return int(env)
        except ValueError:
            raise ConfigError(f"GNF_SEED: not an integer: {env!r}")
    return _get(cfg, "seed", int, "config", 0)


def _output_paths(cfg: dict) -> dict:
    section = cfg.get("output", {})
    _check_keys(section, allowed={"checkpoint", "history_csv", "poses"},
                required=set(), path="config.output")
    return {
        "checkpoint": _get(section, "checkpoint", str, "config.output",
                           "model.gnf"),
        "history_csv": _get(section, "history_csv", str, "config.output", None),
        "poses": _get(section, "poses", str, "config.output", None),
    }


# ---------------------------------------------------------------------------
# fit commands

def cmd_fit_sdf(args) -> int:
    cfg = load_config(args.config)
    if cfg["task"] != "sdf":
        raise ConfigError(f"config.task: expected sdf, got {cfg['task']!r}")
    section = cfg["sdf"]
    _check_keys(section, allowed={"shape"}, required={"shape"}, path="config.sdf")
    try:
        oracle = make_oracle(section["shape"])
    except (ValueError, KeyError, TypeError) as e:
        raise ConfigError(f"config.sdf.shape: {e}")
    except FileNotFoundError as e:
        raise ConfigError(f"config.sdf.shape.path: {e}")

    seed = _resolve_seed(cfg)
    grid_cfg = _grid_config(cfg, "sdf")
    kernels, spherical = _decoder_config(cfg, "sdf")
    fit_cfg = _fit_config(cfg, "sdf", seed)
    out = _output_paths(cfg)

    seeds = oracle.surface_samples(kernels, Rng(seed).substream("center-seeds"))
    model = build_model("sdf", grid_cfg, kernels, seed, spherical=spherical,
                        seed_points=seeds)

    def sampler(rng, step):
        return sample_sdf_points(oracle, fit_cfg.batch_size,
                                 rng.substream(f"step-{step}"))

    t0 = time.perf_counter()
    model, history = fit(model, sampler, fit_cfg)
    wall = time.perf_counter() - t0
    save_checkpoint(out["checkpoint"], model, fit_cfg.steps)
    if out["history_csv"]:
        write_history_csv(out["history_csv"], history)
    final = history[-1][1] if history else float("nan")
    print(f"fit-sdf: {fit_cfg.steps} steps in {wall:.1f}s, final loss {final:.4g}")
    print(f"checkpoint written to {out['checkpoint']}")
    return EXIT_OK


def cmd_fit_image(args) -> int:
    cfg = load_config(args.config)
    if cfg["task"] != "image":
        raise ConfigError(f"config.task: expected image, got {cfg['task']!r}")
    section = cfg["image"]
    _check_keys(section, allowed={"path"}, required={"path"}, path="config.image")
    path = section["path"]
    if not os.path.exists(path):
        raise ConfigError(f"config.image.path: file not found: {path}")
    image = load_image(path)

    seed = _resolve_seed(cfg)
    grid_cfg = _grid_config(cfg, "image", image_side=max(image.width, image.height))
    kernels, spherical = _decoder_config(cfg, "image")
    fit_cfg = _fit_config(cfg, "image", seed)
    out = _output_paths(cfg)

    # kernel centers seeded on a regular pixel lattice
    side = int(np.ceil(np.sqrt(kernels)))
    gx, gy = np.meshgrid(
        (np.arange(side) + 0.5) / side, (np.arange(side) + 0.5) / side
    )
    seeds = np.stack([gx.ravel(), gy.ravel()], axis=1)[:kernels]
    model = build_model("image", grid_cfg, kernels, seed, spherical=spherical,
                        seed_points=seeds)

    def sampler(rng, step):
        return sample_pixels(image, fit_cfg.batch_size, rng.substream(f"step-{step}"))

    t0 = time.perf_counter()
    model, history = fit(model, sampler, fit_cfg)
    wall = time.perf_counter() - t0
    save_checkpoint(out["checkpoint"], model, fit_cfg.steps)
    if out["history_csv"]:
        write_history_csv(out["history_csv"], history)
    final = history[-1][1] if history else float("nan")
    print(f"fit-image: {fit_cfg.steps} steps in {wall:.1f}s, final loss {final:.4g}")
    print(f"checkpoint written to {out['checkpoint']}")
    return EXIT_OK


def _scene_from_config(section: dict) -> ToyScene:
    _check_keys(
        section,
        allowed={"scene", "scene_path", "samples_per_ray", "rays_per_batch",
                 "gt_seed"},
        required=set(),
        path="config.radiance",
    )
    if "scene" in section and "scene_path" in section:
        raise ConfigError("config.radiance: give either scene or scene_path")
    if "scene_path" in section:
        path = section["scene_path"]
        if not os.path.exists(path):
            raise ConfigError(f"config.radiance.scene_path: file not found: {path}")
        return load_scene(path)
    if "scene" in section:
        try:
            return ToyScene.from_dict(section["scene"])
        except (KeyError, TypeError, ValueError) as e:
            raise ConfigError(f"config.radiance.scene: {e}")
    return two_sphere_scene()


def cmd_fit_radiance(args) -> int:
    cfg = load_config(args.config)
    if cfg["task"] != "radiance":
        raise ConfigError(f"config.task: expected radiance, got {cfg['task']!r}")
    section = cfg["radiance"]
    scene = _scene_from_config(section)
    seed = _resolve_seed(cfg)
    grid_cfg = _grid_config(cfg, "radiance")
    kernels, spherical = _decoder_config(cfg, "radiance")
    fit_cfg = _fit_config(cfg, "radiance", seed)
    out = _output_paths(cfg)
    rcfg = RadianceFitConfig(
        steps=fit_cfg.steps,
        rays_per_batch=_get(section, "rays_per_batch", int, "config.radiance", 512),
        samples_per_ray=_get(section, "samples_per_ray", int, "config.radiance", 64),
        seed=seed,
        lr_tables=fit_cfg.lr_tables,
        lr_decoder=fit_cfg.lr_decoder,
        decay_factor=fit_cfg.decay_factor,
        warmup_steps=fit_cfg.warmup_steps,
    )

    gt_seed = _get(section, "gt_seed", int, "config.radiance", 0)
    print("rendering ground-truth views...")
    train_views, test_views = toy_scene_views(scene, seed=gt_seed)
    model = build_model("radiance", grid_cfg, kernels, seed, spherical=spherical)

    t0 = time.perf_counter()
    model, history = fit_radiance(model, train_views, scene, rcfg)
    wall = time.perf_counter() - t0
    save_checkpoint(out["checkpoint"], model, rcfg.steps)
    if out["history_csv"]:
        write_history_csv(out["history_csv"], history)
    if out["poses"]:
        save_poses(out["poses"], scene.cameras())
    final = history[-1][1] if history else float("nan")
    print(f"fit-radiance: {rcfg.steps} steps in {wall:.1f}s, final loss {final:.4g}")
    print(f"checkpoint written to {out['checkpoint']}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# render / extract

def cmd_render(args) -> int:
    model, step = load_checkpoint(args.checkpoint)
    if model.task == "sdf":
        print("render: SDF checkpoints have no image; use extract-mesh",
              file=sys.stderr)
        return EXIT_USAGE
    t0 = time.perf_counter()
    if model.task == "image":
        img = render_image(model, args.width, args.height, levels=args.levels,
                           workers=args.workers)
    else:
        scene = load_scene(args.scene) if args.scene else two_sphere_scene()
        cams = scene.cameras()
        if not 0 <= args.view < len(cams):
            print(f"render: view index {args.view} out of range", file=sys.stderr)
            return EXIT_USAGE
        near, far = scene.near_far()
        img = render_view(model, cams[args.view], args.samples, near, far,
                          scene.background, seed=args.seed)
    wall = time.perf_counter() - t0
    save_image(args.out, img)
    pixels = img.width * img.height
    print(f"rendered {img.width}x{img.height} in {wall:.2f}s "
          f"({pixels / wall:.3g} pixels/sec)")
    return EXIT_OK


def cmd_extract_mesh(args) -> int:
    model, step = load_checkpoint(args.checkpoint)
    if model.task != "sdf":
        print("extract-mesh: checkpoint is not an SDF model", file=sys.stderr)
        return EXIT_USAGE

    def field(points):
        return model.query(points, levels=args.levels)[:, 0]

    mesh = marching_cubes(field, args.resolution, iso=args.iso)
    if str(args.out).endswith(".ply"):
        save_ply(args.out, mesh)
    else:
        save_obj(args.out, mesh)
    if mesh.is_empty:
        print("warning: no surface crossed the iso level; wrote empty mesh")
        return EXIT_OK
    print(f"extracted {len(mesh.faces)} triangles "
          f"(watertight: {mesh.is_watertight()}) -> {args.out}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# bench / gradcheck

def cmd_bench(args) -> int:
    if args.batch <= 0:
        print("bench: batch must be positive", file=sys.stderr)
        return EXIT_USAGE
    rows = flops_mod.bench_rows(
        feature_dim=args.feature_dim, width=args.width, n_kernels=args.kernels,
        batch=args.batch, repeats=args.repeats, seed=args.seed,
        workers=args.workers,
    )
    print(flops_mod.bench_table(rows))
    if args.csv:
        with open(args.csv, "w") as fh:
            fh.write(flops_mod.bench_csv(rows))
        print(f"csv written to {args.csv}")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    results = gradcheck_mod.run_all(instances=args.instances, seed=args.seed)
    failed = [r for r in results if not r.passed]
    for r in results:
        status = "ok" if r.passed else "FAIL"
        print(f"{r.name:<12} {r.instances} instances  worst rel err "
              f"{r.worst_rel_err:.3e} at {r.worst_param}  [{status}]")
    if failed:
        worst = max(failed, key=lambda r: r.worst_rel_err)
        print(f"gradcheck failed: worst offender {worst.worst_param} "
              f"(rel err {worst.worst_rel_err:.3e} > {gradcheck_mod.TOLERANCE})",
              file=sys.stderr)
        return EXIT_CHECK_FAILED
    return EXIT_OK


# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="gaussfields",
        description="Hash-grid neural fields with a Gaussian kernel decoder",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    for name, fn in (("fit-sdf", cmd_fit_sdf), ("fit-image", cmd_fit_image),
                     ("fit-radiance", cmd_fit_radiance)):
        p = sub.add_parser(name, help=f"train a {name.split('-')[1]} model")
        p.add_argument("config", help="JSON run config")
        p.set_defaults(fn=fn)

    p = sub.add_parser("render", help="render an image or radiance checkpoint")
    p.add_argument("checkpoint")
    p.add_argument("--out", required=True)
    p.add_argument("--width", type=int, default=256)
    p.add_argument("--height", type=int, default=256)
    p.add_argument("--levels", type=int, default=None,
                   help="decode only the first K encoder levels")
    p.add_argument("--scene", default=None, help="scene JSON for radiance views")
    p.add_argument("--view", type=int, default=0)
    p.add_argument("--samples", type=int, default=64)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--workers", type=int, default=os.cpu_count() or 1)
    p.set_defaults(fn=cmd_render)

    p = sub.add_parser("extract-mesh", help="marching cubes on an SDF checkpoint")
    p.add_argument("checkpoint")
    p.add_argument("--out", required=True, help=".obj or .ply")
    p.add_argument("--resolution", type=int, default=256)
    p.add_argument("--iso", type=float, default=0.0)
    p.add_argument("--levels", type=int, default=None)
    p.set_defaults(fn=cmd_extract_mesh)

    p = sub.add_parser("bench", help="FLOP formulas, counted ops, throughput")
    p.add_argument("--feature-dim", type=int, default=flops_mod.REF_F)
    p.add_argument("--width", type=int, default=flops_mod.REF_W)
    p.add_argument("--kernels", type=int, default=flops_mod.REF_N)
    p.add_argument("--batch", type=int, default=flops_mod.REF_B)
    p.add_argument("--repeats", type=int, default=9)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--csv", default=None)
    p.add_argument("--workers", type=int, default=1)
    p.set_defaults(fn=cmd_bench)

    p = sub.add_parser("gradcheck", help="finite-difference gradient suites")
    p.add_argument("--instances", type=int, default=20)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(fn=cmd_gradcheck)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except FileNotFoundError as e:
        print(f"file not found: {e}", file=sys.stderr)
        return EXIT_USAGE
    except ValueError as e:
        print(f"invalid input: {e}", file=sys.stderr)
        return EXIT_USAGE
    except TrainingDiverged as e:
        print(f"numeric abort: {e}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
