"""Command-line driver.

Exit codes: 0 success, 2 usage error, 3 validation error, 4 numeric failure.
Every option can also be given as an environment variable ``PHYNES_<OPTION>``
(e.g. ``PHYNES_SEED=3``); explicit flags win over the environment, which wins
over ``--config`` JSON values.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

EXIT_OK, EXIT_USAGE, EXIT_VALIDATION, EXIT_NUMERIC = 0, 2, 3, 4
ENV_PREFIX = "PHYNES_"

logger = logging.getLogger("avatarlight")


class ValidationError(Exception):
    pass


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", type=Path, help="JSON file with option values")
    p.add_argument("--seed", type=int, help="random seed (default 0)")
    p.add_argument("--threads", type=int, help="worker threads (default: all available)")
    p.add_argument("--out", type=Path, help="output directory")
    p.add_argument("-v", "--verbose", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    from .synthetic import PRESETS

    parser = argparse.ArgumentParser(prog="avatarlight", description="Neural explicit-surface avatar relighting engine")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen", help="generate a synthetic capsule dataset")
    _add_common(p)
    p.add_argument("--preset", choices=PRESETS)
    p.add_argument("--resolution", type=int)

    for name, helptext in (("train-geo", "stage 1: offset + texture maps"),
                           ("train-mat", "stage 2: albedo, roughness, probes")):
        p = sub.add_parser(name, help=helptext)
        _add_common(p)
        p.add_argument("--dataset", type=Path)
        p.add_argument("--steps", type=int)
        p.add_argument("--resume", type=Path, help="continue from a checkpoint of this stage")
        if name == "train-mat":
            p.add_argument("--stage1", type=Path, help="stage-1 checkpoint")
            p.add_argument("--freeze-probes", action="store_true", default=None)

    p = sub.add_parser("render", help="render frames from a checkpoint")
    _add_common(p)
    p.add_argument("--checkpoint", type=Path)
    p.add_argument("--dataset", type=Path, help="dataset providing body, cameras and poses")
    p.add_argument("--frame", type=int, help="frame index (default: all frames)")
    p.add_argument("--width", type=int)
    p.add_argument("--height", type=int)

    p = sub.add_parser("relight", help="render a checkpoint under a new probe file")
    _add_common(p)
    p.add_argument("--checkpoint", type=Path)
    p.add_argument("--dataset", type=Path)
    p.add_argument("--probes", type=Path)
    p.add_argument("--frame", type=int)
    p.add_argument("--width", type=int)
    p.add_argument("--height", type=int)

    p = sub.add_parser("eval", help="compare predictions with a ground-truth dataset")
    _add_common(p)
    p.add_argument("--pred", type=Path, help="prediction directory (images/, optional meshes/)")
    p.add_argument("--gt", type=Path, help="ground-truth dataset directory")

    p = sub.add_parser("check", help="run the built-in oracle and gradient checks")
    _add_common(p)
    return parser


def resolve_options(parser: argparse.ArgumentParser, argv) -> argparse.Namespace:
    """Parse flags, then fill unset ones from PHYNES_* variables and --config JSON."""
    args = parser.parse_args(argv)
    sub = next(a for a in parser._actions if isinstance(a, argparse._SubParsersAction)).choices[args.command]
    config = {}
    cfg_path = args.config or (Path(os.environ[ENV_PREFIX + "CONFIG"]) if ENV_PREFIX + "CONFIG" in os.environ else None)
    if cfg_path is not None:
        try:
            config = json.loads(Path(cfg_path).read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError) as exc:
            raise ValidationError(f"cannot read config {cfg_path}: {exc}") from exc
        if not isinstance(config, dict):
            raise ValidationError("config file must hold a JSON object")
        args.config = Path(cfg_path)
    args.extra = {}
    dests = {a.dest: a for a in sub._actions if a.dest not in ("help",)}
    for dest, action in dests.items():
        if getattr(args, dest, None) is not None:
            continue
        env = os.environ.get(ENV_PREFIX + dest.upper())
        if env is not None:
            value = env
        elif dest in config or dest.replace("_", "-") in config:
            value = config.get(dest, config.get(dest.replace("_", "-")))
        else:
            continue
        try:
            if isinstance(action, argparse._StoreTrueAction):
                value = value if isinstance(value, bool) else str(value).lower() in ("1", "true", "yes", "on")
            elif action.type is not None and not isinstance(value, bool):
                value = action.type(value)
        except (TypeError, ValueError) as exc:
            raise ValidationError(f"bad value for {dest}: {value!r}") from exc
        if action.choices is not None and value not in action.choices:
            parser.error(f"argument --{dest}: invalid choice {value!r}")
        setattr(args, dest, value)
    # options not mapped to flags (training hyperparameters) pass through from the config
    args.extra = {k: v for k, v in config.items() if k.replace("-", "_") not in dests}
    if args.seed is None:
        args.seed = 0
    return args


def _require(args, *names):
    missing = [n for n in names if getattr(args, n, None) is None]
    if missing:
        raise ValidationError("missing required option(s): " + ", ".join("--" + n.replace("_", "-") for n in missing))


def _set_threads(n) -> None:
    import numba
    avail = numba.config.NUMBA_NUM_THREADS
    numba.set_num_threads(max(1, min(int(n), avail)) if n else avail)


def _options_echo(args) -> dict:
    out = {}
    for k, v in vars(args).items():
        out[k] = str(v) if isinstance(v, Path) else v
    return out


def _file_hash(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _write_run_manifest(out: Path, args, extra: dict | None = None) -> None:
    out.mkdir(parents=True, exist_ok=True)
    data = {"command": args.command, "options": _options_echo(args), **(extra or {})}
    (out / "run_manifest.json").write_text(json.dumps(data, indent=1, sort_keys=True, default=str), encoding="utf-8")


# --- commands ----------------------------------------------------------------------

def cmd_gen(args) -> int:
    from .synthetic import RESOLUTION, generate_synthetic
    _require(args, "preset", "out")
    manifest = generate_synthetic(args.out, args.preset, args.seed, args.resolution or RESOLUTION)
    digest = hashlib.sha256()
    for fr in manifest["frames"]:
        digest.update((args.out / fr["image"]).read_bytes())
    print(f"preset {args.preset}  seed {args.seed}  frames {len(manifest['frames'])}  "
          f"resolution {manifest['resolution']}  images sha256 {digest.hexdigest()[:16]}")
    return EXIT_OK


def _train_config(args, stage: str):
    from .train import TrainConfig
    opts = dict(args.extra)
    opts.update(stage=stage, seed=args.seed)
    if args.steps is not None:
        opts["steps"] = args.steps
    if getattr(args, "freeze_probes", None):
        opts["freeze_probes"] = True
    return TrainConfig.from_dict(opts)


def cmd_train_geo(args) -> int:
    from .checkpoint import load_checkpoint
    from .dataset import load_dataset
    from .train import train_stage1
    _require(args, "dataset", "out")
    ds = load_dataset(args.dataset)
    cfg = _train_config(args, "geo")
    init = load_checkpoint(args.resume) if args.resume else None
    res = train_stage1(ds, cfg, args.out, init, progress=lambda h: print(
        f"step {h['step']:5d}  loss {h['loss']:.4e}  mse {h['mse']:.4e}  beta {h['beta']:.4f}", flush=True))
    _write_run_manifest(args.out, args, {"config": cfg.to_dict(), "dataset_hash": res.manifest["dataset_hash"]})
    print(f"wrote {args.out / 'stage1.ckpt'}")
    return EXIT_OK


def cmd_train_mat(args) -> int:
    from .checkpoint import load_checkpoint
    from .dataset import load_dataset
    from .train import train_stage2
    _require(args, "dataset", "out", "stage1")
    ds = load_dataset(args.dataset)
    stage1 = load_checkpoint(args.stage1)
    cfg = _train_config(args, "mat")
    init = load_checkpoint(args.resume) if args.resume else None
    res = train_stage2(ds, stage1, cfg, args.out, init, progress=lambda h: print(
        f"step {h['step']:5d}  loss {h['loss']:.4e}  material {h['material']:.4e}", flush=True))
    _write_run_manifest(args.out, args, {"config": cfg.to_dict(), "dataset_hash": res.manifest["dataset_hash"],
                                         "stage1_sha256": _file_hash(args.stage1)})
    print(f"wrote {args.out / 'stage2.ckpt'}")
    return EXIT_OK


def _frame_name(fr) -> str:
    return Path(fr.image_path).stem


def _render_frames(args, probes_override=None) -> int:
    from .checkpoint import load_checkpoint
    from .dataset import load_dataset
    from .imageio import write_pfm, write_png
    from .pbr import ProbeError, render_pbr, save_probes
    from .train import probes_from_checkpoint
    from .volume import render_image_stage1

    _require(args, "checkpoint", "dataset", "out")
    ckpt = load_checkpoint(args.checkpoint)
    ds = load_dataset(args.dataset)
    if args.frame is not None and not 0 <= args.frame < len(ds.frames):
        raise ValidationError(f"frame {args.frame} out of range (dataset has {len(ds.frames)})")
    frames = [args.frame] if args.frame is not None else range(len(ds.frames))
    out = args.out
    (out / "images").mkdir(parents=True, exist_ok=True)
    specular = bool(ckpt.meta.get("specular", ds.manifest.get("specular", True)))
    pbr = "alb" in ckpt.maps and "rgh" in ckpt.maps
    if probes_override is not None and not pbr:
        raise ValidationError("relighting needs a stage-2 checkpoint (albedo/roughness maps)")
    probes = None
    if pbr:
        probes = probes_from_checkpoint(ckpt)
        if probes_override is not None:
            if probes_override.n != probes.n:
                raise ProbeError(f"probe count mismatch: checkpoint has {probes.n}, file has {probes_override.n}")
            probes = probes_override
    geo = ckpt.maps["geo"]
    width, height = args.width, args.height
    if (width is None) != (height is None):
        raise ValidationError("--width and --height must be given together")
    for i in frames:
        fr = ds.frames[i]
        name = _frame_name(fr)
        cam = fr.camera if width is None else fr.camera.scaled(width, height)
        if pbr:
            imgs = render_pbr(cam, ds.body, fr.pose, geo, ckpt.maps["alb"], ckpt.maps["rgh"], probes, specular)
            write_pfm(out / "images" / f"{name}.pfm", imgs.radiance)
            write_png(out / "images" / f"{name}.png", imgs.radiance)
            aux = out / "aux"
            aux.mkdir(exist_ok=True)
            write_pfm(aux / f"{name}_albedo.pfm", imgs.albedo)
            write_pfm(aux / f"{name}_roughness.pfm", imgs.roughness)
            write_pfm(aux / f"{name}_visibility.pfm", imgs.visibility)
            write_pfm(aux / f"{name}_normal.pfm", np.where(imgs.mask[..., None], (imgs.normal + 1) / 2, 0.0))
        else:
            beta = float(ckpt.tensors.get("beta", np.array([0.05]))[0])
            rgb, _ = render_image_stage1(cam, ds.body, geo, ckpt.maps["dtx"], fr.pose, beta)
            write_pfm(out / "images" / f"{name}.pfm", rgb)
            write_png(out / "images" / f"{name}.png", rgb)
    if pbr:
        # the exact probes used, so a relight with this file reproduces the render
        save_probes(probes, out / "probes.json")
    _write_meshes(out, ds, geo)
    _write_run_manifest(out, args, {"checkpoint_sha256": _file_hash(args.checkpoint), "frames": list(frames)})
    print(f"rendered {len(frames)} frame(s) to {out}")
    return EXIT_OK


def _write_meshes(out: Path, ds, geo) -> None:
    from .body import deform
    (out / "meshes").mkdir(parents=True, exist_ok=True)
    for p, pose in enumerate(ds.poses):
        mesh = deform(ds.body, pose, geo)
        (out / "meshes" / f"mesh_pose{p}.json").write_text(
            json.dumps({"vertices": mesh.vertices.tolist(), "faces": mesh.faces.tolist()}), encoding="utf-8")


def cmd_render(args) -> int:
    return _render_frames(args)


def cmd_relight(args) -> int:
    from .pbr import load_probes
    _require(args, "probes")
    return _render_frames(args, load_probes(args.probes))


def cmd_eval(args) -> int:
    from .dataset import load_dataset
    from .imageio import read_pfm
    from .metrics import chamfer_p2s, psnr, scale_align, ssim
    from .synthetic import load_gt_mesh
    _require(args, "pred", "gt", "out")
    ds = load_dataset(args.gt)
    rows = []
    for fr in ds.frames:
        name = _frame_name(fr)
        p = args.pred / "images" / f"{name}.pfm"
        if not p.is_file():
            raise ValidationError(f"prediction {p} missing")
        pred = read_pfm(p).astype(np.float64)
        gt = fr.image
        if pred.shape != gt.shape:
            raise ValidationError(f"{p}: shape {pred.shape} differs from ground truth {gt.shape}")
        aligned, k = scale_align(pred, gt, fr.mask)
        rows.append({"frame": name, "psnr": psnr(pred, gt), "ssim": ssim(pred, gt),
                     "psnr_aligned": psnr(aligned, gt), "ssim_aligned": ssim(aligned, gt),
                     "scale": k.tolist()})
    result = {"frames": rows}
    for key in ("psnr", "ssim", "psnr_aligned", "ssim_aligned"):
        result[f"mean_{key}"] = float(np.mean([r[key] for r in rows]))
    geom = []
    for p, rel in enumerate(ds.manifest.get("gt", {}).get("meshes", [])):
        name = Path(rel).name
        cand = [args.pred / "meshes" / name, args.pred / "gt" / name]
        found = next((c for c in cand if c.is_file()), None)
        if found is None:
            continue
        cd, p2s = chamfer_p2s(load_gt_mesh(found), load_gt_mesh(ds.root / rel), seed=args.seed)
        geom.append({"pose": p, "chamfer": cd, "p2s": p2s})
    if geom:
        result["geometry"] = geom
        result["mean_chamfer"] = float(np.mean([g["chamfer"] for g in geom]))
        result["mean_p2s"] = float(np.mean([g["p2s"] for g in geom]))
    result["note"] = "SSIM stands in for LPIPS"
    args.out.mkdir(parents=True, exist_ok=True)
    (args.out / "metrics.json").write_text(json.dumps(result, indent=1), encoding="utf-8")
    print(f"mean PSNR {result['mean_psnr']:.2f} dB (aligned {result['mean_psnr_aligned']:.2f})  "
          f"mean SSIM {result['mean_ssim']:.4f}" + (f"  CD {result['mean_chamfer']:.3e} m" if geom else ""))
    return EXIT_OK


def cmd_check(args) -> int:
    from .selfcheck import run_checks
    results = run_checks(seed=args.seed)
    ok = True
    for name, passed, detail in results:
        ok &= passed
        print(f"[{'PASS' if passed else 'FAIL'}] {name}: {detail}")
    if args.out is not None:
        args.out.mkdir(parents=True, exist_ok=True)
        (args.out / "check.json").write_text(json.dumps(
            [{"name": n, "passed": bool(p), "detail": d} for n, p, d in results], indent=1), encoding="utf-8")
    return EXIT_OK if ok else EXIT_VALIDATION


COMMANDS = {"gen": cmd_gen, "train-geo": cmd_train_geo, "train-mat": cmd_train_mat, "render": cmd_render,
            "relight": cmd_relight, "eval": cmd_eval, "check": cmd_check}


def main(argv=None) -> int:
    from .body import BodyFormatError, MeshValidationError
    from .checkpoint import CheckpointError
    from .dataset import DatasetError
    from .pbr import ProbeError
    from .synthetic import PresetError
    from .train import NumericError, TrainingError

    parser = build_parser()
    try:
        args = resolve_options(parser, argv)
    except ValidationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except SystemExit as exc:
        return int(exc.code) if isinstance(exc.code, int) else EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    _set_threads(args.threads)
    try:
        return COMMANDS[args.command](args)
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ValidationError, DatasetError, ProbeError, CheckpointError, BodyFormatError, MeshValidationError,
            PresetError, TrainingError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION


if __name__ == "__main__":
    sys.exit(main())
