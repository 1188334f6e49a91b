"""Command-line surface for the matching pipeline.

Subcommands: synth-data, build-dataset, train, sample, distill-mask, match,
eval, ablate, baseline. Every command validates its inputs, writes outputs
atomically, and exits 0 on success, 2 on usage errors, 3 on data errors, and
4 on numerical failures, printing one machine-parsable JSON error line to
stderr on the way out.
"""

from __future__ import annotations

import argparse
import json
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from . import formats
from .config import RunConfig, load_config
from .distill import (
    ABLATION_MODES,
    MASK_KINDS,
    distill_mask,
    ini_zoomout_match,
    zero_shot_match,
)
from .errors import (
    ConfigError,
    ConvergenceFailure,
    NonFinite,
    SingularSystem,
    SpecmatchError,
)
from .fmap import geodesic_error
from .mesh import load_mesh, save_off
from .sgm import MapDataset, load_checkpoint, sample, save_checkpoint, train_denoiser
from .synth import deform, make_template, maps_from_meshes, template_basis

USAGE_EXIT, DATA_EXIT, NUMERIC_EXIT = 2, 3, 4
_NUMERIC_ERRORS = (ConvergenceFailure, SingularSystem, NonFinite)


def _fail(code: int, exc: BaseException) -> int:
    line = json.dumps({"error": type(exc).__name__, "message": str(exc)})
    print(line, file=sys.stderr)
    return code


def _config_from(args) -> RunConfig:
    cfg = load_config(getattr(args, "config", None), getattr(args, "set", None) or ())
    if getattr(args, "seed", None) is not None:
        cfg = RunConfig(zeroshot=cfg.zeroshot, denoiser=cfg.denoiser,
                        schedule=cfg.schedule, deform=cfg.deform,
                        train=cfg.train, seed=args.seed)
    return cfg


def _pair_seed(seed: int, index: int) -> int:
    return int(np.random.SeedSequence((seed, index)).generate_state(1)[0])


# -- synth-data ------------------------------------------------------------------

def cmd_synth_data(args) -> int:
    cfg = _config_from(args)
    dc = cfg.deform
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    template = make_template(dc.kind, dc.level)
    basis = template_basis(template, 13)
    save_off(template, out / "template.off")
    files, seeds = [], []
    for i in range(args.count):
        shape = deform(template, dc, i, basis=basis)
        name = f"shape_{i:04d}.off"
        save_off(shape, out / name)
        files.append(name)
        seeds.append(i)
    formats.write_pmap(out / "gt_identity.pmap", np.arange(template.n_vertices))
    manifest = {
        "template": {"kind": dc.kind, "level": dc.level},
        "epsilon": dc.epsilon,
        "modes": dc.modes,
        "seed": dc.seed,
        "count": args.count,
        "n_vertices": template.n_vertices,
        "template_file": "template.off",
        "files": files,
        "shape_seeds": seeds,
        "gt_identity": "gt_identity.pmap",
    }
    formats.write_json(out / "manifest.json", manifest)
    print(f"wrote {args.count} shapes to {out}")
    return 0


# -- build-dataset ----------------------------------------------------------------

def cmd_build_dataset(args) -> int:
    manifest = formats.read_json(args.manifest)
    root = Path(args.manifest).parent
    out = Path(args.out)
    (out / "maps").mkdir(parents=True, exist_ok=True)
    template = load_mesh(root / manifest["template_file"])
    shapes = (load_mesh(root / f) for f in manifest["files"])
    ds = maps_from_meshes(
        template, shapes, args.k,
        absolute=not args.signed,
        sign_augment=args.sign_augment,
        seed=manifest.get("seed", 0),
    )
    names = []
    for i in range(len(ds)):
        name = f"maps/map_{i:04d}.fmat"
        formats.write_fmat(out / name, ds.maps[i])
        names.append(name)
    meta = dict(ds.manifest)
    meta.update({
        "source_manifest": str(args.manifest),
        "k": args.k,
        "maps": names,
    })
    formats.write_json(out / "dataset.json", meta)
    print(f"wrote {len(ds)} maps of order {args.k} to {out}")
    return 0


def _load_dataset(path) -> MapDataset:
    meta = formats.read_json(path)
    root = Path(path).parent
    maps = np.stack([formats.read_fmat(root / name) for name in meta["maps"]])
    return MapDataset(maps, meta)


# -- train -----------------------------------------------------------------------

def cmd_train(args) -> int:
    cfg = _config_from(args)
    ds = _load_dataset(args.dataset)
    params, losses = train_denoiser(
        ds, cfg.denoiser, cfg.schedule,
        epochs=cfg.train.epochs, seed=cfg.seed,
        batch_size=cfg.train.batch, lr=cfg.train.lr,
    )
    save_checkpoint(params, args.out)
    formats.write_json(
        str(args.out) + ".losses.json",
        {"epoch_loss": losses, "config": cfg.resolved(), "n_maps": len(ds)},
    )
    print(f"trained {cfg.train.epochs} epochs on {len(ds)} maps -> {args.out}")
    return 0


# -- sample ----------------------------------------------------------------------

def cmd_sample(args) -> int:
    params = load_checkpoint(args.checkpoint)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    result = sample(params, steps=args.steps, seed=args.seed, count=args.count,
                    return_trajectory=args.trajectory)
    if args.trajectory:
        maps, traj = result
    else:
        maps, traj = result, None
    maps = maps if args.count > 1 else maps[None]
    for i in range(args.count):
        formats.write_fmat(out / f"sample_{i:03d}.fmat", maps[i])
    if traj is not None:
        picks = np.linspace(0, len(traj) - 1, min(6, len(traj))).astype(int)
        for i in range(args.count):
            for si, ti in enumerate(picks):
                snap = traj[ti] if args.count > 1 else traj[ti]
                formats.write_ppm(out / f"traj_{i:03d}_{si}.ppm", np.abs(snap[i]))
    print(f"wrote {args.count} samples to {out}")
    return 0


# -- distill-mask -----------------------------------------------------------------

def cmd_distill_mask(args) -> int:
    params = load_checkpoint(args.checkpoint)
    C = formats.read_fmat(args.fmap)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    sigmas = args.sigma or [1.0]
    for sigma in sigmas:
        mask = distill_mask(params, C, sigma, args.N, seed=args.seed)
        tag = f"{sigma:g}"
        formats.write_fmat(out / f"mask_sigma{tag}.fmat", mask)
        formats.write_ppm(out / f"mask_sigma{tag}.ppm", mask)
    print(f"wrote {len(sigmas)} masks to {out}")
    return 0


# -- match -----------------------------------------------------------------------

def cmd_match(args) -> int:
    cfg = _config_from(args)
    mesh1 = load_mesh(args.mesh1)
    mesh2 = load_mesh(args.mesh2)
    denoiser = load_checkpoint(args.checkpoint) if args.checkpoint else None
    gt = None
    if args.gt_identity:
        gt = np.arange(mesh1.n_vertices)
    elif args.gt:
        gt = formats.read_pmap(args.gt)
    result = zero_shot_match(mesh1, mesh2, denoiser, cfg.zeroshot,
                             seed=cfg.seed, gt=gt, mode=args.mode)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    formats.write_fmat(out / "map.fmat", result.fmap)
    formats.write_pmap(out / "p2p.pmap", result.pmap)
    files = {"fmap": "map.fmat", "pmap": "p2p.pmap"}
    if result.mask is not None:
        formats.write_fmat(out / "mask.fmat", result.mask)
        files["mask"] = "mask.fmat"
    report = result.to_dict()
    report["config"] = cfg.resolved()
    report["files"] = files
    formats.write_json(out / "report.json", report)
    geo = "" if result.geodesic is None else (
        f", mean geodesic error x100 = {result.geodesic['mean_x100']:.2f}"
    )
    print(f"match ({args.mode}) done in {result.wall_clock:.1f}s{geo}")
    return 0


# -- eval ------------------------------------------------------------------------

def cmd_eval(args) -> int:
    mesh2 = load_mesh(args.mesh2)
    pred = formats.read_pmap(args.pred)
    if args.gt_identity:
        gt = np.arange(pred.size)
    else:
        gt = formats.read_pmap(args.gt)
    errs, mean = geodesic_error(pred, gt, mesh2)
    report = {
        "mean": mean,
        "mean_x100": 100.0 * mean,
        "median": float(np.median(errs)),
        "n": int(errs.size),
    }
    formats.write_json(args.out, report)
    if args.curve:
        thresholds = np.linspace(0.0, 0.25, 101)
        frac = [(errs <= t).mean() for t in thresholds]
        lines = ["threshold,fraction"]
        lines += [f"{t:.4f},{f:.6f}" for t, f in zip(thresholds, frac)]
        formats.atomic_write_text(args.curve, "\n".join(lines) + "\n")
    print(f"mean geodesic error x100 = {report['mean_x100']:.3f}")
    return 0


# -- ablate / baseline -------------------------------------------------------------

def _manifest_pairs(manifest_path, count):
    manifest = formats.read_json(manifest_path)
    root = Path(manifest_path).parent
    files = [root / f for f in manifest["files"]]
    pairs = [(files[2 * i], files[2 * i + 1]) for i in range(len(files) // 2)]
    if count is not None:
        pairs = pairs[:count]
    if not pairs:
        raise ConfigError("pair manifest yields no pairs")
    return pairs


def _run_mode_pair(job):
    """Worker for one (mode|mask, pair) cell; used by ablate and baseline."""
    kind, label, path1, path2, checkpoint, zs_cfg, seed = job
    mesh1, mesh2 = load_mesh(path1), load_mesh(path2)
    denoiser = load_checkpoint(checkpoint) if checkpoint else None
    gt = np.arange(mesh1.n_vertices)
    if kind == "mode":
        res = zero_shot_match(mesh1, mesh2, denoiser, zs_cfg, seed=seed,
                              gt=gt, mode=label)
    else:
        res = ini_zoomout_match(mesh1, mesh2, label, zs_cfg, seed=seed,
                                denoiser=denoiser, gt=gt)
    return res.geodesic["mean_x100"]


def _fan_out(jobs, n_jobs):
    if n_jobs <= 1:
        return [_run_mode_pair(job) for job in jobs]
    with ProcessPoolExecutor(max_workers=n_jobs) as pool:
        return list(pool.map(_run_mode_pair, jobs))


def _table(rows, header) -> str:
    width = max(len(r[0]) for r in rows + [header])
    lines = [f"{header[0]:<{width}}  {header[1]:>12}"]
    lines += [f"{name:<{width}}  {val:>12.3f}" for name, val in rows]
    return "\n".join(lines)


def cmd_ablate(args) -> int:
    cfg = _config_from(args)
    modes = [m.strip() for m in args.modes.split(",") if m.strip()]
    unknown = set(modes) - set(ABLATION_MODES)
    if unknown:
        raise ConfigError(f"unknown ablation modes: {sorted(unknown)}")
    pairs = _manifest_pairs(args.pairs, args.count)
    results = {}
    for mode in modes:
        jobs = [
            ("mode", mode, str(p1), str(p2), args.checkpoint, cfg.zeroshot,
             _pair_seed(cfg.seed, i))
            for i, (p1, p2) in enumerate(pairs)
        ]
        per_pair = _fan_out(jobs, args.jobs)
        results[mode] = {
            "mean_x100": float(np.mean(per_pair)),
            "per_pair_x100": per_pair,
        }
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    formats.write_json(out / "ablate.json", {
        "modes": results, "n_pairs": len(pairs), "config": cfg.resolved(),
    })
    print(_table([(m, results[m]["mean_x100"]) for m in modes],
                 ("mode", "err x100")))
    return 0


def cmd_baseline(args) -> int:
    cfg = _config_from(args)
    kinds = [m.strip() for m in args.mask.split(",") if m.strip()]
    unknown = set(kinds) - set(MASK_KINDS)
    if unknown:
        raise ConfigError(f"unknown mask kinds: {sorted(unknown)}")
    if "distilled" in kinds and not args.checkpoint:
        raise ConfigError("the distilled mask needs --checkpoint")
    pairs = _manifest_pairs(args.pairs, args.count)
    results = {}
    for kind in kinds:
        jobs = [
            ("mask", kind, str(p1), str(p2),
             args.checkpoint if kind == "distilled" else None, cfg.zeroshot,
             _pair_seed(cfg.seed, i))
            for i, (p1, p2) in enumerate(pairs)
        ]
        per_pair = _fan_out(jobs, args.jobs)
        results[kind] = {
            "mean_x100": float(np.mean(per_pair)),
            "per_pair_x100": per_pair,
        }
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    formats.write_json(out / "baseline.json", {
        "masks": results, "n_pairs": len(pairs), "config": cfg.resolved(),
    })
    print(_table([(k, results[k]["mean_x100"]) for k in kinds],
                 ("mask", "err x100")))
    return 0


# -- argument wiring ---------------------------------------------------------------

def _add_config_flags(p, with_seed=True):
    p.add_argument("--config", help="key=value config file")
    p.add_argument("--set", action="append", metavar="KEY=VALUE",
                   help="config override (repeatable)")
    if with_seed:
        p.add_argument("--seed", type=int, default=None,
                       help="global seed (overrides config)")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(
        prog="specmatch",
        description="Zero-shot shape matching with spectral diffusion priors.",
    )
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth-data", help="generate a registered shape family")
    _add_config_flags(p)
    p.add_argument("--out", required=True)
    p.add_argument("--count", type=int, default=24)
    p.set_defaults(fn=cmd_synth_data)

    p = sub.add_parser("build-dataset", help="ground-truth maps from a shape family")
    p.add_argument("--manifest", required=True)
    p.add_argument("--k", type=int, default=30)
    p.add_argument("--out", required=True)
    p.add_argument("--signed", action="store_true",
                   help="store signed maps instead of absolute values")
    p.add_argument("--sign-augment", action="store_true",
                   help="random +-1 diagonal conjugation (signed datasets only)")
    p.set_defaults(fn=cmd_build_dataset)

    p = sub.add_parser("train", help="train the spectral denoiser")
    _add_config_flags(p)
    p.add_argument("--dataset", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("sample", help="draw maps from a trained model")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--count", type=int, default=1)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--steps", type=int, default=None)
    p.add_argument("--trajectory", action="store_true",
                   help="also write denoising-trajectory heatmaps")
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_sample)

    p = sub.add_parser("distill-mask", help="distill regularization masks")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--fmap", required=True, help="FMAT map to distill around")
    p.add_argument("--sigma", type=float, action="append",
                   help="noise level (repeatable; default 1.0)")
    p.add_argument("--N", type=int, default=100)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_distill_mask)

    p = sub.add_parser("match", help="zero-shot match a pair of meshes")
    _add_config_flags(p)
    p.add_argument("--mesh1", required=True)
    p.add_argument("--mesh2", required=True)
    p.add_argument("--checkpoint", help="trained denoiser (needed for mask/SDS modes)")
    p.add_argument("--mode", default="full", choices=ABLATION_MODES)
    p.add_argument("--gt", help="ground-truth PMAP for evaluation")
    p.add_argument("--gt-identity", action="store_true",
                   help="ground truth is the identity correspondence")
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_match)

    p = sub.add_parser("eval", help="geodesic error of a predicted point map")
    p.add_argument("--pred", required=True)
    p.add_argument("--gt")
    p.add_argument("--gt-identity", action="store_true")
    p.add_argument("--mesh2", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--curve", help="CSV path for the cumulative error curve")
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("ablate", help="per-mode mean errors over a pair set")
    _add_config_flags(p)
    p.add_argument("--pairs", required=True, help="synth-data manifest")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--modes", default=",".join(ABLATION_MODES))
    p.add_argument("--count", type=int, default=10, help="number of pairs")
    p.add_argument("--jobs", type=int, default=1)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_ablate)

    p = sub.add_parser("baseline", help="Ini+Zoomout rows for axiomatic/distilled masks")
    _add_config_flags(p)
    p.add_argument("--pairs", required=True)
    p.add_argument("--mask", default="laplacian,resolvent,slanted,distilled")
    p.add_argument("--checkpoint")
    p.add_argument("--count", type=int, default=10)
    p.add_argument("--jobs", type=int, default=1)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_baseline)

    return ap


def main(argv=None) -> int:
    ap = build_parser()
    try:
        args = ap.parse_args(argv)
    except SystemExit as exc:
        return USAGE_EXIT if exc.code not in (0, None) else 0
    try:
        return args.fn(args)
    except ConfigError as exc:
        return _fail(USAGE_EXIT, exc)
    except _NUMERIC_ERRORS as exc:
        return _fail(NUMERIC_EXIT, exc)
    except SpecmatchError as exc:
        return _fail(DATA_EXIT, exc)
    except FileNotFoundError as exc:
        return _fail(DATA_EXIT, exc)


if __name__ == "__main__":
    sys.exit(main())
