"""Command line pipeline: synth, simulate, train, impute, evaluate.

A run is captured by a flat key = value config file plus flag overrides
(flags win).  Keys use the long flag names with dashes turned into
underscores; one file can hold the keys for every stage of a pipeline.

Determinism: every stage derives its randomness from the seed, so rerunning
a stage from the same config and inputs reproduces its outputs byte for
byte.  Training is resumable: finished locations are skipped on rerun.

Exit codes: 0 success, 1 runtime failure, 2 bad configuration.
Logging level comes from PATCHGMM_LOG (error, warn, info, debug).
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from . import degrade, ecm, em, impute, metrics
from .errors import ConfigError, PatchGmmError, ShapeError, ValidationError
from .model import load_manifest, load_model, save_manifest, save_model
from .patches import SubvolumeGrid, extract_patches
from .volume import Volume, load_mask, load_volume, save_mask, save_volume

logger = logging.getLogger("patchgmm.cli")

_ECM_MAX_DIM = 512


def parse_config(path) -> dict:
    """Flat key = value file; blank lines and # comments ignored."""
    cfg = {}
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    for ln, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{ln}: expected key = value")
        key, val = line.split("=", 1)
        cfg[key.strip()] = val.strip()
    return cfg


def _triple(text) -> tuple[int, int, int]:
    if isinstance(text, tuple):
        return text
    parts = [p for p in str(text).replace(",", " ").split() if p]
    if len(parts) != 3:
        raise ValueError(f"expected three integers, got {text!r}")
    return tuple(int(p) for p in parts)


def _bool(text) -> bool:
    if isinstance(text, bool):
        return text
    t = str(text).strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"expected a boolean, got {text!r}")


def _resolve(args, cfg, name, conv, default):
    v = getattr(args, name, None)
    if v is None:
        v = cfg.get(name)
    if v is None:
        return default
    try:
        return conv(v)
    except (ValueError, TypeError) as exc:
        raise ConfigError(f"bad value for {name}: {exc}") from exc


def _child_seed(base: int, index: int) -> int:
    """Stable per-task seed derived from the run seed."""
    return int(np.random.SeedSequence([int(base), int(index)]).generate_state(1)[0])


def _list_volumes(d: Path) -> list[Path]:
    return sorted(p for p in d.glob("*.miv") if not p.name.endswith(".mask.miv"))


def _mask_path(vol_path: Path) -> Path:
    return vol_path.with_name(vol_path.stem + ".mask.miv")


def _loc_name(center) -> str:
    return "loc_{:03d}_{:03d}_{:03d}".format(*center)


def _atomic_save(save_fn, obj, path: Path) -> None:
    tmp = path.with_name(path.name + ".tmp")
    save_fn(obj, tmp)
    os.replace(tmp, path)


# ---------------------------------------------------------------- synth

def cmd_synth(args, cfg) -> int:
    from .synth import generate_collection
    out = Path(_resolve(args, cfg, "out", str, None) or _fail("out directory required"))
    n = _resolve(args, cfg, "subjects", int, 10)
    dims = _resolve(args, cfg, "dims", _triple, (33, 33, 33))
    kind = _resolve(args, cfg, "kind", str, "structured")
    seed = _resolve(args, cfg, "seed", int, 0)
    out.mkdir(parents=True, exist_ok=True)
    volumes, truth = generate_collection(n, dims, kind, seed)
    files = []
    for i, v in enumerate(volumes):
        name = f"subj_{i:03d}.miv"
        save_volume(v, out / name)
        files.append(name)
    doc = {
        "format": "patchgmm-collection",
        "version": 1,
        "kind": truth["kind"],
        "seed": seed,
        "dims": list(dims),
        "subjects": n,
        "files": files,
    }
    (out / "collection.json").write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n")
    logger.info("wrote %d volumes to %s", n, out)
    return 0


# ------------------------------------------------------------- simulate

def cmd_simulate(args, cfg) -> int:
    in_dir = Path(_resolve(args, cfg, "in_dir", str, None) or _fail("input directory required"))
    out = Path(_resolve(args, cfg, "out", str, None) or _fail("out directory required"))
    mask_kind = _resolve(args, cfg, "mask", str, "axial")
    factor = _resolve(args, cfg, "factor", int, 6)
    fraction = _resolve(args, cfg, "fraction", float, None)
    blur_sigma = _resolve(args, cfg, "blur_sigma", float, 0.0)
    seed = _resolve(args, cfg, "seed", int, 0)
    if mask_kind not in ("axial", "rotated", "random"):
        raise ConfigError(f"unknown mask kind {mask_kind!r}")
    vols = _list_volumes(in_dir)
    if not vols:
        raise ValidationError(f"no volumes found in {in_dir}")
    out.mkdir(parents=True, exist_ok=True)
    for i, path in enumerate(vols):
        v = load_volume(path)
        if blur_sigma > 0:
            v = degrade.thickness_blur(v, blur_sigma, axis=2)
        if mask_kind == "axial":
            m = degrade.axial_slice_mask(v.dims, factor, offset=(seed + i) % factor)
        elif mask_kind == "rotated":
            rng = np.random.default_rng(_child_seed(seed, i))
            rotation = tuple(rng.uniform(-0.6, 0.6, size=3))
            m = degrade.rotated_plane_mask(v.dims, factor, rotation, _child_seed(seed, i) + 1)
        else:
            frac = fraction if fraction is not None else 1.0 / factor
            m = degrade.random_mask(v.dims, frac, _child_seed(seed, i))
        masked = v.data.copy()
        masked[~m.flags] = 0.0
        save_volume(Volume(masked, v.spacing), out / path.name)
        save_mask(m, _mask_path(out / path.name))
    recipe = {
        "format": "patchgmm-simulate",
        "version": 1,
        "mask": mask_kind,
        "factor": factor,
        "fraction": fraction,
        "blur_sigma": blur_sigma,
        "seed": seed,
        "inputs": [p.name for p in vols],
    }
    (out / "simulate.json").write_text(json.dumps(recipe, indent=1, sort_keys=True) + "\n")
    logger.info("degraded %d volumes into %s", len(vols), out)
    return 0


# ---------------------------------------------------------------- train

def _interp_volume(v: Volume, m) -> Volume:
    """Linear interpolation when the mask is planar, nearest otherwise."""
    try:
        return metrics.baseline_linear(v, m)
    except ValidationError:
        return metrics.baseline_nearest(v, m)


def _train_location_task(task: dict) -> tuple[str, str]:
    """Fit and save one location's model; runs in a worker process."""
    center = task["center"]
    grid = SubvolumeGrid(**task["grid"])
    model_path = Path(task["model_path"])
    patches = []
    interp_patches = []
    for sid, (vol_path, mask_path, interp_path) in enumerate(task["subjects"]):
        v = load_volume(vol_path)
        m = load_mask(mask_path)
        patches.extend(extract_patches(v, m, grid, center, volume_id=sid))
        vi = load_volume(interp_path)
        for p in extract_patches(vi, _full_mask(vi), grid, center, volume_id=sid):
            interp_patches.append(p.values)
    cfg_kw = dict(task["train_cfg"])
    cfg = em.TrainConfig(**cfg_kw)
    log_path = model_path.with_name(model_path.stem + ".log.ndjson")
    if task["variant"] == "em":
        init = em.init_from_interpolation(interp_patches, cfg)
        with open(log_path, "w") as log_stream:
            model, _ = em.fit(patches, cfg, init, log_stream=log_stream)
    else:
        init = ecm.init_fullcov(interp_patches, cfg)
        with open(log_path, "w") as log_stream:
            model, _ = ecm.ecm_fit(patches, cfg, init, log_stream=log_stream)
        if task["ecm_project"]:
            d = task["ecm_project"]
            K = model.n_components
            bases = []
            noises = []
            for k in range(K):
                W, s2 = ecm.low_rank_project(model.covariances[k], d)
                bases.append(W)
                noises.append(max(s2, cfg.sigma2_floor))
            from .model import MixtureModel
            model = MixtureModel(model.weights, model.means, np.stack(bases), np.array(noises))
    _atomic_save(save_model, model, model_path)
    return _loc_name(center), "trained"


def _full_mask(v: Volume):
    from .volume import ObservationMask
    return ObservationMask(np.ones(v.dims, dtype=bool))


def cmd_train(args, cfg) -> int:
    in_dir = Path(_resolve(args, cfg, "in_dir", str, None) or _fail("input directory required"))
    out = Path(_resolve(args, cfg, "out", str, None) or _fail("out directory required"))
    variant = _resolve(args, cfg, "variant", str, "em")
    if variant not in ("em", "ecm"):
        raise ConfigError(f"unknown variant {variant!r}")
    subvolume = _resolve(args, cfg, "subvolume", _triple, (21, 21, 21))
    stride = _resolve(args, cfg, "stride", _triple, (11, 11, 11))
    patch = _resolve(args, cfg, "patch", _triple, (11, 11, 11))
    seed = _resolve(args, cfg, "seed", int, 0)
    workers = _resolve(args, cfg, "workers", int, os.cpu_count() or 1)
    ecm_project = _resolve(args, cfg, "ecm_project", int, 0)
    train_keys = {
        "K": ("k", int, 5),
        "d_target": ("d_target", int, 30),
        "d_init": ("d_init", int, 1),
        "d_growth_per_iter": ("d_growth", int, 1),
        "max_iters": ("max_iters", int, 50),
        "loglik_rel_tol": ("tol", float, 1e-6),
        "sigma2_floor": ("sigma2_floor", float, 1e-6),
        "min_cluster_weight": ("min_weight", float, 1e-6),
    }
    base_cfg = {field: _resolve(args, cfg, flag, conv, dflt)
                for field, (flag, conv, dflt) in train_keys.items()}
    patch_dim = patch[0] * patch[1] * patch[2]
    if variant == "ecm" and patch_dim > _ECM_MAX_DIM:
        raise ConfigError(
            f"full-covariance training is limited to patch dimension {_ECM_MAX_DIM}; "
            f"{patch} gives {patch_dim}")
    vols = _list_volumes(in_dir)
    if not vols:
        raise ValidationError(f"no volumes found in {in_dir}")
    dims = None
    pairs = []
    for p in vols:
        mp = _mask_path(p)
        if not mp.exists():
            raise ValidationError(f"missing mask for {p.name}")
        pairs.append((p, mp))
    out.mkdir(parents=True, exist_ok=True)
    interp_dir = out / "interp"
    interp_dir.mkdir(exist_ok=True)
    subjects = []
    for p, mp in pairs:
        v = load_volume(p)
        if dims is None:
            dims = v.dims
        elif v.dims != dims:
            raise ShapeError(f"{p.name} dims {v.dims} differ from {dims}")
        ip = interp_dir / p.name
        if not ip.exists():
            m = load_mask(mp)
            _atomic_save(save_volume, _interp_volume(v, m), ip)
        subjects.append((str(p), str(mp), str(ip)))
    grid = SubvolumeGrid(dims, subvolume, stride, patch)
    centers = grid.centers()
    grid_kw = {"volume_dims": grid.volume_dims, "subvolume_size": grid.subvolume_size,
               "stride": grid.stride, "patch_size": grid.patch_size}
    tasks = []
    entries = {}
    n_skipped = 0
    for li, center in enumerate(centers):
        fname = _loc_name(center) + ".mim"
        entries[center] = fname
        model_path = out / fname
        if model_path.exists():
            n_skipped += 1
            continue
        loc_cfg = dict(base_cfg)
        loc_cfg["seed"] = _child_seed(seed, li)
        tasks.append({
            "center": center,
            "grid": grid_kw,
            "model_path": str(model_path),
            "subjects": subjects,
            "train_cfg": loc_cfg,
            "variant": variant,
            "ecm_project": ecm_project,
        })
    if n_skipped:
        logger.info("skipping %d already trained locations", n_skipped)
    if tasks:
        if workers > 1:
            with ProcessPoolExecutor(max_workers=workers) as ex:
                for name, status in ex.map(_train_location_task, tasks):
                    logger.info("%s: %s", name, status)
        else:
            for task in tasks:
                name, status = _train_location_task(task)
                logger.info("%s: %s", name, status)
    save_manifest(grid, entries, out / "manifest.json")
    logger.info("trained %d locations (%d reused) -> %s", len(tasks), n_skipped, out)
    return 0


# --------------------------------------------------------------- impute

def _impute_subject_task(task: dict) -> str:
    grid, model_paths = load_manifest(task["manifest"])
    models = {c: load_model(p) for c, p in model_paths.items()}
    v = load_volume(task["vol"])
    m = load_mask(task["mask"])
    restored = impute.restore_volume(
        v, m, grid, models,
        mode=task["mode"], keep_observed=task["keep_observed"], seed=task["seed"])
    _atomic_save(save_volume, restored, Path(task["out"]))
    return Path(task["vol"]).stem


def cmd_impute(args, cfg) -> int:
    in_dir = Path(_resolve(args, cfg, "in_dir", str, None) or _fail("input directory required"))
    models_dir = Path(_resolve(args, cfg, "models", str, None) or _fail("models directory required"))
    out = Path(_resolve(args, cfg, "out", str, None) or _fail("out directory required"))
    mode = _resolve(args, cfg, "mode", str, "map")
    keep_observed = _resolve(args, cfg, "keep_observed", _bool, False)
    seed = _resolve(args, cfg, "seed", int, 0)
    workers = _resolve(args, cfg, "workers", int, os.cpu_count() or 1)
    if mode not in ("map", "sample"):
        raise ConfigError(f"unknown mode {mode!r}")
    manifest = models_dir / "manifest.json"
    if not manifest.exists():
        raise ValidationError(f"no manifest at {manifest}")
    vols = _list_volumes(in_dir)
    if not vols:
        raise ValidationError(f"no volumes found in {in_dir}")
    out.mkdir(parents=True, exist_ok=True)
    tasks = []
    for i, p in enumerate(vols):
        mp = _mask_path(p)
        if not mp.exists():
            raise ValidationError(f"missing mask for {p.name}")
        tasks.append({
            "manifest": str(manifest),
            "vol": str(p),
            "mask": str(mp),
            "out": str(out / p.name),
            "mode": mode,
            "keep_observed": keep_observed,
            "seed": _child_seed(seed, i),
        })
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as ex:
            for name in ex.map(_impute_subject_task, tasks):
                logger.info("restored %s", name)
    else:
        for task in tasks:
            logger.info("restored %s", _impute_subject_task(task))
    return 0


# ------------------------------------------------------------- evaluate

def cmd_evaluate(args, cfg) -> int:
    truth_dir = Path(_resolve(args, cfg, "truth", str, None) or _fail("truth directory required"))
    degraded_dir = Path(_resolve(args, cfg, "degraded", str, None) or _fail("degraded directory required"))
    restored_dir = Path(_resolve(args, cfg, "restored", str, None) or _fail("restored directory required"))
    out = Path(_resolve(args, cfg, "out", str, None) or _fail("output report path required"))
    region = _resolve(args, cfg, "region", str, "all")
    conventional = _resolve(args, cfg, "conventional_psnr", _bool, False)
    if region not in ("all", "missing"):
        raise ConfigError(f"unknown region {region!r}")
    truth_vols = _list_volumes(truth_dir)
    if not truth_vols:
        raise ValidationError(f"no volumes found in {truth_dir}")
    rows = []
    for p in truth_vols:
        subject = p.stem
        z0 = load_volume(p)
        mask = load_mask(_mask_path(degraded_dir / p.name))
        degraded = load_volume(degraded_dir / p.name)
        region_mask = None
        if region == "missing":
            from .volume import ObservationMask
            region_mask = ObservationMask(~mask.flags)
        candidates = [("restored", load_volume(restored_dir / p.name)),
                      ("nearest", metrics.baseline_nearest(degraded, mask))]
        try:
            candidates.append(("linear", metrics.baseline_linear(degraded, mask)))
        except ValidationError:
            logger.info("%s: mask not planar; skipping linear baseline", subject)
        mses = {name: metrics.mse(z, z0, region_mask) for name, z in candidates}
        for name, z in candidates:
            err = mses[name]
            try:
                ps = metrics.psnr(z, z0, conventional=conventional)
            except PatchGmmError:
                ps = float("inf")
            rows.append({
                "subject": subject,
                "method": name,
                "mse": err,
                "psnr": ps,
                "improvement": metrics.improvement_over_baseline(err, mses["nearest"]),
            })
    metrics.write_report(out, rows)
    logger.info("wrote %d rows to %s", len(rows), out)
    return 0


# ----------------------------------------------------------------- main

def _fail(msg: str):
    raise ConfigError(msg)


def _build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(
        prog="patchgmm",
        description="Learn location-wise low-rank Gaussian mixtures from sparsely "
                    "sampled volumes, impute the missing voxels, and evaluate.")
    sub = ap.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="key = value config file")
        p.add_argument("--seed", type=int)
        p.add_argument("--workers", type=int)
        p.add_argument("--out")

    p = sub.add_parser("synth", help="generate a synthetic ground-truth collection")
    common(p)
    p.add_argument("--subjects", type=int)
    p.add_argument("--dims")
    p.add_argument("--kind", choices=["model", "structured"])

    p = sub.add_parser("simulate", help="degrade volumes with a sampling mask")
    common(p)
    p.add_argument("--in", dest="in_dir")
    p.add_argument("--mask", choices=["axial", "rotated", "random"])
    p.add_argument("--factor", type=int)
    p.add_argument("--fraction", type=float)
    p.add_argument("--blur-sigma", type=float, dest="blur_sigma")

    p = sub.add_parser("train", help="fit per-location mixtures")
    common(p)
    p.add_argument("--in", dest="in_dir")
    p.add_argument("--variant", choices=["em", "ecm"])
    p.add_argument("--subvolume")
    p.add_argument("--stride")
    p.add_argument("--patch")
    p.add_argument("--k", type=int)
    p.add_argument("--d-target", type=int, dest="d_target")
    p.add_argument("--d-init", type=int, dest="d_init")
    p.add_argument("--d-growth", type=int, dest="d_growth")
    p.add_argument("--max-iters", type=int, dest="max_iters")
    p.add_argument("--tol", type=float)
    p.add_argument("--sigma2-floor", type=float, dest="sigma2_floor")
    p.add_argument("--min-weight", type=float, dest="min_weight")
    p.add_argument("--ecm-project", type=int, dest="ecm_project")

    p = sub.add_parser("impute", help="restore volumes with trained models")
    common(p)
    p.add_argument("--in", dest="in_dir")
    p.add_argument("--models")
    p.add_argument("--mode", choices=["map", "sample"])
    p.add_argument("--keep-observed", action="store_true", default=None, dest="keep_observed")

    p = sub.add_parser("evaluate", help="score restorations against ground truth")
    common(p)
    p.add_argument("--truth")
    p.add_argument("--degraded")
    p.add_argument("--restored")
    p.add_argument("--region", choices=["all", "missing"])
    p.add_argument("--conventional-psnr", action="store_true", default=None,
                   dest="conventional_psnr")
    return ap


_COMMANDS = {
    "synth": cmd_synth,
    "simulate": cmd_simulate,
    "train": cmd_train,
    "impute": cmd_impute,
    "evaluate": cmd_evaluate,
}

_LOG_LEVELS = {"error": logging.ERROR, "warn": logging.WARNING,
               "info": logging.INFO, "debug": logging.DEBUG}


def main(argv=None) -> int:
    level_name = os.environ.get("PATCHGMM_LOG", "warn").lower()
    logging.basicConfig(
        level=_LOG_LEVELS.get(level_name, logging.WARNING),
        format="%(levelname)s %(name)s: %(message)s",
        stream=sys.stderr,
    )
    args = _build_parser().parse_args(argv)
    try:
        cfg = parse_config(args.config) if args.config else {}
        return _COMMANDS[args.command](args, cfg)
    except ConfigError as exc:
        print(f"patchgmm: config error: {exc}", file=sys.stderr)
        return 2
    except PatchGmmError as exc:
        print(f"patchgmm: error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # noqa: BLE001 - CLI boundary
        logger.debug("unexpected failure", exc_info=True)
        print(f"patchgmm: unexpected error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
