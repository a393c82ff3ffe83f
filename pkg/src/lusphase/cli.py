"""``lusphase`` command line.

Exit status: 0 success, 1 invalid usage/configuration/input, 2 runtime failure.
Progress goes to stderr; results only to files.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from functools import partial
from pathlib import Path

from .errors import LusphaseError, NumericDivergenceError, StateError

log = logging.getLogger("lusphase")

IMAGE_SUFFIXES = (".png", ".pgm", ".pfm")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


# --------------------------------------------------------------------------- #
# helpers
# --------------------------------------------------------------------------- #

def _csv_floats(text):
    return [float(v) for v in text.split(",") if v.strip()]


def _csv_ints(text):
    return [int(v) for v in text.split(",") if v.strip()]


def _csv_strs(text):
    return [v.strip() for v in text.split(",") if v.strip()]


def _config(args, flag_map: dict[str, str], extra=()):
    """Effective config: file, then ``--set`` items, then dedicated flags."""
    from .config import load_config
    overrides = list(args.set or [])
    flag_items = list(extra)
    for attr, key in flag_map.items():
        value = getattr(args, attr, None)
        if value is not None and value is not False:
            flag_items.append((key.split("."), value))
    return load_config(args.config, [*overrides, *flag_items])


def _inputs(directory, suffixes=IMAGE_SUFFIXES) -> list[Path]:
    d = Path(directory)
    if not d.is_dir():
        raise FileNotFoundError(f"input directory not found: {d}")
    files = sorted(p for p in d.iterdir() if p.suffix.lower() in suffixes and p.is_file())
    if not files:
        raise FileNotFoundError(f"no {'/'.join(suffixes)} files in {d}")
    return files


def _pmap(fn, items, jobs):
    if jobs and jobs > 1 and len(items) > 1:
        from concurrent.futures import ProcessPoolExecutor
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            return list(pool.map(fn, items))
    return [fn(i) for i in items]


def _write_json(path, doc):
    with open(path, "w") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _strip_suffix(stem: str, suffix: str) -> str:
    return stem[: -len(suffix)] if stem.endswith(suffix) else stem


# --------------------------------------------------------------------------- #
# per-image stage workers (module level so they pickle)
# --------------------------------------------------------------------------- #

def _lpe_one(path, out_dir, params, crop):
    from .imgcore import PFM, crop_center, load_image, save_image
    from .phasefilt import local_phase_energy
    img = load_image(path)
    if crop:
        img = crop_center(img, crop)
    out = Path(out_dir) / f"{path.stem}_lpe.pfm"
    save_image(local_phase_energy(img, params), out, PFM)
    return str(out)


def _enhance_one(path, out_dir, params, normalize):
    from .enhance import enhanced_pair
    from .imgcore import PFM, load_image, save_image
    stem = _strip_suffix(path.stem, "_lpe")
    e1, e2 = enhanced_pair(load_image(path), params, normalize=normalize)
    outs = [Path(out_dir) / f"{stem}_e1.pfm", Path(out_dir) / f"{stem}_e2.pfm"]
    save_image(e1, outs[0], PFM)
    save_image(e2, outs[1], PFM)
    return [str(o) for o in outs]


def _frst_one(path, out_dir, params):
    from .frst import frst_transform
    from .imgcore import PFM, load_image, rescale_unit, save_image
    stem = path.stem
    if stem.endswith("_e1"):
        name = stem[:-3] + "_s1"
    elif stem.endswith("_e2"):
        name = stem[:-3] + "_s2"
    else:
        name = stem + "_s"
    out = Path(out_dir) / f"{name}.pfm"
    save_image(frst_transform(rescale_unit(load_image(path)), params), out, PFM)
    return str(out)


# --------------------------------------------------------------------------- #
# subcommands
# --------------------------------------------------------------------------- #

def cmd_lpe(args):
    from dataclasses import asdict
    from .config import write_run_record
    cfg = _config(args, {"scales": "phase.num_scales", "lambda0": "phase.center_wavelength",
                         "mult": "phase.scale_multiplier", "alpha": "phase.alpha",
                         "order": "phase.bandwidth_order"},
                  extra=[(["phase", "pad"], False)] if args.no_pad else [])
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    files = _inputs(args.inp)
    params = cfg.pipeline.phase
    outputs = _pmap(partial(_lpe_one, out_dir=out, params=params, crop=args.crop), files, args.jobs)
    _write_json(out / "lpe.json", {"stage": "lpe", "params": asdict(params), "crop": args.crop,
                                   "outputs": outputs})
    write_run_record(out, "lpe", cfg)


def cmd_enhance(args):
    from dataclasses import asdict
    from .config import write_run_record
    cfg = _config(args, {"eta": "enhance.eta", "delta": "enhance.delta", "epsilon": "enhance.epsilon",
                         "betas": "enhance.beta_fractions", "transmission": "enhance.transmission",
                         "axial_flip": "enhance.axial_flip"})
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    params = cfg.pipeline.enhance
    files = _inputs(args.inp, (".pfm",))
    outputs = _pmap(partial(_enhance_one, out_dir=out, params=params, normalize=args.normalize),
                    files, args.jobs)
    _write_json(out / "enhance.json", {"stage": "enhance", "params": asdict(params),
                                       "normalized": bool(args.normalize), "outputs": outputs})
    write_run_record(out, "enhance", cfg)


def cmd_frst(args):
    from dataclasses import asdict
    from .config import write_run_record
    cfg = _config(args, {"radii": "frst.radii", "alpha": "frst.radial_strictness",
                         "threshold": "frst.gradient_threshold", "polarity": "frst.polarity"})
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    params = cfg.pipeline.frst
    files = _inputs(args.inp, (".pfm",))
    outputs = _pmap(partial(_frst_one, out_dir=out, params=params), files, args.jobs)
    _write_json(out / "frst.json", {"stage": "frst", "params": asdict(params), "outputs": outputs})
    write_run_record(out, "frst", cfg)


_PIPELINE_FLAGS = {"crop_side": "pipeline.crop_side", "side": "pipeline.side",
                   "crop_offset": "pipeline.crop_offset"}


def cmd_featurize(args):
    from .config import write_run_record
    from .data import build_manifest, featurize_all, write_manifest_json
    cfg = _config(args, _PIPELINE_FLAGS)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    samples = build_manifest(args.inp, args.manifest)
    manifest_json = out / "features.json"
    previous = json.loads(manifest_json.read_text()) if manifest_json.is_file() else None
    samples, doc = featurize_all(samples, cfg.pipeline, out, jobs=args.jobs, previous=previous)
    write_manifest_json(manifest_json, doc)
    write_run_record(out, "featurize", cfg, {"inputs": {"frames": args.inp, "manifest": args.manifest}})
    log.info("featurized %d samples into %s", len(samples), out)


def _load_samples(args):
    from .data import build_manifest, read_manifest_json
    if args.features:
        return read_manifest_json(args.features)
    if args.manifest and args.inp:
        return build_manifest(args.inp, args.manifest)
    raise UsageError("split: provide --features, or both --in and --manifest")


def cmd_split(args):
    from .config import write_run_record
    from .data import class_balance_report, subject_kfold
    cfg = _config(args, {"k": "cv.k", "seed": "seed"})
    samples = _load_samples(args)
    plan = subject_kfold(samples, cfg.folds, cfg.seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    _write_json(out / "folds.json", plan.to_dict())
    _write_json(out / "folds_balance.json", class_balance_report(plan, samples))
    write_run_record(out, "split", cfg)


_TRAIN_FLAGS = {"epochs": "train.epochs", "lr": "train.lr", "lr_scale": "train.lr_scale",
                "batch_size": "train.batch_size", "mode": "fusion.mode", "inputs": "fusion.inputs",
                "seed": "seed", "side": "pipeline.side"}


def _read_plan(path):
    from .data import FoldPlan
    return FoldPlan.from_dict(json.loads(Path(path).read_text()))


def cmd_train(args):
    from .config import write_run_record
    from .data import read_manifest_json
    from .pipeline import evaluate_fold, train_fold
    cfg = _config(args, _TRAIN_FLAGS)
    samples = read_manifest_json(args.features)
    plan = _read_plan(args.folds)
    out = Path(args.out)
    model = train_fold(cfg, samples, plan, args.fold, out)
    if args.evaluate:
        evaluate_fold(model, samples, plan, args.fold, out, cfg.train.batch_size)
    write_run_record(out, "train", cfg, {"fold": args.fold, "features": args.features, "folds": args.folds})


def cmd_evaluate(args):
    from .config import write_run_record
    from .data import read_manifest_json
    from .net.checkpoint import load_checkpoint
    from .pipeline import evaluate_fold
    cfg = _config(args, {})
    model, header = load_checkpoint(args.checkpoint)
    samples = read_manifest_json(args.features)
    plan = _read_plan(args.folds)
    out = Path(args.out)
    evaluate_fold(model, samples, plan, args.fold, out, cfg.train.batch_size)
    write_run_record(out, "evaluate", cfg, {"fold": args.fold, "checkpoint": args.checkpoint,
                                            "checkpoint_step": header["step"]})


def cmd_crossval(args):
    from .pipeline import crossval
    cfg = _config(args, {**_TRAIN_FLAGS, **_PIPELINE_FLAGS, "k": "cv.k"})
    frames = args.inp or cfg.paths.get("frames")
    manifest = args.manifest or cfg.paths.get("manifest")
    out = args.out or cfg.paths.get("out")
    missing = [flag for flag, v in (("--in", frames), ("--manifest", manifest), ("--out", out)) if not v]
    if missing:
        raise UsageError(f"crossval: missing required {', '.join(missing)} (flag or [paths] entry)")
    mean = crossval(cfg, frames, manifest, out, jobs=args.jobs)
    log.info("mean accuracy over %d folds: %.2f%%", cfg.folds, 100 * mean.accuracy)


def cmd_report(args):
    from .pipeline import read_fold_reports, write_report
    reports = read_fold_reports(args.inp)
    out = Path(args.out or args.inp)
    out.mkdir(parents=True, exist_ok=True)
    mean = write_report(out, reports)
    log.info("mean accuracy over %d folds: %.2f%%", len(reports), 100 * mean.accuracy)


# --------------------------------------------------------------------------- #
# parser
# --------------------------------------------------------------------------- #

def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--config", help="TOML run configuration")
    common.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE",
                        help="override a config value (repeatable)")
    common.add_argument("--jobs", type=int, default=1, help="per-image worker processes")
    common.add_argument("-v", "--verbose", action="store_true")

    p = _Parser(prog="lusphase", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("lpe", parents=[common], help="local phase energy per image")
    s.add_argument("--in", dest="inp", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--scales", type=int)
    s.add_argument("--lambda0", type=float)
    s.add_argument("--mult", type=float)
    s.add_argument("--alpha", type=float)
    s.add_argument("--order", type=float)
    s.add_argument("--no-pad", action="store_true", help="filter circularly without symmetric padding")
    s.add_argument("--crop", type=int, help="centre-crop side before filtering")
    s.set_defaults(func=cmd_lpe)

    s = sub.add_parser("enhance", parents=[common], help="enhanced image pair from LPE PFMs")
    s.add_argument("--in", dest="inp", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--eta", type=float)
    s.add_argument("--delta", type=float)
    s.add_argument("--epsilon", type=float)
    s.add_argument("--betas", type=_csv_floats)
    s.add_argument("--transmission", choices=("depth", "content"))
    s.add_argument("--axial-flip", action="store_true")
    s.add_argument("--normalize", action="store_true", help="rescale outputs to [0,1] (default: raw)")
    s.set_defaults(func=cmd_enhance)

    s = sub.add_parser("frst", parents=[common], help="radial symmetry maps from enhanced PFMs")
    s.add_argument("--in", dest="inp", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--radii", type=_csv_ints)
    s.add_argument("--alpha", type=float)
    s.add_argument("--threshold", type=float)
    s.add_argument("--polarity", choices=("bright", "dark", "both"))
    s.set_defaults(func=cmd_frst)

    s = sub.add_parser("featurize", parents=[common], help="us/e1/e2/s1/s2 PFMs per manifest row")
    s.add_argument("--in", dest="inp", required=True, help="frame root directory")
    s.add_argument("--manifest", required=True, help="CSV: id,image_path,subject_id,source_label")
    s.add_argument("--out", required=True)
    s.add_argument("--crop-side", type=int)
    s.add_argument("--crop-offset", type=_csv_ints, help="ROW,COL of the crop window")
    s.add_argument("--side", type=int, help="network input side")
    s.set_defaults(func=cmd_featurize)

    s = sub.add_parser("split", parents=[common], help="subject-disjoint fold plan")
    s.add_argument("--features", help="features.json from featurize")
    s.add_argument("--in", dest="inp")
    s.add_argument("--manifest")
    s.add_argument("--k", type=int)
    s.add_argument("--seed", type=int)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_split)

    s = sub.add_parser("train", parents=[common], help="train one fold")
    s.add_argument("--features", required=True)
    s.add_argument("--folds", required=True)
    s.add_argument("--fold", type=int, required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--epochs", type=int)
    s.add_argument("--lr", type=float)
    s.add_argument("--lr-scale", type=float)
    s.add_argument("--batch-size", type=int)
    s.add_argument("--mode", choices=("early", "mid", "late"))
    s.add_argument("--inputs", type=_csv_strs)
    s.add_argument("--seed", type=int)
    s.add_argument("--side", type=int)
    s.add_argument("--evaluate", action="store_true", help="also score the held-out split")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("evaluate", parents=[common], help="score a checkpoint on a fold's test split")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--features", required=True)
    s.add_argument("--folds", required=True)
    s.add_argument("--fold", type=int, required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_evaluate)

    s = sub.add_parser("crossval", parents=[common], help="featurize, split, train and score all folds")
    s.add_argument("--in", dest="inp")
    s.add_argument("--manifest")
    s.add_argument("--out")
    s.add_argument("--k", type=int)
    s.add_argument("--epochs", type=int)
    s.add_argument("--lr", type=float)
    s.add_argument("--lr-scale", type=float)
    s.add_argument("--batch-size", type=int)
    s.add_argument("--mode", choices=("early", "mid", "late"))
    s.add_argument("--inputs", type=_csv_strs)
    s.add_argument("--seed", type=int)
    s.add_argument("--side", type=int)
    s.add_argument("--crop-side", type=int)
    s.add_argument("--crop-offset", type=_csv_ints)
    s.set_defaults(func=cmd_crossval)

    s = sub.add_parser("report", parents=[common], help="aggregate fold metrics into report.csv/json")
    s.add_argument("--in", dest="inp", required=True, help="crossval output directory")
    s.add_argument("--out")
    s.set_defaults(func=cmd_report)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return 1
    except SystemExit as exc:  # --help
        return 0 if exc.code in (0, None) else 1
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        args.func(args)
    except UsageError as exc:
        print(f"lusphase {args.command}: {exc}", file=sys.stderr)
        return 1
    except (NumericDivergenceError, StateError) as exc:
        print(f"lusphase {args.command}: runtime error: {exc}", file=sys.stderr)
        return 2
    except (LusphaseError, FileNotFoundError) as exc:
        print(f"lusphase {args.command}: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # noqa: BLE001
        print(f"lusphase {args.command}: runtime error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
