"""Command-line entry point: ``noduleproj <command> [flags]``.

Exit codes: 0 ok, 1 usage or invalid config, 2 data error, 3 numeric failure.
Every command that writes files also writes ``<name>.config.json`` holding
the effective options (JSON config merged under explicit flags).
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys

import numpy as np

from . import __version__
from .dataset import (PhantomConfig, SlabSampler, export_phantoms, load_phantom_dir,
                      phantom_series, rasterize_mask, read_annotations, write_annotations)
from .detect import ALL_ORIENTATIONS, DEFAULT_THRESHOLD, detect, read_candidates, write_candidates
from .froc import evaluate, write_report
from .mbfp import dump_features
from .segnet import VARIANTS, variant_spec
from .tensorcore import NonFiniteError, Tensor, no_grad
from .train import TrainConfig, load_model, train
from .volume import MetaImageError, extract_slab, hu_normalize, resample, write_metaimage

DATA_DIR_ENV = "NODULEPROJ_DATA_DIR"
PREPROCESS_MARKER = "preprocess.json"

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3

log = logging.getLogger("noduleproj")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


# ------------------------------------------------------------------ helpers

def _snapshot(args, path) -> None:
    """Write the effective options next to the run's outputs."""
    opts = {k: v for k, v in sorted(vars(args).items()) if k not in ("func", "config")}
    opts["version"] = __version__
    d = os.path.dirname(os.fspath(path))
    if d:
        os.makedirs(d, exist_ok=True)
    with open(path, "w") as fh:
        json.dump(opts, fh, indent=2, sort_keys=True, default=list)
        fh.write("\n")


def _data_dir(args) -> str:
    path = args.data or os.environ.get(DATA_DIR_ENV)
    if not path:
        raise UsageError(f"no data directory: pass --data or set {DATA_DIR_ENV}")
    if not os.path.isdir(path):
        raise FileNotFoundError(f"data directory {path} does not exist")
    return path


def load_dataset(path, spacing: float = 0.8):
    """[(series_id, normalized volume)], annotations for a data directory.

    Directories written by ``preprocess`` are used as is; anything else is
    treated as HU volumes and resampled plus normalized in memory.
    """
    vols, ann = load_phantom_dir(path)
    if not vols:
        raise FileNotFoundError(f"no .mhd volumes in {path}")
    if os.path.exists(os.path.join(path, PREPROCESS_MARKER)):
        return vols, ann
    return [(sid, hu_normalize(resample(v, spacing))) for sid, v in vols], ann


def _orientations(text: str) -> tuple:
    names = tuple(o.strip() for o in text.split(",") if o.strip())
    bad = [o for o in names if o not in ALL_ORIENTATIONS]
    if bad or not names:
        raise UsageError(f"unknown orientation(s) {bad or text!r}")
    return names


# ----------------------------------------------------------------- commands

def cmd_phantom(args) -> int:
    cfg = PhantomConfig(seed=args.seed, shape=tuple(args.shape))
    phantoms = phantom_series(cfg, args.count, args.seed, args.jobs)
    export_phantoms(args.out, phantoms)
    _snapshot(args, os.path.join(args.out, "phantom.config.json"))
    print(f"wrote {len(phantoms)} phantoms to {args.out}")
    return EXIT_OK


def cmd_preprocess(args) -> int:
    src = _data_dir(args)
    vols, ann = load_phantom_dir(src)
    if not vols:
        raise FileNotFoundError(f"no .mhd volumes in {src}")
    os.makedirs(args.out, exist_ok=True)
    for sid, vol in vols:
        norm = hu_normalize(resample(vol, args.spacing))
        write_metaimage(norm, os.path.join(args.out, f"{sid}.mhd"), "MET_FLOAT")
    write_annotations(os.path.join(args.out, "annotations.csv"), ann)
    with open(os.path.join(args.out, PREPROCESS_MARKER), "w") as fh:
        json.dump({"spacing_mm": args.spacing, "normalized": "hu[-1000,400]->[0,1]"}, fh,
                  indent=2, sort_keys=True)
        fh.write("\n")
    _snapshot(args, os.path.join(args.out, "preprocess.config.json"))
    print(f"preprocessed {len(vols)} volumes into {args.out}")
    return EXIT_OK


def cmd_train(args) -> int:
    if args.variant not in VARIANTS:
        raise UsageError(f"unknown variant {args.variant!r}; choose from {sorted(VARIANTS)}")
    vols, ann = load_dataset(_data_dir(args), args.spacing)
    volumes = [v for _, v in vols]
    by_series = {}
    for a in ann:
        by_series.setdefault(a.series_id, []).append(a)
    masks = [rasterize_mask(v, by_series.get(sid, [])) for sid, v in vols]
    spec = variant_spec(args.variant, small=args.size == "small")
    crop = (args.crop, args.crop) if args.crop else None
    sampler = SlabSampler(volumes, masks, _orientations(args.orientations),
                          slab_width=spec.depth // 2, crop=crop)
    cfg = TrainConfig(lr=args.lr, epochs=args.epochs, batch_size=args.batch_size,
                      steps_per_epoch=args.steps_per_epoch, seed=args.seed,
                      precision=args.precision)
    _snapshot(args, os.path.join(args.out, "train.config.json"))
    res = train(spec, sampler, cfg, args.out)
    print(f"trained {args.variant}: final loss {res.history[-1]['loss']:.4f}; "
          f"checkpoint {res.checkpoints[-1]}")
    return EXIT_OK


def cmd_infer(args) -> int:
    if not os.path.exists(args.model):
        raise FileNotFoundError(f"checkpoint {args.model} does not exist")
    model = load_model(args.model)
    model.eval()
    vols, _ = load_dataset(_data_dir(args), args.spacing)
    orientations = _orientations(args.orientations)
    cands = []
    for sid, vol in vols:
        cands.extend(detect(model, vol, orientations, args.threshold, sid, args.jobs))
        if args.dump_features:
            _dump_front_features(model, sid, vol, args.dump_features)
    write_candidates(args.out, cands)
    _snapshot(args, os.path.splitext(args.out)[0] + ".config.json")
    print(f"wrote {len(cands)} candidates for {len(vols)} volumes to {args.out}")
    return EXIT_OK


def _dump_front_features(model, sid, vol, out_dir) -> None:
    """Front-end feature maps for the central axial slice of ``vol``."""
    os.makedirs(out_dir, exist_ok=True)
    p = vol.shape[0] // 2
    slab = extract_slab(vol.data, p, model.spec.depth // 2).data[None, None]
    x = model.prepare(slab)
    g = model.granularity
    pad = [(0, 0)] * (x.ndim - 2) + [(0, (-n) % g) for n in x.shape[-2:]]
    with no_grad():
        feats = model.front_features(Tensor(np.pad(x, pad).astype(model.dtype))).data
    feats = feats[..., :vol.shape[1], :vol.shape[2]]
    meta = {"series_id": sid, "slice": p, "front_end": model.spec.front_end}
    if model.spec.front_end == "mbfp":
        meta["groups"] = [{"width": w, "channels": model.spec.bottleneck} for w in model.spec.widths]
    dump_features(feats, os.path.join(out_dir, f"{sid}_features"), meta)


def cmd_eval(args) -> int:
    cands = read_candidates(args.candidates)
    ann = read_annotations(args.annotations)
    if not ann:
        raise ValueError(f"{args.annotations} holds no nodules")
    result = evaluate(cands, ann, args.num_scans)
    if args.out:
        os.makedirs(args.out, exist_ok=True)
        write_report(result, os.path.join(args.out, "froc.json"), os.path.join(args.out, "froc.csv"))
        _snapshot(args, os.path.join(args.out, "eval.config.json"))
    for level, s in result.level_sensitivity.items():
        print(f"{level:g} FP/scan: {s:.3f}")
    print(f"mean sensitivity: {result.mean_sensitivity:.3f}")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    from .gradsuite import TOLERANCE, format_report, run_suite

    if args.precision != 64:
        raise UsageError("the gradient suite runs at 64-bit only")
    reports = run_suite(range(args.seeds), progress=lambda r: print(format_report(r), flush=True))
    failed = [r.name for r in reports if not r.passed]
    if args.out:
        os.makedirs(args.out, exist_ok=True)
        with open(os.path.join(args.out, "gradcheck.json"), "w") as fh:
            json.dump([{"op": r.name, "max_rel_error": r.max_rel_error, "resamples": r.resamples,
                        "passed": r.passed} for r in reports], fh, indent=2, sort_keys=True)
            fh.write("\n")
        _snapshot(args, os.path.join(args.out, "gradcheck.config.json"))
    if failed:
        print(f"gradient check failed (tolerance {TOLERANCE:g}): {', '.join(failed)}",
              file=sys.stderr)
        return EXIT_NUMERIC
    print(f"all {len(reports)} operators within {TOLERANCE:g}")
    return EXIT_OK


def cmd_ablate(args) -> int:
    from .experiment import (ExperimentConfig, format_ablation_table, make_split, run_ablation,
                             summarize_ablation, write_ablation_report)

    cfg = ExperimentConfig(train_count=args.train_count, test_count=args.test_count,
                           crop=args.crop, lr=args.lr, epochs=args.epochs,
                           steps_per_epoch=args.steps_per_epoch, batch_size=args.batch_size,
                           threshold=args.threshold)
    os.makedirs(args.out, exist_ok=True)
    _snapshot(args, os.path.join(args.out, "ablate.config.json"))
    split = make_split(cfg, args.jobs)
    rows = run_ablation(cfg, tuple(args.seeds), args.jobs, args.out, split)
    summary = summarize_ablation(rows)
    write_ablation_report(summary, os.path.join(args.out, "ablation.json"),
                          os.path.join(args.out, "ablation.csv"))
    print(format_ablation_table(summary))
    return EXIT_OK


# ------------------------------------------------------------------ parsing

def build_parser() -> _Parser:
    parser = _Parser(prog="noduleproj", description="Lung nodule detection on CT with "
                     "trainable feature projection (numpy reference implementation).")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(p, jobs=False):
        p.add_argument("--config", help="JSON file of option defaults; explicit flags win")
        p.add_argument("--seed", type=int, default=0)
        if jobs:
            p.add_argument("--jobs", type=int, default=1,
                           help="worker threads (default 1 keeps runs bit-reproducible)")

    p = sub.add_parser("phantom", help="generate synthetic CT phantoms")
    common(p, jobs=True)
    p.add_argument("--out", required=True)
    p.add_argument("--count", type=int, default=1)
    p.add_argument("--shape", type=int, nargs=3, default=list(PhantomConfig.shape),
                   metavar=("Z", "Y", "X"))
    p.set_defaults(func=cmd_phantom)

    p = sub.add_parser("preprocess", help="resample to isotropic spacing and normalize HU")
    common(p)
    p.add_argument("--data", help=f"input directory (default ${DATA_DIR_ENV})")
    p.add_argument("--out", required=True)
    p.add_argument("--spacing", type=float, default=0.8)
    p.set_defaults(func=cmd_preprocess)

    p = sub.add_parser("train", help="train a segmentation network")
    common(p)
    p.add_argument("--data", help=f"training directory (default ${DATA_DIR_ENV})")
    p.add_argument("--out", required=True)
    p.add_argument("--variant", default="AttentionMIP")
    p.add_argument("--size", choices=("small", "full"), default="small")
    p.add_argument("--lr", type=float, default=TrainConfig.lr)
    p.add_argument("--epochs", type=int, default=TrainConfig.epochs)
    p.add_argument("--steps-per-epoch", type=int, default=TrainConfig.steps_per_epoch)
    p.add_argument("--batch-size", type=int, default=TrainConfig.batch_size)
    p.add_argument("--crop", type=int, default=0, help="in-plane training crop (0: full slices)")
    p.add_argument("--orientations", default=",".join(ALL_ORIENTATIONS))
    p.add_argument("--precision", choices=("float32", "float64"), default="float32")
    p.add_argument("--spacing", type=float, default=0.8)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("infer", help="detect candidates with a trained checkpoint")
    common(p, jobs=True)
    p.add_argument("--model", required=True, help="checkpoint; network.json is read beside it")
    p.add_argument("--data", help=f"volume directory (default ${DATA_DIR_ENV})")
    p.add_argument("--out", required=True, help="candidates CSV")
    p.add_argument("--threshold", type=float, default=DEFAULT_THRESHOLD)
    p.add_argument("--orientations", default=",".join(ALL_ORIENTATIONS))
    p.add_argument("--spacing", type=float, default=0.8)
    p.add_argument("--dump-features", metavar="DIR",
                   help="also write front-end feature maps of each volume's central slice")
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("eval", help="FROC report for a candidates CSV")
    common(p)
    p.add_argument("--candidates", required=True)
    p.add_argument("--annotations", required=True)
    p.add_argument("--num-scans", type=int, help="total scans, if some have no rows in either file")
    p.add_argument("--out", help="directory for froc.json and froc.csv")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("gradcheck", help="finite-difference check of every operator")
    common(p)
    p.add_argument("--precision", type=int, choices=(32, 64), default=64)
    p.add_argument("--seeds", type=int, default=10, help="seeds per operator")
    p.add_argument("--out", help="directory for gradcheck.json")
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("ablate", help="ablation matrix on one phantom split")
    common(p, jobs=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    p.add_argument("--train-count", type=int, default=30)
    p.add_argument("--test-count", type=int, default=10)
    p.add_argument("--crop", type=int, default=32)
    p.add_argument("--lr", type=float, default=2e-3)
    p.add_argument("--epochs", type=int, default=5)
    p.add_argument("--steps-per-epoch", type=int, default=60)
    p.add_argument("--batch-size", type=int, default=8)
    p.add_argument("--threshold", type=float, default=DEFAULT_THRESHOLD)
    p.set_defaults(func=cmd_ablate)
    return parser


def parse_args(argv) -> argparse.Namespace:
    """Parse twice: once to find ``--config``, then with its values as defaults."""
    parser = build_parser()
    args = parser.parse_args(argv)
    if getattr(args, "config", None):
        try:
            with open(args.config) as fh:
                overrides = json.load(fh)
        except (OSError, json.JSONDecodeError) as exc:
            raise UsageError(f"cannot read config {args.config}: {exc}") from None
        if not isinstance(overrides, dict):
            raise UsageError(f"config {args.config} must hold a JSON object")
        known = set(vars(args)) - {"func", "command", "config"}
        norm = {k.replace("-", "_"): v for k, v in overrides.items()}
        unknown = sorted(set(norm) - known)
        if unknown:
            raise UsageError(f"config {args.config}: unknown option(s) {unknown}")
        sub = parser._subparsers._group_actions[0].choices[args.command]
        sub.set_defaults(**norm)
        args = parser.parse_args(argv)
    if getattr(args, "jobs", 1) < 1:
        raise UsageError("--jobs must be at least 1")
    return args


def main(argv=None) -> int:
    argv = sys.argv[1:] if argv is None else list(argv)
    try:
        args = parse_args(argv)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    if args.verbose:
        logging.basicConfig(level=logging.INFO, format="%(name)s: %(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except NonFiniteError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (OSError, MetaImageError, ValueError, KeyError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
