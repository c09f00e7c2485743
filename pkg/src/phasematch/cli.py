"""Match images with nonlinear intensity differences from the command line.

Subcommands: synth, detect, build-dataset, train, match, eval.
Exit codes: 0 success, 2 usage error, 3 input error, 4 pipeline error.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import math
import os
import statistics
import sys
from contextlib import nullcontext

import numpy as np

from . import convnet, dataset, evaluation, matcher
from .errors import InputError, MissingGroundTruth, PipelineError
from .imaging import GrayImage, load_gray, rescale, save_gray
from .pc_detector import BankParams, build_bank, compute_pc_maps, detect_keypoints, read_keypoints, write_keypoints

log = logging.getLogger("phasematch")

EXIT_OK, EXIT_USAGE, EXIT_INPUT, EXIT_PIPELINE = 0, 2, 3, 4


def _threads(n):
    if not n:
        return nullcontext()
    from threadpoolctl import threadpool_limits

    return threadpool_limits(limits=n)


def _parent(path):
    """Create the directory an output path lives in and hand the path back."""
    os.makedirs(os.path.dirname(os.fspath(path)) or ".", exist_ok=True)
    return path


def _bank_args(p):
    p.add_argument("--scales", type=int, default=4)
    p.add_argument("--orientations", type=int, default=6)
    p.add_argument("--min-wavelength", type=float, default=3.0)
    p.add_argument("--mult", type=float, default=2.1)
    p.add_argument("--sigma-ratio", type=float, default=0.55)
    p.add_argument("--nms-radius", type=int, default=5)
    p.add_argument("--kp-threshold", type=float, default=None,
                   help="moment threshold (default: mean + 1 std of the map)")
    p.add_argument("--max-kp", type=int, default=500)
    p.add_argument("--no-noise-comp", action="store_true")
    p.add_argument("--kind", choices=("corner", "edge", "both"), default="corner")


def _bank_params(args):
    return BankParams(args.scales, args.orientations, args.min_wavelength, args.mult, args.sigma_ratio)


# --------------------------------------------------------------------- commands

def cmd_synth(args):
    params = dataset.SynthParams()
    if args.params:
        if not os.path.exists(args.params):
            raise FileNotFoundError(args.params)
        with open(args.params) as fh:
            params = dataset.SynthParams.from_dict(json.load(fh))
    overrides = {k: getattr(args, k) for k in ("size", "max_shift", "viewpoint") if getattr(args, k) is not None}
    if overrides:
        params = dataset.SynthParams.from_dict({**params.to_dict(), **overrides})
    params.validate()
    if args.count == 0:
        return EXIT_OK
    os.makedirs(args.out, exist_ok=True)
    for i in range(args.count):
        pair_seed = int(np.random.SeedSequence([args.seed, i]).generate_state(1)[0])
        pair = dataset.synth_pair(params, pair_seed)
        dataset.save_pair(pair, args.out, f"pair_{i:04d}", {"seed": pair_seed, "params": params.to_dict()})
    log.info("wrote %d pairs to %s", args.count, args.out)
    return EXIT_OK


def cmd_detect(args):
    img = load_gray(args.image)
    bank = build_bank(_bank_params(args), img.width, img.height)
    maps = compute_pc_maps(img, bank, not args.no_noise_comp)
    kps = detect_keypoints(maps, args.nms_radius, args.kp_threshold, args.max_kp, args.border, args.kind)
    write_keypoints(_parent(args.out), kps)
    if args.maps:
        save_gray(rescale(maps.min_moment), _parent(args.maps + "_min.pgm"))
        save_gray(rescale(maps.max_moment), args.maps + "_max.pgm")
    log.info("%d keypoints -> %s", len(kps), args.out)
    return EXIT_OK


def cmd_build_dataset(args):
    ratios = tuple(args.ratios)
    # reject bad ratios before touching any pair
    dataset.split(dataset.Manifest([]), ratios, args.seed)
    stems = dataset.list_pairs(args.pairs) if os.path.isdir(args.pairs) else []
    if not stems:
        raise FileNotFoundError(f"no aligned pairs (pair_*.json + images) in {args.pairs}")
    pairs = [dataset.load_pair(args.pairs, s) for s in stems]
    manifest = dataset.build_dataset(pairs, args.size, args.stride, ratios, args.seed,
                                     cross_pair=args.cross_pair, displaced_fraction=args.displaced_fraction)
    manifest.params["pairs"] = stems
    dataset.write_manifest(manifest, _parent(args.out))
    log.info("%d records -> %s", len(manifest.records), args.out)
    return EXIT_OK


def _parse_blocks(text):
    blocks = []
    for item in text.split(","):
        c, k = item.lower().split("x")
        blocks.append((int(c), int(k)))
    return tuple(blocks)


def cmd_train(args):
    manifest = dataset.read_manifest(args.manifest)
    train_recs, val_recs = manifest.subset("train"), manifest.subset("val")
    if not train_recs or not val_recs:
        raise InputError("manifest needs non-empty train and val splits")
    size = train_recs[0].size
    spec = convnet.NetSpec(size, 2, _parse_blocks(args.blocks))
    ops = [o for o in (args.augment or "").split(",") if o]
    if ops or args.gamma:
        train_recs = dataset.augment(train_recs, ops, tuple(args.gamma) if args.gamma else None, args.seed)
    config = convnet.TrainConfig(args.epochs, args.batch_size, args.lr, args.lr_decay, args.lr_period,
                                 args.momentum, args.weight_decay, args.seed, args.loss, not args.no_swap)
    params, history = convnet.train(train_recs, val_recs, spec, config,
                                    log=lambda r: log.info("epoch %(epoch)d loss %(train_loss).4f "
                                                           "val_acc %(val_acc).4f lr %(lr).4g", r))
    convnet.save_model(params, _parent(args.out))
    hist_path = args.history or os.path.splitext(args.out)[0] + ".history.csv"
    with open(_parent(hist_path), "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["epoch", "train_loss", "val_loss", "val_acc", "lr"])
        for r in history:
            w.writerow([r["epoch"], f"{r['train_loss']:.8g}", f"{r['val_loss']:.8g}",
                        f"{r['val_acc']:.8g}", f"{r['lr']:.8g}"])
    return EXIT_OK


def _draw_line(canvas, x0, y0, x1, y1, value=1.0):
    n = int(max(abs(x1 - x0), abs(y1 - y0))) + 1
    xs = np.rint(np.linspace(x0, x1, n)).astype(int)
    ys = np.rint(np.linspace(y0, y1, n)).astype(int)
    canvas[ys, xs] = value


def render_matches(img_a: GrayImage, img_b: GrayImage, rows) -> GrayImage:
    """A and B side by side (dimmed), inlier matches drawn as white segments."""
    h = max(img_a.height, img_b.height)
    canvas = np.zeros((h, img_a.width + img_b.width))
    canvas[:img_a.height, :img_a.width] = 0.6 * img_a.pixels
    canvas[:img_b.height, img_a.width:] = 0.6 * img_b.pixels
    for ax, ay, bx, by, _score, inlier in rows:
        if inlier:
            _draw_line(canvas, ax, ay, bx + img_a.width, by)
    return GrayImage(canvas)


def cmd_match(args):
    img_a, img_b = load_gray(args.img_a), load_gray(args.img_b)
    if args.descriptor == "cnn":
        if not args.model:
            raise InputError("--model is required for the cnn descriptor")
        params = convnet.load_model(args.model)
        patch = args.patch_size or params.spec.input_size
    else:
        params, patch = None, args.patch_size or 32
    cfg = matcher.MatcherConfig(patch, args.threshold, not args.no_mutual,
                                math.inf if args.radius is None else args.radius, args.geometry,
                                args.iterations, args.tolerance, args.min_inliers, args.seed, args.descriptor)
    dcfg = matcher.DetectConfig(args.nms_radius, args.kp_threshold, args.max_kp, not args.no_noise_comp, args.kind)
    result = matcher.match_pipeline(img_a, img_b, params, cfg, _bank_params(args), dcfg)
    prefix = args.out
    _parent(prefix)
    matcher.write_matches(prefix + ".matches.txt", result)
    write_keypoints(prefix + ".kpa.txt", result.kps_a)
    write_keypoints(prefix + ".kpb.txt", result.kps_b)
    rows, _, _ = matcher.read_matches(prefix + ".matches.txt")
    save_gray(render_matches(img_a, img_b, rows), prefix + ".pgm")
    # timings vary run to run, so they stay out of the deterministic outputs
    with open(prefix + ".timing.json", "w") as fh:
        json.dump({k: round(v, 3) for k, v in result.timings.items()}, fh, sort_keys=True)
    log.info("%s", result.counts)
    return EXIT_OK


def _match_files(path):
    if os.path.isdir(path):
        return sorted(os.path.join(path, f) for f in os.listdir(path) if f.endswith(".matches.txt"))
    if not os.path.exists(path):
        raise FileNotFoundError(path)
    return [path]


def _ground_truth(gt_path, stem):
    if gt_path is None:
        raise MissingGroundTruth("geometric metrics need --gt")
    path = os.path.join(gt_path, stem + ".json") if os.path.isdir(gt_path) else gt_path
    if not os.path.exists(path):
        raise MissingGroundTruth(f"no ground truth for {stem} at {path}")
    with open(path) as fh:
        meta = json.load(fh)
    return dataset.Transform.from_dict(meta.get("transform", meta))


def _median(values):
    return float(statistics.median(values)) if values else 0.0


def cmd_eval(args):
    report = {"tolerance": args.tolerance, "pairs": []}
    if args.matches:
        for path in _match_files(args.matches):
            stem = os.path.basename(path)[: -len(".matches.txt")]
            prefix = path[: -len(".matches.txt")]
            gt = _ground_truth(args.gt, stem)
            rows, est, counts = matcher.read_matches(path)
            precision, empty = evaluation.match_precision(rows, gt, args.tolerance)
            inliers = sum(r[5] for r in rows)
            entry = {"pair": stem, "precision": precision, "no_matches": empty, "accepted": len(rows),
                     "inliers": inliers,
                     "recall_proxy": inliers / counts["keypoints_a"] if counts.get("keypoints_a") else 0.0}
            if os.path.exists(prefix + ".kpa.txt") and os.path.exists(prefix + ".kpb.txt"):
                entry["repeatability"] = evaluation.repeatability(
                    read_keypoints(prefix + ".kpa.txt"), read_keypoints(prefix + ".kpb.txt"), gt, args.radius)
            if est is not None:
                entry["translation_error"] = float(math.hypot(est.tx - gt.tx, est.ty - gt.ty))
            if os.path.exists(prefix + ".timing.json"):
                with open(prefix + ".timing.json") as fh:
                    entry["runtime_ms"] = json.load(fh)
            report["pairs"].append(entry)
        pr = report["pairs"]
        report["summary"] = {
            "n_pairs": len(pr),
            "median_precision": _median([p["precision"] for p in pr]),
            "median_inliers": _median([p["inliers"] for p in pr]),
            "median_recall_proxy": _median([p["recall_proxy"] for p in pr]),
            "median_repeatability": _median([p["repeatability"] for p in pr if "repeatability" in p]),
        }
    if args.manifest:
        if not args.model:
            raise InputError("--manifest needs --model for ROC scoring")
        manifest = dataset.read_manifest(args.manifest)
        recs = manifest.subset("test") or manifest.records
        params = convnet.load_model(args.model)
        x, y = convnet.as_arrays(recs, params.spec)
        _, acc, scores = convnet.evaluate(params, x, y)
        fpr, tpr, auc = evaluation.roc_curve(scores, y)
        report["roc"] = {"auc": auc, "accuracy": acc, "n": len(y),
                         "points": [[float(a), float(b)] for a, b in zip(fpr, tpr)]}
    if not args.matches and not args.manifest:
        raise InputError("eval needs --matches and/or --manifest")

    with open(_parent(args.out + ".json"), "w") as fh:
        json.dump(report, fh, indent=1, sort_keys=True)
        fh.write("\n")
    cols = ["pair", "precision", "no_matches", "accepted", "inliers", "recall_proxy",
            "repeatability", "translation_error"]
    with open(args.out + ".csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(cols)
        for p in report["pairs"]:
            w.writerow([p.get(c, "") for c in cols])
        if "roc" in report:
            w.writerow([])
            w.writerow(["roc_auc", report["roc"]["auc"], "accuracy", report["roc"]["accuracy"]])
    return EXIT_OK


# --------------------------------------------------------------------- parser

def build_parser():
    p = argparse.ArgumentParser(prog="phasematch", description=__doc__.splitlines()[0])
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--threads", type=int, default=None, help="cap BLAS threads (1 for reproducible runs)")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="write synthetic aligned image pairs")
    s.add_argument("--params", help="JSON file of SynthParams fields")
    s.add_argument("--count", type=int, required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--size", type=int)
    s.add_argument("--max-shift", type=int)
    s.add_argument("--viewpoint", choices=("aligned", "reversed"))
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("detect", help="phase-congruency keypoints of one image")
    s.add_argument("image")
    s.add_argument("--out", required=True)
    s.add_argument("--maps", help="prefix for moment-map rasters")
    s.add_argument("--border", type=int, default=16)
    _bank_args(s)
    s.set_defaults(func=cmd_detect)

    s = sub.add_parser("build-dataset", help="slice aligned pairs into a labeled manifest")
    s.add_argument("--pairs", required=True)
    s.add_argument("--size", type=int, choices=convnet.PATCH_SIZES, default=32)
    s.add_argument("--stride", type=int, default=16)
    s.add_argument("--ratios", type=float, nargs=3, default=(0.7, 0.15, 0.15))
    s.add_argument("--cross-pair", action="store_true")
    s.add_argument("--displaced-fraction", type=float, default=0.0,
                   help="share of negatives built from slightly displaced B windows")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_build_dataset)

    s = sub.add_parser("train", help="train the 2-channel network")
    s.add_argument("--manifest", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--history")
    s.add_argument("--blocks", default="32x5,64x5", help="conv blocks as OUTxKERNEL,...")
    s.add_argument("--epochs", type=int, default=20)
    s.add_argument("--batch-size", type=int, default=32)
    s.add_argument("--lr", type=float, default=0.01)
    s.add_argument("--lr-decay", type=float, default=0.5)
    s.add_argument("--lr-period", type=int, default=8)
    s.add_argument("--momentum", type=float, default=0.9)
    s.add_argument("--weight-decay", type=float, default=1e-4)
    s.add_argument("--loss", choices=("hinge", "logistic"), default="hinge")
    s.add_argument("--no-swap", action="store_true", help="disable channel-swap augmentation")
    s.add_argument("--augment", help="comma list of hflip,vflip,rot90")
    s.add_argument("--gamma", type=float, nargs=2, metavar=("LO", "HI"))
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("match", help="match two images")
    s.add_argument("img_a")
    s.add_argument("img_b")
    s.add_argument("--model")
    s.add_argument("--out", required=True, help="output prefix")
    s.add_argument("--descriptor", choices=("cnn", "ncc"), default="cnn")
    s.add_argument("--patch-size", type=int, choices=convnet.PATCH_SIZES)
    s.add_argument("--threshold", type=float, default=0.0)
    s.add_argument("--radius", type=float, default=None, help="search radius in px (default: all pairs)")
    s.add_argument("--no-mutual", action="store_true")
    s.add_argument("--geometry", choices=("translation", "similarity"), default="translation")
    s.add_argument("--iterations", type=int, default=500)
    s.add_argument("--tolerance", type=float, default=2.0)
    s.add_argument("--min-inliers", type=int, default=4)
    _bank_args(s)
    s.set_defaults(func=cmd_match)

    s = sub.add_parser("eval", help="score match files and/or a classifier")
    s.add_argument("--matches", help="match file or directory of *.matches.txt")
    s.add_argument("--gt", help="ground-truth JSON or directory of <pair>.json")
    s.add_argument("--manifest")
    s.add_argument("--model")
    s.add_argument("--tolerance", type=float, default=2.0)
    s.add_argument("--radius", type=float, default=2.0, help="repeatability radius")
    s.add_argument("--out", required=True, help="report prefix (.json and .csv)")
    s.set_defaults(func=cmd_eval)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code else EXIT_OK
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        with _threads(args.threads):
            return args.func(args)
    except (FileNotFoundError, InputError, ValueError) as exc:
        print(f"phasematch: error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except PipelineError as exc:
        print(f"phasematch: error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_PIPELINE


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
