"""Command-line interface.

Every command prints its fully resolved configuration as one JSON line on
stderr (prefixed ``config:``). Expected failures exit nonzero with a single
``error[<Kind>]: <message>`` line on stderr.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .atlas import MODES, aggregate_relevance, format_reports, load_atlas, top_k
from .attribution import METHODS, LRP_RULES, OCCLUSION, REGION_OCCLUSION, LRP, average_maps, compute_map
from .dataset import SynthesisConfig, generate_synthetic, load_split, normalize, read_manifest
from .errors import VolexplainError
from .model import default_spec, init_network, parse_spec, predict
from .training import TrainConfig, evaluate, train
from .volumes import read_map, read_volume, write_map
from .weights import read_weights, save_weights
from .render import render_slice

log = logging.getLogger("volexplain")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _triple_arg(text: str):
    parts = text.lower().split("x")
    try:
        vals = [int(p) for p in parts]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected N or AxBxC, got {text!r}") from None
    if len(vals) == 1:
        return vals * 3
    if len(vals) != 3:
        raise argparse.ArgumentTypeError(f"expected N or AxBxC, got {text!r}")
    return vals


def _index_arg(text: str):
    return text if text == "middle" else int(text)


def _write_json(obj, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _load_input(path, normalize_volume: bool) -> np.ndarray:
    v = read_volume(path)
    return normalize(v) if normalize_volume else v


# ---------------------------------------------------------------------------
# commands


def cmd_synth(args, config: dict) -> int:
    cfg = SynthesisConfig(
        extent=args.extent,
        region_count=args.regions,
        planted_region_label=args.planted_region,
        class_effect_magnitude=args.magnitude,
        noise_sigma=args.noise,
        samples_per_class=args.samples_per_class,
        rng_seed=args.seed,
        class_names=tuple(args.classes),
        background_amplitude=args.background,
        smoothing_sigma=args.smoothing,
        train_fraction=args.train_fraction,
        val_fraction=args.val_fraction,
    )
    config["synthesis"] = {k: getattr(cfg, k) for k in cfg.__dataclass_fields__}
    _emit_config(config)
    ds = generate_synthetic(cfg, args.out)
    print(ds.manifest_path)
    return 0


def cmd_train(args, config: dict) -> int:
    spec = parse_spec(Path(args.spec).read_text(encoding="utf-8")) if args.spec else default_spec()
    cfg = TrainConfig(
        epochs=args.epochs,
        learning_rate=args.lr,
        lr_decay_factor=args.lr_decay,
        decay_period_epochs=args.decay_period,
        batch_size=args.batch_size,
        rng_seed=args.seed,
        l2=args.l2,
    )
    metrics_path = args.metrics or f"{args.out}.metrics.json"
    config["train"] = cfg.to_dict()
    config["metrics"] = metrics_path
    _emit_config(config)

    manifest = read_manifest(args.manifest)
    x, y = load_split(args.manifest, manifest, args.split, spec.class_names, args.normalize)
    net, history = train(init_network(spec, args.seed), x, y, cfg)
    save_weights(net, args.out)

    metrics = {"config": config, "history": [vars(m) for m in history]}
    for split in ("val", "test"):
        if manifest.select(split):
            xs, ys = load_split(args.manifest, manifest, split, spec.class_names, args.normalize)
            acc, confusion = evaluate(net, xs, ys)
            metrics[split] = {"accuracy": acc, "confusion": confusion.tolist(), "count": len(ys)}
            print(f"{split} accuracy {acc:.4f} ({len(ys)} volumes)")
    _write_json(metrics, metrics_path)
    return 0


def cmd_classify(args, config: dict) -> int:
    _emit_config(config)
    net = read_weights(args.weights)
    v = _load_input(args.volume, args.normalize)
    idx, name, probs = predict(net, v[None])
    print(name)
    for cname, p in zip(net.spec.class_names, probs):
        print(f"{cname}\t{p:.4f}")
    return 0


def _method_options(args, net) -> dict:
    if args.method == OCCLUSION:
        return {"patch": args.patch, "stride": args.stride, "baseline": args.baseline}
    if args.method == REGION_OCCLUSION:
        if not args.atlas:
            raise UsageError("region-occlusion requires --atlas")
        return {"atlas": read_volume(args.atlas).astype(np.int64), "baseline": args.baseline}
    if args.method == LRP:
        return {"rule": args.rule, "epsilon": args.epsilon}
    return {}


def cmd_attribute(args, config: dict) -> int:
    net = read_weights(args.weights)
    v = _load_input(args.volume, args.normalize)
    target = predict(net, v[None])[0] if args.target is None else net.spec.class_index(args.target)
    config["target_class"] = target
    config["target_name"] = net.spec.class_names[target]
    _emit_config(config)
    options = _method_options(args, net)
    amap = compute_map(net, v[None], args.method, target, **options)
    write_map(amap, args.out, config)
    print(args.out)
    return 0


def cmd_average(args, config: dict) -> int:
    _emit_config(config)
    avg = average_maps(read_map(p) for p in args.maps)
    write_map(avg, args.out, config)
    print(args.out)
    return 0


def cmd_aggregate(args, config: dict) -> int:
    _emit_config(config)
    atlas = load_atlas(args.atlas, args.names)
    reports = [top_k(aggregate_relevance(read_map(p), atlas, args.mode), args.k) for p in args.maps]
    text = format_reports(reports)
    if args.out:
        Path(args.out).write_text(text, encoding="utf-8")
    sys.stdout.write(text)
    for p, r in zip(args.maps, reports):
        if r.degenerate:
            print(f"warning: {p}: total relevance is zero, percentages reported as 0", file=sys.stderr)
    return 0


def cmd_render(args, config: dict) -> int:
    _emit_config(config)
    volume = read_volume(args.input)
    comment = json.dumps({k: config[k] for k in ("input", "axis", "index", "signed")}, sort_keys=True)
    render_slice(volume, args.axis, args.index, args.out, signed=args.signed, comment=comment)
    print(args.out)
    return 0


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="volexplain", description="3-D CNN classification and attribution for brain volumes.")
    p.add_argument("--version", action="version", version=f"volexplain {__version__}")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("synth", help="generate a synthetic dataset with a planted region effect")
    s.add_argument("--out", required=True, help="output directory")
    s.add_argument("--extent", type=int, default=16, help="cubic volume side (default 16)")
    s.add_argument("--regions", type=int, default=8, help="number of box atlas regions (default 8)")
    s.add_argument("--planted-region", type=int, default=1, help="atlas label carrying the class effect")
    s.add_argument("--magnitude", type=float, default=3.0, help="class effect added to the planted region")
    s.add_argument("--noise", type=float, default=1.0, help="voxel noise standard deviation")
    s.add_argument("--background", type=float, default=1.0, help="smooth background amplitude")
    s.add_argument("--smoothing", type=float, default=2.0, help="background smoothing sigma in voxels")
    s.add_argument("--samples-per-class", type=int, default=40)
    s.add_argument("--classes", nargs=2, default=["CN", "AD"], metavar=("NEG", "POS"))
    s.add_argument("--train-fraction", type=float, default=0.8)
    s.add_argument("--val-fraction", type=float, default=0.1)
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_synth)

    t = sub.add_parser("train", help="train a network from a manifest")
    t.add_argument("--manifest", required=True, help="CSV manifest: subject_id,path,label[,split]")
    t.add_argument("--spec", help="network spec text file (default: built-in 16^3 network)")
    t.add_argument("--out", required=True, help="output weight file")
    t.add_argument("--metrics", help="metrics JSON (default: <out>.metrics.json)")
    t.add_argument("--split", default="train", help="manifest split to train on (default train)")
    t.add_argument("--epochs", type=int, default=30)
    t.add_argument("--lr", type=float, default=1e-4, help="base learning rate")
    t.add_argument("--lr-decay", type=float, default=0.1, help="learning-rate factor per decay period")
    t.add_argument("--decay-period", type=int, default=7, help="epochs per decay step")
    t.add_argument("--batch-size", type=int, default=16)
    t.add_argument("--l2", type=float, default=0.0, help="L2 coefficient on kernels/weights")
    t.add_argument("--seed", type=int, default=0, help="seeds initialization and shuffling")
    t.add_argument("--normalize", action="store_true", help="z-score each volume over voxels > 0")
    t.set_defaults(func=cmd_train)

    c = sub.add_parser("classify", help="print the predicted class and probabilities")
    c.add_argument("--weights", required=True)
    c.add_argument("volume")
    c.add_argument("--normalize", action="store_true")
    c.set_defaults(func=cmd_classify)

    a = sub.add_parser("attribute", help="compute an attribution map (float64 VVOL + JSON sidecar)")
    a.add_argument("--weights", required=True)
    a.add_argument("volume")
    a.add_argument("--method", required=True, choices=METHODS)
    a.add_argument("--target", help="class name or index (default: predicted class)")
    a.add_argument("--out", required=True)
    a.add_argument("--patch", type=_triple_arg, default=[4, 4, 4], help="occlusion cube side, N or AxBxC")
    a.add_argument("--stride", type=_triple_arg, default=[2, 2, 2], help="occlusion stride, N or AxBxC")
    a.add_argument("--baseline", type=float, default=0.0, help="occlusion fill value")
    a.add_argument("--atlas", help="label volume for region-occlusion")
    a.add_argument("--rule", choices=LRP_RULES, default="epsilon", help="LRP rule")
    a.add_argument("--epsilon", type=float, default=1e-6, help="LRP epsilon stabilizer")
    a.add_argument("--normalize", action="store_true")
    a.set_defaults(func=cmd_attribute)

    v = sub.add_parser("average", help="average maps of one method and target class")
    v.add_argument("maps", nargs="+")
    v.add_argument("--out", required=True)
    v.set_defaults(func=cmd_average)

    g = sub.add_parser("aggregate", help="rank atlas regions by relevance, one table column per map")
    g.add_argument("maps", nargs="+")
    g.add_argument("--atlas", required=True, help="label volume (.vvol or .nii)")
    g.add_argument("--names", required=True, help="label<TAB>name file")
    g.add_argument("-k", type=int, default=5, help="regions per column (default 5)")
    g.add_argument("--mode", choices=MODES, help="relevance transform (default depends on method)")
    g.add_argument("--out", help="also write the table to this file")
    g.set_defaults(func=cmd_aggregate)

    r = sub.add_parser("render", help="render one slice of a map or volume to PGM")
    r.add_argument("input")
    r.add_argument("--axis", type=int, choices=(0, 1, 2), default=0)
    r.add_argument("--index", type=_index_arg, default="middle", help="slice index or 'middle'")
    r.add_argument("--signed", action="store_true", help="symmetric scale with zero at mid-gray")
    r.add_argument("--out", required=True)
    r.set_defaults(func=cmd_render)
    return p


def _emit_config(config: dict) -> None:
    print("config: " + json.dumps(config, sort_keys=True), file=sys.stderr)


def _error(kind: str, message: str) -> None:
    message = " ".join(str(message).split())
    print(f"error[{kind}]: {message}", file=sys.stderr)


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as e:
        _error("UsageError", e)
        return 2
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s", stream=sys.stderr)
    config = {k: v for k, v in vars(args).items() if k not in ("func", "verbose")}
    try:
        return args.func(args, config)
    except UsageError as e:
        _error("UsageError", e)
        return 2
    except (VolexplainError, ValueError, OSError) as e:
        _error(type(e).__name__, e)
        return 1


if __name__ == "__main__":
    sys.exit(main())
