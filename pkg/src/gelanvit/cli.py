"""Command-line entry point: ``gelanvit {gen-data,train,eval,flops,info}``.

Exit codes: 0 success, 1 invalid input (flags, configs, specs, labels,
checkpoints, class mismatches), 2 runtime failure.  Report files given with
``--out`` carry a versioned header and are written atomically.
"""

from __future__ import annotations

import argparse
import sys

from . import fileio
from . import zoo as Z
from .checkpoint import load_checkpoint
from .data import Dataset, GenerationError, gen_dataset
from .detect import NmsConfig
from .tensor import NonFiniteError
from .train import TrainConfig, evaluate, evaluate_runs, load_config, train

EXIT_OK, EXIT_INVALID, EXIT_RUNTIME = 0, 1, 2
EVAL_RUNS_HEADER = "# eval runs v1"


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def _positive(text: str) -> int:
    v = int(text)
    if v < 1:
        raise argparse.ArgumentTypeError(f"must be >= 1, got {v}")
    return v


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="gelanvit", description=__doc__.splitlines()[0], allow_abbrev=False)
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("gen-data", help="generate a synthetic dataset", allow_abbrev=False)
    g.add_argument("--out", required=True, help="dataset directory to create")
    g.add_argument("--n", type=_positive, required=True, help="number of images")
    g.add_argument("--classes", type=_positive, default=3, help="number of object classes (default 3)")
    g.add_argument("--img", type=_positive, default=64, help="square image side in pixels (default 64)")
    g.add_argument("--seed", type=int, default=0, help="generator seed (default 0)")

    t = sub.add_parser("train", help="train a model on a dataset", allow_abbrev=False)
    t.add_argument("--data", required=True, help="training dataset directory")
    t.add_argument("--out", required=True, help="run directory for checkpoints, log and config")
    t.add_argument("--config", help="TrainConfig JSON file (defaults when omitted)")
    t.add_argument("--model", help="zoo model name; overrides the config")
    t.add_argument("--epochs", type=_positive, help="overrides the config")
    t.add_argument("--val", help="validation dataset directory (default: the training set)")

    e = sub.add_parser("eval", help="evaluate a checkpoint", allow_abbrev=False)
    e.add_argument("--model", required=True, help="checkpoint file")
    e.add_argument("--data", required=True, help="dataset directory")
    e.add_argument("--runs", type=_positive, default=1, help="repeat evaluation R times and report mean +- spread")
    e.add_argument("--conf", type=float, default=0.001, help="confidence threshold (default 0.001)")
    e.add_argument("--iou", type=float, default=0.45, help="NMS IoU threshold (default 0.45)")
    e.add_argument("--dets", help="write the detection file here")
    e.add_argument("--out", help="write the metrics report here")

    for name, helptext in (("flops", "complexity report and capacity ledger"), ("info", "layer table of a graph spec")):
        f = sub.add_parser(name, help=helptext, allow_abbrev=False)
        src = f.add_mutually_exclusive_group(required=True)
        src.add_argument("--model", help=f"zoo model name ({', '.join(Z.SHIPPED)})")
        src.add_argument("--spec", help="graph spec file")
        if name == "flops":
            f.add_argument("--img", type=_positive, default=640, help="square input side (default 640)")
            f.add_argument("--out", help="write the report here")
    return p


def _spec(args) -> Z.GraphSpec:
    return Z.zoo_spec(args.model) if args.model else Z.load_spec(args.spec)


def _write_out(path, text: str) -> None:
    fileio.write_text(path, text if text.endswith("\n") else text + "\n")


def cmd_gen_data(args) -> int:
    m = gen_dataset(args.n, args.classes, args.img, args.seed, args.out)
    print(f"wrote {m['count']} images with {m['objects']} objects to {args.out}")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = load_config(args.config) if args.config else TrainConfig()
    overrides = {k: v for k, v in (("model", args.model), ("epochs", args.epochs)) if v is not None}
    if overrides:
        cfg = cfg.with_(**overrides)
    ds = Dataset(args.data)
    val = Dataset(args.val) if args.val else None

    def progress(row):
        print(f"epoch {row.epoch:>4}  lr {row.lr:.6f}  box {row.box:.4f}  cls {row.cls:.4f}  obj {row.obj:.4f}"
              f"  mAP50 {row.val_map50:.4f}  mAP50:95 {row.val_map50_95:.4f}", flush=True)

    _, log = train(cfg, ds, val_dataset=val, out_dir=args.out, progress=progress)
    best = max(log.rows, key=lambda r: r.val_map50)
    print(f"best mAP50 {best.val_map50:.6f} at epoch {best.epoch}; run written to {args.out}")
    return EXIT_OK


def cmd_eval(args) -> int:
    model = load_checkpoint(args.model)
    ds = Dataset(args.data)
    nms = NmsConfig(args.conf, args.iou)
    if args.runs == 1:
        report = evaluate(model, ds, nms, det_path=args.dets)
        text = report.format()
    else:
        if args.dets:
            evaluate(model, ds, nms, det_path=args.dets)
        summary = evaluate_runs(model, ds, nms, args.runs)
        text = summary.reports[0].format() + EVAL_RUNS_HEADER + "\n" + summary.format()
    sys.stdout.write(text)
    if args.out:
        _write_out(args.out, text)
    return EXIT_OK


def cmd_flops(args) -> int:
    spec = _spec(args)
    hw = (args.img, args.img)
    text = Z.count_flops(spec, hw).format() + "\n" + Z.capacity_report(spec, hw).format() + "\n"
    sys.stdout.write(text)
    if args.out:
        _write_out(args.out, text)
    return EXIT_OK


def cmd_info(args) -> int:
    spec = _spec(args)
    rows = {r.id: r for r in Z.count_params(spec).rows}
    print(f"# graph spec v{spec.spec_version}  name={spec.name}  width_scale={spec.width_scale:g}  "
          f"input={spec.input_hw[0]}x{spec.input_hw[1]}  classes={spec.num_classes}")
    print(f"{'id':>4} {'kind':<17} {'from':<10} {'path':<7} {'params':>9}  {'out_shape':<12} args")
    for ly in spec.layers:
        r = rows[ly.id]
        src = ",".join("input" if i == Z.INPUT else str(i) for i in ly.inputs)
        shape = "x".join(str(v) for v in r.out_shape)
        extra = " ".join(f"{k}={v}" for k, v in sorted(ly.params.items()))
        print(f"{ly.id:>4} {ly.kind:<17} {src:<10} {ly.path:<7} {r.params:>9}  {shape:<12} {extra}")
    print(f"total_params {sum(r.params for r in rows.values())}")
    return EXIT_OK


COMMANDS = {"gen-data": cmd_gen_data, "train": cmd_train, "eval": cmd_eval, "flops": cmd_flops, "info": cmd_info}

# ValueError covers ConfigError, SpecError, LabelError, CheckpointError and shape errors
_INVALID = (ValueError, FileNotFoundError)


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_INVALID
    try:
        return COMMANDS[args.command](args)
    except _INVALID as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except (GenerationError, NonFiniteError, OSError, RuntimeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except KeyboardInterrupt:
        print("interrupted", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
