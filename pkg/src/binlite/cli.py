"""``binlite`` command line: train, eval, classify, quantize, bench, inspect.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numeric error.
"""
from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

import numpy as np

from . import data as D
from . import fileformat
from . import model as M
from . import quant as Q
from . import train as TR
from .errors import (ConfigurationError, DecodeError, IngestionError, LabelError,
                     ModelFileError, NumericError, ShapeError)

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3
ARCHS = {"scratch": "scratch_cnn", "vgg16": "vgg16", "mobilenet": "mobilenet_v2",
         "transfer": "mobilenet_transfer"}
QUANT_MODES = {"f16": "f16", "i8": "i8_dynamic"}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def _float_list(text):
    try:
        vals = [float(t) for t in text.split(",") if t.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"malformed number list {text!r}") from None
    if not vals:
        raise argparse.ArgumentTypeError("empty list")
    return vals


def _int_list(text):
    try:
        vals = [int(t) for t in text.split(",") if t.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"malformed integer list {text!r}") from None
    if not vals or min(vals) < 1:
        raise argparse.ArgumentTypeError(f"thread counts must be positive integers: {text!r}")
    return vals


def _default_seed():
    raw = os.environ.get("BINLITE_SEED")
    if raw is None:
        return 0
    try:
        return int(raw)
    except ValueError:
        raise UsageError(f"BINLITE_SEED must be an integer, got {raw!r}") from None


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="binlite", description="Train, quantize and run small image classifiers.")
    sub = p.add_subparsers(dest="verb", required=True, parser_class=_Parser)

    t = sub.add_parser("train", help="scan a folder dataset, split it and fit a model")
    t.add_argument("--data", required=True, metavar="DIR")
    t.add_argument("--arch", choices=sorted(ARCHS), default="scratch")
    t.add_argument("--classes", default="AUTO", choices=["AUTO"])
    t.add_argument("--epochs", type=int, default=30)
    t.add_argument("--lr", type=float, default=0.001)
    t.add_argument("--momentum", type=float, default=0.9)
    t.add_argument("--patience", type=int, default=3)
    t.add_argument("--batch", type=int, default=32)
    t.add_argument("--width", type=float, default=1.0)
    t.add_argument("--seed", type=int, default=None)
    t.add_argument("--size", type=int, default=M.DEFAULT_INPUT[0], help="square input side")
    t.add_argument("--ratios", type=_float_list, default=[0.7, 0.15, 0.15])
    t.add_argument("--monitor", choices=TR.MONITORS, default="val_accuracy")
    t.add_argument("--no-augment", action="store_true")
    t.add_argument("--backbone", metavar="FILE", help="model file to copy body weights from")
    t.add_argument("--out", required=True, metavar="FILE")
    t.add_argument("--report", metavar="FILE", help="TrainReport JSON (default: OUT.report.json)")
    t.add_argument("--lr-sweep", type=_float_list, default=None, metavar="LIST")
    t.add_argument("--json", action="store_true")

    e = sub.add_parser("eval", help="loss, accuracy and confusion matrix on a split")
    e.add_argument("--model", required=True, metavar="FILE")
    e.add_argument("--data", required=True, metavar="DIR")
    e.add_argument("--split", choices=["val", "test"], default="val")
    e.add_argument("--seed", type=int, default=None, help="split seed (default: recorded at train time)")
    e.add_argument("--json", action="store_true")

    c = sub.add_parser("classify", help="rank the classes for one image")
    c.add_argument("--model", required=True, metavar="FILE")
    c.add_argument("--image", required=True, metavar="FILE")
    c.add_argument("--threads", type=int, default=1)
    c.add_argument("--topk", type=int, default=None)
    c.add_argument("--json", action="store_true")

    q = sub.add_parser("quantize", help="post-training weight quantization")
    q.add_argument("--in", dest="inp", required=True, metavar="FILE")
    q.add_argument("--mode", choices=sorted(QUANT_MODES), required=True)
    q.add_argument("--out", required=True, metavar="FILE")
    q.add_argument("--verify", metavar="DIR", help="image folder for top-1 agreement vs the original")
    q.add_argument("--json", action="store_true")

    b = sub.add_parser("bench", help="single-image latency per thread count")
    b.add_argument("--model", required=True, metavar="FILE")
    b.add_argument("--threads", type=_int_list, default=[1, 2, 4], metavar="LIST")
    b.add_argument("--iters", type=int, default=10)
    b.add_argument("--warmup", type=int, default=1)
    b.add_argument("--json", action="store_true")

    i = sub.add_parser("inspect", help="architecture, layer table, parameter counts and size")
    i.add_argument("--model", required=True, metavar="FILE")
    i.add_argument("--json", action="store_true")
    return p


def _emit(args, payload: dict, text: str):
    print(json.dumps(payload, indent=2) if args.json else text)


# -- verbs ----------------------------------------------------------------------

def _fit_once(args, manifest, lr, seed, out_path, report_path):
    preset = M.ArchPreset(ARCHS[args.arch], args.width, len(manifest.class_names))
    graph = M.build_preset(preset, seed, (args.size, args.size, 3), manifest.class_names)
    if args.backbone:
        M.copy_body(graph, fileformat.load(args.backbone))
    graph.metadata["split"] = {"seed": seed, "ratios": list(args.ratios)}
    cfg = TR.TrainConfig(lr=lr, momentum=args.momentum, batch_size=args.batch,
                         max_epochs=args.epochs, patience=args.patience, seed=seed,
                         monitor=args.monitor,
                         augment=None if args.no_augment else D.AugmentConfig(),
                         checkpoint_path=str(out_path))
    log = None if args.json else print
    if not args.json:
        print(f"arch {preset.name}  params {M.param_count(graph)}  "
              f"trainable {M.param_count(graph, trainable_only=True)}  "
              f"frozen {M.param_count(graph, frozen_only=True)}  lr {lr}")
    try:
        report = TR.fit(graph, manifest, cfg, log=log)
    except NumericError as exc:
        if exc.report is not None:
            exc.report.to_json(report_path)
        raise
    fileformat.save(graph, out_path)
    report.best_checkpoint = str(out_path)
    report.to_json(report_path)
    return graph, report


def cmd_train(args) -> int:
    seed = args.seed if args.seed is not None else _default_seed()
    manifest = D.split(D.scan_directory(args.data), args.ratios, seed)
    out = Path(args.out)
    report_path = Path(args.report) if args.report else Path(f"{out}.report.json")
    if not args.lr_sweep:
        graph, report = _fit_once(args, manifest, args.lr, seed, out, report_path)
        payload = report.to_dict()
        payload.update(params=M.param_count(graph),
                       trainable_params=M.param_count(graph, trainable_only=True),
                       frozen_params=M.param_count(graph, frozen_only=True))
        text = (f"stop {report.stop_reason}  best epoch {report.best_epoch}  "
                f"{report.monitor} {report.best_metric:.4f}\n"
                f"frozen body params {payload['frozen_params']}  "
                f"trainable params {payload['trainable_params']}\n"
                f"model {out}  report {report_path}")
        _emit(args, payload, text)
        return EXIT_OK

    rows = []
    best = None
    for lr in args.lr_sweep:
        tag = f"lr{lr:g}"
        path = out.with_name(f"{out.stem}.{tag}{out.suffix}")
        rpath = out.with_name(f"{out.stem}.{tag}.report.json")
        try:
            _, rep = _fit_once(args, manifest, lr, seed, path, rpath)
            last = rep.epochs[-1]
            row = dict(lr=lr, best_epoch=rep.best_epoch, best_metric=rep.best_metric,
                       final_val_acc=last["val_acc"], final_val_loss=last["val_loss"],
                       stop_reason=rep.stop_reason, model=str(path))
        except NumericError:
            row = dict(lr=lr, best_epoch=None, best_metric=None, final_val_acc=None,
                       final_val_loss=None, stop_reason="numeric_error", model=None)
        rows.append(row)
        if row["best_metric"] is not None:
            better = (best is None or (row["best_metric"] < best["best_metric"]
                                       if args.monitor == "val_loss"
                                       else row["best_metric"] > best["best_metric"]))
            if better:
                best = row
    if best is not None:
        fileformat.save(fileformat.load(best["model"]), out)
    sweep = dict(monitor=args.monitor, rows=rows, best_lr=best["lr"] if best else None)
    Path(f"{out}.sweep.json").write_text(json.dumps(sweep, indent=2))
    lines = [f"{'lr':>8}  {'best_epoch':>10}  {'best ' + args.monitor:>18}  {'stop':>14}"]
    for r in rows:
        metric = "nan" if r["best_metric"] is None else f"{r['best_metric']:.4f}"
        lines.append(f"{r['lr']:>8g}  {str(r['best_epoch']):>10}  {metric:>18}  {r['stop_reason']:>14}")
    lines.append(f"best lr {sweep['best_lr']}")
    _emit(args, sweep, "\n".join(lines))
    return EXIT_OK


def cmd_eval(args) -> int:
    graph = fileformat.load(args.model)
    recorded = graph.metadata.get("split", {})
    seed = args.seed if args.seed is not None else recorded.get("seed", _default_seed())
    ratios = recorded.get("ratios", [0.7, 0.15, 0.15])
    manifest = D.split(D.scan_directory(args.data), ratios, seed)
    if manifest.class_names != graph.class_names:
        raise IngestionError(f"dataset classes {manifest.class_names} differ from the model's")
    loss, acc, conf = TR.evaluate(graph, manifest, args.split)
    payload = dict(split=args.split, loss=loss, accuracy=acc, confusion=conf.tolist(),
                   class_names=graph.class_names)
    width = max(len(n) for n in graph.class_names)
    lines = [f"split {args.split}  loss {loss:.4f}  accuracy {acc:.4f}", "confusion (rows = true):"]
    for name, row in zip(graph.class_names, conf):
        lines.append(f"  {name:<{width}}  " + " ".join(f"{v:5d}" for v in row))
    _emit(args, payload, "\n".join(lines))
    return EXIT_OK


def cmd_classify(args) -> int:
    if args.threads < 1:
        raise ConfigurationError("--threads must be >= 1")
    graph = fileformat.load(args.model)
    image = D.preprocess(D.load_image(args.image), graph.input_shape[:2])
    probs, ms = Q.infer(graph, image[None], args.threads)
    k = graph.num_classes if args.topk is None else args.topk
    if k < 1:
        raise ConfigurationError("--topk must be >= 1")
    order = np.argsort(-probs[0], kind="stable")[:k]
    ranked = [(graph.class_names[i], float(probs[0, i])) for i in order]
    payload = dict(predictions=[{"class": c, "probability": p} for c, p in ranked], latency_ms=ms)
    lines = [f"{c}\t{p:.6f}" for c, p in ranked] + [f"latency_ms\t{ms:.3f}"]
    _emit(args, payload, "\n".join(lines))
    return EXIT_OK


def _verify_images(root):
    root = Path(root)
    if any(p.is_dir() for p in root.iterdir()):
        manifest = D.scan_directory(root)
        paths = [root / rel for rel, _ in manifest.entries]
    else:
        paths = sorted(p for p in root.iterdir() if p.suffix.lower() in D.IMAGE_EXTENSIONS)
    if not paths:
        raise IngestionError(f"no images found under {root}")
    return paths


def cmd_quantize(args) -> int:
    graph = fileformat.load(args.inp)
    qgraph = Q.quantize(graph, QUANT_MODES[args.mode])
    size_in = Path(args.inp).stat().st_size
    size_out = fileformat.save(qgraph, args.out)
    payload = dict(mode=args.mode, input_bytes=size_in, output_bytes=size_out,
                   size_ratio=size_out / size_in)
    text = f"{args.mode}: {size_in} -> {size_out} bytes  ratio {size_out / size_in:.4f}"
    if args.verify:
        paths = _verify_images(args.verify)
        batch = np.stack([D.preprocess(D.load_image(p), graph.input_shape[:2]) for p in paths])
        agree = Q.top1_agreement(graph, Q.dequantize_once(qgraph), batch)
        payload.update(verify_images=len(paths), top1_agreement=agree)
        text += f"\ntop-1 agreement vs f32 on {len(paths)} images: {agree:.4f}"
    _emit(args, payload, text)
    return EXIT_OK


def cmd_bench(args) -> int:
    graph = Q.dequantize_once(fileformat.load(args.model))
    report = Q.bench(graph, args.threads, args.iters, args.warmup)
    if args.json:
        print(report.to_json())
    else:
        print(report.table())
    return EXIT_OK


def _f32_equivalent(graph) -> int:
    if Q.weight_dtype(graph) == "f32":
        return len(fileformat.dumps(graph))
    import copy

    g = copy.deepcopy(graph)
    for st in g.states:
        w = st.params.get("weight")
        if w is not None and not isinstance(w, np.ndarray):
            st.params["weight"] = w.dequantize()
    return len(fileformat.dumps(g))


def cmd_inspect(args) -> int:
    graph = fileformat.load(args.model)
    size = Path(args.model).stat().st_size
    f32_size = _f32_equivalent(graph)
    rows = []
    shapes = graph.shapes
    for i, (spec, st) in enumerate(graph.layers):
        n = sum(int(np.prod(p.shape)) for p in st.params.values())
        rows.append(dict(index=i, kind=spec.kind, group=spec.group, trainable=spec.trainable,
                         output_shape=list(shapes[i + 1]), params=n))
    payload = dict(arch=graph.metadata.get("arch"), input_shape=list(graph.input_shape),
                   class_names=graph.class_names, dtype=Q.weight_dtype(graph),
                   params=M.param_count(graph),
                   trainable_params=M.param_count(graph, trainable_only=True),
                   frozen_params=M.param_count(graph, frozen_only=True),
                   file_size_bytes=size, f32_size_bytes=f32_size, size_ratio=size / f32_size,
                   layers=rows, metadata=graph.metadata)
    lines = [f"arch {payload['arch']}  input {graph.input_shape}  classes {graph.num_classes}  "
             f"dtype {payload['dtype']}",
             f"params {payload['params']}  trainable {payload['trainable_params']}  "
             f"frozen {payload['frozen_params']}",
             f"file size {size} bytes  f32 size {f32_size} bytes  size ratio {size / f32_size:.4f}",
             f"{'idx':>4}  {'kind':<15} {'group':<5} {'train':<5} {'output':<16} {'params':>10}"]
    for r in rows:
        lines.append(f"{r['index']:>4}  {r['kind']:<15} {r['group']:<5} {str(r['trainable']):<5} "
                     f"{'x'.join(map(str, r['output_shape'])):<16} {r['params']:>10}")
    _emit(args, payload, "\n".join(lines))
    return EXIT_OK


VERBS = dict(train=cmd_train, eval=cmd_eval, classify=cmd_classify, quantize=cmd_quantize,
             bench=cmd_bench, inspect=cmd_inspect)


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return VERBS[args.verb](args)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    except (ConfigurationError, ShapeError, LabelError) as exc:
        print(f"binlite: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except NumericError as exc:
        print(f"binlite: numeric error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (IngestionError, DecodeError, ModelFileError, OSError) as exc:
        print(f"binlite: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
