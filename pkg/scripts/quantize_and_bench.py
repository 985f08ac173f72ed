"""Quantize a preset both ways and print file sizes, agreement and latency per thread count."""
import argparse

import numpy as np

from binlite import fileformat
from binlite.model import ArchPreset, build_preset
from binlite.quant import bench, dequantize_once, quantize, top1_agreement


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--arch", default="mobilenet_v2",
                    choices=["scratch_cnn", "vgg16", "mobilenet_v2", "mobilenet_transfer"])
    ap.add_argument("--width", type=float, default=1.0)
    ap.add_argument("--threads", default="1,2,4")
    ap.add_argument("--iters", type=int, default=10)
    ap.add_argument("--probe", type=int, default=50, help="random inputs for top-1 agreement")
    args = ap.parse_args()
    g = build_preset(ArchPreset(args.arch, args.width, 6), 0)
    f32 = len(fileformat.dumps(g))
    x = np.random.default_rng(0).random((args.probe, *g.input_shape), dtype=np.float32)
    threads = [int(t) for t in args.threads.split(",")]
    for name, graph in (("f32", g), ("f16", quantize(g, "f16")), ("i8", quantize(g, "i8_dynamic"))):
        graph = dequantize_once(graph)
        size = len(fileformat.dumps(graph))
        agree = top1_agreement(g, graph, x) if name != "f32" else 1.0
        print(f"\n{name}: {size} bytes ({size / f32:.3f}x of f32), top-1 agreement {agree:.3f}")
        print(bench(graph, threads, args.iters).table())


if __name__ == "__main__":
    main()
