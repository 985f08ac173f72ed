"""Write a folder-per-class corpus of coloured shapes, ready for ``binlite train --data``."""
import argparse

from binlite import synth


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("root")
    ap.add_argument("--task", choices=["A", "B"], default="A")
    ap.add_argument("--per-class", type=int, default=100)
    ap.add_argument("--size", type=int, default=64)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()
    classes = synth.TASK_A if args.task == "A" else synth.TASK_B
    root = synth.write_dataset(args.root, classes, args.per_class, args.size, args.seed)
    print(f"wrote {args.per_class * len(classes)} images in {len(classes)} classes to {root}")


if __name__ == "__main__":
    main()
