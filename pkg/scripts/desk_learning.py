"""Train scratch_cnn on the six-class synthetic corpus and report validation accuracy.

The default input side is 64 px so a run finishes in about a minute on one core;
``--size 224`` runs the full-resolution pipeline (roughly 12x slower per epoch).
"""
import argparse
import json

from binlite.experiments import DeskLearningConfig, desk_learning


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--size", type=int, default=64, help="network input side in pixels")
    ap.add_argument("--render-size", type=int, default=None, help="side of the images written to disk")
    ap.add_argument("--width", type=float, default=0.25)
    ap.add_argument("--batch", type=int, default=8)
    ap.add_argument("--epochs", type=int, default=30)
    ap.add_argument("--patience", type=int, default=3)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--root", default=None, help="keep the generated corpus here")
    ap.add_argument("--json", metavar="FILE", help="write the training report here")
    args = ap.parse_args()
    cfg = DeskLearningConfig(input_size=args.size, render_size=args.render_size or max(64, args.size),
                             width=args.width, batch_size=args.batch, max_epochs=args.epochs,
                             patience=args.patience, seed=args.seed)
    res = desk_learning(cfg, root=args.root, log=print)
    print(f"splits {res.counts}")
    print(f"best val accuracy {res.best_val_accuracy:.4f} at epoch {res.report.best_epoch} "
          f"({res.report.stop_reason}); test accuracy {res.test_accuracy:.4f}; {res.seconds:.0f} s")
    if args.json:
        with open(args.json, "w") as fh:
            json.dump(dict(report=res.report.to_dict(), test_accuracy=res.test_accuracy,
                           counts=res.counts), fh, indent=2)


if __name__ == "__main__":
    main()
