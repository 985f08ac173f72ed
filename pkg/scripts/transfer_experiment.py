"""Pretrain mobilenet_v2 on shape task A, then compare frozen-body heads on task B.

The comparison is a pretrained body against a randomly initialised body, with the
same head seed, averaged over several seeds.
"""
import argparse
import json

from binlite.experiments import TransferConfig, transfer_benefit


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--seeds", default="0,1,2")
    ap.add_argument("--size", type=int, default=32)
    ap.add_argument("--width", type=float, default=0.25)
    ap.add_argument("--pretrain-epochs", type=int, default=20)
    ap.add_argument("--head-epochs", type=int, default=10)
    ap.add_argument("--json", metavar="FILE")
    args = ap.parse_args()
    cfg = TransferConfig(seeds=tuple(int(s) for s in args.seeds.split(",")), input_size=args.size,
                         width=args.width, pretrain_epochs=args.pretrain_epochs,
                         head_epochs=args.head_epochs)
    res = transfer_benefit(cfg, log=print)
    print(f"margin {res.margin_points:.1f} points in {res.seconds:.0f} s")
    if args.json:
        with open(args.json, "w") as fh:
            json.dump(res.to_dict(), fh, indent=2)


if __name__ == "__main__":
    main()
