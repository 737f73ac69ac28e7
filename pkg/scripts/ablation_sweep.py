"""Train every ablation preset over several seeds, print per-run rows, a summary
table and the ordering checks.

    python3 scripts/ablation_sweep.py --out sweep.jsonl
    python3 scripts/ablation_sweep.py --seeds 0 --presets base-fcn 2mpm --iters 200
"""

import argparse
import json
import logging
from dataclasses import replace

import numpy as np

from strippool.ablation import SweepConfig, check_orderings, run_sweep
from strippool.data import SyntheticSceneSpec

DEFAULT = SweepConfig()


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--presets", nargs="+", default=list(DEFAULT.presets))
    ap.add_argument("--seeds", nargs="+", type=int, default=list(DEFAULT.seeds))
    ap.add_argument("--iters", type=int, default=DEFAULT.max_iter)
    ap.add_argument("--lr", type=float, default=DEFAULT.base_lr)
    ap.add_argument("--batch", type=int, default=DEFAULT.batch_size)
    ap.add_argument("--train-size", type=int, default=DEFAULT.train_size)
    ap.add_argument("--test-size", type=int, default=DEFAULT.test_size)
    ap.add_argument("--neck", type=int, default=DEFAULT.neck_width)
    ap.add_argument("--scene", default="{}", help="JSON overrides for SyntheticSceneSpec")
    ap.add_argument("--out", default=None)
    args = ap.parse_args()
    logging.basicConfig(level=logging.WARNING)

    scene_d = json.loads(args.scene)
    for key in ("band_width", "blob_size"):
        if key in scene_d:
            scene_d[key] = tuple(scene_d[key])
    cfg = replace(DEFAULT, presets=tuple(args.presets), seeds=tuple(args.seeds), max_iter=args.iters,
                  base_lr=args.lr, batch_size=args.batch, train_size=args.train_size,
                  test_size=args.test_size, neck_width=args.neck, scene=SyntheticSceneSpec(**scene_d))
    sink = open(args.out, "a") if args.out else None

    def emit(seed, r):
        row = {"preset": r.preset, "seed": seed, "miou": r.report.miou, "pixel_acc": r.report.pixel_acc,
               "iou": [None if np.isnan(v) else round(float(v), 4) for v in r.report.iou],
               "seconds": round(r.seconds, 1), "final_loss": float(np.mean([h[2] for h in r.history[-20:]]))}
        print(json.dumps(row), flush=True)
        if sink:
            sink.write(json.dumps(row) + "\n")
            sink.flush()

    scores = run_sweep(cfg, emit)
    print(f"{'preset':<12} {'mean':>7} {'std':>7}  per-seed")
    for preset, vals in scores.items():
        print(f"{preset:<12} {np.mean(vals):7.4f} {np.std(vals, ddof=1) if len(vals) > 1 else 0:7.4f}  "
              + " ".join(f"{v:.4f}" for v in vals))
    if set(scores) == set(DEFAULT.presets):
        for c in check_orderings(scores):
            print(f"{c.higher:>10} > {c.lower:<12} margin {c.margin:+.4f}  std {c.lower_std:.4f}  "
                  f"{'ok' if c.holds else 'FAIL'}")


if __name__ == "__main__":
    main()
