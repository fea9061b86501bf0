"""Random vs cycle split on a synthetic campaign.

Generates the campaign, trains one model per split protocol and writes a
report directory per split plus a ``summary.csv`` comparing the test
metrics.

    python scripts/run_experiment.py --out runs/compare
    python scripts/run_experiment.py --out runs/quick --scale 0.1 --max-epochs 20
"""

import argparse
import csv
import logging
import time
from pathlib import Path

from critforge.data import split_by_cycle, split_random
from critforge.model import ModelConfig, build_model, save_model
from critforge.synth import DEFAULT_CAMPAIGN, generate_campaign, scaled_campaign
from critforge.train import TrainConfig, emit_report, train


def main():
    p = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--scale", type=float, default=1.0, help="record-count factor per cycle")
    p.add_argument("--max-epochs", type=int, default=1000)
    args = p.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")

    specs = DEFAULT_CAMPAIGN if args.scale == 1.0 else scaled_campaign(args.scale)
    ds = generate_campaign(specs, seed=args.seed)
    splits = {
        "random": split_random(len(ds), seed=args.seed),
        "cycle": split_by_cycle(ds),
    }
    rows = []
    for name, split in splits.items():
        t0 = time.perf_counter()
        res = train(build_model(ModelConfig(), init_seed=args.seed), ds, split,
                    TrainConfig(seed=args.seed, max_epochs=args.max_epochs))
        out = args.out / name
        save_model(res.model, out / "model")
        emit_report(res.reports["test"], out, companions=[res.reports["train"], res.reports["val"]])
        t = res.reports["test"]
        rows.append((name, len(split.train), len(split.val), len(split.test),
                     res.best_epoch, len(res.history), t.mse, t.r2, time.perf_counter() - t0))
        print(f"{name:6s} test MSE {t.mse:.3e}  R2 {t.r2:.4f}  best epoch {res.best_epoch}")

    with open(args.out / "summary.csv", "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(("split", "n_train", "n_val", "n_test", "best_epoch", "epochs_run",
                    "test_mse", "test_r2", "seconds"))
        for r in rows:
            w.writerow(r[:6] + tuple(f"{v:.17g}" for v in r[6:]))


if __name__ == "__main__":
    main()
