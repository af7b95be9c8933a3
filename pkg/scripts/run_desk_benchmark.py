#!/usr/bin/env python3
"""Desk-scale end-to-end benchmark on synthetic scenes.

Generates a train and a held-out test split, fits the fusion +
registration networks on one core, then reports mean cPSNR and the
baseline-normalized score against both reference methods.

    python3 scripts/run_desk_benchmark.py --work /tmp/bench --epochs 160
"""

import argparse
import sys
import time
from pathlib import Path

import numpy as np

sys.path.insert(0, str(Path(__file__).resolve().parent.parent / "src"))

from mfsr.metrics import leaderboard_score
from mfsr.scenes import SynthConfig, load_dataset, synth_dataset
from mfsr.trainer import TrainConfig, baseline_scores, evaluate, train


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--work", required=True, help="working directory")
    ap.add_argument("--train-scenes", type=int, default=64)
    ap.add_argument("--test-scenes", type=int, default=16)
    ap.add_argument("--hr-side", type=int, default=144)
    ap.add_argument("--views", type=int, default=8)
    ap.add_argument("--sigma", type=float, default=0.02)
    ap.add_argument("--epochs", type=int, default=200)
    ap.add_argument("--lr", type=float, default=5e-3)
    ap.add_argument("--patch", type=int, default=32)
    ap.add_argument("--batch", type=int, default=2)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()

    work = Path(args.work)
    base = SynthConfig(hr_side=args.hr_side, views=args.views, noise_sigma=args.sigma)
    if not (work / "train").is_dir():
        synth_dataset(work / "train", args.train_scenes, base, base_seed=100)
        synth_dataset(work / "test", args.test_scenes, base, base_seed=900)
    train_scenes = load_dataset(work / "train")
    test_scenes = load_dataset(work / "test")

    cfg = TrainConfig.desk(epochs=args.epochs, lr=args.lr, patch=args.patch,
                           batch=args.batch, plateau_factor=0.85, plateau_patience=5,
                           seed=args.seed)
    t0 = time.time()
    record = train(train_scenes, cfg, out_dir=work / "run")
    train_minutes = (time.time() - t0) / 60.0
    print(f"train_minutes {train_minutes:.1f}")
    print(f"final_val_loss {record.val_loss[-1]:.6f}")

    report = evaluate(test_scenes, cfg, models=record.models)
    model_db = dict(zip(report.scene_ids, report.cpsnr_db))
    bicubic_db = baseline_scores(test_scenes, "bicubic")
    esa_db = baseline_scores(test_scenes, "esa")

    model_mean = float(np.mean(list(model_db.values())))
    bicubic_mean = float(np.mean(list(bicubic_db.values())))
    print(f"model_mean_cpsnr_db {model_mean:.4f}")
    print(f"bicubic_mean_cpsnr_db {bicubic_mean:.4f}")
    print(f"esa_mean_cpsnr_db {float(np.mean(list(esa_db.values()))):.4f}")
    print(f"gain_over_bicubic_db {model_mean - bicubic_mean:+.4f}")
    print(f"normalized_vs_esa {leaderboard_score(model_db, esa_db).aggregate:.6f}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
