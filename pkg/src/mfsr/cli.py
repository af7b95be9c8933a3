"""Command-line interface: dataset synthesis, training, scoring, and the
sampling-theory utilities (parallax calculator, chirp aliasing demo).

Exit codes: 0 success, 2 usage error, 3 data error, 4 numerical failure.
"""

from __future__ import annotations

import argparse
import csv
import math
import sys
from pathlib import Path

import numpy as np

from .grad import NumericalError
from .gradcheck import run_gradcheck
from .metrics import leaderboard_score, write_report_csv
from .models import (
    HighResNetConfig,
    ShiftNetConfig,
    highresnet_param_table,
    shiftnet_param_table,
)
from .scenes import SynthConfig, load_dataset, synth_dataset
from .trainer import (
    TrainConfig,
    baseline_scores,
    ensemble_predictor,
    evaluate,
    load_config,
    load_models,
    train,
)

GRADCHECK_TOL = 1e-4


# -- sampling-theory utilities ------------------------------------------------------


def parallax_ratio(satellite_altitude_m, object_height_m, ground_motion_m=0.0):
    """Apparent-size ratio between ground and elevated objects, plus the
    ground-motion lag that ratio induces for an observer moving overhead.

    Objects closer to the camera by ``object_height_m`` appear larger by
    ratio = altitude / (altitude - height); a feature moving with the
    ground appears to lag by ground_motion * (ratio - 1) / ratio.
    """
    if object_height_m < 0:
        raise ValueError("object height must be >= 0")
    if satellite_altitude_m <= object_height_m:
        raise ValueError("altitude must exceed object height")
    ratio = satellite_altitude_m / (satellite_altitude_m - object_height_m)
    lag = ground_motion_m * (ratio - 1.0) / ratio
    return ratio, lag


def chirp_demo(out_csv, hr_rate, lr_rate, duration, f0=10.0, slope=0.0, amplitude=1.0):
    """Sample sin(2*pi*w(t)*t), w(t) = f0 + slope*t, at two rates.

    Writes a CSV of (t, chirp, hr_samples, lr_samples); the dense chirp
    column shows the underlying signal, the sample trains what each rate
    observes.  A tone is recovered only when sampled above twice its
    frequency (the Nyquist rate); below that it aliases to a lower bin.
    Returns (t_dense, dense, (t_hr, x_hr), (t_lr, x_lr)).
    """
    if hr_rate <= 0 or lr_rate <= 0 or duration <= 0:
        raise ValueError("rates and duration must be positive")

    def signal(t):
        return amplitude * np.sin(2.0 * np.pi * (f0 + slope * t) * t)

    dense_rate = max(hr_rate, lr_rate, 50.0 * (f0 + max(0.0, slope) * duration))
    t_dense = np.arange(0.0, duration, 1.0 / dense_rate)
    t_hr = np.arange(0.0, duration, 1.0 / hr_rate)
    t_lr = np.arange(0.0, duration, 1.0 / lr_rate)
    dense, x_hr, x_lr = signal(t_dense), signal(t_hr), signal(t_lr)

    if out_csv is not None:
        with open(out_csv, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["t", "chirp", "hr_samples", "lr_samples"])
            for i, t in enumerate(t_dense):
                row = [f"{t:.9f}", f"{dense[i]:.9f}"]
                row.append(f"{x_hr[i]:.9f}" if i < x_hr.size else "")
                row.append(f"{x_lr[i]:.9f}" if i < x_lr.size else "")
                writer.writerow(row)
    return t_dense, dense, (t_hr, x_hr), (t_lr, x_lr)


def dominant_frequency(samples, rate):
    """Frequency of the largest nonzero FFT bin, in Hz."""
    spec = np.abs(np.fft.rfft(np.asarray(samples, dtype=np.float64)))
    if spec.size <= 1:
        return 0.0
    k = 1 + int(np.argmax(spec[1:]))
    return k * rate / len(samples)


# -- subcommand implementations ----------------------------------------------------


def _build_train_config(args):
    cfg = TrainConfig.desk()
    if args.config:
        cfg = load_config(args.config, base=cfg)
    overrides = {}
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.beta is not None:
        overrides["beta"] = math.inf if args.beta in ("inf", "+inf") else float(args.beta)
    if args.views is not None:
        overrides["views"] = args.views
    if args.reference is not None:
        overrides["reference"] = args.reference
    if getattr(args, "registered_loss", None) is not None:
        overrides["registered"] = args.registered_loss == "on"
    if getattr(args, "lam", None) is not None:
        overrides["lam"] = args.lam
    for name in ("epochs", "batch", "patch", "hidden", "lr", "loss_kind"):
        v = getattr(args, name, None)
        if v is not None:
            overrides[name] = v
    import dataclasses

    return dataclasses.replace(cfg, **overrides)


def _cmd_train(args):
    cfg = _build_train_config(args)
    record = train(args.data, cfg, out_dir=args.out)
    print(f"epochs {len(record.epochs)}")
    print(f"final_train_loss {record.train_loss[-1]:.6f}")
    print(f"final_val_loss {record.val_loss[-1]:.6f}")
    print(f"checkpoint {record.checkpoint}")
    return 0


def _load_eval_models(args, cfg):
    paths = [p for p in (args.ensemble.split(",") if args.ensemble else [args.ckpt]) if p]
    if not paths:
        raise ValueError("eval needs --ckpt or --ensemble")
    return [load_models(p, cfg) for p in paths]


def _cmd_eval(args):
    first_ckpt = (args.ensemble.split(",")[0] if args.ensemble else args.ckpt)
    if first_ckpt is None:
        raise ValueError("eval needs --ckpt or --ensemble")
    cfg_path = args.config or str(Path(first_ckpt).parent / "config.txt")
    cfg = load_config(cfg_path, base=TrainConfig.desk())
    import dataclasses

    if args.views is not None:
        cfg = dataclasses.replace(cfg, views=args.views)
    if args.reference is not None:
        cfg = dataclasses.replace(cfg, reference=args.reference)
    model_list = _load_eval_models(args, cfg)
    scenes = load_dataset(args.data)
    predict = ensemble_predictor(model_list, cfg) if len(model_list) > 1 else None
    report = evaluate(scenes, cfg, models=model_list[0], predict=predict)
    if args.out:
        write_report_csv(report, args.out)
    print(f"scenes {len(report.scene_ids)}")
    print(f"mean_cpsnr_db {float(np.mean(report.cpsnr_db)):.4f}")
    print(f"aggregate_normalized_score {report.aggregate:.6f}")
    return 0


def _cmd_score(args):
    scenes = load_dataset(args.data)
    method_db = baseline_scores(scenes, args.method, zoom=args.zoom, n_clearest=args.n_clearest)
    esa_db = (
        method_db
        if args.method == "esa"
        else baseline_scores(scenes, "esa", zoom=args.zoom, n_clearest=args.n_clearest)
    )
    report = leaderboard_score(method_db, esa_db)
    if args.out:
        write_report_csv(report, args.out)
    print(f"scenes {len(report.scene_ids)}")
    print(f"mean_cpsnr_db {float(np.mean(report.cpsnr_db)):.4f}")
    print(f"aggregate_normalized_score {report.aggregate:.6f}")
    return 0


def _cmd_synth(args):
    base = SynthConfig(
        hr_side=args.hr_side,
        views=args.views if args.views is not None else 8,
        zoom=args.zoom,
        noise_sigma=args.sigma,
        cloud_rate=args.cloud_rate,
        max_shift_lr=args.max_shift,
    )
    paths = synth_dataset(args.out, args.scenes, base_cfg=base, base_seed=args.seed or 0)
    print(f"scenes {len(paths)}")
    print(f"out {args.out}")
    return 0


def _cmd_gradcheck(args):
    results = run_gradcheck(seed=args.seed or 0, include_end_to_end=not args.ops_only)
    worst = 0.0
    for name, err in results:
        status = "PASS" if err < GRADCHECK_TOL else "FAIL"
        print(f"{name} {err:.3e} {status}")
        worst = max(worst, err)
    print(f"worst {worst:.3e}")
    if worst >= GRADCHECK_TOL:
        raise NumericalError(f"gradient check failed: worst relative error {worst:.3e}")
    return 0


def _cmd_paramcount(args):
    if args.model == "highresnet":
        rows = highresnet_param_table(HighResNetConfig(hidden_channels=args.hidden))
        expected = 591_818 if args.hidden == 64 else None
    else:
        rows = shiftnet_param_table(ShiftNetConfig())
        expected = 34_187_648
    for name, count in rows:
        print(f"{name} {count}")
    total = dict(rows)["total"]
    if expected is not None and total != expected:
        raise AssertionError(f"{args.model} total {total} != {expected}")
    return 0


def _cmd_parallax(args):
    ratio, lag = parallax_ratio(args.altitude, args.height, args.motion)
    print(f"ratio {ratio:.9f}")
    print(f"lag_m {lag:.6f}")
    return 0


def _cmd_chirp(args):
    _, _, _, (t_lr, x_lr) = chirp_demo(
        args.out,
        hr_rate=args.hr_rate,
        lr_rate=args.lr_rate,
        duration=args.duration,
        f0=args.f0,
        slope=args.slope,
        amplitude=args.amplitude,
    )
    print(f"lr_dominant_hz {dominant_frequency(x_lr, args.lr_rate):.4f}")
    print(f"nyquist_ok {args.lr_rate > 2 * args.f0}")
    return 0


# -- argument parsing ---------------------------------------------------------------


def build_parser():
    parser = argparse.ArgumentParser(prog="mfsr", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, data=False, out=False):
        if data:
            p.add_argument("--data", required=True, help="dataset directory")
        if out:
            p.add_argument("--out", help="output path")
        p.add_argument("--seed", type=int, default=None)

    p = sub.add_parser("train", help="fit the fusion and registration networks")
    common(p, data=True)
    p.add_argument("--out", required=True, help="run directory for checkpoint and logs")
    p.add_argument("--config", help="key=value config file")
    p.add_argument("--beta", default=None, help="view-sampling concentration (number or 'inf')")
    p.add_argument("--views", type=int, default=None)
    p.add_argument("--reference", choices=("median", "mean", "none"), default=None)
    p.add_argument("--registered-loss", dest="registered_loss", choices=("on", "off"), default=None)
    p.add_argument("--lambda", dest="lam", type=float, default=None)
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--batch", type=int, default=None)
    p.add_argument("--patch", type=int, default=None)
    p.add_argument("--hidden", type=int, default=None)
    p.add_argument("--lr", type=float, default=None)
    p.add_argument("--loss", dest="loss_kind", choices=("cmse", "mse"), default=None)
    p.set_defaults(fn=_cmd_train)

    p = sub.add_parser("eval", help="score a trained model against the clear-pixel baseline")
    common(p, data=True, out=True)
    p.add_argument("--ckpt", help="checkpoint file")
    p.add_argument("--ensemble", help="comma-separated checkpoints to average")
    p.add_argument("--config", help="config file (defaults to config.txt beside the checkpoint)")
    p.add_argument("--views", type=int, default=None)
    p.add_argument("--reference", choices=("median", "mean", "none"), default=None)
    p.set_defaults(fn=_cmd_eval)

    p = sub.add_parser("score", help="score a reference method, normalized to the multi-view baseline")
    common(p, data=True, out=True)
    p.add_argument("--method", choices=("esa", "bicubic"), default="esa")
    p.add_argument("--zoom", type=int, default=3)
    p.add_argument("--n-clearest", type=int, default=9)
    p.set_defaults(fn=_cmd_score)

    p = sub.add_parser("synth", help="generate a synthetic dataset with known shifts")
    common(p)
    p.add_argument("--out", required=True)
    p.add_argument("--scenes", type=int, default=16)
    p.add_argument("--views", type=int, default=None)
    p.add_argument("--hr-side", type=int, default=144)
    p.add_argument("--zoom", type=int, default=3)
    p.add_argument("--sigma", type=float, default=0.02)
    p.add_argument("--cloud-rate", type=float, default=0.25)
    p.add_argument("--max-shift", type=float, default=1.0)
    p.set_defaults(fn=_cmd_synth)

    p = sub.add_parser("gradcheck", help="finite-difference check of every op")
    common(p)
    p.add_argument("--ops-only", action="store_true", help="skip the end-to-end graph check")
    p.set_defaults(fn=_cmd_gradcheck)

    p = sub.add_parser("paramcount", help="print the per-stage parameter table")
    p.add_argument("--model", choices=("highresnet", "shiftnet"), required=True)
    p.add_argument("--hidden", type=int, default=64)
    p.set_defaults(fn=_cmd_paramcount)

    p = sub.add_parser("parallax", help="apparent-size ratio and motion lag seen from altitude")
    p.add_argument("--altitude", type=float, default=300_000.0)
    p.add_argument("--height", type=float, default=50.0)
    p.add_argument("--motion", type=float, default=600.0)
    p.set_defaults(fn=_cmd_parallax)

    p = sub.add_parser("chirp", help="sampling-rate aliasing demo on a chirp signal")
    p.add_argument("--out", help="CSV path for the signal and sample trains")
    p.add_argument("--f0", type=float, default=10.0)
    p.add_argument("--slope", type=float, default=0.0)
    p.add_argument("--hr-rate", type=float, default=100.0)
    p.add_argument("--lr-rate", type=float, default=50.0)
    p.add_argument("--duration", type=float, default=2.0)
    p.add_argument("--amplitude", type=float, default=1.0)
    p.set_defaults(fn=_cmd_chirp)
    return parser


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return exc.code if exc.code is not None else 2
    try:
        return args.fn(args)
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 4
    except (ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
