"""Joint optimization of the fusion and registration networks.

Each step samples a batch of scenes, draws views per scene with the
clearance-biased scheme, crops aligned patches, fuses them and applies
the (optionally registration-corrected) masked loss; both networks share
one Adam optimizer.  The learning rate decays multiplicatively whenever
the validation loss plateaus beyond the patience window.
"""

from __future__ import annotations

import csv
import dataclasses
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .baselines import bicubic_sisr, esa_baseline
from .grad import AdamConfig, AdamState, Tensor, adam_step, backward, load_arrays, save_arrays
from .lanczos import registered_loss
from .metrics import clear_mse_loss, leaderboard_score, mse_loss, registered_cpsnr
from .models import (
    HighResNetConfig,
    ShiftNet,
    ShiftNetConfig,
    highresnet_forward_batch,
    init_highresnet,
    init_shiftnet,
    shiftnet_forward_batch,
)
from .scenes import load_dataset, patchify, sample_views, split_train_val


@dataclass
class TrainConfig:
    lr: float = 0.0007
    plateau_factor: float = 0.97
    plateau_patience: int = 2
    batch: int = 32
    epochs: int = 400
    lam: float = 1e-6
    beta: float = 50.0
    views: int = 32
    patch: int = 64
    zoom: int = 3
    hidden: int = 64
    reference: str = "median"
    registered: bool = True
    loss_kind: str = "cmse"
    use_masks: bool = True
    differentiable_kernel: bool = True
    max_shift: float = 10.0
    shift_side: int = 128
    shift_channels: tuple = (64, 64, 64, 64, 128, 128, 128, 128)
    shift_fc1: int = 1024
    eval_pad: int = 32
    seed: int = 0

    def validate(self):
        if min(self.lr, self.plateau_factor, self.batch, self.epochs, self.views, self.patch) <= 0:
            raise ValueError("all training sizes and rates must be positive")
        if self.plateau_patience < 1:
            raise ValueError("plateau patience must be >= 1")
        if self.reference not in ("median", "mean", "none"):
            raise ValueError(f"unknown reference mode {self.reference!r}")
        if self.loss_kind not in ("cmse", "mse"):
            raise ValueError(f"unknown loss kind {self.loss_kind!r}")

    @classmethod
    def desk(cls, **overrides):
        """Defaults sized for a single CPU core."""
        base = dict(
            batch=8,
            epochs=30,
            views=8,
            patch=48,
            hidden=16,
            shift_side=32,
            shift_channels=(8, 8, 8, 8, 16, 16, 16, 16),
            shift_fc1=128,
        )
        base.update(overrides)
        return cls(**base)


@dataclass
class PlateauState:
    """Reduce-on-plateau bookkeeping; improvement means a 1e-4 relative drop."""

    lr: float
    factor: float = 0.97
    patience: int = 2
    rel: float = 1e-4
    best: float = math.inf
    bad_epochs: int = 0


def lr_plateau_step(state, val_loss):
    """Advance the scheduler by one epoch's validation loss; returns the new lr."""
    if val_loss < state.best * (1.0 - state.rel):
        state.best = val_loss
        state.bad_epochs = 0
    else:
        state.bad_epochs += 1
        if state.bad_epochs > state.patience:
            state.lr *= state.factor
            state.bad_epochs = 0
    return state.lr


@dataclass
class RunRecord:
    epochs: list = field(default_factory=list)
    train_loss: list = field(default_factory=list)
    val_loss: list = field(default_factory=list)
    lr_trace: list = field(default_factory=list)
    checkpoint: str = ""
    config: dict = field(default_factory=dict)
    models: object = field(default=None, repr=False)


@dataclass
class Models:
    """Everything needed to reproduce a prediction."""

    hr_cfg: HighResNetConfig
    hr_params: dict
    shift: ShiftNet


# -- config file and checkpoint IO ----------------------------------------------


def save_config(cfg, path):
    lines = []
    for f in dataclasses.fields(cfg):
        v = getattr(cfg, f.name)
        if isinstance(v, tuple):
            v = ",".join(str(x) for x in v)
        elif isinstance(v, bool):
            v = "true" if v else "false"
        lines.append(f"{f.name}={v}")
    Path(path).write_text("\n".join(lines) + "\n")


def load_config(path, base=None):
    cfg = base if base is not None else TrainConfig()
    fields = {f.name: f for f in dataclasses.fields(TrainConfig)}
    updates = {}
    for raw in Path(path).read_text().splitlines():
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ValueError(f"{path}: malformed config line {line!r}")
        key, val = (s.strip() for s in line.split("=", 1))
        if key not in fields:
            raise ValueError(f"{path}: unknown config key {key!r}")
        current = getattr(cfg, key)
        if isinstance(current, bool):
            updates[key] = val.lower() in ("true", "1", "on", "yes")
        elif isinstance(current, int):
            updates[key] = int(val)
        elif isinstance(current, float):
            updates[key] = float(val)
        elif isinstance(current, tuple):
            updates[key] = tuple(int(x) for x in val.split(","))
        else:
            updates[key] = val
    return dataclasses.replace(cfg, **updates)


def build_models(cfg, dtype=np.float32):
    hr_cfg = HighResNetConfig(hidden_channels=cfg.hidden, zoom=cfg.zoom)
    hr_params = init_highresnet(hr_cfg, rng=np.random.default_rng(cfg.seed + 1), dtype=dtype)
    sn_cfg = ShiftNetConfig(
        input_side=cfg.shift_side, channels=cfg.shift_channels, fc1_width=cfg.shift_fc1
    )
    shift = init_shiftnet(sn_cfg, rng=np.random.default_rng(cfg.seed + 2), dtype=dtype)
    return Models(hr_cfg=hr_cfg, hr_params=hr_params, shift=shift)


def save_models(models, path):
    arrays = {f"hr.{k}": v.data for k, v in models.hr_params.items()}
    arrays.update({f"sn.{k}": v.data for k, v in models.shift.params.items()})
    for i, st in enumerate(models.shift.bn_states, start=1):
        arrays[f"sn_state.bn{i}.mean"] = st.running_mean
        arrays[f"sn_state.bn{i}.var"] = st.running_var
    save_arrays(path, arrays)


def load_models(path, cfg, dtype=np.float32):
    models = build_models(cfg, dtype=dtype)
    arrays = load_arrays(path)
    for k, p in models.hr_params.items():
        src = arrays[f"hr.{k}"]
        if src.shape != p.shape:
            raise ValueError(f"checkpoint {path}: {k} has shape {src.shape}, expected {p.shape}")
        p.data = src.astype(p.dtype)
    for k, p in models.shift.params.items():
        p.data = arrays[f"sn.{k}"].astype(p.dtype)
    for i, st in enumerate(models.shift.bn_states, start=1):
        st.running_mean = arrays[f"sn_state.bn{i}.mean"].astype(st.running_mean.dtype)
        st.running_var = arrays[f"sn_state.bn{i}.var"].astype(st.running_var.dtype)
    return models


def _merged_params(models):
    merged = {f"hr.{k}": v for k, v in models.hr_params.items()}
    merged.update({f"sn.{k}": v for k, v in models.shift.params.items()})
    return merged


# -- loss assembly ----------------------------------------------------------------


def _batch_loss(sr, hr, mask, cfg, models, training, rng):
    hr_t = Tensor(hr.astype(sr.dtype))
    if not cfg.registered:
        if cfg.loss_kind == "mse":
            return mse_loss(sr, hr_t)
        return clear_mse_loss(sr, hr_t, mask)

    def shiftnet(s, h):
        return shiftnet_forward_batch(s, h, models.shift, training=training, rng=rng)

    return registered_loss(
        sr,
        hr_t,
        mask,
        shiftnet,
        lam=cfg.lam,
        loss_kind=cfg.loss_kind,
        max_shift=cfg.max_shift,
        differentiable_kernel=cfg.differentiable_kernel and training,
    )


def _assemble_batch(scenes, cfg, rng):
    views, hrs, masks = [], [], []
    for scene in scenes:
        picked = sample_views(scene, min(cfg.views, len(scene.lr_views)), cfg.beta, rng)
        crop = patchify(scene, cfg.patch, rng, zoom=cfg.zoom)
        views.append(crop["lr"][picked])
        hrs.append(crop["hr"])
        if cfg.use_masks and "hr_mask" in crop:
            masks.append(crop["hr_mask"])
        else:
            masks.append(np.ones_like(crop["hr"]))
    return np.stack(views), np.stack(hrs), np.stack(masks)


def _val_loss(scenes, cfg, models, dtype):
    """Deterministic objective on held-out scenes: clearest views, full frames."""
    total = 0.0
    for scene in scenes:
        k = min(cfg.views, len(scene.lr_views))
        picked = sample_views(scene, k, math.inf)
        arr = np.stack([scene.lr_views[i] for i in picked])[None].astype(dtype)
        sr = highresnet_forward_batch(arr, models.hr_cfg, models.hr_params, ref_mode=cfg.reference)
        hr = scene.hr[None].astype(dtype)
        mask = (
            scene.hr_mask[None].astype(dtype)
            if (cfg.use_masks and scene.hr_mask is not None)
            else np.ones_like(hr)
        )
        cfg_eval = dataclasses.replace(cfg, differentiable_kernel=False)
        loss = _batch_loss(sr, hr, mask, cfg_eval, models, training=False, rng=None)
        total += loss.item()
    return total / len(scenes)


def train(data, cfg=TrainConfig(), out_dir=None):
    """Fit both networks; returns the RunRecord (checkpoint path included).

    ``data`` is a dataset directory or a list of loaded scenes.  Scenes
    without a target are rejected.  The run aborts (with the exception
    propagating) if any op produces a non-finite value.
    """
    cfg.validate()
    scenes = load_dataset(data) if isinstance(data, (str, Path)) else list(data)
    scenes = sorted(scenes, key=lambda s: s.id)
    if not scenes:
        raise ValueError("empty dataset")
    for s in scenes:
        if s.hr is None:
            raise ValueError(f"scene {s.id} has no target image; cannot train on it")

    train_ids, val_ids = split_train_val([s.id for s in scenes])
    if not val_ids:
        val_ids = [train_ids.pop()]
    if not train_ids:
        raise ValueError("dataset too small to split")
    by_id = {s.id: s for s in scenes}
    train_scenes = [by_id[i] for i in train_ids]
    val_scenes = [by_id[i] for i in val_ids]

    dtype = np.float32
    models = build_models(cfg, dtype=dtype)
    merged = _merged_params(models)
    opt = AdamState.for_params(merged)
    adam_cfg = AdamConfig(lr=cfg.lr)
    plateau = PlateauState(lr=cfg.lr, factor=cfg.plateau_factor, patience=cfg.plateau_patience)
    rng = np.random.default_rng(cfg.seed)

    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    record = RunRecord(config=dataclasses.asdict(cfg))

    for epoch in range(cfg.epochs):
        order = rng.permutation(len(train_scenes))
        losses = []
        for start in range(0, len(order), cfg.batch):
            chunk = [train_scenes[i] for i in order[start : start + cfg.batch]]
            if len(chunk) < 2:
                continue
            views, hrs, masks = _assemble_batch(chunk, cfg, rng)
            sr = highresnet_forward_batch(
                views.astype(dtype), models.hr_cfg, models.hr_params, ref_mode=cfg.reference
            )
            loss = _batch_loss(sr, hrs, masks.astype(dtype), cfg, models, training=True, rng=rng)
            grads = backward(loss)
            grad_map = {name: grads[p] for name, p in merged.items() if p in grads}
            adam_step(merged, grad_map, opt, adam_cfg, lr=plateau.lr)
            losses.append(loss.item())
        if not losses:
            raise ValueError("no usable training batches (need at least 2 scenes per batch)")
        val = _val_loss(val_scenes, cfg, models, dtype)
        lr_now = plateau.lr
        record.epochs.append(epoch)
        record.train_loss.append(float(np.mean(losses)))
        record.val_loss.append(val)
        record.lr_trace.append(lr_now)
        lr_plateau_step(plateau, val)
        if out is not None:
            write_run_csv(record, out / "run.csv")

    if out is not None:
        ckpt = out / "model.ckpt"
        save_models(models, ckpt)
        record.checkpoint = str(ckpt)
        save_config(cfg, out / "config.txt")
    record.models = models
    return record


def write_run_csv(record, path):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["epoch", "train_loss", "val_loss", "lr"])
        for e, tl, vl, lr in zip(record.epochs, record.train_loss, record.val_loss, record.lr_trace):
            writer.writerow([e, f"{tl:.8f}", f"{vl:.8f}", f"{lr:.8f}"])


# -- evaluation --------------------------------------------------------------------


def predict_scene(scene, models, cfg):
    """Eval-mode reconstruction of a full scene (clearest views first)."""
    k = min(cfg.views, len(scene.lr_views))
    picked = sample_views(scene, k, math.inf)
    arr = np.stack([scene.lr_views[i] for i in picked])[None]
    pad_to = max(cfg.eval_pad, 1)
    sr = highresnet_forward_batch(
        arr.astype(models.hr_params["encode.conv_in.w"].dtype),
        models.hr_cfg,
        models.hr_params,
        pad_to=pad_to,
        ref_mode=cfg.reference,
    )
    return sr.data[0].astype(np.float64)


def evaluate(scenes, cfg, models=None, predict=None, border=3, n_clearest=9):
    """Score reconstructions against targets, normalized by the upsample-average baseline.

    ``predict`` maps a scene to an SR array; by default it runs the model
    in eval mode.  Scenes without a target are skipped.  Returns the
    leaderboard-style ScoreReport (aggregate < 1 beats the baseline).
    """
    if predict is None:
        if models is None:
            raise ValueError("need either a predict callable or models")
        predict = lambda scene: predict_scene(scene, models, cfg)
    model_db, base_db = {}, {}
    skipped = []
    for scene in scenes:
        if scene.hr is None:
            skipped.append(scene.id)
            continue
        mask = scene.hr_mask if scene.hr_mask is not None else np.ones_like(scene.hr)
        sr = np.asarray(predict(scene))
        model_db[scene.id] = registered_cpsnr(scene.hr[0], sr[0], mask[0], border)
        esa = esa_baseline(scene, min(n_clearest, len(scene.lr_views)), cfg.zoom)
        base_db[scene.id] = registered_cpsnr(scene.hr[0], esa[0], mask[0], border)
    if skipped:
        import sys

        print(f"warning: skipped scenes without targets: {', '.join(skipped)}", file=sys.stderr)
    return leaderboard_score(model_db, base_db)


def ensemble_predictor(model_list, cfg):
    """Average the reconstructions of several checkpoints (eval-time ensembling)."""

    def predict(scene):
        outs = [predict_scene(scene, m, cfg) for m in model_list]
        return np.mean(outs, axis=0)

    return predict


def baseline_scores(scenes, method="esa", zoom=3, n_clearest=9, border=3):
    """Per-scene cPSNR of a reference method against the targets."""
    out = {}
    for scene in scenes:
        if scene.hr is None:
            continue
        mask = scene.hr_mask if scene.hr_mask is not None else np.ones_like(scene.hr)
        if method == "esa":
            sr = esa_baseline(scene, min(n_clearest, len(scene.lr_views)), zoom)
        elif method == "bicubic":
            counts = [int(q.sum()) for q in scene.quality_maps]
            best = int(np.argsort([-c for c in counts], kind="stable")[0])
            sr = bicubic_sisr(scene.lr_views[best], zoom)
        else:
            raise ValueError(f"unknown baseline method {method!r}")
        out[scene.id] = registered_cpsnr(scene.hr[0], sr[0], mask[0], border)
    if not out:
        raise ValueError("no scenes with targets to score")
    return out
