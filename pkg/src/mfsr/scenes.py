"""Scene data model: ingestion, clearance, view sampling, patches, synthesis.

A scene is one ground location: several low-resolution views, a binary
quality map per view (1 = clear sky), and optionally a high-resolution
target with its own map.  Real scenes arrive as 16-bit grayscale PNGs in
`<root>/<scene_id>/LR%03d.png` (+ QM%03d.png, HR.png, SM.png); synthetic
scenes use the same layout with binary 16-bit PGM plus a JSON manifest
holding the generator seed and the true sub-pixel shifts.
"""

from __future__ import annotations

import json
import math
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .lanczos import Shift, shift_image

U16_MAX = 65535


@dataclass
class Scene:
    id: str
    lr_views: list
    quality_maps: list
    hr: np.ndarray = None
    hr_mask: np.ndarray = None
    band: str = "synthetic"
    oracle_shifts: list = None

    def __post_init__(self):
        if len(self.lr_views) < 1:
            raise ValueError(f"scene {self.id}: needs at least one view")
        if len(self.lr_views) != len(self.quality_maps):
            raise ValueError(
                f"scene {self.id}: {len(self.lr_views)} views vs {len(self.quality_maps)} quality maps"
            )
        shape = self.lr_views[0].shape
        for i, (v, q) in enumerate(zip(self.lr_views, self.quality_maps)):
            if v.shape != shape or q.shape != shape:
                raise ValueError(f"scene {self.id}: view {i} shape mismatch")

    @property
    def view_shape(self):
        return self.lr_views[0].shape


# -- image file IO -------------------------------------------------------------


def _write_pgm16(path, img01):
    """Binary 16-bit PGM (big-endian sample order per the format)."""
    arr = np.asarray(img01, dtype=np.float64)
    data = np.clip(np.round(arr * U16_MAX), 0, U16_MAX).astype(">u2")
    h, w = arr.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n{U16_MAX}\n".encode("ascii"))
        fh.write(data.tobytes())


def _read_pgm16(path):
    with open(path, "rb") as fh:
        blob = fh.read()
    tokens = []
    pos = 0
    while len(tokens) < 4:
        while pos < len(blob) and blob[pos : pos + 1].isspace():
            pos += 1
        if pos < len(blob) and blob[pos : pos + 1] == b"#":
            while pos < len(blob) and blob[pos : pos + 1] != b"\n":
                pos += 1
            continue
        start = pos
        while pos < len(blob) and not blob[pos : pos + 1].isspace():
            pos += 1
        tokens.append(blob[start:pos])
    if tokens[0] != b"P5":
        raise ValueError(f"{path}: not a binary PGM")
    w, h, maxval = int(tokens[1]), int(tokens[2]), int(tokens[3])
    pos += 1
    dtype = ">u2" if maxval > 255 else "u1"
    count = w * h
    data = np.frombuffer(blob, dtype=dtype, count=count, offset=pos)
    return data.reshape(h, w).astype(np.float64) / maxval


def _read_png(path):
    with Image.open(path) as im:
        arr = np.asarray(im)
    if arr.dtype == np.bool_:
        return arr.astype(np.float64)
    if arr.dtype == np.uint8:
        return arr.astype(np.float64) / 255.0
    return arr.astype(np.float64) / U16_MAX


def _read_image(path):
    path = Path(path)
    try:
        if path.suffix == ".pgm":
            return _read_pgm16(path)
        return _read_png(path)
    except (OSError, ValueError) as exc:
        raise ValueError(f"unreadable image {path}: {exc}") from exc


def _find(scene_dir, stem):
    for ext in (".png", ".pgm"):
        p = scene_dir / (stem + ext)
        if p.exists():
            return p
    return None


def load_scene(dir_path, band=None):
    """Read one scene directory into normalized [0,1] arrays.

    Views are index-aligned with their quality maps; a view without a map
    is an error.  HR and its map are optional (test splits ship none).
    """
    scene_dir = Path(dir_path)
    if not scene_dir.is_dir():
        raise ValueError(f"scene directory {scene_dir} does not exist")
    lr_paths = sorted(scene_dir.glob("LR[0-9][0-9][0-9].png")) + sorted(
        scene_dir.glob("LR[0-9][0-9][0-9].pgm")
    )
    if not lr_paths:
        raise ValueError(f"scene directory {scene_dir} has no LR views")
    views, masks = [], []
    for lr_path in lr_paths:
        qm_path = _find(scene_dir, "QM" + lr_path.stem[2:])
        if qm_path is None:
            raise ValueError(f"missing quality map {scene_dir / ('QM' + lr_path.stem[2:])} for {lr_path.name}")
        views.append(_read_image(lr_path)[None])
        masks.append((_read_image(qm_path) > 0).astype(np.float64)[None])
    hr = hr_mask = None
    hr_path = _find(scene_dir, "HR")
    if hr_path is not None:
        hr = _read_image(hr_path)[None]
        sm_path = _find(scene_dir, "SM")
        hr_mask = (
            (_read_image(sm_path) > 0).astype(np.float64)[None] if sm_path else np.ones_like(hr)
        )
    manifest = {}
    mpath = scene_dir / "manifest.json"
    if mpath.exists():
        manifest = json.loads(mpath.read_text())
    oracle = None
    if "oracle_shifts" in manifest:
        oracle = [Shift(float(dx), float(dy)) for dx, dy in manifest["oracle_shifts"]]
    if band is None:
        band = manifest.get("band")
    if band is None:
        name = str(scene_dir).upper()
        band = "NIR" if "NIR" in name else ("RED" if "RED" in name else "synthetic")
    return Scene(
        id=scene_dir.name,
        lr_views=views,
        quality_maps=masks,
        hr=hr,
        hr_mask=hr_mask,
        band=band,
        oracle_shifts=oracle,
    )


def save_scene(scene, root):
    """Write a scene in the portable PGM + manifest layout; returns its directory."""
    out = Path(root) / scene.id
    out.mkdir(parents=True, exist_ok=True)
    for i, (view, qm) in enumerate(zip(scene.lr_views, scene.quality_maps)):
        _write_pgm16(out / f"LR{i:03d}.pgm", view[0])
        _write_pgm16(out / f"QM{i:03d}.pgm", qm[0])
    if scene.hr is not None:
        _write_pgm16(out / "HR.pgm", scene.hr[0])
        if scene.hr_mask is not None:
            _write_pgm16(out / "SM.pgm", scene.hr_mask[0])
    manifest = {"id": scene.id, "band": scene.band}
    if scene.oracle_shifts is not None:
        manifest["oracle_shifts"] = [[s.dx, s.dy] for s in scene.oracle_shifts]
    (out / "manifest.json").write_text(json.dumps(manifest, indent=1))
    return out


def load_dataset(root):
    """All scene subdirectories of ``root``, sorted by id."""
    root = Path(root)
    if not root.is_dir():
        raise ValueError(f"dataset directory {root} does not exist")
    dirs = sorted(p for p in root.iterdir() if p.is_dir())
    if not dirs:
        raise ValueError(f"dataset directory {root} has no scene subdirectories")
    return [load_scene(d) for d in dirs]


# -- clearance and sampling ------------------------------------------------------


def clearance(scene):
    """Per-view count of clear pixels (1s in the quality map)."""
    counts = []
    for i, qm in enumerate(scene.quality_maps):
        vals = np.unique(qm)
        if not np.isin(vals, (0.0, 1.0)).all():
            raise ValueError(f"scene {scene.id}: quality map {i} is not binary")
        counts.append(int(qm.sum()))
    return counts


def sample_views(scene, k, beta, rng=None):
    """Draw k distinct view indices, biased toward clear views.

    Sequential softmax sampling without replacement over clearance scores
    normalized to [0,1]: p(i) = exp(beta*C_i) / sum_j exp(beta*C_j) among
    the remaining views.  beta=0 is uniform; beta=inf picks the k clearest
    deterministically (ties broken by ascending index).
    """
    kp = len(scene.lr_views)
    if k > kp:
        raise ValueError(f"requested {k} views but scene {scene.id} has {kp}")
    pixels = scene.view_shape[-2] * scene.view_shape[-1]
    scores = np.asarray(clearance(scene), dtype=np.float64) / pixels
    if math.isinf(beta) and beta > 0:
        order = np.argsort(-scores, kind="stable")
        return [int(i) for i in order[:k]]
    if rng is None:
        raise ValueError("finite beta sampling needs an rng")
    logits = beta * scores
    remaining = list(range(kp))
    picked = []
    for _ in range(k):
        z = logits[remaining]
        z = np.exp(z - z.max())
        p = z / z.sum()
        choice = rng.choice(len(remaining), p=p)
        picked.append(remaining.pop(int(choice)))
    return picked


def reference_frame(views, mode="median"):
    """Aggregate a view stack into one reference image.

    median uses the lower of the two middle order statistics on even
    stacks, so every output pixel value occurs in some view.  Mode "none"
    returns zeros (the no-co-registration ablation).
    """
    stack = np.stack([np.asarray(v) for v in views])
    if stack.shape[0] < 1:
        raise ValueError("empty view list")
    if mode == "median":
        return np.sort(stack, axis=0)[(stack.shape[0] - 1) // 2]
    if mode == "mean":
        return stack.mean(axis=0)
    if mode == "none":
        return np.zeros_like(stack[0])
    raise ValueError(f"unknown reference mode {mode!r}")


def pad_imageset(views, target=None):
    """Append zero-valued dummy views up to the target set size.

    ``target=None`` pads to the next power of two; an integer target pads
    to max(target, next power of two).  Returns (padded views, alpha flags)
    with alpha 1 for real views and 0 for dummies.
    """
    views = [np.asarray(v) for v in views]
    kp = len(views)
    if kp < 1:
        raise ValueError("empty view list")
    pow2 = 1
    while pow2 < kp:
        pow2 *= 2
    k = max(pow2, target or 0)
    padded = list(views) + [np.zeros_like(views[0]) for _ in range(k - kp)]
    alphas = np.array([1] * kp + [0] * (k - kp))
    return padded, alphas


def patchify(scene, patch, rng, zoom=3):
    """One aligned random training crop: LR patches plus the matching HR patch.

    The crop origin is uniform over valid positions and shared by every
    view; the HR crop starts at zoom times the LR origin.  Returns a dict
    with lr [K,1,p,p], qm [K,1,p,p], and hr/hr_mask [1,zp,zp] when present.
    """
    h, w = scene.view_shape[-2], scene.view_shape[-1]
    if patch > h or patch > w:
        raise ValueError(f"patch {patch} exceeds view extent {h}x{w}")
    y = int(rng.integers(0, h - patch + 1))
    x = int(rng.integers(0, w - patch + 1))
    out = {
        "origin": (y, x),
        "lr": np.stack([v[:, y : y + patch, x : x + patch] for v in scene.lr_views]),
        "qm": np.stack([q[:, y : y + patch, x : x + patch] for q in scene.quality_maps]),
    }
    if scene.hr is not None:
        gy, gx, gp = zoom * y, zoom * x, zoom * patch
        out["hr"] = scene.hr[:, gy : gy + gp, gx : gx + gp]
        if scene.hr_mask is not None:
            out["hr_mask"] = scene.hr_mask[:, gy : gy + gp, gx : gx + gp]
    return out


def split_train_val(scene_ids, val_every=10):
    """Deterministic 90/10 split keyed on a CRC of the scene id."""
    train, val = [], []
    for sid in scene_ids:
        (val if zlib.crc32(sid.encode("utf-8")) % val_every == 0 else train).append(sid)
    return train, val


# -- synthetic scenes ------------------------------------------------------------


@dataclass(frozen=True)
class SynthConfig:
    hr_side: int = 144
    views: int = 8
    zoom: int = 3
    noise_sigma: float = 0.02
    cloud_rate: float = 0.25
    max_shift_lr: float = 1.0
    scene_id: str = "synth0000"
    seed: int = 0

    def validate(self):
        if self.hr_side < self.zoom or self.hr_side % self.zoom != 0:
            raise ValueError(f"hr side {self.hr_side} must be a positive multiple of zoom {self.zoom}")
        if self.views < 1:
            raise ValueError("need at least one view")
        if self.noise_sigma < 0 or not 0 <= self.cloud_rate <= 1:
            raise ValueError("noise sigma must be >= 0 and cloud rate in [0,1]")
        if not 0 <= self.max_shift_lr <= 1.5:
            raise ValueError("per-axis view shifts are limited to 1.5 low-res pixels")


def _smooth_field(rng, side):
    """Two-band random field: a smooth base plus finer texture.

    The texture band straddles the zoom-3 low-res Nyquist frequency
    (1/6 cycles per high-res pixel), so single-view upsampling loses
    part of the detail to aliasing while shifted views retain it.
    """
    fy = np.fft.fftfreq(side)[:, None]
    fx = np.fft.rfftfreq(side)[None, :]
    f2 = fy**2 + fx**2

    def band(sigma_f):
        spec = np.fft.rfft2(rng.standard_normal((side, side)))
        out = np.fft.irfft2(spec * np.exp(-f2 / (2 * sigma_f**2)), s=(side, side))
        return out / max(out.std(), 1e-12)

    field = band(0.05) + 0.6 * band(0.18)
    lo, hi = field.min(), field.max()
    if hi > lo:
        field = (field - lo) / (hi - lo)
    return 0.15 + 0.5 * field


def _paint_polygons(rng, img):
    side = img.shape[0]
    yy, xx = np.mgrid[0:side, 0:side].astype(np.float64)
    for _ in range(int(rng.integers(2, 5))):
        cy, cx = rng.uniform(0.2 * side, 0.8 * side, 2)
        radius = rng.uniform(0.08, 0.2) * side
        nv = int(rng.integers(3, 7))
        angles = np.sort(rng.uniform(0, 2 * np.pi, nv))
        vy = cy + radius * np.sin(angles)
        vx = cx + radius * np.cos(angles)
        inside = np.ones((side, side), dtype=bool)
        for i in range(nv):
            y0, x0 = vy[i], vx[i]
            y1, x1 = vy[(i + 1) % nv], vx[(i + 1) % nv]
            inside &= (x1 - x0) * (yy - y0) - (y1 - y0) * (xx - x0) >= 0
        img[inside] = rng.uniform(0.1, 0.9)
    return img


def _ellipse_mask(rng, side):
    cy, cx = rng.uniform(0.1 * side, 0.9 * side, 2)
    ry, rx = rng.uniform(0.08 * side, 0.25 * side, 2)
    theta = rng.uniform(0, np.pi)
    yy, xx = np.mgrid[0:side, 0:side].astype(np.float64)
    dy, dx = yy - cy, xx - cx
    u = dy * np.cos(theta) + dx * np.sin(theta)
    v = -dy * np.sin(theta) + dx * np.cos(theta)
    return (u / ry) ** 2 + (v / rx) ** 2 <= 1.0


def synth_scene(cfg):
    """Procedural scene with known per-view shifts.

    The target blends a band-limited random field with sharp convex
    polygons.  Each view translates the target by a random sub-pixel
    shift, block-averages zoom x zoom, adds Gaussian noise and possibly
    paints bright occluding blobs that are zeroed in the quality map.
    Shifts are recorded in high-res pixels.  Bit-reproducible per seed.
    """
    cfg.validate()
    rng = np.random.default_rng(cfg.seed)
    z = cfg.zoom
    hr = _paint_polygons(rng, _smooth_field(rng, cfg.hr_side))
    hr = np.clip(hr, 0.02, 0.98)
    lr_side = cfg.hr_side // z

    views, masks, shifts = [], [], []
    for _ in range(cfg.views):
        dx, dy = rng.uniform(-cfg.max_shift_lr * z, cfg.max_shift_lr * z, 2)
        shifted = shift_image(hr, Shift(dx, dy), max_shift=1.5 * z)
        lr = shifted.reshape(lr_side, z, lr_side, z).mean(axis=(1, 3))
        if cfg.noise_sigma > 0:
            lr = lr + rng.normal(0.0, cfg.noise_sigma, lr.shape)
        qm = np.ones((lr_side, lr_side))
        if rng.random() < cfg.cloud_rate:
            for _ in range(int(rng.integers(1, 4))):
                blob = _ellipse_mask(rng, lr_side)
                qm[blob] = 0.0
                lr = np.where(blob, 0.25 * lr + 0.75 * rng.uniform(0.85, 1.0), lr)
        views.append(np.clip(lr, 0.0, 1.0)[None])
        masks.append(qm[None])
        shifts.append(Shift(float(dx), float(dy)))
    return Scene(
        id=cfg.scene_id,
        lr_views=views,
        quality_maps=masks,
        hr=hr[None],
        hr_mask=np.ones_like(hr)[None],
        band="synthetic",
        oracle_shifts=shifts,
    )


def synth_dataset(root, n_scenes, base_cfg=SynthConfig(), base_seed=0):
    """Generate and save ``n_scenes`` scenes under ``root``; returns their dirs."""
    paths = []
    for i in range(n_scenes):
        cfg = SynthConfig(
            hr_side=base_cfg.hr_side,
            views=base_cfg.views,
            zoom=base_cfg.zoom,
            noise_sigma=base_cfg.noise_sigma,
            cloud_rate=base_cfg.cloud_rate,
            max_shift_lr=base_cfg.max_shift_lr,
            scene_id=f"synth{base_seed + i:05d}",
            seed=base_seed + i,
        )
        paths.append(save_scene(synth_scene(cfg), root))
    return paths
