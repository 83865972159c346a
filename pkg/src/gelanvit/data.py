"""Synthetic space-scene detection data, label files and augmentation.

Scenes are dark starfields with 1-4 axis-aligned objects.  Each class has its
own procedural silhouette: a satellite body with two solar panels, a shaded
disc, and a crescent limb.  Boxes are the tight extent of the rendered mask,
so every label is exact.

On disk a dataset is ``images/<id>.ppm`` (binary P6), ``labels/<id>.txt``
and ``manifest.json``.
"""

from __future__ import annotations

import json
import os
import shutil
import tempfile
import warnings
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from matplotlib.colors import hsv_to_rgb, rgb_to_hsv
from scipy.cluster.vq import kmeans2
from scipy.ndimage import affine_transform

from . import fileio
from .metrics import GtBox

MANIFEST_VERSION = 1
MANIFEST_FORMAT = "gelanvit-dataset"
CLASS_NAMES = ("satellite", "disc", "crescent", "satellite-b", "disc-b", "crescent-b")
MAX_CLASSES = len(CLASS_NAMES)
MIN_OBJECTS, MAX_OBJECTS = 1, 4
SIZE_RANGE = (0.14, 0.40)
PLACEMENT_RETRIES = 200
LABEL_DROP_AREA = 0.10
LABEL_DECIMALS = 6
_LABEL_TOL = 5e-7


class LabelError(ValueError):
    """Malformed or out-of-range label file."""


class GenerationError(RuntimeError):
    """Dataset generation could not complete."""


@dataclass
class Sample:
    image: np.ndarray  # [3, H, W] in [0, 1]
    labels: np.ndarray  # [m, 5] (class, cx, cy, w, h) normalized
    image_id: str = ""

    @property
    def hw(self) -> tuple:
        return tuple(self.image.shape[1:])


@dataclass(frozen=True)
class AugConfig:
    hsv_s: float = 0.7
    hsv_v: float = 0.4
    scale: float = 0.5
    mixup: float = 0.0

    def __post_init__(self):
        for k, v in asdict(self).items():
            if not v >= 0:
                raise ValueError(f"AugConfig.{k} must be >= 0, got {v}")

    @classmethod
    def identity(cls) -> "AugConfig":
        return cls(0.0, 0.0, 0.0, 0.0)


# ---------------------------------------------------------------------------
# PPM images
# ---------------------------------------------------------------------------

def write_ppm(path, image: np.ndarray) -> None:
    """Write a ``[3,H,W]`` float image in [0,1] (or uint8 ``[H,W,3]``) as binary P6."""
    arr = np.asarray(image)
    if arr.dtype != np.uint8:
        arr = to_uint8(arr)
    h, w, _ = arr.shape
    fileio.write_bytes(path, f"P6\n{w} {h}\n255\n".encode("ascii") + arr.tobytes())


def to_uint8(image: np.ndarray) -> np.ndarray:
    """``[3,H,W]`` floats to ``[H,W,3]`` bytes, round-half-even."""
    return np.rint(np.clip(image, 0.0, 1.0) * 255.0).astype(np.uint8).transpose(1, 2, 0).copy()


def _ppm_tokens(buf: bytes, count: int):
    pos, out = 0, []
    while len(out) < count:
        while pos < len(buf) and buf[pos : pos + 1].isspace():
            pos += 1
        if buf[pos : pos + 1] == b"#":
            while pos < len(buf) and buf[pos : pos + 1] != b"\n":
                pos += 1
            continue
        start = pos
        while pos < len(buf) and not buf[pos : pos + 1].isspace():
            pos += 1
        if start == pos:
            raise ValueError("truncated PPM header")
        out.append(buf[start:pos])
    return out, pos + 1


def read_ppm(path) -> np.ndarray:
    """Read a binary P6 file as a ``[3,H,W]`` float64 image in [0,1]."""
    buf = Path(path).read_bytes()
    (magic, w, h, maxval), pos = _ppm_tokens(buf, 4)
    if magic != b"P6" or int(maxval) != 255:
        raise ValueError(f"{path}: only 8-bit binary P6 is supported")
    w, h = int(w), int(h)
    raw = np.frombuffer(buf, dtype=np.uint8, count=h * w * 3, offset=pos) if len(buf) - pos >= h * w * 3 else None
    if raw is None:
        raise ValueError(f"{path}: truncated pixel data")
    return raw.reshape(h, w, 3).transpose(2, 0, 1).astype(np.float64) / 255.0


# ---------------------------------------------------------------------------
# labels
# ---------------------------------------------------------------------------

def validate_labels(labels: np.ndarray, num_classes: Optional[int] = None, where: str = "labels") -> None:
    for i, (c, cx, cy, w, h) in enumerate(np.asarray(labels, dtype=np.float64).reshape(-1, 5)):
        problems = []
        if c != int(c) or c < 0 or (num_classes is not None and c >= num_classes):
            problems.append(f"class {c} invalid")
        if not (w > 0 and h > 0):
            problems.append("non-positive size")
        if cx - w / 2 < -_LABEL_TOL or cx + w / 2 > 1 + _LABEL_TOL or cy - h / 2 < -_LABEL_TOL or cy + h / 2 > 1 + _LABEL_TOL:
            problems.append("box leaves the unit square")
        if problems:
            raise LabelError(f"{where} row {i + 1}: {', '.join(problems)}")


def format_labels(labels: np.ndarray) -> str:
    rows = np.asarray(labels, dtype=np.float64).reshape(-1, 5)
    d = LABEL_DECIMALS
    return "".join(f"{int(r[0])} {r[1]:.{d}f} {r[2]:.{d}f} {r[3]:.{d}f} {r[4]:.{d}f}\n" for r in rows)


def write_labels(path, labels: np.ndarray) -> None:
    validate_labels(labels, where=str(path))
    fileio.write_text(path, format_labels(labels))


def parse_labels(text: str, where: str = "<labels>", num_classes: Optional[int] = None) -> np.ndarray:
    rows = []
    for lineno, line in enumerate(text.splitlines(), 1):
        if not line.strip():
            continue
        parts = line.split()
        if len(parts) != 5:
            raise LabelError(f"{where}:{lineno}: expected 5 fields 'class cx cy w h', got {len(parts)}")
        try:
            cls = int(parts[0])
            vals = [float(p) for p in parts[1:]]
        except ValueError:
            raise LabelError(f"{where}:{lineno}: non-numeric field in {line.strip()!r}") from None
        if not all(np.isfinite(vals)):
            raise LabelError(f"{where}:{lineno}: non-finite value")
        row = np.array([cls] + vals, dtype=np.float64)
        try:
            validate_labels(row, num_classes, where=where)
        except LabelError as exc:
            raise LabelError(f"{where}:{lineno}: {str(exc).split(': ', 1)[-1]}") from None
        rows.append(row)
    return np.array(rows).reshape(-1, 5)


def load_labels(path, num_classes: Optional[int] = None) -> np.ndarray:
    return parse_labels(Path(path).read_text(encoding="utf-8"), str(path), num_classes)


def labels_to_gt(labels: np.ndarray, image_id: str, hw) -> list:
    h, w = hw
    out = []
    for c, cx, cy, bw, bh in np.asarray(labels).reshape(-1, 5):
        out.append(GtBox(image_id, int(c), (cx - bw / 2) * w, (cy - bh / 2) * h, (cx + bw / 2) * w, (cy + bh / 2) * h))
    return out


# ---------------------------------------------------------------------------
# procedural rendering
# ---------------------------------------------------------------------------

def _coords(h: int, w: int):
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    return xx + 0.5, yy + 0.5


def _satellite_mask(size: float, rng, xx, yy, cx, cy):
    vertical = rng.random() < 0.5
    body_w, body_h = 0.28 * size, 0.42 * size
    panel_w, panel_h = 0.34 * size, 0.20 * size
    if vertical:
        xx, yy, cx, cy = yy, xx, cy, cx
    body = (np.abs(xx - cx) <= body_w / 2) & (np.abs(yy - cy) <= body_h / 2)
    off = body_w / 2 + 0.02 * size + panel_w / 2
    panels = (np.abs(np.abs(xx - cx) - off) <= panel_w / 2) & (np.abs(yy - cy) <= panel_h / 2)
    return body, panels


def _render_object(img: np.ndarray, cls: int, size: float, cx: float, cy: float, rng) -> np.ndarray:
    """Paint one object in place; returns its boolean mask."""
    _, h, w = img.shape
    xx, yy = _coords(h, w)
    shape = cls % 3
    variant = cls // 3
    bright = rng.uniform(0.65, 1.0)
    if shape == 0:
        body, panels = _satellite_mask(size, rng, xx, yy, cx, cy)
        body_rgb = np.array([0.85, 0.72, 0.35]) if variant == 0 else np.array([0.75, 0.75, 0.8])
        panel_rgb = np.array([0.25, 0.40, 0.90]) if variant == 0 else np.array([0.70, 0.30, 0.85])
        img[:, panels] = (panel_rgb * bright)[:, None]
        img[:, body] = (body_rgb * bright)[:, None]
        return body | panels
    r = size / 2
    d2 = (xx - cx) ** 2 + (yy - cy) ** 2
    disc = d2 <= r * r
    if shape == 1:
        rgb = np.array([0.95, 0.55, 0.25]) if variant == 0 else np.array([0.55, 0.85, 0.55])
        shade = 0.55 + 0.45 * np.sqrt(np.clip(1.0 - d2 / (r * r), 0.0, 1.0))
        img[:, disc] = rgb[:, None] * (bright * shade[disc])[None]
        return disc
    ang = rng.uniform(0, 2 * np.pi)
    shift = rng.uniform(0.35, 0.6) * size
    ox, oy = cx + shift * np.cos(ang), cy + shift * np.sin(ang)
    crescent = disc & (((xx - ox) ** 2 + (yy - oy) ** 2) > r * r)
    rgb = np.array([0.95, 0.95, 0.80]) if variant == 0 else np.array([0.60, 0.80, 1.0])
    img[:, crescent] = (rgb * bright)[:, None]
    return crescent


def _starfield(h: int, w: int, rng) -> np.ndarray:
    img = np.clip(rng.normal(0.03, 0.01, size=(3, h, w)), 0.0, 1.0)
    n = rng.poisson(h * w / 90.0)
    ys, xs = rng.integers(0, h, n), rng.integers(0, w, n)
    star = rng.uniform(0.25, 0.9, n)
    tint = rng.uniform(0.85, 1.0, (3, n))
    img[:, ys, xs] = np.maximum(img[:, ys, xs], tint * star)
    return img


def _mask_box(mask: np.ndarray):
    ys, xs = np.nonzero(mask)
    return xs.min(), ys.min(), xs.max() + 1, ys.max() + 1


def _overlaps(box, boxes, margin: float = 1.0) -> bool:
    x1, y1, x2, y2 = box
    return any(x1 < b[2] + margin and b[0] < x2 + margin and y1 < b[3] + margin and b[1] < y2 + margin for b in boxes)


def render_sample(index: int, seed: int, classes: int, image_hw) -> Sample:
    """Render scene ``index`` from its own RNG stream ``(seed, index)``."""
    rng = np.random.default_rng([seed, index])
    h, w = image_hw
    img = _starfield(h, w, rng)
    n_obj = int(rng.integers(MIN_OBJECTS, MAX_OBJECTS + 1))
    placed, labels = [], []
    side = min(h, w)
    for k in range(n_obj):
        cls = int(rng.integers(0, classes))
        for _ in range(PLACEMENT_RETRIES):
            size = rng.uniform(*SIZE_RANGE) * side
            half = size / 2 + 1
            cx, cy = rng.uniform(half, w - half), rng.uniform(half, h - half)
            trial = img.copy()
            mask = _render_object(trial, cls, size, cx, cy, rng)
            if not mask.any():
                continue
            box = _mask_box(mask)
            if _overlaps(box, placed):
                continue
            img = trial
            placed.append(box)
            x1, y1, x2, y2 = box
            labels.append([cls, (x1 + x2) / 2 / w, (y1 + y2) / 2 / h, (x2 - x1) / w, (y2 - y1) / h])
            break
        else:
            raise GenerationError(f"image {index}: could not place object {k + 1} of {n_obj} after {PLACEMENT_RETRIES} tries")
    return Sample(img, np.array(labels, dtype=np.float64).reshape(-1, 5), f"{index:06d}")


# ---------------------------------------------------------------------------
# anchors
# ---------------------------------------------------------------------------

def kmeans_anchors(wh: np.ndarray, n_scales: int, per_scale: int = 3, seed: int = 0) -> tuple:
    """Cluster box sizes (pixels) into ``n_scales`` groups of anchors, smallest area first."""
    k = n_scales * per_scale
    wh = np.asarray(wh, dtype=np.float64).reshape(-1, 2)
    if len(wh) == 0:
        raise GenerationError("no boxes to cluster into anchors")
    if len(wh) < k:
        wh = np.concatenate([wh] * (k // len(wh) + 1))
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        centers, _ = kmeans2(wh, k, iter=30, minit="++", seed=np.random.default_rng(seed))
    # empty clusters keep their seed point; fall back to quantiles if any center is degenerate
    if not np.all(np.isfinite(centers)) or np.any(centers <= 0):
        q = np.linspace(0, 1, k)
        centers = np.stack([np.quantile(wh[:, 0], q), np.quantile(wh[:, 1], q)], 1)
    centers = centers[np.argsort(centers.prod(1), kind="stable")]
    flat = [(round(float(a), 2), round(float(b), 2)) for a, b in centers]
    return tuple(tuple(flat[g * per_scale : (g + 1) * per_scale]) for g in range(n_scales))


# ---------------------------------------------------------------------------
# dataset generation and loading
# ---------------------------------------------------------------------------

def _prepare_out(out_dir: Path) -> Path:
    out_dir = Path(out_dir)
    if out_dir.exists():
        if not out_dir.is_dir():
            raise GenerationError(f"{out_dir} exists and is not a directory")
        if any(out_dir.iterdir()) and not (out_dir / "manifest.json").exists():
            raise GenerationError(f"{out_dir} is not empty and is not a dataset; refusing to overwrite")
    parent = out_dir.parent
    parent.mkdir(parents=True, exist_ok=True)
    if not os.access(parent, os.W_OK):
        raise GenerationError(f"{parent} is not writable")
    return Path(tempfile.mkdtemp(prefix=f".{out_dir.name}.", dir=parent))


def gen_dataset(n: int, classes: int, image_hw, seed: int, out_dir) -> dict:
    """Generate ``n`` scenes into ``out_dir``; returns the manifest.

    Output is written to a temp sibling and renamed into place, so a failed
    run leaves no partial dataset.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    if not 1 <= classes <= MAX_CLASSES:
        raise ValueError(f"classes must be in 1..{MAX_CLASSES}")
    if isinstance(image_hw, int):
        image_hw = (image_hw, image_hw)
    h, w = (int(v) for v in image_hw)
    out_dir = Path(out_dir)
    tmp = _prepare_out(out_dir)
    try:
        (tmp / "images").mkdir()
        (tmp / "labels").mkdir()
        ids, sizes, n_obj = [], [], 0
        for i in range(n):
            s = render_sample(i, seed, classes, (h, w))
            write_ppm(tmp / "images" / f"{s.image_id}.ppm", s.image)
            write_labels(tmp / "labels" / f"{s.image_id}.txt", s.labels)
            ids.append(s.image_id)
            stored = parse_labels(format_labels(s.labels))
            sizes.append(stored[:, 3:5] * [w, h])
            n_obj += len(s.labels)
        wh = np.concatenate(sizes)
        manifest = {
            "format": MANIFEST_FORMAT,
            "version": MANIFEST_VERSION,
            "seed": seed,
            "count": n,
            "objects": n_obj,
            "image_hw": [h, w],
            "classes": classes,
            "class_names": list(CLASS_NAMES[:classes]),
            "anchors": {str(k): [list(map(list, g)) for g in kmeans_anchors(wh, k, 3, seed)] for k in (2, 3)},
            "images": ids,
        }
        fileio.write_text(tmp / "manifest.json", json.dumps(manifest, indent=2) + "\n")
        if out_dir.exists():
            shutil.rmtree(out_dir)
        os.replace(tmp, out_dir)
    except BaseException:
        shutil.rmtree(tmp, ignore_errors=True)
        raise
    return manifest


class Dataset:
    """A generated dataset directory with images cached in memory after first access."""

    def __init__(self, root):
        self.root = Path(root)
        path = self.root / "manifest.json"
        if not path.exists():
            raise FileNotFoundError(f"{self.root}: no manifest.json")
        self.manifest = json.loads(path.read_text(encoding="utf-8"))
        if self.manifest.get("format") != MANIFEST_FORMAT or self.manifest.get("version") != MANIFEST_VERSION:
            raise ValueError(f"{path}: unsupported manifest format/version")
        self.ids = list(self.manifest["images"])
        self.num_classes = int(self.manifest["classes"])
        self.class_names = tuple(self.manifest["class_names"])
        self.image_hw = tuple(self.manifest["image_hw"])
        self._cache: dict = {}

    def __len__(self) -> int:
        return len(self.ids)

    def anchors(self, n_scales: int) -> tuple:
        groups = self.manifest["anchors"].get(str(n_scales))
        if groups is None:
            raise KeyError(f"manifest has no {n_scales}-scale anchor set")
        return tuple(tuple((float(a), float(b)) for a, b in g) for g in groups)

    def __getitem__(self, i: int) -> Sample:
        if i not in self._cache:
            image_id = self.ids[i]
            image = read_ppm(self.root / "images" / f"{image_id}.ppm")
            labels = load_labels(self.root / "labels" / f"{image_id}.txt", self.num_classes)
            self._cache[i] = Sample(image, labels, image_id)
        return self._cache[i]

    def gt_boxes(self) -> list:
        out = []
        for i in range(len(self)):
            s = self[i]
            out.extend(labels_to_gt(s.labels, s.image_id, s.hw))
        return out


def collate(samples: Sequence[Sample]):
    """Stack images ``[N,3,H,W]`` and build ``[M,6]`` target rows."""
    images = np.stack([s.image for s in samples])
    rows = [np.concatenate([np.full((len(s.labels), 1), float(i)), s.labels], 1) for i, s in enumerate(samples) if len(s.labels)]
    targets = np.concatenate(rows, 0) if rows else np.zeros((0, 6))
    return images, targets


# ---------------------------------------------------------------------------
# augmentation
# ---------------------------------------------------------------------------

def hsv_factors(cfg: AugConfig, rng, size=None):
    """Multiplicative ``(saturation, value)`` factors ``1 + U(-1,1)*gain``."""
    u = rng.uniform(-1.0, 1.0, size=(2,) if size is None else (2, size))
    return 1.0 + u[0] * cfg.hsv_s, 1.0 + u[1] * cfg.hsv_v


def apply_hsv(image: np.ndarray, s_gain: float, v_gain: float) -> np.ndarray:
    hsv = rgb_to_hsv(np.clip(image.transpose(1, 2, 0), 0.0, 1.0))
    hsv[..., 1] = np.clip(hsv[..., 1] * s_gain, 0.0, 1.0)
    hsv[..., 2] = np.clip(hsv[..., 2] * v_gain, 0.0, 1.0)
    return np.clip(hsv_to_rgb(hsv), 0.0, 1.0).transpose(2, 0, 1)


def scale_labels(labels: np.ndarray, factor: float) -> np.ndarray:
    """Scale boxes about the image center, clip to the unit square, drop slivers."""
    if len(labels) == 0:
        return labels.copy()
    c = labels[:, 0:1]
    cx = (labels[:, 1] - 0.5) * factor + 0.5
    cy = (labels[:, 2] - 0.5) * factor + 0.5
    w, h = labels[:, 3] * factor, labels[:, 4] * factor
    x1, x2 = np.clip(cx - w / 2, 0, 1), np.clip(cx + w / 2, 0, 1)
    y1, y2 = np.clip(cy - h / 2, 0, 1), np.clip(cy + h / 2, 0, 1)
    area = np.clip(x2 - x1, 0, None) * np.clip(y2 - y1, 0, None)
    keep = area >= LABEL_DROP_AREA * w * h
    out = np.stack([c[:, 0], (x1 + x2) / 2, (y1 + y2) / 2, x2 - x1, y2 - y1], 1)
    return out[keep]


def scale_image(image: np.ndarray, factor: float, fill: float = 0.0) -> np.ndarray:
    _, h, w = image.shape
    inv = 1.0 / factor
    # output pixel center p maps to input center (p + 0.5 - c) / f + c - 0.5
    out = np.empty_like(image)
    for ch in range(image.shape[0]):
        out[ch] = affine_transform(
            image[ch],
            np.diag([inv, inv]),
            offset=[(h / 2) * (1 - inv) + 0.5 * inv - 0.5, (w / 2) * (1 - inv) + 0.5 * inv - 0.5],
            order=1,
            mode="constant",
            cval=fill,
        )
    return out


def augment(sample: Sample, cfg: AugConfig, rng, partner: Optional[Sample] = None) -> Sample:
    """HSV jitter, center scale and (when enabled) mixup; draw order is fixed."""
    s_gain, v_gain = hsv_factors(cfg, rng)
    factor = 1.0 + rng.uniform(-1.0, 1.0) * cfg.scale
    image, labels = sample.image, sample.labels
    if cfg.hsv_s > 0 or cfg.hsv_v > 0:
        image = apply_hsv(image, s_gain, v_gain)
    if cfg.scale > 0 and factor != 1.0:
        image = scale_image(image, factor)
        labels = scale_labels(labels, factor)
    if cfg.mixup > 0 and partner is not None and rng.random() < cfg.mixup:
        r = rng.beta(32.0, 32.0)
        image = image * r + partner.image * (1.0 - r)
        labels = np.concatenate([labels, partner.labels], 0)
    if image is sample.image:
        image = image.copy()
    return Sample(image, labels.copy(), sample.image_id)
