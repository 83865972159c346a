"""Training configuration, learning-rate schedule, SGD and the epoch loop.

The run is a pure function of (config, dataset): batch order comes from
``default_rng([seed, 1, epoch])`` and each sample's augmentation draws from
``default_rng([seed, 2, epoch, index])``, so neither depends on iteration
order.
"""

from __future__ import annotations

import json
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Callable, Optional

import numpy as np

from . import fileio
from . import tensor as T
from .checkpoint import save_checkpoint
from .data import AugConfig, Dataset, augment, collate
from .detect import ANCHOR_T, LossGains, NmsConfig, compute_loss, postprocess
from .metrics import MetricsReport, evaluate_detections
from .tensor import Tape, backward
from .zoo import Model, zoo_spec

CONFIG_FORMAT = "gelanvit-train-config"
CONFIG_VERSION = 1
LOG_VERSION = 1
LOG_COLUMNS = ("epoch", "lr", "box", "cls", "obj", "total", "val_map50", "val_map50_95", "wall_time")


class ConfigError(ValueError):
    """Invalid configuration; the message starts with the offending field."""

    def __init__(self, name: str, message: str):
        super().__init__(f"{name}: {message}")
        self.field = name


@dataclass(frozen=True)
class TrainConfig:
    model: str = "gelan-vit-mini"
    epochs: int = 200
    batch_size: int = 8
    lr0: float = 0.01
    lrf: float = 0.1
    momentum: float = 0.937
    weight_decay: float = 0.0005
    warmup_epochs: float = 3.0
    seed: int = 0
    anchor_t: float = ANCHOR_T
    # backward runs on total * loss_scale; 64 is the YOLO nominal batch
    loss_scale: float = 64.0
    # global gradient-norm cap; 0 disables
    grad_clip: float = 0.0
    dtype: str = "float64"
    val_conf_thresh: float = 0.001
    val_iou_thresh: float = 0.45
    gains: LossGains = field(default_factory=LossGains)
    aug: AugConfig = field(default_factory=AugConfig)

    def __post_init__(self):
        checks = [
            ("lr0", self.lr0 > 0, "must be > 0"),
            ("lrf", 0 < self.lrf <= 1, "must be in (0, 1]"),
            ("epochs", isinstance(self.epochs, int) and self.epochs >= 1, "must be an integer >= 1"),
            ("batch_size", isinstance(self.batch_size, int) and self.batch_size >= 1, "must be an integer >= 1"),
            ("momentum", 0 <= self.momentum < 1, "must be in [0, 1)"),
            ("weight_decay", self.weight_decay >= 0, "must be >= 0"),
            ("warmup_epochs", self.warmup_epochs >= 0, "must be >= 0"),
            ("anchor_t", self.anchor_t > 1, "must be > 1"),
            ("loss_scale", self.loss_scale > 0, "must be > 0"),
            ("grad_clip", self.grad_clip >= 0, "must be >= 0"),
            ("dtype", self.dtype in ("float32", "float64"), "must be float32 or float64"),
            ("val_conf_thresh", 0 <= self.val_conf_thresh < 1, "must be in [0, 1)"),
            ("val_iou_thresh", 0 < self.val_iou_thresh <= 1, "must be in (0, 1]"),
        ]
        for name, ok, msg in checks:
            if not ok:
                raise ConfigError(name, f"{msg}, got {getattr(self, name)!r}")
        for name in ("box", "cls", "obj"):
            if not getattr(self.gains, name) >= 0:
                raise ConfigError(f"gains.{name}", "must be >= 0")

    def to_dict(self) -> dict:
        d = {"format": CONFIG_FORMAT, "version": CONFIG_VERSION}
        d.update(asdict(self))
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        if d.pop("format", CONFIG_FORMAT) != CONFIG_FORMAT:
            raise ConfigError("format", f"expected {CONFIG_FORMAT!r}")
        version = d.pop("version", CONFIG_VERSION)
        if version != CONFIG_VERSION:
            raise ConfigError("version", f"unsupported config version {version}")
        known = {f.name for f in fields(cls)}
        for k in d:
            if k not in known:
                raise ConfigError(k, "unknown field")
        sub = {"gains": LossGains, "aug": AugConfig}
        for k, typ in sub.items():
            if k in d:
                allowed = {f.name for f in fields(typ)}
                for kk in d[k]:
                    if kk not in allowed:
                        raise ConfigError(f"{k}.{kk}", "unknown field")
                try:
                    d[k] = typ(**d[k])
                except ValueError as exc:
                    raise ConfigError(k, str(exc)) from None
        return cls(**d)

    def with_(self, **kw) -> "TrainConfig":
        d = asdict(self)
        d["gains"], d["aug"] = self.gains, self.aug
        d.update(kw)
        return TrainConfig(**d)


def load_config(path) -> TrainConfig:
    try:
        raw = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ConfigError("config", f"{path}: invalid JSON ({exc})") from None
    if not isinstance(raw, dict):
        raise ConfigError("config", f"{path}: top level must be an object")
    return TrainConfig.from_dict(raw)


def save_config(cfg: TrainConfig, path) -> None:
    fileio.write_text(path, json.dumps(cfg.to_dict(), indent=2, sort_keys=True) + "\n")


# ---------------------------------------------------------------------------
# schedule and optimizer
# ---------------------------------------------------------------------------

def lr_at(epoch: float, cfg: TrainConfig) -> float:
    """Linear one-cycle decay from ``lr0`` to ``lr0 * lrf`` over ``epochs``."""
    if not 0 <= epoch <= cfg.epochs:
        raise ValueError(f"epoch {epoch} outside [0, {cfg.epochs}]")
    return cfg.lr0 * ((1 - epoch / cfg.epochs) * (1.0 - cfg.lrf) + cfg.lrf)


def lr_with_warmup(epoch: float, cfg: TrainConfig) -> float:
    """Schedule value, linearly ramped up from ``lr0 / 100`` during the first ``warmup_epochs``."""
    target = lr_at(epoch, cfg)
    if cfg.warmup_epochs > 0 and epoch < cfg.warmup_epochs:
        start = cfg.lr0 / 100.0
        return start + (target - start) * (epoch / cfg.warmup_epochs)
    return target


def param_groups(model) -> dict:
    """Parameter names split by whether weight decay applies."""
    groups = {"decay": [], "no_decay": []}
    for name, p in model.named_parameters():
        groups["decay" if getattr(p, "decay", False) else "no_decay"].append(name)
    return groups


class SGD:
    """Momentum SGD: ``v = momentum*v + g + wd*p`` (wd on decay params only), ``p -= lr*v``.

    With ``grad_clip > 0`` the raw gradients are first rescaled so their
    global L2 norm is at most ``grad_clip``.
    """

    def __init__(self, params, momentum: float, weight_decay: float, grad_clip: float = 0.0):
        self.params = list(params)
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.grad_clip = grad_clip
        self.velocity = [np.zeros_like(p.data) for p in self.params]
        self.steps = 0

    def grad_norm(self) -> float:
        return float(np.sqrt(sum(float(np.sum(p.grad * p.grad)) for p in self.params if p.grad is not None)))

    def step(self, lr: float) -> None:
        factor = 1.0
        if self.grad_clip > 0:
            norm = self.grad_norm()
            if norm > self.grad_clip:
                factor = self.grad_clip / norm
        for p, v in zip(self.params, self.velocity):
            if p.grad is None:
                continue
            g = p.grad if factor == 1.0 else p.grad * factor
            if self.weight_decay and getattr(p, "decay", False):
                g = g + self.weight_decay * p.data
            v *= self.momentum
            v += g
            p.data -= lr * v
        self.steps += 1

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None


# ---------------------------------------------------------------------------
# logging
# ---------------------------------------------------------------------------

@dataclass
class LogRow:
    epoch: int
    lr: float
    box: float
    cls: float
    obj: float
    total: float
    val_map50: float
    val_map50_95: float
    wall_time: float

    def format(self) -> str:
        vals = [str(self.epoch)] + [repr(float(getattr(self, c))) for c in LOG_COLUMNS[1:]]
        return "\t".join(vals)


@dataclass
class TrainLog:
    rows: list = field(default_factory=list)

    def append(self, row: LogRow) -> None:
        if self.rows and row.epoch <= self.rows[-1].epoch:
            raise ValueError("log rows must be strictly increasing in epoch")
        self.rows.append(row)

    def column(self, name: str) -> list:
        return [getattr(r, name) for r in self.rows]

    def loss_columns(self) -> list:
        return [(r.box, r.cls, r.obj, r.total) for r in self.rows]

    @staticmethod
    def header() -> str:
        return f"# trainlog v{LOG_VERSION}\n" + "\t".join(LOG_COLUMNS) + "\n"

    def format(self) -> str:
        return self.header() + "".join(r.format() + "\n" for r in self.rows)


def read_train_log(path) -> TrainLog:
    log = TrainLog()
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    if not lines or lines[0] != f"# trainlog v{LOG_VERSION}":
        raise ValueError(f"{path}: not a v{LOG_VERSION} train log")
    for line in lines[2:]:
        parts = line.split("\t")
        log.append(LogRow(int(parts[0]), *(float(p) for p in parts[1:])))
    return log


# ---------------------------------------------------------------------------
# model construction, evaluation, training
# ---------------------------------------------------------------------------

def model_for_dataset(name_or_spec, dataset: Dataset, seed: int = 0, dtype="float64") -> Model:
    """Build a model whose classes, anchors and input size follow ``dataset``."""
    spec = zoo_spec(name_or_spec) if isinstance(name_or_spec, str) else name_or_spec
    spec = spec.with_classes(dataset.num_classes).with_input(dataset.image_hw)
    spec = spec.with_anchors(dataset.anchors(len(spec.heads)))
    return Model(spec, seed=seed, dtype=np.dtype(dtype))


def predict(model: Model, dataset: Dataset, nms: NmsConfig, batch_size: int = 16) -> list:
    dets = []
    for start in range(0, len(dataset), batch_size):
        samples = [dataset[i] for i in range(start, min(start + batch_size, len(dataset)))]
        images, _ = collate(samples)
        raws = model.forward(images, training=False)
        for group in postprocess(raws, model.anchors, model.num_classes, nms, [s.image_id for s in samples]):
            dets.extend(group)
    return dets


def evaluate(model: Model, dataset: Dataset, nms: NmsConfig = NmsConfig(), det_path=None, batch_size: int = 16) -> MetricsReport:
    """Inference, NMS and metrics; optionally writes the detection file."""
    if model.num_classes != dataset.num_classes:
        raise ConfigError("num_classes", f"model has {model.num_classes} classes, dataset has {dataset.num_classes}")
    dets = predict(model, dataset, nms, batch_size)
    if det_path is not None:
        with fileio.atomic_open(det_path, "w") as fh:
            for d in dets:
                fh.write(f"{d.image_id} {d.class_id} {d.confidence:.6f} {d.x1:.2f} {d.y1:.2f} {d.x2:.2f} {d.y2:.2f}\n")
    return evaluate_detections(dets, dataset.gt_boxes(), dataset.num_classes, dataset.class_names)


@dataclass
class RunSummary:
    reports: list
    map50_mean: float
    map50_spread: float
    map50_95_mean: float
    map50_95_spread: float

    def format(self) -> str:
        return (
            f"runs {len(self.reports)}\n"
            f"mAP50 {self.map50_mean:.6f} +- {self.map50_spread:.6f}\n"
            f"mAP50:95 {self.map50_95_mean:.6f} +- {self.map50_95_spread:.6f}\n"
        )


def evaluate_runs(model: Model, dataset: Dataset, nms: NmsConfig, runs: int) -> RunSummary:
    """Repeat evaluation ``runs`` times; spread is max - min over runs.

    Each run reseeds numpy's global generator with the run index, which is
    the only evaluation-time randomness source a caller could introduce.
    """
    reports = []
    for r in range(runs):
        np.random.seed(r)
        reports.append(evaluate(model, dataset, nms))
    a = np.array([rep.map50 for rep in reports])
    b = np.array([rep.map50_95 for rep in reports])
    return RunSummary(reports, float(a.mean()), float(a.max() - a.min()), float(b.mean()), float(b.max() - b.min()))


def _batches(n: int, batch_size: int, seed: int, epoch: int) -> list:
    perm = np.random.default_rng([seed, 1, epoch]).permutation(n)
    return [perm[i : i + batch_size] for i in range(0, n, batch_size)]


def train(
    cfg: TrainConfig,
    dataset: Dataset,
    model: Optional[Model] = None,
    val_dataset: Optional[Dataset] = None,
    out_dir=None,
    progress: Optional[Callable[[LogRow], None]] = None,
) -> tuple:
    """Train ``model`` (built from ``cfg.model`` when omitted); returns ``(model, TrainLog)``.

    Validation runs after every epoch on ``val_dataset`` (the training set,
    unaugmented, when omitted).  With ``out_dir`` the log is appended row by
    row to ``train_log.tsv`` and ``last.ckpt`` / ``best.ckpt`` are written.
    """
    if len(dataset) == 0:
        raise ValueError("training dataset is empty")
    if model is None:
        model = model_for_dataset(cfg.model, dataset, cfg.seed, cfg.dtype)
    if model.num_classes != dataset.num_classes:
        raise ConfigError("num_classes", f"model has {model.num_classes} classes, dataset has {dataset.num_classes}")
    val = val_dataset if val_dataset is not None else dataset
    nms = NmsConfig(cfg.val_conf_thresh, cfg.val_iou_thresh)
    out = Path(out_dir) if out_dir is not None else None
    log_path = None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        save_config(cfg, out / "config.json")
        log_path = out / "train_log.tsv"
        fileio.write_text(log_path, TrainLog.header())
    opt = SGD(model.parameters(), cfg.momentum, cfg.weight_decay, cfg.grad_clip)
    log = TrainLog()
    best = -1.0
    n = len(dataset)
    hw = dataset.image_hw
    meta = {"class_names": list(dataset.class_names), "seed": cfg.seed}
    t0 = time.perf_counter()
    for epoch in range(cfg.epochs):
        batches = _batches(n, cfg.batch_size, cfg.seed, epoch)
        sums = np.zeros(4)
        for b, idx in enumerate(batches):
            lr = lr_with_warmup(epoch + b / len(batches), cfg)
            samples = [augment(dataset[int(i)], cfg.aug, np.random.default_rng([cfg.seed, 2, epoch, int(i)])) for i in idx]
            images, targets = collate(samples)
            tape = Tape()
            raws = model.forward(images.astype(model.dtype), training=True, tape=tape)
            lb = compute_loss(raws, targets, model.anchors, model.num_classes, hw, cfg.gains, cfg.anchor_t)
            parts = np.array([lb.box, lb.cls, lb.obj, lb.total])
            if not np.all(np.isfinite(parts)):
                raise T.NonFiniteError(
                    f"non-finite loss at epoch {epoch} batch {b}: lr={lr!r} box={lb.box!r} cls={lb.cls!r} obj={lb.obj!r} total={lb.total!r}"
                )
            loss = lb.total_tensor * float(cfg.loss_scale)
            opt.zero_grad()
            backward(loss, tape)
            opt.step(lr)
            sums += parts * len(idx)
        box, cls, obj, total = sums / n
        report = evaluate(model, val, nms)
        row = LogRow(epoch, lr_at(epoch, cfg), box, cls, obj, total, report.map50, report.map50_95, time.perf_counter() - t0)
        log.append(row)
        if out is not None:
            with open(log_path, "a", encoding="utf-8") as fh:
                fh.write(row.format() + "\n")
            save_checkpoint(model, out / "last.ckpt", dict(meta, epoch=epoch))
            if report.map50 > best:
                best = report.map50
                save_checkpoint(model, out / "best.ckpt", dict(meta, epoch=epoch))
        if progress is not None:
            progress(row)
    return model, log
