"""Declarative model graphs, model assembly and complexity auditing.

A :class:`GraphSpec` is an ordered list of :class:`LayerSpec` rows.  Channel
widths are written in base units and resolved through ``width_scale``; every
derived size (input channels, token grids, strides) comes from shape
propagation, which the parameter and FLOP auditors share with the builder.

Graph spec text grammar (one statement per line, ``#`` starts a comment)::

    spec_version 1
    name <identifier>
    width_scale <float>
    input_hw <H> <W>
    num_classes <int>
    anchors_per_scale <int>
    anchors <w>,<h> <w>,<h> ... | <w>,<h> ...      # one group per head, pixels
    layer <id> <Kind> from=<id|input>[,<id>...] path=<local|global|shared> [key=value ...]

Layer keys: ``out`` (base channels), ``k``, ``s``, ``depth``, ``heads``,
``layers``, ``vit_heads``, ``vit_layers``, ``norm`` (0/1), ``label``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from importlib import resources
from typing import Optional

import numpy as np

from . import blocks as B
from . import tensor as T
from .tensor import Tape, Tensor

SPEC_VERSION = 1
INPUT = -1
KINDS = ("ConvBlock", "Down", "RepNCSPELAN4", "SPPPool", "ViTPath", "RepNCSPELAN4_ViT", "Upsample", "Concat", "Detect")
PATHS = ("local", "global", "shared")
MIN_CHANNELS = 8
CHANNEL_MULTIPLE = 4
SHIPPED = ("gelan-t-mini", "gelan-vit-mini", "gelan-repvit-mini")

_INT_KEYS = ("out", "k", "s", "depth", "heads", "layers", "vit_heads", "vit_layers", "norm")
_DEFAULTS = {
    "ConvBlock": {"k": 1, "s": 1, "norm": 1},
    "RepNCSPELAN4": {"depth": 2},
    "RepNCSPELAN4_ViT": {"depth": 2, "vit_heads": 2, "vit_layers": 1},
    "ViTPath": {"heads": 4, "layers": 2},
}


class SpecError(ValueError):
    """A graph spec is malformed or inconsistent; messages name the layer id."""


@dataclass(frozen=True)
class LayerSpec:
    id: int
    kind: str
    inputs: tuple
    path: str
    params: dict = field(default_factory=dict)

    def get(self, key, default=None):
        if key in self.params:
            return self.params[key]
        return _DEFAULTS.get(self.kind, {}).get(key, default)


@dataclass(frozen=True)
class GraphSpec:
    name: str
    width_scale: float
    input_hw: tuple
    num_classes: int
    layers: tuple
    anchors_per_scale: int = 3
    anchors: tuple = ()
    spec_version: int = SPEC_VERSION

    @property
    def detect(self) -> LayerSpec:
        return self.layers[-1]

    @property
    def heads(self) -> tuple:
        return self.detect.inputs

    def layer(self, lid: int) -> LayerSpec:
        for ly in self.layers:
            if ly.id == lid:
                return ly
        raise KeyError(lid)

    def with_width(self, width_scale: float) -> "GraphSpec":
        return replace(self, width_scale=float(width_scale))

    def with_classes(self, num_classes: int) -> "GraphSpec":
        return replace(self, num_classes=int(num_classes))

    def with_anchors(self, anchors) -> "GraphSpec":
        groups = tuple(tuple((float(w), float(h)) for w, h in g) for g in anchors)
        return replace(self, anchors=groups)

    def with_input(self, hw) -> "GraphSpec":
        return replace(self, input_hw=(int(hw[0]), int(hw[1])))

    def channels(self, base: int) -> int:
        return scale_channels(base, self.width_scale)


def scale_channels(base: int, width_scale: float) -> int:
    c = math.ceil(base * width_scale / CHANNEL_MULTIPLE - 1e-9) * CHANNEL_MULTIPLE
    return max(MIN_CHANNELS, int(c))


# ---------------------------------------------------------------------------
# text format
# ---------------------------------------------------------------------------

def _fmt_num(v) -> str:
    if isinstance(v, float):
        return repr(v) if not v.is_integer() else f"{v:.1f}"
    return str(v)


def format_spec(spec: GraphSpec) -> str:
    lines = [
        f"spec_version {spec.spec_version}",
        f"name {spec.name}",
        f"width_scale {_fmt_num(float(spec.width_scale))}",
        f"input_hw {spec.input_hw[0]} {spec.input_hw[1]}",
        f"num_classes {spec.num_classes}",
        f"anchors_per_scale {spec.anchors_per_scale}",
    ]
    if spec.anchors:
        groups = [" ".join(f"{_fmt_num(float(w))},{_fmt_num(float(h))}" for w, h in g) for g in spec.anchors]
        lines.append("anchors " + " | ".join(groups))
    for ly in spec.layers:
        src = ",".join("input" if i == INPUT else str(i) for i in ly.inputs)
        extra = "".join(f" {k}={v}" for k, v in ly.params.items())
        lines.append(f"layer {ly.id} {ly.kind} from={src} path={ly.path}{extra}")
    return "\n".join(lines) + "\n"


def parse_spec(text: str) -> GraphSpec:
    head: dict = {}
    layers = []
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, _, rest = line.partition(" ")
        rest = rest.strip()
        try:
            if key == "layer":
                layers.append(_parse_layer(rest))
            elif key in ("spec_version", "num_classes", "anchors_per_scale"):
                head[key] = int(rest)
            elif key == "width_scale":
                head[key] = float(rest)
            elif key == "name":
                head[key] = rest
            elif key == "input_hw":
                h, w = rest.split()
                head[key] = (int(h), int(w))
            elif key == "anchors":
                head[key] = tuple(
                    tuple(tuple(float(v) for v in pair.split(",")) for pair in grp.split()) for grp in rest.split("|")
                )
            else:
                raise SpecError(f"unknown statement {key!r}")
        except SpecError as exc:
            raise SpecError(f"line {lineno}: {exc}") from None
        except ValueError as exc:
            raise SpecError(f"line {lineno}: {exc}") from None
    if head.get("spec_version") != SPEC_VERSION:
        raise SpecError(f"unsupported spec_version {head.get('spec_version')!r} (expected {SPEC_VERSION})")
    missing = [k for k in ("name", "width_scale", "input_hw", "num_classes") if k not in head]
    if missing:
        raise SpecError(f"graph spec lacks {', '.join(missing)}")
    spec = GraphSpec(
        name=head["name"],
        width_scale=head["width_scale"],
        input_hw=head["input_hw"],
        num_classes=head["num_classes"],
        layers=tuple(layers),
        anchors_per_scale=head.get("anchors_per_scale", 3),
        anchors=head.get("anchors", ()),
    )
    validate_spec(spec)
    return spec


def _parse_layer(rest: str) -> LayerSpec:
    parts = rest.split()
    if len(parts) < 4:
        raise SpecError(f"layer statement needs id, kind, from= and path=: {rest!r}")
    lid, kind, kv = int(parts[0]), parts[1], parts[2:]
    fields = {}
    for item in kv:
        k, sep, v = item.partition("=")
        if not sep:
            raise SpecError(f"layer {lid}: expected key=value, got {item!r}")
        fields[k] = v
    if "from" not in fields or "path" not in fields:
        raise SpecError(f"layer {lid}: from= and path= are required")
    inputs = tuple(INPUT if s == "input" else int(s) for s in fields.pop("from").split(","))
    path = fields.pop("path")
    params = {}
    for k, v in fields.items():
        if k in _INT_KEYS:
            params[k] = int(v)
        elif k == "label":
            params[k] = v
        else:
            raise SpecError(f"layer {lid}: unknown key {k!r}")
    return LayerSpec(lid, kind, inputs, path, params)


def load_spec(path) -> GraphSpec:
    with open(path, "r", encoding="utf-8") as fh:
        return parse_spec(fh.read())


def save_spec(spec: GraphSpec, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(format_spec(spec))


def zoo_spec(name: str, width_scale: Optional[float] = None) -> GraphSpec:
    """One of the shipped mini specs, optionally at a different width."""
    if name not in SHIPPED:
        raise SpecError(f"unknown model {name!r}; shipped: {', '.join(SHIPPED)}")
    text = resources.files("gelanvit").joinpath("specs", f"{name}.gspec").read_text(encoding="utf-8")
    spec = parse_spec(text)
    return spec if width_scale is None else spec.with_width(width_scale)


# ---------------------------------------------------------------------------
# validation and shape propagation
# ---------------------------------------------------------------------------

@dataclass
class Resolved:
    """A layer with its sizes made concrete for one input resolution."""

    spec: LayerSpec
    c_in: tuple
    c_out: int
    out_hw: tuple
    stride: int
    tokens_hw: tuple = ()
    embed_dim: int = 0
    trunk: int = 0


def validate_spec(spec: GraphSpec) -> None:
    if not spec.layers:
        return
    seen = set()
    for pos, ly in enumerate(spec.layers):
        if ly.kind not in KINDS:
            raise SpecError(f"layer {ly.id}: unknown kind {ly.kind!r}")
        if ly.path not in PATHS:
            raise SpecError(f"layer {ly.id}: path tag must be one of {PATHS}, got {ly.path!r}")
        if ly.id in seen:
            raise SpecError(f"layer {ly.id}: duplicate id")
        for src in ly.inputs:
            if src != INPUT and src not in seen:
                raise SpecError(f"layer {ly.id}: input {src} does not precede it (graph must be a DAG in declaration order)")
        if ly.kind == "Detect" and pos != len(spec.layers) - 1:
            raise SpecError(f"layer {ly.id}: Detect must be the last layer")
        if ly.kind not in ("Concat", "Detect") and len(ly.inputs) != 1:
            raise SpecError(f"layer {ly.id}: {ly.kind} takes exactly one input")
        if ly.kind in ("ConvBlock", "Down", "RepNCSPELAN4", "SPPPool", "ViTPath", "RepNCSPELAN4_ViT") and "out" not in ly.params:
            raise SpecError(f"layer {ly.id}: {ly.kind} needs out=")
        seen.add(ly.id)
    if spec.layers[-1].kind != "Detect":
        raise SpecError("the last layer must be Detect")
    if spec.anchors and len(spec.anchors) != len(spec.heads):
        raise SpecError(f"{len(spec.anchors)} anchor groups for {len(spec.heads)} detection heads")
    if spec.anchors and any(len(g) != spec.anchors_per_scale for g in spec.anchors):
        raise SpecError(f"every anchor group needs {spec.anchors_per_scale} anchors")
    if spec.anchors and any(w <= 0 or h <= 0 for g in spec.anchors for w, h in g):
        raise SpecError("anchor sizes must be positive")


def total_stride(spec: GraphSpec) -> int:
    strides = {INPUT: 1}
    for ly in spec.layers:
        s = max(strides[i] for i in ly.inputs)
        if ly.kind == "Down" or (ly.kind == "ConvBlock" and ly.get("s") == 2):
            s *= 2
        elif ly.kind == "Upsample":
            s //= 2
        strides[ly.id] = max(s, 1)
    return max(strides.values())


def propagate(spec: GraphSpec, input_hw=None) -> list:
    """Resolve every layer's channels, spatial extent and stride at ``input_hw``."""
    validate_spec(spec)
    hw = tuple(input_hw or spec.input_hw)
    ts = total_stride(spec)
    if hw[0] % ts or hw[1] % ts:
        raise SpecError(f"input {hw[0]}x{hw[1]} is not divisible by the total stride {ts}")
    design = _design_grid(spec)
    shapes = {INPUT: (3, hw, 1)}
    out = []
    for ly in spec.layers:
        ins = [shapes[i] for i in ly.inputs]
        c_in = tuple(c for c, _, _ in ins)
        (h, w), s = ins[0][1], ins[0][2]
        r = Resolved(ly, c_in, 0, (h, w), s)
        k = ly.kind
        if k in ("ConvBlock", "Down"):
            stride = 2 if k == "Down" else ly.get("s")
            kk = 3 if k == "Down" else ly.get("k")
            pad = kk // 2
            r.c_out = spec.channels(ly.get("out"))
            r.out_hw = ((h + 2 * pad - kk) // stride + 1, (w + 2 * pad - kk) // stride + 1)
            r.stride = s * stride
        elif k in ("RepNCSPELAN4", "RepNCSPELAN4_ViT"):
            if c_in[0] % 2:
                raise SpecError(f"layer {ly.id}: {k} needs an even input channel count, got {c_in[0]}")
            r.c_out = spec.channels(ly.get("out"))
            r.trunk = c_in[0] // 2 * (2 + ly.get("depth"))
            if k == "RepNCSPELAN4_ViT":
                r.embed_dim = r.trunk
                r.tokens_hw = design[ly.id]
                if r.trunk % ly.get("vit_heads"):
                    raise SpecError(f"layer {ly.id}: trunk width {r.trunk} is not divisible by {ly.get('vit_heads')} heads")
        elif k == "SPPPool":
            r.c_out = spec.channels(ly.get("out"))
        elif k == "ViTPath":
            r.c_out = r.embed_dim = spec.channels(ly.get("out"))
            r.tokens_hw = design[ly.id]
            if r.embed_dim % ly.get("heads"):
                raise SpecError(f"layer {ly.id}: embed dim {r.embed_dim} is not divisible by {ly.get('heads')} heads")
        elif k == "Upsample":
            r.c_out = c_in[0]
            r.out_hw = (2 * h, 2 * w)
            r.stride = s // 2
        elif k == "Concat":
            for src, (_, shw, _) in zip(ly.inputs, ins):
                if shw != (h, w):
                    raise SpecError(
                        f"layer {ly.id}: Concat spatial mismatch, input {src} is {shw[0]}x{shw[1]} but {ly.inputs[0]} is {h}x{w}"
                    )
            r.c_out = sum(c_in)
        elif k == "Detect":
            r.c_out = spec.anchors_per_scale * (5 + spec.num_classes)
        shapes[ly.id] = (r.c_out, r.out_hw, r.stride)
        out.append(r)
    return out


def _design_grid(spec: GraphSpec) -> dict:
    """Token grid of the ViT layers at the graph spec's design resolution."""
    need = [ly.id for ly in spec.layers if ly.kind in ("ViTPath", "RepNCSPELAN4_ViT")]
    if not need:
        return {}
    hw = spec.input_hw
    grid = {INPUT: hw}
    for ly in spec.layers:
        h, w = grid[ly.inputs[0]]
        if ly.kind == "Down":
            h, w = (h - 1) // 2 + 1, (w - 1) // 2 + 1
        elif ly.kind == "ConvBlock":
            kk, s = ly.get("k"), ly.get("s")
            h, w = (h + 2 * (kk // 2) - kk) // s + 1, (w + 2 * (kk // 2) - kk) // s + 1
        elif ly.kind == "Upsample":
            h, w = 2 * h, 2 * w
        grid[ly.id] = (h, w)
    return {lid: grid[spec.layer(lid).inputs[0]] for lid in need}


def head_strides(spec: GraphSpec) -> list:
    res = {r.spec.id: r for r in propagate(spec)}
    return [res[i].stride for i in spec.heads]


# ---------------------------------------------------------------------------
# analytic counting
# ---------------------------------------------------------------------------

def _conv_params(k, cin, cout, bias):
    return k * k * cin * cout + (cout if bias else 0)


def _convblock_params(k, cin, cout, norm=True):
    return _conv_params(k, cin, cout, not norm) + (2 * cout if norm else 0)


def _encoder_params(d):
    hidden = B.MLP_RATIO * d
    return 4 * d + 4 * (d * d + d) + (d * hidden + hidden) + (hidden * d + d)


def _conv_flops(k, cin, cout, hw):
    return 2 * k * k * cin * cout * hw[0] * hw[1]


def _encoder_flops(tokens, d):
    hidden = B.MLP_RATIO * d
    proj = 4 * 2 * tokens * d * d
    attn = 2 * tokens * tokens * d * 2  # QK^T and AV
    mlp = 2 * tokens * d * hidden * 2
    return proj + attn + mlp


def layer_params(r: Resolved, spec: GraphSpec) -> int:
    ly, k = r.spec, r.spec.kind
    cin = r.c_in[0]
    if k == "ConvBlock":
        return _convblock_params(ly.get("k"), cin, r.c_out, bool(ly.get("norm")))
    if k == "Down":
        return _convblock_params(3, cin, r.c_out)
    if k in ("RepNCSPELAN4", "RepNCSPELAN4_ViT"):
        h = cin // 2
        n = ly.get("depth") * _convblock_params(3, h, h) + _convblock_params(1, r.trunk, r.c_out)
        if k == "RepNCSPELAN4_ViT" and ly.get("vit_layers"):
            n += r.tokens_hw[0] * r.tokens_hw[1] * r.trunk + ly.get("vit_layers") * _encoder_params(r.trunk)
        return n
    if k == "SPPPool":
        return _convblock_params(1, 4 * cin, r.c_out)
    if k == "ViTPath":
        d = r.embed_dim
        tokens = r.tokens_hw[0] * r.tokens_hw[1]
        return _conv_params(1, cin, d, True) + d + (tokens + 1) * d + ly.get("layers") * _encoder_params(d) + 2 * d
    if k == "Detect":
        return sum(_conv_params(1, c, r.c_out, True) for c in r.c_in)
    return 0


def layer_flops(r: Resolved, spec: GraphSpec, shapes: dict) -> int:
    ly, k = r.spec, r.spec.kind
    cin = r.c_in[0]
    if k == "ConvBlock":
        return _conv_flops(ly.get("k"), cin, r.c_out, r.out_hw)
    if k == "Down":
        return _conv_flops(3, cin, r.c_out, r.out_hw)
    if k in ("RepNCSPELAN4", "RepNCSPELAN4_ViT"):
        h = cin // 2
        n = ly.get("depth") * _conv_flops(3, h, h, r.out_hw) + _conv_flops(1, r.trunk, r.c_out, r.out_hw)
        if k == "RepNCSPELAN4_ViT" and ly.get("vit_layers"):
            n += ly.get("vit_layers") * _encoder_flops(r.out_hw[0] * r.out_hw[1], r.trunk)
        return n
    if k == "SPPPool":
        return _conv_flops(1, 4 * cin, r.c_out, r.out_hw)
    if k == "ViTPath":
        d = r.embed_dim
        tokens = r.out_hw[0] * r.out_hw[1]
        return _conv_flops(1, cin, d, r.out_hw) + ly.get("layers") * _encoder_flops(tokens + 1, d)
    if k == "Detect":
        return sum(_conv_flops(1, c, r.c_out, shapes[i][1]) for c, i in zip(r.c_in, ly.inputs))
    return 0


@dataclass(frozen=True)
class LayerRow:
    id: int
    kind: str
    path: str
    params: int
    flops: int
    out_shape: tuple


@dataclass(frozen=True)
class ComplexityReport:
    name: str
    input_hw: tuple
    rows: tuple
    total_params: int
    total_flops: int

    @property
    def gflops(self) -> float:
        return self.total_flops / 1e9

    @property
    def gflops_at_640(self) -> float:
        if tuple(self.input_hw) != (640, 640):
            raise ValueError(f"report was computed at {self.input_hw}, not 640x640")
        return self.gflops

    def format(self) -> str:
        lines = [
            f"# complexity report v1  model={self.name}  input={self.input_hw[0]}x{self.input_hw[1]}",
            f"{'id':>4} {'kind':<17} {'path':<7} {'params':>10} {'flops':>14}  out_shape",
        ]
        for r in self.rows:
            shape = "x".join(str(v) for v in r.out_shape)
            lines.append(f"{r.id:>4} {r.kind:<17} {r.path:<7} {r.params:>10} {r.flops:>14}  {shape}")
        lines.append(f"total_params {self.total_params}")
        lines.append(f"total_flops {self.total_flops}")
        lines.append(f"gflops {self.gflops:.4f}")
        return "\n".join(lines)


def _report(spec: GraphSpec, input_hw) -> ComplexityReport:
    if not spec.layers:
        return ComplexityReport(spec.name, tuple(input_hw or spec.input_hw), (), 0, 0)
    resolved = propagate(spec, input_hw)
    shapes = {INPUT: (3, tuple(input_hw or spec.input_hw))}
    rows = []
    for r in resolved:
        shapes[r.spec.id] = (r.c_out, r.out_hw)
        rows.append(
            LayerRow(r.spec.id, r.spec.kind, r.spec.path, layer_params(r, spec), layer_flops(r, spec, shapes), (r.c_out,) + tuple(r.out_hw))
        )
    return ComplexityReport(
        spec.name,
        tuple(input_hw or spec.input_hw),
        tuple(rows),
        sum(r.params for r in rows),
        sum(r.flops for r in rows),
    )


def count_params(spec: GraphSpec) -> ComplexityReport:
    """Analytic parameter counts per layer (FLOPs at the design resolution ride along)."""
    return _report(spec, spec.input_hw)


def count_flops(spec: GraphSpec, input_hw=(640, 640)) -> ComplexityReport:
    """Per-layer ``2 * MAC`` counts of conv, linear and attention matmuls at ``input_hw``."""
    return _report(spec, input_hw)


@dataclass(frozen=True)
class Capacity:
    params: int
    flops: int


@dataclass(frozen=True)
class CapacityLedger:
    c_local: Capacity
    c_global: Capacity
    c_shared: Capacity
    c_total: Capacity

    def format(self) -> str:
        lines = ["# capacity ledger v1", f"{'path':<7} {'params':>10} {'flops':>14}"]
        for name in ("local", "global", "shared", "total"):
            c = getattr(self, f"c_{name}")
            lines.append(f"{name:<7} {c.params:>10} {c.flops:>14}")
        return "\n".join(lines)


def capacity_report(spec: GraphSpec, input_hw=(640, 640)) -> CapacityLedger:
    """Partition parameters and FLOPs by path tag."""
    for ly in spec.layers:
        if ly.path not in PATHS:
            raise SpecError(f"layer {ly.id}: untagged or unknown path {ly.path!r}")
    rep = count_flops(spec, input_hw)
    parts = {p: [0, 0] for p in PATHS}
    for r in rep.rows:
        parts[r.path][0] += r.params
        parts[r.path][1] += r.flops
    total = Capacity(rep.total_params, rep.total_flops)
    return CapacityLedger(Capacity(*parts["local"]), Capacity(*parts["global"]), Capacity(*parts["shared"]), total)


def without_path(spec: GraphSpec, path: str) -> GraphSpec:
    """Drop every layer tagged ``path``; concats left with one input dissolve into a passthrough."""
    removed = {ly.id for ly in spec.layers if ly.path == path}
    alias = {}
    keep = []
    for ly in spec.layers:
        if ly.id in removed:
            continue
        ins = tuple(alias.get(i, i) for i in ly.inputs if i not in removed)
        if not ins:
            removed.add(ly.id)
            continue
        if ly.kind == "Concat" and len(ins) == 1:
            alias[ly.id] = ins[0]
            continue
        keep.append(replace(ly, inputs=ins))
    out = replace(spec, name=f"{spec.name}-without-{path}", layers=tuple(keep))
    validate_spec(out)
    return out


# ---------------------------------------------------------------------------
# model assembly
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class AnchorSet:
    """Anchor ``(w, h)`` pairs in pixels, one group per detection scale (finest first)."""

    anchors: tuple
    strides: tuple

    def __post_init__(self):
        if len(self.anchors) != len(self.strides):
            raise ValueError("one anchor group per stride is required")
        if any(w <= 0 or h <= 0 for g in self.anchors for w, h in g):
            raise ValueError("anchor sizes must be positive")

    @property
    def per_scale(self) -> int:
        return len(self.anchors[0]) if self.anchors else 0

    def array(self, scale: int) -> np.ndarray:
        return np.asarray(self.anchors[scale], dtype=np.float64)


def default_anchors(n_scales: int, per_scale: int = 3, image_size: int = 64) -> tuple:
    """Geometric ladder of square-ish anchors covering ~1/10 to ~3/4 of the image."""
    n = n_scales * per_scale
    sizes = np.geomspace(image_size * 0.1, image_size * 0.75, n)
    ratios = [(1.0, 1.0), (1.25, 0.8), (0.8, 1.25)]
    flat = [(round(s * ratios[i % 3][0], 2), round(s * ratios[i % 3][1], 2)) for i, s in enumerate(sizes)]
    return tuple(tuple(flat[g * per_scale : (g + 1) * per_scale]) for g in range(n_scales))


class Model(B.Module):
    """Executable graph built from a :class:`GraphSpec`."""

    def __init__(self, spec: GraphSpec, seed: int = 0, dtype=np.float64):
        super().__init__()
        self.spec = spec
        self.seed = seed
        self.dtype = np.dtype(dtype)
        resolved = propagate(spec)
        self.resolved = resolved
        self.blocks: dict = {}
        by_id = {r.spec.id: r for r in resolved}
        strides = [by_id[i].stride for i in spec.heads]
        for r in resolved:
            rng = np.random.default_rng([seed, r.spec.id + 1])
            self.blocks[r.spec.id] = self.add_child(str(r.spec.id), self._make(r, rng, strides))
        anchors = spec.anchors or default_anchors(len(spec.heads), spec.anchors_per_scale, spec.input_hw[0])
        order = np.argsort(strides, kind="stable")
        if list(order) != list(range(len(order))):
            raise SpecError("detection heads must be listed finest stride first")
        self.anchors = AnchorSet(tuple(anchors), tuple(strides))

    def _make(self, r: Resolved, rng, strides):
        ly, k, dt = r.spec, r.spec.kind, self.dtype
        cin = r.c_in[0]
        if k == "ConvBlock":
            return B.ConvBlock(cin, r.c_out, ly.get("k"), ly.get("s"), norm=bool(ly.get("norm")), rng=rng, dtype=dt)
        if k == "Down":
            return B.Down(cin, r.c_out, rng=rng, dtype=dt)
        if k == "RepNCSPELAN4":
            return B.RepNCSPELAN4(cin, r.c_out, ly.get("depth"), rng=rng, dtype=dt)
        if k == "RepNCSPELAN4_ViT":
            return B.RepNCSPELAN4_ViT(
                cin, r.c_out, ly.get("depth"), ly.get("vit_heads"), ly.get("vit_layers"), r.tokens_hw, rng=rng, dtype=dt
            )
        if k == "SPPPool":
            return B.SPPPool(cin, r.c_out, rng=rng, dtype=dt)
        if k == "ViTPath":
            return B.ViTPath(cin, r.embed_dim, ly.get("heads"), ly.get("layers"), r.tokens_hw, rng=rng, dtype=dt)
        if k == "Upsample":
            return B.Upsample()
        if k == "Concat":
            return B.Concat()
        if k == "Detect":
            return B.Detect(
                list(r.c_in), self.spec.num_classes, self.spec.anchors_per_scale, strides, self.spec.input_hw, rng=rng, dtype=dt
            )
        raise SpecError(f"layer {ly.id}: unknown kind {k!r}")

    @property
    def num_classes(self) -> int:
        return self.spec.num_classes

    def forward(self, images, training: bool = False, tape: Optional[Tape] = None, attn_log: Optional[list] = None):
        """Run the graph; returns one raw prediction tensor ``[N, A*(5+K), h, w]`` per head."""
        if isinstance(images, Tensor):
            x = images
        else:
            arr = np.asarray(images, dtype=self.dtype)
            x = (tape or Tape()).constant(arr) if training or tape is not None else Tensor(arr)
        if x.ndim != 4 or x.shape[1] != 3:
            raise T.ShapeError(f"model input must be [N,3,H,W], got {tuple(x.shape)}")
        ts = total_stride(self.spec)
        if x.shape[2] % ts or x.shape[3] % ts:
            raise SpecError(f"input {x.shape[2]}x{x.shape[3]} is not divisible by the total stride {ts}")
        outs = {INPUT: x}
        for ly in self.spec.layers:
            blk = self.blocks[ly.id]
            if ly.kind in ("Concat", "Detect"):
                y = blk([outs[i] for i in ly.inputs], training)
            elif ly.kind in ("ViTPath", "RepNCSPELAN4_ViT"):
                y = blk(outs[ly.inputs[0]], training, attn_log)
            else:
                y = blk(outs[ly.inputs[0]], training)
            outs[ly.id] = y
        return outs[self.spec.detect.id]

    def layer_param_counts(self) -> dict:
        return {lid: blk.num_params() for lid, blk in self.blocks.items()}

    def state_arrays(self) -> list:
        """Parameters then buffers of every layer, in declaration order."""
        items = []
        for lid, blk in self.blocks.items():
            items.extend((f"{lid}.{n}", p.data) for n, p in blk.named_parameters())
            items.extend((f"{lid}.{n}", b) for n, b in blk.named_buffers())
        return items


def build_model(spec: GraphSpec, seed: int = 0, dtype=np.float64) -> Model:
    return Model(spec, seed, dtype)


def count_flops_by_execution(spec: GraphSpec, input_hw=(640, 640), seed: int = 0) -> int:
    """Independent recount: run a forward pass and tally the executed conv/matmul MACs."""
    model = Model(spec, seed, np.float32)
    x = np.zeros((1, 3) + tuple(input_hw), dtype=np.float32)
    with T.count_flops_executed() as counter:
        model.forward(x, training=False)
    return counter.flops
