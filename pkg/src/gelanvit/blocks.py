"""Composite blocks of the GELAN family and its ViT branches.

Every block is a small parameter container with a ``forward(x, training)``
method built from :mod:`gelanvit.tensor` primitives, so gradients come from
the tape without block-specific backward code.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterator, Optional

import numpy as np

from . import tensor as T
from .tensor import Tensor

BN_MOMENTUM = 0.03
BN_EPS = 1e-3
LN_EPS = 1e-5
MLP_RATIO = 2
EMBED_STD = 0.02


class BlockConfigError(ValueError):
    """A block was configured with incompatible sizes."""


class Module:
    """Ordered container of parameters, buffers and child modules."""

    def __init__(self):
        self._params: dict[str, Tensor] = {}
        self._buffers: dict[str, np.ndarray] = {}
        self._children: dict[str, Module] = {}

    def add_param(self, name: str, data: np.ndarray, decay: bool) -> Tensor:
        t = Tensor(data, requires_grad=True, dtype=data.dtype, name=name)
        t.decay = decay
        self._params[name] = t
        return t

    def add_buffer(self, name: str, data: np.ndarray) -> np.ndarray:
        self._buffers[name] = data
        return data

    def add_child(self, name: str, module: "Module") -> "Module":
        self._children[name] = module
        return module

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for name, p in self._params.items():
            yield prefix + name, p
        for cname, child in self._children.items():
            yield from child.named_parameters(f"{prefix}{cname}.")

    def named_buffers(self, prefix: str = "") -> Iterator[tuple[str, np.ndarray]]:
        for name, b in self._buffers.items():
            yield prefix + name, b
        for cname, child in self._children.items():
            yield from child.named_buffers(f"{prefix}{cname}.")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def num_params(self) -> int:
        return sum(p.size for p in self.parameters())

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)


def _he_normal(rng: np.random.Generator, shape: tuple, fan_in: int, dtype) -> np.ndarray:
    return (rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)).astype(dtype)


class Conv(Module):
    """Bare convolution with optional bias (``pad = k // 2``)."""

    def __init__(self, c_in, c_out, k=1, stride=1, bias=True, rng=None, dtype=np.float64):
        super().__init__()
        rng = rng or np.random.default_rng(0)
        self.k, self.stride, self.pad = k, stride, k // 2
        self.w = self.add_param("w", _he_normal(rng, (c_out, c_in, k, k), c_in * k * k, dtype), decay=True)
        self.b = self.add_param("b", np.zeros(c_out, dtype), decay=False) if bias else None

    def forward(self, x, training=False):
        return T.conv2d(x, self.w, self.b, self.stride, self.pad)


class BatchNorm2d(Module):
    def __init__(self, c, dtype=np.float64):
        super().__init__()
        self.gamma = self.add_param("gamma", np.ones(c, dtype), decay=False)
        self.beta = self.add_param("beta", np.zeros(c, dtype), decay=False)
        self.running_mean = self.add_buffer("running_mean", np.zeros(c, dtype))
        self.running_var = self.add_buffer("running_var", np.ones(c, dtype))

    def forward(self, x, training=False):
        return T.batch_norm2d(x, self.gamma, self.beta, self.running_mean, self.running_var, training, BN_MOMENTUM, BN_EPS)


class ConvBlock(Module):
    """Convolution, batch norm and SiLU; with ``norm=False`` the conv carries a bias instead."""

    def __init__(self, c_in, c_out, k=1, stride=1, norm=True, act=True, rng=None, dtype=np.float64):
        super().__init__()
        self.c_in, self.c_out = c_in, c_out
        self.conv = self.add_child("conv", Conv(c_in, c_out, k, stride, bias=not norm, rng=rng, dtype=dtype))
        self.bn = self.add_child("bn", BatchNorm2d(c_out, dtype)) if norm else None
        self.act = act

    def forward(self, x, training=False):
        y = self.conv(x, training)
        if self.bn is not None:
            y = self.bn(y, training)
        return T.silu(y) if self.act else y


class Down(ConvBlock):
    """Stride-2 3x3 ConvBlock."""

    def __init__(self, c_in, c_out, rng=None, dtype=np.float64):
        super().__init__(c_in, c_out, k=3, stride=2, rng=rng, dtype=dtype)


class RepNCSPELAN4(Module):
    """Split-transform-aggregate block.

    The input is split into two halves; the second half runs through ``depth``
    successive 3x3 ConvBlocks.  Both halves plus every intermediate are
    concatenated and fused by a 1x1 ConvBlock.
    """

    def __init__(self, c_in, c_out, depth=2, rng=None, dtype=np.float64):
        super().__init__()
        if c_in % 2:
            raise BlockConfigError(f"RepNCSPELAN4 needs an even channel count, got {c_in}")
        if depth < 0:
            raise BlockConfigError(f"RepNCSPELAN4 depth must be >= 0, got {depth}")
        self.c_in, self.c_out, self.depth = c_in, c_out, depth
        h = c_in // 2
        self.half = h
        self.trunk_channels = h * (2 + depth)
        self.branches = [self.add_child(f"m{i}", ConvBlock(h, h, 3, rng=rng, dtype=dtype)) for i in range(depth)]
        self.fuse = self.add_child("fuse", ConvBlock(self.trunk_channels, c_out, 1, rng=rng, dtype=dtype))

    def aggregate(self, x, training=False) -> Tensor:
        if x.shape[1] != self.c_in:
            raise BlockConfigError(f"RepNCSPELAN4 expects {self.c_in} channels, got {x.shape[1]}")
        a, b = T.split(x, [self.half, self.half], axis=1)
        outs = [a, b]
        y = b
        for m in self.branches:
            y = m(y, training)
            outs.append(y)
        return T.concat_channels(outs)

    def forward(self, x, training=False):
        return self.fuse(self.aggregate(x, training), training)


def rep_ncspelan4(x: Tensor, block: RepNCSPELAN4, training: bool = False) -> Tensor:
    return block(x, training)


class SPPPool(Module):
    """Identity plus three chained 5x5 stride-1 max-pools, fused by a 1x1 ConvBlock."""

    def __init__(self, c_in, c_out, rng=None, dtype=np.float64):
        super().__init__()
        self.c_in, self.c_out = c_in, c_out
        self.fuse = self.add_child("fuse", ConvBlock(4 * c_in, c_out, 1, rng=rng, dtype=dtype))

    def forward(self, x, training=False):
        if x.ndim != 4:
            raise BlockConfigError(f"SPPPool expects a 4-D feature map, got {tuple(x.shape)}")
        outs = [x]
        y = x
        for _ in range(3):
            y = T.max_pool2d(y, 5, 1, 2)
            outs.append(y)
        return self.fuse(T.concat_channels(outs), training)


def spp_pool(x: Tensor, block: SPPPool, training: bool = False) -> Tensor:
    return block(x, training)


# ---------------------------------------------------------------------------
# transformer pieces
# ---------------------------------------------------------------------------

class EncoderLayer(Module):
    """Pre-norm transformer encoder layer (attention and MLP, each residual)."""

    def __init__(self, d, heads, rng=None, dtype=np.float64):
        super().__init__()
        if heads < 1 or d % heads:
            raise BlockConfigError(f"embed dim {d} is not divisible by {heads} heads")
        rng = rng or np.random.default_rng(0)
        self.d, self.heads = d, heads
        self.ln1_g = self.add_param("ln1_g", np.ones(d, dtype), decay=False)
        self.ln1_b = self.add_param("ln1_b", np.zeros(d, dtype), decay=False)
        self.attn = {}
        for n in ("q", "k", "v", "o"):
            self.attn["w" + n] = self.add_param("w" + n, (rng.standard_normal((d, d)) / np.sqrt(d)).astype(dtype), decay=True)
            self.attn["b" + n] = self.add_param("b" + n, np.zeros(d, dtype), decay=False)
        self.ln2_g = self.add_param("ln2_g", np.ones(d, dtype), decay=False)
        self.ln2_b = self.add_param("ln2_b", np.zeros(d, dtype), decay=False)
        hidden = MLP_RATIO * d
        self.fc1_w = self.add_param("fc1_w", (rng.standard_normal((d, hidden)) / np.sqrt(d)).astype(dtype), decay=True)
        self.fc1_b = self.add_param("fc1_b", np.zeros(hidden, dtype), decay=False)
        self.fc2_w = self.add_param("fc2_w", (rng.standard_normal((hidden, d)) / np.sqrt(hidden)).astype(dtype), decay=True)
        self.fc2_b = self.add_param("fc2_b", np.zeros(d, dtype), decay=False)

    def forward(self, x, training=False, attn_log: Optional[list] = None):
        h = T.layer_norm(x, self.ln1_g, self.ln1_b, LN_EPS)
        if attn_log is None:
            a = T.multi_head_attention(h, self.heads, self.attn)
        else:
            a, probs = T.multi_head_attention(h, self.heads, self.attn, return_attn=True)
            attn_log.append(probs)
        x = x + a
        h = T.layer_norm(x, self.ln2_g, self.ln2_b, LN_EPS)
        h = T.linear(T.gelu(T.linear(h, self.fc1_w, self.fc1_b)), self.fc2_w, self.fc2_b)
        return x + h


def _token_grid_index(src_hw: tuple, dst_hw: tuple) -> np.ndarray:
    """Nearest-neighbour map from a ``dst`` token grid onto a ``src`` grid (flat indices)."""
    sh, sw = src_hw
    dh, dw = dst_hw
    rows = np.minimum(((np.arange(dh) + 0.5) * sh / dh).astype(np.intp), sh - 1)
    cols = np.minimum(((np.arange(dw) + 0.5) * sw / dw).astype(np.intp), sw - 1)
    return (rows[:, None] * sw + cols[None, :]).reshape(-1)


@dataclass
class ViTPathState:
    """Weights of the CLS + positional-embedding + encoder path."""

    patch_proj: Conv
    cls_token: Tensor  # [1, D]
    pos_embedding: Tensor  # [T + 1, D]
    layers: list = field(default_factory=list)
    norm_g: Optional[Tensor] = None  # final LayerNorm, skipped when None
    norm_b: Optional[Tensor] = None

    @property
    def embed_dim(self) -> int:
        return self.cls_token.shape[1]


def vit_path(feat: Tensor, state: ViTPathState, training: bool = False, attn_log: Optional[list] = None) -> Tensor:
    """Project ``feat [N,C,h,w]`` to ``D`` channels, run the encoder with a CLS slot, emit ``[N,D,h,w]``."""
    n, _, h, w = feat.shape
    d = state.embed_dim
    tokens = h * w
    if state.pos_embedding.shape != (tokens + 1, d):
        raise BlockConfigError(
            f"positional embedding has {state.pos_embedding.shape[0]} slots, feature map needs {tokens} tokens + CLS"
        )
    x = state.patch_proj(feat, training)  # [N, D, h, w]
    x = T.transpose(T.reshape(x, (n, d, tokens)), (0, 2, 1))  # [N, T, D]
    cls = T.mul(T.reshape(state.cls_token, (1, 1, d)), np.ones((n, 1, 1), dtype=feat.dtype))
    x = T.concat([cls, x], axis=1)
    x = x + state.pos_embedding
    for layer in state.layers:
        x = layer(x, training, attn_log)
    if state.norm_g is not None:
        x = T.layer_norm(x, state.norm_g, state.norm_b, LN_EPS)
    x = T.getitem(x, (slice(None), slice(1, None)))
    return T.reshape(T.transpose(x, (0, 2, 1)), (n, d, h, w))


class ViTPath(Module):
    """Global path: CLS token, learned positional embeddings and an encoder stack.

    ``tokens_hw`` is the design token grid; other grids reuse the embeddings by
    nearest-neighbour resampling (the CLS slot is kept as is).
    """

    def __init__(self, c_in, d, heads, layers, tokens_hw, rng=None, dtype=np.float64):
        super().__init__()
        if heads < 1 or d % heads:
            raise BlockConfigError(f"ViTPath embed dim {d} is not divisible by {heads} heads")
        rng = rng or np.random.default_rng(0)
        self.c_in, self.c_out, self.heads, self.n_layers = c_in, d, heads, layers
        self.tokens_hw = tuple(tokens_hw)
        ntok = self.tokens_hw[0] * self.tokens_hw[1]
        proj = self.add_child("proj", Conv(c_in, d, 1, bias=True, rng=rng, dtype=dtype))
        cls = self.add_param("cls", (rng.standard_normal((1, d)) * EMBED_STD).astype(dtype), decay=False)
        pos = self.add_param("pos", (rng.standard_normal((ntok + 1, d)) * EMBED_STD).astype(dtype), decay=False)
        enc = [self.add_child(f"enc{i}", EncoderLayer(d, heads, rng, dtype)) for i in range(layers)]
        norm_g = self.add_param("norm_g", np.ones(d, dtype), decay=False)
        norm_b = self.add_param("norm_b", np.zeros(d, dtype), decay=False)
        self.state = ViTPathState(proj, cls, pos, enc, norm_g, norm_b)

    def state_for(self, hw: tuple) -> ViTPathState:
        if tuple(hw) == self.tokens_hw:
            return self.state
        idx = np.concatenate([[0], 1 + _token_grid_index(self.tokens_hw, hw)])
        pos = T.getitem(self.state.pos_embedding, idx)
        st = self.state
        return ViTPathState(st.patch_proj, st.cls_token, pos, st.layers, st.norm_g, st.norm_b)

    def forward(self, x, training=False, attn_log=None):
        return vit_path(x, self.state_for(x.shape[2:]), training, attn_log)


class RepNCSPELAN4_ViT(RepNCSPELAN4):
    """RepNCSPELAN4 with an encoder stack on the aggregated trunk before the 1x1 fuse.

    The trunk of ``[N, D, H, W]`` is read as ``H*W`` tokens of width ``D`` plus a
    learned positional embedding (no CLS slot).  With zero encoder layers the
    insertion is skipped entirely.
    """

    def __init__(self, c_in, c_out, depth=2, vit_heads=2, vit_layers=1, tokens_hw=(1, 1), rng=None, dtype=np.float64):
        super().__init__(c_in, c_out, depth, rng, dtype)
        rng = rng or np.random.default_rng(0)
        d = self.trunk_channels
        if vit_heads < 1 or d % vit_heads:
            raise BlockConfigError(f"RepNCSPELAN4_ViT trunk width {d} is not divisible by {vit_heads} heads")
        self.heads, self.n_layers = vit_heads, vit_layers
        self.tokens_hw = tuple(tokens_hw)
        self.pos = None
        self.encoder = []
        if vit_layers:
            ntok = self.tokens_hw[0] * self.tokens_hw[1]
            self.pos = self.add_param("pos", (rng.standard_normal((ntok, d)) * EMBED_STD).astype(dtype), decay=False)
            self.encoder = [self.add_child(f"enc{i}", EncoderLayer(d, vit_heads, rng, dtype)) for i in range(vit_layers)]

    def forward(self, x, training=False, attn_log=None):
        z = self.aggregate(x, training)
        if self.encoder:
            n, d, h, w = z.shape
            pos = self.pos
            if (h, w) != self.tokens_hw:
                pos = T.getitem(pos, _token_grid_index(self.tokens_hw, (h, w)))
            t = T.transpose(T.reshape(z, (n, d, h * w)), (0, 2, 1)) + pos
            for layer in self.encoder:
                t = layer(t, training, attn_log)
            z = T.reshape(T.transpose(t, (0, 2, 1)), (n, d, h, w))
        return self.fuse(z, training)


def rep_ncspelan4_vit(x: Tensor, block: RepNCSPELAN4_ViT, training: bool = False) -> Tensor:
    return block(x, training)


class Upsample(Module):
    def forward(self, x, training=False):
        return T.upsample_nearest2(x)


class Concat(Module):
    def forward(self, xs, training=False):
        return T.concat_channels(xs)


class Detect(Module):
    """Per-scale 1x1 prediction convs emitting ``A * (5 + K)`` channels."""

    def __init__(self, chs, num_classes, anchors_per_scale=3, strides=None, image_hw=(640, 640), rng=None, dtype=np.float64):
        super().__init__()
        self.num_classes, self.na = num_classes, anchors_per_scale
        self.no = 5 + num_classes
        self.convs = [
            self.add_child(f"p{i}", Conv(c, anchors_per_scale * self.no, 1, bias=True, rng=rng, dtype=dtype))
            for i, c in enumerate(chs)
        ]
        # objectness/class bias priors: ~8 objects per image, balanced classes
        for conv, s in zip(self.convs, strides or [8 * 2**i for i in range(len(chs))]):
            b = conv.b.data.reshape(anchors_per_scale, self.no)
            cells = (image_hw[0] / s) * (image_hw[1] / s)
            b[:, 4] = np.log(8.0 / max(cells, 1.0))
            b[:, 5:] = np.log(0.6 / max(num_classes - 0.99, 0.01))

    def forward(self, xs, training=False):
        return [conv(x, training) for conv, x in zip(self.convs, xs)]
