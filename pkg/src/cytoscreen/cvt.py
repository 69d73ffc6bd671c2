"""Convolutional vision transformer for single-cell classification.

Three stages, each a strided convolutional token embedding followed by
transformer blocks whose Q/K/V come from depthwise convolutions over the
token grid. A class token joins in the final stage only and feeds a
5-way linear head. Inference only; no positional embeddings, so any input
resolution the embeddings can downsample is accepted.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import erf

from .raster import RasterImage
from .weights import TensorStore

CLASS_NAMES = (
    "superficial-intermediate",
    "parabasal",
    "koilocytotic",
    "dyskeratotic",
    "metaplastic",
)

# clinical grouping of the five classes
CLASS_GROUPS = {
    "superficial-intermediate": "normal",
    "parabasal": "normal",
    "koilocytotic": "abnormal",
    "dyskeratotic": "abnormal",
    "metaplastic": "benign",
}

NUM_CLASSES = len(CLASS_NAMES)

# Optimization settings the classifier weights were fit with; recorded so
# exported crops can be retrained under the same regime. Inference here
# never reads these.
TRAINING_RECIPE = {
    "optimizer": "adam",
    "learning_rate": 0.005,
    "schedule": "reduce_on_plateau",
    "epochs": 100,
    "batch_size": 64,
}

_BN_EPS = 1e-5
_LN_EPS = 1e-5


@dataclass(frozen=True)
class CvTStageConfig:
    blocks: int
    embed_kernel: int
    embed_stride: int
    embed_dim: int
    heads: int
    proj_kernel: int = 3
    q_stride: int = 1
    kv_stride: int = 2
    mlp_ratio: int = 4
    with_cls_token: bool = False

    def __post_init__(self):
        if self.blocks < 1:
            raise ValueError("blocks must be >= 1")
        if self.embed_dim % self.heads != 0:
            raise ValueError("embed_dim must divide evenly into heads")
        if min(self.embed_kernel, self.embed_stride, self.q_stride, self.kv_stride) < 1:
            raise ValueError("kernels and strides must be >= 1")


@dataclass(frozen=True)
class CvTConfig:
    stages: tuple
    num_classes: int = NUM_CLASSES
    input_resolution: int = 224
    in_channels: int = 3
    norm_mean: float = 0.5
    norm_std: float = 0.5
    variant: str = "custom"

    def __post_init__(self):
        if len(self.stages) != 3:
            raise ValueError("expected exactly 3 stages")
        if not self.stages[-1].with_cls_token:
            raise ValueError("final stage must carry the cls token")
        if any(st.with_cls_token for st in self.stages[:-1]):
            raise ValueError("only the final stage may carry the cls token")
        if self.num_classes < 2:
            raise ValueError("num_classes must be >= 2")
        if self.input_resolution < 1:
            raise ValueError("input_resolution must be >= 1")


def make_config(variant: str = "original13", num_classes: int = NUM_CLASSES,
                input_resolution: int = 224) -> CvTConfig:
    """Build one of the two published 13-block layouts."""
    if variant == "original13":
        stages = (
            CvTStageConfig(blocks=1, embed_kernel=7, embed_stride=4, embed_dim=64, heads=1),
            CvTStageConfig(blocks=2, embed_kernel=3, embed_stride=2, embed_dim=192, heads=3),
            CvTStageConfig(blocks=10, embed_kernel=3, embed_stride=2, embed_dim=384,
                           heads=6, with_cls_token=True),
        )
    elif variant == "paper_table":
        stages = (
            CvTStageConfig(blocks=1, embed_kernel=7, embed_stride=4, embed_dim=64, heads=1),
            CvTStageConfig(blocks=2, embed_kernel=7, embed_stride=2, embed_dim=192, heads=3),
            CvTStageConfig(blocks=10, embed_kernel=7, embed_stride=2, embed_dim=384,
                           heads=1, with_cls_token=True),
        )
    else:
        raise ValueError(f"unknown variant {variant!r}")
    return CvTConfig(stages=stages, num_classes=num_classes,
                     input_resolution=input_resolution, variant=variant)


@dataclass(frozen=True)
class ClassProbabilities:
    probs: tuple
    predicted: int = field(init=False)

    def __post_init__(self):
        probs = tuple(float(p) for p in self.probs)
        if any(p < 0.0 or p > 1.0 for p in probs):
            raise ValueError("probabilities must lie in [0, 1]")
        if abs(sum(probs) - 1.0) > 1e-6:
            raise ValueError("probabilities must sum to 1")
        object.__setattr__(self, "probs", probs)
        # first maximum wins on ties
        object.__setattr__(self, "predicted", int(np.argmax(probs)))

    @property
    def class_name(self) -> str:
        return CLASS_NAMES[self.predicted] if len(self.probs) == NUM_CLASSES else str(self.predicted)


# ---- primitive layers

def conv2d(x: np.ndarray, weight: np.ndarray, bias=None, stride: int = 1,
           padding: int = 0) -> np.ndarray:
    """Direct 2D convolution; x is (H, W, Cin), weight is (Cout, Cin, kh, kw)."""
    cout, cin, kh, kw = weight.shape
    if x.shape[2] != cin:
        raise ValueError(f"input has {x.shape[2]} channels, kernel expects {cin}")
    if padding:
        x = np.pad(x, ((padding, padding), (padding, padding), (0, 0)))
    if x.shape[0] < kh or x.shape[1] < kw:
        raise ValueError("input smaller than kernel after padding")
    win = sliding_window_view(x, (kh, kw), axis=(0, 1))[::stride, ::stride]
    out = np.einsum("hwckl,ockl->hwo", win, weight, optimize=True)
    if bias is not None:
        out = out + bias
    return out


def depthwise_conv2d(x: np.ndarray, weight: np.ndarray, stride: int = 1,
                     padding: int = 1) -> np.ndarray:
    """Per-channel convolution; weight is (C, kh, kw)."""
    c, kh, kw = weight.shape
    if x.shape[2] != c:
        raise ValueError(f"input has {x.shape[2]} channels, kernel expects {c}")
    if padding:
        x = np.pad(x, ((padding, padding), (padding, padding), (0, 0)))
    if x.shape[0] < kh or x.shape[1] < kw:
        raise ValueError("input smaller than kernel after padding")
    win = sliding_window_view(x, (kh, kw), axis=(0, 1))[::stride, ::stride]
    return np.einsum("hwckl,ckl->hwc", win, weight, optimize=True)


def layer_norm(x: np.ndarray, gamma: np.ndarray, beta: np.ndarray) -> np.ndarray:
    mean = x.mean(axis=-1, keepdims=True)
    var = x.var(axis=-1, keepdims=True)
    return (x - mean) / np.sqrt(var + _LN_EPS) * gamma + beta


def batch_norm(x: np.ndarray, gamma, beta, running_mean, running_var) -> np.ndarray:
    """Inference-mode normalization with frozen statistics, channels last."""
    return (x - running_mean) / np.sqrt(running_var + _BN_EPS) * gamma + beta


def linear(x: np.ndarray, weight: np.ndarray, bias=None) -> np.ndarray:
    out = x @ weight.T
    if bias is not None:
        out = out + bias
    return out


def gelu(x: np.ndarray) -> np.ndarray:
    return 0.5 * x * (1.0 + erf(x / math.sqrt(2.0)))


def softmax(x: np.ndarray, axis: int = -1) -> np.ndarray:
    shifted = x - x.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=axis, keepdims=True)


def attention_weights(q: np.ndarray, k: np.ndarray, heads: int) -> np.ndarray:
    """Per-head softmax attention matrices, shape (heads, Lq, Lk)."""
    lq, dim = q.shape
    lk = k.shape[0]
    head_dim = dim // heads
    qh = q.reshape(lq, heads, head_dim).transpose(1, 0, 2)
    kh = k.reshape(lk, heads, head_dim).transpose(1, 0, 2)
    scores = qh @ kh.transpose(0, 2, 1) / math.sqrt(head_dim)
    return softmax(scores, axis=-1)


def mhsa(q: np.ndarray, k: np.ndarray, v: np.ndarray, heads: int,
         out_weight: np.ndarray, out_bias: np.ndarray) -> np.ndarray:
    """Multi-head attention; heads are concatenated then linearly projected."""
    lq, dim = q.shape
    if dim % heads != 0:
        raise ValueError("token dim must divide evenly into heads")
    head_dim = dim // heads
    attn = attention_weights(q, k, heads)
    vh = v.reshape(v.shape[0], heads, head_dim).transpose(1, 0, 2)
    mixed = (attn @ vh).transpose(1, 0, 2).reshape(lq, dim)
    return linear(mixed, out_weight, out_bias)


# ---- assembled model

def conv_token_embed(x: np.ndarray, stage: CvTStageConfig,
                     weights: TensorStore, prefix: str) -> np.ndarray:
    """Strided conv patch embedding plus channelwise normalization."""
    k = stage.embed_kernel
    if x.shape[0] < k or x.shape[1] < k:
        raise ValueError(
            f"spatial dims {x.shape[:2]} smaller than embed kernel {k}"
        )
    out = conv2d(
        x,
        weights.get(f"{prefix}.embed.conv.weight"),
        weights.get(f"{prefix}.embed.conv.bias"),
        stride=stage.embed_stride,
        padding=k // 2,
    )
    return layer_norm(out, weights.get(f"{prefix}.embed.norm.gamma"),
                      weights.get(f"{prefix}.embed.norm.beta"))


def _conv_proj_branch(grid: np.ndarray, stride: int, weights: TensorStore,
                      base: str) -> np.ndarray:
    dw = depthwise_conv2d(grid, weights.get(f"{base}.dw.weight"), stride=stride,
                          padding=1)
    dw = batch_norm(dw, weights.get(f"{base}.bn.gamma"),
                    weights.get(f"{base}.bn.beta"),
                    weights.get(f"{base}.bn.running_mean"),
                    weights.get(f"{base}.bn.running_var"))
    tokens = dw.reshape(-1, dw.shape[2])
    return linear(tokens, weights.get(f"{base}.proj.weight"),
                  weights.get(f"{base}.proj.bias"))


def conv_projection(grid: np.ndarray, cls, stage: CvTStageConfig,
                    weights: TensorStore, prefix: str):
    """Build Q, K, V token sequences from a (H, W, D) grid.

    The class token skips the depthwise convolutions and joins Q only, so
    K and V keep the downsampled grid length.
    """
    q = _conv_proj_branch(grid, stage.q_stride, weights, f"{prefix}.conv_q")
    k = _conv_proj_branch(grid, stage.kv_stride, weights, f"{prefix}.conv_k")
    v = _conv_proj_branch(grid, stage.kv_stride, weights, f"{prefix}.conv_v")
    if cls is not None:
        q_cls = linear(cls[None, :], weights.get(f"{prefix}.conv_q.proj.weight"),
                       weights.get(f"{prefix}.conv_q.proj.bias"))
        q = np.concatenate([q_cls, q], axis=0)
    return q, k, v


def transformer_block(grid: np.ndarray, cls, stage: CvTStageConfig,
                      weights: TensorStore, prefix: str):
    h, w, dim = grid.shape
    seq = grid.reshape(-1, dim)
    if cls is not None:
        seq = np.concatenate([cls[None, :], seq], axis=0)

    normed = layer_norm(seq, weights.get(f"{prefix}.norm1.gamma"),
                        weights.get(f"{prefix}.norm1.beta"))
    if cls is not None:
        cls_n = normed[0]
        grid_n = normed[1:].reshape(h, w, dim)
    else:
        cls_n = None
        grid_n = normed.reshape(h, w, dim)

    q, k, v = conv_projection(grid_n, cls_n, stage, weights, prefix)
    seq = seq + mhsa(q, k, v, stage.heads,
                     weights.get(f"{prefix}.attn_out.weight"),
                     weights.get(f"{prefix}.attn_out.bias"))

    normed = layer_norm(seq, weights.get(f"{prefix}.norm2.gamma"),
                        weights.get(f"{prefix}.norm2.beta"))
    hidden = gelu(linear(normed, weights.get(f"{prefix}.mlp.fc1.weight"),
                         weights.get(f"{prefix}.mlp.fc1.bias")))
    seq = seq + linear(hidden, weights.get(f"{prefix}.mlp.fc2.weight"),
                       weights.get(f"{prefix}.mlp.fc2.bias"))

    if cls is not None:
        return seq[1:].reshape(h, w, dim), seq[0]
    return seq.reshape(h, w, dim), None


def preprocess(crop: RasterImage, cfg: CvTConfig) -> np.ndarray:
    """Resize to the model resolution and normalize to (x/255 - mean) / std."""
    import cv2

    data = crop.data
    if data.ndim == 2:
        data = np.stack([data] * 3, axis=2)
    if data.shape[0] == 0 or data.shape[1] == 0:
        raise ValueError("crop has zero area")
    res = cfg.input_resolution
    if data.shape[0] != res or data.shape[1] != res:
        data = cv2.resize(data.astype(np.float32), (res, res),
                          interpolation=cv2.INTER_LINEAR)
    scaled = data.astype(np.float32) / 255.0
    return (scaled - cfg.norm_mean) / cfg.norm_std


def penultimate_features(crop: RasterImage, cfg: CvTConfig,
                         weights: TensorStore) -> np.ndarray:
    """Normalized class-token vector that feeds the linear head."""
    x = preprocess(crop, cfg).astype(np.float64)
    cls = None
    for i, stage in enumerate(cfg.stages, start=1):
        x = conv_token_embed(x, stage, weights, f"stage{i}")
        if stage.with_cls_token:
            cls = weights.get("cls_token").astype(np.float64)
        for j in range(stage.blocks):
            x, cls = transformer_block(x, cls, stage, weights, f"stage{i}.block{j}")
    return layer_norm(cls, weights.get("head.norm.gamma"),
                      weights.get("head.norm.beta"))


def forward(crop: RasterImage, cfg: CvTConfig, weights: TensorStore) -> ClassProbabilities:
    feats = penultimate_features(crop, cfg, weights)
    logits = linear(feats[None, :], weights.get("head.linear.weight"),
                    weights.get("head.linear.bias"))[0]
    return ClassProbabilities(tuple(softmax(logits)))


# ---- parameter bookkeeping

def parameter_shapes(cfg: CvTConfig) -> "dict[str, tuple]":
    """Learnable tensors in store order; frozen BN statistics are excluded."""
    shapes = {}
    cin = cfg.in_channels
    for i, st in enumerate(cfg.stages, start=1):
        d = st.embed_dim
        p = f"stage{i}"
        shapes[f"{p}.embed.conv.weight"] = (d, cin, st.embed_kernel, st.embed_kernel)
        shapes[f"{p}.embed.conv.bias"] = (d,)
        shapes[f"{p}.embed.norm.gamma"] = (d,)
        shapes[f"{p}.embed.norm.beta"] = (d,)
        for j in range(st.blocks):
            b = f"{p}.block{j}"
            shapes[f"{b}.norm1.gamma"] = (d,)
            shapes[f"{b}.norm1.beta"] = (d,)
            for branch in ("conv_q", "conv_k", "conv_v"):
                shapes[f"{b}.{branch}.dw.weight"] = (d, st.proj_kernel, st.proj_kernel)
                shapes[f"{b}.{branch}.bn.gamma"] = (d,)
                shapes[f"{b}.{branch}.bn.beta"] = (d,)
                shapes[f"{b}.{branch}.proj.weight"] = (d, d)
                shapes[f"{b}.{branch}.proj.bias"] = (d,)
            shapes[f"{b}.attn_out.weight"] = (d, d)
            shapes[f"{b}.attn_out.bias"] = (d,)
            shapes[f"{b}.norm2.gamma"] = (d,)
            shapes[f"{b}.norm2.beta"] = (d,)
            hidden = st.mlp_ratio * d
            shapes[f"{b}.mlp.fc1.weight"] = (hidden, d)
            shapes[f"{b}.mlp.fc1.bias"] = (hidden,)
            shapes[f"{b}.mlp.fc2.weight"] = (d, hidden)
            shapes[f"{b}.mlp.fc2.bias"] = (d,)
        if st.with_cls_token:
            shapes["cls_token"] = (d,)
        cin = d
    d3 = cfg.stages[-1].embed_dim
    shapes["head.norm.gamma"] = (d3,)
    shapes["head.norm.beta"] = (d3,)
    shapes["head.linear.weight"] = (cfg.num_classes, d3)
    shapes["head.linear.bias"] = (cfg.num_classes,)
    return shapes


def buffer_shapes(cfg: CvTConfig) -> "dict[str, tuple]":
    """Frozen normalization statistics stored alongside the parameters."""
    shapes = {}
    for i, st in enumerate(cfg.stages, start=1):
        for j in range(st.blocks):
            for branch in ("conv_q", "conv_k", "conv_v"):
                base = f"stage{i}.block{j}.{branch}.bn"
                shapes[f"{base}.running_mean"] = (st.embed_dim,)
                shapes[f"{base}.running_var"] = (st.embed_dim,)
    return shapes


def count_parameters(cfg: CvTConfig, include_head: bool = True) -> int:
    total = 0
    for name, shape in parameter_shapes(cfg).items():
        if not include_head and name.startswith("head."):
            continue
        total += int(np.prod(shape, dtype=np.int64))
    return total


def init_weights(cfg: CvTConfig, seed: int = 0) -> TensorStore:
    """Random store with the exact tensor inventory the forward pass reads."""
    rng = np.random.default_rng(seed)
    store = TensorStore()
    for name, shape in parameter_shapes(cfg).items():
        leaf = name.rsplit(".", 1)[-1]
        if leaf in ("gamma",):
            arr = np.ones(shape, dtype=np.float32)
        elif leaf in ("beta", "bias"):
            arr = np.zeros(shape, dtype=np.float32)
        else:
            arr = rng.standard_normal(shape).astype(np.float32) * 0.02
        store.put(name, arr)
    for name, shape in buffer_shapes(cfg).items():
        if name.endswith("running_var"):
            store.put(name, np.ones(shape, dtype=np.float32))
        else:
            store.put(name, np.zeros(shape, dtype=np.float32))
    return store
