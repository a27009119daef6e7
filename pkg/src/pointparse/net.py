"""Per-pixel embedding network and linear classifier with exact gradients.

The feature extractor is a stack of stride-1, same-padding 3x3 convolutions
with ReLU between layers; the final convolution is linear so embeddings can
be negative. The classifier is a per-pixel affine map to K logits followed
by softmax. Forward passes cache activations so reverse-mode gradients are
exact; a central-difference checker validates them numerically.

Spatial dims never change, so embedding and score maps align with input
pixels one-to-one and annotated points index embeddings directly.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .grids import ImageGrid

CHECKPOINT_MAGIC = b"PXNETCK1"


@dataclass(frozen=True)
class NetConfig:
    in_channels: int = 3
    hidden_channels: tuple[int, ...] = (8, 16)
    embedding_dim: int = 16
    num_classes: int = 6
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "hidden_channels", tuple(self.hidden_channels))
        if self.embedding_dim < 2 or self.num_classes < 2:
            raise ValueError("embedding_dim and num_classes must be >= 2")
        if self.in_channels < 1:
            raise ValueError("in_channels must be >= 1")

    @property
    def conv_channels(self) -> tuple[int, ...]:
        """Output channels of every conv layer; the last one is the embedding."""
        return self.hidden_channels + (self.embedding_dim,)


@dataclass
class ModelParams:
    """Conv kernels/biases plus the classifier weight matrix and bias.

    Also serves as the container for gradients and optimizer velocity:
    anything shaped like the parameters lives in one of these.
    """

    conv_weights: list[np.ndarray]  # each (out, in, 3, 3)
    conv_biases: list[np.ndarray]   # each (out,)
    head_weight: np.ndarray         # (K, D)
    head_bias: np.ndarray           # (K,)

    def feature_arrays(self) -> list[np.ndarray]:
        out = []
        for w, b in zip(self.conv_weights, self.conv_biases):
            out.extend((w, b))
        return out

    def head_arrays(self) -> list[np.ndarray]:
        return [self.head_weight, self.head_bias]

    def arrays(self) -> list[np.ndarray]:
        return self.feature_arrays() + self.head_arrays()

    @property
    def size(self) -> int:
        return sum(a.size for a in self.arrays())

    def flatten(self) -> np.ndarray:
        return np.concatenate([a.ravel() for a in self.arrays()])

    def zeros_like(self) -> "ModelParams":
        return ModelParams(
            [np.zeros_like(w) for w in self.conv_weights],
            [np.zeros_like(b) for b in self.conv_biases],
            np.zeros_like(self.head_weight),
            np.zeros_like(self.head_bias),
        )

    def copy(self) -> "ModelParams":
        return ModelParams(
            [w.copy() for w in self.conv_weights],
            [b.copy() for b in self.conv_biases],
            self.head_weight.copy(),
            self.head_bias.copy(),
        )

    @staticmethod
    def from_flat(cfg: NetConfig, flat: np.ndarray) -> "ModelParams":
        flat = np.asarray(flat, dtype=np.float64)
        conv_w, conv_b = [], []
        pos = 0
        c_in = cfg.in_channels
        for c_out in cfg.conv_channels:
            n = c_out * c_in * 9
            conv_w.append(flat[pos:pos + n].reshape(c_out, c_in, 3, 3).copy())
            pos += n
            conv_b.append(flat[pos:pos + c_out].copy())
            pos += c_out
            c_in = c_out
        k, d = cfg.num_classes, cfg.embedding_dim
        head_w = flat[pos:pos + k * d].reshape(k, d).copy()
        pos += k * d
        head_b = flat[pos:pos + k].copy()
        pos += k
        if pos != flat.size:
            raise ValueError(f"flat vector has {flat.size} entries, expected {pos}")
        return ModelParams(conv_w, conv_b, head_w, head_b)


def init_params(cfg: NetConfig) -> ModelParams:
    """Fan-in scaled uniform weights, zero biases, deterministic in cfg.seed."""
    rng = np.random.default_rng(cfg.seed)
    conv_w, conv_b = [], []
    c_in = cfg.in_channels
    for c_out in cfg.conv_channels:
        bound = 1.0 / np.sqrt(c_in * 9)
        conv_w.append(rng.uniform(-bound, bound, size=(c_out, c_in, 3, 3)))
        conv_b.append(np.zeros(c_out))
        c_in = c_out
    bound = 1.0 / np.sqrt(cfg.embedding_dim)
    head_w = rng.uniform(-bound, bound, size=(cfg.num_classes, cfg.embedding_dim))
    head_b = np.zeros(cfg.num_classes)
    return ModelParams(conv_w, conv_b, head_w, head_b)


def _conv3x3(x: np.ndarray, w: np.ndarray, b: np.ndarray) -> np.ndarray:
    # x: (H, W, Cin) -> (H, W, Cout), zero padded so dims are preserved.
    xp = np.pad(x, ((1, 1), (1, 1), (0, 0)))
    win = sliding_window_view(xp, (3, 3), axis=(0, 1))  # (H, W, Cin, 3, 3)
    return np.einsum("hwcij,ocij->hwo", win, w, optimize=True) + b


def _conv3x3_backward(dout: np.ndarray, x: np.ndarray, w: np.ndarray):
    xp = np.pad(x, ((1, 1), (1, 1), (0, 0)))
    win = sliding_window_view(xp, (3, 3), axis=(0, 1))
    dw = np.einsum("hwo,hwcij->ocij", dout, win, optimize=True)
    db = dout.sum(axis=(0, 1))
    # dx is the correlation of the padded upstream gradient with the
    # spatially flipped kernel.
    dp = np.pad(dout, ((1, 1), (1, 1), (0, 0)))
    dwin = sliding_window_view(dp, (3, 3), axis=(0, 1))
    dx = np.einsum("hwoij,ocij->hwc", dwin, w[:, :, ::-1, ::-1], optimize=True)
    return dw, db, dx


def softmax(logits: np.ndarray) -> np.ndarray:
    """Row-wise stable softmax over the last axis."""
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


@dataclass
class ForwardState:
    """Cached activations from one forward pass, consumed by `backward`."""

    layer_inputs: list[np.ndarray]   # input to each conv layer
    pre_acts: list[np.ndarray]       # pre-ReLU outputs of hidden layers
    embeddings: np.ndarray           # (H, W, D)
    logits: np.ndarray               # (H, W, K)
    probs: np.ndarray                # (H, W, K)


def forward(image: ImageGrid, params: ModelParams) -> ForwardState:
    """Full forward pass with caching for backprop."""
    x = image.values
    if x.shape[2] != params.conv_weights[0].shape[1]:
        raise ValueError(
            f"image has {x.shape[2]} channels, network expects {params.conv_weights[0].shape[1]}")
    layer_inputs, pre_acts = [], []
    n_layers = len(params.conv_weights)
    for i in range(n_layers - 1):
        layer_inputs.append(x)
        z = _conv3x3(x, params.conv_weights[i], params.conv_biases[i])
        pre_acts.append(z)
        x = np.maximum(z, 0.0)
    layer_inputs.append(x)
    emb = _conv3x3(x, params.conv_weights[-1], params.conv_biases[-1])
    logits = emb @ params.head_weight.T + params.head_bias
    return ForwardState(layer_inputs, pre_acts, emb, logits, softmax(logits))


def forward_features(image: ImageGrid, params: ModelParams) -> np.ndarray:
    """Embedding map (H, W, D) for an image."""
    return forward(image, params).embeddings


def forward_classifier(embeddings: np.ndarray, params: ModelParams) -> np.ndarray:
    """Per-pixel class probabilities (H, W, K) from an embedding map."""
    emb = np.asarray(embeddings)
    if emb.shape[-1] != params.head_weight.shape[1]:
        raise ValueError(
            f"embeddings have dim {emb.shape[-1]}, classifier expects {params.head_weight.shape[1]}")
    return softmax(emb @ params.head_weight.T + params.head_bias)


def backward(
    state: ForwardState,
    params: ModelParams,
    d_embeddings: np.ndarray | None = None,
    d_logits: np.ndarray | None = None,
) -> ModelParams:
    """Exact reverse-mode gradients w.r.t. all parameters.

    `d_embeddings` is the upstream gradient on the embedding map (the metric
    loss head); `d_logits` the gradient on the classifier logits (the
    cross-entropy head). Either may be None; both heads accumulate
    additively into the shared feature-extractor gradient.
    """
    if d_embeddings is None and d_logits is None:
        raise ValueError("need at least one upstream gradient")
    grads = params.zeros_like()

    d_emb = np.zeros_like(state.embeddings)
    if d_embeddings is not None:
        d_emb += d_embeddings
    if d_logits is not None:
        grads.head_weight += np.einsum("hwk,hwd->kd", d_logits, state.embeddings, optimize=True)
        grads.head_bias += d_logits.sum(axis=(0, 1))
        d_emb += d_logits @ params.head_weight

    # Final (linear) conv layer, then hidden layers with the ReLU mask.
    g = d_emb
    for i in range(len(params.conv_weights) - 1, -1, -1):
        if i < len(state.pre_acts):
            g = g * (state.pre_acts[i] > 0)
        dw, db, g = _conv3x3_backward(g, state.layer_inputs[i], params.conv_weights[i])
        grads.conv_weights[i] += dw
        grads.conv_biases[i] += db
    return grads


def accumulate(into: ModelParams, grads: ModelParams, scale: float = 1.0) -> None:
    """In-place `into += scale * grads` over all arrays."""
    for dst, src in zip(into.arrays(), grads.arrays()):
        dst += scale * src


def numeric_grad_check(
    loss_fn: Callable[[ModelParams], float],
    grad_fn: Callable[[ModelParams], np.ndarray],
    params: ModelParams,
    cfg: NetConfig,
    h: float = 1e-4,
    num_samples: int = 100,
    seed: int = 0,
) -> float:
    """Max relative error between analytic gradient and central differences.

    `grad_fn` returns the flattened analytic gradient at `params`. A random
    subsample of parameter coordinates (at least min(num_samples, size)) is
    perturbed by +/-h. Relative error uses max(|a|, |n|, 1e-6) as scale so
    coordinates with true zero gradient do not blow up the ratio.
    """
    flat = params.flatten()
    analytic = np.asarray(grad_fn(params), dtype=np.float64)
    if analytic.shape != flat.shape:
        raise ValueError("analytic gradient shape does not match parameter vector")
    rng = np.random.default_rng(seed)
    idx = rng.choice(flat.size, size=min(num_samples, flat.size), replace=False)

    worst = 0.0
    for j in idx:
        bumped = flat.copy()
        bumped[j] = flat[j] + h
        f_plus = loss_fn(ModelParams.from_flat(cfg, bumped))
        bumped[j] = flat[j] - h
        f_minus = loss_fn(ModelParams.from_flat(cfg, bumped))
        numeric = (f_plus - f_minus) / (2.0 * h)
        scale = max(abs(analytic[j]), abs(numeric), 1e-6)
        worst = max(worst, abs(analytic[j] - numeric) / scale)
    return worst


# ---------------------------------------------------------------------------
# Checkpoint format: CHECKPOINT_MAGIC, then little-endian
#   u32 in_channels, u32 n_hidden, u32[n_hidden] hidden channels,
#   u32 embedding_dim, u32 num_classes, i64 seed, u64 param_count,
# then param_count f64 values in flatten() order.
# ---------------------------------------------------------------------------

def save_checkpoint(params: ModelParams, cfg: NetConfig, path) -> None:
    flat = params.flatten()
    parts = [CHECKPOINT_MAGIC]
    parts.append(struct.pack("<II", cfg.in_channels, len(cfg.hidden_channels)))
    parts.append(struct.pack(f"<{len(cfg.hidden_channels)}I", *cfg.hidden_channels))
    parts.append(struct.pack("<IIqQ", cfg.embedding_dim, cfg.num_classes, cfg.seed, flat.size))
    parts.append(flat.astype("<f8").tobytes())
    Path(path).write_bytes(b"".join(parts))


def load_checkpoint(path) -> tuple[ModelParams, NetConfig]:
    data = Path(path).read_bytes()
    if data[:8] != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: not a checkpoint file")
    pos = 8
    in_ch, n_hidden = struct.unpack_from("<II", data, pos)
    pos += 8
    hidden = struct.unpack_from(f"<{n_hidden}I", data, pos)
    pos += 4 * n_hidden
    emb_dim, num_classes, seed, count = struct.unpack_from("<IIqQ", data, pos)
    pos += 24
    cfg = NetConfig(in_ch, tuple(hidden), emb_dim, num_classes, seed)
    flat = np.frombuffer(data, dtype="<f8", count=count, offset=pos)
    params = ModelParams.from_flat(cfg, flat)
    return params, cfg
