"""Attention blocks: neighborhood attention, offset networks (plain and
question-guided), deformable sampling, deformable attention, and the
deformable co-attention fusion block with its Add&LayerNorm/FFN wrapper.

Feature maps flow through as (C, H, W); attention math happens on
row-major flattened (H*W, C) views. Offsets are (row, col) displacements
in feature-grid pixels, bounded to [-max_offset, max_offset] by a tanh and
emitted by projections that start at zero, so every deformable path begins
life sampling exactly on the reference grid.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from . import tensor as T
from .tensor import FeatureMap, Tensor


class ConfigError(ValueError):
    """Rejected configuration: attention parameters out of contract."""


@dataclass(frozen=True)
class AttentionConfig:
    """Shared attention hyperparameters.

    ``head_dim * heads`` must equal the channel width of the map a block
    runs on; ``for_channels`` rederives head_dim for a new width.
    """

    heads: int = 4
    head_dim: int = 16
    neighborhood_window: int = 3
    offset_kernel: int = 3
    max_offset: float = 4.0
    question_len: int = 16
    question_dim: int = 32
    sample_stride: int = 1

    def __post_init__(self):
        if self.neighborhood_window % 2 != 1:
            raise ConfigError("neighborhood window must be odd")
        if self.max_offset <= 0:
            raise ConfigError("max offset must be positive")
        if self.heads < 1 or self.head_dim < 1:
            raise ConfigError("heads and head_dim must be positive")
        if self.sample_stride < 1:
            raise ConfigError("sample stride must be >= 1")

    @property
    def channels(self) -> int:
        return self.heads * self.head_dim

    def for_channels(self, channels: int) -> "AttentionConfig":
        if channels % self.heads:
            raise ConfigError(f"channels {channels} not divisible by {self.heads} heads")
        return replace(self, head_dim=channels // self.heads)


# -- map <-> row helpers -----------------------------------------------------


def fm_rows(fm: FeatureMap) -> Tensor:
    c, h, w = fm.data.shape
    return fm.data.transpose(1, 2, 0).reshape(h * w, c)


def rows_fm(rows: Tensor, height: int, width: int, stride: int) -> FeatureMap:
    n, c = rows.shape
    return FeatureMap(rows.reshape(height, width, c).transpose(2, 0, 1), stride)


def reference_grid(height: int, width: int, sample_stride: int = 1) -> np.ndarray:
    """Uniformly spaced (row, col) reference points over the feature grid."""
    rr, cc = np.meshgrid(np.arange(0, height, sample_stride, dtype=np.float64),
                         np.arange(0, width, sample_stride, dtype=np.float64),
                         indexing="ij")
    return np.stack([rr.reshape(-1), cc.reshape(-1)], axis=1)


_NEIGHBOR_CACHE: dict[tuple[int, int, int], tuple[np.ndarray, np.ndarray]] = {}


def _neighbor_indices(height: int, width: int, window: int):
    """Flat indices of each pixel's window neighbors plus a -1e30 bias for
    out-of-map entries (clipped border neighborhoods)."""
    key = (height, width, window)
    if key in _NEIGHBOR_CACHE:
        return _NEIGHBOR_CACHE[key]
    r = window // 2
    di, dj = np.meshgrid(np.arange(-r, r + 1), np.arange(-r, r + 1), indexing="ij")
    di, dj = di.reshape(-1), dj.reshape(-1)
    ii, jj = np.meshgrid(np.arange(height), np.arange(width), indexing="ij")
    ni = ii.reshape(-1, 1) + di[None, :]
    nj = jj.reshape(-1, 1) + dj[None, :]
    valid = (ni >= 0) & (ni < height) & (nj >= 0) & (nj < width)
    flat = np.where(valid, ni * width + nj, 0).astype(np.int64)
    bias = np.where(valid, 0.0, -1e30)
    _NEIGHBOR_CACHE[key] = (flat, bias)
    return flat, bias


def _split_heads(rows: Tensor, heads: int) -> Tensor:
    n, c = rows.shape
    return rows.reshape(n, heads, c // heads).transpose(1, 0, 2)


def _merge_heads(stacked: Tensor) -> Tensor:
    h, n, d = stacked.shape
    return stacked.transpose(1, 0, 2).reshape(n, h * d)


def scaled_dot_attention(q: Tensor, k: Tensor, v: Tensor, heads: int,
                         bias: Tensor | None = None, return_weights: bool = False):
    """Multi-head softmax(q k^T / sqrt(d)) v on (N, C) rows; ``bias`` is an
    additive (N, M) logit mask shared across heads."""
    d = q.shape[1] // heads
    qh = _split_heads(q, heads)
    kh = _split_heads(k, heads)
    vh = _split_heads(v, heads)
    logits = T.matmul(qh, kh.transpose(0, 2, 1)) * (1.0 / np.sqrt(d))
    if bias is not None:
        logits = logits + bias.reshape((1,) + bias.shape)
    weights = T.softmax(logits, axis=2)
    out = _merge_heads(T.matmul(weights, vh))
    if return_weights:
        return out, weights
    return out


# -- neighborhood attention ---------------------------------------------------


class NeighborhoodAttention:
    """Per-pixel attention over a k_n x k_n clipped neighborhood, wrapped
    in residual + LayerNorm; preserves the map's shape."""

    def __init__(self, channels: int, cfg: AttentionConfig, rng: np.random.Generator):
        self.cfg = cfg.for_channels(channels)
        c = channels
        self.w_q = T.glorot_uniform(rng, (c, c))
        self.w_k = T.glorot_uniform(rng, (c, c))
        self.w_v = T.glorot_uniform(rng, (c, c))
        self.w_merge = T.glorot_uniform(rng, (c, c))
        self.ln_gain = Tensor(np.ones(c), requires_grad=True)
        self.ln_bias = Tensor(np.zeros(c), requires_grad=True)

    def params(self, prefix: str = "") -> dict[str, Tensor]:
        return {f"{prefix}w_q": self.w_q, f"{prefix}w_k": self.w_k,
                f"{prefix}w_v": self.w_v, f"{prefix}w_merge": self.w_merge,
                f"{prefix}ln_gain": self.ln_gain, f"{prefix}ln_bias": self.ln_bias}

    def __call__(self, fm: FeatureMap, window: int | None = None) -> FeatureMap:
        c, h, w = fm.data.shape
        win = self.cfg.neighborhood_window if window is None else window
        if win > min(h, w):
            raise ConfigError(f"neighborhood window {win} exceeds map {h}x{w}")
        heads, d = self.cfg.heads, self.cfg.head_dim
        rows = fm_rows(fm)
        q = rows @ self.w_q
        k = rows @ self.w_k
        v = rows @ self.w_v
        idx, bias = _neighbor_indices(h, w, win)
        n, win2 = idx.shape
        kn = T.take(k, idx.reshape(-1)).reshape(n, win2, heads, d)
        vn = T.take(v, idx.reshape(-1)).reshape(n, win2, heads, d)
        qh = q.reshape(n, 1, heads, d)
        logits = (qh * kn).sum(axis=3) * (1.0 / np.sqrt(d))
        logits = logits + Tensor(bias[:, :, None])
        weights = T.softmax(logits, axis=1)
        attended = (weights.reshape(n, win2, heads, 1) * vn).sum(axis=1)
        out = attended.reshape(n, heads * d) @ self.w_merge
        res = T.layer_norm(rows + out, self.ln_gain, self.ln_bias, axis=1)
        return rows_fm(res, h, w, fm.stride)


# -- offset networks -----------------------------------------------------------


class OffsetNetwork:
    """k x k conv -> channel LayerNorm -> GELU -> 1x1 projection to 2
    channels -> tanh -> scale by max_offset. The final projection starts
    at zero so the initial offsets are identically zero."""

    def __init__(self, channels: int, cfg: AttentionConfig, rng: np.random.Generator):
        self.cfg = cfg
        k = cfg.offset_kernel
        self.conv_w = T.glorot_uniform(rng, (channels, channels, k, k))
        self.conv_b = Tensor(np.zeros(channels), requires_grad=True)
        self.ln_gain = Tensor(np.ones(channels), requires_grad=True)
        self.ln_bias = Tensor(np.zeros(channels), requires_grad=True)
        self.proj_w = Tensor(np.zeros((channels, 2)), requires_grad=True)
        self.proj_b = Tensor(np.zeros(2), requires_grad=True)

    def params(self, prefix: str = "") -> dict[str, Tensor]:
        return {f"{prefix}conv_w": self.conv_w, f"{prefix}conv_b": self.conv_b,
                f"{prefix}ln_gain": self.ln_gain, f"{prefix}ln_bias": self.ln_bias,
                f"{prefix}proj_w": self.proj_w, f"{prefix}proj_b": self.proj_b}

    def __call__(self, fm: FeatureMap) -> Tensor:
        c, h, w = fm.data.shape
        k = self.cfg.offset_kernel
        z = T.conv2d(fm.data, self.conv_w, stride=1, padding=k // 2)
        z = z + self.conv_b.reshape(c, 1, 1)
        rows = fm_rows(FeatureMap(z, fm.stride))
        rows = T.gelu(T.layer_norm(rows, self.ln_gain, self.ln_bias, axis=1))
        raw = rows @ self.proj_w + self.proj_b.reshape(1, 2)
        return T.tanh(raw) * self.cfg.max_offset


class QuestionGuidedOffsets:
    """Offsets conditioned on the question: the similarity map between
    question token embeddings and projected image features feeds the offset
    network, so sampling drifts toward question-relevant locations."""

    def __init__(self, channels: int, cfg: AttentionConfig, rng: np.random.Generator):
        self.cfg = cfg
        t_q, d_z, k = cfg.question_len, cfg.question_dim, cfg.offset_kernel
        self.w_a = T.glorot_uniform(rng, (channels, d_z))
        self.conv_w = T.glorot_uniform(rng, (t_q, t_q, k, k))
        self.conv_b = Tensor(np.zeros(t_q), requires_grad=True)
        self.ln_gain = Tensor(np.ones(t_q), requires_grad=True)
        self.ln_bias = Tensor(np.zeros(t_q), requires_grad=True)
        self.proj_w = Tensor(np.zeros((t_q, 2)), requires_grad=True)
        self.proj_b = Tensor(np.zeros(2), requires_grad=True)

    def params(self, prefix: str = "") -> dict[str, Tensor]:
        return {f"{prefix}w_a": self.w_a, f"{prefix}conv_w": self.conv_w,
                f"{prefix}conv_b": self.conv_b, f"{prefix}ln_gain": self.ln_gain,
                f"{prefix}ln_bias": self.ln_bias, f"{prefix}proj_w": self.proj_w,
                f"{prefix}proj_b": self.proj_b}

    def __call__(self, fm: FeatureMap, question: Tensor) -> Tensor:
        c, h, w = fm.data.shape
        t_q = self.cfg.question_len
        if question.shape != (t_q, self.cfg.question_dim):
            raise T.ShapeError(
                f"question embedding must be ({t_q}, {self.cfg.question_dim}), got {question.shape}")
        a = fm_rows(fm) @ self.w_a                       # (HW, D_z)
        sim = question @ a.transpose(1, 0)               # (T_q, HW)
        sim_map = sim.reshape(t_q, h, w)
        k = self.cfg.offset_kernel
        z = T.conv2d(sim_map, self.conv_w, stride=1, padding=k // 2)
        z = z + self.conv_b.reshape(t_q, 1, 1)
        rows = fm_rows(FeatureMap(z, fm.stride))
        rows = T.gelu(T.layer_norm(rows, self.ln_gain, self.ln_bias, axis=1))
        raw = rows @ self.proj_w + self.proj_b.reshape(1, 2)
        return T.tanh(raw) * self.cfg.max_offset


def deformable_sample(fm: FeatureMap, offsets: Tensor, sample_stride: int = 1) -> Tensor:
    """Bilinear-sample the map at reference grid + offsets -> (P, C) rows."""
    c, h, w = fm.data.shape
    grid = reference_grid(h, w, sample_stride)
    if offsets.shape != grid.shape:
        raise T.ShapeError(f"offsets {offsets.shape} do not match grid {grid.shape}")
    return T.bilinear_sample(fm.data, Tensor(grid) + offsets)


# -- deformable attention -------------------------------------------------------


class DeformableAttention:
    """Queries from the map, keys/values from features sampled at offset
    locations predicted from the queries; residual + LayerNorm wrapper."""

    def __init__(self, channels: int, cfg: AttentionConfig, rng: np.random.Generator):
        self.cfg = cfg.for_channels(channels)
        c = channels
        self.w_q = T.glorot_uniform(rng, (c, c))
        self.w_k = T.glorot_uniform(rng, (c, c))
        self.w_v = T.glorot_uniform(rng, (c, c))
        self.w_merge = T.glorot_uniform(rng, (c, c))
        self.offset_net = OffsetNetwork(c, self.cfg, rng)
        self.ln_gain = Tensor(np.ones(c), requires_grad=True)
        self.ln_bias = Tensor(np.zeros(c), requires_grad=True)

    def params(self, prefix: str = "") -> dict[str, Tensor]:
        out = {f"{prefix}w_q": self.w_q, f"{prefix}w_k": self.w_k,
               f"{prefix}w_v": self.w_v, f"{prefix}w_merge": self.w_merge,
               f"{prefix}ln_gain": self.ln_gain, f"{prefix}ln_bias": self.ln_bias}
        out.update(self.offset_net.params(f"{prefix}offset."))
        return out

    def compute_offsets(self, fm: FeatureMap) -> Tensor:
        c, h, w = fm.data.shape
        q = fm_rows(fm) @ self.w_q
        return self.offset_net(rows_fm(q, h, w, fm.stride))

    def __call__(self, fm: FeatureMap, use_offsets: bool = True) -> FeatureMap:
        c, h, w = fm.data.shape
        rows = fm_rows(fm)
        q = rows @ self.w_q
        if use_offsets:
            offsets = self.offset_net(rows_fm(q, h, w, fm.stride))
            sampled = deformable_sample(fm, offsets, self.cfg.sample_stride)
        else:
            sampled = rows
        k = sampled @ self.w_k
        v = sampled @ self.w_v
        out = scaled_dot_attention(q, k, v, self.cfg.heads) @ self.w_merge
        res = T.layer_norm(rows + out, self.ln_gain, self.ln_bias, axis=1)
        return rows_fm(res, h, w, fm.stride)


# -- deformable co-attention -----------------------------------------------------


class DeformableCoAttention:
    """Co-attention core: queries from one map, keys/values from the other
    map sampled at question-guided offset locations."""

    def __init__(self, channels: int, cfg: AttentionConfig, rng: np.random.Generator):
        self.cfg = cfg.for_channels(channels)
        c = channels
        self.offsets = QuestionGuidedOffsets(c, self.cfg, rng)
        self.w_q = T.glorot_uniform(rng, (c, c))
        self.w_k = T.glorot_uniform(rng, (c, c))
        self.w_v = T.glorot_uniform(rng, (c, c))

    def params(self, prefix: str = "") -> dict[str, Tensor]:
        out = {f"{prefix}w_q": self.w_q, f"{prefix}w_k": self.w_k, f"{prefix}w_v": self.w_v}
        out.update(self.offsets.params(f"{prefix}qon."))
        return out

    def __call__(self, x: FeatureMap, y: FeatureMap, question: Tensor,
                 use_sampling: bool = True) -> Tensor:
        if x.data.shape != y.data.shape:
            raise T.ShapeError(f"co-attention maps disagree: {x.data.shape} vs {y.data.shape}")
        if use_sampling:
            offsets = self.offsets(x, question)
            sampled = deformable_sample(x, offsets, self.cfg.sample_stride)
        else:
            sampled = fm_rows(x)
        q = fm_rows(y) @ self.w_q
        k = sampled @ self.w_k
        v = sampled @ self.w_v
        return scaled_dot_attention(q, k, v, self.cfg.heads)


class CoAttentionFusionBlock:
    """The full fusion block: deformable co-attention, Add&LayerNorm, a 3x3
    conv + ReLU feed-forward, Add&LayerNorm, and a final output projection."""

    def __init__(self, channels: int, out_channels: int, cfg: AttentionConfig,
                 rng: np.random.Generator):
        c = channels
        self.attention = DeformableCoAttention(c, cfg, rng)
        self.ln1_gain = Tensor(np.ones(c), requires_grad=True)
        self.ln1_bias = Tensor(np.zeros(c), requires_grad=True)
        self.ffn_w = T.glorot_uniform(rng, (c, c, 3, 3))
        self.ffn_b = Tensor(np.zeros(c), requires_grad=True)
        self.ln2_gain = Tensor(np.ones(c), requires_grad=True)
        self.ln2_bias = Tensor(np.zeros(c), requires_grad=True)
        self.w_out = T.glorot_uniform(rng, (c, out_channels))

    def params(self, prefix: str = "") -> dict[str, Tensor]:
        out = {f"{prefix}ln1_gain": self.ln1_gain, f"{prefix}ln1_bias": self.ln1_bias,
               f"{prefix}ffn_w": self.ffn_w, f"{prefix}ffn_b": self.ffn_b,
               f"{prefix}ln2_gain": self.ln2_gain, f"{prefix}ln2_bias": self.ln2_bias,
               f"{prefix}w_out": self.w_out}
        out.update(self.attention.params(f"{prefix}dca."))
        return out

    def __call__(self, x: FeatureMap, y: FeatureMap, question: Tensor,
                 use_sampling: bool = True) -> FeatureMap:
        c, h, w = y.data.shape
        att = self.attention(x, y, question, use_sampling=use_sampling)
        b = T.layer_norm(fm_rows(y) + att, self.ln1_gain, self.ln1_bias, axis=1)
        b_map = rows_fm(b, h, w, y.stride).data
        ffn = T.relu(T.conv2d(b_map, self.ffn_w, stride=1, padding=1)
                     + self.ffn_b.reshape(c, 1, 1))
        ffn_rows = fm_rows(FeatureMap(ffn, y.stride))
        c_rows = T.layer_norm(b + ffn_rows, self.ln2_gain, self.ln2_bias, axis=1)
        return rows_fm(c_rows @ self.w_out, h, w, y.stride)
