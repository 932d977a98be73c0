"""Instance segmentation model: stem, four-stage attention encoder, pixel
decoder, masked-attention query decoder, prediction heads, and the
matching-based training loss.

Stage s of the encoder runs at stride /4*2^s with 2^s*K channels (one
neighborhood-attention block then one deformable-attention block per
depth); the pixel decoder upsamples back out to a full-resolution per-pixel
embedding whose dot product with per-query mask embeddings yields mask
logits. Training matches queries to ground-truth objects with a Hungarian
assignment over a class/focal/dice composite cost.
"""

from __future__ import annotations

import itertools
import json
from dataclasses import dataclass, field, asdict

import numpy as np

from . import tensor as T
from .attention import (
    AttentionConfig,
    DeformableAttention,
    NeighborhoodAttention,
    fm_rows,
    rows_fm,
    scaled_dot_attention,
)
from .geometry import bbox_from_mask
from .tensor import FeatureMap, Tensor


class SegmenterError(ValueError):
    """Rejected input or configuration in the segmentation pipeline."""


@dataclass(frozen=True)
class EncoderConfig:
    """Model-size knobs; paper-scale values stay selectable, desk defaults
    keep a CPU run in minutes."""

    base_channels: int = 16            # K; stage s runs at 2^s * K channels
    stage_depths: tuple[int, ...] = (1, 1, 1, 1)
    pixel_channels: int = 64           # C_E
    query_channels: int = 64           # C_Q
    num_queries: int = 20              # N
    num_classes: int = 7               # L (real categories; +1 no-object slot)
    mask_threshold: float = 0.5        # t
    decoder_layers: int = 3            # L_dec

    def __post_init__(self):
        if len(self.stage_depths) != 4:
            raise SegmenterError("encoder has exactly 4 stages")
        if not (0.0 <= self.mask_threshold <= 1.0):
            raise SegmenterError("mask threshold must lie in [0, 1]")
        if self.num_queries < 1 or self.decoder_layers < 1:
            raise SegmenterError("need at least one query and one decoder layer")

    def stage_channels(self, stage: int) -> int:
        return self.base_channels * (2 ** stage)


@dataclass
class SegmentationOutput:
    """Per-query predictions: class distributions over L+1 slots, binary
    masks after the step-at-threshold, boxes for non-empty masks, and the
    soft mask probabilities used by the losses."""

    class_probs: np.ndarray            # (N, L+1), rows on the simplex
    masks: np.ndarray                  # (N, H, W) binary
    boxes: list[tuple[int, int, int, int] | None]
    mask_probs: np.ndarray             # (N, H, W) sigmoid probabilities
    class_logits: Tensor = None
    mask_logits: Tensor = None
    query_embeddings: Tensor = None
    pixel_embedding: Tensor = None
    mask_embeddings: Tensor = None


def _conv_bias(x: Tensor, w: Tensor, b: Tensor, stride: int, padding: int) -> Tensor:
    out = T.conv2d(x, w, stride=stride, padding=padding)
    return out + b.reshape(b.shape[0], 1, 1)


_POS_CACHE: dict[tuple[int, int, int], np.ndarray] = {}


def sincos_position_rows(channels: int, height: int, width: int) -> np.ndarray:
    """Fixed 2-d sine/cosine position features, (H*W, channels)."""
    key = (channels, height, width)
    if key in _POS_CACHE:
        return _POS_CACHE[key]
    half = channels // 2
    quarter = half // 2
    freq = 1.0 / (10000.0 ** (np.arange(quarter) / max(quarter, 1)))
    rr, cc = np.meshgrid(np.arange(height), np.arange(width), indexing="ij")
    out = np.zeros((height * width, channels))
    ry = rr.reshape(-1, 1) * freq[None, :]
    cx = cc.reshape(-1, 1) * freq[None, :]
    out[:, 0:quarter] = np.sin(ry)
    out[:, quarter:2 * quarter] = np.cos(ry)
    out[:, half:half + quarter] = np.sin(cx)
    out[:, half + quarter:half + 2 * quarter] = np.cos(cx)
    _POS_CACHE[key] = out
    return out


class ChartEncoder:
    """Stem plus the 4-stage neighborhood/deformable attention backbone."""

    def __init__(self, cfg: EncoderConfig, attn: AttentionConfig,
                 rng: np.random.Generator, in_channels: int = 3,
                 deformable: bool = True):
        self.cfg = cfg
        self._window = attn.neighborhood_window
        k = cfg.base_channels
        self.stem_w1 = T.glorot_uniform(rng, (k, in_channels, 3, 3))
        self.stem_b1 = Tensor(np.zeros(k), requires_grad=True)
        self.stem_w2 = T.glorot_uniform(rng, (k, k, 3, 3))
        self.stem_b2 = Tensor(np.zeros(k), requires_grad=True)
        self.stages: list[list] = []
        self.downsamples: list[tuple[Tensor, Tensor]] = []
        for s in range(4):
            c = cfg.stage_channels(s)
            blocks = []
            for _ in range(cfg.stage_depths[s]):
                blocks.append(NeighborhoodAttention(c, attn, rng))
                if deformable:
                    blocks.append(DeformableAttention(c, attn, rng))
            self.stages.append(blocks)
            if s < 3:
                w = T.glorot_uniform(rng, (2 * c, c, 3, 3))
                b = Tensor(np.zeros(2 * c), requires_grad=True)
                self.downsamples.append((w, b))

    def params(self, prefix: str = "") -> dict[str, Tensor]:
        out = {f"{prefix}stem.w1": self.stem_w1, f"{prefix}stem.b1": self.stem_b1,
               f"{prefix}stem.w2": self.stem_w2, f"{prefix}stem.b2": self.stem_b2}
        for s, blocks in enumerate(self.stages):
            for bi, block in enumerate(blocks):
                out.update(block.params(f"{prefix}stage{s}.block{bi}."))
        for s, (w, b) in enumerate(self.downsamples):
            out[f"{prefix}down{s}.w"] = w
            out[f"{prefix}down{s}.b"] = b
        return out

    def stem(self, image: Tensor) -> FeatureMap:
        c, h, w = image.shape
        if h % 32 or w % 32:
            raise SegmenterError(f"image extents must divide 32, got {h}x{w}")
        z = T.gelu(_conv_bias(image, self.stem_w1, self.stem_b1, stride=2, padding=1))
        z = T.gelu(_conv_bias(z, self.stem_w2, self.stem_b2, stride=2, padding=1))
        return FeatureMap(z, 4)

    def encode(self, initial: FeatureMap) -> tuple[FeatureMap, list[FeatureMap]]:
        """Run the 4 stages; returns the /32 map plus every stage output.

        Deep stages of small images can shrink below the configured
        neighborhood window; the window is clipped to the map there.
        """
        fm = initial
        stage_outputs = []
        for s, blocks in enumerate(self.stages):
            side = min(fm.data.shape[1], fm.data.shape[2])
            window = min(self._window, side if side % 2 else side - 1)
            for block in blocks:
                if isinstance(block, NeighborhoodAttention):
                    fm = block(fm, window=window)
                else:
                    fm = block(fm)
            stage_outputs.append(fm)
            if s < 3:
                w, b = self.downsamples[s]
                fm = FeatureMap(T.gelu(_conv_bias(fm.data, w, b, stride=2, padding=1)),
                                fm.stride * 2)
        return fm, stage_outputs

    def __call__(self, image: Tensor) -> tuple[FeatureMap, list[FeatureMap]]:
        return self.encode(self.stem(image))


class PixelDecoder:
    """Upsampling pyramid from the /32 features: three x2 stages to /4,
    then a x4 stage to full resolution; every level has C_E channels."""

    def __init__(self, cfg: EncoderConfig, rng: np.random.Generator):
        self.cfg = cfg
        c_in = cfg.base_channels * 8
        ce = cfg.pixel_channels
        self.convs: list[tuple[Tensor, Tensor]] = []
        for i in range(4):
            w = T.glorot_uniform(rng, (ce, c_in if i == 0 else ce, 3, 3))
            b = Tensor(np.zeros(ce), requires_grad=True)
            self.convs.append((w, b))

    def params(self, prefix: str = "") -> dict[str, Tensor]:
        out = {}
        for i, (w, b) in enumerate(self.convs):
            out[f"{prefix}up{i}.w"] = w
            out[f"{prefix}up{i}.b"] = b
        return out

    def __call__(self, x: FeatureMap) -> list[FeatureMap]:
        levels = []
        fm = x
        for i, (w, b) in enumerate(self.convs):
            factor = 4 if i == 3 else 2
            up = T.upsample_nearest(fm.data, factor)
            z = T.gelu(_conv_bias(up, w, b, stride=1, padding=1))
            fm = FeatureMap(z, fm.stride // factor)
            levels.append(fm)
        return levels  # [/16, /8, /4, /1]


class MaskQueryDecoder:
    """Masked-attention transformer decoder over learned object queries.

    Layer l cross-attends the queries to pyramid level (l mod 3) with the
    previous layer's sigmoid mask prediction gating the attended locations
    (first layer unmasked; a query that would mask out everything attends
    unmasked instead), then runs query self-attention and an FFN.
    """

    def __init__(self, cfg: EncoderConfig, attn: AttentionConfig, rng: np.random.Generator):
        self.cfg = cfg
        cq, ce = cfg.query_channels, cfg.pixel_channels
        self.attn_cfg = attn.for_channels(cq)
        self.queries = T.glorot_uniform(rng, (cfg.num_queries, cq))
        self.layers = []
        for _ in range(cfg.decoder_layers):
            layer = {
                "cross_q": T.glorot_uniform(rng, (cq, cq)),
                "cross_k": T.glorot_uniform(rng, (ce, cq)),
                "cross_v": T.glorot_uniform(rng, (ce, cq)),
                "cross_m": T.glorot_uniform(rng, (cq, cq)),
                "cross_ln_g": Tensor(np.ones(cq), requires_grad=True),
                "cross_ln_b": Tensor(np.zeros(cq), requires_grad=True),
                "self_q": T.glorot_uniform(rng, (cq, cq)),
                "self_k": T.glorot_uniform(rng, (cq, cq)),
                "self_v": T.glorot_uniform(rng, (cq, cq)),
                "self_m": T.glorot_uniform(rng, (cq, cq)),
                "self_ln_g": Tensor(np.ones(cq), requires_grad=True),
                "self_ln_b": Tensor(np.zeros(cq), requires_grad=True),
                "ffn_w1": T.glorot_uniform(rng, (cq, 2 * cq)),
                "ffn_b1": Tensor(np.zeros(2 * cq), requires_grad=True),
                "ffn_w2": T.glorot_uniform(rng, (2 * cq, cq)),
                "ffn_b2": Tensor(np.zeros(cq), requires_grad=True),
                "ffn_ln_g": Tensor(np.ones(cq), requires_grad=True),
                "ffn_ln_b": Tensor(np.zeros(cq), requires_grad=True),
            }
            self.layers.append(layer)

    def params(self, prefix: str = "") -> dict[str, Tensor]:
        out = {f"{prefix}queries": self.queries}
        for li, layer in enumerate(self.layers):
            for name, t in layer.items():
                out[f"{prefix}layer{li}.{name}"] = t
        return out

    def _layer(self, layer: dict, q_rows: Tensor, level_rows: Tensor,
               pos: np.ndarray, attn_bias: Tensor | None) -> Tensor:
        keys_in = level_rows + Tensor(pos)
        cross = scaled_dot_attention(
            q_rows @ layer["cross_q"], keys_in @ layer["cross_k"],
            level_rows @ layer["cross_v"], self.attn_cfg.heads, bias=attn_bias,
        ) @ layer["cross_m"]
        q_rows = T.layer_norm(q_rows + cross, layer["cross_ln_g"], layer["cross_ln_b"], axis=1)
        self_att = scaled_dot_attention(
            q_rows @ layer["self_q"], q_rows @ layer["self_k"],
            q_rows @ layer["self_v"], self.attn_cfg.heads,
        ) @ layer["self_m"]
        q_rows = T.layer_norm(q_rows + self_att, layer["self_ln_g"], layer["self_ln_b"], axis=1)
        ffn = T.gelu(q_rows @ layer["ffn_w1"] + layer["ffn_b1"].reshape(1, -1)) @ layer["ffn_w2"]
        ffn = ffn + layer["ffn_b2"].reshape(1, -1)
        return T.layer_norm(q_rows + ffn, layer["ffn_ln_g"], layer["ffn_ln_b"], axis=1)

    def __call__(self, pyramid: list[FeatureMap], mask_head) -> Tensor:
        """Refine the learned queries against pyramid levels [/16, /8, /4];
        ``mask_head`` maps query rows to mask embeddings for the gates."""
        q_rows = self.queries
        for li, layer in enumerate(self.layers):
            level = pyramid[li % 3]
            rows = fm_rows(level)
            pos = sincos_position_rows(self.cfg.pixel_channels, level.height, level.width)
            bias = None
            if li > 0:
                emb = mask_head(q_rows)                       # (N, C_E)
                logits = (emb @ rows.transpose(1, 0)).data    # gate is non-differentiable
                allowed = 1.0 / (1.0 + np.exp(-logits)) >= 0.5
                allowed[~allowed.any(axis=1)] = True          # all-masked fallback
                bias = Tensor(np.where(allowed, 0.0, -1e30))
            q_rows = self._layer(layer, q_rows, rows, pos, bias)
        return q_rows


class MaskHead:
    """3-layer MLP from query space to the pixel-embedding space."""

    def __init__(self, cfg: EncoderConfig, rng: np.random.Generator):
        cq, ce = cfg.query_channels, cfg.pixel_channels
        self.w1 = T.glorot_uniform(rng, (cq, cq))
        self.b1 = Tensor(np.zeros(cq), requires_grad=True)
        self.w2 = T.glorot_uniform(rng, (cq, cq))
        self.b2 = Tensor(np.zeros(cq), requires_grad=True)
        self.w3 = T.glorot_uniform(rng, (cq, ce))
        self.b3 = Tensor(np.zeros(ce), requires_grad=True)

    def params(self, prefix: str = "") -> dict[str, Tensor]:
        return {f"{prefix}w1": self.w1, f"{prefix}b1": self.b1,
                f"{prefix}w2": self.w2, f"{prefix}b2": self.b2,
                f"{prefix}w3": self.w3, f"{prefix}b3": self.b3}

    def __call__(self, q_rows: Tensor) -> Tensor:
        z = T.gelu(q_rows @ self.w1 + self.b1.reshape(1, -1))
        z = T.gelu(z @ self.w2 + self.b2.reshape(1, -1))
        return z @ self.w3 + self.b3.reshape(1, -1)


class Segmenter:
    """The full detector: encoder, pixel decoder, query decoder, heads."""

    def __init__(self, cfg: EncoderConfig, attn: AttentionConfig,
                 rng: np.random.Generator | int = 0):
        if isinstance(rng, int):
            rng = np.random.default_rng(rng)
        self.cfg = cfg
        self.attn_cfg = attn
        self.encoder = ChartEncoder(cfg, attn, rng)
        self.pixel_decoder = PixelDecoder(cfg, rng)
        self.mask_head = MaskHead(cfg, rng)
        self.query_decoder = MaskQueryDecoder(cfg, attn, rng)
        self.class_w = T.glorot_uniform(rng, (cfg.query_channels, cfg.num_classes + 1))

    def params(self) -> dict[str, Tensor]:
        out = {}
        out.update(self.encoder.params("enc."))
        out.update(self.pixel_decoder.params("pix."))
        out.update(self.mask_head.params("maskmlp."))
        out.update(self.query_decoder.params("qdec."))
        out["class_w"] = self.class_w
        return out

    def encoder_params(self) -> dict[str, Tensor]:
        return self.encoder.params("enc.")

    def forward(self, image: Tensor) -> SegmentationOutput:
        x, _stages = self.encoder(image)
        levels = self.pixel_decoder(x)
        q_rows = self.query_decoder(levels[:3], self.mask_head)
        return self.predict(q_rows, levels[3], self.cfg.mask_threshold)

    def predict(self, q_rows: Tensor, pixel_map: FeatureMap, threshold: float) -> SegmentationOutput:
        if not (0.0 <= threshold <= 1.0):
            raise SegmenterError("mask threshold must lie in [0, 1]")
        h, w = pixel_map.height, pixel_map.width
        class_logits = q_rows @ self.class_w
        class_probs = T.softmax(class_logits, axis=1)
        emb = self.mask_head(q_rows)
        logits = emb @ fm_rows(pixel_map).transpose(1, 0)   # (N, HW)
        probs = 1.0 / (1.0 + np.exp(-logits.data))
        binary = (probs - threshold) > 0.0                   # step at t
        masks = binary.reshape(-1, h, w)
        boxes = [bbox_from_mask(m) if m.any() else None for m in masks]
        return SegmentationOutput(
            class_probs=class_probs.data, masks=masks, boxes=boxes,
            mask_probs=probs.reshape(-1, h, w), class_logits=class_logits,
            mask_logits=logits, query_embeddings=q_rows,
            pixel_embedding=fm_rows(pixel_map), mask_embeddings=emb,
        )


# -- Hungarian matching --------------------------------------------------------


def _kuhn_munkres(cost: np.ndarray) -> list[int]:
    """Minimum-cost perfect matching on a square matrix (potentials +
    shortest augmenting paths); returns column of each row."""
    n = cost.shape[0]
    INF = float("inf")
    u = [0.0] * (n + 1)
    v = [0.0] * (n + 1)
    p = [0] * (n + 1)       # p[j]: row matched to column j
    way = [0] * (n + 1)
    for i in range(1, n + 1):
        p[0] = i
        j0 = 0
        minv = [INF] * (n + 1)
        used = [False] * (n + 1)
        while True:
            used[j0] = True
            i0 = p[j0]
            delta = INF
            j1 = 0
            row = cost[i0 - 1]
            for j in range(1, n + 1):
                if not used[j]:
                    cur = row[j - 1] - u[i0] - v[j]
                    if cur < minv[j]:
                        minv[j] = cur
                        way[j] = j0
                    if minv[j] < delta:
                        delta = minv[j]
                        j1 = j
            for j in range(n + 1):
                if used[j]:
                    u[p[j]] += delta
                    v[j] -= delta
                else:
                    minv[j] -= delta
            j0 = j1
            if p[j0] == 0:
                break
        while j0:
            j1 = way[j0]
            p[j0] = p[j1]
            j0 = j1
    cols = [0] * n
    for j in range(1, n + 1):
        if p[j]:
            cols[p[j] - 1] = j - 1
    return cols


def _assignment_cost(costs: np.ndarray, num_real_cols: int) -> tuple[float, list[tuple[int, int]]]:
    n, g = costs.shape
    padded = np.zeros((n, n))
    padded[:, :g] = costs
    cols = _kuhn_munkres(padded)
    pairs = sorted((r, c) for r, c in enumerate(cols) if c < num_real_cols)
    total = float(sum(costs[r, c] for r, c in pairs))
    return total, pairs


def hungarian_match(costs: np.ndarray) -> list[tuple[int, int]]:
    """Minimum-cost one-to-one assignment of G ground truths to N >= G
    predictions; returns (prediction, ground-truth) pairs sorted by
    ground-truth index. Ties resolve to the lowest prediction index per
    ground truth, in ground-truth order.
    """
    costs = np.asarray(costs, dtype=np.float64)
    if costs.ndim != 2:
        raise SegmenterError(f"cost matrix must be 2-d, got {costs.shape}")
    n, g = costs.shape
    if n < g:
        raise SegmenterError(f"need at least as many predictions as ground truths ({n} < {g})")
    if not np.isfinite(costs).all():
        raise SegmenterError("costs must be finite")
    if g == 0:
        return []
    best, pairs = _assignment_cost(costs, g)
    if np.unique(costs).size == costs.size:
        return sorted(pairs, key=lambda rc: rc[1])
    # duplicate costs: canonicalize to the lexicographically smallest
    # optimal assignment (lowest prediction index per ground truth in order)
    tol = 1e-9 * max(1.0, abs(best))
    chosen: list[tuple[int, int]] = []
    free_rows = list(range(n))
    for col in range(g):
        for row in free_rows:
            fixed = sum(c for _, _, c in chosen) + costs[row, col]
            rest_rows = [r for r in free_rows if r != row]
            rest_cols = list(range(col + 1, g))
            if rest_cols:
                sub = costs[np.ix_(rest_rows, rest_cols)]
                rest, _ = _assignment_cost(sub, len(rest_cols))
            else:
                rest = 0.0
            if abs(fixed + rest - best) <= tol:
                chosen.append((row, col, costs[row, col]))
                free_rows.remove(row)
                break
    return [(r, c) for r, c, _ in chosen]


def brute_force_min_cost(costs: np.ndarray) -> float:
    """Exhaustive minimum over all injections of ground truths into
    predictions; oracle-side helper for tests."""
    n, g = costs.shape
    best = float("inf")
    for rows in itertools.permutations(range(n), g):
        best = min(best, sum(costs[r, c] for c, r in enumerate(rows)))
    return best


# -- losses -----------------------------------------------------------------------


@dataclass(frozen=True)
class LossWeights:
    classification: float = 2.0
    focal: float = 5.0
    dice: float = 5.0
    no_object: float = 0.1
    focal_gamma: float = 2.0
    focal_alpha: float = 0.25


def _pairwise_cost(class_probs: np.ndarray, mask_logits: np.ndarray,
                   gt_masks: np.ndarray, gt_labels: np.ndarray,
                   w: LossWeights) -> np.ndarray:
    """(N, G) composite matching cost, computed on detached values."""
    n, hw = mask_logits.shape
    g = gt_masks.shape[0]
    gt_flat = gt_masks.reshape(g, hw).astype(np.float64)
    p = 1.0 / (1.0 + np.exp(-mask_logits))
    logp = np.log(np.clip(p, 1e-300, None))
    log1mp = np.log(np.clip(1.0 - p, 1e-300, None))
    f_pos = -w.focal_alpha * (1.0 - p) ** w.focal_gamma * logp
    f_neg = -(1.0 - w.focal_alpha) * p ** w.focal_gamma * log1mp
    focal = (f_pos @ gt_flat.T + f_neg @ (1.0 - gt_flat).T) / hw
    inter = p @ gt_flat.T
    dice = 1.0 - 2.0 * inter / (p.sum(axis=1, keepdims=True) + gt_flat.sum(axis=1)[None, :] + 1e-8)
    cls = -class_probs[:, gt_labels]
    return w.classification * cls + w.focal * focal + w.dice * dice


def focal_loss(mask_logits: Tensor, gt_flat: np.ndarray, w: LossWeights) -> Tensor:
    """Sigmoid focal loss, mean over pixels then over pairs; stable via
    log-sigmoid."""
    g = Tensor(gt_flat.astype(np.float64))
    p_neg = T.sigmoid(-mask_logits)       # 1 - p
    p_pos = T.sigmoid(mask_logits)
    pos = g * (p_neg ** w.focal_gamma) * T.log_sigmoid(mask_logits) * (-w.focal_alpha)
    neg = (1.0 - g) * (p_pos ** w.focal_gamma) * T.log_sigmoid(-mask_logits) * (-(1.0 - w.focal_alpha))
    return (pos + neg).mean(axis=1).mean()


def dice_loss(mask_logits: Tensor, gt_flat: np.ndarray) -> Tensor:
    p = T.sigmoid(mask_logits)
    g = Tensor(gt_flat.astype(np.float64))
    inter = (p * g).sum(axis=1)
    denom = p.sum(axis=1) + Tensor(gt_flat.sum(axis=1)) + 1e-8
    return (1.0 - 2.0 * inter / denom).mean()


def segmentation_loss(output: SegmentationOutput, gt_masks: np.ndarray,
                      gt_labels: np.ndarray, weights: LossWeights = LossWeights()):
    """Hungarian-matched focal + dice mask loss plus class cross-entropy
    with unmatched queries assigned the no-object slot at reduced weight.

    Returns (scalar loss Tensor, matched (query, gt) pairs).
    """
    n = output.class_probs.shape[0]
    num_classes = output.class_probs.shape[1] - 1
    hw = output.mask_logits.shape[1]
    g = gt_masks.shape[0]
    if g == 0:
        log_probs = T.log_softmax(output.class_logits, axis=1)
        nll = -log_probs[:, num_classes]
        return weights.classification * weights.no_object * nll.mean(), []
    costs = _pairwise_cost(output.class_probs, output.mask_logits.data,
                           gt_masks, gt_labels, weights)
    pairs = hungarian_match(costs)
    rows = np.array([r for r, _ in pairs])
    cols = np.array([c for _, c in pairs])

    gt_flat = gt_masks.reshape(g, hw)[cols]
    matched_logits = T.take(output.mask_logits, rows)
    loss_focal = focal_loss(matched_logits, gt_flat, weights)
    loss_dice = dice_loss(matched_logits, gt_flat)

    target = np.full(n, num_classes, dtype=np.int64)
    target[rows] = gt_labels[cols]
    ce_weights = np.full(n, weights.no_object)
    ce_weights[rows] = 1.0
    log_probs = T.log_softmax(output.class_logits, axis=1)
    nll = -log_probs[np.arange(n), target]
    loss_cls = (nll * Tensor(ce_weights)).sum() * (1.0 / n)

    total = (weights.classification * loss_cls
             + weights.focal * loss_focal + weights.dice * loss_dice)
    return total, pairs


# -- optimization ---------------------------------------------------------------


class MomentumSGD:
    """Gradient descent with classical momentum; deterministic given the
    parameter ordering."""

    def __init__(self, params: dict[str, Tensor], step_size: float, momentum: float = 0.9):
        self.params = params
        self.step_size = step_size
        self.momentum = momentum
        self.velocity = {k: np.zeros(p.shape) for k, p in params.items()}

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.zero_grad()

    def step(self) -> None:
        for name, p in self.params.items():
            if p.grad is None:
                continue
            v = self.velocity[name]
            v *= self.momentum
            v += p.grad
            p.data -= self.step_size * v


def train_step(model: Segmenter, batch: list[tuple[np.ndarray, np.ndarray, np.ndarray]],
               opt: MomentumSGD, weights: LossWeights = LossWeights()) -> float:
    """One optimization step over a batch of (image, gt_masks, gt_labels).

    Aggregates per-image losses in batch order (deterministic reduction),
    then applies the momentum update. Aborts on a non-finite loss.
    """
    opt.zero_grad()
    total = None
    for image, gt_masks, gt_labels in batch:
        out = model.forward(Tensor(image))
        loss, _ = segmentation_loss(out, gt_masks, gt_labels, weights)
        total = loss if total is None else total + loss
    total = total * (1.0 / len(batch))
    value = total.item()
    if not np.isfinite(value):
        raise RuntimeError(f"non-finite training loss: {value}")
    T.backward(total)
    opt.step()
    return value


# -- inference and serialization --------------------------------------------------


def rle_encode(mask: np.ndarray) -> dict:
    """Uncompressed row-major run lengths, starting with a background run."""
    flat = np.asarray(mask, dtype=bool).reshape(-1)
    counts = []
    current, run = False, 0
    for bit in flat:
        if bit == current:
            run += 1
        else:
            counts.append(run)
            current, run = bit, 1
    counts.append(run)
    return {"size": [int(mask.shape[0]), int(mask.shape[1])], "counts": counts}


def rle_decode(rle: dict) -> np.ndarray:
    h, w = rle["size"]
    flat = np.zeros(h * w, dtype=bool)
    pos, value = 0, False
    for run in rle["counts"]:
        if value:
            flat[pos:pos + run] = True
        pos += run
        value = not value
    return flat.reshape(h, w)


def detections_from_output(output: SegmentationOutput) -> list[dict]:
    """Queries with non-empty masks become detections scored by their best
    real-class probability."""
    num_classes = output.class_probs.shape[1] - 1
    dets = []
    for qi in range(output.class_probs.shape[0]):
        if not output.masks[qi].any():
            continue
        real = output.class_probs[qi, :num_classes]
        cat = int(np.argmax(real))
        x0, y0, x1, y1 = output.boxes[qi]
        dets.append({
            "category_id": cat + 1,
            "score": float(real[cat]),
            "rle": rle_encode(output.masks[qi]),
            "bbox": [x0, y0, x1 - x0 + 1, y1 - y0 + 1],
        })
    return dets


def save_checkpoint(path, model: Segmenter) -> None:
    T.save_tensors(path, model.params())
    meta = {"encoder": asdict(model.cfg), "attention": asdict(model.attn_cfg)}
    with open(str(path) + ".json", "w", encoding="utf-8") as fh:
        json.dump(meta, fh, sort_keys=True, indent=1)


def load_checkpoint(path) -> Segmenter:
    with open(str(path) + ".json", "r", encoding="utf-8") as fh:
        meta = json.load(fh)
    enc = meta["encoder"]
    enc["stage_depths"] = tuple(enc["stage_depths"])
    model = Segmenter(EncoderConfig(**enc), AttentionConfig(**meta["attention"]),
                      np.random.default_rng(0))
    stored = T.load_tensors(path)
    params = model.params()
    if sorted(stored) != sorted(params):
        raise SegmenterError("checkpoint parameter names do not match the model")
    for name, arr in stored.items():
        if params[name].shape != arr.shape:
            raise SegmenterError(f"checkpoint shape mismatch for {name}")
        params[name].data = arr.copy()
    return model
