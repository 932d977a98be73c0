"""Chart question answering: a frozen chart encoder and a trainable vision
encoder fused by question-guided deformable co-attention, feeding a small
autoregressive text decoder.

The chart encoder comes from a segmentation checkpoint and stays frozen
(its gradients are never materialized). The pretrained external encoder
and embedder the full-scale system would use are replaced at desk scale by
a windowed-local-attention encoder and a trainable token table; parity
mode accepts precomputed question embeddings / vision features from
checkpoint files instead.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, asdict, field

import numpy as np

from . import tensor as T
from .attention import (
    AttentionConfig,
    CoAttentionFusionBlock,
    deformable_sample,
    fm_rows,
    rows_fm,
    scaled_dot_attention,
)
from .segmenter import (
    ChartEncoder,
    EncoderConfig,
    MomentumSGD,
    load_checkpoint,
    sincos_position_rows,
)
from .tensor import FeatureMap, Tensor

PAD, PROMPT_TASK, PROMPT_ANSWER, EOS, UNK = "<pad>", "<chartvqa>", "<s_answer>", "<eos>", "<unk>"
SPECIAL_TOKENS = (PAD, PROMPT_TASK, PROMPT_ANSWER, EOS, UNK)

FUSION_MODES = ("qdcat", "qdcat_minus_qon", "concat", "concat_cnn")


class QAError(ValueError):
    """Rejected input or configuration in the QA pipeline."""


@dataclass(frozen=True)
class QAConfig:
    fusion_mode: str = "qdcat"
    decoder_dim: int = 64
    decoder_layers: int = 2
    decoder_heads: int = 4
    max_answer_tokens: int = 16
    question_embeddings_path: str | None = None   # parity mode: external z
    vision_features_path: str | None = None       # parity mode: external y

    def __post_init__(self):
        if self.fusion_mode not in FUSION_MODES:
            raise QAError(f"unknown fusion mode {self.fusion_mode!r}; pick one of {FUSION_MODES}")
        if self.decoder_dim % self.decoder_heads:
            raise QAError("decoder_dim must divide by decoder_heads")


@dataclass
class QASample:
    image: np.ndarray            # (3, H, W) in [0, 1]
    question: str
    answer: str
    sample_id: str = ""
    question_ids: list[int] = field(default_factory=list)
    answer_ids: list[int] = field(default_factory=list)


def tokenize(text: str) -> list[str]:
    out = []
    for raw in text.lower().split():
        token = raw.strip("?,.!:;\"'()")
        if token:
            out.append(token)
    return out


class Vocabulary:
    """Toy token table: specials first, then sorted corpus words."""

    def __init__(self, words: list[str]):
        self.tokens = list(SPECIAL_TOKENS) + sorted(set(words) - set(SPECIAL_TOKENS))
        self.index = {t: i for i, t in enumerate(self.tokens)}

    @classmethod
    def from_texts(cls, texts: list[str]) -> "Vocabulary":
        words: list[str] = []
        for text in texts:
            words.extend(tokenize(text))
        return cls(words)

    def __len__(self) -> int:
        return len(self.tokens)

    def encode(self, text: str) -> list[int]:
        return [self.index.get(t, self.index[UNK]) for t in tokenize(text)]

    def decode(self, ids: list[int]) -> str:
        words = [self.tokens[i] for i in ids
                 if 0 <= i < len(self.tokens) and self.tokens[i] not in SPECIAL_TOKENS]
        return " ".join(words)

    def to_json(self) -> str:
        return json.dumps(self.tokens)

    @classmethod
    def from_json(cls, text: str) -> "Vocabulary":
        vocab = cls([])
        vocab.tokens = json.loads(text)
        vocab.index = {t: i for i, t in enumerate(vocab.tokens)}
        return vocab


def interpolate_rows(rows: Tensor, target_len: int) -> Tensor:
    """Linearly resample a (L, D) sequence to exactly target_len rows."""
    length = rows.shape[0]
    if length == target_len:
        return rows
    if length == 1:
        return T.take(rows, np.zeros(target_len, dtype=np.int64))
    pos = np.arange(target_len) * (length - 1) / (target_len - 1)
    lo = np.floor(pos).astype(np.int64)
    lo = np.minimum(lo, length - 2)
    frac = (pos - lo)[:, None]
    return T.take(rows, lo) * (1.0 - frac) + T.take(rows, lo + 1) * frac


class TextDecoder:
    """Autoregressive transformer decoder over the toy vocabulary: causal
    self-attention, cross-attention to the fused image feature, FFN."""

    def __init__(self, vocab_size: int, cfg: QAConfig, rng: np.random.Generator,
                 max_len: int = 32):
        d = cfg.decoder_dim
        self.cfg = cfg
        self.token_embed = T.glorot_uniform(rng, (vocab_size, d))
        self.pos_embed = T.glorot_uniform(rng, (max_len, d))
        self.layers = []
        for _ in range(cfg.decoder_layers):
            self.layers.append({
                "self_q": T.glorot_uniform(rng, (d, d)),
                "self_k": T.glorot_uniform(rng, (d, d)),
                "self_v": T.glorot_uniform(rng, (d, d)),
                "self_m": T.glorot_uniform(rng, (d, d)),
                "ln1_g": Tensor(np.ones(d), requires_grad=True),
                "ln1_b": Tensor(np.zeros(d), requires_grad=True),
                "cross_q": T.glorot_uniform(rng, (d, d)),
                "cross_k": T.glorot_uniform(rng, (d, d)),
                "cross_v": T.glorot_uniform(rng, (d, d)),
                "cross_m": T.glorot_uniform(rng, (d, d)),
                "ln2_g": Tensor(np.ones(d), requires_grad=True),
                "ln2_b": Tensor(np.zeros(d), requires_grad=True),
                "ffn_w1": T.glorot_uniform(rng, (d, 2 * d)),
                "ffn_b1": Tensor(np.zeros(2 * d), requires_grad=True),
                "ffn_w2": T.glorot_uniform(rng, (2 * d, d)),
                "ffn_b2": Tensor(np.zeros(d), requires_grad=True),
                "ln3_g": Tensor(np.ones(d), requires_grad=True),
                "ln3_b": Tensor(np.zeros(d), requires_grad=True),
            })
        self.out_w = T.glorot_uniform(rng, (d, vocab_size))

    def params(self, prefix: str = "") -> dict[str, Tensor]:
        out = {f"{prefix}token_embed": self.token_embed, f"{prefix}pos_embed": self.pos_embed,
               f"{prefix}out_w": self.out_w}
        for li, layer in enumerate(self.layers):
            for name, t in layer.items():
                out[f"{prefix}layer{li}.{name}"] = t
        return out

    def logits(self, token_ids: np.ndarray, memory_rows: Tensor,
               memory_pos: np.ndarray) -> Tensor:
        n = len(token_ids)
        h = T.take(self.token_embed, np.asarray(token_ids, dtype=np.int64))
        h = h + self.pos_embed[0:n, :]
        causal = Tensor(np.triu(np.full((n, n), -1e30), k=1))
        keys = memory_rows + Tensor(memory_pos)
        heads = self.cfg.decoder_heads
        for layer in self.layers:
            att = scaled_dot_attention(h @ layer["self_q"], h @ layer["self_k"],
                                       h @ layer["self_v"], heads, bias=causal) @ layer["self_m"]
            h = T.layer_norm(h + att, layer["ln1_g"], layer["ln1_b"], axis=1)
            cross = scaled_dot_attention(h @ layer["cross_q"], keys @ layer["cross_k"],
                                         memory_rows @ layer["cross_v"], heads) @ layer["cross_m"]
            h = T.layer_norm(h + cross, layer["ln2_g"], layer["ln2_b"], axis=1)
            ffn = T.gelu(h @ layer["ffn_w1"] + layer["ffn_b1"].reshape(1, -1)) @ layer["ffn_w2"]
            h = T.layer_norm(h + ffn + layer["ffn_b2"].reshape(1, -1),
                             layer["ln3_g"], layer["ln3_b"], axis=1)
        return h @ self.out_w


class QAModel:
    """Frozen chart encoder + trainable vision encoder + fusion + decoder."""

    def __init__(self, segmenter, qa_cfg: QAConfig, attn_cfg: AttentionConfig,
                 vocab: Vocabulary, rng: np.random.Generator | int = 0):
        if isinstance(rng, int):
            rng = np.random.default_rng(rng)
        self.cfg = qa_cfg
        self.vocab = vocab
        enc_cfg: EncoderConfig = segmenter.cfg
        self.enc_cfg = enc_cfg
        width = enc_cfg.base_channels * 8
        self.attn_cfg = attn_cfg.for_channels(width)

        # chart encoder: adopt the checkpoint weights and freeze them
        self.chart_encoder = segmenter.encoder
        for p in self.chart_encoder.params().values():
            p.requires_grad = False

        self.vision_encoder = ChartEncoder(enc_cfg, attn_cfg, rng, deformable=False)
        self.vision_proj_w = T.glorot_uniform(rng, (width, width))
        self.vision_proj_b = Tensor(np.zeros(width), requires_grad=True)

        self.question_embed = T.glorot_uniform(rng, (len(vocab), self.attn_cfg.question_dim))
        self.fusion = CoAttentionFusionBlock(width, qa_cfg.decoder_dim, self.attn_cfg, rng)
        self.concat_proj = T.glorot_uniform(rng, (2 * width, qa_cfg.decoder_dim))
        self.concat_conv_w = T.glorot_uniform(rng, (2 * width, 2 * width, 3, 3))
        self.concat_conv_b = Tensor(np.zeros(2 * width), requires_grad=True)
        self.decoder = TextDecoder(len(vocab), qa_cfg, rng)

        self._external_z = (T.load_tensors(qa_cfg.question_embeddings_path)
                            if qa_cfg.question_embeddings_path else None)
        self._external_y = (T.load_tensors(qa_cfg.vision_features_path)
                            if qa_cfg.vision_features_path else None)

    # -- parameter groups ---------------------------------------------------

    def trainable_params(self) -> dict[str, Tensor]:
        out = {}
        out.update(self.vision_encoder.params("vis."))
        out["vis_proj.w"] = self.vision_proj_w
        out["vis_proj.b"] = self.vision_proj_b
        out["question_embed"] = self.question_embed
        out.update(self.fusion.params("fuse."))
        out["concat.proj"] = self.concat_proj
        out["concat.conv_w"] = self.concat_conv_w
        out["concat.conv_b"] = self.concat_conv_b
        out.update(self.decoder.params("dec."))
        return out

    def frozen_params(self) -> dict[str, Tensor]:
        return self.chart_encoder.params("enc.")

    # -- encoders -------------------------------------------------------------

    def chart_encode(self, image: np.ndarray) -> FeatureMap:
        fm, _ = self.chart_encoder(Tensor(image))
        return fm

    def vision_encode(self, image: np.ndarray, sample_id: str = "") -> FeatureMap:
        if self._external_y is not None:
            key = f"y:{sample_id}"
            if key not in self._external_y:
                raise QAError(f"vision feature {key!r} missing from parity file")
            data = Tensor(self._external_y[key])
            fm = FeatureMap(data, 32)
        else:
            fm, _ = self.vision_encoder(Tensor(image))
        rows = fm_rows(fm) @ self.vision_proj_w + self.vision_proj_b.reshape(1, -1)
        return rows_fm(rows, fm.height, fm.width, fm.stride)

    def normalize_question(self, token_ids: list[int], sample_id: str = "") -> Tensor:
        """Embed the question and linearly interpolate it to the fixed
        token length the offset network expects."""
        t_q = self.attn_cfg.question_len
        if self._external_z is not None:
            key = f"z:{sample_id}"
            if key not in self._external_z:
                raise QAError(f"question embedding {key!r} missing from parity file")
            rows = Tensor(self._external_z[key])
        else:
            if len(token_ids) == 0:
                raise QAError("empty question")
            if len(token_ids) > 4 * t_q:
                raise QAError(f"question longer than {4 * t_q} tokens")
            rows = T.take(self.question_embed, np.asarray(token_ids, dtype=np.int64))
        return interpolate_rows(rows, t_q)

    # -- fusion -----------------------------------------------------------------

    def fuse(self, x: FeatureMap, y: FeatureMap, z: Tensor,
             mode: str | None = None) -> FeatureMap:
        mode = mode or self.cfg.fusion_mode
        if mode not in FUSION_MODES:
            raise QAError(f"unknown fusion mode {mode!r}")
        if mode == "qdcat":
            return self.fusion(x, y, z, use_sampling=True)
        if mode == "qdcat_minus_qon":
            return self.fusion(x, y, z, use_sampling=False)
        # concat ablations keep the question-guided sampling of x
        offsets = self.fusion.attention.offsets(x, z)
        sampled = deformable_sample(x, offsets, self.attn_cfg.sample_stride)
        both = T.concat([sampled, fm_rows(y)], axis=1)
        if mode == "concat_cnn":
            c2 = both.shape[1]
            both_map = rows_fm(both, y.height, y.width, y.stride).data
            conv = T.conv2d(both_map, self.concat_conv_w, stride=1, padding=1)
            conv = conv + self.concat_conv_b.reshape(c2, 1, 1)
            both = fm_rows(FeatureMap(conv, y.stride))
        out = both @ self.concat_proj
        return rows_fm(out, y.height, y.width, y.stride)

    def fused_feature(self, sample: QASample, mode: str | None = None) -> FeatureMap:
        x = self.chart_encode(sample.image)
        y = self.vision_encode(sample.image, sample.sample_id)
        z = self.normalize_question(sample.question_ids, sample.sample_id)
        return self.fuse(x, y, z, mode)

    # -- decoding ------------------------------------------------------------------

    def _memory(self, o: FeatureMap) -> tuple[Tensor, np.ndarray]:
        rows = fm_rows(o)
        pos = sincos_position_rows(self.cfg.decoder_dim, o.height, o.width)
        return rows, pos

    def answer_logits(self, o: FeatureMap, token_ids: list[int]) -> Tensor:
        rows, pos = self._memory(o)
        return self.decoder.logits(np.asarray(token_ids), rows, pos)

    def decode_answer(self, o: FeatureMap) -> str:
        """Greedy decoding from the task prompt until <eos> or the token cap."""
        prompt = [self.vocab.index[PROMPT_TASK], self.vocab.index[PROMPT_ANSWER]]
        ids = list(prompt)
        for _ in range(self.cfg.max_answer_tokens):
            logits = self.answer_logits(o, ids)
            nxt = int(np.argmax(logits.data[-1]))
            if nxt == self.vocab.index[EOS]:
                break
            ids.append(nxt)
        return self.vocab.decode(ids[len(prompt):])

    def answer(self, sample: QASample, mode: str | None = None) -> str:
        return self.decode_answer(self.fused_feature(sample, mode))


# -- training ------------------------------------------------------------------------


def sample_loss(model: QAModel, sample: QASample, mode: str | None = None) -> Tensor:
    """Next-token cross-entropy over the answer tokens plus the end token."""
    o = model.fused_feature(sample, mode)
    prompt = [model.vocab.index[PROMPT_TASK], model.vocab.index[PROMPT_ANSWER]]
    answer = list(sample.answer_ids)
    ids = prompt + answer
    targets = answer + [model.vocab.index[EOS]]
    logits = model.answer_logits(o, ids)
    log_probs = T.log_softmax(logits, axis=1)
    picked = log_probs[np.arange(len(prompt) - 1, len(ids)), np.asarray(targets)]
    return -picked.mean()


def qa_train_step(model: QAModel, batch: list[QASample], opt: MomentumSGD,
                  mode: str | None = None) -> float:
    """One step over a batch; only the trainable groups update, the chart
    encoder never sees a gradient."""
    opt.zero_grad()
    total = None
    for sample in batch:
        loss = sample_loss(model, sample, mode)
        total = loss if total is None else total + loss
    total = total * (1.0 / len(batch))
    value = total.item()
    if not np.isfinite(value):
        raise RuntimeError(f"non-finite QA loss: {value}")
    T.backward(total)
    opt.step()
    return value


def dump_deformed_points(model: QAModel, sample: QASample, image_name: str = "") -> dict:
    """Question-guided sample points (reference grid + offsets) mapped to
    input-image coordinates."""
    x = model.chart_encode(sample.image)
    z = model.normalize_question(sample.question_ids, sample.sample_id)
    offsets = model.fusion.attention.offsets(x, z)
    from .attention import reference_grid

    grid = reference_grid(x.height, x.width, model.attn_cfg.sample_stride)
    pts = grid + offsets.data
    pts[:, 0] = np.clip(pts[:, 0], 0.0, x.height - 1.0)
    pts[:, 1] = np.clip(pts[:, 1], 0.0, x.width - 1.0)
    stride = float(x.stride)
    xy = np.stack([(pts[:, 1] + 0.5) * stride, (pts[:, 0] + 0.5) * stride], axis=1)
    h_img, w_img = sample.image.shape[1], sample.image.shape[2]
    xy[:, 0] = np.clip(xy[:, 0], 0.0, w_img - 1.0)
    xy[:, 1] = np.clip(xy[:, 1], 0.0, h_img - 1.0)
    return {"image": image_name, "points": [[float(a), float(b)] for a, b in xy],
            "grid": [x.height, x.width]}


# -- assembly ------------------------------------------------------------------------


def build_qa_model(seg_checkpoint_path, qa_cfg: QAConfig, vocab: Vocabulary,
                   seed: int = 0) -> QAModel:
    segmenter = load_checkpoint(seg_checkpoint_path)
    return QAModel(segmenter, qa_cfg, segmenter.attn_cfg, vocab,
                   np.random.default_rng(seed))


def save_qa_checkpoint(path, model: QAModel) -> None:
    tensors = dict(model.trainable_params())
    tensors.update(model.frozen_params())
    T.save_tensors(path, tensors)
    meta = {"qa": asdict(model.cfg), "encoder": asdict(model.enc_cfg),
            "attention": asdict(model.attn_cfg), "vocab": model.vocab.tokens}
    with open(str(path) + ".json", "w", encoding="utf-8") as fh:
        json.dump(meta, fh, sort_keys=True, indent=1)


def load_qa_checkpoint(path) -> QAModel:
    from .segmenter import Segmenter

    with open(str(path) + ".json", "r", encoding="utf-8") as fh:
        meta = json.load(fh)
    enc = meta["encoder"]
    enc["stage_depths"] = tuple(enc["stage_depths"])
    vocab = Vocabulary([])
    vocab.tokens = meta["vocab"]
    vocab.index = {t: i for i, t in enumerate(vocab.tokens)}
    segmenter = Segmenter(EncoderConfig(**enc), AttentionConfig(**meta["attention"]))
    model = QAModel(segmenter, QAConfig(**meta["qa"]), AttentionConfig(**meta["attention"]),
                    vocab, np.random.default_rng(0))
    stored = T.load_tensors(path)
    params = dict(model.trainable_params())
    params.update(model.frozen_params())
    if sorted(stored) != sorted(params):
        raise QAError("QA checkpoint parameter names do not match the model")
    for name, arr in stored.items():
        params[name].data = arr.copy()
    return model
