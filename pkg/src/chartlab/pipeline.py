"""End-to-end pipeline stages shared by the CLI and the acceptance suite:
dataset loading, training loops with periodic training-set evaluation and
early stop, inference dumps, metric reports, and the gradient-check suite.
"""

from __future__ import annotations

import json
import time
from pathlib import Path

import numpy as np

from . import metrics as M
from . import qa as Q
from . import tensor as T
from .attention import (
    AttentionConfig,
    CoAttentionFusionBlock,
    DeformableAttention,
    DeformableCoAttention,
    NeighborhoodAttention,
    OffsetNetwork,
    QuestionGuidedOffsets,
    deformable_sample,
    fm_rows,
)
from .config import RunConfig
from .geometry import CATEGORIES, PolygonAnnotation, rasterize
from .metrics import Detection, GroundTruth
from .qa import QAModel, QASample, Vocabulary, qa_train_step, sample_loss
from .segmenter import (
    EncoderConfig,
    LossWeights,
    MomentumSGD,
    Segmenter,
    detections_from_output,
    dice_loss,
    focal_loss,
    rle_decode,
    save_checkpoint,
    segmentation_loss,
    sincos_position_rows,
    train_step,
)
from .synth import load_image
from .tensor import FeatureMap, Tensor

CATEGORY_NAMES = {i + 1: name for i, name in enumerate(CATEGORIES)}


# -- dataset loading -----------------------------------------------------------


def load_seg_dataset(data_dir) -> list[dict]:
    """instances.json + images -> per-image arrays, masks, and labels."""
    root = Path(data_dir)
    data = json.loads((root / "instances.json").read_text(encoding="utf-8"))
    by_image: dict[int, list[dict]] = {}
    for ann in data["annotations"]:
        by_image.setdefault(ann["image_id"], []).append(ann)
    dataset = []
    for img in data["images"]:
        h, w = img["height"], img["width"]
        image = load_image(root / img["file_name"])
        anns = by_image.get(img["id"], [])
        masks = np.zeros((len(anns), h, w), dtype=bool)
        labels = np.zeros(len(anns), dtype=np.int64)
        for i, ann in enumerate(anns):
            poly = PolygonAnnotation("Bar", ann["polygon"], (h, w))
            masks[i] = rasterize(poly, (h, w))
            labels[i] = ann["category_id"] - 1
        keep = masks.any(axis=(1, 2))
        dataset.append({"image_id": img["id"], "image": image,
                        "masks": masks[keep], "labels": labels[keep]})
    return dataset


def load_qa_samples(data_dir, vocab: Vocabulary | None = None) -> tuple[list[QASample], Vocabulary]:
    root = Path(data_dir)
    entries = json.loads((root / "qa_dataset.json").read_text(encoding="utf-8"))
    if vocab is None:
        vocab = Vocabulary.from_texts([e["question"] for e in entries]
                                      + [e["answer"] for e in entries])
    samples = []
    cache: dict[str, np.ndarray] = {}
    for i, e in enumerate(entries):
        if e["image"] not in cache:
            cache[e["image"]] = load_image(root / e["image"])
        sample = QASample(image=cache[e["image"]], question=e["question"],
                          answer=e["answer"], sample_id=f"{i}")
        sample.question_ids = vocab.encode(e["question"])
        sample.answer_ids = vocab.encode(e["answer"])
        samples.append(sample)
    return samples, vocab


# -- segmentation ----------------------------------------------------------------


def evaluate_segmentation(model: Segmenter, dataset: list[dict]) -> M.EvalReport:
    dets, gts = [], []
    for entry in dataset:
        out = model.forward(Tensor(entry["image"]))
        for d in detections_from_output(out):
            dets.append(Detection(entry["image_id"], d["category_id"], d["score"],
                                  rle_decode(d["rle"])))
        for mask, label in zip(entry["masks"], entry["labels"]):
            gts.append(GroundTruth(entry["image_id"], int(label) + 1, mask))
    return M.map_suite(dets, gts, CATEGORY_NAMES)


def train_segmentation(dataset: list[dict], cfg: RunConfig, log=None) -> dict:
    """Seeded training loop; evaluates training-set mAP50 every
    ``eval_every`` steps and stops early once the target holds."""
    model = Segmenter(cfg.encoder, cfg.attention, np.random.default_rng(cfg.seed))
    tcfg = cfg.seg_train
    opt = MomentumSGD(model.params(), tcfg.step_size, tcfg.momentum)
    order_rng = np.random.default_rng(cfg.seed + 1)
    weights = tcfg.loss_weights()
    losses: list[float] = []
    evals: list[dict] = []
    start = time.time()
    for step in range(1, tcfg.steps + 1):
        idx = order_rng.integers(0, len(dataset), size=min(tcfg.batch_size, len(dataset)))
        batch = [(dataset[i]["image"], dataset[i]["masks"], dataset[i]["labels"]) for i in idx]
        losses.append(train_step(model, batch, opt, weights))
        if step % tcfg.eval_every == 0 or step == tcfg.steps:
            report = evaluate_segmentation(model, dataset)
            evals.append({"step": step, "map50": report.map50, "map": report.map,
                          "loss": losses[-1], "elapsed_s": round(time.time() - start, 1)})
            if log:
                log(f"step {step}: loss {losses[-1]:.4f} train mAP50 {report.map50:.3f}")
            if tcfg.early_stop and report.map50 >= tcfg.target_map50:
                break
    return {"model": model, "losses": losses, "evals": evals}


def seg_inference(model: Segmenter, dataset: list[dict]) -> dict:
    images = []
    for entry in dataset:
        out = model.forward(Tensor(entry["image"]))
        images.append({"image_id": entry["image_id"],
                       "detections": detections_from_output(out)})
    return {"images": images}


def load_predictions(pred_path) -> list[Detection]:
    data = json.loads(Path(pred_path).read_text(encoding="utf-8"))
    dets = []
    for img in data["images"]:
        for d in img["detections"]:
            dets.append(Detection(img["image_id"], d["category_id"], d["score"],
                                  rle_decode(d["rle"])))
    return dets


def load_ground_truth(instances_path) -> list[GroundTruth]:
    data = json.loads(Path(instances_path).read_text(encoding="utf-8"))
    sizes = {img["id"]: (img["height"], img["width"]) for img in data["images"]}
    gts = []
    for ann in data["annotations"]:
        h, w = sizes[ann["image_id"]]
        mask = rasterize(PolygonAnnotation("Bar", ann["polygon"], (h, w)), (h, w))
        if mask.any():
            gts.append(GroundTruth(ann["image_id"], ann["category_id"], mask))
    return gts


def seg_eval(pred_path, gt_path) -> M.EvalReport:
    return M.map_suite(load_predictions(pred_path), load_ground_truth(gt_path),
                       CATEGORY_NAMES)


# -- qa ------------------------------------------------------------------------------


def qa_accuracy(model: QAModel, samples: list[QASample], mode: str | None = None) -> float:
    correct = sum(1 for s in samples if M.relaxed_accuracy(model.answer(s, mode), s.answer))
    return correct / len(samples)


def train_qa(samples: list[QASample], seg_ckpt, cfg: RunConfig,
             mode: str | None = None, steps: int | None = None, log=None) -> dict:
    vocab = Vocabulary.from_texts([s.question for s in samples] + [s.answer for s in samples])
    for i, s in enumerate(samples):
        s.question_ids = vocab.encode(s.question)
        s.answer_ids = vocab.encode(s.answer)
        s.sample_id = s.sample_id or str(i)
    model = Q.build_qa_model(seg_ckpt, cfg.qa, vocab, seed=cfg.seed)
    tcfg = cfg.qa_train
    total_steps = steps if steps is not None else tcfg.steps
    opt = MomentumSGD(model.trainable_params(), tcfg.step_size, tcfg.momentum)
    order_rng = np.random.default_rng(cfg.seed + 2)
    losses: list[float] = []
    evals: list[dict] = []
    start = time.time()
    for step in range(1, total_steps + 1):
        idx = order_rng.integers(0, len(samples), size=min(tcfg.batch_size, len(samples)))
        batch = [samples[i] for i in idx]
        losses.append(qa_train_step(model, batch, opt, mode))
        if step % tcfg.eval_every == 0 or step == total_steps:
            ra = qa_accuracy(model, samples, mode)
            evals.append({"step": step, "ra": ra, "loss": losses[-1],
                          "elapsed_s": round(time.time() - start, 1)})
            if log:
                log(f"step {step}: loss {losses[-1]:.4f} train RA {ra:.3f}")
            if tcfg.early_stop and ra >= tcfg.target_ra:
                break
    return {"model": model, "losses": losses, "evals": evals, "vocab": vocab}


def run_ablation(samples: list[QASample], seg_ckpt, cfg: RunConfig, log=None) -> dict:
    """Train and score every fusion mode from the same config and seed."""
    report = {}
    for mode in Q.FUSION_MODES:
        result = train_qa(samples, seg_ckpt, cfg, mode=mode,
                          steps=cfg.qa_train.ablation_steps, log=log)
        ra = result["evals"][-1]["ra"] if result["evals"] else 0.0
        report[mode] = {"ra": ra, "steps": len(result["losses"])}
        if log:
            log(f"mode {mode}: RA {ra:.3f}")
    return report


def qa_inference(model: QAModel, samples: list[QASample]) -> list[dict]:
    out = []
    for s in samples:
        out.append({"question": s.question, "gold": s.answer,
                    "prediction": model.answer(s)})
    return out


def qa_eval(answers: list[dict]) -> dict:
    flags = [M.relaxed_accuracy(a["prediction"], a["gold"]) for a in answers]
    return {"relaxed_accuracy": sum(flags) / len(flags) if flags else 0.0,
            "correct": int(sum(flags)), "total": len(flags)}


# -- gradcheck suite ---------------------------------------------------------------


def gradcheck_suite(seed: int = 0, entries: int = 6) -> dict[str, float]:
    """Central-finite-difference checks for every differentiable primitive
    and the composed blocks; returns max relative error per check."""
    report: dict[str, float] = {}
    rng = np.random.default_rng(seed)
    attn = AttentionConfig(heads=2, head_dim=4, neighborhood_window=3, offset_kernel=3,
                           max_offset=2.0, question_len=4, question_dim=6)

    def check(name, f, params, cap=entries):
        rep = T.grad_check(f, params, max_entries_per_param=cap, seed=seed)
        report[name] = max(rep.values())

    # primitives
    a = Tensor(rng.normal(size=(3, 4)), requires_grad=True)
    b = Tensor(rng.normal(size=(4, 2)), requires_grad=True)
    w_ab = Tensor(rng.normal(size=(3, 2)))
    check("matmul", lambda: ((a @ b) * w_ab).sum(), {"a": a, "b": b}, cap=0)

    x_sm = Tensor(rng.normal(size=(2, 5)), requires_grad=True)
    w_sm = Tensor(rng.normal(size=(2, 5)))
    check("softmax", lambda: (T.softmax(x_sm, axis=1) * w_sm).sum(), {"x": x_sm}, cap=0)
    check("log_softmax", lambda: (T.log_softmax(x_sm, axis=1) * w_sm).sum(), {"x": x_sm}, cap=0)

    x_ln = Tensor(rng.normal(size=(3, 6)), requires_grad=True)
    g_ln = Tensor(rng.normal(size=6), requires_grad=True)
    b_ln = Tensor(rng.normal(size=6), requires_grad=True)
    w_ln = Tensor(rng.normal(size=(3, 6)))
    check("layer_norm", lambda: (T.layer_norm(x_ln, g_ln, b_ln, axis=1) * w_ln).sum(),
          {"x": x_ln, "gain": g_ln, "bias": b_ln}, cap=0)

    x_cv = Tensor(rng.normal(size=(2, 5, 5)), requires_grad=True)
    k_cv = Tensor(rng.normal(size=(3, 2, 3, 3)), requires_grad=True)
    w_cv = Tensor(rng.normal(size=(3, 3, 3)))
    check("conv2d", lambda: (T.conv2d(x_cv, k_cv, stride=2, padding=1) * w_cv).sum(),
          {"x": x_cv, "k": k_cv}, cap=0)

    for kind in ("gelu", "sigmoid", "tanh"):
        x_pw = Tensor(rng.normal(size=(3, 4)) + 0.3, requires_grad=True)
        w_pw = Tensor(rng.normal(size=(3, 4)))
        check(f"pointwise_{kind}",
              lambda k=kind, x=x_pw, w=w_pw: (T.pointwise(x, k) * w).sum(), {"x": x_pw}, cap=0)
    x_rl = Tensor(np.array([[-1.7, -0.4, 0.6, 1.2]]), requires_grad=True)
    check("pointwise_relu", lambda: (T.relu(x_rl) * 1.3).sum(), {"x": x_rl}, cap=0)

    x_bs = Tensor(rng.normal(size=(2, 5, 5)), requires_grad=True)
    p_bs = Tensor(rng.uniform(0.2, 3.7, size=(6, 2)).round(2) + 0.017, requires_grad=True)
    w_bs = Tensor(rng.normal(size=(6, 2)))
    check("bilinear_sample", lambda: (T.bilinear_sample(x_bs, p_bs) * w_bs).sum(),
          {"x": x_bs, "points": p_bs}, cap=0)

    # attention blocks
    na = NeighborhoodAttention(8, attn, rng)
    fm_na = FeatureMap(Tensor(rng.normal(size=(8, 5, 5)), requires_grad=True), 4)
    w_na = Tensor(rng.normal(size=(8, 5, 5)))
    check("neighborhood_attention", lambda: (na(fm_na).data * w_na).sum(),
          dict(na.params(), x=fm_na.data))

    off = OffsetNetwork(8, attn, rng)
    off.proj_w.data[:] = rng.normal(size=off.proj_w.shape) * 0.3
    fm_off = FeatureMap(Tensor(rng.normal(size=(8, 4, 4)), requires_grad=True), 4)
    w_off = Tensor(rng.normal(size=(16, 2)))
    check("offset_network", lambda: (off(fm_off) * w_off).sum(),
          dict(off.params(), x=fm_off.data))

    qon = QuestionGuidedOffsets(8, attn, rng)
    qon.proj_w.data[:] = rng.normal(size=qon.proj_w.shape) * 0.3
    fm_qon = FeatureMap(Tensor(rng.normal(size=(8, 4, 4)), requires_grad=True), 4)
    z_qon = Tensor(rng.normal(size=(4, 6)), requires_grad=True)
    w_qon = Tensor(rng.normal(size=(16, 2)))
    check("question_guided_offsets", lambda: (qon(fm_qon, z_qon) * w_qon).sum(),
          dict(qon.params(), x=fm_qon.data, z=z_qon))

    fm_ds = FeatureMap(Tensor(rng.normal(size=(3, 5, 5))), 4)
    off_ds = Tensor(rng.uniform(0.1, 0.6, size=(25, 2)), requires_grad=True)
    w_ds = Tensor(rng.normal(size=(25, 3)))
    check("deformable_sample", lambda: (deformable_sample(fm_ds, off_ds) * w_ds).sum(),
          {"offsets": off_ds})

    da = DeformableAttention(8, attn, rng)
    da.offset_net.proj_w.data[:] = rng.normal(size=(8, 2)) * 0.3
    fm_da = FeatureMap(Tensor(rng.normal(size=(8, 4, 4)), requires_grad=True), 4)
    w_da = Tensor(rng.normal(size=(8, 4, 4)))
    check("deformable_attention", lambda: (da(fm_da).data * w_da).sum(),
          dict(da.params(), x=fm_da.data))

    dca = DeformableCoAttention(8, attn, rng)
    dca.offsets.proj_w.data[:] = rng.normal(size=dca.offsets.proj_w.shape) * 0.3
    fm_x = FeatureMap(Tensor(rng.normal(size=(8, 3, 3)), requires_grad=True), 4)
    fm_y = FeatureMap(Tensor(rng.normal(size=(8, 3, 3)), requires_grad=True), 4)
    z_dca = Tensor(rng.normal(size=(4, 6)), requires_grad=True)
    w_dca = Tensor(rng.normal(size=(9, 8)))
    check("deformable_co_attention", lambda: (dca(fm_x, fm_y, z_dca) * w_dca).sum(),
          dict(dca.params(), x=fm_x.data, y=fm_y.data, z=z_dca))

    fuse = CoAttentionFusionBlock(8, 4, attn, rng)
    fuse.attention.offsets.proj_w.data[:] = rng.normal(size=(4, 2)) * 0.3
    w_fu = Tensor(rng.normal(size=(4, 3, 3)))
    check("fusion_block", lambda: (fuse(fm_x, fm_y, z_dca).data * w_fu).sum(),
          dict(fuse.params(), x=fm_x.data, y=fm_y.data, z=z_dca))

    # mask decoder layer (gated cross-attention + self-attention + FFN)
    seg_cfg = EncoderConfig(base_channels=4, pixel_channels=8, query_channels=8,
                            num_queries=3, decoder_layers=1)
    seg = Segmenter(seg_cfg, attn, np.random.default_rng(seed + 1))
    layer = seg.query_decoder.layers[0]
    q_rows = Tensor(rng.normal(size=(3, 8)), requires_grad=True)
    lvl_rows = Tensor(rng.normal(size=(16, 8)), requires_grad=True)
    pos = sincos_position_rows(8, 4, 4)
    gate = Tensor(np.where(rng.random(size=(3, 16)) > 0.3, 0.0, -1e30))
    w_dec = Tensor(rng.normal(size=(3, 8)))
    check("mask_decoder_layer",
          lambda: (seg.query_decoder._layer(layer, q_rows, lvl_rows, pos, gate) * w_dec).sum(),
          {f"dec.{k}": v for k, v in layer.items()} | {"q": q_rows, "level": lvl_rows})

    # losses
    logits_f = Tensor(rng.normal(size=(2, 32)), requires_grad=True)
    gt_f = rng.random(size=(2, 32)) > 0.5
    check("focal_loss", lambda: focal_loss(logits_f, gt_f, LossWeights()),
          {"logits": logits_f}, cap=0)
    check("dice_loss", lambda: dice_loss(logits_f, gt_f), {"logits": logits_f}, cap=0)

    gt_masks = np.zeros((2, 4, 4), dtype=bool)
    gt_masks[0, :2, :2] = True
    gt_masks[1, 2:, 1:3] = True
    gt_labels = np.array([1, 4])
    cls_lg = Tensor(rng.normal(size=(3, 8)), requires_grad=True)
    msk_lg = Tensor(rng.normal(size=(3, 16)), requires_grad=True)

    def matched_loss():
        probs = np.exp(cls_lg.data)
        probs /= probs.sum(axis=1, keepdims=True)
        from .segmenter import SegmentationOutput
        out = SegmentationOutput(
            class_probs=probs, masks=(msk_lg.data > 0).reshape(-1, 4, 4),
            boxes=[None] * 3, mask_probs=1 / (1 + np.exp(-msk_lg.data)).reshape(-1, 4, 4),
            class_logits=cls_lg, mask_logits=msk_lg)
        loss, _ = segmentation_loss(out, gt_masks, gt_labels)
        return loss

    check("segmentation_loss", matched_loss, {"class_logits": cls_lg, "mask_logits": msk_lg}, cap=0)
    return report


def gradcheck_model_end_to_end(seed: int = 0, entries: int = 3) -> dict[str, float]:
    """Whole-model checks on tiny configs: the segmentation loss through
    the full detector and the answer loss through every fusion mode."""
    report: dict[str, float] = {}
    rng = np.random.default_rng(seed)
    attn = AttentionConfig(heads=2, head_dim=2, neighborhood_window=3, offset_kernel=3,
                           max_offset=1.5, question_len=4, question_dim=6)
    seg_cfg = EncoderConfig(base_channels=4, pixel_channels=8, query_channels=8,
                            num_queries=3, num_classes=7, decoder_layers=1)
    seg = Segmenter(seg_cfg, attn, np.random.default_rng(seed))
    # zero-initialized offset projections sample exactly on the grid, where
    # bilinear interpolation has its kink; move them off zero for the check
    for name, p in seg.params().items():
        if name.endswith(("offset.proj_w", "offset.proj_b")):
            p.data[:] = rng.normal(size=p.shape) * 0.2
    image = rng.random(size=(3, 32, 32))
    gt_masks = np.zeros((2, 32, 32), dtype=bool)
    gt_masks[0, 4:14, 4:12] = True
    gt_masks[1, 18:28, 16:30] = True
    gt_labels = np.array([0, 2])

    def seg_loss():
        out = seg.forward(Tensor(image))
        loss, _ = segmentation_loss(out, gt_masks, gt_labels)
        return loss

    rep = T.grad_check(seg_loss, seg.params(), max_entries_per_param=entries, seed=seed)
    report["segmenter_end_to_end"] = max(rep.values())

    vocab = Vocabulary.from_texts(["what is the value of the red bar", "3", "5"])
    qa_cfg = Q.QAConfig(decoder_dim=16, decoder_layers=1, decoder_heads=2)
    for mode in Q.FUSION_MODES:
        model = QAModel(Segmenter(seg_cfg, attn, np.random.default_rng(seed)), qa_cfg,
                        attn, vocab, np.random.default_rng(seed + 3))
        model.fusion.attention.offsets.proj_w.data[:] = rng.normal(
            size=model.fusion.attention.offsets.proj_w.shape) * 0.2
        sample = QASample(image=rng.random(size=(3, 32, 32)),
                          question="what is the value of the red bar", answer="5",
                          sample_id="g0")
        sample.question_ids = vocab.encode(sample.question)
        sample.answer_ids = vocab.encode(sample.answer)

        def qa_loss(m=model, s=sample, md=mode):
            return sample_loss(m, s, md)

        rep = T.grad_check(qa_loss, model.trainable_params(),
                           max_entries_per_param=entries, seed=seed)
        report[f"qa_end_to_end_{mode}"] = max(rep.values())
    return report
