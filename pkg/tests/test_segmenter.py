"""Segmenter: shape chain, Hungarian matching vs brute force, losses,
prediction semantics, training mechanics, checkpointing."""

import numpy as np
import pytest

from chartlab import segmenter as S
from chartlab import tensor as T
from chartlab.attention import AttentionConfig
from chartlab.tensor import Tensor


def rng(seed=0):
    return np.random.default_rng(seed)


def tiny_cfg(**kw):
    base = dict(base_channels=4, stage_depths=(1, 1, 1, 1), pixel_channels=8,
                query_channels=8, num_queries=4, num_classes=7,
                mask_threshold=0.5, decoder_layers=2)
    base.update(kw)
    return S.EncoderConfig(**base)


def tiny_attn(**kw):
    base = dict(heads=2, head_dim=2, neighborhood_window=3, offset_kernel=3,
                max_offset=2.0, question_len=4, question_dim=6)
    base.update(kw)
    return AttentionConfig(**base)


def tiny_model(seed=0, **kw):
    return S.Segmenter(tiny_cfg(**kw), tiny_attn(), rng(seed))


# -- stem and encoder -----------------------------------------------------------


def test_stem_shape_and_rejection():
    model = tiny_model()
    fm = model.encoder.stem(Tensor(rng(1).normal(size=(3, 64, 64))))
    assert fm.data.shape == (4, 16, 16)
    assert fm.stride == 4
    with pytest.raises(S.SegmenterError):
        model.encoder.stem(Tensor(np.zeros((3, 60, 64))))


def test_encode_shape_chain():
    model = tiny_model()
    x, stages = model.encoder(Tensor(rng(2).normal(size=(3, 64, 64))))
    assert x.data.shape == (32, 2, 2)   # 8K at /32
    assert x.stride == 32
    assert [s.data.shape for s in stages] == [
        (4, 16, 16), (8, 8, 8), (16, 4, 4), (32, 2, 2)]
    assert [s.stride for s in stages] == [4, 8, 16, 32]


def test_pixel_decoder_levels():
    model = tiny_model()
    x, _ = model.encoder(Tensor(rng(3).normal(size=(3, 64, 64))))
    levels = model.pixel_decoder(x)
    assert [lv.data.shape for lv in levels] == [
        (8, 4, 4), (8, 8, 8), (8, 16, 16), (8, 64, 64)]
    assert [lv.stride for lv in levels] == [16, 8, 4, 1]


def test_query_decoder_output_independent_of_image_size():
    model = tiny_model()
    for size in (32, 64):
        x, _ = model.encoder(Tensor(rng(4).normal(size=(3, size, size))))
        levels = model.pixel_decoder(x)
        q = model.query_decoder(levels[:3], model.mask_head)
        assert q.shape == (4, 8)


def test_query_decoder_all_pass_mask_is_plain_cross_attention():
    model = tiny_model()
    layer = model.query_decoder.layers[0]
    r = rng(5)
    q_rows = Tensor(r.normal(size=(4, 8)))
    level_rows = Tensor(r.normal(size=(16, 8)))
    pos = S.sincos_position_rows(8, 4, 4)
    unmasked = model.query_decoder._layer(layer, q_rows, level_rows, pos, None)
    all_pass = Tensor(np.zeros((4, 16)))
    masked = model.query_decoder._layer(layer, q_rows, level_rows, pos, all_pass)
    assert np.max(np.abs(unmasked.data - masked.data)) < 1e-10


# -- predict ----------------------------------------------------------------------


def _forward(model, seed=6, size=64):
    return model.forward(Tensor(rng(seed).normal(size=(3, size, size)) * 0.5))


def test_predict_threshold_extremes():
    model = tiny_model()
    image = Tensor(rng(7).normal(size=(3, 64, 64)))
    x, _ = model.encoder(image)
    levels = model.pixel_decoder(x)
    q = model.query_decoder(levels[:3], model.mask_head)
    full = model.predict(q, levels[3], 0.0)
    empty = model.predict(q, levels[3], 1.0)
    assert full.masks.all()
    assert not empty.masks.any()
    assert all(b is None for b in empty.boxes)


def test_predict_class_rows_on_simplex():
    out = _forward(tiny_model())
    sums = out.class_probs.sum(axis=1)
    assert np.abs(sums - 1.0).max() < 1e-9
    assert out.class_probs.min() >= 0.0


def test_predict_monotone_shrinkage_in_threshold():
    model = tiny_model()
    image = Tensor(rng(8).normal(size=(3, 64, 64)))
    x, _ = model.encoder(image)
    levels = model.pixel_decoder(x)
    q = model.query_decoder(levels[:3], model.mask_head)
    prev = None
    for t in (0.0, 0.3, 0.5, 0.8, 1.0):
        masks = model.predict(q, levels[3], t).masks
        if prev is not None:
            assert np.all(masks <= prev)  # raising t never grows a mask
        prev = masks


def test_predict_boxes_are_tight():
    out = _forward(tiny_model(), seed=9)
    for qi, box in enumerate(out.boxes):
        if box is None:
            assert not out.masks[qi].any()
            continue
        from chartlab.geometry import bbox_from_mask
        assert box == bbox_from_mask(out.masks[qi])


# -- hungarian matching --------------------------------------------------------------


def test_hungarian_identity_on_diagonal_dominance():
    costs = np.full((4, 4), 10.0)
    np.fill_diagonal(costs, 0.0)
    assert S.hungarian_match(costs) == [(0, 0), (1, 1), (2, 2), (3, 3)]


def test_hungarian_single_pair():
    assert S.hungarian_match(np.array([[3.5]])) == [(0, 0)]


def test_hungarian_rejects_more_gts_than_preds():
    with pytest.raises(S.SegmenterError):
        S.hungarian_match(np.zeros((2, 3)))


def test_hungarian_rejects_non_finite():
    with pytest.raises(S.SegmenterError):
        S.hungarian_match(np.array([[np.inf, 0.0]]).T.copy().T.reshape(1, 2))


def test_hungarian_tie_break_lowest_prediction_index():
    # every assignment costs the same: ground truth j takes prediction j
    costs = np.zeros((5, 3))
    assert S.hungarian_match(costs) == [(0, 0), (1, 1), (2, 2)]


def test_hungarian_matches_brute_force():
    r = rng(10)
    for trial in range(60):
        n = int(r.integers(2, 8))
        g = int(r.integers(1, n + 1))
        costs = r.normal(size=(n, g)) * 3
        pairs = S.hungarian_match(costs)
        total = sum(costs[p, q] for p, q in pairs)
        assert total == pytest.approx(S.brute_force_min_cost(costs), abs=1e-9), f"trial {trial}"
        assert len({p for p, _ in pairs}) == g


def test_hungarian_brute_force_with_ties():
    r = rng(11)
    for trial in range(40):
        n = int(r.integers(2, 7))
        g = int(r.integers(1, n + 1))
        costs = r.integers(0, 4, size=(n, g)).astype(float)  # many ties
        pairs = S.hungarian_match(costs)
        total = sum(costs[p, q] for p, q in pairs)
        assert total == pytest.approx(S.brute_force_min_cost(costs), abs=1e-9), f"trial {trial}"


# -- losses ---------------------------------------------------------------------------


def _manual_output(class_logits, mask_logits, h, w, threshold=0.5):
    probs = 1.0 / (1.0 + np.exp(-mask_logits.data))
    masks = (probs - threshold) > 0
    return S.SegmentationOutput(
        class_probs=np.exp(class_logits.data) / np.exp(class_logits.data).sum(axis=1, keepdims=True),
        masks=masks.reshape(-1, h, w),
        boxes=[None] * class_logits.shape[0],
        mask_probs=probs.reshape(-1, h, w),
        class_logits=class_logits,
        mask_logits=mask_logits,
    )


def test_loss_perfect_prediction_is_small():
    h = w = 8
    gt = np.zeros((2, h, w), dtype=bool)
    gt[0, :4, :4] = True
    gt[1, 5:, 5:] = True
    labels = np.array([0, 3])
    big = 20.0
    mask_logits = np.where(gt.reshape(2, -1), big, -big)
    mask_logits = np.vstack([mask_logits, np.full((1, h * w), -big)])  # extra query
    class_logits = np.full((3, 8), -big)
    class_logits[0, 0] = big
    class_logits[1, 3] = big
    class_logits[2, 7] = big  # no-object
    out = _manual_output(Tensor(class_logits), Tensor(mask_logits), h, w)
    loss, pairs = S.segmentation_loss(out, gt, labels)
    assert sorted(pairs) == [(0, 0), (1, 1)]
    assert loss.item() < 1e-6


def test_dice_loss_bounded():
    r = rng(12)
    for _ in range(20):
        logits = Tensor(r.normal(size=(3, 64)) * 5)
        gt = r.random(size=(3, 64)) > 0.5
        val = S.dice_loss(logits, gt).item()
        assert 0.0 <= val <= 1.0


def test_loss_gradcheck_wrt_logits():
    r = rng(13)
    h = w = 4
    gt = np.zeros((2, h, w), dtype=bool)
    gt[0, :2, :2] = True
    gt[1, 2:, 1:3] = True
    labels = np.array([1, 4])
    class_logits = Tensor(r.normal(size=(3, 8)), requires_grad=True)
    mask_logits = Tensor(r.normal(size=(3, h * w)), requires_grad=True)

    def f():
        out = _manual_output(class_logits, mask_logits, h, w)
        loss, _ = S.segmentation_loss(out, gt, labels)
        return loss

    report = T.grad_check(f, {"class": class_logits, "mask": mask_logits})
    assert max(report.values()) < 1e-4, report


def test_focal_and_dice_gradcheck_standalone():
    r = rng(14)
    logits = Tensor(r.normal(size=(2, 32)), requires_grad=True)
    gt = (r.random(size=(2, 32)) > 0.5)

    def f_focal():
        return S.focal_loss(logits, gt, S.LossWeights())

    def f_dice():
        return S.dice_loss(logits, gt)

    assert T.grad_check(f_focal, {"logits": logits})["logits"] < 1e-4
    assert T.grad_check(f_dice, {"logits": logits})["logits"] < 1e-4


def test_loss_no_objects_penalizes_non_background():
    class_logits = Tensor(np.zeros((3, 8)), requires_grad=True)
    mask_logits = Tensor(np.zeros((3, 16)), requires_grad=True)
    out = _manual_output(class_logits, mask_logits, 4, 4)
    loss, pairs = S.segmentation_loss(out, np.zeros((0, 4, 4), dtype=bool), np.zeros(0, dtype=int))
    assert pairs == []
    assert loss.item() > 0.0


# -- training mechanics -----------------------------------------------------------------


def _toy_sample(seed=0, size=64):
    r = rng(seed)
    image = np.full((3, size, size), 0.9)
    gt = np.zeros((2, size, size), dtype=bool)
    gt[0, 8:28, 8:24] = True
    gt[1, 36:56, 30:58] = True
    image[:, gt[0]] = np.array([0.8, 0.2, 0.1])[:, None]
    image[:, gt[1]] = np.array([0.1, 0.3, 0.7])[:, None]
    image += r.normal(size=image.shape) * 0.01
    return image, gt, np.array([0, 2])


def test_train_step_zero_step_size_keeps_parameters():
    model = tiny_model(seed=20)
    params = model.params()
    before = {k: p.data.copy() for k, p in params.items()}
    opt = S.MomentumSGD(params, step_size=0.0)
    S.train_step(model, [_toy_sample()], opt)
    for k, p in params.items():
        assert np.array_equal(before[k], p.data), k


def test_train_step_loss_decreases_on_fixed_image():
    model = tiny_model(seed=21)
    opt = S.MomentumSGD(model.params(), step_size=0.02)
    sample = _toy_sample(1)
    losses = [S.train_step(model, [sample], opt) for _ in range(50)]
    assert np.mean(losses[-10:]) < np.mean(losses[:10])


def test_train_step_deterministic_across_runs():
    traces = []
    for _ in range(2):
        model = tiny_model(seed=22)
        opt = S.MomentumSGD(model.params(), step_size=0.05)
        sample = _toy_sample(2)
        traces.append([S.train_step(model, [sample], opt) for _ in range(5)])
    assert traces[0] == traces[1]


# -- serialization -----------------------------------------------------------------------


def test_rle_round_trip():
    r = rng(23)
    for _ in range(10):
        mask = r.random(size=(9, 7)) > 0.6
        rle = S.rle_encode(mask)
        assert sum(rle["counts"]) == mask.size
        assert np.array_equal(S.rle_decode(rle), mask)
    empty = np.zeros((3, 3), dtype=bool)
    assert S.rle_encode(empty)["counts"] == [9]
    assert not S.rle_decode(S.rle_encode(empty)).any()


def test_detections_skip_empty_masks():
    out = _forward(tiny_model(), seed=24)
    dets = detections = S.detections_from_output(out)
    non_empty = sum(1 for m in out.masks if m.any())
    assert len(dets) == non_empty
    for d in detections:
        assert 1 <= d["category_id"] <= 7
        assert 0.0 <= d["score"] <= 1.0


def test_checkpoint_round_trip(tmp_path):
    model = tiny_model(seed=25)
    path = tmp_path / "seg.ckpt"
    S.save_checkpoint(path, model)
    clone = S.load_checkpoint(path)
    image = Tensor(rng(26).normal(size=(3, 32, 32)))
    out1 = model.forward(image)
    out2 = clone.forward(image)
    assert np.array_equal(out1.class_probs, out2.class_probs)
    assert np.array_equal(out1.mask_probs, out2.mask_probs)
