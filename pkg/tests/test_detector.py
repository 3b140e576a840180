import numpy as np
import pytest

from ctxdet import nn
from ctxdet.detector import (
    Detections,
    DetectorModel,
    LossBreakdown,
    LossWeights,
    MatchWeights,
    ModelConfig,
    OptState,
    decode_mgd,
    detection_losses,
    detection_losses_bwd,
    encode,
    forward_frame,
    full_loss_and_grads,
    giou_matrix,
    giou_pairs_bwd,
    giou_pairs_fwd,
    hungarian_match,
    predict_heads,
    sinusoidal_pos_enc,
    train_step,
)
from ctxdet.errors import NumericError
from ctxdet.memory import init_memory, memory_tokens
from ctxdet.stream import FrameRecord
from ctxdet.assignment import brute_force_assignment


def _cxcywh(x0, y0, x1, y1):
    return ((x0 + x1) / 2.0, (y0 + y1) / 2.0, x1 - x0, y1 - y0)


def _tiny(enc_layers=1, dec_layers=1, use_memory=True, seed=0):
    cfg = ModelConfig(
        num_classes=2,
        num_prototypes=2,
        d_model=8,
        num_heads=2,
        enc_layers=enc_layers,
        dec_layers=dec_layers,
        num_queries=4,
        ffn_hidden=16,
        patch=4,
        channels=3,
        tokens_h=4,
        tokens_w=4,
        use_memory=use_memory,
    )
    return DetectorModel(cfg, seed=seed)


def test_pos_enc_shape_and_range():
    pe = sinusoidal_pos_enc(4, 4, 8)
    assert pe.shape == (16, 8)
    assert np.abs(pe).max() <= 1.0 + 1e-12


def test_encode_zero_layers_is_identity():
    model = _tiny(enc_layers=0)
    mem = init_memory(2, 2, 8, 0.99, seed=1)
    feats = np.random.default_rng(2).standard_normal((16, 8))
    mtok = memory_tokens(mem, model.params["slot_embed"])
    f_enc, m_enc = encode(feats, mtok, model)
    assert np.array_equal(f_enc, feats + model.pos)
    assert np.array_equal(m_enc, mtok)


def test_encode_memory_permutation_equivariance():
    model = _tiny()
    rng = np.random.default_rng(3)
    feats = rng.standard_normal((16, 8))
    mtok = rng.standard_normal((4, 8))
    perm = np.array([2, 0, 3, 1])
    f1, m1 = encode(feats, mtok, model)
    f2, m2 = encode(feats, mtok[perm], model)
    assert np.abs(f1 - f2).max() < 1e-9
    assert np.abs(m1[perm] - m2).max() < 1e-9


def test_encode_matches_straight_line_oracle():
    model = _tiny()
    p = model.params
    rng = np.random.default_rng(4)
    feats = rng.standard_normal((16, 8))
    mtok = rng.standard_normal((4, 8))
    f_enc, m_enc = encode(feats, mtok, model)

    x = np.concatenate([feats + model.pos, mtok], axis=0)
    a = nn.attention(x, x, x, model.attn("enc0.attn"))
    x1 = nn.layer_norm(x + a, p["enc0.ln1.g"], p["enc0.ln1.b"])
    f = nn.ffn(x1, p["enc0.ffn.w1"], p["enc0.ffn.b1"], p["enc0.ffn.w2"], p["enc0.ffn.b2"])
    x2 = nn.layer_norm(x1 + f, p["enc0.ln2.g"], p["enc0.ln2.b"])
    assert np.allclose(f_enc, x2[:16], atol=1e-12)
    assert np.allclose(m_enc, x2[16:], atol=1e-12)


def test_encode_shape_errors():
    model = _tiny()
    with pytest.raises(ValueError):
        encode(np.zeros((15, 8)), None, model)


def test_decode_zero_blocks_returns_queries():
    model = _tiny(dec_layers=0)
    q = np.random.default_rng(5).standard_normal((4, 8))
    out = decode_mgd(q, np.zeros((16, 8)), np.zeros((4, 8)), model)
    assert np.array_equal(out, q)


def test_uniform_memory_rows_add_their_vector():
    # with identity value/output projections, attending over identical rows
    # returns exactly that row, so the residual adds it to every query
    rng = np.random.default_rng(6)
    params = nn.init_attention_params(rng, 8, 1)
    params.wv[...] = np.eye(8)
    params.wo[...] = np.eye(8)
    params.bv[...] = 0.0
    params.bo[...] = 0.0
    u = rng.standard_normal(8)
    m = np.tile(u, (5, 1))
    q = rng.standard_normal((3, 8))
    out = nn.attention(q, m, m, params)
    assert np.allclose(out, np.tile(u, (3, 1)), atol=1e-12)
    assert np.allclose(q + out, q + u, atol=1e-12)


def test_decode_matches_straight_line_oracle():
    model = _tiny()
    p = model.params
    rng = np.random.default_rng(7)
    q = rng.standard_normal((4, 8))
    f_enc = rng.standard_normal((16, 8))
    m_s = rng.standard_normal((4, 8))
    out = decode_mgd(q, f_enc, m_s, model)

    o = q
    a = nn.attention(o, o, o, model.attn("dec0.self"))
    o = nn.layer_norm(o + a, p["dec0.ln1.g"], p["dec0.ln1.b"])
    a = nn.attention(o, f_enc, f_enc, model.attn("dec0.cross"))
    o = nn.layer_norm(o + a, p["dec0.ln2.g"], p["dec0.ln2.b"])
    a = nn.attention(o, m_s, m_s, model.attn("dec0.mem"))
    o = nn.layer_norm(o + a, p["dec0.ln3.g"], p["dec0.ln3.b"])
    f = nn.ffn(o, p["dec0.ffn.w1"], p["dec0.ffn.b1"], p["dec0.ffn.w2"], p["dec0.ffn.b2"])
    o = nn.layer_norm(o + f, p["dec0.ln4.g"], p["dec0.ln4.b"])
    assert np.allclose(out, o, atol=1e-12)


def test_predict_heads_zero_weights():
    model = _tiny()
    model.params["cls.w"][...] = 0.0
    model.params["cls.b"][...] = 0.0
    model.params["box.w"][...] = 0.0
    model.params["box.b"][...] = 0.0
    dets = predict_heads(np.random.default_rng(8).standard_normal((4, 8)), model)
    assert np.allclose(dets.class_probs, 0.5, atol=1e-15)
    assert np.allclose(dets.boxes, 0.5, atol=1e-15)


def test_predict_heads_saturation_and_oracle():
    model = _tiny()
    p = model.params
    q = np.random.default_rng(9).standard_normal((4, 8))
    dets = predict_heads(q, model)
    logits = q @ p["cls.w"] + p["cls.b"]
    raw = q @ p["box.w"] + p["box.b"]
    assert np.allclose(dets.class_probs, 1.0 / (1.0 + np.exp(-logits)), atol=1e-12)
    assert np.allclose(dets.boxes, 1.0 / (1.0 + np.exp(-raw)), atol=1e-12)
    p["cls.b"][0] = 60.0
    dets = predict_heads(q, model)
    assert np.abs(dets.class_probs[:, 0] - 1.0).max() < 1e-9
    assert ((dets.boxes > 0.0) & (dets.boxes < 1.0)).all()


def _detections(probs, boxes):
    return Detections(class_probs=np.asarray(probs, float), boxes=np.asarray(boxes, float))


def test_match_single_gt_identical_queries_takes_lowest_index():
    probs = np.tile([0.7, 0.3], (5, 1))
    boxes = np.tile([0.5, 0.5, 0.2, 0.2], (5, 1))
    match = hungarian_match(_detections(probs, boxes), [(0, (0.4, 0.5, 0.2, 0.2))])
    assert match == [(0, 0)]


def test_match_rejects_more_gts_than_queries():
    dets = _detections(np.full((2, 2), 0.5), np.tile([0.5, 0.5, 0.2, 0.2], (2, 1)))
    gts = [(0, (0.5, 0.5, 0.1, 0.1))] * 3
    with pytest.raises(ValueError):
        hungarian_match(dets, gts)


def test_match_empty_gts():
    dets = _detections(np.full((3, 2), 0.5), np.tile([0.5, 0.5, 0.2, 0.2], (3, 1)))
    assert hungarian_match(dets, []) == []


def test_match_equals_brute_force_over_same_cost():
    rng = np.random.default_rng(10)
    w = MatchWeights()
    for _ in range(30):
        n_q = int(rng.integers(4, 7))
        n_g = int(rng.integers(1, 5))
        probs = rng.uniform(0.05, 0.95, size=(n_q, 2))
        boxes = rng.uniform(0.2, 0.8, size=(n_q, 4))
        boxes[:, 2:] = rng.uniform(0.05, 0.3, size=(n_q, 2))
        dets = _detections(probs, boxes)
        gts = []
        for _ in range(n_g):
            b = (rng.uniform(0.2, 0.8), rng.uniform(0.2, 0.8), 0.2, 0.25)
            gts.append((int(rng.integers(2)), b))
        match = hungarian_match(dets, gts, w)

        # same cost definition, exhaustive minimum
        pc = np.clip(probs[:, [c for c, _ in gts]].T, 1e-7, 1 - 1e-7)
        pos = 0.25 * (1 - pc) ** 2 * (-np.log(pc))
        neg = 0.75 * pc**2 * (-np.log(1 - pc))
        gt_box = np.array([b for _, b in gts])
        l1 = np.abs(gt_box[:, None, :] - boxes[None, :, :]).sum(-1)
        cost = w.focal * (pos - neg) + w.l1 * l1 + w.giou * (1 - giou_matrix(gt_box, boxes))
        oracle_cols, _ = brute_force_assignment(cost)
        assert [q for q, _ in match] == oracle_cols


def test_giou_hand_case_and_iou_consistency():
    a = np.array([_cxcywh(0, 0, 2, 2)])
    b = np.array([_cxcywh(1, 1, 3, 3)])
    giou, _ = giou_pairs_fwd(a, b)
    assert abs(giou[0] - (-5.0 / 63.0)) < 1e-12 * abs(5.0 / 63.0) + 1e-15
    # identical boxes: GIoU == IoU == 1
    same, _ = giou_pairs_fwd(a, a)
    assert abs(same[0] - 1.0) < 1e-12


def test_giou_gradient_matches_finite_differences():
    rng = np.random.default_rng(11)
    gt = rng.uniform(0.3, 0.7, size=(6, 4))
    gt[:, 2:] = rng.uniform(0.1, 0.3, size=(6, 2))
    pred = gt + rng.uniform(-0.08, 0.08, size=(6, 4))

    def loss_fn(p):
        vals, cache = giou_pairs_fwd(p, gt)
        return float(vals.sum()), giou_pairs_bwd(np.ones(6), cache)

    assert nn.grad_check(loss_fn, pred, epsilon=1e-5) < 1e-6


def test_detection_losses_perfect_boxes():
    probs = np.array([[0.9, 0.1], [0.2, 0.8]])
    boxes = np.array([[0.4, 0.4, 0.2, 0.2], [0.6, 0.6, 0.3, 0.2]])
    gts = [(0, (0.4, 0.4, 0.2, 0.2)), (1, (0.6, 0.6, 0.3, 0.2))]
    bd, _ = detection_losses(_detections(probs, boxes), gts, [(0, 0), (1, 1)])
    assert bd.l1 == 0.0
    assert abs(bd.giou) < 1e-12


def test_focal_term_value():
    # single query, single class, matched with p = 0.9
    probs = np.array([[0.9]])
    boxes = np.array([[0.5, 0.5, 0.2, 0.2]])
    gts = [(0, (0.5, 0.5, 0.2, 0.2))]
    bd, _ = detection_losses(_detections(probs, boxes), gts, [(0, 0)])
    expected = 0.00026340128914456573  # -0.25 * 0.1^2 * ln(0.9)
    assert abs(bd.focal - expected) < 1e-9 * expected


def test_total_weighting_identity():
    rng = np.random.default_rng(12)
    probs = rng.uniform(0.1, 0.9, size=(4, 2))
    boxes = rng.uniform(0.3, 0.7, size=(4, 4))
    gts = [(0, (0.4, 0.4, 0.2, 0.2)), (1, (0.6, 0.6, 0.2, 0.3))]
    bd, _ = detection_losses(
        _detections(probs, boxes), gts, [(0, 0), (2, 1)], asl=0.37
    )
    assert bd.total == 1.0 * bd.focal + 5.0 * bd.l1 + 2.0 * bd.giou + 0.005 * bd.asl
    assert bd.asl == 0.37


def test_detection_loss_grads_match_finite_differences():
    rng = np.random.default_rng(13)
    probs = rng.uniform(0.15, 0.85, size=(3, 2))
    boxes = rng.uniform(0.35, 0.65, size=(3, 4))
    gts = [(1, (0.45, 0.5, 0.22, 0.18)), (0, (0.6, 0.55, 0.15, 0.2))]
    assignment = [(0, 0), (2, 1)]
    pdict = {"probs": probs, "boxes": boxes}

    def loss_fn(p):
        bd, cache = detection_losses(_detections(p["probs"], p["boxes"]), gts, assignment)
        dprobs, dboxes = detection_losses_bwd(cache)
        return bd.total, {"probs": dprobs, "boxes": dboxes}

    assert nn.grad_check(loss_fn, pdict, epsilon=1e-5) < 1e-5


def _frame(grid, annotations, camera="cam00", idx=0):
    return FrameRecord(grid=grid, annotations=annotations, camera_id=camera, frame_idx=idx)


def test_train_step_empty_frame_skips_memory_update(tiny_frame_grid):
    model = _tiny()
    mem = init_memory(2, 2, 8, 0.99, seed=1)
    counts_before = mem.update_count.copy()
    bd = train_step(_frame(tiny_frame_grid, []), model, mem, OptState(lr=1e-3))
    assert np.array_equal(mem.update_count, counts_before)
    assert bd.l1 == 0.0 and bd.giou == 0.0
    assert bd.focal > 0.0 and bd.asl >= 0.0


def test_train_step_counts_increase_per_instance(tiny_frame_grid):
    model = _tiny()
    mem = init_memory(2, 2, 8, 0.99, seed=1)
    ann = [(0, (0.3, 0.3, 0.2, 0.2)), (1, (0.6, 0.6, 0.2, 0.2)), (0, (0.5, 0.7, 0.15, 0.15))]
    train_step(_frame(tiny_frame_grid, ann), model, mem, OptState(lr=1e-3))
    assert mem.update_count.sum() == 3


def test_memory_is_bit_identical_across_forward(tiny_frame_grid):
    model = _tiny()
    mem = init_memory(2, 2, 8, 0.99, seed=1)
    before = mem.prototypes.tobytes()
    forward_frame(model, mem, tiny_frame_grid)
    assert mem.prototypes.tobytes() == before


def test_all_attention_rows_sum_to_one(tiny_frame_grid):
    model = _tiny(enc_layers=2, dec_layers=2)
    mem = init_memory(2, 2, 8, 0.99, seed=1)
    fp = forward_frame(model, mem, tiny_frame_grid)
    prob_arrays = [c[0][6] for c in fp.caches["enc"]]
    for block in fp.caches["dec"]:
        for attn_cache in (block[0], block[2], block[4]):
            prob_arrays.append(attn_cache[6])
    assert len(prob_arrays) == 2 + 3 * 2
    for probs in prob_arrays:
        assert np.abs(probs.sum(axis=-1) - 1.0).max() < 1e-9


def test_descent_on_repeated_frame(tiny_frame_grid, tiny_annotations):
    wins = 0
    for seed in range(20):
        model = _tiny(seed=seed)
        mem = init_memory(2, 2, 8, 0.99, seed=seed + 100)
        frame = _frame(tiny_frame_grid, tiny_annotations)
        opt = OptState(kind="sgd", lr=1e-2)
        first = train_step(frame, model, mem, opt)
        second = train_step(frame, model, mem, opt)
        if second.total <= first.total:
            wins += 1
    assert wins >= 18  # descent on >= 90% of seeded trials


def test_non_finite_loss_raises_numeric_error(tiny_frame_grid, tiny_annotations):
    model = _tiny()
    model.params["cls.w"][0, 0] = np.nan
    mem = init_memory(2, 2, 8, 0.99, seed=1)
    with pytest.raises(NumericError):
        train_step(_frame(tiny_frame_grid, tiny_annotations), model, mem, OptState())


def test_no_memory_variant_runs_without_bank(tiny_frame_grid, tiny_annotations):
    model = _tiny(use_memory=False)
    bd = train_step(_frame(tiny_frame_grid, tiny_annotations), model, None, OptState(lr=1e-3))
    assert bd.asl == 0.0
    assert np.isfinite(bd.total)
    assert "slot_embed" not in model.params


def test_adam_and_sgd_both_step(tiny_frame_grid, tiny_annotations):
    for kind in ("sgd", "adam"):
        model = _tiny()
        mem = init_memory(2, 2, 8, 0.99, seed=1)
        before = model.params["queries"].copy()
        train_step(
            _frame(tiny_frame_grid, tiny_annotations), model, mem, OptState(kind=kind, lr=1e-3)
        )
        assert not np.array_equal(model.params["queries"], before)


def test_gate_strategies_affect_sampled_memory(tiny_frame_grid, tiny_annotations):
    model = _tiny()
    mem = init_memory(2, 2, 8, 0.99, seed=1)
    rng = np.random.default_rng(0)
    frame = _frame(tiny_frame_grid, tiny_annotations)
    for strategy in ("score", "full", "random", "oracle"):
        bd = train_step(
            _frame(tiny_frame_grid, tiny_annotations),
            DetectorModel(model.cfg, seed=0),
            init_memory(2, 2, 8, 0.99, seed=1),
            OptState(lr=1e-3),
            strategy=strategy,
            rng=rng,
        )
        assert np.isfinite(bd.total)
