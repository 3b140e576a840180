"""End-to-end toy detector.

The encoder runs joint self-attention over image tokens plus memory tokens.
Slot presence scores gate the raw prototype bank into a sampled memory, and
each decoder block attends to its own queries, then to the encoded image,
then to the sampled memory. Prediction heads emit per-class sigmoid
probabilities and sigmoid-normalized (cx, cy, w, h) boxes. Matching is exact
minimum-cost assignment; losses are focal + L1 + generalized-IoU plus the
asymmetric slot loss. All backward passes are analytic; the prototype bank
itself is never a gradient parameter.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import nn, sampling
from .assignment import solve_assignment
from .errors import NumericError
from .memory import ContextMemory, extract_instance_features, memory_tokens, momentum_update
from .sampling import SamplerParams, binarize, classify_slots_fwd, classify_slots_bwd
from .stream import render_features_fwd, render_features_bwd


# ---------------------------------------------------------------------------
# configuration and parameters
# ---------------------------------------------------------------------------


@dataclass
class ModelConfig:
    num_classes: int
    num_prototypes: int = 3
    d_model: int = 32
    num_heads: int = 4
    enc_layers: int = 2
    dec_layers: int = 2
    num_queries: int = 20
    ffn_hidden: int = 64
    patch: int = 8
    channels: int = 3
    tokens_h: int = 8
    tokens_w: int = 8
    thresholds: tuple = (0.3, 0.5, 0.7)
    use_memory: bool = True
    aux_loss: bool = True
    tied_qk_init: bool = True  # key projections start as copies of the query projections  # Hungarian loss after every decoder block, shared heads
    focal_alpha: float = 0.25
    focal_gamma: float = 2.0
    asl_gamma_pos: float = 0.0
    asl_gamma_neg: float = 4.0
    asl_clip: float = 0.05

    def __post_init__(self):
        if self.d_model % self.num_heads != 0:
            raise ValueError(f"d_model {self.d_model} not divisible by {self.num_heads} heads")
        if self.d_model % 4 != 0:
            raise ValueError("d_model must be divisible by 4 for 2-d positional encodings")

    @property
    def num_tokens(self) -> int:
        return self.tokens_h * self.tokens_w

    @property
    def num_slots(self) -> int:
        return self.num_classes * self.num_prototypes


def sinusoidal_pos_enc(tokens_h: int, tokens_w: int, d_model: int) -> np.ndarray:
    """Fixed 2-d sine/cosine position codes, one half per axis."""
    half = d_model // 2
    dim_t = 10000.0 ** (2.0 * (np.arange(half) // 2) / half)

    def axis_code(positions):
        vals = positions[:, None] / dim_t[None, :]
        out = np.empty((positions.size, half))
        out[:, 0::2] = np.sin(vals[:, 0::2])
        out[:, 1::2] = np.cos(vals[:, 1::2])
        return out

    ys, xs = np.meshgrid(np.arange(tokens_h), np.arange(tokens_w), indexing="ij")
    return np.concatenate(
        [axis_code(ys.reshape(-1).astype(float)), axis_code(xs.reshape(-1).astype(float))], axis=1
    )


_ATTN_FIELDS = ("wq", "wk", "wv", "wo", "bq", "bk", "bv", "bo")


class DetectorModel:
    """Holds every learnable array in one flat name -> ndarray dict.

    The optimizer updates arrays in place, so views handed out (for example
    through ``sampler_params``) stay current.
    """

    def __init__(self, cfg: ModelConfig, seed: int = 0):
        self.cfg = cfg
        rng = np.random.default_rng(seed)
        d = cfg.d_model
        p: dict[str, np.ndarray] = {}

        in_dim = cfg.patch * cfg.patch * cfg.channels
        p["extractor.w"] = nn.uniform_init(rng, (in_dim, d), in_dim)
        p["extractor.b"] = np.zeros(d)
        # embeddings use unit-normal init so queries break symmetry quickly;
        # weight matrices keep the uniform fan-in init
        p["queries"] = rng.standard_normal((cfg.num_queries, d))

        def add_attn(prefix):
            ap = nn.init_attention_params(rng, d, cfg.num_heads, tied_qk=cfg.tied_qk_init)
            for f in _ATTN_FIELDS:
                p[f"{prefix}.{f}"] = getattr(ap, f)

        def add_ln(prefix):
            p[f"{prefix}.g"] = np.ones(d)
            p[f"{prefix}.b"] = np.zeros(d)

        def add_ffn(prefix):
            p[f"{prefix}.w1"] = nn.uniform_init(rng, (d, cfg.ffn_hidden), d)
            p[f"{prefix}.b1"] = np.zeros(cfg.ffn_hidden)
            p[f"{prefix}.w2"] = nn.uniform_init(rng, (cfg.ffn_hidden, d), cfg.ffn_hidden)
            p[f"{prefix}.b2"] = np.zeros(d)

        for i in range(cfg.enc_layers):
            add_attn(f"enc{i}.attn")
            add_ln(f"enc{i}.ln1")
            add_ffn(f"enc{i}.ffn")
            add_ln(f"enc{i}.ln2")
        for i in range(cfg.dec_layers):
            add_attn(f"dec{i}.self")
            add_ln(f"dec{i}.ln1")
            add_attn(f"dec{i}.cross")
            add_ln(f"dec{i}.ln2")
            if cfg.use_memory:
                add_attn(f"dec{i}.mem")
                add_ln(f"dec{i}.ln3")
            add_ffn(f"dec{i}.ffn")
            add_ln(f"dec{i}.ln4")

        p["cls.w"] = nn.uniform_init(rng, (d, cfg.num_classes), d)
        # focal-loss prior init: class probabilities start near 0.01 so the
        # background term is quiet from the first step
        p["cls.b"] = np.full(cfg.num_classes, -math.log((1.0 - 0.01) / 0.01))
        p["box.w"] = nn.uniform_init(rng, (d, 4), d)
        p["box.b"] = np.zeros(4)

        self._sampler: SamplerParams | None = None
        if cfg.use_memory:
            p["slot_embed"] = rng.standard_normal((cfg.num_slots, d))
            sp = sampling.init_sampler_params(
                cfg.num_classes,
                cfg.num_prototypes,
                d,
                cfg.thresholds,
                rng,
                gamma_pos=cfg.asl_gamma_pos,
                gamma_neg=cfg.asl_gamma_neg,
                clip=cfg.asl_clip,
            )
            p["sampler.head_w1"] = sp.head_w1
            p["sampler.head_b1"] = sp.head_b1
            p["sampler.head_w2"] = sp.head_w2
            p["sampler.head_b2"] = sp.head_b2
            p["sampler.no_class"] = sp.no_class
            p["sampler.proj_w"] = sp.proj_w
            p["sampler.proj_b"] = sp.proj_b
            self._sampler = sp

        self.params = p
        self.pos = sinusoidal_pos_enc(cfg.tokens_h, cfg.tokens_w, d)

    def attn(self, prefix: str) -> nn.AttentionParams:
        return nn.AttentionParams(
            num_heads=self.cfg.num_heads,
            **{f: self.params[f"{prefix}.{f}"] for f in _ATTN_FIELDS},
        )

    @property
    def sampler_params(self) -> SamplerParams:
        if self._sampler is None:
            raise ValueError("model built without a memory pathway")
        return self._sampler

    def zero_grads(self) -> dict[str, np.ndarray]:
        return {k: np.zeros_like(v) for k, v in self.params.items()}


# ---------------------------------------------------------------------------
# encoder
# ---------------------------------------------------------------------------


def _enc_layer_fwd(model, x, i):
    p = model.params
    a, ca = nn.attention_fwd(x, x, x, model.attn(f"enc{i}.attn"))
    x1, cl1 = nn.layer_norm_fwd(x + a, p[f"enc{i}.ln1.g"], p[f"enc{i}.ln1.b"])
    f, cf = nn.ffn_fwd(
        x1, p[f"enc{i}.ffn.w1"], p[f"enc{i}.ffn.b1"], p[f"enc{i}.ffn.w2"], p[f"enc{i}.ffn.b2"]
    )
    x2, cl2 = nn.layer_norm_fwd(x1 + f, p[f"enc{i}.ln2.g"], p[f"enc{i}.ln2.b"])
    return x2, (ca, cl1, cf, cl2)


def _enc_layer_bwd(model, grads, dx2, i, cache):
    ca, cl1, cf, cl2 = cache
    dsum2, dg2, db2 = nn.layer_norm_bwd(dx2, cl2)
    grads[f"enc{i}.ln2.g"] += dg2
    grads[f"enc{i}.ln2.b"] += db2
    dx1_ffn, fg = nn.ffn_bwd(dsum2, cf)
    for k, v in fg.items():
        grads[f"enc{i}.ffn.{k}"] += v
    dx1 = dsum2 + dx1_ffn
    dsum1, dg1, db1 = nn.layer_norm_bwd(dx1, cl1)
    grads[f"enc{i}.ln1.g"] += dg1
    grads[f"enc{i}.ln1.b"] += db1
    dq, dk, dv, ag = nn.attention_bwd(dsum1, ca)
    for k, v in ag.items():
        grads[f"enc{i}.attn.{k}"] += v
    return dsum1 + dq + dk + dv


def encode_fwd(model: DetectorModel, feats: np.ndarray, mem_tokens: np.ndarray | None):
    """Joint self-attention over image tokens (plus memory tokens if given).

    feats (HW, d) gets the fixed spatial position code; memory tokens come in
    with their slot embeddings already added. Returns (f_enc, m_enc, cache).
    """
    hw = model.cfg.num_tokens
    if feats.shape != model.pos.shape:
        raise ValueError(f"feature tokens {feats.shape} do not match grid {model.pos.shape}")
    x = feats + model.pos
    if mem_tokens is not None:
        if mem_tokens.shape[1] != model.cfg.d_model:
            raise ValueError(
                f"memory token feature axis {mem_tokens.shape[1]} != d_model {model.cfg.d_model}"
            )
        x = np.concatenate([x, mem_tokens], axis=0)
    caches = []
    for i in range(model.cfg.enc_layers):
        x, c = _enc_layer_fwd(model, x, i)
        caches.append(c)
    m_enc = x[hw:] if mem_tokens is not None else None
    return x[:hw], m_enc, caches


def encode(feats, mem_tokens, model: DetectorModel):
    f_enc, m_enc, _ = encode_fwd(model, feats, mem_tokens)
    return f_enc, m_enc


def encode_bwd(model, grads, df_enc, dm_enc, caches):
    dx = df_enc if dm_enc is None else np.concatenate([df_enc, dm_enc], axis=0)
    for i in reversed(range(model.cfg.enc_layers)):
        dx = _enc_layer_bwd(model, grads, dx, i, caches[i])
    hw = model.cfg.num_tokens
    return dx[:hw], (dx[hw:] if dm_enc is not None else None)


# ---------------------------------------------------------------------------
# memory-guided decoder
# ---------------------------------------------------------------------------


def _dec_block_fwd(model, o, f_enc, m_sampled, i):
    p = model.params
    a1, c_self = nn.attention_fwd(o, o, o, model.attn(f"dec{i}.self"))
    o1, cl1 = nn.layer_norm_fwd(o + a1, p[f"dec{i}.ln1.g"], p[f"dec{i}.ln1.b"])
    a2, c_cross = nn.attention_fwd(o1, f_enc, f_enc, model.attn(f"dec{i}.cross"))
    o2, cl2 = nn.layer_norm_fwd(o1 + a2, p[f"dec{i}.ln2.g"], p[f"dec{i}.ln2.b"])
    if m_sampled is not None:
        a3, c_mem = nn.attention_fwd(o2, m_sampled, m_sampled, model.attn(f"dec{i}.mem"))
        o3, cl3 = nn.layer_norm_fwd(o2 + a3, p[f"dec{i}.ln3.g"], p[f"dec{i}.ln3.b"])
    else:
        o3, c_mem, cl3 = o2, None, None
    f, cf = nn.ffn_fwd(
        o3, p[f"dec{i}.ffn.w1"], p[f"dec{i}.ffn.b1"], p[f"dec{i}.ffn.w2"], p[f"dec{i}.ffn.b2"]
    )
    o4, cl4 = nn.layer_norm_fwd(o3 + f, p[f"dec{i}.ln4.g"], p[f"dec{i}.ln4.b"])
    return o4, (c_self, cl1, c_cross, cl2, c_mem, cl3, cf, cl4)


def _dec_block_bwd(model, grads, do4, i, cache):
    c_self, cl1, c_cross, cl2, c_mem, cl3, cf, cl4 = cache
    dsum4, dg4, db4 = nn.layer_norm_bwd(do4, cl4)
    grads[f"dec{i}.ln4.g"] += dg4
    grads[f"dec{i}.ln4.b"] += db4
    do3_ffn, fg = nn.ffn_bwd(dsum4, cf)
    for k, v in fg.items():
        grads[f"dec{i}.ffn.{k}"] += v
    do3 = dsum4 + do3_ffn

    dm = None
    if c_mem is not None:
        dsum3, dg3, db3 = nn.layer_norm_bwd(do3, cl3)
        grads[f"dec{i}.ln3.g"] += dg3
        grads[f"dec{i}.ln3.b"] += db3
        dq3, dk3, dv3, ag = nn.attention_bwd(dsum3, c_mem)
        for k, v in ag.items():
            grads[f"dec{i}.mem.{k}"] += v
        do2 = dsum3 + dq3
        dm = dk3 + dv3
    else:
        do2 = do3

    dsum2, dg2, db2 = nn.layer_norm_bwd(do2, cl2)
    grads[f"dec{i}.ln2.g"] += dg2
    grads[f"dec{i}.ln2.b"] += db2
    dq2, dk2, dv2, ag = nn.attention_bwd(dsum2, c_cross)
    for k, v in ag.items():
        grads[f"dec{i}.cross.{k}"] += v
    do1 = dsum2 + dq2
    df = dk2 + dv2

    dsum1, dg1, db1 = nn.layer_norm_bwd(do1, cl1)
    grads[f"dec{i}.ln1.g"] += dg1
    grads[f"dec{i}.ln1.b"] += db1
    dq1, dk1, dv1, ag = nn.attention_bwd(dsum1, c_self)
    for k, v in ag.items():
        grads[f"dec{i}.self.{k}"] += v
    do = dsum1 + dq1 + dk1 + dv1
    return do, df, dm


def decode_fwd(model: DetectorModel, queries, f_enc, m_sampled):
    """Returns (final queries, block caches, per-block outputs)."""
    o = queries
    caches = []
    outputs = []
    for i in range(model.cfg.dec_layers):
        o, c = _dec_block_fwd(model, o, f_enc, m_sampled, i)
        caches.append(c)
        outputs.append(o)
    return o, caches, outputs


def decode_mgd(queries, f_enc, m_sampled, model: DetectorModel):
    return decode_fwd(model, queries, f_enc, m_sampled)[0]


def decode_bwd(model, grads, do_blocks, caches, f_shape, m_shape):
    """do_blocks[i] is the loss gradient at block i's output (the last entry
    is the gradient at the final output; extra entries feed the per-block
    auxiliary heads)."""
    df_total = np.zeros(f_shape)
    dm_total = np.zeros(m_shape) if m_shape is not None else None
    n = model.cfg.dec_layers
    do = do_blocks[-1]
    for i in reversed(range(n)):
        do, df, dm = _dec_block_bwd(model, grads, do, i, caches[i])
        df_total += df
        if dm is not None:
            dm_total += dm
        if i > 0:
            do = do + do_blocks[i - 1]
    return do, df_total, dm_total


# ---------------------------------------------------------------------------
# prediction heads
# ---------------------------------------------------------------------------


@dataclass
class Detections:
    class_probs: np.ndarray  # (N_q, C) in (0, 1)
    boxes: np.ndarray  # (N_q, 4) cxcywh in (0, 1)

    def top(self):
        """(class_id, score) of the best class per query."""
        ids = self.class_probs.argmax(axis=1)
        return ids, self.class_probs[np.arange(len(ids)), ids]


def _sigmoid(z):
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def predict_heads_fwd(model: DetectorModel, o: np.ndarray):
    p = model.params
    logits, c1 = nn.linear_fwd(o, p["cls.w"], p["cls.b"])
    raw, c2 = nn.linear_fwd(o, p["box.w"], p["box.b"])
    probs = _sigmoid(logits)
    boxes = _sigmoid(raw)
    return Detections(class_probs=probs, boxes=boxes), (c1, c2, probs, boxes)


def predict_heads(queries_out, model: DetectorModel) -> Detections:
    return predict_heads_fwd(model, queries_out)[0]


def predict_heads_bwd(model, grads, dprobs, dboxes, cache):
    c1, c2, probs, boxes = cache
    dlogits = dprobs * probs * (1.0 - probs)
    draw = dboxes * boxes * (1.0 - boxes)
    do_cls, dw, db = nn.linear_bwd(dlogits, c1)
    grads["cls.w"] += dw
    grads["cls.b"] += db
    do_box, dw, db = nn.linear_bwd(draw, c2)
    grads["box.w"] += dw
    grads["box.b"] += db
    return do_cls + do_box


# ---------------------------------------------------------------------------
# generalized IoU (differentiable in the predicted box)
# ---------------------------------------------------------------------------


def _corners(boxes):
    cx, cy, w, h = boxes[..., 0], boxes[..., 1], boxes[..., 2], boxes[..., 3]
    return cx - w / 2.0, cy - h / 2.0, cx + w / 2.0, cy + h / 2.0


def giou_pairs_fwd(pred: np.ndarray, gt: np.ndarray):
    """Elementwise GIoU of matched (M, 4) cxcywh boxes, with cache."""
    px0, py0, px1, py1 = _corners(pred)
    gx0, gy0, gx1, gy1 = _corners(gt)
    ix0, iy0 = np.maximum(px0, gx0), np.maximum(py0, gy0)
    ix1, iy1 = np.minimum(px1, gx1), np.minimum(py1, gy1)
    iw, ih = np.maximum(ix1 - ix0, 0.0), np.maximum(iy1 - iy0, 0.0)
    inter = iw * ih
    area_p = (px1 - px0) * (py1 - py0)
    area_g = (gx1 - gx0) * (gy1 - gy0)
    union = area_p + area_g - inter
    ex0, ey0 = np.minimum(px0, gx0), np.minimum(py0, gy0)
    ex1, ey1 = np.maximum(px1, gx1), np.maximum(py1, gy1)
    ew, eh = ex1 - ex0, ey1 - ey0
    enclose = ew * eh
    giou = inter / union + union / enclose - 1.0
    cache = (px0, py0, px1, py1, gx0, gy0, gx1, gy1, iw, ih, inter, union, enclose, ew, eh)
    return giou, cache


def giou_pairs_bwd(dgiou: np.ndarray, cache):
    """dGIoU/dpred for the cached pairs; subgradient choice at min/max ties."""
    px0, py0, px1, py1, gx0, gy0, gx1, gy1, iw, ih, inter, union, enclose, ew, eh = cache
    live = (iw > 0.0) & (ih > 0.0)

    # d(intersection)/d(pred corner)
    di_px0 = np.where(live & (px0 >= gx0), -ih, 0.0)
    di_px1 = np.where(live & (px1 <= gx1), ih, 0.0)
    di_py0 = np.where(live & (py0 >= gy0), -iw, 0.0)
    di_py1 = np.where(live & (py1 <= gy1), iw, 0.0)
    # d(pred area)
    da_px0, da_px1 = -(py1 - py0), (py1 - py0)
    da_py0, da_py1 = -(px1 - px0), (px1 - px0)
    # d(enclosing area)
    de_px0 = np.where(px0 <= gx0, -eh, 0.0)
    de_px1 = np.where(px1 >= gx1, eh, 0.0)
    de_py0 = np.where(py0 <= gy0, -ew, 0.0)
    de_py1 = np.where(py1 >= gy1, ew, 0.0)

    u2 = union * union
    e2 = enclose * enclose

    def per_coord(di, da, de):
        du = da - di
        return (di * union - inter * du) / u2 + (du * enclose - union * de) / e2

    g_px0 = per_coord(di_px0, da_px0, de_px0) * dgiou
    g_px1 = per_coord(di_px1, da_px1, de_px1) * dgiou
    g_py0 = per_coord(di_py0, da_py0, de_py0) * dgiou
    g_py1 = per_coord(di_py1, da_py1, de_py1) * dgiou

    out = np.stack(
        [g_px0 + g_px1, g_py0 + g_py1, (g_px1 - g_px0) / 2.0, (g_py1 - g_py0) / 2.0], axis=-1
    )
    return out


def giou_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Pairwise GIoU, a (A, 4) x b (B, 4) -> (A, B). No gradient."""
    va = np.repeat(a, b.shape[0], axis=0)
    vb = np.tile(b, (a.shape[0], 1))
    return giou_pairs_fwd(va, vb)[0].reshape(a.shape[0], b.shape[0])


# ---------------------------------------------------------------------------
# matching
# ---------------------------------------------------------------------------


@dataclass
class MatchWeights:
    focal: float = 2.0
    l1: float = 5.0
    giou: float = 2.0


def hungarian_match(
    preds: Detections,
    gts,
    weights: MatchWeights | None = None,
    focal_alpha: float = 0.25,
    focal_gamma: float = 2.0,
) -> list[tuple[int, int]]:
    """Exact one-to-one matching, returned as (query_idx, gt_idx) pairs.

    gts is a list of (class_id, box). The per-pair cost is the focal
    classification cost plus the summed coordinate L1 plus (1 - GIoU), with
    the matching weights. Ties resolve toward the smallest query index.
    """
    weights = weights or MatchWeights()
    n_q = preds.class_probs.shape[0]
    n_g = len(gts)
    if n_g == 0:
        return []
    if n_g > n_q:
        raise ValueError(f"{n_g} ground truths exceed {n_q} queries")

    gt_cls = np.array([c for c, _ in gts], dtype=np.int64)
    gt_box = np.array([b for _, b in gts])
    p = np.clip(preds.class_probs[:, gt_cls].T, 1e-7, 1.0 - 1e-7)  # (G, Q)
    pos = focal_alpha * (1.0 - p) ** focal_gamma * (-np.log(p))
    neg = (1.0 - focal_alpha) * p**focal_gamma * (-np.log(1.0 - p))
    cls_cost = pos - neg
    l1_cost = np.abs(gt_box[:, None, :] - preds.boxes[None, :, :]).sum(axis=-1)
    giou_cost = 1.0 - giou_matrix(gt_box, preds.boxes)

    cost = weights.focal * cls_cost + weights.l1 * l1_cost + weights.giou * giou_cost
    cols = solve_assignment(cost)
    return [(cols[g], g) for g in range(n_g)]


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------


@dataclass
class LossWeights:
    focal: float = 1.0
    l1: float = 5.0
    giou: float = 2.0
    asl: float = 0.005


@dataclass
class LossBreakdown:
    focal: float
    l1: float
    giou: float
    asl: float
    total: float


def detection_losses(
    preds: Detections,
    gts,
    assignment,
    asl: float = 0.0,
    weights: LossWeights | None = None,
    focal_alpha: float = 0.25,
    focal_gamma: float = 2.0,
):
    """Focal over every (query, class) pair, L1 and GIoU over matched boxes.

    Matched queries carry target 1 at their ground-truth class, everything
    else 0. The focal sum is normalized by the number of matched pairs
    (at least 1); L1 and GIoU average over matched pairs only. Returns
    (LossBreakdown, cache) with the cache feeding ``detection_losses_bwd``.
    """
    weights = weights or LossWeights()
    probs, boxes = preds.class_probs, preds.boxes
    n_q, n_c = probs.shape

    targets = np.zeros_like(probs)
    for q, g in assignment:
        targets[q, gts[g][0]] = 1.0

    pc = np.clip(probs, 1e-7, 1.0 - 1e-7)
    pos_mask = targets == 1.0
    a, g = focal_alpha, focal_gamma
    pos_term = -a * (1.0 - pc) ** g * np.log(pc)
    neg_term = -(1.0 - a) * pc**g * np.log1p(-pc)
    focal_norm = max(1, len(assignment))
    focal = float(np.where(pos_mask, pos_term, neg_term).sum() / focal_norm)

    m = len(assignment)
    if m > 0:
        q_idx = np.array([q for q, _ in assignment], dtype=np.int64)
        gt_box = np.array([gts[g][1] for _, g in assignment])
        diff = boxes[q_idx] - gt_box
        l1 = float(np.abs(diff).mean())
        giou_vals, gcache = giou_pairs_fwd(boxes[q_idx], gt_box)
        giou_loss = float((1.0 - giou_vals).mean())
    else:
        q_idx, diff, gcache = None, None, None
        l1, giou_loss = 0.0, 0.0

    total = weights.focal * focal + weights.l1 * l1 + weights.giou * giou_loss + weights.asl * asl
    breakdown = LossBreakdown(focal=focal, l1=l1, giou=giou_loss, asl=asl, total=total)
    cache = (probs, pc, pos_mask, q_idx, diff, gcache, weights, a, g, focal_norm, m)
    return breakdown, cache


def detection_losses_bwd(cache):
    """Gradients of the weighted total w.r.t. class probs and boxes."""
    probs, pc, pos_mask, q_idx, diff, gcache, weights, a, g, focal_norm, m = cache
    n_q = probs.shape[0]
    in_range = (probs > 1e-7) & (probs < 1.0 - 1e-7)
    omp = 1.0 - pc
    dpos = a * (g * omp ** (g - 1.0) * np.log(pc) - (omp**g) / pc)
    dneg = (1.0 - a) * (-g * pc ** (g - 1.0) * np.log1p(-pc) + (pc**g) / omp)
    dprobs = np.where(pos_mask, dpos, dneg) * in_range
    dprobs *= weights.focal / focal_norm

    dboxes = np.zeros((n_q, 4))
    if m > 0:
        dl1 = np.sign(diff) * (weights.l1 / (4.0 * m))
        dgiou = giou_pairs_bwd(np.full(m, -weights.giou / m), gcache)
        np.add.at(dboxes, q_idx, dl1 + dgiou)
    return dprobs, dboxes


# ---------------------------------------------------------------------------
# full forward / backward over one frame
# ---------------------------------------------------------------------------


@dataclass
class ForwardPass:
    detections: Detections
    slot_probs: np.ndarray | None  # (C, K)
    gates: np.ndarray | None  # (T, C, K)
    f_enc: np.ndarray  # (HW, d)
    m_enc: np.ndarray | None
    m_sampled: np.ndarray | None
    aux_detections: list = field(default_factory=list)  # per earlier decoder block
    caches: dict = field(repr=False, default_factory=dict)


def forward_frame(
    model: DetectorModel,
    mem: ContextMemory | None,
    grid: np.ndarray,
    gates_override: np.ndarray | None = None,
) -> ForwardPass:
    cfg = model.cfg
    p = model.params
    feats, c_ex = render_features_fwd(grid, p["extractor.w"], p["extractor.b"], cfg.patch)

    if cfg.use_memory:
        if mem is None:
            raise ValueError("memory-enabled model needs a prototype bank")
        mtok = memory_tokens(mem, p["slot_embed"])
    else:
        mtok = None
    f_enc, m_enc, c_enc = encode_fwd(model, feats, mtok)

    slot_probs = gates = m_sampled = None
    c_cls = c_samp = None
    if cfg.use_memory:
        sp = model.sampler_params
        slot_probs, c_cls = classify_slots_fwd(m_enc, sp)
        gates = gates_override if gates_override is not None else binarize(slot_probs, sp.thresholds)
        m_sampled, c_samp = sampling.sample_memory_fwd(mem, gates, sp)

    o, c_dec, block_outputs = decode_fwd(model, p["queries"], f_enc, m_sampled)
    dets, c_heads = predict_heads_fwd(model, o)

    aux_dets, aux_caches = [], []
    if cfg.aux_loss:
        for o_l in block_outputs[:-1]:  # final block is the main head
            d_l, c_l = predict_heads_fwd(model, o_l)
            aux_dets.append(d_l)
            aux_caches.append(c_l)

    caches = {
        "extract": c_ex,
        "enc": c_enc,
        "cls": c_cls,
        "samp": c_samp,
        "dec": c_dec,
        "heads": c_heads,
        "aux_heads": aux_caches,
    }
    return ForwardPass(
        detections=dets,
        slot_probs=slot_probs,
        gates=gates,
        f_enc=f_enc,
        m_enc=m_enc,
        m_sampled=m_sampled,
        aux_detections=aux_dets,
        caches=caches,
    )


def backward_frame(
    model: DetectorModel,
    fp: ForwardPass,
    head_grads: list,
    dslot_probs: np.ndarray | None = None,
) -> dict[str, np.ndarray]:
    """head_grads: one (dprobs, dboxes) pair per supervised decoder level,
    auxiliary levels first and the final head last."""
    cfg = model.cfg
    grads = model.zero_grads()

    n_blocks = max(cfg.dec_layers, 1)
    do_blocks = [np.zeros_like(model.params["queries"]) for _ in range(n_blocks)]
    dp, db = head_grads[-1]
    do_blocks[-1] = predict_heads_bwd(model, grads, dp, db, fp.caches["heads"])
    for lvl, (dp, db) in enumerate(head_grads[:-1]):
        do_blocks[lvl] += predict_heads_bwd(model, grads, dp, db, fp.caches["aux_heads"][lvl])

    m_shape = fp.m_sampled.shape if fp.m_sampled is not None else None
    do, df, dm_sampled = decode_bwd(
        model, grads, do_blocks, fp.caches["dec"], fp.f_enc.shape, m_shape
    )
    grads["queries"] += do

    dm_enc = None
    if cfg.use_memory:
        sg = sampling.sample_memory_bwd(dm_sampled, fp.caches["samp"])
        for k, v in sg.items():
            grads[f"sampler.{k}"] += v
        if dslot_probs is not None:
            dm_enc, cg = classify_slots_bwd(dslot_probs, fp.caches["cls"])
            for k, v in cg.items():
                grads[f"sampler.{k}"] += v
        else:
            dm_enc = np.zeros_like(fp.m_enc)

    dfeats, dmtok = encode_bwd(model, grads, df, dm_enc, fp.caches["enc"])
    if cfg.use_memory:
        grads["slot_embed"] += dmtok
    eg = render_features_bwd(dfeats, fp.caches["extract"])
    grads["extractor.w"] += eg["w"]
    grads["extractor.b"] += eg["b"]
    return grads


def full_loss_and_grads(
    model: DetectorModel,
    mem: ContextMemory | None,
    grid: np.ndarray,
    annotations,
    gates_override: np.ndarray | None = None,
    assignment=None,
    with_asl: bool = True,
    loss_weights: LossWeights | None = None,
    match_weights: MatchWeights | None = None,
):
    """One frame's total loss and its gradient for every learnable array.

    Each supervised decoder level (auxiliary blocks plus the final output)
    gets its own assignment and detection losses; the breakdown sums them.
    Assignments and gates are constants for the gradient: if ``assignment``
    (a list, one entry per level) is not supplied, they are computed from
    this forward pass and frozen. Returns
    (breakdown, grads, forward_pass, assignments).
    """
    cfg = model.cfg
    loss_weights = loss_weights or LossWeights()
    fp = forward_frame(model, mem, grid, gates_override=gates_override)
    if not (
        np.isfinite(fp.detections.class_probs).all() and np.isfinite(fp.detections.boxes).all()
    ):
        raise NumericError("non-finite detector outputs")

    levels = fp.aux_detections + [fp.detections]
    if assignment is None:
        assignment = [
            hungarian_match(dets, annotations, match_weights, cfg.focal_alpha, cfg.focal_gamma)
            for dets in levels
        ]

    asl_val, dp_asl = 0.0, None
    if cfg.use_memory and with_asl:
        sp = model.sampler_params
        tgt = sampling.slot_targets(annotations, cfg.num_classes, cfg.num_prototypes)
        asl_val, dp_asl = sampling.asymmetric_loss(
            fp.slot_probs, tgt, sp.gamma_pos, sp.gamma_neg, sp.clip
        )
        dp_asl = dp_asl * loss_weights.asl

    focal = l1 = giou = 0.0
    head_grads = []
    for dets, assign in zip(levels, assignment):
        bd_l, lcache = detection_losses(
            dets,
            annotations,
            assign,
            asl=0.0,
            weights=loss_weights,
            focal_alpha=cfg.focal_alpha,
            focal_gamma=cfg.focal_gamma,
        )
        focal += bd_l.focal
        l1 += bd_l.l1
        giou += bd_l.giou
        head_grads.append(detection_losses_bwd(lcache))

    total = (
        loss_weights.focal * focal
        + loss_weights.l1 * l1
        + loss_weights.giou * giou
        + loss_weights.asl * asl_val
    )
    breakdown = LossBreakdown(focal=focal, l1=l1, giou=giou, asl=asl_val, total=total)
    if not math.isfinite(breakdown.total):
        raise NumericError(f"non-finite training loss: {breakdown}")
    grads = backward_frame(model, fp, head_grads, dp_asl)
    return breakdown, grads, fp, assignment


# ---------------------------------------------------------------------------
# optimizer and training step
# ---------------------------------------------------------------------------


class PresenceReplay:
    """Recent encoded-memory snapshots for batched presence-head training.

    A single frame per step gives the slot heads a high-variance signal on a
    drifting representation; averaging the head gradient over a window of
    recent frames lets them converge within a short run. Only the head
    parameters are touched (in place, via their own adam moments); the
    encoder keeps receiving the ordinary single-frame loss gradient.
    """

    def __init__(self, capacity: int = 128, batch: int = 16, lr: float = 1e-3):
        self.capacity = capacity
        self.batch = batch
        self.lr = lr
        self.items: list = []
        self._m: dict = {}
        self._v: dict = {}
        self._t = 0

    def push(self, m_enc: np.ndarray, targets: np.ndarray):
        self.items.append((m_enc.copy(), targets.copy()))
        if len(self.items) > self.capacity:
            self.items.pop(0)

    def step(self, sp: SamplerParams, rng: np.random.Generator):
        if not self.items:
            return
        idx = rng.choice(len(self.items), size=min(self.batch, len(self.items)), replace=False)
        total = {k: 0.0 for k in ("head_w1", "head_b1", "head_w2", "head_b2")}
        for i in idx:
            m_enc, tgt = self.items[i]
            p, cache = classify_slots_fwd(m_enc, sp)
            _, dp = sampling.asymmetric_loss(p, tgt, sp.gamma_pos, sp.gamma_neg, sp.clip)
            _, grads = classify_slots_bwd(dp, cache)
            for k in total:
                total[k] = total[k] + grads[k]
        params = {
            "head_w1": sp.head_w1,
            "head_b1": sp.head_b1,
            "head_w2": sp.head_w2,
            "head_b2": sp.head_b2,
        }
        self._t += 1
        for k, p in params.items():
            g = total[k] / len(idx)
            if k not in self._m:
                self._m[k] = np.zeros_like(p)
                self._v[k] = np.zeros_like(p)
            self._m[k] = 0.9 * self._m[k] + 0.1 * g
            self._v[k] = 0.999 * self._v[k] + 0.001 * g * g
            mhat = self._m[k] / (1.0 - 0.9**self._t)
            vhat = self._v[k] / (1.0 - 0.999**self._t)
            p -= self.lr * mhat / (np.sqrt(vhat) + 1e-8)


@dataclass
class OptState:
    kind: str = "sgd"
    lr: float = 1e-2
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    head_lr_scale: float = 1.0  # extra rate for the prediction heads
    sampler_lr_scale: float = 1.0  # extra rate for the slot presence heads
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def _key_lr(state: OptState, key: str) -> float:
    if state.head_lr_scale != 1.0 and key.startswith(("cls.", "box.")):
        return state.lr * state.head_lr_scale
    if state.sampler_lr_scale != 1.0 and key.startswith("sampler.head_"):
        return state.lr * state.sampler_lr_scale
    return state.lr


def opt_step(params: dict, grads: dict, state: OptState):
    """In-place parameter update so that outstanding views stay valid."""
    if state.kind == "sgd":
        for k, p in params.items():
            p -= _key_lr(state, k) * grads[k]
        return
    if state.kind != "adam":
        raise ValueError(f"unknown optimizer {state.kind!r}")
    state.step += 1
    t = state.step
    for k, p in params.items():
        if k not in state.m:
            state.m[k] = np.zeros_like(p)
            state.v[k] = np.zeros_like(p)
        g = grads[k]
        state.m[k] = state.beta1 * state.m[k] + (1.0 - state.beta1) * g
        state.v[k] = state.beta2 * state.v[k] + (1.0 - state.beta2) * g * g
        mhat = state.m[k] / (1.0 - state.beta1**t)
        vhat = state.v[k] / (1.0 - state.beta2**t)
        p -= _key_lr(state, k) * mhat / (np.sqrt(vhat) + state.eps)


def train_step(
    frame,
    model: DetectorModel,
    mem: ContextMemory | None,
    opt_state: OptState,
    strategy: str = "score",
    rng: np.random.Generator | None = None,
    loss_weights: LossWeights | None = None,
    match_weights: MatchWeights | None = None,
    replay: PresenceReplay | None = None,
) -> LossBreakdown:
    """One optimization step on one frame, then the prototype-bank update.

    The memory update runs after the gradient step, pooling ground-truth-box
    features from this forward pass's encoded image tokens; the bank itself
    never receives gradients. Presence heads train only under the score
    strategy (the other strategies do not use them).
    """
    cfg = model.cfg
    gates_override = None
    with_asl = cfg.use_memory  # presence heads train under every strategy
    if cfg.use_memory and strategy != "score":
        sp = model.sampler_params
        gates_override = sampling.strategy_gates(
            strategy, None, sp, annotations=frame.annotations, rng=rng
        )

    breakdown, grads, fp, _ = full_loss_and_grads(
        model,
        mem,
        frame.grid,
        frame.annotations,
        gates_override=gates_override,
        with_asl=with_asl,
        loss_weights=loss_weights,
        match_weights=match_weights,
    )
    opt_step(model.params, grads, opt_state)

    if cfg.use_memory and replay is not None:
        tgt = sampling.slot_targets(frame.annotations, cfg.num_classes, cfg.num_prototypes)
        replay.push(fp.m_enc, tgt)
        replay.step(model.sampler_params, rng if rng is not None else np.random.default_rng(0))

    if cfg.use_memory and frame.annotations:
        f_grid = fp.f_enc.reshape(cfg.tokens_h, cfg.tokens_w, cfg.d_model)
        boxes = [(box, class_id) for class_id, box in frame.annotations]
        instances, _skipped = extract_instance_features(f_grid, boxes)
        momentum_update(mem, instances)
    return breakdown


def infer_frame(
    model: DetectorModel,
    mem: ContextMemory | None,
    frame,
    strategy: str = "score",
    rng: np.random.Generator | None = None,
) -> ForwardPass:
    """Forward-only pass; oracle gating reads the frame's annotations."""
    gates_override = None
    if model.cfg.use_memory and strategy != "score":
        sp = model.sampler_params
        gates_override = sampling.strategy_gates(
            strategy, None, sp, annotations=frame.annotations, rng=rng
        )
    return forward_frame(model, mem, frame.grid, gates_override=gates_override)
