"""Score-based selection of memory slots.

A small classification head per slot predicts, from the encoded memory
token, whether the slot's class is present in the current image. The
probabilities are binarized at several thresholds; gated-off slots are
replaced by a learnable no-class vector, and the per-threshold variants are
projected back to one vector per slot. The heads train with an asymmetric
multi-label loss; the binary gates themselves carry no gradient.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import nn
from .memory import ContextMemory


@dataclass
class SamplerParams:
    num_classes: int
    num_prototypes: int
    thresholds: tuple  # T strictly increasing values in (0, 1)
    head_w1: np.ndarray  # (S, d, d)
    head_b1: np.ndarray  # (S, d)
    head_w2: np.ndarray  # (S, d)
    head_b2: np.ndarray  # (S,)
    no_class: np.ndarray  # (d,)
    proj_w: np.ndarray  # (T*d, d)
    proj_b: np.ndarray  # (d,)
    gamma_pos: float = 0.0
    gamma_neg: float = 4.0
    clip: float = 0.05

    def __post_init__(self):
        t = tuple(self.thresholds)
        if len(t) < 1:
            raise ValueError("need at least one threshold")
        if any(not 0.0 < v < 1.0 for v in t):
            raise ValueError(f"thresholds {t} must lie in (0, 1)")
        if any(b <= a for a, b in zip(t, t[1:])):
            raise ValueError(f"thresholds {t} must be strictly increasing")
        self.thresholds = t

    @property
    def num_thresholds(self) -> int:
        return len(self.thresholds)


def init_sampler_params(
    num_classes: int,
    num_prototypes: int,
    dim: int,
    thresholds,
    rng: np.random.Generator,
    gamma_pos: float = 0.0,
    gamma_neg: float = 4.0,
    clip: float = 0.05,
) -> SamplerParams:
    s = num_classes * num_prototypes
    t = len(tuple(thresholds))
    if t < 1:
        raise ValueError("need at least one threshold")
    return SamplerParams(
        num_classes=num_classes,
        num_prototypes=num_prototypes,
        thresholds=tuple(thresholds),
        head_w1=nn.uniform_init(rng, (s, dim, dim), dim),
        head_b1=np.zeros((s, dim)),
        head_w2=nn.uniform_init(rng, (s, dim), dim),
        head_b2=np.zeros(s),
        no_class=np.zeros(dim),
        proj_w=nn.uniform_init(rng, (t * dim, dim), t * dim),
        proj_b=np.zeros(dim),
        gamma_pos=gamma_pos,
        gamma_neg=gamma_neg,
        clip=clip,
    )


def _sigmoid(z):
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def classify_slots_fwd(encoded_memory: np.ndarray, sp: SamplerParams):
    """Per-slot presence probability from encoded memory tokens.

    encoded_memory (S, d) -> p (C, K). Each slot has its own 2-layer head.
    """
    s = sp.num_classes * sp.num_prototypes
    if encoded_memory.shape != (s, sp.head_w1.shape[1]):
        raise ValueError(
            f"encoded memory shape {encoded_memory.shape} does not match "
            f"({s}, {sp.head_w1.shape[1]})"
        )
    pre = np.einsum("sd,sde->se", encoded_memory, sp.head_w1) + sp.head_b1
    hid, relu_mask = nn.relu_fwd(pre)
    z = (hid * sp.head_w2).sum(axis=1) + sp.head_b2
    p = _sigmoid(z)
    cache = (encoded_memory, relu_mask, hid, p, sp)
    return p.reshape(sp.num_classes, sp.num_prototypes), cache


def classify_slots(encoded_memory: np.ndarray, sp: SamplerParams) -> np.ndarray:
    return classify_slots_fwd(encoded_memory, sp)[0]


def classify_slots_bwd(grad_p: np.ndarray, cache):
    """Returns (grad_encoded_memory, param_grads) given dL/dp (C, K)."""
    encoded_memory, relu_mask, hid, p, sp = cache
    dz = grad_p.reshape(-1) * p * (1.0 - p)
    dhid = dz[:, None] * sp.head_w2
    dw2 = dz[:, None] * hid
    db2 = dz
    dpre = dhid * relu_mask
    dw1 = np.einsum("sd,se->sde", encoded_memory, dpre)
    db1 = dpre
    dmem = np.einsum("se,sde->sd", dpre, sp.head_w1)
    grads = {"head_w1": dw1, "head_b1": db1, "head_w2": dw2, "head_b2": db2}
    return dmem, grads


def binarize(p: np.ndarray, thresholds) -> np.ndarray:
    """Gates s (T, C, K): s[t] = 1 where p > thresholds[t], strict inequality."""
    t = np.asarray(tuple(thresholds), dtype=np.float64)
    return (p[None, :, :] > t[:, None, None]).astype(np.float64)


def sample_memory_fwd(mem: ContextMemory, gates: np.ndarray, sp: SamplerParams):
    """Gated memory fed to the decoder.

    For each slot, builds T vectors (prototype where the gate is on, the
    no-class vector where it is off), concatenates them and projects T*d -> d.
    The gates are constants with respect to gradients; prototypes carry no
    gradient either, so the backward pass touches only the no-class vector
    and the projection.
    """
    c, k, d = mem.prototypes.shape
    t = sp.num_thresholds
    if gates.shape != (t, c, k):
        raise ValueError(f"gates shape {gates.shape} does not match ({t}, {c}, {k})")
    protos = mem.prototypes.reshape(c * k, d)
    g = gates.reshape(t, c * k).T  # (S, T)
    pieces = g[:, :, None] * protos[:, None, :] + (1.0 - g[:, :, None]) * sp.no_class
    cat = pieces.reshape(c * k, t * d)
    out = cat @ sp.proj_w + sp.proj_b
    cache = (cat, g, sp)
    return out, cache


def sample_memory(mem: ContextMemory, gates: np.ndarray, sp: SamplerParams) -> np.ndarray:
    return sample_memory_fwd(mem, gates, sp)[0]


def sample_memory_bwd(grad_out: np.ndarray, cache):
    """Returns param grads {no_class, proj_w, proj_b} given dL/dout (S, d)."""
    cat, g, sp = cache
    s, td = cat.shape
    d = sp.proj_w.shape[1]
    t = td // d
    dproj_w = cat.T @ grad_out
    dproj_b = grad_out.sum(axis=0)
    dcat = (grad_out @ sp.proj_w.T).reshape(s, t, d)
    dno = ((1.0 - g)[:, :, None] * dcat).sum(axis=(0, 1))
    return {"no_class": dno, "proj_w": dproj_w, "proj_b": dproj_b}


def slot_targets(annotations, num_classes: int, num_prototypes: int) -> np.ndarray:
    """Presence targets (C, K): 1 for every prototype of a class with at
    least one ground-truth instance in the frame."""
    present = np.zeros(num_classes)
    for class_id, _box in annotations:
        present[class_id] = 1.0
    return np.repeat(present[:, None], num_prototypes, axis=1)


def asymmetric_loss(
    p: np.ndarray,
    targets: np.ndarray,
    gamma_pos: float = 0.0,
    gamma_neg: float = 4.0,
    clip: float = 0.05,
):
    """Multi-label loss with down-weighted and probability-shifted negatives.

    Positive slots contribute -(1-p)^gamma_pos * log(p); negative slots use
    the shifted probability p_m = max(p - clip, 0) and contribute
    -(p_m)^gamma_neg * log(1 - p_m). Returns (mean loss, dloss/dp).
    """
    pc = np.clip(p, 1e-7, 1.0 - 1e-7)
    in_range = (p > 1e-7) & (p < 1.0 - 1e-7)
    pos_mask = targets == 1.0
    neg_mask = ~pos_mask

    if gamma_pos == 0.0:
        pos_term = -np.log(pc)
        dpos = -1.0 / pc
    else:
        omp = 1.0 - pc
        pos_term = -(omp**gamma_pos) * np.log(pc)
        dpos = gamma_pos * omp ** (gamma_pos - 1.0) * np.log(pc) - (omp**gamma_pos) / pc

    pm = np.maximum(pc - clip, 0.0)
    shift_open = pc - clip > 0.0
    if gamma_neg == 0.0:
        neg_term = -np.log1p(-pm)
        dneg = np.where(shift_open, 1.0 / (1.0 - pm), 0.0)
    else:
        pm_pow = np.where(pm > 0.0, pm**gamma_neg, 0.0)
        pm_pow_m1 = np.where(pm > 0.0, pm ** (gamma_neg - 1.0), 0.0)
        neg_term = -pm_pow * np.log1p(-pm)
        dneg = np.where(
            shift_open,
            -gamma_neg * pm_pow_m1 * np.log1p(-pm) + pm_pow / (1.0 - pm),
            0.0,
        )

    n = p.size
    loss = (np.where(pos_mask, pos_term, 0.0).sum() + np.where(neg_mask, neg_term, 0.0).sum()) / n
    dp = np.where(pos_mask, dpos, dneg) * in_range / n
    return loss, dp


def strategy_gates(
    strategy: str,
    slot_probs,
    sp: SamplerParams,
    annotations=None,
    rng: np.random.Generator | None = None,
) -> np.ndarray:
    """Gates (T, C, K) for one frame under a sampling strategy.

    score  - threshold the predicted slot probabilities
    full   - every slot on
    random - per-slot fair coin, shared across thresholds
    oracle - ground-truth class presence, shared across thresholds
    """
    c, k, t = sp.num_classes, sp.num_prototypes, sp.num_thresholds
    if strategy == "score":
        return binarize(slot_probs, sp.thresholds)
    if strategy == "full":
        return np.ones((t, c, k))
    if strategy == "random":
        if rng is None:
            raise ValueError("random sampling needs an rng")
        per_slot = (rng.random((c, k)) < 0.5).astype(np.float64)
        return np.broadcast_to(per_slot, (t, c, k)).copy()
    if strategy == "oracle":
        if annotations is None:
            raise ValueError("oracle sampling needs frame annotations")
        return np.broadcast_to(slot_targets(annotations, c, k), (t, c, k)).copy()
    raise ValueError(f"unknown sampling strategy {strategy!r}")
