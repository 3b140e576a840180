"""Dense float64 transformer building blocks with hand-written backward passes.

Convention: every ``*_fwd`` returns ``(out, cache)`` and the paired ``*_bwd``
consumes ``(grad_out, cache)`` and returns gradients for inputs and
parameters. There is no autograd tape; each backward pass is analytic and is
verified against central differences by ``grad_check``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np


def uniform_init(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    """Seeded uniform init in [-1/sqrt(fan_in), +1/sqrt(fan_in)]."""
    bound = 1.0 / math.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


# ---------------------------------------------------------------------------
# softmax
# ---------------------------------------------------------------------------


def softmax(x: np.ndarray, axis: int = -1) -> np.ndarray:
    """Numerically stable softmax along ``axis``."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape[axis] == 0:
        raise ValueError("softmax over an empty axis")
    shifted = x - x.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=axis, keepdims=True)


def softmax_bwd(grad_probs: np.ndarray, probs: np.ndarray, axis: int = -1) -> np.ndarray:
    """dL/dx for probs = softmax(x), given dL/dprobs."""
    inner = (grad_probs * probs).sum(axis=axis, keepdims=True)
    return probs * (grad_probs - inner)


# ---------------------------------------------------------------------------
# affine / relu / feed-forward
# ---------------------------------------------------------------------------


def linear_fwd(x: np.ndarray, w: np.ndarray, b: np.ndarray):
    """out = x @ w + b. x (..., nin), w (nin, nout), b (nout)."""
    if x.shape[-1] != w.shape[0]:
        raise ValueError(
            f"input feature axis {x.shape[-1]} does not match weight input dim {w.shape[0]}"
        )
    return x @ w + b, (x, w)


def linear_bwd(grad_out: np.ndarray, cache):
    x, w = cache
    grad_x = grad_out @ w.T
    lead = tuple(range(grad_out.ndim - 1))
    grad_w = np.tensordot(x, grad_out, axes=(lead, lead))
    grad_b = grad_out.sum(axis=lead)
    return grad_x, grad_w, grad_b


def relu_fwd(x: np.ndarray):
    return np.maximum(x, 0.0), (x > 0)


def relu_bwd(grad_out: np.ndarray, cache):
    return grad_out * cache


def ffn_fwd(x: np.ndarray, w1: np.ndarray, b1: np.ndarray, w2: np.ndarray, b2: np.ndarray):
    """Two affine layers with a positive-part nonlinearity between."""
    pre, c1 = linear_fwd(x, w1, b1)
    h, cr = relu_fwd(pre)
    out, c2 = linear_fwd(h, w2, b2)
    return out, (c1, cr, c2)


def ffn_bwd(grad_out: np.ndarray, cache):
    c1, cr, c2 = cache
    dh, dw2, db2 = linear_bwd(grad_out, c2)
    dpre = relu_bwd(dh, cr)
    dx, dw1, db1 = linear_bwd(dpre, c1)
    return dx, {"w1": dw1, "b1": db1, "w2": dw2, "b2": db2}


def ffn(x, w1, b1, w2, b2):
    return ffn_fwd(x, w1, b1, w2, b2)[0]


# ---------------------------------------------------------------------------
# layer normalization
# ---------------------------------------------------------------------------


def layer_norm_fwd(x: np.ndarray, gain: np.ndarray, bias: np.ndarray, eps: float = 1e-5):
    """Normalize the last axis to mean 0 / variance 1, then scale and shift."""
    if x.shape[-1] < 2:
        raise ValueError("layer_norm needs at least 2 elements per row")
    mu = x.mean(axis=-1, keepdims=True)
    var = ((x - mu) ** 2).mean(axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (x - mu) * inv_std
    return xhat * gain + bias, (xhat, inv_std, gain)


def layer_norm_bwd(grad_out: np.ndarray, cache):
    xhat, inv_std, gain = cache
    lead = tuple(range(grad_out.ndim - 1))
    dgain = (grad_out * xhat).sum(axis=lead)
    dbias = grad_out.sum(axis=lead)
    dxhat = grad_out * gain
    dx = inv_std * (
        dxhat
        - dxhat.mean(axis=-1, keepdims=True)
        - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)
    )
    return dx, dgain, dbias


def layer_norm(x, gain, bias, eps: float = 1e-5):
    return layer_norm_fwd(x, gain, bias, eps)[0]


# ---------------------------------------------------------------------------
# multi-head attention
# ---------------------------------------------------------------------------


@dataclass
class AttentionParams:
    """Projection weights for one multi-head attention layer.

    All weight matrices are (d_model, d_model); biases are (d_model,).
    """

    num_heads: int
    wq: np.ndarray
    wk: np.ndarray
    wv: np.ndarray
    wo: np.ndarray
    bq: np.ndarray
    bk: np.ndarray
    bv: np.ndarray
    bo: np.ndarray

    def __post_init__(self):
        d = self.wq.shape[0]
        if self.num_heads < 1 or d % self.num_heads != 0:
            raise ValueError(f"d_model {d} not divisible by num_heads {self.num_heads}")

    @property
    def d_model(self) -> int:
        return self.wq.shape[0]


def init_attention_params(
    rng: np.random.Generator, d_model: int, num_heads: int, tied_qk: bool = False
) -> AttentionParams:
    """``tied_qk`` starts the key projection as a copy of the query
    projection, so attention logits preserve feature alignment at step 0
    (E[Wq Wk^T] is a scaled identity instead of zero). The two matrices
    train independently afterwards."""
    wq = uniform_init(rng, (d_model, d_model), d_model)
    wk = wq.copy() if tied_qk else uniform_init(rng, (d_model, d_model), d_model)
    return AttentionParams(
        num_heads=num_heads,
        wq=wq,
        wk=wk,
        wv=uniform_init(rng, (d_model, d_model), d_model),
        wo=uniform_init(rng, (d_model, d_model), d_model),
        bq=np.zeros(d_model),
        bk=np.zeros(d_model),
        bv=np.zeros(d_model),
        bo=np.zeros(d_model),
    )


def attention_fwd(q_in: np.ndarray, k_in: np.ndarray, v_in: np.ndarray, params: AttentionParams):
    """Scaled dot-product attention over projected inputs.

    q_in (Tq, d), k_in (Tk, d), v_in (Tk, d) -> out (Tq, d). The cache keeps
    the per-head probability rows (num_heads, Tq, Tk).
    """
    d = params.d_model
    for name, arr in (("query", q_in), ("key", k_in), ("value", v_in)):
        if arr.shape[-1] != d:
            raise ValueError(f"{name} feature axis {arr.shape[-1]} does not match d_model {d}")
    if k_in.shape[0] != v_in.shape[0]:
        raise ValueError(
            f"key token axis {k_in.shape[0]} does not match value token axis {v_in.shape[0]}"
        )
    h = params.num_heads
    dh = d // h
    tq, tk = q_in.shape[0], k_in.shape[0]

    q = q_in @ params.wq + params.bq
    k = k_in @ params.wk + params.bk
    v = v_in @ params.wv + params.bv
    qh = q.reshape(tq, h, dh).transpose(1, 0, 2)
    kh = k.reshape(tk, h, dh).transpose(1, 0, 2)
    vh = v.reshape(tk, h, dh).transpose(1, 0, 2)

    scale = 1.0 / math.sqrt(dh)
    scores = (qh @ kh.transpose(0, 2, 1)) * scale
    probs = softmax(scores, axis=-1)
    ctx = probs @ vh
    merged = ctx.transpose(1, 0, 2).reshape(tq, d)
    out = merged @ params.wo + params.bo

    cache = (q_in, k_in, v_in, qh, kh, vh, probs, merged, scale, params)
    return out, cache


def attention_bwd(grad_out: np.ndarray, cache):
    """Returns (grad_q_in, grad_k_in, grad_v_in, param_grads)."""
    q_in, k_in, v_in, qh, kh, vh, probs, merged, scale, params = cache
    h, tq, dh = qh.shape
    tk = kh.shape[1]
    d = params.d_model

    dwo = merged.T @ grad_out
    dbo = grad_out.sum(axis=0)
    dmerged = grad_out @ params.wo.T
    dctx = dmerged.reshape(tq, h, dh).transpose(1, 0, 2)

    dprobs = dctx @ vh.transpose(0, 2, 1)
    dvh = probs.transpose(0, 2, 1) @ dctx
    dscores = softmax_bwd(dprobs, probs, axis=-1)
    dqh = (dscores @ kh) * scale
    dkh = (dscores.transpose(0, 2, 1) @ qh) * scale

    dq = dqh.transpose(1, 0, 2).reshape(tq, d)
    dk = dkh.transpose(1, 0, 2).reshape(tk, d)
    dv = dvh.transpose(1, 0, 2).reshape(tk, d)

    grads = {
        "wq": q_in.T @ dq,
        "bq": dq.sum(axis=0),
        "wk": k_in.T @ dk,
        "bk": dk.sum(axis=0),
        "wv": v_in.T @ dv,
        "bv": dv.sum(axis=0),
        "wo": dwo,
        "bo": dbo,
    }
    dq_in = dq @ params.wq.T
    dk_in = dk @ params.wk.T
    dv_in = dv @ params.wv.T
    return dq_in, dk_in, dv_in, grads


def attention(q_in, k_in, v_in, params: AttentionParams):
    return attention_fwd(q_in, k_in, v_in, params)[0]


# ---------------------------------------------------------------------------
# gradient checking
# ---------------------------------------------------------------------------


def _loss_value(loss_fn, params):
    out = loss_fn(params)
    return out[0] if isinstance(out, tuple) else out


def grad_check(loss_fn, params, epsilon: float = 1e-4) -> float:
    """Compare analytic gradients against central differences.

    ``params`` is an ndarray or a dict of ndarrays. ``loss_fn(params)`` must
    return ``(loss, grads)`` with grads mirroring the structure of params.
    Returns the max over coordinates of
    |analytic - numeric| / max(1, |analytic|, |numeric|).
    """
    if not (1e-6 <= epsilon <= 1e-3):
        raise ValueError(f"epsilon {epsilon} outside [1e-6, 1e-3]")
    single = isinstance(params, np.ndarray)
    pdict = {"p": params} if single else params

    loss0, grads = loss_fn(params)
    if not np.isfinite(loss0):
        raise ValueError("loss is not finite at the evaluation point")
    gdict = {"p": grads} if single else grads

    worst = 0.0
    for name, arr in pdict.items():
        flat = arr.reshape(-1)
        gflat = np.asarray(gdict[name]).reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + epsilon
            lp = _loss_value(loss_fn, params)
            flat[i] = orig - epsilon
            lm = _loss_value(loss_fn, params)
            flat[i] = orig
            if not (np.isfinite(lp) and np.isfinite(lm)):
                raise ValueError("loss is not finite at a perturbed point")
            numeric = (lp - lm) / (2.0 * epsilon)
            analytic = gflat[i]
            rel = abs(analytic - numeric) / max(1.0, abs(analytic), abs(numeric))
            worst = max(worst, rel)
    return worst
