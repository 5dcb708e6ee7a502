"""Zero cross-attention block and the attention total-variation penalty.

The block attends from query features (one row per spatial position) to a
sequence of condition tokens and adds the projected result back onto the
queries. Its output projection starts at exactly zero, so a fresh block is
the identity map.

All functions accept either a single map ``(L, d)`` or a batch ``(B, L, d)``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

PARAM_NAMES = ("w_q", "w_k", "w_v", "w_out")


@dataclass
class AttentionMap:
    weights: np.ndarray  # (..., L_q, L_k), rows sum to one
    features: np.ndarray  # FM = weights @ V, (..., L_q, d_model)


@dataclass(eq=False)
class ZeroCrossAttentionBlock:
    d_model: int
    w_q: np.ndarray
    w_k: np.ndarray
    w_v: np.ndarray
    w_out: np.ndarray = field(default=None)

    def __post_init__(self):
        if self.w_out is None:
            self.w_out = np.zeros((self.d_model, self.d_model))
        for name in PARAM_NAMES:
            w = getattr(self, name)
            if w.shape != (self.d_model, self.d_model):
                raise ValueError(f"{name} has shape {w.shape}, expected {(self.d_model,) * 2}")

    @classmethod
    def init(cls, d_model: int, rng: np.random.Generator) -> "ZeroCrossAttentionBlock":
        scale = 1.0 / np.sqrt(d_model)
        return cls(
            d_model,
            w_q=rng.normal(0.0, scale, (d_model, d_model)),
            w_k=rng.normal(0.0, scale, (d_model, d_model)),
            w_v=rng.normal(0.0, scale, (d_model, d_model)),
        )

    def params(self) -> dict[str, np.ndarray]:
        return {name: getattr(self, name) for name in PARAM_NAMES}


@dataclass
class AttentionCache:
    query: np.ndarray
    tokens: np.ndarray
    q: np.ndarray
    k: np.ndarray
    v: np.ndarray
    amap: AttentionMap


def _softmax(scores: np.ndarray) -> np.ndarray:
    z = scores - scores.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def cross_attention_forward(block: ZeroCrossAttentionBlock, query_feats, kv_feats):
    """Residual cross-attention.

    Returns ``(output, map, cache)`` with ``output = query + FM @ w_out.T``,
    ``FM = softmax(Q K^T / sqrt(d)) V``, Q from ``query_feats`` and K, V from
    ``kv_feats``.
    """
    query = np.asarray(query_feats, dtype=np.float64)
    tokens = np.asarray(kv_feats, dtype=np.float64)
    d = block.d_model
    if query.shape[-1] != d or tokens.shape[-1] != d:
        raise ValueError(
            f"feature widths {query.shape[-1]}, {tokens.shape[-1]} do not match d_model={d}"
        )
    if tokens.ndim < 2 or tokens.shape[-2] < 1:
        raise ValueError("need at least one key/value token")
    tokens = np.broadcast_to(tokens, query.shape[:-2] + tokens.shape[-2:])
    q = query @ block.w_q.T
    k = tokens @ block.w_k.T
    v = tokens @ block.w_v.T
    scores = q @ np.swapaxes(k, -1, -2) / np.sqrt(d)
    weights = _softmax(scores)
    fm = weights @ v
    output = query + fm @ block.w_out.T
    amap = AttentionMap(weights, fm)
    return output, amap, AttentionCache(query, tokens, q, k, v, amap)


def cross_attention_backward(
    block: ZeroCrossAttentionBlock, cache: AttentionCache, grad_output, grad_fm=None, grad_weights=None
):
    """Reverse-mode gradients of the block.

    ``grad_fm`` and ``grad_weights`` are extra gradients arriving directly on
    FM or on the attention weights (from a penalty term). Returns
    ``(grad_query, grad_tokens, param_grads)``; leading batch axes are summed
    into the parameter gradients.
    """
    g_out = np.asarray(grad_output, dtype=np.float64)
    a = cache.amap.weights
    fm = cache.amap.features
    d = block.d_model

    def contract(x, y):
        # sum over all leading axes of x[..., i] * y[..., j]
        return x.reshape(-1, x.shape[-1]).T @ y.reshape(-1, y.shape[-1])

    g_wout = contract(g_out, fm)
    g_fm = g_out @ block.w_out
    if grad_fm is not None:
        g_fm = g_fm + grad_fm
    g_a = g_fm @ np.swapaxes(cache.v, -1, -2)
    if grad_weights is not None:
        g_a = g_a + grad_weights
    g_v = np.swapaxes(a, -1, -2) @ g_fm
    g_scores = a * (g_a - np.sum(g_a * a, axis=-1, keepdims=True))
    g_scores = g_scores / np.sqrt(d)
    g_q = g_scores @ cache.k
    g_k = np.swapaxes(g_scores, -1, -2) @ cache.q

    grads = {
        "w_q": contract(g_q, cache.query),
        "w_k": contract(g_k, cache.tokens),
        "w_v": contract(g_v, cache.tokens),
        "w_out": g_wout,
    }
    g_query = g_out + g_q @ block.w_q
    g_tokens = g_k @ block.w_k + g_v @ block.w_v
    return g_query, g_tokens, grads


def atv_loss(fm) -> float | np.ndarray:
    """L1 total variation of a feature map along its spatial (second-last) axis.

    A single map gives a scalar; a batch gives one value per map.
    """
    fm = np.asarray(fm.features if isinstance(fm, AttentionMap) else fm, dtype=np.float64)
    tv = np.abs(np.diff(fm, axis=-2)).sum(axis=(-2, -1))
    return float(tv) if tv.ndim == 0 else tv


def atv_grad(fm) -> np.ndarray:
    """Subgradient of :func:`atv_loss` with respect to FM, using sign(0) = 0."""
    fm = np.asarray(fm.features if isinstance(fm, AttentionMap) else fm, dtype=np.float64)
    s = np.sign(np.diff(fm, axis=-2))
    grad = np.zeros_like(fm)
    grad[..., 1:, :] += s
    grad[..., :-1, :] -= s
    return grad


def attention_weights_tv(amap: AttentionMap) -> float | np.ndarray:
    """Alternative penalty on the attention weights themselves."""
    return atv_loss(amap.weights)
