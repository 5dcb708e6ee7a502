"""Noise predictors.

Two families live here:

* exact Bayes-optimal predictors for data whose noised marginals are known in
  closed form (isotropic Gaussian mixtures, full-covariance Gaussians);
* :class:`MlpDenoiser`, a small fully connected network with hand-written
  reverse mode, optionally with a zero cross-attention block after its first
  hidden layer.

Every predictor exposes ``predict(xt, t, cond)`` on a batch ``(N, d)`` and
counts its invocations in ``calls``.
"""

from __future__ import annotations

import base64
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Protocol, Sequence

import numpy as np
from scipy.special import logsumexp

from effdiff.attention import (
    AttentionCache,
    ZeroCrossAttentionBlock,
    cross_attention_backward,
    cross_attention_forward,
)
from effdiff.schedule import NoiseSchedule

CHECKPOINT_FORMAT_VERSION = 1


@dataclass
class ConditionInput:
    """What to generate: a class index and optional cross-attention tokens.

    ``class_id`` is a scalar or one id per batch row; ``tokens`` has shape
    ``(L, d_model)`` or ``(N, L, d_model)``.
    """

    class_id: int | np.ndarray = 0
    tokens: np.ndarray | None = None

    def take(self, idx) -> "ConditionInput":
        cid = np.asarray(self.class_id)
        tok = self.tokens
        return ConditionInput(
            cid if cid.ndim == 0 else cid[idx],
            None if tok is None or np.ndim(tok) == 2 else np.asarray(tok)[idx],
        )


class Denoiser(Protocol):
    calls: int

    def predict(self, xt: np.ndarray, t: int, cond: ConditionInput | None = None) -> np.ndarray: ...


# --------------------------------------------------------------------------
# Gaussian-mixture data and its exact noise predictor


@dataclass(frozen=True)
class GaussianMixture:
    weights: np.ndarray
    means: np.ndarray
    stds: np.ndarray

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=np.float64)
        mu = np.atleast_2d(np.asarray(self.means, dtype=np.float64))
        s = np.asarray(self.stds, dtype=np.float64).reshape(-1)
        if w.ndim != 1 or len(w) != len(mu) or len(s) != len(w):
            raise ValueError("weights, means and stds must describe the same number of components")
        if np.any(w <= 0) or abs(w.sum() - 1.0) > 1e-12:
            raise ValueError(f"weights must be positive and sum to 1, got {w}")
        if np.any(s < 0) or not np.all(np.isfinite(mu)):
            raise ValueError("stds must be non-negative and means finite")
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "means", mu)
        object.__setattr__(self, "stds", s)

    @property
    def dim(self) -> int:
        return self.means.shape[1]

    @property
    def n_components(self) -> int:
        return len(self.weights)

    def sample(self, n: int, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
        labels = rng.choice(self.n_components, size=n, p=self.weights)
        z = rng.standard_normal((n, self.dim))
        return self.means[labels] + self.stds[labels, None] * z, labels


def gmm_responsibilities(gmm: GaussianMixture, xt, t: int, schedule: NoiseSchedule, class_id=None) -> np.ndarray:
    """Posterior component probabilities r_k(x_t), shape ``(N, K)``.

    With ``class_id`` given, the mixture is restricted to that component
    (per row when an array).
    """
    xt = np.atleast_2d(np.asarray(xt, dtype=np.float64))
    ab = schedule.alpha_bar_at(t)
    var = ab * gmm.stds**2 + (1.0 - ab)  # (K,)
    diff = xt[:, None, :] - np.sqrt(ab) * gmm.means[None, :, :]
    logp = (
        np.log(gmm.weights)[None, :]
        - 0.5 * gmm.dim * np.log(2 * np.pi * var)[None, :]
        - 0.5 * np.sum(diff**2, axis=-1) / var[None, :]
    )
    if class_id is not None:
        cid = np.broadcast_to(np.asarray(class_id), (xt.shape[0],))
        mask = np.arange(gmm.n_components)[None, :] == cid[:, None]
        logp = np.where(mask, logp, -np.inf)
    return np.exp(logp - logsumexp(logp, axis=1, keepdims=True))


def epsilon_star_gmm(gmm: GaussianMixture, xt, t: int, schedule: NoiseSchedule, class_id=None) -> np.ndarray:
    """E[eps | x_t] for mixture data (the minimiser of the noise-prediction loss)."""
    xt_in = np.asarray(xt, dtype=np.float64)
    xt2 = np.atleast_2d(xt_in)
    ab = schedule.alpha_bar_at(t)
    r = gmm_responsibilities(gmm, xt2, t, schedule, class_id)
    var = ab * gmm.stds**2 + (1.0 - ab)
    gain = np.sqrt(ab) * gmm.stds**2 / var  # (K,)
    comp_means = gmm.means[None] + gain[None, :, None] * (xt2[:, None, :] - np.sqrt(ab) * gmm.means[None])
    x0_mean = np.einsum("nk,nkd->nd", r, comp_means)
    eps = (xt2 - np.sqrt(ab) * x0_mean) / np.sqrt(1.0 - ab)
    return eps.reshape(xt_in.shape)


@dataclass(frozen=True)
class GaussianData:
    """Full-covariance Gaussian data, used where correlations matter (inpainting)."""

    mean: np.ndarray
    cov: np.ndarray

    def __post_init__(self):
        mean = np.asarray(self.mean, dtype=np.float64).reshape(-1)
        cov = np.asarray(self.cov, dtype=np.float64)
        if cov.shape != (len(mean), len(mean)) or not np.allclose(cov, cov.T):
            raise ValueError("cov must be a symmetric d x d matrix")
        if np.linalg.eigvalsh(cov).min() < -1e-12:
            raise ValueError("cov must be positive semi-definite")
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "cov", cov)

    @property
    def dim(self) -> int:
        return len(self.mean)

    def sample(self, n: int, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
        x = rng.multivariate_normal(self.mean, self.cov, size=n, method="eigh")
        return x, np.zeros(n, dtype=np.int64)

    def conditional(self, known_idx: Sequence[int], known_values) -> tuple[np.ndarray, np.ndarray]:
        """Mean and covariance of the unknown coordinates given the known ones."""
        known = np.asarray(known_idx)
        unknown = np.setdiff1d(np.arange(self.dim), known)
        c_uk = self.cov[np.ix_(unknown, known)]
        c_kk = self.cov[np.ix_(known, known)]
        c_uu = self.cov[np.ix_(unknown, unknown)]
        gain = np.linalg.solve(c_kk, c_uk.T).T
        mean = self.mean[unknown] + gain @ (np.asarray(known_values, dtype=np.float64) - self.mean[known])
        return mean, c_uu - gain @ c_uk.T


def epsilon_star_gaussian(data: GaussianData, xt, t: int, schedule: NoiseSchedule) -> np.ndarray:
    xt = np.asarray(xt, dtype=np.float64)
    ab = schedule.alpha_bar_at(t)
    marg_cov = ab * data.cov + (1.0 - ab) * np.eye(data.dim)
    resid = xt - np.sqrt(ab) * data.mean
    # E[eps | xt] = sqrt(1 - ab) * marg_cov^{-1} (xt - sqrt(ab) mu)
    return np.sqrt(1.0 - ab) * np.linalg.solve(marg_cov, resid.T).T


@dataclass
class GmmOracle:
    gmm: GaussianMixture
    schedule: NoiseSchedule
    per_class: bool = False
    calls: int = 0

    def predict(self, xt, t, cond=None):
        self.calls += 1
        cid = cond.class_id if (self.per_class and cond is not None) else None
        return epsilon_star_gmm(self.gmm, xt, t, self.schedule, cid)


@dataclass
class GaussianOracle:
    data: GaussianData
    schedule: NoiseSchedule
    calls: int = 0

    def predict(self, xt, t, cond=None):
        self.calls += 1
        return epsilon_star_gaussian(self.data, xt, t, self.schedule)


@dataclass
class ConstantDenoiser:
    value: np.ndarray
    calls: int = 0

    def predict(self, xt, t, cond=None):
        self.calls += 1
        return np.broadcast_to(np.asarray(self.value, dtype=np.float64), np.shape(xt)).copy()


# --------------------------------------------------------------------------
# Trainable MLP


def embed_time(t, d_time: int, T: int) -> np.ndarray:
    """Sinusoidal embedding, interleaved (sin, cos) pairs at 10000^(-2i/d_time)."""
    if d_time % 2:
        raise ValueError(f"d_time must be even, got {d_time}")
    t_arr = np.asarray(t)
    if np.any(t_arr < 0) or np.any(t_arr >= T):
        raise IndexError(f"timestep outside [0, {T - 1}]")
    freqs = 1.0 / 10000.0 ** (2.0 * np.arange(d_time // 2) / d_time)
    angles = t_arr.astype(np.float64)[..., None] * freqs
    out = np.empty(t_arr.shape + (d_time,))
    out[..., 0::2] = np.sin(angles)
    out[..., 1::2] = np.cos(angles)
    return out


def _sigmoid(z):
    return 0.5 * (1.0 + np.tanh(0.5 * z))


ACTIVATIONS = {
    "silu": (lambda z: z * _sigmoid(z), lambda z: _sigmoid(z) * (1.0 + z * (1.0 - _sigmoid(z)))),
    "identity": (lambda z: z, lambda z: np.ones_like(z)),
}


@dataclass(eq=False)
class MlpDenoiser:
    """Fully connected noise predictor.

    Input is ``[x_t, embed_time(t), class_embedding]``; hidden layers use
    ``activation``. When ``attention`` is set, the first hidden activation is
    viewed as ``n_positions x d_model`` query features and passed through the
    block, attending to the condition tokens.
    """

    dim: int
    T: int
    weights: list[np.ndarray]
    biases: list[np.ndarray]
    cond_table: np.ndarray
    d_time: int = 16
    activation: str = "silu"
    attention: ZeroCrossAttentionBlock | None = None
    calls: int = field(default=0, compare=False)

    @classmethod
    def init(
        cls,
        dim: int,
        rng: np.random.Generator,
        *,
        T: int = 1000,
        hidden: Sequence[int] = (128, 128),
        d_time: int = 16,
        d_cond: int = 8,
        n_classes: int = 1,
        activation: str = "silu",
        attention_d_model: int | None = None,
    ) -> "MlpDenoiser":
        widths = [dim + d_time + d_cond, *hidden, dim]
        weights, biases = [], []
        for i, (fan_in, fan_out) in enumerate(zip(widths[:-1], widths[1:])):
            scale = np.sqrt(1.0 / fan_in)
            if i == len(widths) - 2 and hidden:
                scale *= 0.1
            weights.append(rng.normal(0.0, scale, (fan_out, fan_in)))
            biases.append(np.zeros(fan_out))
        cond_table = rng.normal(0.0, 1.0, (n_classes, d_cond))
        block = None
        if attention_d_model is not None:
            if not hidden or hidden[0] % attention_d_model:
                raise ValueError(
                    f"first hidden width {hidden[:1]} must be a multiple of d_model={attention_d_model}"
                )
            block = ZeroCrossAttentionBlock.init(attention_d_model, rng)
        return cls(dim, T, weights, biases, cond_table, d_time, activation, block)

    @property
    def d_cond(self) -> int:
        return self.cond_table.shape[1]

    @property
    def n_classes(self) -> int:
        return self.cond_table.shape[0]

    @property
    def widths(self) -> list[int]:
        return [self.weights[0].shape[1]] + [w.shape[0] for w in self.weights]

    def params(self) -> dict[str, np.ndarray]:
        """Parameter arrays by name (live references, in checkpoint order)."""
        out = {}
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            out[f"W{i}"] = w
            out[f"b{i}"] = b
        out["cond_table"] = self.cond_table
        if self.attention is not None:
            for name, arr in self.attention.params().items():
                out[f"attn.{name}"] = arr
        return out

    def n_params(self) -> int:
        return sum(p.size for p in self.params().values())

    def get_flat(self) -> np.ndarray:
        return np.concatenate([p.ravel() for p in self.params().values()])

    def set_flat(self, flat: np.ndarray) -> None:
        flat = np.asarray(flat, dtype=np.float64)
        if flat.size != self.n_params():
            raise ValueError(f"expected {self.n_params()} parameters, got {flat.size}")
        offset = 0
        for p in self.params().values():
            p[...] = flat[offset : offset + p.size].reshape(p.shape)
            offset += p.size

    def copy(self) -> "MlpDenoiser":
        block = None
        if self.attention is not None:
            block = ZeroCrossAttentionBlock(self.attention.d_model, **{k: v.copy() for k, v in self.attention.params().items()})
        return MlpDenoiser(
            self.dim,
            self.T,
            [w.copy() for w in self.weights],
            [b.copy() for b in self.biases],
            self.cond_table.copy(),
            self.d_time,
            self.activation,
            block,
        )

    def predict(self, xt, t, cond=None):
        self.calls += 1
        eps, _ = mlp_forward(self, xt, t, cond)
        return eps


@dataclass
class MlpCache:
    inputs: np.ndarray
    class_ids: np.ndarray
    pre: list[np.ndarray]  # pre-activations of hidden layers
    post: list[np.ndarray]  # inputs to each linear layer
    attn: AttentionCache | None


def _as_condition(cond, n: int, m: MlpDenoiser) -> tuple[np.ndarray, np.ndarray | None]:
    if cond is None:
        cond = ConditionInput()
    cid = np.broadcast_to(np.asarray(cond.class_id, dtype=np.int64), (n,))
    if cid.min() < 0 or cid.max() >= m.n_classes:
        raise IndexError(f"class_id outside [0, {m.n_classes - 1}]")
    return cid, cond.tokens


def mlp_forward(m: MlpDenoiser, xt, t, cond: ConditionInput | None = None):
    """Evaluate the network on a batch. Returns ``(eps_hat, cache)``."""
    x = np.asarray(xt, dtype=np.float64)
    single = x.ndim == 1
    x = np.atleast_2d(x)
    n = x.shape[0]
    if x.shape[1] != m.dim:
        raise ValueError(f"input dimension {x.shape[1]} != model dimension {m.dim}")
    t_arr = np.broadcast_to(np.asarray(t), (n,))
    cid, tokens = _as_condition(cond, n, m)

    act, _ = ACTIVATIONS[m.activation]
    inputs = np.concatenate([x, embed_time(t_arr, m.d_time, m.T), m.cond_table[cid]], axis=1)
    h = inputs
    pre, post = [], []
    attn_cache = None
    n_layers = len(m.weights)
    for i, (w, b) in enumerate(zip(m.weights, m.biases)):
        post.append(h)
        z = h @ w.T + b
        if i == n_layers - 1:
            h = z
            break
        pre.append(z)
        h = act(z)
        if i == 0 and m.attention is not None and tokens is not None:
            d_model = m.attention.d_model
            query = h.reshape(n, -1, d_model)
            out, _, attn_cache = cross_attention_forward(m.attention, query, tokens)
            h = out.reshape(n, -1)
    eps = h[0] if single else h
    return eps, MlpCache(inputs, cid, pre, post, attn_cache)


def mlp_backward(m: MlpDenoiser, cache: MlpCache, grad_output, grad_fm=None, grad_weights=None) -> dict[str, np.ndarray]:
    """Gradients of ``sum(grad_output * eps_hat)`` (plus any FM/weight terms)
    with respect to every parameter, keyed like :meth:`MlpDenoiser.params`."""
    g = np.atleast_2d(np.asarray(grad_output, dtype=np.float64))
    n_layers = len(m.weights)
    if g.shape != (cache.inputs.shape[0], m.dim) or len(cache.post) != n_layers:
        raise ValueError("cache does not match this model / gradient shape")
    if (grad_fm is not None or grad_weights is not None) and cache.attn is None:
        raise ValueError("attention gradient supplied but the forward pass ran no attention")
    _, dact = ACTIVATIONS[m.activation]
    grads: dict[str, np.ndarray] = {}
    for i in range(n_layers - 1, -1, -1):
        h_in = cache.post[i]
        grads[f"W{i}"] = g.T @ h_in
        grads[f"b{i}"] = g.sum(axis=0)
        g = g @ m.weights[i]
        if i == 0:
            break
        if i == 1 and cache.attn is not None:
            d_model = m.attention.d_model
            g_q, _, attn_grads = cross_attention_backward(
                m.attention, cache.attn, g.reshape(g.shape[0], -1, d_model), grad_fm, grad_weights
            )
            g = g_q.reshape(g.shape[0], -1)
            for name, arr in attn_grads.items():
                grads[f"attn.{name}"] = arr
        g = g * dact(cache.pre[i - 1])
    g_cond = np.zeros_like(m.cond_table)
    np.add.at(g_cond, cache.class_ids, g[:, m.dim + m.d_time :])
    grads["cond_table"] = g_cond
    if m.attention is not None:
        for name, arr in m.attention.params().items():
            grads.setdefault(f"attn.{name}", np.zeros_like(arr))
    return {k: grads[k] for k in m.params()}


# --------------------------------------------------------------------------
# Checkpoints


def model_to_dict(m: MlpDenoiser) -> dict:
    params = m.params()
    blob = np.concatenate([p.ravel() for p in params.values()]).astype("<f8").tobytes()
    return {
        "format_version": CHECKPOINT_FORMAT_VERSION,
        "kind": "mlp_denoiser",
        "dim": m.dim,
        "T": m.T,
        "d_time": m.d_time,
        "activation": m.activation,
        "attention_d_model": None if m.attention is None else m.attention.d_model,
        "shapes": [[name, list(p.shape)] for name, p in params.items()],
        "params": base64.b64encode(blob).decode("ascii"),
    }


def model_from_dict(doc: dict) -> MlpDenoiser:
    if doc.get("format_version") != CHECKPOINT_FORMAT_VERSION or doc.get("kind") != "mlp_denoiser":
        raise ValueError(f"unsupported checkpoint (format_version={doc.get('format_version')!r})")
    flat = np.frombuffer(base64.b64decode(doc["params"]), dtype="<f8").astype(np.float64)
    shapes = {name: tuple(shape) for name, shape in doc["shapes"]}
    n_layers = sum(1 for name in shapes if name.startswith("W"))
    weights = [np.zeros(shapes[f"W{i}"]) for i in range(n_layers)]
    biases = [np.zeros(shapes[f"b{i}"]) for i in range(n_layers)]
    block = None
    if doc["attention_d_model"] is not None:
        d = int(doc["attention_d_model"])
        block = ZeroCrossAttentionBlock(d, np.zeros((d, d)), np.zeros((d, d)), np.zeros((d, d)))
    m = MlpDenoiser(
        int(doc["dim"]),
        int(doc["T"]),
        weights,
        biases,
        np.zeros(shapes["cond_table"]),
        int(doc["d_time"]),
        doc["activation"],
        block,
    )
    if [list(p.shape) for p in m.params().values()] != [list(s) for s in shapes.values()]:
        raise ValueError("checkpoint shapes do not describe a consistent model")
    m.set_flat(flat)
    return m


def save_checkpoint(m: MlpDenoiser, path: str | Path) -> None:
    Path(path).write_text(json.dumps(model_to_dict(m), indent=1))


def load_checkpoint(path: str | Path) -> MlpDenoiser:
    return model_from_dict(json.loads(Path(path).read_text()))
