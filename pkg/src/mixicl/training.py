"""Toy-scale training of the transformer on mixture prompts.

The model is: a learned ``p x p`` projection of the raw token matrix, the
transformer layers, and a linear readout (with bias) applied at every
x-token. The prediction read at x-token ``j`` targets ``y_j``; the query
position targets ``y_{k+1}``. Gradients are computed by hand-written
reverse-mode passes through every layer.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace

import numpy as np
from sklearn.base import BaseEstimator, RegressorMixin
from sklearn.utils.validation import check_is_fitted

from ._rng import make_rng
from ._validation import check_prompts
from .mixtures import MixtureSpec, PromptBatch, PromptSampler
from .transformer import (LN_EPS, LayerParams, ModelConfig, _heads, _lin, _merge, forward_tokens,
                          load_model, save_model)

log = logging.getLogger(__name__)

LR_LARGE = 0.1


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 64
    curriculum_phase_steps: int = 2000
    final_steps: int = 3000
    adam_lr: float = 1e-4
    adam_betas: tuple = (0.9, 0.999)
    adam_eps: float = 1e-8
    dropout: float = 0.0
    seed: int = 0
    k_start: int = 2
    k_step: int = 2
    k_max: int = 10
    init_std: float = 0.02
    eval_every: int = 0

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValueError("batch_size must be at least 1")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must lie in [0, 1)")
        if self.curriculum_phase_steps < 1:
            raise ValueError("curriculum_phase_steps must be at least 1")
        if not 0 <= self.k_start <= self.k_max:
            raise ValueError("need 0 <= k_start <= k_max")

    def k_at(self, step: int) -> int:
        return min(self.k_max, self.k_start + self.k_step * (step // self.curriculum_phase_steps))


@dataclass
class TransformerModel:
    config: ModelConfig
    layers: list
    embedding: np.ndarray
    readout: np.ndarray
    readout_bias: np.ndarray = field(default_factory=lambda: np.zeros(1))

    @classmethod
    def init(cls, config: ModelConfig, rng=None, std: float = 0.02) -> "TransformerModel":
        rng = np.random.default_rng(rng) if not isinstance(rng, np.random.Generator) else rng
        layers = [LayerParams.random(config, rng, std) for _ in range(config.n_layers)]
        p = config.p
        return cls(config, layers, std * rng.standard_normal((p, p)), std * rng.standard_normal(p),
                   np.zeros(1))

    @classmethod
    def zeros(cls, config: ModelConfig) -> "TransformerModel":
        return cls(config, [LayerParams.zeros(config) for _ in range(config.n_layers)],
                   np.zeros((config.p, config.p)), np.zeros(config.p), np.zeros(1))

    def params(self) -> list[np.ndarray]:
        """Parameter arrays in a fixed order: embedding, layers, readout, bias."""
        out = [self.embedding]
        for layer in self.layers:
            out.extend(layer.arrays())
        out += [self.readout, self.readout_bias]
        return out

    def with_params(self, arrays) -> "TransformerModel":
        arrays = list(arrays)
        layers = [LayerParams(*arrays[1 + 6 * i: 7 + 6 * i]) for i in range(len(self.layers))]
        return TransformerModel(self.config, layers, arrays[0], arrays[-2], arrays[-1])

    def copy(self) -> "TransformerModel":
        return self.with_params([a.copy() for a in self.params()])

    def predict(self, batch) -> np.ndarray:
        """Query predictions ``y_hat_{k+1}``, one per prompt."""
        return forward(self, check_prompts(batch))[0][:, -1]

    __call__ = predict

    def save(self, path) -> None:
        save_model(path, self.config, self.layers, (self.embedding, self.readout, self.readout_bias))

    @classmethod
    def load(cls, path) -> "TransformerModel":
        config, layers, io = load_model(path)
        if io is None:
            raise ValueError(f"{path} holds bare layers without embedding and readout")
        return cls(config, layers, *io)


# -- forward -------------------------------------------------------------------

def raw_tokens(batch: PromptBatch, p: int) -> np.ndarray:
    """Token-major raw encoding ``(n, 2k+1, p)``: x in rows 1..d, y in row 1."""
    n, k, d = batch.n, batch.k, batch.d
    if p < d + 1:
        raise ValueError(f"hidden size p={p} must be at least d + 1 = {d + 1}")
    T = np.zeros((n, 2 * k + 1, p))
    T[:, 0::2, :d] = batch.xs
    T[:, 1::2, 0] = batch.ys
    return T


def embed_prompt(prompt, p: int, embedding=None) -> np.ndarray:
    """Embedded prompt as a ``p x (2k+1)`` matrix (identity projection by default)."""
    T = raw_tokens(check_prompts(prompt), p)[0]
    E = np.eye(p) if embedding is None else np.asarray(embedding)
    return (T @ E.T).T


def readout(H_L: np.ndarray, positions, weights, bias=0.0) -> np.ndarray:
    """Linear readout of the columns ``positions`` (1-based) of a ``p x q`` state."""
    cols = np.asarray(positions, dtype=int) - 1
    return np.asarray(weights) @ np.asarray(H_L)[:, cols] + float(np.asarray(bias).reshape(-1)[0])


def forward(model: TransformerModel, batch: PromptBatch, dropout: float = 0.0, rng=None):
    """Predictions at every x-token, shape ``(n, k+1)``, and the backprop cache."""
    T = raw_tokens(batch, model.config.p)
    X = T @ model.embedding.T
    caches = []
    for layer in model.layers:
        mask = None
        if dropout > 0.0:
            keep = rng.random(X.shape[:2] + (layer.W_in.shape[0],)) >= dropout
            mask = keep / (1.0 - dropout)
        X, cache = forward_tokens(X, layer, mask)
        caches.append(cache)
    HX = X[:, 0::2, :]
    preds = HX @ model.readout + model.readout_bias[0]
    return preds, dict(T=T, layers=caches, HX=HX, q=X.shape[1])


def targets(batch: PromptBatch) -> np.ndarray:
    return np.concatenate([batch.ys, batch.query_y[:, None]], axis=1)


def batch_loss(model: TransformerModel, prompts, normalized: bool = False) -> float:
    """Mean squared error over prompts and all ``k+1`` prediction positions."""
    batch = check_prompts(prompts)
    preds, _ = forward(model, batch)
    loss = float(np.mean((preds - targets(batch)) ** 2))
    return loss / batch.d if normalized else loss


# -- backward ------------------------------------------------------------------

def _layernorm_backward(dN: np.ndarray, Z: np.ndarray) -> np.ndarray:
    p = Z.shape[-1]
    c = Z - Z.mean(axis=-1, keepdims=True)
    nrm = np.linalg.norm(c, axis=-1, keepdims=True)
    ok = nrm > LN_EPS
    safe = np.where(ok, nrm, 1.0)
    u = c / safe
    g = np.sqrt(p) * dN
    dc = (g - u * np.sum(u * g, axis=-1, keepdims=True)) / safe
    dz = dc - dc.mean(axis=-1, keepdims=True)
    return np.where(ok, dz, 0.0)


def _wgrad(dY: np.ndarray, Xin: np.ndarray) -> np.ndarray:
    """Weight gradient ``sum_b dY_b^T X_b`` for ``Y = X W^T``."""
    return dY.reshape(-1, dY.shape[-1]).T @ Xin.reshape(-1, Xin.shape[-1])


def layer_backward(dout: np.ndarray, cache: dict, params: LayerParams):
    """Gradients of one layer: returns ``(dX, [dW_Q, dW_K, dW_V, dW_C, dW_in, dW_out])``."""
    X, Q, K, V, S, O = (cache[n] for n in ("X", "Q", "K", "V", "S", "O"))
    Z, N, U, Phi, G, mask = (cache[n] for n in ("Z", "N", "U", "Phi", "G", "ff_mask"))
    h, a, p = params.W_Q.shape
    dW_out = _wgrad(dout, G)
    dG = _lin(dout, params.W_out.T)
    if mask is not None:
        dG = dG * mask
    dU = dG * (Phi + U * np.exp(-0.5 * U * U) / np.sqrt(2.0 * np.pi))
    dW_in = _wgrad(dU, N)
    dZ = dout + _layernorm_backward(_lin(dU, params.W_in.T), Z)

    Wc = params.W_C.transpose(1, 0, 2).reshape(p, h * a)
    dW_C = _wgrad(dZ, _merge(O)).reshape(p, h, a).transpose(1, 0, 2)
    dO = _heads(_lin(dZ, Wc.T), h)
    dS = dO @ V.swapaxes(-1, -2)
    dV = S.swapaxes(-1, -2) @ dO
    dL = S * (dS - np.sum(S * dS, axis=-1, keepdims=True))
    dQ = _merge(dL @ K)
    dK = _merge(dL.swapaxes(-1, -2) @ Q)
    dV = _merge(dV)
    Wqkv = np.concatenate([w.reshape(h * a, p) for w in (params.W_Q, params.W_K, params.W_V)])
    dX = dZ + _lin(np.concatenate([dQ, dK, dV], axis=-1), Wqkv.T)
    grads = [_wgrad(dQ, X).reshape(h, a, p), _wgrad(dK, X).reshape(h, a, p),
             _wgrad(dV, X).reshape(h, a, p), dW_C, dW_in, dW_out]
    return dX, grads


def backward(model: TransformerModel, cache: dict, dpreds: np.ndarray) -> list[np.ndarray]:
    """Gradients for ``model.params()`` given the gradient of the loss w.r.t. predictions."""
    HX = cache["HX"]
    d_readout = dpreds.reshape(-1) @ HX.reshape(-1, HX.shape[-1])
    d_bias = np.array([dpreds.sum()])
    dX = np.zeros(HX.shape[:1] + (cache["q"], HX.shape[2]))
    dX[:, 0::2, :] = dpreds[:, :, None] * model.readout
    layer_grads = []
    for layer, lc in zip(reversed(model.layers), reversed(cache["layers"])):
        dX, g = layer_backward(dX, lc, layer)
        layer_grads.append(g)
    d_emb = _wgrad(dX, cache["T"])
    out = [d_emb]
    for g in reversed(layer_grads):
        out.extend(g)
    return out + [d_readout, d_bias]


def loss_and_grad(model: TransformerModel, prompts, dropout: float = 0.0, rng=None):
    batch = check_prompts(prompts)
    preds, cache = forward(model, batch, dropout, rng)
    err = preds - targets(batch)
    loss = float(np.mean(err ** 2))
    return loss, backward(model, cache, 2.0 * err / err.size)


def grad(model: TransformerModel, prompts) -> list[np.ndarray]:
    """Exact gradient of :func:`batch_loss` (unnormalized) for every parameter array."""
    return loss_and_grad(model, prompts)[1]


# -- Adam ----------------------------------------------------------------------

@dataclass
class AdamState:
    t: int
    m: list
    v: list

    @classmethod
    def zeros_like(cls, params) -> "AdamState":
        return cls(0, [np.zeros_like(a) for a in params], [np.zeros_like(a) for a in params])


def adam_step(params, grads, state: AdamState, lr: float = 1e-4, betas=(0.9, 0.999),
              eps: float = 1e-8):
    """One bias-corrected Adam update with a constant step size; returns ``(params, state)``."""
    b1, b2 = betas
    t = state.t + 1
    new_p, new_m, new_v = [], [], []
    for p, g, m, v in zip(params, grads, state.m, state.v):
        m = b1 * m + (1.0 - b1) * g
        v = b2 * v + (1.0 - b2) * g * g
        m_hat = m / (1.0 - b1 ** t)
        v_hat = v / (1.0 - b2 ** t)
        new_p.append(p - lr * m_hat / (np.sqrt(v_hat) + eps))
        new_m.append(m)
        new_v.append(v)
    return new_p, AdamState(t, new_m, new_v)


# -- data ----------------------------------------------------------------------

@dataclass
class FixedDataset:
    """A fixed pool of fully labelled prompts; query labels count as training labels."""

    prompts: PromptBatch

    def __post_init__(self):
        self.prompts = check_prompts(self.prompts)
        if self.prompts.n < 1:
            raise ValueError("FixedDataset needs at least one prompt")

    @classmethod
    def sample(cls, spec: MixtureSpec, n: int, k: int, seed: int) -> "FixedDataset":
        return cls(PromptSampler(spec)(k, n, seed))

    @property
    def n(self) -> int:
        return self.prompts.n

    def draw(self, batch_size: int, k: int, rng: np.random.Generator) -> tuple[PromptBatch, np.ndarray]:
        """Pick distinct prompts, then shuffle each one's pairs and keep ``k + 1`` of them.

        Returns the batch and the dataset indices used.
        """
        P = self.prompts
        full = P.k + 1
        if k + 1 > full:
            raise ValueError(f"dataset prompts hold {full} pairs, cannot cut length {k}")
        idx = rng.choice(P.n, size=min(batch_size, P.n), replace=False)
        xs_all = P.xs[idx]
        ys_all = np.concatenate([P.ys[idx], P.query_y[idx, None]], axis=1)
        order = np.argsort(rng.random((len(idx), full)), axis=1)[:, : k + 1]
        xs = np.take_along_axis(xs_all, order[:, :, None], axis=1)
        ys = np.take_along_axis(ys_all, order, axis=1)
        return PromptBatch(xs, ys[:, :k], P.latent[idx], ys[:, k]), idx


# -- training loop ---------------------------------------------------------------

def train(config: TrainConfig, source, model_config: ModelConfig, model: TransformerModel | None = None):
    """Train on ``source`` (a MixtureSpec for fresh prompts, or a FixedDataset).

    Returns ``(model, trace)``; ``trace`` rows are ``(step, raw_loss, normalized_loss)``.
    """
    if model is None:
        model = TransformerModel.init(model_config, make_rng(config.seed, "init"), config.init_std)
    else:
        model = model.copy()
    data_rng = make_rng(config.seed, "data")
    drop_rng = make_rng(config.seed, "dropout")
    if isinstance(source, MixtureSpec):
        sampler = PromptSampler(source)
        d = source.d
        draw = lambda k: sampler(k, config.batch_size, data_rng)
    elif isinstance(source, FixedDataset):
        d = source.prompts.d
        draw = lambda k: source.draw(config.batch_size, k, data_rng)[0]
    else:
        raise TypeError("source must be a MixtureSpec or a FixedDataset")
    params = model.params()
    state = AdamState.zeros_like(params)
    trace = []
    for step in range(config.final_steps):
        batch = draw(config.k_at(step))
        loss, grads = loss_and_grad(model, batch, config.dropout, drop_rng)
        params, state = adam_step(params, grads, state, config.adam_lr, config.adam_betas, config.adam_eps)
        model = model.with_params(params)
        trace.append((step, loss, loss / d))
        if config.eval_every and (step + 1) % config.eval_every == 0:
            log.info("step %d k=%d loss %.5f", step + 1, config.k_at(step), loss / d)
    return model, trace


class TransformerRegressor(RegressorMixin, BaseEstimator):
    """Transformer trained in context on mixture prompts.

    ``fit`` takes either a :class:`MixtureSpec` (fresh prompts every step,
    with a growing prompt length) or prompts (a fixed dataset subsampled to
    the current length).
    """

    def __init__(self, p=32, n_layers=2, n_heads=2, d_att=None, d_ff=None, batch_size=64,
                 n_steps=3000, curriculum_phase_steps=500, k_start=2, k_step=2, k_max=10,
                 lr=1e-4, dropout=0.0, random_state=0):
        self.p = p
        self.n_layers = n_layers
        self.n_heads = n_heads
        self.d_att = d_att
        self.d_ff = d_ff
        self.batch_size = batch_size
        self.n_steps = n_steps
        self.curriculum_phase_steps = curriculum_phase_steps
        self.k_start = k_start
        self.k_step = k_step
        self.k_max = k_max
        self.lr = lr
        self.dropout = dropout
        self.random_state = random_state

    def _configs(self):
        mc = ModelConfig(self.p, self.n_heads, self.d_att or max(1, self.p // self.n_heads),
                         self.d_ff or 4 * self.p, self.n_layers)
        tc = TrainConfig(batch_size=self.batch_size, curriculum_phase_steps=self.curriculum_phase_steps,
                         final_steps=self.n_steps, adam_lr=self.lr, dropout=self.dropout,
                         seed=int(self.random_state), k_start=self.k_start, k_step=self.k_step,
                         k_max=self.k_max)
        return mc, tc

    def fit(self, X, y=None):
        mc, tc = self._configs()
        source = X if isinstance(X, MixtureSpec) else FixedDataset(check_prompts(X))
        self.model_, trace = train(tc, source, mc)
        self.loss_trace_ = np.array(trace)
        return self

    def predict(self, X):
        check_is_fitted(self)
        return self.model_.predict(X)
