"""Decoder-only autoregressive transformer layer, written out in numpy.

A layer maps a ``p x q`` matrix ``H`` (one column per token) to another of
the same shape. Column ``i`` attends only to the strict prefix ``1..i-1``;
the first column receives no attention output. Attention logits are not
rescaled by ``1/sqrt(d_att)``.

Internally everything runs on token-major arrays of shape ``(batch, q, p)``;
:func:`layer_forward` and :func:`model_forward` take and return the
column-per-token ``(p, q)`` layout.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.special import erf

from ._rng import check_random_state

LN_EPS = 1e-12
_SQRT2 = np.sqrt(2.0)


@dataclass(frozen=True)
class ModelConfig:
    p: int = 256
    n_heads: int = 8
    d_att: int = 32
    d_ff: int = 1024
    n_layers: int = 12

    def __post_init__(self):
        for name in ("p", "n_heads", "d_att", "d_ff", "n_layers"):
            if getattr(self, name) < (0 if name == "n_layers" else 1):
                raise ValueError(f"{name} must be positive, got {getattr(self, name)}")


@dataclass
class LayerParams:
    """Weights of one layer.

    ``W_Q``, ``W_K``, ``W_V`` have shape ``(n_heads, d_att, p)``, ``W_C`` has
    shape ``(n_heads, p, d_att)``, ``W_in`` is ``(d_ff, p)`` and ``W_out`` is
    ``(p, d_ff)``.
    """

    W_Q: np.ndarray
    W_K: np.ndarray
    W_V: np.ndarray
    W_C: np.ndarray
    W_in: np.ndarray
    W_out: np.ndarray

    NAMES = ("W_Q", "W_K", "W_V", "W_C", "W_in", "W_out")

    def __post_init__(self):
        for name in self.NAMES:
            setattr(self, name, np.asarray(getattr(self, name), dtype=np.float64))
        h, a, p = self.W_Q.shape
        f = self.W_in.shape[0]
        expected = {"W_Q": (h, a, p), "W_K": (h, a, p), "W_V": (h, a, p), "W_C": (h, p, a),
                    "W_in": (f, p), "W_out": (p, f)}
        for name, shape in expected.items():
            if getattr(self, name).shape != shape:
                raise ValueError(f"{name} has shape {getattr(self, name).shape}, expected {shape}")

    @property
    def config(self) -> ModelConfig:
        h, a, p = self.W_Q.shape
        return ModelConfig(p, h, a, self.W_in.shape[0], 1)

    def arrays(self) -> list[np.ndarray]:
        return [getattr(self, n) for n in self.NAMES]

    def copy(self) -> "LayerParams":
        return LayerParams(*(a.copy() for a in self.arrays()))

    @classmethod
    def zeros(cls, config: ModelConfig) -> "LayerParams":
        h, a, p, f = config.n_heads, config.d_att, config.p, config.d_ff
        return cls(np.zeros((h, a, p)), np.zeros((h, a, p)), np.zeros((h, a, p)),
                   np.zeros((h, p, a)), np.zeros((f, p)), np.zeros((p, f)))

    @classmethod
    def random(cls, config: ModelConfig, rng=None, std: float = 0.02) -> "LayerParams":
        rng = check_random_state(rng)
        z = cls.zeros(config)
        return cls(*(std * rng.standard_normal(a.shape) for a in z.arrays()))


def softmax(v) -> np.ndarray:
    v = np.asarray(v, dtype=np.float64)
    if v.size == 0:
        return v.copy()
    e = np.exp(v - v.max())
    return e / e.sum()


def gelu(u):
    """Exact GeLU, ``u/2 * (1 + erf(u/sqrt(2)))``."""
    u = np.asarray(u, dtype=np.float64)
    out = 0.5 * u * (1.0 + erf(u / _SQRT2))
    return float(out) if out.ndim == 0 else out


def gelu_grad(u: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + erf(u / _SQRT2)) + u * np.exp(-0.5 * u * u) / np.sqrt(2.0 * np.pi)


def layernorm(v) -> np.ndarray:
    """``sqrt(p) (v - mean) / ||v - mean||`` along the last axis; zero when the deviation vanishes."""
    v = np.asarray(v, dtype=np.float64)
    c = v - v.mean(axis=-1, keepdims=True)
    norm = np.linalg.norm(c, axis=-1, keepdims=True)
    ok = norm > LN_EPS
    return np.where(ok, np.sqrt(v.shape[-1]) * c / np.where(ok, norm, 1.0), 0.0)


def _prefix_mask(q: int) -> np.ndarray:
    return np.tril(np.ones((q, q), dtype=bool), k=-1)


def _prefix_softmax(logits: np.ndarray) -> np.ndarray:
    """Softmax over keys ``j < i`` for each query ``i``; the first row is all zero."""
    q = logits.shape[-1]
    mask = _prefix_mask(q)
    masked = np.where(mask, logits, -np.inf)
    mx = masked.max(axis=-1, keepdims=True)
    mx = np.where(np.isfinite(mx), mx, 0.0)
    e = np.exp(masked - mx)
    s = e.sum(axis=-1, keepdims=True)
    return e / np.where(s > 0, s, 1.0)


def _heads(Y: np.ndarray, h: int) -> np.ndarray:
    """``(B, q, h*a)`` -> ``(B, h, q, a)``."""
    B, q, ha = Y.shape
    return Y.reshape(B, q, h, ha // h).transpose(0, 2, 1, 3)


def _merge(Y: np.ndarray) -> np.ndarray:
    """``(B, h, q, a)`` -> ``(B, q, h*a)``."""
    B, h, q, a = Y.shape
    return Y.transpose(0, 2, 1, 3).reshape(B, q, h * a)


def _lin(X: np.ndarray, W: np.ndarray) -> np.ndarray:
    """``X @ W.T`` over the last axis, as one 2-D product."""
    return (X.reshape(-1, X.shape[-1]) @ W.T).reshape(X.shape[:-1] + (W.shape[0],))


def forward_tokens(X: np.ndarray, params: LayerParams, ff_mask: np.ndarray | None = None):
    """One layer on token-major input of shape ``(B, q, p)``.

    ``ff_mask`` multiplies the feedforward activations (dropout). Returns the
    output and a cache of intermediates for backpropagation.
    """
    h, a, p = params.W_Q.shape
    QKV = _lin(X, np.concatenate([params.W_Q.reshape(h * a, p), params.W_K.reshape(h * a, p),
                                  params.W_V.reshape(h * a, p)]))
    Q, K, V = (_heads(QKV[..., j * h * a:(j + 1) * h * a], h) for j in range(3))
    S = _prefix_softmax(Q @ K.swapaxes(-1, -2))
    O = S @ V
    A = _lin(_merge(O), params.W_C.transpose(1, 0, 2).reshape(p, h * a))
    Z = A + X
    N = layernorm(Z)
    U = _lin(N, params.W_in)
    Phi = 0.5 * (1.0 + erf(U / _SQRT2))
    G = U * Phi
    if ff_mask is not None:
        G = G * ff_mask
    out = Z + _lin(G, params.W_out)
    cache = dict(X=X, Q=Q, K=K, V=V, S=S, O=O, Z=Z, N=N, U=U, Phi=Phi, G=G, ff_mask=ff_mask)
    return out, cache


def _check_input(H: np.ndarray, p: int) -> np.ndarray:
    H = np.asarray(H, dtype=np.float64)
    if H.ndim != 2 or H.shape[0] != p:
        raise ValueError(f"expected a {p} x q matrix, got shape {H.shape}")
    return H


def layer_forward(H, params: LayerParams) -> np.ndarray:
    H = _check_input(H, params.W_in.shape[1])
    out, _ = forward_tokens(H.T[None], params)
    return out[0].T


def model_forward(H0, layers) -> np.ndarray:
    H = np.asarray(H0, dtype=np.float64)
    for params in layers:
        H = layer_forward(H, params)
    return H


# -- binary container ----------------------------------------------------------
#
# header: p, n_heads, d_att, d_ff, n_layers, has_io as little-endian int64;
# then per layer W_Q, W_K, W_V, W_C, W_in, W_out (row-major float64 LE);
# if has_io: embedding (p, p), readout (p,), readout bias (1,).

_HEADER = struct.Struct("<6q")


def save_model(path, config: ModelConfig, layers, io=None) -> None:
    parts = [_HEADER.pack(config.p, config.n_heads, config.d_att, config.d_ff, len(layers),
                          0 if io is None else 1)]
    for params in layers:
        parts.extend(np.ascontiguousarray(a, dtype="<f8").tobytes() for a in params.arrays())
    if io is not None:
        emb, readout, bias = io
        parts.append(np.ascontiguousarray(emb, dtype="<f8").reshape(config.p, config.p).tobytes())
        parts.append(np.ascontiguousarray(readout, dtype="<f8").reshape(config.p).tobytes())
        parts.append(np.ascontiguousarray(bias, dtype="<f8").reshape(1).tobytes())
    Path(path).write_bytes(b"".join(parts))


def load_model(path):
    """Return ``(config, layers, io)``; ``io`` is None when absent."""
    raw = Path(path).read_bytes()
    p, h, a, f, n_layers, has_io = _HEADER.unpack_from(raw, 0)
    config = ModelConfig(p, h, a, f, n_layers)
    offset = _HEADER.size

    def take(shape):
        nonlocal offset
        count = int(np.prod(shape))
        arr = np.frombuffer(raw, dtype="<f8", count=count, offset=offset).reshape(shape)
        offset += 8 * count
        return arr.astype(np.float64)

    shapes = [(h, a, p), (h, a, p), (h, a, p), (h, p, a), (f, p), (p, f)]
    layers = [LayerParams(*(take(s) for s in shapes)) for _ in range(n_layers)]
    io = (take((p, p)), take((p,)), take((1,))) if has_io else None
    if offset != len(raw):
        raise ValueError(f"{path}: {len(raw) - offset} trailing bytes")
    return config, layers, io
