"""Operator-level circuit that evaluates the posterior-mean predictor.

All operators act on a real matrix ``H`` of shape ``(p, q)`` and return a new
matrix; entries outside an operator's write region are copied unchanged.
Row and column arguments are **1-based and inclusive**, so ``(k, l)`` names
rows ``k..l``. The state for a prompt of length ``k`` with ``m`` components
in dimension ``d`` has ``p = 2d + 4m + 2`` rows and ``q = 2k + 1`` columns;
see ``CONSTRUCTION_NOTES.md`` for the row layout.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np
from scipy.special import expit

from .mixtures import MixtureSpec, Prompt
from ._serialize import fmt_float

OPS = ("copydown", "copyover", "mulop", "affineop", "scaledagg", "softmaxop",
       "divop", "movop", "sigmoidop", "raw")


class CircuitError(ValueError):
    """Bad operator arguments: out-of-range index, causality violation, shape mismatch."""


# -- index helpers -------------------------------------------------------------

def _rows(H: np.ndarray, k: int, l: int) -> slice:
    if not 1 <= k <= l <= H.shape[0]:
        raise CircuitError(f"row range [{k}, {l}] outside 1..{H.shape[0]}")
    return slice(k - 1, l)


def _dest(H: np.ndarray, k: int, length: int) -> slice:
    return _rows(H, k, k + length - 1)


def _cols(H: np.ndarray, cols: Iterable[int]) -> list[int]:
    out = sorted({int(c) for c in cols})
    if out and not (1 <= out[0] and out[-1] <= H.shape[1]):
        raise CircuitError(f"column set {out} outside 1..{H.shape[1]}")
    return [c - 1 for c in out]


def _colsum(H: np.ndarray, rows: Sequence[int], cols: Sequence[int]) -> np.ndarray:
    """Sum of ``H[rows, c]`` over ``c in cols`` (0-based); shared by scaledagg and RAW."""
    if len(cols) == 0:
        return np.zeros(len(rows))
    return H[np.ix_(list(rows), list(cols))].sum(axis=1)


# -- the operators ---------------------------------------------------------------

def apply_copydown(H, k: int, k2: int, l: int, cols) -> np.ndarray:
    """Rows ``k..l`` of each column in ``cols`` copied to rows starting at ``k2``."""
    H = np.asarray(H, dtype=np.float64)
    src, n = _rows(H, k, l), l - k + 1
    dst = _dest(H, k2, n)
    out = H.copy()
    for c in _cols(H, cols):
        out[dst, c] = H[src, c]
    return out


def apply_copyover(H, k: int, k2: int, l: int, cols) -> np.ndarray:
    """Rows ``k..l`` of column ``i-1`` copied into column ``i`` at ``k2``, for ``i`` in ``cols``."""
    H = np.asarray(H, dtype=np.float64)
    src, n = _rows(H, k, l), l - k + 1
    dst = _dest(H, k2, n)
    out = H.copy()
    for c in _cols(H, cols):
        if c == 0:
            raise CircuitError("copyover needs a previous column; column 1 has none")
        out[dst, c] = H[src, c - 1]
    return out


def apply_mulop(H, k: int, k2: int, k3: int, l: int, cols) -> np.ndarray:
    """``H'[k3+t, i] = H[k+t, i] * H[k2+t, i]`` for ``t = 0..l-k``."""
    H = np.asarray(H, dtype=np.float64)
    a, n = _rows(H, k, l), l - k + 1
    b, dst = _dest(H, k2, n), _dest(H, k3, n)
    out = H.copy()
    for c in _cols(H, cols):
        out[dst, c] = H[a, c] * H[b, c]
    return out


def apply_affineop(H, k: int, k2: int, k3: int, l: int, l2: int, l3: int, W, W2, b, cols) -> np.ndarray:
    """``H'[k3..l3, i] = W H[k..l, i] + W2 H[k2..l2, i] + b``."""
    H = np.asarray(H, dtype=np.float64)
    s1, s2, dst = _rows(H, k, l), _rows(H, k2, l2), _rows(H, k3, l3)
    n1, n2, n3 = l - k + 1, l2 - k2 + 1, l3 - k3 + 1
    W = np.asarray(W, dtype=np.float64).reshape(n3, n1)
    W2 = np.asarray(W2, dtype=np.float64)
    W2 = np.zeros((n3, n2)) if W2.ndim == 0 and W2 == 0 else W2.reshape(n3, n2)
    b = np.broadcast_to(np.asarray(b, dtype=np.float64), (n3,))
    out = H.copy()
    for c in _cols(H, cols):
        out[dst, c] = W @ H[s1, c] + W2 @ H[s2, c] + b
    return out


def apply_scaledagg(H, alpha: float, k: int, l: int, k2: int, i: int, cols) -> np.ndarray:
    """``H'[k2+t, i] = alpha * sum_{j in cols} H[k+t, j]``; ``cols`` must precede ``i``."""
    H = np.asarray(H, dtype=np.float64)
    src, n = _rows(H, k, l), l - k + 1
    dst = _dest(H, k2, n)
    (ci,) = _cols(H, [i])
    cs = _cols(H, cols)
    if any(c >= ci for c in cs):
        raise CircuitError(f"scaledagg column set must lie strictly before column {i}")
    out = H.copy()
    out[dst, ci] = alpha * _colsum(H, range(src.start, src.stop), cs)
    return out


def apply_softmaxop(H, k: int, l: int, k2: int) -> np.ndarray:
    """Softmax of rows ``k..l`` of the last column, written at ``k2``."""
    H = np.asarray(H, dtype=np.float64)
    src, n = _rows(H, k, l), l - k + 1
    dst = _dest(H, k2, n)
    v = H[src, -1]
    e = np.exp(v - v.max())
    out = H.copy()
    out[dst, -1] = e / e.sum()
    return out


def apply_divop(H, j: int, k: int, k2: int, l: int, cols) -> np.ndarray:
    H = np.asarray(H, dtype=np.float64)
    src, n = _rows(H, k, l), l - k + 1
    dst = _dest(H, k2, n)
    _rows(H, j, j)
    out = H.copy()
    for c in _cols(H, cols):
        den = H[j - 1, c]
        if den == 0.0:
            raise ZeroDivisionError(f"divop: H[{j}, {c + 1}] is zero")
        out[dst, c] = H[src, c] / den
    return out


def apply_movop(H, k: int, k2: int, l: int, cols) -> np.ndarray:
    """Block copy of rows ``k..l`` to rows starting at ``k2`` (the source is kept)."""
    return apply_copydown(H, k, k2, l, cols)


def apply_sigmoidop(H, k: int, k2: int) -> np.ndarray:
    H = np.asarray(H, dtype=np.float64)
    _rows(H, k, k)
    _rows(H, k2, k2)
    out = H.copy()
    out[k2 - 1, -1] = expit(H[k - 1, -1])
    return out


# -- RAW -------------------------------------------------------------------------

@dataclass
class RawParams:
    """Read-arithmetic-write parameters.

    ``mode`` is ``"mul"`` (elementwise product) or ``"add"``. ``I``, ``J``,
    ``K`` are 1-based row lists; ``pi`` maps a 1-based column to the earlier
    columns it aggregates (missing means empty). ``columns`` restricts which
    columns are written; ``None`` means all.
    """

    mode: str
    I: tuple
    J: tuple
    K: tuple
    theta_I: np.ndarray
    theta_J: np.ndarray
    theta_K: np.ndarray
    pi: Mapping[int, tuple] = field(default_factory=dict)
    columns: frozenset | None = None

    def __post_init__(self):
        if self.mode not in ("mul", "add"):
            raise CircuitError(f"RAW mode must be 'mul' or 'add', got {self.mode!r}")
        self.I, self.J, self.K = tuple(self.I), tuple(self.J), tuple(self.K)
        self.theta_I = np.asarray(self.theta_I, dtype=np.float64)
        self.theta_J = np.asarray(self.theta_J, dtype=np.float64)
        self.theta_K = np.asarray(self.theta_K, dtype=np.float64)
        r = self.theta_K.shape[1] if self.theta_K.ndim == 2 else -1
        if (self.theta_I.shape != (r, len(self.I)) or self.theta_J.shape != (r, len(self.J))
                or self.theta_K.shape != (len(self.K), r)):
            raise CircuitError(
                f"RAW shapes do not match index sets: theta_I {self.theta_I.shape}, "
                f"theta_J {self.theta_J.shape}, theta_K {self.theta_K.shape} for "
                f"|I|={len(self.I)}, |J|={len(self.J)}, |K|={len(self.K)}")
        for i, prev in self.pi.items():
            if any(not 1 <= j < i for j in prev):
                raise CircuitError(f"RAW map is not causal at column {i}: {prev}")


def apply_raw(H, params: RawParams) -> np.ndarray:
    H = np.asarray(H, dtype=np.float64)
    p, q = H.shape
    for rows in (params.I, params.J, params.K):
        if any(not 1 <= r <= p for r in rows):
            raise CircuitError(f"RAW row index outside 1..{p}")
    I = [r - 1 for r in params.I]
    J = [r - 1 for r in params.J]
    K = [r - 1 for r in params.K]
    cols = range(1, q + 1) if params.columns is None else sorted(params.columns)
    out = H.copy()
    for i in cols:
        if not 1 <= i <= q:
            raise CircuitError(f"RAW column {i} outside 1..{q}")
        prev = _cols(H, params.pi.get(i, ()))
        agg = (params.theta_I / max(len(prev), 1)) @ _colsum(H, I, prev)
        read = params.theta_J @ H[J, i - 1]
        mixed = read * agg if params.mode == "mul" else read + agg
        out[K, i - 1] = params.theta_K @ mixed
    return out


@dataclass
class CircuitStep:
    """One operator application; ``args`` holds its keyword arguments."""

    op: str
    args: dict

    def __post_init__(self):
        if self.op not in OPS:
            raise CircuitError(f"unknown operator {self.op!r}")


_APPLY = {
    "copydown": apply_copydown, "copyover": apply_copyover, "mulop": apply_mulop,
    "affineop": apply_affineop, "scaledagg": apply_scaledagg, "softmaxop": apply_softmaxop,
    "divop": apply_divop, "movop": apply_movop, "sigmoidop": apply_sigmoidop,
}


def apply_step(H, step: CircuitStep) -> np.ndarray:
    if step.op == "raw":
        return apply_raw(H, step.args["params"])
    return _APPLY[step.op](H, **step.args)


def lower_to_raw(step: CircuitStep) -> RawParams:
    """Express copyover, copydown or scaledagg as a single additive RAW map."""
    a = step.args
    if step.op == "copyover":
        k, k2, l = a["k"], a["k2"], a["l"]
        n = l - k + 1
        cols = frozenset(int(c) for c in a["cols"])
        rows = tuple(range(k, l + 1))
        return RawParams("add", rows, (), tuple(range(k2, k2 + n)), np.eye(n), np.zeros((n, 0)),
                         np.eye(n), {i: (i - 1,) for i in cols if i >= 2}, cols)
    if step.op == "copydown":
        # reads the column itself, which RAW can only do through J
        k, k2, l = a["k"], a["k2"], a["l"]
        n = l - k + 1
        rows = tuple(range(k, l + 1))
        return RawParams("add", rows, rows, tuple(range(k2, k2 + n)), np.zeros((n, n)), np.eye(n),
                         np.eye(n), {}, frozenset(int(c) for c in a["cols"]))
    if step.op == "scaledagg":
        k, l, k2, i = a["k"], a["l"], a["k2"], a["i"]
        n = l - k + 1
        cols = tuple(sorted(int(c) for c in a["cols"]))
        # RAW averages over pi(i); scaling theta_I by |pi(i)| turns that back into a sum
        return RawParams("add", tuple(range(k, l + 1)), (), tuple(range(k2, k2 + n)),
                         max(len(cols), 1) * np.eye(n), np.zeros((n, 0)), a["alpha"] * np.eye(n),
                         {int(i): cols}, frozenset([int(i)]))
    raise CircuitError(f"no RAW lowering for {step.op!r}")


# -- softmax through sigmoids ----------------------------------------------------

def softmax_via_sigmoid(H, k: int, l: int, k2: int) -> np.ndarray:
    """Same result as :func:`apply_softmaxop`, built from affine, sigmoid, div and mov steps.

    Works in scratch rows appended below ``H`` and drops them at the end.
    Accurate while the logits are moderate (roughly |s| < 20): ``e^s`` is
    recovered as ``1/sigmoid(-s) - 1``.
    """
    H = np.asarray(H, dtype=np.float64)
    p, q = H.shape
    _rows(H, k, l)
    n = l - k + 1
    _dest(H, k2, n)
    one = p + 1
    neg, sig, inv, ex = one + 1, one + 1 + n, one + 1 + 2 * n, one + 1 + 3 * n
    tot = one + 1 + 4 * n
    soft = tot + 1
    X = np.vstack([H, np.zeros((soft + n - 1 - p, q))])
    last = [q]
    X = apply_affineop(X, k, k, one, l, l, one, np.zeros((1, n)), 0, 1.0, last)
    X = apply_affineop(X, k, k, neg, l, l, neg + n - 1, -np.eye(n), 0, 0.0, last)
    for t in range(n):
        X = apply_sigmoidop(X, neg + t, sig + t)
    for t in range(n):
        X = apply_divop(X, sig + t, one, inv + t, one, last)
    X = apply_affineop(X, inv, inv, ex, inv + n - 1, inv + n - 1, ex + n - 1, np.eye(n), 0, -1.0, last)
    X = apply_affineop(X, ex, ex, tot, ex + n - 1, ex + n - 1, tot, np.ones((1, n)), 0, 0.0, last)
    X = apply_divop(X, tot, ex, soft, ex + n - 1, last)
    X = apply_movop(X, soft, k2, soft + n - 1, last)
    return X[:p]


# -- the posterior-mean circuit --------------------------------------------------

def state_shape(d: int, m: int, k: int) -> tuple[int, int]:
    return 2 * d + 4 * m + 2, 2 * k + 1


def encode_prompt(prompt: Prompt, m: int) -> np.ndarray:
    """Initial state: ``x_j`` in rows ``1..d`` of column ``2j-1``, ``y_j`` in row 1 of column ``2j``."""
    d, k = prompt.d, prompt.k
    H = np.zeros(state_shape(d, m, k))
    H[:d, 0::2] = prompt.xs.T
    H[0, 1::2] = prompt.ys
    return H


def build_posterior_circuit(spec: MixtureSpec, k: int) -> list[CircuitStep]:
    """The nine operator steps taking the encoded prompt to the posterior-mean prediction."""
    if spec.sigma <= 0:
        raise CircuitError("the circuit needs sigma > 0")
    if k < 0:
        raise CircuitError("prompt length must be nonnegative")
    d, m = spec.d, spec.m
    q = 2 * k + 1
    odd = tuple(range(1, q + 1, 2))
    even = tuple(range(2, q, 2))
    x2, y, r = d + 1, 2 * d + 1, 2 * d + 2          # second x copy, label, residuals
    sq, pr, pw, out = 2 * d + m + 2, 2 * d + 2 * m + 2, 2 * d + 3 * m + 2, 2 * d + 4 * m + 2
    return [
        CircuitStep("copydown", dict(k=1, k2=x2, l=d, cols=odd)),
        CircuitStep("copyover", dict(k=x2, k2=x2, l=2 * d, cols=even)),
        CircuitStep("copydown", dict(k=1, k2=y, l=1, cols=even)),
        CircuitStep("affineop", dict(k=x2, k2=y, k3=r, l=2 * d, l2=y, l3=r + m - 1,
                                     W=spec.components, W2=-np.ones((m, 1)), b=0.0,
                                     cols=even + (q,))),
        CircuitStep("mulop", dict(k=r, k2=r, k3=sq, l=r + m - 1, cols=even)),
        CircuitStep("scaledagg", dict(alpha=-1.0 / (2.0 * spec.sigma ** 2), k=sq, l=sq + m - 1,
                                      k2=sq, i=q, cols=even)),
        CircuitStep("softmaxop", dict(k=sq, l=sq + m - 1, k2=pr)),
        CircuitStep("mulop", dict(k=r, k2=pr, k3=pw, l=r + m - 1, cols=(q,))),
        CircuitStep("affineop", dict(k=pw, k2=1, k3=out, l=pw + m - 1, l2=1, l3=out,
                                     W=np.ones((1, m)), W2=0.0, b=0.0, cols=(q,))),
    ]


def trace_circuit(prompt: Prompt, spec: MixtureSpec) -> list[np.ndarray]:
    """All ten states, from the encoded prompt through the final matrix."""
    if prompt.d != spec.d:
        raise CircuitError(f"prompt dimension {prompt.d} does not match spec dimension {spec.d}")
    states = [encode_prompt(prompt, spec.m)]
    for step in build_posterior_circuit(spec, prompt.k):
        states.append(apply_step(states[-1], step))
    return states


def run_circuit(prompt: Prompt, spec: MixtureSpec) -> float:
    return float(trace_circuit(prompt, spec)[-1][-1, -1])


def circuit_predictor(spec: MixtureSpec):
    """Batch predictor running the circuit prompt by prompt."""
    def predict(batch):
        return np.array([run_circuit(p, spec) for p in batch])
    return predict


def write_trace(directory, states: Sequence[np.ndarray]) -> list[Path]:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    paths = []
    for t, H in enumerate(states):
        path = directory / f"H{t}.csv"
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            for row in H:
                w.writerow([fmt_float(v) for v in row])
        paths.append(path)
    return paths
