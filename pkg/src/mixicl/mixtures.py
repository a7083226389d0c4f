"""Mixture-of-linear-regressions data: components, prompts and shifted variants."""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from ._rng import check_random_state, make_rng
from ._serialize import fmt_float, json_array


@dataclass(frozen=True, eq=False)
class MixtureSpec:
    """Uniform mixture over ``m`` regression vectors with Gaussian label noise.

    Parameters
    ----------
    components : array-like, shape (m, d)
        One regression vector per row.
    sigma : float
        Standard deviation of the label noise. ``0`` gives noiseless labels.
    """

    components: np.ndarray
    sigma: float = 1.0

    def __post_init__(self):
        w = np.array(self.components, dtype=np.float64)
        if w.ndim != 2 or w.shape[0] < 1 or w.shape[1] < 1:
            raise ValueError(f"components must be a nonempty (m, d) matrix, got shape {w.shape}")
        if not np.all(np.isfinite(w)):
            raise ValueError("components must be finite")
        sigma = float(self.sigma)
        if not sigma >= 0.0 or not np.isfinite(sigma):
            raise ValueError(f"sigma must be a finite nonnegative number, got {self.sigma!r}")
        w.setflags(write=False)
        object.__setattr__(self, "components", w)
        object.__setattr__(self, "sigma", sigma)

    @property
    def m(self) -> int:
        return self.components.shape[0]

    @property
    def d(self) -> int:
        return self.components.shape[1]


@dataclass(eq=False)
class Prompt:
    """One prompt ``(x_1, y_1, ..., x_k, y_k, x_{k+1})`` and its hidden label.

    ``latent_index`` is 1-based and ``query_label`` is never shown to a
    predictor; both are kept for evaluation.
    """

    xs: np.ndarray
    ys: np.ndarray
    latent_index: int = 1
    query_label: float = float("nan")

    def __post_init__(self):
        self.xs = np.atleast_2d(np.asarray(self.xs, dtype=np.float64))
        self.ys = np.asarray(self.ys, dtype=np.float64).reshape(-1)
        if self.xs.shape[0] != self.ys.shape[0] + 1:
            raise ValueError(
                f"a prompt with {self.ys.shape[0]} labels needs {self.ys.shape[0] + 1} covariates, "
                f"got {self.xs.shape[0]}"
            )
        self.latent_index = int(self.latent_index)
        self.query_label = float(self.query_label)

    @property
    def k(self) -> int:
        return self.ys.shape[0]

    @property
    def d(self) -> int:
        return self.xs.shape[1]

    @property
    def query(self) -> np.ndarray:
        return self.xs[-1]


@dataclass(eq=False)
class PromptBatch:
    """``n`` prompts of a common length ``k`` stored as dense arrays.

    Attributes
    ----------
    xs : ndarray, shape (n, k + 1, d)
    ys : ndarray, shape (n, k)
    latent : ndarray of int, shape (n,)
        1-based component index of each prompt.
    query_y : ndarray, shape (n,)
    """

    xs: np.ndarray
    ys: np.ndarray
    latent: np.ndarray = field(default=None)
    query_y: np.ndarray = field(default=None)

    def __post_init__(self):
        self.xs = np.asarray(self.xs, dtype=np.float64)
        self.ys = np.asarray(self.ys, dtype=np.float64)
        if self.xs.ndim != 3 or self.ys.ndim != 2:
            raise ValueError("xs must be (n, k+1, d) and ys must be (n, k)")
        n, kp1, _ = self.xs.shape
        if self.ys.shape != (n, kp1 - 1):
            raise ValueError(f"ys has shape {self.ys.shape}, expected {(n, kp1 - 1)}")
        if self.latent is None:
            self.latent = np.ones(n, dtype=np.int64)
        self.latent = np.asarray(self.latent, dtype=np.int64).reshape(n)
        if self.query_y is None:
            self.query_y = np.full(n, np.nan)
        self.query_y = np.asarray(self.query_y, dtype=np.float64).reshape(n)

    @property
    def n(self) -> int:
        return self.xs.shape[0]

    @property
    def k(self) -> int:
        return self.ys.shape[1]

    @property
    def d(self) -> int:
        return self.xs.shape[2]

    @property
    def queries(self) -> np.ndarray:
        return self.xs[:, -1, :]

    def __len__(self) -> int:
        return self.n

    def __getitem__(self, i: int) -> Prompt:
        return Prompt(self.xs[i], self.ys[i], int(self.latent[i]), float(self.query_y[i]))

    def __iter__(self):
        for i in range(self.n):
            yield self[i]

    def subset(self, idx) -> "PromptBatch":
        return PromptBatch(self.xs[idx], self.ys[idx], self.latent[idx], self.query_y[idx])

    @classmethod
    def from_prompts(cls, prompts: Sequence[Prompt]) -> "PromptBatch":
        prompts = list(prompts)
        if not prompts:
            raise ValueError("cannot batch an empty list of prompts")
        ks = {p.k for p in prompts}
        if len(ks) != 1:
            raise ValueError(f"prompts in a batch must share one length, got {sorted(ks)}")
        return cls(
            np.stack([p.xs for p in prompts]),
            np.stack([p.ys for p in prompts]),
            np.array([p.latent_index for p in prompts]),
            np.array([p.query_label for p in prompts]),
        )


def as_batch(prompts) -> PromptBatch:
    if isinstance(prompts, PromptBatch):
        return prompts
    if isinstance(prompts, Prompt):
        return PromptBatch.from_prompts([prompts])
    return PromptBatch.from_prompts(prompts)


def _sphere(n: int, d: int, radius: float, rng: np.random.Generator) -> np.ndarray:
    out = np.empty((n, d))
    for i in range(n):
        g = rng.standard_normal(d)
        norm = np.linalg.norm(g)
        while norm == 0.0:
            g = rng.standard_normal(d)
            norm = np.linalg.norm(g)
        out[i] = g * (radius / norm)
    return out


def sample_components(m: int, d: int, rng=None) -> np.ndarray:
    """Draw ``m`` vectors uniformly on the sphere of radius ``sqrt(d)``."""
    if int(m) < 1 or int(d) < 1:
        raise ValueError(f"need m >= 1 and d >= 1, got m={m}, d={d}")
    return _sphere(int(m), int(d), np.sqrt(d), check_random_state(rng))


def sample_spec(m: int, d: int, sigma: float, seed: int) -> MixtureSpec:
    """Components drawn from the ``components`` substream of ``seed``."""
    return MixtureSpec(sample_components(m, d, make_rng(seed, "components")), sigma)


class PromptStreams:
    """Separate generators for the latent index, the covariates and the noise.

    Keeping the three apart lets a shifted sampler reuse the exact covariate
    and noise draws of the unshifted one.
    """

    def __init__(self, latent: np.random.Generator, covariates: np.random.Generator,
                 noise: np.random.Generator):
        self.latent = latent
        self.covariates = covariates
        self.noise = noise

    @classmethod
    def from_seed(cls, seed: int, *names) -> "PromptStreams":
        return cls(make_rng(seed, *names, "latent"),
                   make_rng(seed, *names, "covariates"),
                   make_rng(seed, *names, "noise"))

    @classmethod
    def coerce(cls, rng) -> "PromptStreams":
        if isinstance(rng, cls):
            return rng
        if isinstance(rng, (int, np.integer)):
            return cls.from_seed(int(rng))
        g = check_random_state(rng)
        return cls(g, g, g)


class PromptSampler:
    """Draws prompts from a mixture, optionally with covariates scaled by ``kappa``.

    Calling the sampler as ``sampler(k, n, rng)`` returns a :class:`PromptBatch`.
    """

    def __init__(self, spec: MixtureSpec, kappa: float = 1.0):
        kappa = float(kappa)
        if not kappa > 0.0:
            raise ValueError(f"kappa must be positive, got {kappa}")
        self.spec = spec
        self.kappa = kappa

    def sample_batch(self, k: int, n: int, rng=None) -> PromptBatch:
        if k < 0:
            raise ValueError(f"prompt length must be nonnegative, got {k}")
        if n < 1:
            raise ValueError(f"need at least one prompt, got n={n}")
        s = PromptStreams.coerce(rng)
        spec = self.spec
        latent = s.latent.integers(0, spec.m, size=n)
        xs = s.covariates.standard_normal((n, k + 1, spec.d))
        if self.kappa != 1.0:
            xs = self.kappa * xs
        z = s.noise.standard_normal((n, k + 1))
        w = spec.components[latent]
        labels = np.einsum("nkd,nd->nk", xs, w) + spec.sigma * z
        return PromptBatch(xs, labels[:, :k], latent + 1, labels[:, k])

    __call__ = sample_batch

    def sample(self, k: int, rng=None) -> Prompt:
        return self.sample_batch(k, 1, rng)[0]


def sample_prompt(spec: MixtureSpec, k: int, rng=None) -> Prompt:
    """Draw a single prompt of length ``k`` from ``spec``."""
    return PromptSampler(spec).sample(k, rng)


def sample_prompts(spec: MixtureSpec, k: int, n: int, rng=None) -> PromptBatch:
    return PromptSampler(spec).sample_batch(k, n, rng)


def shift_covariate_scale(spec: MixtureSpec, kappa: float) -> PromptSampler:
    """Sampler whose covariates, query included, are multiplied by ``kappa``."""
    return PromptSampler(spec, kappa)


def shift_weight_scale(spec: MixtureSpec, alpha: float) -> MixtureSpec:
    alpha = float(alpha)
    if not alpha > 0.0:
        raise ValueError(f"alpha must be positive, got {alpha}")
    return MixtureSpec(spec.components * alpha, spec.sigma)


def shift_weight_add(spec: MixtureSpec, eps: float) -> MixtureSpec:
    """Move every component by ``eps / sqrt(d)`` along the all-ones direction."""
    eps = float(eps)
    if not eps >= 0.0:
        raise ValueError(f"eps must be nonnegative, got {eps}")
    return MixtureSpec(spec.components + eps / np.sqrt(spec.d), spec.sigma)


# -- JSONL -------------------------------------------------------------------

def prompt_to_json(p: Prompt) -> str:
    xs = "[" + ", ".join(json_array(x) for x in p.xs) + "]"
    return (f'{{"xs": {xs}, "ys": {json_array(p.ys)}, "latent": {int(p.latent_index)}, '
            f'"query_y": {fmt_float(p.query_label)}}}')


def write_prompts_jsonl(path, prompts: Iterable[Prompt]) -> None:
    with open(path, "w") as fh:
        for p in prompts:
            fh.write(prompt_to_json(p) + "\n")


def read_prompts_jsonl(path) -> list[Prompt]:
    out = []
    for line in Path(path).read_text().splitlines():
        if not line.strip():
            continue
        rec = json.loads(line)
        d = len(rec["xs"][0])
        out.append(Prompt(np.array(rec["xs"], dtype=np.float64).reshape(-1, d), rec["ys"],
                          rec["latent"], rec["query_y"]))
    return out
