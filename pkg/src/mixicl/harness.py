"""Monte-Carlo evaluation: MSE curves, predictor distances and shift sweeps."""
from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from ._serialize import fmt_float
from .mixtures import (MixtureSpec, PromptBatch, PromptSampler, PromptStreams,
                       shift_covariate_scale, shift_weight_add, shift_weight_scale)

METRICS = ("normalized_mse", "sq_distance", "oracle_error")
SHIFT_KINDS = ("covariate_scale", "weight_scale", "weight_add")
IDENTITY = {"covariate_scale": 1.0, "weight_scale": 1.0, "weight_add": 0.0}
DEFAULT_GRIDS = {
    "covariate_scale": (0.33, 0.5, 1.0, 2.0, 3.0),
    "weight_scale": (0.33, 0.5, 1.0, 2.0, 3.0),
    "weight_add": (0.0, 0.25, 0.5, 0.75, 1.0),
}

Predictor = Callable[[PromptBatch], np.ndarray]
PromptSource = Callable[..., PromptBatch]


@dataclass
class MetricCurve:
    k_values: list
    mean: list
    stderr: list
    n: list
    metric_kind: str = "normalized_mse"
    setting: str = ""

    def __post_init__(self):
        if self.metric_kind not in METRICS:
            raise ValueError(f"unknown metric {self.metric_kind!r}")
        lens = {len(self.k_values), len(self.mean), len(self.stderr), len(self.n)}
        if len(lens) != 1:
            raise ValueError("curve fields must have equal lengths")

    def __len__(self):
        return len(self.k_values)

    def at(self, k: int) -> tuple[float, float]:
        i = list(self.k_values).index(k)
        return self.mean[i], self.stderr[i]


def _summary(values: np.ndarray) -> tuple[float, float]:
    n = values.size
    se = float(np.std(values, ddof=1) / np.sqrt(n)) if n > 1 else 0.0
    return float(np.mean(values)), se


def _ks(k_max, k_values) -> list[int]:
    if k_values is not None:
        ks = [int(k) for k in k_values]
    else:
        ks = list(range(1, int(k_max) + 1))
    if not ks:
        raise ValueError("no prompt lengths to evaluate")
    return ks


def _draw(source: PromptSource, k: int, n: int, seed: int) -> PromptBatch:
    # one stream per prompt length, independent of the setting being evaluated
    return source(k, n, PromptStreams.from_seed(seed, "eval", k))


def eval_mse_curve(predictor: Predictor, prompt_source: PromptSource, k_max: int | None = None,
                   n_prompts: int = 256, seed: int = 0, k_values=None, setting: str = "") -> MetricCurve:
    """Per prompt length, mean and standard error of ``(y_hat - y)^2 / d`` on fresh prompts."""
    if n_prompts < 2:
        raise ValueError("need at least two prompts per length for a standard error")
    ks = _ks(k_max, k_values)
    means, ses = [], []
    for k in ks:
        batch = _draw(prompt_source, k, n_prompts, seed)
        err = (np.asarray(predictor(batch)) - batch.query_y) ** 2 / batch.d
        mu, se = _summary(err)
        means.append(mu)
        ses.append(se)
    return MetricCurve(ks, means, ses, [n_prompts] * len(ks), "normalized_mse", setting)


def eval_sq_distance(f: Predictor, g: Predictor, prompt_source: PromptSource, k_max: int | None = None,
                     n_prompts: int = 256, seed: int = 0, k_values=None, setting: str = "") -> MetricCurve:
    """Per prompt length, mean of ``(f(P) - g(P))^2`` with both predictors on the same prompts."""
    if n_prompts < 2:
        raise ValueError("need at least two prompts per length for a standard error")
    ks = _ks(k_max, k_values)
    means, ses = [], []
    for k in ks:
        batch = _draw(prompt_source, k, n_prompts, seed)
        gap = (np.asarray(f(batch)) - np.asarray(g(batch))) ** 2
        mu, se = _summary(gap)
        means.append(mu)
        ses.append(se)
    return MetricCurve(ks, means, ses, [n_prompts] * len(ks), "sq_distance", setting)


def paired_mse_gap(f: Predictor, g: Predictor, batch: PromptBatch) -> tuple[float, float]:
    """Mean and standard error of ``err_f - err_g`` (normalized squared errors) on one batch."""
    ef = (np.asarray(f(batch)) - batch.query_y) ** 2
    eg = (np.asarray(g(batch)) - batch.query_y) ** 2
    return _summary((ef - eg) / batch.d)


def shifted_source(kind: str, value: float, base_spec: MixtureSpec) -> PromptSampler:
    if kind == "covariate_scale":
        return shift_covariate_scale(base_spec, value)
    if kind == "weight_scale":
        return PromptSampler(shift_weight_scale(base_spec, value))
    if kind == "weight_add":
        return PromptSampler(shift_weight_add(base_spec, value))
    raise ValueError(f"unknown shift kind {kind!r}; expected one of {SHIFT_KINDS}")


def shift_sweep(kind: str, grid: Sequence[float], predictor: Predictor, base_spec: MixtureSpec,
                k_max: int | None = None, n_prompts: int = 256, seed: int = 0,
                k_values=None) -> list[tuple[float, MetricCurve]]:
    """One MSE curve per grid value; the predictor keeps the unshifted components.

    The no-shift value is always evaluated. Every grid point sees the same
    underlying random draws, so the no-shift curve equals the unshifted run.
    """
    if kind not in SHIFT_KINDS:
        raise ValueError(f"unknown shift kind {kind!r}; expected one of {SHIFT_KINDS}")
    values = [float(v) for v in grid]
    if not values:
        raise ValueError("shift grid is empty")
    sources = [(v, shifted_source(kind, v, base_spec)) for v in values]
    if IDENTITY[kind] not in values:
        sources.append((IDENTITY[kind], PromptSampler(base_spec)))
        sources.sort(key=lambda t: t[0])
    return [(v, eval_mse_curve(predictor, src, k_max, n_prompts, seed, k_values, f"{kind}={v:g}"))
            for v, src in sources]


# -- reporting -----------------------------------------------------------------

CSV_FIELDS = ("metric", "setting", "k", "mean", "stderr", "n")


def _check_curves(curves) -> list[MetricCurve]:
    curves = [curves] if isinstance(curves, MetricCurve) else list(curves)
    if not curves:
        raise ValueError("nothing to report")
    for c in curves:
        if len(c) == 0:
            raise ValueError("curve has no prompt lengths")
    return curves


def write_csv(path, curves) -> None:
    curves = _check_curves(curves)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(CSV_FIELDS)
        for c in curves:
            for k, mu, se, n in zip(c.k_values, c.mean, c.stderr, c.n):
                w.writerow([c.metric_kind, c.setting, int(k), fmt_float(mu), fmt_float(se), int(n)])


def read_csv(path) -> list[MetricCurve]:
    groups: dict = {}
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            key = (row["metric"], row["setting"])
            g = groups.setdefault(key, ([], [], [], []))
            g[0].append(int(row["k"]))
            g[1].append(float(row["mean"]))
            g[2].append(float(row["stderr"]))
            g[3].append(int(row["n"]))
    return [MetricCurve(*vals, metric_kind=metric, setting=setting)
            for (metric, setting), vals in groups.items()]


def write_jsonl(path, curves) -> None:
    curves = _check_curves(curves)
    with open(path, "w") as fh:
        for c in curves:
            for k, mu, se, n in zip(c.k_values, c.mean, c.stderr, c.n):
                fh.write(f'{{"metric": {json.dumps(c.metric_kind)}, "setting": {json.dumps(c.setting)}, '
                         f'"k": {int(k)}, "mean": {fmt_float(mu)}, "stderr": {fmt_float(se)}, '
                         f'"n": {int(n)}}}\n')


_PALETTE = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b", "#17becf")


def write_svg(path, curves, width: int = 640, height: int = 400, title: str = "") -> None:
    """Static line plot: one polyline per curve with a shaded one-stderr band."""
    curves = _check_curves(curves)
    left, right, top, bottom = 60, 150, 30, 40
    ks = [k for c in curves for k in c.k_values]
    lo = [m - s for c in curves for m, s in zip(c.mean, c.stderr)]
    hi = [m + s for c in curves for m, s in zip(c.mean, c.stderr)]
    x0, x1 = min(ks), max(ks)
    y0, y1 = min(0.0, min(lo)), max(hi)
    if x1 == x0:
        x1 = x0 + 1
    if y1 == y0:
        y1 = y0 + 1.0
    pw, ph = width - left - right, height - top - bottom

    def sx(k):
        return left + pw * (k - x0) / (x1 - x0)

    def sy(v):
        return top + ph * (1.0 - (v - y0) / (y1 - y0))

    out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
           f'viewBox="0 0 {width} {height}">',
           f'<rect x="0" y="0" width="{width}" height="{height}" fill="white"/>',
           f'<line x1="{left}" y1="{top + ph}" x2="{left + pw}" y2="{top + ph}" stroke="black"/>',
           f'<line x1="{left}" y1="{top}" x2="{left}" y2="{top + ph}" stroke="black"/>',
           f'<text x="{left}" y="{height - 10}" font-size="11">k = {x0} .. {x1}</text>',
           f'<text x="5" y="{top - 10}" font-size="11">{y0:.4g} .. {y1:.4g}</text>']
    if title:
        out.append(f'<text x="{left + pw / 2:.2f}" y="18" font-size="13" text-anchor="middle">{title}</text>')
    for idx, c in enumerate(curves):
        color = _PALETTE[idx % len(_PALETTE)]
        upper = [f"{sx(k):.2f},{sy(m + s):.2f}" for k, m, s in zip(c.k_values, c.mean, c.stderr)]
        lower = [f"{sx(k):.2f},{sy(m - s):.2f}" for k, m, s in zip(c.k_values, c.mean, c.stderr)]
        out.append(f'<polygon points="{" ".join(upper + lower[::-1])}" fill="{color}" '
                   f'fill-opacity="0.2" stroke="none"/>')
        pts = " ".join(f"{sx(k):.2f},{sy(m):.2f}" for k, m in zip(c.k_values, c.mean))
        out.append(f'<polyline points="{pts}" fill="none" stroke="{color}" stroke-width="1.5"/>')
        label = c.setting or c.metric_kind
        out.append(f'<text x="{left + pw + 10}" y="{top + 15 * (idx + 1)}" font-size="11" '
                   f'fill="{color}">{label}</text>')
    out.append("</svg>")
    Path(path).write_text("\n".join(out) + "\n")


def report(curves, out_dir, stem: str = "curves", formats=("csv", "jsonl", "svg")) -> list[Path]:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    writers = {"csv": write_csv, "jsonl": write_jsonl, "svg": write_svg}
    paths = []
    for fmt in formats:
        if fmt not in writers:
            raise ValueError(f"unknown report format {fmt!r}")
        path = out_dir / f"{stem}.{fmt}"
        writers[fmt](path, curves)
        paths.append(path)
    return paths
