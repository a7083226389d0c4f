import numpy as np
import pytest

from mixicl._rng import make_rng
from mixicl.harness import (DEFAULT_GRIDS, MetricCurve, eval_mse_curve, eval_sq_distance, paired_mse_gap,
                            read_csv, report, shift_sweep, write_csv, write_svg)
from mixicl.mixtures import MixtureSpec, PromptSampler, sample_spec
from mixicl.predictors import make_predictor, zero_predictor


def _truth(spec):
    return lambda b: np.einsum("nd,nd->n", spec.components[b.latent - 1], b.queries)


def test_noise_only_and_zero_levels():
    spec = sample_spec(5, 20, 1.0, 0)
    src = PromptSampler(spec)
    c = eval_mse_curve(_truth(spec), src, k_values=[1, 10], n_prompts=4000, seed=1)
    for mu, se in zip(c.mean, c.stderr):
        assert abs(mu - 0.05) <= 3 * se
    c = eval_mse_curve(zero_predictor, src, k_values=[1, 10], n_prompts=4000, seed=1)
    for mu, se in zip(c.mean, c.stderr):
        assert abs(mu - 1.05) <= 3 * se


def test_distance_identities():
    spec = sample_spec(3, 4, 1.0, 0)
    src = PromptSampler(spec)
    f, g = make_predictor("posterior_mean", spec), make_predictor("ols")
    assert not any(eval_sq_distance(f, f, src, 5, 50).mean)
    assert eval_sq_distance(f, g, src, 5, 50).mean == eval_sq_distance(g, f, src, 5, 50).mean


def test_distance_ordering_under_perturbation():
    spec = sample_spec(5, 20, 1.0, 0)
    src = PromptSampler(spec)
    f = make_predictor("posterior_mean", spec)
    g = make_predictor("posterior_mean:estimated", spec, spec.components + 0.5 / np.sqrt(20))
    near = eval_sq_distance(f, g, src, 10, 500, seed=2)
    far = eval_sq_distance(f, zero_predictor, src, 10, 500, seed=2)
    assert all(0 < a < b for a, b in zip(near.mean, far.mean))


def test_paired_draws_are_shared():
    spec = sample_spec(2, 3, 1.0, 0)
    seen = {"f": [], "g": []}

    def spy(tag):
        def pred(batch):
            seen[tag].append(batch.xs.tobytes())
            return np.zeros(batch.n)
        return pred

    calls = []
    base = PromptSampler(spec)

    def source(k, n, rng):
        calls.append(k)
        return base(k, n, rng)

    eval_sq_distance(spy("f"), spy("g"), source, 4, 10)
    assert calls == [1, 2, 3, 4]
    assert seen["f"] == seen["g"]


def test_paired_gap_ordering():
    spec = sample_spec(5, 20, 1.0, 0)
    # short prompts: the two predictors differ enough for the sign to be resolved
    batch = PromptSampler(spec)(2, 20000, make_rng(3))
    gap, se = paired_mse_gap(make_predictor("posterior_mean", spec), make_predictor("argmin", spec), batch)
    assert gap <= se
    gap, se = paired_mse_gap(make_predictor("argmin", spec), zero_predictor, batch)
    assert gap <= se


def test_shift_identity_is_bitwise(tmp_path):
    spec = sample_spec(3, 4, 1.0, 0)
    pred = make_predictor("posterior_mean", spec)
    plain = eval_mse_curve(pred, PromptSampler(spec), 6, 40, seed=5)
    for kind, grid in DEFAULT_GRIDS.items():
        results = dict(shift_sweep(kind, grid, pred, spec, 6, 40, seed=5))
        ident = results[1.0 if kind != "weight_add" else 0.0]
        assert ident.mean == plain.mean and ident.stderr == plain.stderr
    results = shift_sweep("weight_scale", [2.0], pred, spec, 3, 10)
    assert [v for v, _ in results] == [1.0, 2.0]
    with pytest.raises(ValueError):
        shift_sweep("weight_scale", [0.0], pred, spec, 3, 10)
    with pytest.raises(ValueError):
        shift_sweep("rotate", [1.0], pred, spec, 3, 10)


def test_weight_add_floor_grows_with_eps():
    spec = sample_spec(5, 20, 1.0, 0)
    pred = make_predictor("posterior_mean", spec)
    res = dict(shift_sweep("weight_add", [0.0, 1.0], pred, spec, k_values=[60], n_prompts=4000, seed=3))
    floor = res[0.0].mean[0]
    assert abs(floor - 0.05) < 0.005
    c = (res[1.0].mean[0] * 20 - 1.0) / 1.0
    assert c >= 0


def test_csv_roundtrip_and_determinism(tmp_path):
    spec = sample_spec(3, 4, 1.0, 0)
    c = eval_mse_curve(make_predictor("argmin", spec), PromptSampler(spec), 5, 30, seed=1, setting="a")
    write_csv(tmp_path / "a.csv", c)
    (back,) = read_csv(tmp_path / "a.csv")
    assert back.mean == c.mean and back.stderr == c.stderr and back.k_values == c.k_values
    assert back.setting == "a" and back.n == c.n
    c2 = eval_mse_curve(make_predictor("argmin", spec), PromptSampler(spec), 5, 30, seed=1, setting="a")
    write_csv(tmp_path / "b.csv", c2)
    assert (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()


def test_report_formats(tmp_path):
    a = MetricCurve([1, 2], [0.5, 0.25], [0.1, 0.1], [10, 10], setting="a")
    b = MetricCurve([1, 2], [0.7, 0.2], [0.0, 0.05], [10, 10], setting="b")
    paths = report([a, b], tmp_path, "r")
    assert [p.suffix for p in paths] == [".csv", ".jsonl", ".svg"]
    assert paths[0].read_text().splitlines()[0] == "metric,setting,k,mean,stderr,n"
    assert len(paths[1].read_text().splitlines()) == 4
    assert paths[2].read_text().count("<polyline") == 2
    with pytest.raises(ValueError):
        write_svg(tmp_path / "e.svg", [MetricCurve([], [], [], [])])
    with pytest.raises(ValueError):
        eval_mse_curve(zero_predictor, PromptSampler(sample_spec(1, 1, 1.0, 0)), k_values=[])
    with pytest.raises(ValueError):
        MetricCurve([1], [0.0], [0.0, 1.0], [1])
