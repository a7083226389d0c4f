import json

import numpy as np
import pytest

from mixicl._rng import make_rng
from mixicl.mixtures import (MixtureSpec, Prompt, PromptBatch, PromptSampler, read_prompts_jsonl,
                             sample_components, sample_prompt, sample_prompts, sample_spec,
                             shift_covariate_scale, shift_weight_add, shift_weight_scale,
                             write_prompts_jsonl)


def test_one_dimensional_component_is_plus_or_minus_one():
    for seed in range(20):
        w = sample_components(1, 1, make_rng(seed))
        assert w.shape == (1, 1)
        assert abs(abs(w[0, 0]) - 1.0) < 1e-15


@pytest.mark.parametrize("m,d", [(1, 1), (3, 5), (10, 20)])
def test_component_norms(m, d):
    w = sample_components(m, d, make_rng(1))
    np.testing.assert_allclose(np.linalg.norm(w, axis=1), np.sqrt(d), rtol=1e-12)


def test_component_mean_concentrates():
    for seed in range(10):
        w = sample_components(2000, 8, make_rng(seed))
        assert np.linalg.norm(w.mean(axis=0)) <= 0.15 * np.sqrt(8)


@pytest.mark.parametrize("m,d", [(0, 3), (3, 0)])
def test_components_reject_empty(m, d):
    with pytest.raises(ValueError):
        sample_components(m, d, make_rng(0))


def test_spec_validation():
    with pytest.raises(ValueError):
        MixtureSpec(np.zeros((0, 3)), 1.0)
    with pytest.raises(ValueError):
        MixtureSpec(np.ones((2, 2)), -1.0)
    with pytest.raises(ValueError):
        MixtureSpec(np.array([[np.nan]]), 1.0)


def test_noiseless_single_label():
    spec = MixtureSpec(np.array([[1.0]]), 0.0)
    batch = PromptSampler(spec)(1, 5, make_rng(3))
    np.testing.assert_array_equal(batch.ys[:, 0], batch.xs[:, 0, 0])


def test_noiseless_residuals_vanish():
    spec = sample_spec(4, 6, 0.0, 0)
    batch = sample_prompts(spec, 7, 50, make_rng(2))
    w = spec.components[batch.latent - 1]
    labels = np.concatenate([batch.ys, batch.query_y[:, None]], axis=1)
    resid = labels - np.einsum("nkd,nd->nk", batch.xs, w)
    assert np.max(np.abs(resid)) < 1e-12


def test_noise_variance():
    spec = sample_spec(3, 8, 1.0, 0)
    batch = sample_prompts(spec, 9, 10000, make_rng(5))
    w = spec.components[batch.latent - 1]
    resid = batch.ys - np.einsum("nkd,nd->nk", batch.xs[:, :-1], w)
    assert 0.97 <= resid.var() <= 1.03


def test_prompt_shapes_and_latent_range():
    spec = sample_spec(3, 4, 1.0, 0)
    for k in (0, 1, 5):
        p = sample_prompt(spec, k, make_rng(k))
        assert p.xs.shape == (k + 1, 4) and p.ys.shape == (k,)
        assert 1 <= p.latent_index <= 3


def test_prompt_requires_one_more_covariate():
    with pytest.raises(ValueError):
        Prompt(np.zeros((2, 3)), np.zeros(2))


def test_same_seed_same_stream():
    spec = sample_spec(3, 4, 1.0, 0)
    a = sample_prompts(spec, 6, 20, make_rng(9, "x"))
    b = sample_prompts(spec, 6, 20, make_rng(9, "x"))
    assert a.xs.tobytes() == b.xs.tobytes() and a.ys.tobytes() == b.ys.tobytes()


def test_covariate_scale_identity_is_bitwise():
    spec = sample_spec(3, 4, 1.0, 0)
    a = PromptSampler(spec)(5, 10, 11)
    b = shift_covariate_scale(spec, 1.0)(5, 10, 11)
    assert a.xs.tobytes() == b.xs.tobytes() and a.ys.tobytes() == b.ys.tobytes()
    assert a.query_y.tobytes() == b.query_y.tobytes()


def test_covariate_scale_doubles_noiseless_labels():
    spec = sample_spec(2, 3, 0.0, 0)
    a = PromptSampler(spec)(4, 10, 11)
    b = shift_covariate_scale(spec, 2.0)(4, 10, 11)
    np.testing.assert_allclose(b.ys / a.ys, 2.0, rtol=1e-12)


def test_covariate_scale_second_moment():
    spec = sample_spec(2, 5, 1.0, 0)
    xs = shift_covariate_scale(spec, 3.0)(0, 100000, 4).xs[:, 0]
    ratio = np.mean(np.sum(xs ** 2, axis=1)) / (9.0 * 5)
    assert 0.97 <= ratio <= 1.03


def test_covariate_scale_rejects_nonpositive():
    spec = sample_spec(2, 2, 1.0, 0)
    for bad in (0.0, -1.0):
        with pytest.raises(ValueError):
            shift_covariate_scale(spec, bad)


def test_weight_shifts():
    spec = sample_spec(3, 4, 0.7, 0)
    same = shift_weight_scale(spec, 1.0)
    assert np.array_equal(same.components, spec.components) and same.sigma == spec.sigma
    same = shift_weight_add(spec, 0.0)
    assert np.array_equal(same.components, spec.components) and same.sigma == spec.sigma
    np.testing.assert_allclose(np.linalg.norm(shift_weight_scale(spec, 2.0).components, axis=1),
                               2 * np.sqrt(4), rtol=1e-12)
    for d in (1, 4, 20):
        s = sample_spec(1, d, 1.0, 0)
        delta = shift_weight_add(s, 0.75).components - s.components
        assert abs(np.linalg.norm(delta) - 0.75) < 1e-12
    with pytest.raises(ValueError):
        shift_weight_scale(spec, 0.0)
    with pytest.raises(ValueError):
        shift_weight_add(spec, -0.1)


def test_default_grids_accepted():
    spec = sample_spec(2, 3, 1.0, 0)
    for a in (0.33, 0.5, 1, 2, 3):
        shift_weight_scale(spec, a)
        shift_covariate_scale(spec, a)
    for e in (0, 0.25, 0.5, 0.75, 1.0):
        shift_weight_add(spec, e)


def test_jsonl_roundtrip(tmp_path):
    spec = sample_spec(2, 3, 1.0, 0)
    batch = sample_prompts(spec, 4, 5, make_rng(1))
    path = tmp_path / "p.jsonl"
    write_prompts_jsonl(path, batch)
    lines = path.read_text().splitlines()
    assert len(lines) == 5
    assert set(json.loads(lines[0])) == {"xs", "ys", "latent", "query_y"}
    back = PromptBatch.from_prompts(read_prompts_jsonl(path))
    assert back.xs.tobytes() == batch.xs.tobytes()
    assert back.ys.tobytes() == batch.ys.tobytes()
    assert back.query_y.tobytes() == batch.query_y.tobytes()
    assert np.array_equal(back.latent, batch.latent)


def test_batch_requires_common_length():
    with pytest.raises(ValueError):
        PromptBatch.from_prompts([Prompt(np.zeros((1, 2)), []), Prompt(np.zeros((2, 2)), [0.0])])
