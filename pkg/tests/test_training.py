import numpy as np
import pytest

from mixicl._rng import make_rng
from mixicl.construction import encode_prompt, trace_circuit
from mixicl.mixtures import MixtureSpec, PromptBatch, sample_prompt, sample_prompts, sample_spec
from mixicl.predictors import posterior_mean_predict
from mixicl.training import (AdamState, FixedDataset, TrainConfig, TransformerModel, TransformerRegressor,
                             adam_step, batch_loss, embed_prompt, forward, grad, layer_backward,
                             loss_and_grad, readout, train)
from mixicl.transformer import LayerParams, ModelConfig, forward_tokens

SMALL = ModelConfig(8, 1, 4, 16, 2)


def _fd_check(model, batch, h=1e-5):
    analytic = grad(model, batch)
    worst = 0.0
    for a, g in zip(model.params(), analytic):
        fd = np.zeros_like(a)
        for idx in np.ndindex(a.shape):
            old = a[idx]
            a[idx] = old + h
            up = batch_loss(model, batch)
            a[idx] = old - h
            down = batch_loss(model, batch)
            a[idx] = old
            fd[idx] = (up - down) / (2 * h)
        err = np.max(np.abs(fd - g)) / max(np.max(np.abs(fd)), 1e-7)
        worst = max(worst, err)
    return worst


def test_gradient_matches_finite_differences():
    spec = sample_spec(2, 3, 0.5, 0)
    batch = sample_prompts(spec, 3, 4, make_rng(1))
    model = TransformerModel.init(SMALL, make_rng(2), std=0.5)
    assert _fd_check(model, batch) <= 1e-4


def test_gradient_with_two_heads():
    spec = sample_spec(2, 3, 0.5, 0)
    batch = sample_prompts(spec, 2, 3, make_rng(1))
    model = TransformerModel.init(ModelConfig(6, 2, 2, 8, 1), make_rng(3), std=0.5)
    assert _fd_check(model, batch) <= 1e-4


def test_zero_model_gradients():
    spec = sample_spec(2, 3, 0.5, 0)
    batch = sample_prompts(spec, 3, 4, make_rng(1))
    g = grad(TransformerModel.zeros(SMALL), batch)
    assert g[-1][0] != 0.0
    for layer in range(2):
        for block in g[1 + 6 * layer: 1 + 6 * layer + 3]:
            assert not block.any()


def test_ignored_last_column_gets_no_gradient():
    rng = make_rng(4)
    X = rng.standard_normal((2, 5, 8))
    layers = [LayerParams.random(SMALL, rng, std=0.5) for _ in range(2)]
    caches = []
    for p in layers:
        X, c = forward_tokens(X, p)
        caches.append(c)
    dX = rng.standard_normal(X.shape)
    dX[:, -1] = 0.0
    for p, c in zip(reversed(layers), reversed(caches)):
        dX, _ = layer_backward(dX, c, p)
    assert not dX[:, -1].any() and dX[:, :-1].any()


def test_embedding_identity_matches_encoding():
    spec = sample_spec(3, 2, 1.0, 0)
    P = sample_prompt(spec, 2, make_rng(0))
    E = embed_prompt(P, 20)
    H0 = encode_prompt(P, 3)
    np.testing.assert_array_equal(E[:H0.shape[0]], H0)
    assert not E[H0.shape[0]:].any()
    assert not embed_prompt(P, 20, np.zeros((20, 20))).any()
    with pytest.raises(ValueError):
        embed_prompt(P, 2)


def test_readout():
    spec = sample_spec(3, 2, 1.0, 0)
    P = sample_prompt(spec, 3, make_rng(0))
    H = np.random.default_rng(0).standard_normal((8, 7))
    assert not readout(H, [1, 3, 5, 7], np.zeros(8)).any()
    assert readout(H, [1, 3, 5, 7], np.ones(8)).shape == (4,)
    final = trace_circuit(P, spec)[-1]
    e = np.zeros(final.shape[0])
    e[-1] = 1.0
    out = readout(final, [final.shape[1]], e)[0]
    assert abs(out - posterior_mean_predict(P, spec).prediction) < 1e-10
    preds, _ = forward(TransformerModel.init(ModelConfig(8, 1, 2, 8, 1), make_rng(1)),
                       sample_prompts(spec, 3, 5, make_rng(2)))
    assert preds.shape == (5, 4)


def test_loss_of_perfect_and_zero_predictions():
    spec = sample_spec(3, 20, 1.0, 0)
    batch = sample_prompts(spec, 4, 20000, make_rng(5))
    zero = TransformerModel.zeros(ModelConfig(21, 1, 2, 4, 1))
    labels = np.concatenate([batch.ys, batch.query_y[:, None]], axis=1)
    assert batch_loss(zero, batch) == float(np.mean(labels ** 2))
    assert abs(batch_loss(zero, batch, normalized=True) - 1.05) < 0.02
    # a bias equal to every label gives zero loss
    const = PromptBatch(batch.xs[:3], np.full((3, 4), 2.0), query_y=np.full(3, 2.0))
    model = zero.copy()
    model.readout_bias[:] = 2.0
    assert batch_loss(model, const) == 0.0


def test_teacher_loss_at_the_noise_floor():
    spec = sample_spec(5, 20, 1.0, 0)
    batch = sample_prompts(spec, 60, 10000, make_rng(6))
    from mixicl.predictors import batch_posterior_mean
    err = (batch_posterior_mean(batch, spec.components, 1.0) - batch.query_y) ** 2 / 20
    assert abs(err.mean() - 0.05) <= 0.01


def test_adam():
    params = [np.ones(3)]
    s = AdamState.zeros_like(params)
    out, s2 = adam_step(params, [np.zeros(3)], s, lr=0.1)
    assert np.array_equal(out[0], params[0]) and s2.t == 1
    g = np.array([0.5, -2.0, 1e-3])
    out, _ = adam_step(params, [g], AdamState.zeros_like(params), lr=0.1, eps=1e-8)
    np.testing.assert_allclose(out[0] - 1.0, -0.1 * g / (np.abs(g) + 1e-8), rtol=1e-12)


def test_adam_quadratic():
    a = np.array([1.0, 4.0, 0.25])
    x = [np.ones(3)]
    s = AdamState.zeros_like(x)
    f0 = float(np.sum(a * x[0] ** 2))
    for _ in range(100):
        x, s = adam_step(x, [2 * a * x[0]], s, lr=0.05)
    assert f0 / float(np.sum(a * x[0] ** 2)) >= 100


def test_curriculum_schedule():
    c = TrainConfig(curriculum_phase_steps=10, k_start=2, k_step=2, k_max=7)
    assert [c.k_at(s) for s in (0, 9, 10, 25, 1000)] == [2, 2, 4, 6, 7]
    with pytest.raises(ValueError):
        TrainConfig(dropout=1.0)


def test_zero_steps_returns_init():
    spec = sample_spec(2, 4, 0.5, 0)
    cfg = TrainConfig(final_steps=0, seed=3)
    model, trace = train(cfg, spec, SMALL)
    ref = TransformerModel.init(SMALL, make_rng(3, "init"), cfg.init_std)
    assert trace == []
    assert all(np.array_equal(a, b) for a, b in zip(model.params(), ref.params()))


def test_training_is_deterministic_and_dropout_zero_is_plain():
    spec = sample_spec(2, 4, 0.5, 0)
    cfg = TrainConfig(batch_size=8, final_steps=15, curriculum_phase_steps=5, seed=1, adam_lr=1e-3)
    m1, t1 = train(cfg, spec, SMALL)
    m2, t2 = train(cfg, spec, SMALL)
    assert t1 == t2
    assert all(np.array_equal(a, b) for a, b in zip(m1.params(), m2.params()))
    batch = sample_prompts(spec, 4, 6, make_rng(2))
    p0, _ = forward(m1, batch)
    p1, _ = forward(m1, batch, 0.0, make_rng(0))
    assert np.array_equal(p0, p1)
    pd, _ = forward(m1, batch, 0.5, make_rng(0))
    assert not np.array_equal(p0, pd)
    _, t3 = train(TrainConfig(batch_size=8, final_steps=15, seed=1, dropout=0.1), spec, SMALL)
    assert len(t3) == 15


def test_dropout_gradient_consistent():
    spec = sample_spec(2, 3, 0.5, 0)
    batch = sample_prompts(spec, 2, 3, make_rng(1))
    model = TransformerModel.init(SMALL, make_rng(2), std=0.5)
    loss, g = loss_and_grad(model, batch, 0.3, make_rng(9))
    a = model.params()[1 + 4]
    old = a[0, 0]
    a[0, 0] = old + 1e-5
    up, _ = loss_and_grad(model, batch, 0.3, make_rng(9))
    a[0, 0] = old - 1e-5
    down, _ = loss_and_grad(model, batch, 0.3, make_rng(9))
    a[0, 0] = old
    assert abs((up - down) / 2e-5 - g[1 + 4][0, 0]) < 1e-6


def test_fixed_dataset_draws_from_the_pool():
    spec = sample_spec(2, 3, 0.5, 0)
    data = FixedDataset.sample(spec, 64, 6, seed=0)
    rng = make_rng(1)
    for k in (0, 2, 6):
        batch, idx = data.draw(64, k, rng)
        assert sorted(idx.tolist()) == list(range(64))
        assert batch.k == k
        for b, i in enumerate(idx):
            pool_x = data.prompts.xs[i]
            pool_y = np.append(data.prompts.ys[i], data.prompts.query_y[i])
            labels = np.append(batch.ys[b], batch.query_y[b])
            for x, y in zip(batch.xs[b], labels):
                j = int(np.flatnonzero(np.all(pool_x == x, axis=1))[0])
                assert pool_y[j] == y
    with pytest.raises(ValueError):
        data.draw(4, 7, rng)


def test_model_save_load(tmp_path):
    model = TransformerModel.init(SMALL, make_rng(0))
    model.save(tmp_path / "m.bin")
    back = TransformerModel.load(tmp_path / "m.bin")
    assert all(np.array_equal(a, b) for a, b in zip(model.params(), back.params()))


def test_regressor_estimator():
    spec = sample_spec(2, 3, 0.5, 0)
    est = TransformerRegressor(p=8, n_layers=1, n_heads=1, n_steps=5, batch_size=4, k_max=3)
    est.fit(spec)
    assert est.loss_trace_.shape == (5, 3)
    assert est.predict(sample_prompts(spec, 3, 2, make_rng(0))).shape == (2,)
    est.fit(sample_prompts(spec, 5, 10, make_rng(1)))
    assert est.get_params()["p"] == 8
