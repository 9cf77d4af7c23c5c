import numpy as np
import pytest

from probret.data import SynthSpec, generate
from probret.trainer import (AdaGradState, TrainConfig, TrainingError, adagrad_step, batch_loss,
                             train)


def test_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(steps=0)
    with pytest.raises(ValueError):
        TrainConfig(learning_rate=0)
    with pytest.raises(ValueError):
        TrainConfig(batch_size=1)
    with pytest.raises(ValueError):
        TrainConfig(loss="hinge")
    assert TrainConfig(loss="pairwise").global_tau == 0.1


def test_config_from_mapping():
    cfg = TrainConfig.from_mapping({"loss": "infonce", "steps": "12", "learning_rate": "0.1",
                                    "global_tau": "none", "corrected_pointwise": "true"})
    assert (cfg.loss, cfg.steps, cfg.learning_rate, cfg.global_tau) == ("infonce", 12, 0.1, None)
    assert cfg.corrected_pointwise is True
    with pytest.raises(ValueError):
        TrainConfig.from_mapping({"momentum": "0.9"})


def test_adagrad_zero_gradient_is_noop():
    p = [np.array([1.0, -2.0])]
    state = AdaGradState.zeros_like(p)
    adagrad_step(p, [np.zeros(2)], state, 0.1)
    np.testing.assert_array_equal(p[0], [1.0, -2.0])


def test_adagrad_first_step():
    p = [np.zeros(3)]
    state = AdaGradState.zeros_like(p)
    adagrad_step(p, [np.ones(3)], state, 0.1)
    np.testing.assert_allclose(p[0], -0.1 / np.sqrt(1 + 1e-8), rtol=0, atol=1e-16)


def test_adagrad_accumulator_monotone(rng):
    p = [rng.standard_normal((4, 3))]
    state = AdaGradState.zeros_like(p)
    prev = state.accumulators[0].copy()
    for _ in range(100):
        adagrad_step(p, [rng.standard_normal((4, 3))], state, 0.05)
        assert np.all(state.accumulators[0] >= prev)
        prev = state.accumulators[0].copy()


def test_adagrad_shape_mismatch():
    with pytest.raises(ValueError):
        adagrad_step([np.zeros(2)], [np.zeros(3)], AdaGradState([np.zeros(2)]), 0.1)


@pytest.fixture(scope="module")
def tiny():
    return generate(SynthSpec(num_queries=(4, 6, 10), mean_items=(40, 10, 4), noise_items=300,
                              seed=7))[0]


def test_one_step_performs_one_update(tiny):
    model, trace = train(TrainConfig(steps=1, batch_size=8, dim=8, hidden=8), tiny)
    assert len(trace.losses) == 1


def test_seeded_rerun_is_bitwise_identical(tiny):
    cfg = TrainConfig(steps=30, batch_size=8, dim=8, hidden=8, seed=5)
    _, a = train(cfg, tiny)
    _, b = train(cfg, tiny)
    assert np.asarray(a.losses).tobytes() == np.asarray(b.losses).tobytes()


@pytest.mark.parametrize("loss", ["pointwise", "pairwise", "infonce", "expnce", "betance", "mle"])
def test_every_loss_trains_finitely(tiny, loss):
    model, trace = train(TrainConfig(loss=loss, steps=20, batch_size=8, dim=8, hidden=8), tiny)
    assert np.all(np.isfinite(trace.losses))
    if loss == "mle":
        assert set(model.heads) == {"alpha_pos", "beta_neg"}


def test_full_model_gradient_matches_finite_differences(tiny, rng):
    for loss in ("betance", "mle"):
        cfg = TrainConfig(loss=loss, dim=4, hidden=5, batch_size=6)
        model, _ = train(TrainConfig(loss=loss, steps=3, dim=4, hidden=5, batch_size=6), tiny)
        xq = model.query_vocab.featurize(tiny.query_text[:6])
        xd = model.item_vocab.featurize(tiny.item_text[:6])
        _, grads = batch_loss(model, cfg, xq, xd)
        h = 1e-6
        for arr, g in zip(model.parameters(), grads):
            flat = arr.reshape(-1)
            for j in rng.choice(flat.size, min(8, flat.size), replace=False):
                old = flat[j]
                flat[j] = old + h
                up = batch_loss(model, cfg, xq, xd)[0].value
                flat[j] = old - h
                down = batch_loss(model, cfg, xq, xd)[0].value
                flat[j] = old
                fd = (up - down) / (2 * h)
                assert abs(fd - g.reshape(-1)[j]) <= 1e-5 * max(1.0, abs(fd))


def test_loss_halves_on_default_corpus():
    data = generate(SynthSpec())[0]
    _, trace = train(TrainConfig(steps=2000), data)
    first = np.mean(trace.losses[:50])
    last = np.mean(trace.losses[-200:])
    assert last < 0.5 * first


def test_non_finite_loss_aborts_with_step(tiny, monkeypatch):
    import probret.trainer as tr

    calls = {"n": 0}
    real = tr.batch_loss

    def flaky(*a, **k):
        out, grads = real(*a, **k)
        calls["n"] += 1
        if calls["n"] == 3:
            out.value = float("nan")
        return out, grads

    monkeypatch.setattr(tr, "batch_loss", flaky)
    with pytest.raises(TrainingError) as err:
        train(TrainConfig(steps=5, batch_size=4, dim=4, hidden=4), tiny)
    assert err.value.step == 3
