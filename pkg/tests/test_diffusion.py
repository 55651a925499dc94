import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from acpo import numcore as nc
from acpo.diffusion import (DiffusionBatch, SampleNoise, denoising_mse, gaussian_oracle, make_batch,
                            make_schedule, p_sample_step, predict_noise, predict_noise_array, q_sample,
                            sample_loop, train_base)
from acpo.errors import ConfigError, ShapeError


def test_two_step_schedule():
    s = make_schedule(2, 0.1, 0.1)
    assert np.allclose(s.beta, [0.1, 0.1], rtol=0, atol=1e-15)
    assert np.allclose(s.alpha_bar, [0.9, 0.81], rtol=0, atol=1e-15)


@settings(max_examples=60, deadline=None)
@given(st.integers(2, 400), st.floats(1e-6, 0.5), st.floats(0.0, 0.49))
def test_alpha_bar_strictly_decreasing(T, start, extra):
    s = make_schedule(T, start, min(start + extra, 0.999))
    assert np.all(np.diff(s.alpha_bar) < 0)
    assert np.all((s.alpha_bar > 0) & (s.alpha_bar < 1))
    assert np.allclose(s.alpha_bar, np.cumprod(s.alpha), rtol=1e-12, atol=0)


def test_default_thousand_step_schedule_accepted():
    s = make_schedule(1000, 1e-4, 0.02)
    assert s.T == 1000 and s.beta[0] == 1e-4 and s.beta[-1] == pytest.approx(0.02)


@pytest.mark.parametrize("args", [(1, 0.1, 0.1), (10, 0.0, 0.1), (10, 0.2, 0.1), (10, 0.1, 1.0)])
def test_schedule_preconditions(args):
    with pytest.raises(ConfigError):
        make_schedule(*args)


def test_q_sample_branches():
    s = make_schedule(2, 0.1, 0.1)
    x0 = np.full((1, 2, 2), 0.7)
    eps = np.random.default_rng(0).normal(size=(1, 2, 2))
    assert np.allclose(q_sample(x0, 1, np.zeros_like(x0), s).data, np.sqrt(0.81) * x0)
    assert np.allclose(q_sample(np.zeros_like(x0), 1, eps, s).data, np.sqrt(0.19) * eps)
    assert q_sample(np.ones((1, 1, 1)), 1, np.ones((1, 1, 1)), s).item() == pytest.approx(0.9 + np.sqrt(0.19))


def test_q_sample_rejects_bad_t_and_shapes():
    s = make_schedule(4, 0.1, 0.2)
    with pytest.raises(ConfigError):
        q_sample(np.ones((1, 2, 2)), 4, np.ones((1, 2, 2)), s)
    with pytest.raises(ShapeError):
        q_sample(np.ones((1, 2, 2)), 0, np.ones((1, 2, 3)), s)


def test_predict_noise_deterministic_and_shape(tiny_net):
    x = np.random.default_rng(1).normal(size=(3, 8, 8))
    a = predict_noise(tiny_net, x, [0, 5, 11]).data
    b = predict_noise(tiny_net, x, [0, 5, 11]).data
    assert a.shape == x.shape and a.tobytes() == b.tobytes()


def test_fast_path_matches_graph(tiny_cond_net):
    x = np.random.default_rng(2).normal(size=(4, 8, 8))
    t, c = np.array([0, 3, 7, 11]), np.array([0, 1, 2, 3])
    assert np.allclose(predict_noise(tiny_cond_net, x, t, c).data, predict_noise_array(tiny_cond_net, x, t, c),
                       rtol=0, atol=1e-13)


def test_predict_noise_condition_contract(tiny_net, tiny_cond_net):
    x = np.zeros((2, 8, 8))
    with pytest.raises(ShapeError):
        predict_noise(tiny_net, x, 1, condition=[0, 1])
    with pytest.raises(ShapeError):
        predict_noise(tiny_cond_net, x, 1)
    with pytest.raises(ShapeError):
        predict_noise(tiny_cond_net, x, 1, condition=[0, 4])
    with pytest.raises(ShapeError):
        predict_noise(tiny_net, np.zeros((2, 6, 6)), 1)


def test_predict_noise_grad_check(tiny_net):
    x = np.random.default_rng(3).normal(size=(2, 8, 8))
    names, leaves = zip(*tiny_net.params.items())
    rep = nc.grad_check(lambda *_: nc.mean(predict_noise(tiny_net, x, [2, 9])), leaves, 1e-5, 1e-4,
                        names=names, max_elements=12)
    assert rep.passed, rep.per_leaf


def test_p_sample_step_collapse(tiny_sched):
    x = np.random.default_rng(4).normal(size=(2, 3, 3))
    out = p_sample_step(lambda x_t, t, c: np.zeros(x_t.shape), x, 5, tiny_sched, np.zeros((2, 3, 3)))
    assert np.allclose(out.data, x / np.sqrt(tiny_sched.alpha[5]), rtol=0, atol=1e-15)


def test_p_sample_step_arithmetic():
    # T=2, beta=0.19 at both steps; check t=1 by hand
    s = make_schedule(2, 0.19, 0.19)
    x_t, e, z = 0.5, 0.3, -1.1
    out = p_sample_step(lambda *_: np.full((1, 1, 1), e), np.full((1, 1, 1), x_t), 1, s, np.full((1, 1, 1), z))
    ab = 0.81 * 0.81
    want = (x_t - 0.19 / np.sqrt(1 - ab) * e) / np.sqrt(0.81) + np.sqrt(0.19) * z
    assert out.item() == pytest.approx(want, abs=1e-14)


def test_p_sample_step_noise_contract(tiny_sched):
    f = lambda x_t, t, c: np.zeros(x_t.shape)  # noqa: E731
    x = np.zeros((1, 2, 2))
    with pytest.raises(ShapeError):
        p_sample_step(f, x, 3, tiny_sched, None)
    with pytest.raises(ShapeError):
        p_sample_step(f, x, 0, tiny_sched, np.zeros((1, 2, 2)))
    with pytest.raises(ShapeError):
        p_sample_step(f, x, 3, tiny_sched, np.zeros((1, 2, 3)))


def _linear_chain_moments(m, sd, s):
    """Exact mean/variance of the ancestral chain driven by the Gaussian oracle."""
    mu, var = 0.0, 1.0
    for t in range(s.T - 1, -1, -1):
        ab = s.alpha_bar[t]
        k = s.beta[t] / (sd * sd * ab + 1.0 - ab)
        a = (1.0 - k) / np.sqrt(s.alpha[t])
        mu = a * mu + k * np.sqrt(ab) * m / np.sqrt(s.alpha[t])
        var = a * a * var + (s.beta[t] if t > 0 else 0.0)
    return mu, var


def test_gaussian_oracle_matches_exact_chain_moments():
    s = make_schedule(100, 1e-3, 0.2)
    m, sd, n = 0.4, 0.3, 4000
    _, raw = sample_loop(gaussian_oracle(m, sd, s), s, n, seed=11, record_final=True, image_shape=(1,))
    mu, var = _linear_chain_moments(m, sd, s)
    assert abs(raw.mean() - mu) < 4 * np.sqrt(var / n)
    assert abs(raw.var() - var) < 4 * var * np.sqrt(2.0 / n)
    # the sampler lands near the data law; its variance bias comes from sigma^2 = beta
    assert mu == pytest.approx(m, abs=1e-3) and var == pytest.approx(sd * sd, rel=0.1)


def test_sample_loop_seeded_and_clipped(tiny_net, tiny_sched):
    a = sample_loop(tiny_net, tiny_sched, 5, seed=3)
    b = sample_loop(tiny_net, tiny_sched, 5, seed=3)
    assert a.tobytes() == b.tobytes()
    assert a.min() >= 0.0 and a.max() <= 1.0


def test_per_sample_noise_independent_of_batch(tiny_net, tiny_sched):
    whole = sample_loop(tiny_net, tiny_sched, 6, seed=8)
    tail = sample_loop(tiny_net, tiny_sched, 2, seed=8, start_index=4)
    assert np.array_equal(whole[4:], tail)


def test_sample_noise_streams():
    n1 = SampleNoise([1, 2], [0, 1], (2,), block=3)
    n2 = SampleNoise([1, 2], [1], (2,), block=5)
    first = [n1.draw() for _ in range(7)]
    second = [n2.draw() for _ in range(7)]
    assert all(np.array_equal(a[1], b[0]) for a, b in zip(first, second))


def test_denoising_mse_stub_cases(tiny_sched):
    rng = np.random.default_rng(0)
    b = make_batch(rng.random((4, 3, 3)), tiny_sched, 4, rng)
    assert denoising_mse(lambda *_: b.epsilon, b, tiny_sched).item() == 0.0
    assert denoising_mse(lambda *_: b.epsilon + 1.0, b, tiny_sched).item() == pytest.approx(1.0)


def test_denoising_mse_grad_check(tiny_net, tiny_sched):
    rng = np.random.default_rng(6)
    b = DiffusionBatch(rng.random((2, 8, 8)), np.array([1, 10]), rng.normal(size=(2, 8, 8)))
    names, leaves = zip(*tiny_net.params.items())
    rep = nc.grad_check(lambda *_: denoising_mse(tiny_net, b, tiny_sched), leaves, 1e-5, 1e-4, names=names,
                        max_elements=12)
    assert rep.passed, rep.per_leaf


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31))
def test_denoising_mse_non_negative(seed):
    s = make_schedule(5, 0.01, 0.3)
    rng = np.random.default_rng(seed)
    b = make_batch(rng.random((3, 2, 2)), s, 3, rng)
    pred = rng.normal(size=(3, 2, 2))
    assert denoising_mse(lambda *_: pred, b, s).item() >= 0.0


def test_make_batch_timesteps_in_range(tiny_sched):
    b = make_batch(np.zeros((5, 2, 2)), tiny_sched, 500, np.random.default_rng(0))
    assert b.t.min() >= 0 and b.t.max() <= tiny_sched.T - 1
    w = make_batch(np.zeros((5, 2, 2)), tiny_sched, 500, np.random.default_rng(0), t_max=3)
    assert w.t.max() <= 2


def test_training_is_reproducible_and_reduces_loss(tiny_sched, clean8):
    from acpo.diffusion import build_predictor

    runs = []
    for _ in range(2):
        net = build_predictor(tiny_sched, (8, 8), (16,), temb_dim=4, seed=0)
        losses = train_base(net, clean8, tiny_sched, 60, lr=3e-3, batch=8, seed=1)
        runs.append((losses, net.params.checksum(frozen_only=False)))
    assert runs[0] == runs[1]
    assert np.mean(runs[0][0][-10:]) < np.mean(runs[0][0][:10])
