import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays
from scipy import linalg, stats

from acpo.adapters import attach_adapters
from acpo.errors import ConfigError, ShapeError
from acpo.metrics import (SUMMARY_FIELDS, GaussianMoments, PairedSample, evaluate_pairwise, frechet_gaussian,
                          paired_samples, paired_t_statistic, spearman, win_rate)


def _diffs(d):
    d = np.asarray(d, dtype=float)
    return PairedSample(np.zeros_like(d), d)


def test_t_statistic_examples():
    assert paired_t_statistic(_diffs([1, -1, 1, -1])).t == 0.0
    r = paired_t_statistic(_diffs([2, 0, 2, 0]))
    assert r.mean_diff == 1.0
    assert r.std_diff == pytest.approx(np.sqrt(4 / 3), abs=1e-15)
    assert r.t == pytest.approx(np.sqrt(3), abs=1e-12)
    deg = paired_t_statistic(_diffs([1, 1, 1, 1]))
    assert deg.degenerate and deg.t is None


def test_t_statistic_needs_two():
    with pytest.raises(ConfigError):
        paired_t_statistic(_diffs([1.0]))


def test_paired_sample_validation():
    with pytest.raises(ShapeError):
        PairedSample([1, 2], [1, 2, 3])
    with pytest.raises(ConfigError):
        PairedSample([], [])


@pytest.mark.parametrize("seed", range(20))
def test_t_matches_scipy(seed):
    rng = np.random.default_rng(seed)
    b, f = rng.normal(size=30), rng.normal(0.2, 1.0, 30)
    assert paired_t_statistic(PairedSample(b, f)).t == pytest.approx(stats.ttest_rel(f, b).statistic, rel=1e-12)


def test_win_rate_examples():
    assert win_rate(PairedSample([0, 0, 0, 0], [1, 1, 1, -1])) == 0.75
    assert win_rate(PairedSample([2, 2], [2, 2])) == 0.5
    assert win_rate(PairedSample([1, 1, 1], [0, 0, 0])) == 0.0


scores = arrays(np.float64, st.integers(2, 30), elements=st.sampled_from([0.0, 0.25, 0.5, 0.75, 1.0]))


@settings(max_examples=100, deadline=None)
@given(st.data())
def test_swap_identities(data):
    b = data.draw(scores)
    f = data.draw(arrays(np.float64, b.shape, elements=st.floats(-2, 2)))
    s = PairedSample(b, f)
    assert win_rate(s) + win_rate(s.swapped()) == 1.0
    t, ts = paired_t_statistic(s), paired_t_statistic(s.swapped())
    assert (t.t is None and ts.t is None) or t.t == -ts.t


def test_spearman_examples():
    a = np.array([1.0, 2.0, 3.0, 4.0])
    assert spearman(a, a) == 1.0
    assert spearman(a, a[::-1]) == -1.0
    assert spearman(a, [1, 3, 2, 4]) == pytest.approx(0.8, abs=1e-15)
    assert spearman(a, [5, 5, 5, 5]) is None
    with pytest.raises(ConfigError):
        spearman([1, 2], [2, 1])


@settings(max_examples=100, deadline=None)
@given(st.data())
def test_spearman_matches_scipy_with_ties(data):
    n = data.draw(st.integers(3, 25))
    a = data.draw(arrays(np.float64, n, elements=st.integers(0, 5).map(float)))
    b = data.draw(arrays(np.float64, n, elements=st.floats(-10, 10)))
    ours = spearman(a, b)
    if np.ptp(a) == 0 or np.ptp(b) == 0:
        assert ours is None
    else:
        assert ours == pytest.approx(stats.spearmanr(a, b).statistic, abs=1e-12)


distinct = st.lists(st.integers(-1000, 1000), min_size=3, max_size=20, unique=True)


@settings(max_examples=60, deadline=None)
@given(distinct, distinct)
def test_spearman_monotone_invariance(a, b):
    n = min(len(a), len(b))
    a, b = np.array(a[:n], dtype=float), np.array(b[:n], dtype=float)
    assert spearman(np.exp(a / 100), b ** 3 + b) == pytest.approx(spearman(a, b), abs=1e-12)


def test_frechet_examples():
    one = GaussianMoments([0.0], [[1.0]])
    assert frechet_gaussian(one, one) <= 1e-8
    assert frechet_gaussian(one, GaussianMoments([1.0], [[1.0]])) == pytest.approx(1.0, abs=1e-12)
    assert frechet_gaussian(one, GaussianMoments([0.0], [[4.0]])) == pytest.approx(1.0, abs=1e-12)


def _random_moments(rng, d):
    a = rng.normal(size=(d, d + 2))
    return GaussianMoments(rng.normal(size=d), a @ a.T / (d + 2))


def _scipy_frechet(p, q):
    covmean = linalg.sqrtm(p.covariance @ q.covariance).real
    diff = p.mean - q.mean
    return diff @ diff + np.trace(p.covariance + q.covariance - 2 * covmean)


@pytest.mark.parametrize("seed", range(15))
def test_frechet_matches_scipy_and_is_symmetric(seed):
    rng = np.random.default_rng(seed)
    d = int(rng.integers(1, 12))
    p, q = _random_moments(rng, d), _random_moments(rng, d)
    assert frechet_gaussian(p, q) == pytest.approx(_scipy_frechet(p, q), abs=1e-8)
    assert abs(frechet_gaussian(p, q) - frechet_gaussian(q, p)) <= 1e-8
    assert frechet_gaussian(p, p) <= 1e-8


def test_moments_validation():
    with pytest.raises(ConfigError):
        GaussianMoments([0, 0], [[1.0, 0.5], [0.4, 1.0]])
    with pytest.raises(ConfigError):
        GaussianMoments([0, 0], [[1.0, 2.0], [2.0, 1.0]])
    with pytest.raises(ShapeError):
        GaussianMoments([0, 0, 0], np.eye(2))
    with pytest.raises(ShapeError):
        frechet_gaussian(GaussianMoments([0], [[1]]), GaussianMoments([0, 0], np.eye(2)))
    with pytest.raises(ConfigError):
        frechet_gaussian(GaussianMoments(np.zeros(65), np.eye(65)), GaussianMoments(np.zeros(65), np.eye(65)))


def test_moments_from_features():
    f = np.random.default_rng(0).normal(size=(50, 3))
    m = GaussianMoments.from_features(f)
    assert np.allclose(m.covariance, np.cov(f, rowvar=False)) and np.allclose(m.mean, f.mean(0))


def test_zero_init_evaluation_ties(tiny_net, tiny_sched, two_stream):
    attach_adapters(tiny_net, rank=2)
    res = evaluate_pairwise(tiny_net, two_stream, tiny_sched, n=12, seed=1)
    assert res.win_rate == 0.5 and res.test.degenerate
    assert len(res.summary()) == 6
    row = res.row("r0")
    assert tuple(row) == SUMMARY_FIELDS and row["t_statistic"] == "degenerate"


def test_mean_pixel_stub_matches_brute_force(tiny_net, tiny_sched):
    attach_adapters(tiny_net, rank=2)
    rng = np.random.default_rng(3)
    for n in tiny_net.adapters.layers:
        b = tiny_net.params[f"{n}.lora_B"]
        b.data[:] = rng.normal(0.0, 0.1, b.shape)
    res = evaluate_pairwise(tiny_net, lambda imgs, c: imgs.mean(axis=(1, 2)), tiny_sched, n=10, seed=4)
    base, fine = paired_samples(tiny_net, tiny_sched, 10, 4)
    bm = [sum(sum(row) for row in img) / img.size for img in base]
    fm = [sum(sum(row) for row in img) / img.size for img in fine]
    assert np.allclose(res.sample.baseline, bm, rtol=0, atol=1e-14)
    assert np.allclose(res.sample.finetuned, fm, rtol=0, atol=1e-14)
    assert not np.allclose(bm, fm)


def test_conditional_evaluation_cycles_classes(tiny_cond_net, tiny_sched):
    attach_adapters(tiny_cond_net, rank=2)
    seen = []
    evaluate_pairwise(tiny_cond_net, lambda imgs, c: seen.append(c) or imgs.mean(axis=(1, 2)), tiny_sched, n=6)
    assert np.array_equal(seen[0], [0, 1, 2, 3, 0, 1])
