"""Paired evaluation statistics and a Gaussian Frechet distance."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .diffusion import sample_loop
from .errors import ConfigError, ShapeError

SUMMARY_FIELDS = ("run_id", "metric", "baseline_mean", "finetuned_mean", "improvement", "std",
                  "t_statistic", "win_rate")


@dataclass(frozen=True)
class PairedSample:
    baseline: np.ndarray
    finetuned: np.ndarray

    def __post_init__(self):
        b = np.asarray(self.baseline, dtype=np.float64).ravel()
        f = np.asarray(self.finetuned, dtype=np.float64).ravel()
        if b.shape != f.shape:
            raise ShapeError(f"paired arrays differ in length: {b.size} vs {f.size}")
        if b.size < 1:
            raise ConfigError("paired sample is empty")
        object.__setattr__(self, "baseline", b)
        object.__setattr__(self, "finetuned", f)

    def __len__(self) -> int:
        return self.baseline.size

    def swapped(self) -> "PairedSample":
        return PairedSample(self.finetuned, self.baseline)


@dataclass(frozen=True)
class TTest:
    mean_diff: float
    std_diff: float
    t: float | None  # None when the differences have zero spread

    @property
    def degenerate(self) -> bool:
        return self.t is None


def paired_t_statistic(s: PairedSample) -> TTest:
    """t = mean(d) / (std(d, ddof=1) / sqrt(N)) with d = finetuned - baseline."""
    n = len(s)
    if n < 2:
        raise ConfigError(f"paired t needs N >= 2, got {n}")
    d = s.finetuned - s.baseline
    m = float(d.mean())
    sd = float(d.std(ddof=1))
    # a constant difference vector can leave rounding-level spread behind
    if sd <= 1e-12 * max(1.0, abs(m)) or np.all(d == d[0]):
        return TTest(m, 0.0, None)
    return TTest(m, sd, float(m / (sd / np.sqrt(n))))


def win_rate(s: PairedSample) -> float:
    """Fraction of pairs where the fine-tuned score is higher; ties count half."""
    wins = np.count_nonzero(s.finetuned > s.baseline)
    ties = np.count_nonzero(s.finetuned == s.baseline)
    return (wins + 0.5 * ties) / len(s)


def _average_ranks(a: np.ndarray) -> np.ndarray:
    order = np.argsort(a, kind="mergesort")
    sorted_a = a[order]
    ranks = np.empty(a.size)
    i = 0
    while i < a.size:
        j = i
        while j + 1 < a.size and sorted_a[j + 1] == sorted_a[i]:
            j += 1
        ranks[order[i:j + 1]] = 0.5 * (i + j) + 1.0
        i = j + 1
    return ranks


def spearman(a, b) -> float | None:
    """Pearson correlation of mid-ranks; ``None`` if either input is constant."""
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    if a.shape != b.shape:
        raise ShapeError(f"spearman inputs differ in length: {a.size} vs {b.size}")
    if a.size < 3:
        raise ConfigError(f"spearman needs N >= 3, got {a.size}")
    ra, rb = _average_ranks(a), _average_ranks(b)
    ra -= ra.mean()
    rb -= rb.mean()
    den = np.sqrt(np.dot(ra, ra) * np.dot(rb, rb))
    if den == 0.0:
        return None
    return float(np.clip(np.dot(ra, rb) / den, -1.0, 1.0))


@dataclass(frozen=True)
class GaussianMoments:
    mean: np.ndarray
    covariance: np.ndarray

    def __post_init__(self):
        mu = np.atleast_1d(np.asarray(self.mean, dtype=np.float64))
        cov = np.atleast_2d(np.asarray(self.covariance, dtype=np.float64))
        d = mu.size
        if cov.shape != (d, d):
            raise ShapeError(f"covariance shape {cov.shape} does not match mean dimension {d}")
        if not np.allclose(cov, cov.T, rtol=0.0, atol=1e-10):
            raise ConfigError("covariance is not symmetric within 1e-10")
        if np.linalg.eigvalsh(cov).min() < -1e-10:
            raise ConfigError("covariance is not positive semi-definite")
        object.__setattr__(self, "mean", mu)
        object.__setattr__(self, "covariance", 0.5 * (cov + cov.T))

    @classmethod
    def from_features(cls, feats: np.ndarray) -> "GaussianMoments":
        feats = np.asarray(feats, dtype=np.float64)
        if feats.ndim != 2 or feats.shape[0] < 2:
            raise ShapeError(f"need [N>=2, d] features, got {feats.shape}")
        return cls(feats.mean(axis=0), np.atleast_2d(np.cov(feats, rowvar=False)))


def _psd_sqrt(m: np.ndarray) -> np.ndarray:
    w, v = np.linalg.eigh(0.5 * (m + m.T))
    if w.min() < -1e-10 * max(1.0, abs(w).max()):
        raise ConfigError(f"matrix is not PSD (min eigenvalue {w.min():.3e})")
    return (v * np.sqrt(np.clip(w, 0.0, None))) @ v.T


def frechet_gaussian(p: GaussianMoments, q: GaussianMoments) -> float:
    """||mu_p - mu_q||^2 + tr(S_p + S_q - 2 (S_p^1/2 S_q S_p^1/2)^1/2)."""
    if p.mean.size != q.mean.size:
        raise ShapeError(f"dimension mismatch: {p.mean.size} vs {q.mean.size}")
    if p.mean.size > 64:
        raise ConfigError(f"dimension {p.mean.size} exceeds 64")
    diff = p.mean - q.mean
    rp = _psd_sqrt(p.covariance)
    cross = _psd_sqrt(rp @ q.covariance @ rp)
    val = diff @ diff + np.trace(p.covariance) + np.trace(q.covariance) - 2.0 * np.trace(cross)
    return float(max(val, 0.0))


@dataclass
class PairwiseResult:
    sample: PairedSample
    test: TTest
    win_rate: float

    @property
    def baseline_mean(self) -> float:
        return float(self.sample.baseline.mean())

    @property
    def finetuned_mean(self) -> float:
        return float(self.sample.finetuned.mean())

    def summary(self) -> tuple[float, float, float, float, float | None, float]:
        """(mean base, mean fine, improvement, std, t, win rate)."""
        return (self.baseline_mean, self.finetuned_mean, self.test.mean_diff, self.test.std_diff,
                self.test.t, self.win_rate)

    def row(self, run_id: str, metric: str = "heldout") -> dict:
        t = self.test.t
        return {
            "run_id": run_id,
            "metric": metric,
            "baseline_mean": self.baseline_mean,
            "finetuned_mean": self.finetuned_mean,
            "improvement": self.test.mean_diff,
            "std": self.test.std_diff,
            "t_statistic": "degenerate" if t is None else t,
            "win_rate": self.win_rate,
        }


def paired_samples(net, sched, n: int, seed: int, conditions=None) -> tuple[np.ndarray, np.ndarray]:
    """Base-mode and adapted-mode samples drawn on identical per-sample noise."""
    base = sample_loop(net, sched, n, seed, conditions, adapted=False)
    fine = sample_loop(net, sched, n, seed, conditions, adapted=True)
    return base, fine


def evaluate_pairwise(net, scorer, sched, n: int = 200, seed: int = 0) -> PairwiseResult:
    """Score matched base/adapted samples with ``scorer`` (the held-out one).

    ``scorer`` is a ``Scorer`` or any callable ``f(images, conditions)``.
    Conditional networks cycle through the classes, ``i % num_classes``.
    """
    if n < 2:
        raise ConfigError(f"n must be >= 2, got {n}")
    conditions = np.arange(n) % net.num_classes if net.num_classes else None
    base, fine = paired_samples(net, sched, n, seed, conditions)
    score = getattr(scorer, "score_numpy", scorer)
    sample = PairedSample(score(base, conditions), score(fine, conditions))
    return PairwiseResult(sample, paired_t_statistic(sample), win_rate(sample))
