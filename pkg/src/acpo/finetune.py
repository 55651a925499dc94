"""Anchor-constrained fine-tuning of the noise predictor's adapters.

Each optimisation step combines three terms on the adapter parameters:

    total = mse + lambda1 * anchor + lambda2 * quality

``mse`` is the ordinary denoising loss over all timesteps, ``anchor`` ties
the adapted noise prediction to the frozen base prediction on latents inside
the late window ``t < t_late_max``, and ``quality`` is ``1 - score`` of a
frozen scorer on images produced by the reverse chain, differentiated
through its last ``guided_steps`` steps.
"""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field

import numpy as np

from . import numcore as nc
from .adapters import base_forward
from .diffusion import (NoisePredictor, NoiseSchedule, SampleNoise, denoising_mse, make_batch,
                        predict_noise, q_sample, run_chain)
from .errors import ConfigError, InvariantError
from .iqa import Scorer
from .numcore import Tensor

log = logging.getLogger(__name__)

REPORT_FIELDS = ("step", "l_mse", "l_anchor", "l_quality", "l_total", "guided_score", "anchor_drift")


@dataclass
class ACPOConfig:
    lambda1: float = 1.0
    lambda2: float = 1.0
    t_late_max: int = 10
    guided_steps: int = 5
    steps: int = 1000
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    mse_batch: int = 16
    guide_batch: int = 8
    anchor_batch: int = 16
    probe_batch: int = 16
    probe_every: int = 10
    probe_seed: int = 9_000_001
    seed: int = 0

    def validate(self, T: int | None = None) -> None:
        if self.lambda1 < 0 or self.lambda2 < 0:
            raise ConfigError(f"loss weights must be non-negative, got {self.lambda1}, {self.lambda2}")
        if self.t_late_max < 1 or (T is not None and self.t_late_max > T):
            raise ConfigError(f"t_late_max must lie in [1, T], got {self.t_late_max}")
        if not 1 <= self.guided_steps <= self.t_late_max:
            raise ConfigError(f"guided_steps must lie in [1, t_late_max], got {self.guided_steps}")
        if self.lr <= 0:
            raise ConfigError(f"lr must be positive, got {self.lr}")
        if self.steps < 0 or min(self.mse_batch, self.guide_batch, self.anchor_batch, self.probe_batch) < 1:
            raise ConfigError("steps must be >= 0 and batch sizes >= 1")


@dataclass
class StepReport:
    step: int
    l_mse: float
    l_anchor: float
    l_quality: float
    l_total: float
    guided_score: float = float("nan")
    anchor_drift: float = float("nan")

    def row(self) -> list:
        return [getattr(self, f) for f in REPORT_FIELDS]


def quality_loss(scorer: Scorer, images, conditions=None) -> Tensor:
    """Mean of ``1 - score`` over the batch."""
    scores = scorer.score(images, conditions)
    return nc.mean(nc.sub(1.0, scores))


def anchor_loss(net: NoisePredictor, x_t, t, t_late_max: int, conditions=None) -> Tensor:
    """Mean squared gap between adapted and (detached) base noise predictions."""
    t = np.asarray(t)
    if np.any(t >= t_late_max) or np.any(t < 0):
        raise ConfigError(f"anchor timesteps must lie in [0, {t_late_max}), got {t}")
    eps_base = base_forward(net, x_t, t, conditions)
    eps_theta = predict_noise(net, x_t, t, conditions, adapted=True)
    return nc.mean(nc.square(nc.sub(eps_theta, eps_base)))


def total_loss(cfg: ACPOConfig, l_mse, l_anchor, l_quality, step: int = 0) -> tuple[Tensor, StepReport]:
    if cfg.lambda1 < 0 or cfg.lambda2 < 0:
        raise ConfigError(f"loss weights must be non-negative, got {cfg.lambda1}, {cfg.lambda2}")
    l_mse, l_anchor, l_quality = nc.as_tensor(l_mse), nc.as_tensor(l_anchor), nc.as_tensor(l_quality)
    total = nc.add(nc.add(l_mse, nc.scale(l_anchor, cfg.lambda1)), nc.scale(l_quality, cfg.lambda2))
    report = StepReport(step, l_mse.item(), l_anchor.item(), l_quality.item(), total.item())
    return total, report


@dataclass
class Probe:
    """Fixed latents for comparable score and drift readings across steps."""

    noise_seed: int
    batch: int
    anchor_x: np.ndarray
    anchor_t: np.ndarray
    anchor_c: np.ndarray | None


def make_probe(cfg: ACPOConfig, images: np.ndarray, sched: NoiseSchedule, classes=None) -> Probe:
    rng = np.random.default_rng([cfg.probe_seed, 1])
    b = make_batch(images, sched, cfg.anchor_batch * 4, rng, classes, t_max=cfg.t_late_max)
    x_t = q_sample(b.x0, b.t, b.epsilon, sched).data
    return Probe(cfg.probe_seed, cfg.probe_batch, x_t, b.t, b.condition)


def probe_score(net: NoisePredictor, scorer: Scorer, sched: NoiseSchedule, probe: Probe,
                conditions=None) -> float:
    noise = SampleNoise(probe.noise_seed, range(probe.batch), net.image_shape)
    x = noise.draw()
    with nc.no_grad():
        x = run_chain(net, sched, x, noise, sched.T - 1, 0, conditions, adapted=True).data
    return float(np.mean(scorer.score_numpy(np.clip(x, 0.0, 1.0), conditions)))


def anchor_drift(net: NoisePredictor, probe: Probe) -> float:
    """RMS of eps_theta - eps_base over the probe's late-window latents."""
    with nc.no_grad():
        a = predict_noise(net, probe.anchor_x, probe.anchor_t, probe.anchor_c, adapted=True).data
        b = predict_noise(net, probe.anchor_x, probe.anchor_t, probe.anchor_c, adapted=False).data
    return float(np.sqrt(np.mean((a - b) ** 2)))


def guided_sample(net: NoisePredictor, sched: NoiseSchedule, batch: int, seed, guided_steps: int,
                  conditions=None) -> Tensor:
    """Reverse chain whose last ``guided_steps`` steps carry gradients; clipped to [0, 1]."""
    noise = SampleNoise(seed, range(batch), net.image_shape)
    x = noise.draw()
    with nc.no_grad():
        x = run_chain(net, sched, x, noise, sched.T - 1, guided_steps, conditions).data
    x = run_chain(net, sched, x, noise, guided_steps - 1, 0, conditions)
    return nc.clip(x, 0.0, 1.0)


@dataclass
class FinetuneResult:
    reports: list[StepReport] = field(default_factory=list)
    final_guided_score: float = float("nan")
    final_anchor_drift: float = float("nan")
    base_checksum: str = ""
    scorer_checksum: str = ""


def _frozen_checksums(net: NoisePredictor, scorer: Scorer) -> tuple[str, str]:
    return net.params.checksum(frozen_only=True), scorer.params.checksum(frozen_only=True)


def finetune_run(net: NoisePredictor, scorer: Scorer, sched: NoiseSchedule, images: np.ndarray,
                 cfg: ACPOConfig, classes: np.ndarray | None = None, callback=None) -> FinetuneResult:
    """Optimise the adapters of ``net`` under the combined objective.

    ``images`` (and ``classes`` for a conditional network) is the clean
    training corpus. Deterministic given ``cfg.seed``. Raises
    ``InvariantError`` if any frozen tensor of the network or scorer changes.
    """
    cfg.validate(sched.T)
    if net.adapters is None:
        raise ConfigError("finetune_run needs attached adapters")
    if scorer.params.trainable():
        raise ConfigError("scorer must be frozen before fine-tuning")
    conditional = bool(net.num_classes)
    if conditional and classes is None:
        raise ConfigError("conditional network needs class labels")
    if conditional != (scorer.variant == "conditional"):
        raise ConfigError(f"{scorer.variant} scorer cannot guide a {'conditional' if conditional else 'unconditional'} net")
    before = _frozen_checksums(net, scorer)
    probe = make_probe(cfg, images, sched, classes if conditional else None)
    probe_cond = (np.arange(cfg.probe_batch) % net.num_classes) if conditional else None
    result = FinetuneResult(base_checksum=before[0], scorer_checksum=before[1])
    last_probe = float("nan")

    for step in range(cfg.steps):
        rng = np.random.default_rng([cfg.seed, step])
        if step % cfg.probe_every == 0:
            last_probe = probe_score(net, scorer, sched, probe, probe_cond)
        net.params.zero_grad()

        mb = make_batch(images, sched, cfg.mse_batch, rng, classes if conditional else None)
        l_mse = denoising_mse(net, mb, sched)

        guide_cond = rng.integers(0, net.num_classes, cfg.guide_batch) if conditional else None
        guide_seed = [cfg.seed, step, 101]
        if cfg.lambda2 > 0:
            x_hat = guided_sample(net, sched, cfg.guide_batch, guide_seed, cfg.guided_steps, guide_cond)
            l_quality = quality_loss(scorer, x_hat, guide_cond)
        else:
            with nc.no_grad():
                x_hat = guided_sample(net, sched, cfg.guide_batch, guide_seed, cfg.guided_steps, guide_cond)
                l_quality = quality_loss(scorer, x_hat, guide_cond)

        ab = make_batch(images, sched, cfg.anchor_batch, rng, classes if conditional else None,
                        t_max=cfg.t_late_max)
        x_t = q_sample(ab.x0, ab.t, ab.epsilon, sched)
        if cfg.lambda1 > 0:
            l_anchor = anchor_loss(net, x_t, ab.t, cfg.t_late_max, ab.condition)
        else:
            with nc.no_grad():
                l_anchor = anchor_loss(net, x_t, ab.t, cfg.t_late_max, ab.condition)

        total, report = total_loss(cfg, l_mse, l_anchor, l_quality, step)
        report.guided_score = last_probe
        report.anchor_drift = float(np.sqrt(l_anchor.item()))
        total.backward()
        nc.adam_step(net.params, lr=cfg.lr, beta1=cfg.beta1, beta2=cfg.beta2, eps=cfg.eps,
                     step_index=step + 1)
        result.reports.append(report)
        if callback is not None:
            callback(report)

    result.final_guided_score = probe_score(net, scorer, sched, probe, probe_cond)
    result.final_anchor_drift = anchor_drift(net, probe)
    after = _frozen_checksums(net, scorer)
    if after != before:
        raise InvariantError("frozen base or scorer parameters changed during fine-tuning")
    return result


def report_dicts(reports: list[StepReport]) -> list[dict]:
    return [asdict(r) for r in reports]
