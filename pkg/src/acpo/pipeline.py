"""Stage drivers shared by the command line and the acceptance suite."""

from __future__ import annotations

import copy
import logging
from dataclasses import astuple, dataclass, replace

from . import data as ds
from .adapters import attach_adapters
from .config import acpo_cfg
from .diffusion import NoisePredictor, NoiseSchedule, build_predictor, make_schedule, train_base
from .finetune import ACPOConfig, FinetuneResult, finetune_run
from .iqa import Scorer, ScorerConfig, train_evaluator
from .metrics import PairwiseResult, evaluate_pairwise, spearman

log = logging.getLogger(__name__)


def schedule(cfg: dict) -> NoiseSchedule:
    d = cfg["diffusion"]
    return make_schedule(d["T"], d["beta_start"], d["beta_end"])


def scorer_config(cfg: dict) -> ScorerConfig:
    q = cfg["iqa"]
    return ScorerConfig(
        variant="conditional" if cfg["data"]["conditional"] else "two-stream",
        image_size=cfg["data"]["size"],
        stream_width=q["stream_width"],
        fuse_width=q["fuse_width"],
        grid=q["grid"],
        token_width=q["token_width"],
        embed_width=q["embed_width"],
        num_classes=len(ds.SHAPE_CLASSES),
        layer_weights=tuple(q["layer_weights"]),
    )


def scorer_epochs(cfg: dict) -> int:
    if cfg["iqa"]["epochs"] is not None:
        return cfg["iqa"]["epochs"]
    return 80 if cfg["data"]["conditional"] else 30


def train_scorer(cfg: dict, role: str) -> Scorer:
    """``role`` is ``guide`` or ``heldout``; the two differ in init seed and data split."""
    if role not in ("guide", "heldout"):
        raise ValueError(f"unknown scorer role {role!r}")
    d, q = cfg["data"], cfg["iqa"]
    dataset = ds.build_iqa_dataset(d["n_iqa"], d["conditional"], d[f"{role}_data_seed"], d["size"])
    sc = scorer_config(cfg)
    return train_evaluator(sc.variant, dataset, scorer_epochs(cfg), q["lr"], q[f"{role}_seed"],
                           q["batch_size"], sc)


@dataclass
class ScorerQuality:
    spearman: float | None
    matched_mean: float | None = None
    mismatched_mean: float | None = None

    @property
    def gap(self) -> float | None:
        if self.matched_mean is None:
            return None
        return self.matched_mean - self.mismatched_mean


def scorer_quality(cfg: dict, scorer: Scorer) -> ScorerQuality:
    """Spearman against ``1 - severity`` on a fresh test split (plus the match gap if conditional)."""
    d = cfg["data"]
    test = ds.build_iqa_dataset(d["n_iqa_test"], d["conditional"], d["test_data_seed"], d["size"])
    if scorer.variant == "two-stream":
        return ScorerQuality(spearman(scorer.score_numpy(test.images), test.labels))
    s = scorer.score_numpy(test.images, test.conditions)
    rho = spearman(s[test.matched], 1.0 - test.severity[test.matched])
    return ScorerQuality(rho, float(s[test.matched].mean()), float(s[~test.matched].mean()))


def diffusion_corpus(cfg: dict) -> ds.DiffusionCorpus:
    d = cfg["data"]
    return ds.build_diffusion_dataset(d["n_diffusion"], d["size"], d["conditional"], d["diffusion_seed"])


def train_base_model(cfg: dict, callback=None) -> tuple[NoisePredictor, NoiseSchedule, list[float]]:
    d, f = cfg["data"], cfg["diffusion"]
    sched = schedule(cfg)
    corpus = diffusion_corpus(cfg)
    k = len(ds.SHAPE_CLASSES) if d["conditional"] else 0
    net = build_predictor(sched, (d["size"], d["size"]), f["hidden"], f["temb_dim"], k,
                          f["cond_dim"] if k else 0, seed=cfg["seed"])
    losses = train_base(net, corpus.images, sched, f["train_steps"], f["lr"], f["batch"], cfg["seed"],
                        corpus.classes if k else None, log_every=500 if callback else 0, callback=callback)
    return net, sched, losses


def finetune(cfg: dict, base: NoisePredictor, guide: Scorer, sched: NoiseSchedule,
             acfg: ACPOConfig | None = None, callback=None) -> tuple[NoisePredictor, FinetuneResult]:
    """Copy ``base``, attach fresh adapters and run the combined objective."""
    acfg = acfg or acpo_cfg(cfg)
    net = copy.deepcopy(base)
    attach_adapters(net, cfg["adapters"]["rank"], cfg["adapters"]["scale"], seed=acfg.seed)
    corpus = diffusion_corpus(cfg)
    classes = corpus.classes if net.num_classes else None
    result = finetune_run(net, guide, sched, corpus.images, acfg, classes, callback)
    return net, result


def evaluate(cfg: dict, net: NoisePredictor, heldout: Scorer, sched: NoiseSchedule) -> PairwiseResult:
    m = cfg["metrics"]
    return evaluate_pairwise(net, heldout, sched, m["n"], m["seed"])


def window_settings(T: int, fraction: float, ratio: float = 0.5) -> tuple[int, int]:
    """(t_late_max, guided_steps) for a window covering ``fraction`` of the chain.

    ``guided_steps`` keeps the default's ratio to the window (5 of 10).
    """
    t_late = max(1, int(round(fraction * T)))
    return t_late, max(1, int(round(ratio * t_late)))


@dataclass(frozen=True)
class AblationCell:
    cell: str
    group: str
    acpo: ACPOConfig


def ablation_cells(cfg: dict) -> list[AblationCell]:
    base = acpo_cfg(cfg)
    ratio = base.guided_steps / base.t_late_max
    cells = [AblationCell(f"lambda2={w:g}", "weight", replace(base, lambda2=float(w)))
             for w in cfg["ablate"]["lambda2"]]
    T = cfg["diffusion"]["T"]
    for frac in cfg["ablate"]["window_fractions"]:
        t_late, guided = window_settings(T, frac, ratio)
        cells.append(AblationCell(f"window={t_late}", "window",
                                  replace(base, t_late_max=t_late, guided_steps=guided)))
    for on in cfg["ablate"]["anchor"]:
        cells.append(AblationCell(f"anchor={'on' if on else 'off'}", "anchor",
                                  replace(base, lambda1=base.lambda1 if on else 0.0)))
    return cells


@dataclass
class CellOutcome:
    cell: AblationCell
    net: NoisePredictor
    result: FinetuneResult
    evaluation: PairwiseResult

    def row(self) -> dict:
        a = self.cell.acpo
        row = self.evaluation.row(self.cell.cell)
        row.update(group=self.cell.group, lambda1=a.lambda1, lambda2=a.lambda2, t_late_max=a.t_late_max,
                   guided_steps=a.guided_steps, final_guided_score=self.result.final_guided_score,
                   final_anchor_drift=self.result.final_anchor_drift)
        return row


def run_ablation(cfg: dict, base: NoisePredictor, guide: Scorer, heldout: Scorer, sched: NoiseSchedule,
                 cells: list[AblationCell] | None = None, on_cell=None) -> list[CellOutcome]:
    """Run each distinct cell configuration once; repeated configurations share the run."""
    cells = cells if cells is not None else ablation_cells(cfg)
    cache: dict[tuple, tuple] = {}
    out = []
    for cell in cells:
        key = astuple(cell.acpo)
        if key not in cache:
            log.info("ablation cell %s", cell.cell)
            net, result = finetune(cfg, base, guide, sched, cell.acpo)
            cache[key] = (net, result, evaluate(cfg, net, heldout, sched))
        outcome = CellOutcome(cell, *cache[key])
        out.append(outcome)
        if on_cell is not None:
            on_cell(outcome)
    return out
