"""Command line entry point.

    acpo train-iqa   -> guide.ckpt, heldout.ckpt, scorers.csv
    acpo train-base  -> base.ckpt, base_loss.csv
    acpo finetune    -> adapters.ckpt, steps.csv
    acpo evaluate    -> summary.csv (+ sample PGMs)
    acpo ablate      -> ablation.csv, ablate/<cell>/...
    acpo export-data -> data/manifest.csv + PGM images
    acpo score PGM.. -> scores.csv (path, score) from the guide or held-out scorer
    acpo report      -> re-render figures from the CSVs in --out

Every command writes ``<command>.config.json`` (the resolved config) into
the output directory and renders its figures next to its CSV files.
Exit status: 0 ok, 2 config error, 3 missing or unreadable upstream
artifact, 4 invariant breach.
"""

from __future__ import annotations

import argparse
import csv
import logging
import sys
from pathlib import Path

import numpy as np

from . import checkpoint as ck
from . import config as C
from . import data as ds
from . import pipeline as pl
from . import plotting
from .errors import CheckpointError, ConfigError, DependencyError, InvariantError
from .finetune import REPORT_FIELDS, report_dicts
from .metrics import SUMMARY_FIELDS, paired_samples

log = logging.getLogger("acpo")

EXIT_OK, EXIT_CONFIG, EXIT_DEPENDENCY, EXIT_INVARIANT = 0, 2, 3, 4
ABLATION_FIELDS = SUMMARY_FIELDS + ("group", "lambda1", "lambda2", "t_late_max", "guided_steps",
                                    "final_guided_score", "final_anchor_drift")


def write_csv(path, fields, rows) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=list(fields), lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({k: repr(float(v)) if isinstance(v, (float, np.floating)) else v for k, v in r.items()})
    return path


def read_csv(path) -> list[dict]:
    with open(path, newline="") as f:
        return list(csv.DictReader(f))


def _upstream(cfg: dict, key: str, default_name: str) -> Path:
    p = Path(cfg["paths"][key]) if cfg["paths"][key] else Path(cfg["out"]) / default_name
    if not p.is_file():
        raise DependencyError(f"missing upstream {key} checkpoint {p}; run the producing command first")
    return p


def _provenance(cfg: dict, **extra) -> dict:
    return {"config_hash": C.config_hash(cfg), "seed": cfg["seed"], **extra}


def cmd_train_iqa(cfg: dict, out: Path) -> None:
    rows = []
    for role in ("guide", "heldout"):
        scorer = pl.train_scorer(cfg, role)
        epochs = pl.scorer_epochs(cfg)
        ck.save_scorer(scorer, out / f"{role}.ckpt", _provenance(cfg, role=role, steps=epochs))
        q = pl.scorer_quality(cfg, scorer)
        rows.append({"role": role, "variant": scorer.variant, "spearman": q.spearman,
                     "matched_mean": q.matched_mean, "mismatched_mean": q.mismatched_mean, "gap": q.gap})
        log.info("%s scorer: spearman %s gap %s", role, q.spearman, q.gap)
        if role == "guide":
            d = cfg["data"]
            test = ds.build_iqa_dataset(d["n_iqa_test"], d["conditional"], d["test_data_seed"], d["size"])
            plotting.scorer_scatter(scorer.score_numpy(test.images, test.conditions), test.labels,
                                    out / "scorers.png", "guide scorer, test split")
    write_csv(out / "scorers.csv", rows[0].keys(), rows)


def cmd_train_base(cfg: dict, out: Path) -> None:
    net, sched, losses = pl.train_base_model(cfg, callback=lambda s, l: log.info("step %d loss %.5f", s, l))
    ck.save_base(net, sched, out / "base.ckpt", _provenance(cfg, steps=len(losses)))
    write_csv(out / "base_loss.csv", ("step", "loss"),
              [{"step": i + 1, "loss": v} for i, v in enumerate(losses)])
    plotting.base_loss(losses, out / "base_loss.png")


def _steps_outputs(directory: Path, result) -> None:
    rows = report_dicts(result.reports)
    write_csv(directory / "steps.csv", REPORT_FIELDS, rows)
    if rows:
        plotting.training_curves(rows, directory / "steps.png")


def cmd_finetune(cfg: dict, out: Path) -> None:
    base, sched = ck.load_base(_upstream(cfg, "base", "base.ckpt"))
    guide = ck.load_scorer(_upstream(cfg, "guide", "guide.ckpt"))
    acfg = C.acpo_cfg(cfg)
    net, result = pl.finetune(cfg, base, guide, sched, acfg)
    ck.save_adapters(net, out / "adapters.ckpt", _provenance(cfg, steps=acfg.steps))
    _steps_outputs(out, result)
    log.info("final guided score %.4f, anchor drift %.4f", result.final_guided_score, result.final_anchor_drift)


def cmd_evaluate(cfg: dict, out: Path) -> None:
    net, sched = ck.load_base(_upstream(cfg, "base", "base.ckpt"))
    ck.load_adapters(_upstream(cfg, "adapters", "adapters.ckpt"), net)
    heldout = ck.load_scorer(_upstream(cfg, "heldout", "heldout.ckpt"))
    res = pl.evaluate(cfg, net, heldout, sched)
    write_csv(out / "summary.csv", SUMMARY_FIELDS, [res.row(C.config_hash(cfg))])
    plotting.paired_scores(res.sample.baseline, res.sample.finetuned, out / "pairs.png")
    m = cfg["metrics"]
    k = m["export_samples"]
    n_show = max(k, 8)
    cond = [i % net.num_classes for i in range(n_show)] if net.num_classes else None
    base, fine = paired_samples(net, sched, n_show, m["seed"], cond)
    plotting.sample_pairs(base, fine, out / "samples.png")
    if k:
        (out / "samples").mkdir(exist_ok=True)
    for i in range(k):
        ds.write_pgm(out / "samples" / f"{i:04d}_base.pgm", base[i])
        ds.write_pgm(out / "samples" / f"{i:04d}_finetuned.pgm", fine[i])
    log.info("held-out change %+.4f, t %s, win rate %.3f", res.test.mean_diff, res.test.t, res.win_rate)


def cmd_ablate(cfg: dict, out: Path) -> None:
    base, sched = ck.load_base(_upstream(cfg, "base", "base.ckpt"))
    guide = ck.load_scorer(_upstream(cfg, "guide", "guide.ckpt"))
    heldout = ck.load_scorer(_upstream(cfg, "heldout", "heldout.ckpt"))
    rows = []

    def on_cell(o):
        cell_dir = out / "ablate" / o.cell.cell.replace("=", "_")
        _steps_outputs(cell_dir, o.result)
        ck.save_adapters(o.net, cell_dir / "adapters.ckpt",
                         _provenance(cfg, cell=o.cell.cell, steps=o.cell.acpo.steps))
        rows.append(o.row())
        log.info("cell %s: held-out change %+.4f drift %.4f", o.cell.cell, o.evaluation.test.mean_diff,
                 o.result.final_anchor_drift)

    pl.run_ablation(cfg, base, guide, heldout, sched, on_cell=on_cell)
    write_csv(out / "ablation.csv", ABLATION_FIELDS, rows)
    plotting.ablation(rows, out / "ablation.png")


def cmd_export_data(cfg: dict, out: Path) -> None:
    d = cfg["data"]
    dataset = ds.build_iqa_dataset(d["n_iqa"], d["conditional"], d["guide_data_seed"], d["size"])
    ds.export_corpus(out / "data", dataset)


def _pgm_inputs(inputs) -> list[tuple[Path, int | None]]:
    """Expand files and directories; a directory's manifest.csv supplies classes."""
    found = []
    for item in map(Path, inputs):
        if item.is_dir():
            manifest = item / "manifest.csv"
            if manifest.is_file():
                found += [(item / r["filename"], ds.SHAPE_CLASSES.index(r["class"])) for r in read_csv(manifest)]
            else:
                found += [(p, None) for p in sorted(item.glob("*.pgm"))]
        elif item.is_file():
            found.append((item, None))
        else:
            raise DependencyError(f"no such image or directory: {item}")
    if not found:
        raise DependencyError("no PGM images to score")
    return found


def cmd_score(cfg: dict, out: Path, inputs=(), role: str = "guide") -> None:
    scorer = ck.load_scorer(_upstream(cfg, role, f"{role}.ckpt"))
    items = _pgm_inputs(inputs)
    try:
        images = np.stack([ds.read_pgm(p) for p, _ in items])
    except ValueError as e:
        raise DependencyError(str(e)) from None
    conditions = None
    if scorer.variant == "conditional":
        if any(c is None for _, c in items):
            raise ConfigError("the conditional scorer needs classes; score a directory with manifest.csv")
        conditions = np.array([c for _, c in items])
    scores = scorer.score_numpy(images, conditions)
    rows = [{"path": str(p), "score": v} for (p, _), v in zip(items, scores)]
    write_csv(out / "scores.csv", ("path", "score"), rows)


def cmd_report(cfg: dict, out: Path) -> None:
    """Re-render every figure whose CSV exists under ``out``."""
    found = False
    for steps in sorted(out.rglob("steps.csv")):
        rows = read_csv(steps)
        if rows:
            plotting.training_curves(rows, steps.with_suffix(".png"))
            found = True
    if (out / "ablation.csv").is_file():
        plotting.ablation(read_csv(out / "ablation.csv"), out / "ablation.png")
        found = True
    if (out / "base_loss.csv").is_file():
        plotting.base_loss([float(r["loss"]) for r in read_csv(out / "base_loss.csv")], out / "base_loss.png")
        found = True
    if not found:
        raise DependencyError(f"no CSV outputs under {out}")


COMMANDS = {
    "train-iqa": cmd_train_iqa,
    "train-base": cmd_train_base,
    "finetune": cmd_finetune,
    "evaluate": cmd_evaluate,
    "ablate": cmd_ablate,
    "export-data": cmd_export_data,
    "report": cmd_report,
    "score": cmd_score,
}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="acpo", description="Anchor-constrained quality fine-tuning of a toy DDPM.")
    p.add_argument("command", choices=list(COMMANDS))
    p.add_argument("inputs", nargs="*", help="score: PGM files or directories")
    p.add_argument("--config", help="JSON config file (unknown keys are rejected)")
    p.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                   help="override one config value, e.g. acpo.lambda1=0 (repeatable)")
    p.add_argument("--out", help="output directory (also where upstream checkpoints are looked up)")
    p.add_argument("--seed", type=int, help="run seed")
    p.add_argument("--scorer", choices=("guide", "heldout"), default="guide", help="score: which scorer to use")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def run(command: str, config_path=None, overrides=(), out=None, seed=None, inputs=(), scorer="guide") -> int:
    try:
        cfg = C.resolve(config_path, list(overrides), seed, out)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    out_dir = Path(cfg["out"])
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
        C.dump(cfg, out_dir / f"{command}.config.json")
        if command == "score":
            cmd_score(cfg, out_dir, inputs, scorer)
        else:
            COMMANDS[command](cfg, out_dir)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except (DependencyError, CheckpointError) as e:
        print(f"dependency error: {e}", file=sys.stderr)
        return EXIT_DEPENDENCY
    except InvariantError as e:
        print(f"invariant breach: {e}", file=sys.stderr)
        return EXIT_INVARIANT
    return EXIT_OK


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    if args.inputs and args.command != "score":
        print(f"{args.command} takes no positional inputs", file=sys.stderr)
        return EXIT_CONFIG
    return run(args.command, args.config, args.overrides, args.out, args.seed, args.inputs, args.scorer)


if __name__ == "__main__":
    sys.exit(main())
