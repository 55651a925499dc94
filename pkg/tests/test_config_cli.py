import json

import numpy as np
import pytest

from acpo import checkpoint as ck
from acpo import cli
from acpo import config as C
from acpo import pipeline as pl
from acpo.errors import ConfigError, InvariantError

TINY = {
    "data": {"n_diffusion": 64, "n_iqa": 120, "n_iqa_test": 40, "size": 8},
    "diffusion": {"T": 20, "hidden": [24], "temb_dim": 4, "train_steps": 40, "batch": 16},
    "adapters": {"rank": 2},
    "iqa": {"epochs": 2, "stream_width": 4, "fuse_width": 4, "grid": 2, "token_width": 6, "embed_width": 4},
    "acpo": {"steps": 4, "t_late_max": 4, "guided_steps": 2, "probe_every": 2, "mse_batch": 4, "guide_batch": 2,
             "anchor_batch": 4, "probe_batch": 4},
    "metrics": {"n": 6, "export_samples": 2},
}


def _read(path):
    return cli.read_csv(path)


@pytest.fixture(scope="module")
def tiny_config(tmp_path_factory):
    p = tmp_path_factory.mktemp("cfg") / "tiny.json"
    p.write_text(json.dumps(TINY))
    return str(p)


@pytest.fixture(scope="module")
def pipeline_dir(tmp_path_factory, tiny_config):
    out = tmp_path_factory.mktemp("run")
    for command in ("train-iqa", "train-base", "finetune", "evaluate"):
        assert cli.main([command, "--config", tiny_config, "--out", str(out)]) == 0, command
    return out


# --- config ---------------------------------------------------------------

def test_defaults_resolve_and_match_toy_profile():
    cfg = C.resolve()
    assert cfg["diffusion"]["T"] == 100 and cfg["data"]["size"] == 16
    a = C.acpo_cfg(cfg)
    assert (a.lambda1, a.lambda2, a.t_late_max, a.steps) == (1.0, 1.0, 10, 1000)
    assert cfg["adapters"]["rank"] == 4


def test_override_parsing():
    assert C.parse_override("acpo.lambda1=0") == {"acpo": {"lambda1": 0}}
    assert C.parse_override("out=runs/x") == {"out": "runs/x"}
    assert C.parse_override("diffusion.hidden=[8, 8]") == {"diffusion": {"hidden": [8, 8]}}
    for bad in ("acpo.lambda1", "acpo..x=1", "=3"):
        with pytest.raises(ConfigError):
            C.parse_override(bad)


def test_precedence_file_then_set_then_flags(tmp_path):
    p = tmp_path / "c.json"
    p.write_text(json.dumps({"seed": 4, "acpo": {"lambda2": 0.5}}))
    cfg = C.resolve(p, ["acpo.lambda2=2"], seed=9, out="elsewhere")
    assert cfg["acpo"]["lambda2"] == 2 and cfg["seed"] == 9 and cfg["out"] == "elsewhere"
    assert C.acpo_cfg(cfg).seed == 9


@pytest.mark.parametrize("override, key", [
    ("acpo.lamda1=0", "acpo.lamda1"),
    ("nonsense=1", "nonsense"),
    ("diffusion.T.x=1", "diffusion.T"),
])
def test_unknown_keys_named(override, key):
    with pytest.raises(ConfigError, match=key.replace(".", r"\.")):
        C.resolve(overrides=[override])


@pytest.mark.parametrize("override", [
    "diffusion.T=0", "diffusion.hidden=[]", "acpo.lambda1=-1", "acpo.t_late_max=101", "acpo.guided_steps=11",
    "data.conditional=1", "iqa.heldout_seed=0", "data.heldout_data_seed=1", "ablate.window_fractions=[0, 1]",
    "metrics.n=1", "seed=1.5", "paths.base=3", "schema_version=2", "adapters.rank=2.5",
])
def test_invalid_values_rejected(override):
    with pytest.raises(ConfigError):
        C.resolve(overrides=[override])


def test_bad_config_files(tmp_path):
    (tmp_path / "a.json").write_text("{not json")
    (tmp_path / "b.json").write_text("[1, 2]")
    for name in ("a.json", "b.json", "missing.json"):
        with pytest.raises(ConfigError):
            C.resolve(tmp_path / name)


def test_config_hash_ignores_output_dir():
    assert C.config_hash(C.resolve(out="x")) == C.config_hash(C.resolve(out="y"))
    assert C.config_hash(C.resolve(seed=1)) != C.config_hash(C.resolve(seed=2))


def test_window_settings_keep_ratio():
    assert [pl.window_settings(100, f) for f in (0.1, 0.3, 0.5, 1.0)] == [(10, 5), (30, 15), (50, 25), (100, 50)]
    assert pl.window_settings(20, 0.1) == (2, 1)


def test_default_ablation_grid():
    cells = pl.ablation_cells(C.resolve())
    groups = [c.group for c in cells]
    assert groups.count("weight") == 3 and groups.count("window") == 4 and groups.count("anchor") == 2
    assert [c.acpo.t_late_max for c in cells if c.group == "window"] == [10, 30, 50, 100]
    assert [c.acpo.lambda1 for c in cells if c.group == "anchor"] == [1.0, 0.0]


# --- CLI --------------------------------------------------------------------

def test_unknown_key_exit_status(tmp_path, capsys):
    assert cli.main(["train-base", "--set", "acpo.lamda1=0", "--out", str(tmp_path)]) == cli.EXIT_CONFIG
    assert "acpo.lamda1" in capsys.readouterr().err


def test_missing_upstream_exit_status(tmp_path, tiny_config, capsys):
    assert cli.main(["finetune", "--config", tiny_config, "--out", str(tmp_path)]) == cli.EXIT_DEPENDENCY
    assert "base" in capsys.readouterr().err


def test_positional_inputs_only_for_score(tmp_path):
    assert cli.main(["train-base", "x.pgm", "--out", str(tmp_path)]) == cli.EXIT_CONFIG


def test_pipeline_artifacts(pipeline_dir):
    for name in ("guide.ckpt", "heldout.ckpt", "scorers.csv", "scorers.png", "base.ckpt", "base_loss.csv",
                 "base_loss.png", "adapters.ckpt", "steps.csv", "steps.png", "summary.csv", "pairs.png",
                 "samples.png", "samples/0000_base.pgm", "samples/0001_finetuned.pgm"):
        assert (pipeline_dir / name).is_file(), name
    for command in ("train-iqa", "train-base", "finetune", "evaluate"):
        snap = json.loads((pipeline_dir / f"{command}.config.json").read_text())
        assert snap["out"] == str(pipeline_dir) and snap["diffusion"]["T"] == 20
    steps = _read(pipeline_dir / "steps.csv")
    assert list(steps[0]) == ["step", "l_mse", "l_anchor", "l_quality", "l_total", "guided_score", "anchor_drift"]
    assert len(steps) == 4 and float(steps[0]["l_anchor"]) == 0.0
    summary = _read(pipeline_dir / "summary.csv")
    assert len(summary) == 1 and tuple(summary[0]) == cli.SUMMARY_FIELDS


def test_checkpoint_provenance(pipeline_dir):
    doc = ck.read_checkpoint(pipeline_dir / "adapters.ckpt", "adapters")
    prov = doc["provenance"]
    assert prov["seed"] == 0 and prov["steps"] == 4 and len(prov["config_hash"]) == 16
    assert ck.read_checkpoint(pipeline_dir / "guide.ckpt")["provenance"]["role"] == "guide"


def test_zero_step_finetune_evaluates_to_ties(pipeline_dir, tiny_config, tmp_path):
    paths = [f"paths.{k}={pipeline_dir / (k + '.ckpt')}" for k in ("base", "guide", "heldout")]
    assert cli.main(["finetune", "--config", tiny_config, "--out", str(tmp_path), "--set", "acpo.steps=0",
                     *sum([["--set", p] for p in paths], [])]) == 0
    assert cli.main(["evaluate", "--config", tiny_config, "--out", str(tmp_path),
                     *sum([["--set", p] for p in paths], [])]) == 0
    row = _read(tmp_path / "summary.csv")[0]
    assert float(row["win_rate"]) == 0.5 and row["t_statistic"] == "degenerate"
    assert float(row["improvement"]) == 0.0


def test_commands_are_deterministic(tiny_config, tmp_path):
    outs = [tmp_path / "a", tmp_path / "b"]
    for out in outs:
        assert cli.main(["train-base", "--config", tiny_config, "--out", str(out)]) == 0
    for name in ("base_loss.csv", "base.ckpt"):
        assert (outs[0] / name).read_bytes() == (outs[1] / name).read_bytes(), name


def test_ablate_merged_csv(pipeline_dir, tiny_config, tmp_path):
    sets = [f"paths.{k}={pipeline_dir / (k + '.ckpt')}" for k in ("base", "guide", "heldout")]
    args = ["ablate", "--config", tiny_config, "--out", str(tmp_path), "--set", "metrics.export_samples=0"]
    assert cli.main(args + sum([["--set", s] for s in sets], [])) == 0
    rows = _read(tmp_path / "ablation.csv")
    assert len(rows) >= 3 + 4 + 2
    assert tuple(rows[0]) == cli.ABLATION_FIELDS
    assert {r["group"] for r in rows} == {"weight", "window", "anchor"}
    assert (tmp_path / "ablation.png").is_file()
    assert (tmp_path / "ablate" / "anchor_off" / "steps.csv").is_file()
    off = next(r for r in rows if r["run_id"] == "anchor=off")
    assert float(off["lambda1"]) == 0.0


def test_export_score_and_report(pipeline_dir, tiny_config, tmp_path):
    assert cli.main(["export-data", "--config", tiny_config, "--out", str(tmp_path)]) == 0
    manifest = _read(tmp_path / "data" / "manifest.csv")
    assert len(manifest) == TINY["data"]["n_iqa"]
    guide = f"paths.guide={pipeline_dir / 'guide.ckpt'}"
    assert cli.main(["score", str(tmp_path / "data"), "--config", tiny_config, "--out", str(tmp_path),
                     "--set", guide]) == 0
    scores = _read(tmp_path / "scores.csv")
    assert len(scores) == len(manifest) and all(0 < float(r["score"]) < 1 for r in scores)
    one = tmp_path / "data" / manifest[0]["filename"]
    assert cli.main(["score", str(one), "--config", tiny_config, "--out", str(tmp_path / "s1"),
                     "--set", guide]) == 0
    assert _read(tmp_path / "s1" / "scores.csv")[0]["score"] == scores[0]["score"]
    assert cli.main(["score", str(tmp_path / "nope.pgm"), "--config", tiny_config, "--out", str(tmp_path),
                     "--set", guide]) == cli.EXIT_DEPENDENCY
    assert cli.main(["report", "--out", str(pipeline_dir)]) == 0
    assert cli.main(["report", "--out", str(tmp_path / "empty")]) == cli.EXIT_DEPENDENCY


def test_conditional_pipeline(tiny_config, tmp_path):
    args = ["--config", tiny_config, "--out", str(tmp_path), "--set", "data.conditional=true"]
    for command in ("train-iqa", "train-base", "finetune", "evaluate"):
        assert cli.main([command, *args]) == 0, command
    assert ck.load_scorer(tmp_path / "guide.ckpt").variant == "conditional"
    net, _ = ck.load_base(tmp_path / "base.ckpt")
    assert net.num_classes == 4


def test_invariant_breach_exit_status(pipeline_dir, tiny_config, tmp_path, monkeypatch):
    def breach(*a, **k):
        raise InvariantError("frozen base changed")

    monkeypatch.setattr(pl, "finetune", breach)
    sets = [f"paths.{k}={pipeline_dir / (k + '.ckpt')}" for k in ("base", "guide")]
    assert cli.main(["finetune", "--config", tiny_config, "--out", str(tmp_path),
                     *sum([["--set", s] for s in sets], [])]) == cli.EXIT_INVARIANT


def test_corrupt_upstream_is_dependency_error(pipeline_dir, tiny_config, tmp_path):
    bad = tmp_path / "base.ckpt"
    bad.write_bytes((pipeline_dir / "base.ckpt").read_bytes()[:-10])
    sets = ["--set", f"paths.guide={pipeline_dir / 'guide.ckpt'}"]
    assert cli.main(["finetune", "--config", tiny_config, "--out", str(tmp_path), *sets]) == cli.EXIT_DEPENDENCY


def test_write_csv_float_repr(tmp_path):
    cli.write_csv(tmp_path / "x.csv", ("a", "b"), [{"a": np.float64(0.1), "b": "k"}])
    assert (tmp_path / "x.csv").read_text() == "a,b\n0.1,k\n"
