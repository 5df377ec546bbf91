"""End-to-end CLI checks on miniature configurations."""

import json
from pathlib import Path

import numpy as np
import pytest

from safectl.cli import main
from safectl.config import ConfigError, RunConfig, load_config


def tiny_config(tmp_path, **extra) -> Path:
    cfg = {
        "env": "city",
        "seed": 5,
        "npc_count": 4,
        "nominal_samples": 1500,
        "eval_episodes": 2,
        "ablation_seeds": [0],
        "learner": {
            "iterations": 2,
            "episodes_per_iter": 1,
            "update_iters": 4,
            "batch_size": 64,
            "cbf_hidden": [16, 16],
            "ctrl_hidden": [16, 16],
            "checkpoint_interval": 0,
        },
    }
    cfg.update(extra)
    path = tmp_path / "config.json"
    path.write_text(json.dumps(cfg))
    return path


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    """fit-nominal + 2-iteration train shared by the CLI tests."""
    root = tmp_path_factory.mktemp("cli")
    cfg = tiny_config(root)
    nom_dir = root / "nominal"
    assert main(["fit-nominal", "--config", str(cfg),
                 "--out", str(nom_dir)]) == 0
    train_dir = root / "train"
    assert main(["train", "--config", str(cfg), "--out", str(train_dir),
                 "--nominal", str(nom_dir / "nominal.json")]) == 0
    return root, cfg, nom_dir, train_dir


def test_fit_nominal_writes_model_and_report(pipeline):
    root, cfg, nom_dir, _ = pipeline
    report = json.loads((nom_dir / "fit_report.json").read_text())
    assert report["kind"] == "linear"
    assert report["residual_e"] <= 0.2
    assert (nom_dir / "nominal.json").exists()
    assert (nom_dir / "config.json").exists()  # resolved config echoed


def test_nominal_checkpoint_roundtrips_bit_exactly(tmp_path):
    from safectl.nominal import NominalModel, load_nominal, save_nominal
    rng = np.random.default_rng(0)
    model = NominalModel(kind="linear", state_dim=3, control_dim=2,
                         a=rng.normal(size=(3, 3)), b=rng.normal(size=(3, 2)),
                         c=rng.normal(size=3),
                         fit_report={"residual_e": 0.123})
    save_nominal(tmp_path / "m.json", model, "city")
    back, kind = load_nominal(tmp_path / "m.json")
    assert kind == "city"
    assert np.array_equal(back.a, model.a)
    assert np.array_equal(back.b, model.b)
    assert np.array_equal(back.c, model.c)


def test_train_smoke_writes_artifacts(pipeline):
    root, cfg, nom_dir, train_dir = pipeline
    assert (train_dir / "checkpoint.json").exists()
    history = (train_dir / "history.tsv").read_text().splitlines()
    assert history[0] == "# loss_variant=lp3"
    assert history[1].startswith("iteration\t")
    assert len(history) == 2 + 2  # header lines + 2 iterations


def test_train_variant_flag_recorded(pipeline, tmp_path):
    root, cfg, nom_dir, _ = pipeline
    out = tmp_path / "lp2"
    assert main(["train", "--config", str(cfg), "--out", str(out),
                 "--nominal", str(nom_dir / "nominal.json"),
                 "--variant", "lp2"]) == 0
    assert (out / "history.tsv").read_text().splitlines()[0] == \
        "# loss_variant=lp2"
    echoed = json.loads((out / "config.json").read_text())
    assert echoed["learner"]["loss_variant"] == "lp2"


def test_train_resume_reproduces_uninterrupted_run(pipeline, tmp_path):
    root, cfg, nom_dir, _ = pipeline
    nominal = str(nom_dir / "nominal.json")
    full = tmp_path / "full"
    assert main(["train", "--config", str(cfg), "--out", str(full),
                 "--nominal", nominal, "--iterations", "4"]) == 0
    part = tmp_path / "part"
    assert main(["train", "--config", str(cfg), "--out", str(part),
                 "--nominal", nominal]) == 0  # 2 iterations
    assert main(["train", "--config", str(cfg), "--out", str(part),
                 "--nominal", nominal, "--iterations", "4",
                 "--resume"]) == 0
    full_hist = (full / "history.tsv").read_text()
    part_hist = (part / "history.tsv").read_text()
    assert part_hist == full_hist
    assert (part / "checkpoint.json").read_text() == \
        (full / "checkpoint.json").read_text()


def test_eval_reports_both_modes(pipeline, tmp_path):
    root, cfg, nom_dir, train_dir = pipeline
    out = tmp_path / "eval"
    assert main(["eval", "--config", str(cfg), "--out", str(out),
                 "--checkpoint", str(train_dir / "checkpoint.json"),
                 "--npc-mode", "both", "--episodes", "2"]) == 0
    for mode in ("static", "moving"):
        report = json.loads((out / f"report_{mode}.json").read_text())
        assert report["runs"] == 2
        assert report["npc_mode"] == mode
        rows = (out / f"runs_{mode}.tsv").read_text().splitlines()
        assert len(rows) == 3


def test_self_comparison_beta_is_zero_or_excluded():
    # a policy identical to the nominal controller cannot improve on it
    from safectl.cbflearn import run_episode
    from safectl.dynamics import drone_blackbox
    from safectl.env import city_scenario, sample_initial
    from safectl.evaluation import abs_safety, rel_safety
    from safectl.nominal import plan_reference
    scn = city_scenario(npc_count=8)
    bb = drone_blackbox()
    betas = []
    for i in range(6):
        rng = np.random.default_rng(np.random.SeedSequence((50, i)))
        world = sample_initial(scn, rng)
        ref = plan_reference(world, scn, rng)
        a1 = abs_safety(run_episode(None, world, scn, ref, bb.fresh(seed=i)))
        a2 = abs_safety(run_episode(None, world, scn, ref, bb.fresh(seed=i)))
        beta = rel_safety(a1, a2)
        if beta is not None:
            betas.append(beta)
    assert all(b == 0.0 for b in betas)


def test_ablate_sample_budgets_echo_grid(pipeline, tmp_path):
    root, cfg_path, nom_dir, _ = pipeline
    cfg = tiny_config(tmp_path, ablation_budgets=[0, 120])
    out = tmp_path / "ablate"
    assert main(["ablate", "--config", str(cfg), "--out", str(out),
                 "--which", "samples",
                 "--nominal", str(nom_dir / "nominal.json"),
                 "--episodes", "2"]) == 0
    rows = (out / "sweep_samples.tsv").read_text().splitlines()
    assert rows[0].startswith("budget\t")
    budgets = [int(r.split("\t")[0]) for r in rows[1:]]
    assert budgets == [0, 120]


def test_ablate_variant_row_count(pipeline, tmp_path):
    root, cfg_path, nom_dir, _ = pipeline
    out = tmp_path / "ablate_v"
    assert main(["ablate", "--config", str(cfg_path), "--out", str(out),
                 "--which", "variant",
                 "--nominal", str(nom_dir / "nominal.json"),
                 "--episodes", "2"]) == 0
    rows = (out / "sweep_variant.tsv").read_text().splitlines()
    assert len(rows) == 1 + 3  # header + {lp1, lp2, lp3} x 1 seed x 1 eps


def test_audit_fresh_checkpoint_reports_rates(pipeline, tmp_path):
    root, cfg_path, nom_dir, train_dir = pipeline
    out = tmp_path / "audit"
    assert main(["audit", "--config", str(cfg_path), "--out", str(out),
                 "--checkpoint", str(train_dir / "checkpoint.json"),
                 "--samples", "500"]) == 0
    audit = json.loads((out / "audit.json").read_text())
    assert audit["samples"] >= 500
    for key in ("init_rate", "danger_rate"):
        assert 0.0 <= audit[key] <= 1.0
    assert audit["rate_rate"] is None or 0.0 <= audit["rate_rate"] <= 1.0


def test_unknown_config_key_rejected(tmp_path):
    path = tmp_path / "bad.json"
    path.write_text(json.dumps({"envv": "city"}))
    assert main(["train", "--config", str(path), "--nominal", "x"]) == 1
    with pytest.raises(ConfigError, match="unknown config keys"):
        load_config(str(path))


def test_flag_overrides_config_file(tmp_path):
    path = tiny_config(tmp_path, seed=1)
    cfg = load_config(str(path), {"seed": 99, "learner.loss_variant": "lp1"})
    assert cfg.seed == 99
    assert cfg.learner.loss_variant == "lp1"
    assert cfg.npc_count == 4  # file value preserved


def test_missing_checkpoint_is_io_error(tmp_path):
    cfg = tiny_config(tmp_path)
    assert main(["eval", "--config", str(cfg), "--out", str(tmp_path / "o"),
                 "--checkpoint", str(tmp_path / "missing.json")]) == 3


def test_invalid_learner_value_rejected(tmp_path):
    path = tmp_path / "bad.json"
    path.write_text(json.dumps({"learner": {"loss_variant": "lp9"}}))
    with pytest.raises(ConfigError):
        load_config(str(path))
