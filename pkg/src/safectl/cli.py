"""Single executable orchestrating the pipeline.

Subcommands: fit-nominal, train, eval, ablate, audit.  Flags override
config-file values; the fully resolved config is echoed into the output
directory.  Exit codes: 0 success, 1 usage/config error, 2 numerical
abort, 3 I/O error.
"""

from __future__ import annotations

import argparse
import json
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from . import evaluation
from .cbflearn import (
    LearnerConfig, TrainData, history_to_table, load_checkpoint, run_episode,
    sample_batch, train,
)
from .config import (
    ConfigError, RunConfig, build_blackbox, build_scenario, echo_config,
    load_config, resolved_learner,
)
from .diffcore import NonFiniteGradient
from .diffcore.checkpoint import CheckpointError, mlp_from_doc, read_doc
from .env import control_limits, sample_initial
from .nominal import (
    collect_excitation, drone_state_sampler, fit_nominal, load_nominal,
    nominal_control, plan_reference, save_nominal, ship_state_sampler,
)

EXIT_OK, EXIT_USAGE, EXIT_NUMERIC, EXIT_IO = 0, 1, 2, 3


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="safectl",
        description="Learn and evaluate neural safety certificates and safe "
                    "controllers for black-box vehicle simulators.")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", help="JSON config file")
        sp.add_argument("--seed", type=int, help="master seed")
        sp.add_argument("--out", help="output directory")
        sp.add_argument("--jobs", type=int, help="parallel evaluation workers")
        sp.add_argument("--env", choices=["city", "valley"])

    sp = sub.add_parser("fit-nominal", help="fit the nominal dynamics model")
    common(sp)
    sp.add_argument("--kind", choices=["linear", "mlp"], dest="nominal_kind")
    sp.add_argument("--samples", type=int, dest="nominal_samples")

    sp = sub.add_parser("train", help="train barrier and controller")
    common(sp)
    sp.add_argument("--nominal", required=True,
                    help="nominal-model checkpoint from fit-nominal")
    sp.add_argument("--variant", choices=["lp1", "lp2", "lp3"],
                    help="barrier-rate loss variant")
    sp.add_argument("--iterations", type=int)
    sp.add_argument("--resume", action="store_true",
                    help="continue from <out>/checkpoint.json")

    sp = sub.add_parser("eval", help="evaluate a trained checkpoint")
    common(sp)
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--nominal", help="nominal checkpoint (adds model error)")
    sp.add_argument("--npc-mode", choices=["static", "moving", "both"],
                    dest="npc_mode")
    sp.add_argument("--episodes", type=int, dest="eval_episodes")

    sp = sub.add_parser("ablate", help="run an ablation sweep")
    common(sp)
    sp.add_argument("--which", required=True,
                    choices=["model-error", "samples", "variant"])
    sp.add_argument("--nominal", required=True)
    sp.add_argument("--episodes", type=int, dest="eval_episodes")

    sp = sub.add_parser("audit", help="audit barrier conditions on fresh data")
    common(sp)
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--samples", type=int, default=20_000,
                    help="labeled state samples to audit")
    return p


def _overrides(args) -> dict:
    keys = ("seed", "out", "jobs", "env", "npc_mode", "eval_episodes",
            "nominal_kind", "nominal_samples")
    over = {k: getattr(args, k, None) for k in keys}
    if getattr(args, "variant", None):
        over["learner.loss_variant"] = args.variant
    if getattr(args, "iterations", None):
        over["learner.iterations"] = args.iterations
    return over


def cmd_fit_nominal(cfg: RunConfig, args) -> int:
    out = Path(cfg.out)
    echo_config(cfg, out)
    scn = build_scenario(cfg)
    bb = build_blackbox(cfg, seed=cfg.seed)
    kind = cfg.nominal_kind or ("linear" if cfg.env == "city" else "mlp")
    n = cfg.nominal_samples or (10_000 if cfg.env == "city" else 50_000)
    rng = np.random.default_rng(np.random.SeedSequence((cfg.seed, 21)))
    sampler = drone_state_sampler(scn.bounds_lo, scn.bounds_hi) \
        if cfg.env == "city" else ship_state_sampler(scn.bounds_lo, scn.bounds_hi)
    s, u, s_next = collect_excitation(bb, n, rng, sampler, control_limits(scn))
    angle = (2,) if cfg.env == "valley" else ()
    model = fit_nominal(s, u, s_next, kind=kind, dt=bb.dt, angle_dims=angle,
                        hidden=cfg.nominal_hidden,
                        train_steps=cfg.nominal_train_steps, seed=cfg.seed)
    model.fit_report["measured_e"] = evaluation.measured_model_error(
        bb, model, scn, seed=cfg.seed)
    save_nominal(out / "nominal.json", model, cfg.env)
    (out / "fit_report.json").write_text(
        json.dumps(model.fit_report, indent=1, sort_keys=True) + "\n")
    print(f"fitted {kind} nominal model from {n} samples: "
          f"e={model.fit_report['residual_e']:.4f} -> {out / 'nominal.json'}")
    return EXIT_OK


def cmd_train(cfg: RunConfig, args) -> int:
    out = Path(cfg.out)
    echo_config(cfg, out)
    scn = build_scenario(cfg)
    bb = build_blackbox(cfg, seed=cfg.seed)
    f_nom, env_kind = load_nominal(args.nominal)
    if env_kind != cfg.env:
        raise ConfigError(f"nominal model was fitted for {env_kind!r}")
    learner = resolved_learner(cfg, bb)
    kw = {}
    if args.resume:
        ck = load_checkpoint(out / "checkpoint.json")
        kw = dict(start_iteration=ck["iteration"],
                  nets=(ck["barrier"], ck["controller"]),
                  opts=(ck["opt_b"], ck["opt_c"]), samples=ck["samples"])
        learner = ck["learner_config"]
        print(f"resuming at iteration {ck['iteration']}")
    res = train(learner, scn, bb, f_nom, seed=cfg.seed, out_dir=str(out), **kw)
    mode = "a" if args.resume else "w"
    table = history_to_table(res.history, learner.loss_variant)
    if args.resume:
        table = "".join(table.splitlines(keepends=True)[2:])  # continue rows
    with open(out / "history.tsv", mode) as fh:
        fh.write(table)
    last = res.history[-1] if res.history else {}
    print(f"trained {len(res.history)} iterations "
          f"({res.samples} samples); final total loss "
          f"{last.get('loss_total', float('nan')):.4f} -> {out}")
    return EXIT_OK


def _load_nets(path):
    doc = read_doc(path, expect_kind="training")
    barrier = mlp_from_doc(doc["barrier"])
    controller = mlp_from_doc(doc["controller"])
    learner = LearnerConfig.from_dict(doc["learner_config"])
    return barrier, controller, learner, doc["env_kind"]


def _eval_one_mode(cfg, barrier, controller, learner, mode, model_error_e):
    scn = build_scenario(cfg)
    bb = build_blackbox(cfg, seed=cfg.seed)
    import dataclasses
    scn = dataclasses.replace(scn, npc_mode=mode)
    if cfg.jobs > 1:
        with ProcessPoolExecutor(max_workers=cfg.jobs) as pool:
            rows = list(pool.map(
                _eval_worker,
                [(cfg.to_dict(), barrier_doc(barrier), barrier_doc(controller),
                  learner.alpha_gain, mode, cfg.seed, i)
                 for i in range(cfg.eval_episodes)]))
        rows.sort(key=lambda r: r["index"])
    else:
        rows = [evaluation.evaluation_run(controller, scn, bb, cfg.seed, i,
                                          barrier, learner.alpha_gain)
                for i in range(cfg.eval_episodes)]
    report = evaluation.aggregate_runs(rows, scn, mode, model_error_e)
    return report, rows


def barrier_doc(net):
    from .diffcore.checkpoint import mlp_to_doc
    return mlp_to_doc(net)


def _eval_worker(packed):
    cfg_d, barrier_d, controller_d, alpha_gain, mode, seed, index = packed
    cfg = RunConfig.from_dict(cfg_d)
    import dataclasses
    scn = dataclasses.replace(build_scenario(cfg), npc_mode=mode)
    bb = build_blackbox(cfg, seed=seed)
    return evaluation.evaluation_run(
        mlp_from_doc(controller_d), scn, bb, seed, index,
        mlp_from_doc(barrier_d), alpha_gain)


RUN_COLUMNS = ("index", "beta", "completed", "completed_nominal", "tracking",
               "tracking_nominal", "abs_safety", "abs_safety_nominal",
               "episode_len")


def cmd_eval(cfg: RunConfig, args) -> int:
    out = Path(cfg.out)
    echo_config(cfg, out)
    barrier, controller, learner, env_kind = _load_nets(args.checkpoint)
    if env_kind != cfg.env:
        raise ConfigError(f"checkpoint was trained for {env_kind!r}")
    model_error_e = float("nan")
    if args.nominal:
        f_nom, _ = load_nominal(args.nominal)
        model_error_e = evaluation.measured_model_error(
            build_blackbox(cfg, seed=cfg.seed), f_nom, build_scenario(cfg),
            seed=cfg.seed)
    modes = ["static", "moving"] if cfg.npc_mode == "both" else [cfg.npc_mode]
    for mode in modes:
        report, rows = _eval_one_mode(cfg, barrier, controller, learner, mode,
                                      model_error_e)
        (out / f"report_{mode}.json").write_text(
            json.dumps(report.to_dict(), indent=1, sort_keys=True) + "\n")
        (out / f"runs_{mode}.tsv").write_text(
            evaluation.rows_to_table(rows, RUN_COLUMNS))
        print(f"{mode}: beta={report.beta_mean:.3f} "
              f"completion={report.completion_rate:.2f} "
              f"({report.runs} runs, {report.excluded_runs} excluded)")
    return EXIT_OK


SWEEP_ERR_COLUMNS = ("eps", "model_error_e", "variant", "seed", "beta",
                     "completion", "runs", "excluded")
SWEEP_BUDGET_COLUMNS = ("budget", "samples", "seed", "beta", "completion",
                        "runs", "excluded")


def cmd_ablate(cfg: RunConfig, args) -> int:
    out = Path(cfg.out)
    echo_config(cfg, out)
    scn = build_scenario(cfg)
    bb = build_blackbox(cfg, seed=cfg.seed)
    f_nom, _ = load_nominal(args.nominal)
    learner = resolved_learner(cfg, bb)
    seeds = list(cfg.ablation_seeds)
    if args.which == "model-error":
        base_e = evaluation.measured_model_error(bb, f_nom, scn, cfg.seed)
        grid = []
        for target in cfg.ablation_error_targets:
            grid.append(0.0 if target <= base_e else
                        evaluation.calibrate_eps(bb, f_nom, scn, target,
                                                 cfg.seed))
        rows = evaluation.sweep_model_error(grid, learner, scn, bb, f_nom,
                                            seeds, cfg.eval_episodes)
        (out / "sweep_model_error.tsv").write_text(
            evaluation.rows_to_table(rows, SWEEP_ERR_COLUMNS))
        agg = _aggregate_sweep(rows, ("eps", "model_error_e", "variant"))
        (out / "sweep_model_error_mean.tsv").write_text(
            evaluation.rows_to_table(
                agg, ("eps", "model_error_e", "variant", "beta", "completion")))
    elif args.which == "samples":
        budgets = cfg.ablation_budgets
        if budgets is None:
            full = learner.iterations * learner.episodes_per_iter * \
                int(np.ceil(scn.horizon / bb.dt))
            budgets = (0, full // 10, full)
        rows = evaluation.sweep_sample_budget(list(budgets), learner, scn, bb,
                                              f_nom, seeds, cfg.eval_episodes)
        (out / "sweep_samples.tsv").write_text(
            evaluation.rows_to_table(rows, SWEEP_BUDGET_COLUMNS))
        agg = _aggregate_sweep(rows, ("budget",))
        (out / "sweep_samples_mean.tsv").write_text(
            evaluation.rows_to_table(agg, ("budget", "beta", "completion")))
    else:  # variant comparison at the base system
        rows = evaluation.sweep_model_error([0.0], learner, scn, bb, f_nom,
                                            seeds, cfg.eval_episodes,
                                            variants=("lp1", "lp2", "lp3"))
        (out / "sweep_variant.tsv").write_text(
            evaluation.rows_to_table(rows, SWEEP_ERR_COLUMNS))
    print(f"ablation {args.which} written to {out}")
    return EXIT_OK


def _aggregate_sweep(rows, group_cols):
    groups = {}
    for row in rows:
        groups.setdefault(tuple(row[c] for c in group_cols), []).append(row)
    out = []
    for key, members in sorted(groups.items(), key=lambda kv: str(kv[0])):
        agg = dict(zip(group_cols, key))
        betas = [m["beta"] for m in members if m["beta"] is not None]
        agg["beta"] = float(np.mean(betas)) if betas else None
        agg["completion"] = float(np.mean([m["completion"] for m in members]))
        out.append(agg)
    return out


def cmd_audit(cfg: RunConfig, args) -> int:
    out = Path(cfg.out)
    echo_config(cfg, out)
    barrier, controller, learner, env_kind = _load_nets(args.checkpoint)
    if env_kind != cfg.env:
        raise ConfigError(f"checkpoint was trained for {env_kind!r}")
    scn = build_scenario(cfg)
    bb = build_blackbox(cfg, seed=cfg.seed)
    from .cbflearn import policy_fn
    logs = []
    total = 0
    i = 0
    while total < args.samples:
        rng = np.random.default_rng(np.random.SeedSequence((cfg.seed, 31, i)))
        world = sample_initial(scn, rng)
        ref = plan_reference(world, scn, rng)
        log = run_episode(policy_fn(controller), world, scn, ref,
                          bb.fresh(seed=int(rng.integers(2 ** 62))))
        logs.append(log)
        total += max(len(log) - 1, 0)
        i += 1
    data = TrainData.from_logs(logs)
    result = evaluation.audit_cbf(barrier, data, learner.alpha_gain, bb.dt)
    result["samples"] = len(data)
    result["episodes"] = len(logs)
    (out / "audit.json").write_text(
        json.dumps(result, indent=1, sort_keys=True) + "\n")
    print(f"audit over {len(data)} samples: "
          f"init={result['init_rate']:.4f} danger={result['danger_rate']:.4f} "
          f"rate={result['rate_rate'] if result['rate_rate'] is not None else 'NA'}")
    return EXIT_OK


COMMANDS = {
    "fit-nominal": cmd_fit_nominal,
    "train": cmd_train,
    "eval": cmd_eval,
    "ablate": cmd_ablate,
    "audit": cmd_audit,
}


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    try:
        cfg = load_config(args.config, _overrides(args))
    except (ConfigError, FileNotFoundError, json.JSONDecodeError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    try:
        return COMMANDS[args.command](cfg, args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except NonFiniteGradient as exc:
        print(f"numerical abort: {exc}; last checkpoint kept", file=sys.stderr)
        return EXIT_NUMERIC
    except CheckpointError as exc:
        print(f"checkpoint error: {exc}", file=sys.stderr)
        return EXIT_IO
    except OSError as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
