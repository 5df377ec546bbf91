"""Safety/goal metrics, barrier-condition audits, and ablation sweeps.

Safety rates are discrete-time renderings of the time-proportion integrals
(one sample per simulator step).  Relative safety compares a policy against
the nominal controller on the same world, so evaluation always rolls the
pair from identical initial conditions.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .cbflearn import LearnerConfig, TrainData, policy_fn, run_episode, train
from .dynamics import make_perturbed_truth
from .env import EpisodeLog, Scenario, control_limits, sample_initial
from .nominal import NominalModel, plan_reference, residual_ratio

BASELINE_ALREADY_SAFE = None  # rel_safety sentinel, excluded from aggregation


def abs_safety(log: EpisodeLog) -> float:
    """Fraction of logged steps spent outside the dangerous set."""
    if len(log) == 0:
        raise ValueError("empty episode log")
    return 1.0 - float(np.mean(log.danger_flag))


def rel_safety(alpha1: float, alpha2: float):
    """(a1 - a2) / (1 - a2); None when the baseline is already safe."""
    if alpha2 >= 1.0:
        return BASELINE_ALREADY_SAFE
    return (alpha1 - alpha2) / (1.0 - alpha2)


def tracking_error(log: EpisodeLog, ref=None) -> float:
    """Time-averaged squared position deviation from the reference."""
    pos_dim = log.ref_state.shape[1] // 2
    pos = log.state[:, :pos_dim]
    if ref is None:
        ref_pos = log.ref_state[:, :pos_dim]
    else:
        ref_pos = np.array([ref.position(t) for t in log.t])
    return float(np.mean(np.sum((pos - ref_pos) ** 2, axis=1)))


def model_error(f_nom, probe_logs: list[EpisodeLog], angle_dims=()) -> float:
    """Normalized error of the nominal derivative against finite differences
    of logged trajectories: E||sdot - sdot_nom|| / E||sdot||."""
    targets, preds = [], []
    from .nominal import finite_diff_targets
    for log in probe_logs:
        if len(log) < 2:
            continue
        targets.append(finite_diff_targets(log.state[:-1], log.state[1:],
                                           log.dt, angle_dims))
        preds.append(f_nom.apply(log.state[:-1], log.control[:-1]))
    if not targets:
        raise ValueError("no usable probe steps")
    return residual_ratio(np.concatenate(targets), np.concatenate(preds))


@dataclass
class RunMetrics:
    abs_safety: float
    completed: bool
    tracking_error: float
    episode_len: int
    violations: dict = field(default_factory=dict)


def completion(log: EpisodeLog) -> bool:
    """Goal reached before timeout and not in danger at arrival."""
    return log.status == "reached_goal" and not bool(log.danger_flag[-1])


def run_metrics(log: EpisodeLog, barrier=None, alpha_gain: float = 1.0) -> RunMetrics:
    violations = {}
    if barrier is not None:
        violations = audit_log(barrier, log, alpha_gain)
    return RunMetrics(abs_safety=abs_safety(log), completed=completion(log),
                      tracking_error=tracking_error(log),
                      episode_len=len(log), violations=violations)


# -- barrier-condition audits ---------------------------------------------------


def audit_cbf(barrier, data: TrainData, alpha_gain: float, dt: float) -> dict:
    """Violation rates of the three barrier conditions on labeled samples.

    Condition 3 uses true logged successors, so the audit is independent of
    the nominal model.
    """
    h = barrier.forward(data.obs)[:, 0]
    out = {}
    s0 = data.in_s0
    sd = data.in_sd
    out["init_count"] = int(s0.sum())
    out["danger_count"] = int(sd.sum())
    out["init_rate"] = float(np.mean(h[s0] < 0.0)) if s0.any() else 0.0
    out["danger_rate"] = float(np.mean(h[sd] >= 0.0)) if sd.any() else 0.0
    sp = h >= 0.0
    out["safe_count"] = int(sp.sum())
    if sp.any():
        h_next = barrier.forward(data.obs_next[sp])[:, 0]
        cond = (h_next - h[sp]) / dt + alpha_gain * h[sp]
        out["rate_rate"] = float(np.mean(cond < 0.0))
    else:
        out["rate_rate"] = None  # condition-3 rate absent: empty safe set
    return out


def audit_log(barrier, log: EpisodeLog, alpha_gain: float) -> dict:
    if len(log) < 2:
        return {}
    return audit_cbf(barrier, TrainData.from_logs([log]), alpha_gain, log.dt)


# -- paired policy evaluation -----------------------------------------------------


@dataclass
class AggregateReport:
    env_kind: str
    npc_mode: str
    runs: int
    excluded_runs: int       # baseline already safe: beta undefined
    beta_mean: float
    beta_std: float
    completion_rate: float
    completion_nominal: float
    tracking_mean: float
    tracking_std: float
    tracking_nominal: float
    abs_safety_mean: float
    abs_safety_nominal: float
    model_error_e: float

    def to_dict(self) -> dict:
        return dict(self.__dict__)


def evaluation_run(controller, scn: Scenario, bb, seed: int, index: int,
                   barrier=None, alpha_gain: float = 1.0) -> dict:
    """One paired (policy, nominal) rollout from a shared world."""
    rng = np.random.default_rng(np.random.SeedSequence((seed, 7, index)))
    world = sample_initial(scn, rng)
    ref = plan_reference(world, scn, rng)
    bb_seed = int(rng.integers(2 ** 62))
    log_pi = run_episode(policy_fn(controller), world, scn, ref,
                         bb.fresh(seed=bb_seed))
    log_nom = run_episode(None, world, scn, ref, bb.fresh(seed=bb_seed))
    m_pi = run_metrics(log_pi, barrier, alpha_gain)
    m_nom = run_metrics(log_nom)
    beta = rel_safety(m_pi.abs_safety, m_nom.abs_safety)
    return {
        "index": index,
        "beta": beta,
        "completed": m_pi.completed,
        "completed_nominal": m_nom.completed,
        "tracking": m_pi.tracking_error,
        "tracking_nominal": m_nom.tracking_error,
        "abs_safety": m_pi.abs_safety,
        "abs_safety_nominal": m_nom.abs_safety,
        "episode_len": m_pi.episode_len,
        "violations": m_pi.violations,
    }


def aggregate_runs(rows: list[dict], scn: Scenario, npc_mode: str,
                   model_error_e: float = float("nan")) -> AggregateReport:
    betas = [r["beta"] for r in rows if r["beta"] is not None]
    excluded = len(rows) - len(betas)
    return AggregateReport(
        env_kind=scn.kind, npc_mode=npc_mode, runs=len(rows),
        excluded_runs=excluded,
        beta_mean=float(np.mean(betas)) if betas else float("nan"),
        beta_std=float(np.std(betas)) if len(betas) >= 2 else 0.0,
        completion_rate=float(np.mean([r["completed"] for r in rows])),
        completion_nominal=float(np.mean([r["completed_nominal"] for r in rows])),
        tracking_mean=float(np.mean([r["tracking"] for r in rows])),
        tracking_std=float(np.std([r["tracking"] for r in rows]))
        if len(rows) >= 2 else 0.0,
        tracking_nominal=float(np.mean([r["tracking_nominal"] for r in rows])),
        abs_safety_mean=float(np.mean([r["abs_safety"] for r in rows])),
        abs_safety_nominal=float(np.mean([r["abs_safety_nominal"] for r in rows])),
        model_error_e=model_error_e)


def evaluate_policy(controller, scn: Scenario, bb, n_runs: int, seed: int,
                    npc_mode: str, barrier=None, alpha_gain: float = 1.0,
                    model_error_e: float = float("nan")):
    from dataclasses import replace
    scn_mode = replace(scn, npc_mode=npc_mode)
    rows = [evaluation_run(controller, scn_mode, bb, seed, i, barrier,
                           alpha_gain) for i in range(n_runs)]
    return aggregate_runs(rows, scn, npc_mode, model_error_e), rows


# -- probes and sweeps ----------------------------------------------------------


def collect_probe_logs(scn: Scenario, bb, seed: int, n_episodes: int = 4,
                       steps: int = 200) -> list[EpisodeLog]:
    """Short random-control episodes used for model-error measurement."""
    from dataclasses import replace
    lim = control_limits(scn)
    logs = []
    horizon = min(scn.horizon, steps * bb.dt)
    scn_probe = replace(scn, npc_count=0, horizon=horizon, min_goal_dist=0.0)
    for i in range(n_episodes):
        rng = np.random.default_rng(np.random.SeedSequence((seed, 11, i)))
        world = sample_initial(scn_probe, rng)
        ref = plan_reference(world, scn_probe, rng)
        hold = {"u": rng.uniform(-lim, lim), "k": 0}

        def random_controls(obs, state, t, rng=rng, hold=hold):
            if hold["k"] % 5 == 0:
                hold["u"] = rng.uniform(-lim, lim)
            hold["k"] += 1
            return hold["u"]

        logs.append(run_episode(random_controls, world, scn_probe, ref,
                                bb.fresh(seed=int(rng.integers(2 ** 62)))))
    return logs


def angle_dims_for(scn: Scenario):
    return (2,) if scn.kind == "valley" else ()


def measured_model_error(bb, f_nom, scn: Scenario, seed: int = 0) -> float:
    logs = collect_probe_logs(scn, bb, seed)
    return model_error(f_nom, logs, angle_dims_for(scn))


def calibrate_eps(bb, f_nom, scn: Scenario, target_e: float, seed: int = 0,
                  tol: float = 0.01, max_iter: int = 40) -> float:
    """Perturbation gain whose measured model error hits target_e."""
    base = measured_model_error(bb, f_nom, scn, seed)
    if target_e <= base:
        return 0.0
    lo, hi = 0.0, 1.0
    while measured_model_error(make_perturbed_truth(bb, hi), f_nom, scn,
                               seed) < target_e:
        hi *= 2.0
        if hi > 64.0:
            raise RuntimeError("cannot reach requested model error")
    for _ in range(max_iter):
        mid = 0.5 * (lo + hi)
        e = measured_model_error(make_perturbed_truth(bb, mid), f_nom, scn,
                                 seed)
        if abs(e - target_e) < tol:
            return mid
        if e < target_e:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)


def sweep_model_error(eps_grid, cfg: LearnerConfig, scn: Scenario, bb, f_nom,
                      seeds, n_eval_runs: int = 10,
                      variants=("lp2", "lp3")) -> list[dict]:
    """Retrain per (eps, variant, seed) on the perturbed truth with the
    baseline nominal model kept fixed; evaluate relative safety."""
    if list(eps_grid) != sorted(eps_grid) or min(eps_grid) < 0:
        raise ValueError("eps grid must be nonnegative ascending")
    rows = []
    for eps in eps_grid:
        bb_eps = make_perturbed_truth(bb, eps)
        e = measured_model_error(bb_eps, f_nom, scn)
        for variant in variants:
            from dataclasses import replace as dc_replace
            cfg_v = dc_replace(cfg, loss_variant=variant)
            for seed in seeds:
                res = train(cfg_v, scn, bb_eps, f_nom, seed=seed)
                report, _ = evaluate_policy(
                    res.controller, scn, bb_eps, n_eval_runs, seed,
                    npc_mode="static", barrier=res.barrier,
                    alpha_gain=cfg.alpha_gain, model_error_e=e)
                rows.append({"eps": eps, "model_error_e": e,
                             "variant": variant, "seed": seed,
                             "beta": report.beta_mean,
                             "completion": report.completion_rate,
                             "runs": report.runs,
                             "excluded": report.excluded_runs})
    return rows


def sweep_sample_budget(budgets, cfg: LearnerConfig, scn: Scenario, bb,
                        f_nom, seeds, n_eval_runs: int = 10) -> list[dict]:
    """Train with capped total collected samples; report beta per budget."""
    if list(budgets) != sorted(budgets):
        raise ValueError("budget grid must be ascending")
    rows = []
    for budget in budgets:
        for seed in seeds:
            from dataclasses import replace as dc_replace
            cfg_b = dc_replace(cfg, sample_budget=int(budget))
            res = train(cfg_b, scn, bb, f_nom, seed=seed)
            report, _ = evaluate_policy(
                res.controller, scn, bb, n_eval_runs, seed,
                npc_mode="static", barrier=res.barrier,
                alpha_gain=cfg.alpha_gain)
            rows.append({"budget": int(budget), "samples": res.samples,
                         "seed": seed, "beta": report.beta_mean,
                         "completion": report.completion_rate,
                         "runs": report.runs,
                         "excluded": report.excluded_runs})
    return rows


def rows_to_table(rows: list[dict], columns) -> str:
    """Delimiter-separated table with exact decimal floats."""
    lines = ["\t".join(columns)]
    for row in rows:
        cells = []
        for col in columns:
            v = row.get(col)
            if v is None:
                cells.append("NA")
            elif isinstance(v, (bool, np.bool_)):
                cells.append(str(int(v)))
            elif isinstance(v, (int, np.integer)):
                cells.append(str(int(v)))
            elif isinstance(v, str):
                cells.append(v)
            else:
                cells.append(format(float(v), ".17g"))
        lines.append("\t".join(cells))
    return "\n".join(lines) + "\n"
