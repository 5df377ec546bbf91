"""Joint training of the barrier and controller networks.

Per iteration: collect K fresh on-policy episodes, discard the previous
dataset, then run a fixed number of Adam steps on batches drawn from the
new data.  All randomness is derived per-iteration from the master seed,
so a run resumed from any checkpoint continues bit-identically.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..diffcore import Mlp, adam_init, adam_step, init_mlp
from ..diffcore.checkpoint import (
    adam_from_doc, adam_to_doc, mlp_from_doc, mlp_to_doc, read_doc, write_doc,
)
from ..diffcore.tape import Tape
from ..env import Scenario, control_limits, obs_layout, obs_scale, sample_initial
from ..nominal import plan_reference
from .compose import ObsComposer
from .config import LearnerConfig
from .data import TrainData, sample_batch
from .episodes import policy_fn, run_episode
from .losses import total_loss

HISTORY_COLUMNS = (
    "iteration", "samples", "loss_total", "loss_init", "loss_danger",
    "loss_deriv", "loss_goal", "sp_frac", "data_danger_frac", "data_s0_frac",
    "collect_completed", "collect_danger_frac",
)


def init_nets(scn: Scenario, cfg: LearnerConfig,
              rng: np.random.Generator) -> tuple[Mlp, Mlp]:
    """Barrier: tanh hidden, affine scalar output biased safe-side.
    Controller: relu hidden, tanh output scaled to actuator limits."""
    lay = obs_layout(scn)
    scale = obs_scale(scn)
    lim = control_limits(scn)
    barrier = init_mlp([lay.total, *cfg.cbf_hidden, 1], rng,
                       activation="tanh", input_scale=scale, out_bias=0.1)
    controller = init_mlp([lay.total, *cfg.ctrl_hidden, lim.size], rng,
                          activation="relu", output_activation="tanh",
                          input_scale=scale, output_scale=lim)
    return barrier, controller


def update(barrier: Mlp, controller: Mlp, data: TrainData, cfg: LearnerConfig,
           opt_b, opt_c, rng: np.random.Generator, f_nom,
           composer: ObsComposer) -> list[dict]:
    """update_iters Adam steps on the total loss; returns per-step telemetry.

    Safe-set membership is re-evaluated against the current barrier on
    every batch.  Non-finite gradients abort with a diagnostic.
    """
    telemetry = []
    for _ in range(cfg.update_iters):
        batch = sample_batch(data, cfg.batch_size, rng)
        tape = Tape()
        bh = tape.param(barrier.params)
        ch = tape.param(controller.params)
        out = total_loss(tape, barrier, controller, f_nom, batch, cfg,
                         composer, bh=bh, ch=ch)
        grad = tape.backward(out.root)
        barrier.params = adam_step(barrier.params,
                                   tape.grad_slice(bh, grad), opt_b)
        controller.params = adam_step(controller.params,
                                      tape.grad_slice(ch, grad), opt_c)
        row = dict(out.values)
        row["sp_frac"] = len(out.sp_idx) / max(len(batch), 1)
        telemetry.append(row)
    return telemetry


@dataclass
class TrainResult:
    barrier: Mlp
    controller: Mlp
    history: list
    opt_b: object
    opt_c: object
    samples: int
    next_iteration: int


def train(cfg: LearnerConfig, scn: Scenario, bb, f_nom, seed: int,
          out_dir=None, start_iteration: int = 0, nets=None, opts=None,
          samples: int = 0, allow_whitebox: bool = False) -> TrainResult:
    """Iterate {collect K episodes; update} for N iterations."""
    if cfg.loss_variant == "whitebox" and not allow_whitebox:
        raise ValueError("whitebox loss variant requires derivative access "
                         "and is only for tests")
    if abs(cfg.dt - bb.dt) > 1e-12:
        raise ValueError(f"learning interval {cfg.dt} != simulator step {bb.dt}")
    if nets is None:
        barrier, controller = init_nets(
            scn, cfg, np.random.default_rng(np.random.SeedSequence((seed, 0))))
    else:
        barrier, controller = nets
    if opts is None:
        opt_b = adam_init(len(barrier.params), lr=cfg.learning_rate)
        opt_c = adam_init(len(controller.params), lr=cfg.learning_rate)
    else:
        opt_b, opt_c = opts
    composer = ObsComposer(scn.kind, obs_layout(scn), scn.npc_count)

    history = []
    next_i = start_iteration
    for i in range(start_iteration, cfg.iterations):
        if cfg.sample_budget is not None and samples >= cfg.sample_budget:
            break
        logs = []
        for j in range(cfg.episodes_per_iter):
            ep_rng = np.random.default_rng(np.random.SeedSequence((seed, 1, i, j)))
            world = sample_initial(scn, ep_rng)
            ref = plan_reference(world, scn, ep_rng)
            ep_bb = bb.fresh(seed=int(ep_rng.integers(2 ** 62)))
            logs.append(run_episode(policy_fn(controller), world, scn, ref,
                                    ep_bb))
        data = TrainData.from_logs(logs)
        samples += sum(len(l) for l in logs)
        batch_rng = np.random.default_rng(np.random.SeedSequence((seed, 2, i)))
        telem = update(barrier, controller, data, cfg, opt_b, opt_c,
                       batch_rng, f_nom, composer)

        row = {"iteration": i, "samples": samples}
        for key in ("total", "init", "danger", "deriv", "goal"):
            row[f"loss_{key}"] = float(np.mean([t[key] for t in telem]))
        row["sp_frac"] = float(np.mean([t["sp_frac"] for t in telem]))
        row["data_danger_frac"] = float(np.mean(data.in_sd))
        row["data_s0_frac"] = float(np.mean(data.in_s0))
        row["collect_completed"] = float(np.mean(
            [log.status == "reached_goal" for log in logs]))
        row["collect_danger_frac"] = float(np.mean(
            [log.danger_flag.mean() for log in logs]))
        history.append(row)

        if out_dir is not None and cfg.checkpoint_interval > 0 \
                and (i + 1) % cfg.checkpoint_interval == 0:
            save_checkpoint(f"{out_dir}/checkpoint.json", barrier, controller,
                            opt_b, opt_c, i + 1, cfg, seed, scn.kind, samples)
        next_i = i + 1
    if out_dir is not None:
        save_checkpoint(f"{out_dir}/checkpoint.json", barrier, controller,
                        opt_b, opt_c, next_i, cfg, seed, scn.kind, samples)
    return TrainResult(barrier=barrier, controller=controller, history=history,
                       opt_b=opt_b, opt_c=opt_c, samples=samples,
                       next_iteration=next_i)


# -- persistence ---------------------------------------------------------------


def save_checkpoint(path, barrier, controller, opt_b, opt_c, iteration, cfg,
                    seed, env_kind, samples):
    write_doc(path, "training", {
        "barrier": mlp_to_doc(barrier),
        "controller": mlp_to_doc(controller),
        "opt_b": adam_to_doc(opt_b),
        "opt_c": adam_to_doc(opt_c),
        "iteration": int(iteration),
        "seed": int(seed),
        "env_kind": env_kind,
        "samples": int(samples),
        "learner_config": cfg.to_dict(),
    })


def load_checkpoint(path):
    doc = read_doc(path, expect_kind="training")
    return {
        "barrier": mlp_from_doc(doc["barrier"]),
        "controller": mlp_from_doc(doc["controller"]),
        "opt_b": adam_from_doc(doc["opt_b"]),
        "opt_c": adam_from_doc(doc["opt_c"]),
        "iteration": int(doc["iteration"]),
        "seed": int(doc["seed"]),
        "env_kind": doc["env_kind"],
        "samples": int(doc["samples"]),
        "learner_config": LearnerConfig.from_dict(doc["learner_config"]),
    }


def history_to_table(history: list[dict], variant: str) -> str:
    """Training history as a TSV table with a variant header comment."""
    lines = [f"# loss_variant={variant}", "\t".join(HISTORY_COLUMNS)]
    for row in history:
        cells = []
        for col in HISTORY_COLUMNS:
            v = row[col]
            cells.append(str(v) if isinstance(v, (int, np.integer))
                         else format(float(v), ".17g"))
        lines.append("\t".join(cells))
    return "\n".join(lines) + "\n"
