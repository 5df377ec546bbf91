"""Empirical losses enforcing the barrier conditions and goal following.

The three barrier conditions turn into hinge penalties over labeled
partitions of a batch: nonnegativity on comfortable-clearance states,
negativity on danger states, and a decrease-rate condition on the current
safe set {h >= 0}.  The decrease rate can be approximated three ways:

- "lp1": from the logged successor observation only.  Trains the barrier
  but carries no gradient path to the controller.
- "lp2": from the nominal model's predicted successor only.  Differentiable
  end to end but its value inherits the model error.
- "lp3": from a corrected successor whose forward value is exactly the
  logged successor while its backward path runs through the nominal
  prediction.  Value of "lp1", gradients of "lp2".

"whitebox" is the "lp2" mechanics fed with a differentiable true model
(test-only reference).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..diffcore import Mlp, Tape, forward_mlp
from .compose import ObsComposer
from .config import LearnerConfig
from .data import TrainData


def class_k(h, gain: float):
    """Linear class-K function: strictly increasing, zero at zero."""
    return gain * h


def _zero(tape: Tape) -> int:
    return tape.const(np.zeros(()))


def loss_init(tape: Tape, h_node: int, idx: np.ndarray) -> int:
    """mean over the initial-set partition of max(0, -h)."""
    if len(idx) == 0:
        return _zero(tape)
    h = tape.gather_rows(h_node, idx)
    return tape.mean(tape.max0(tape.neg(h)))


def loss_danger(tape: Tape, h_node: int, idx: np.ndarray) -> int:
    """mean over the danger partition of max(0, h)."""
    if len(idx) == 0:
        return _zero(tape)
    return tape.mean(tape.max0(tape.gather_rows(h_node, idx)))


def rate_hinge(tape: Tape, h_next: int, h_now: int, dt: float,
               gain: float) -> int:
    """mean of max(0, -(h_next - h_now)/dt - gain * h_now)."""
    hdot = tape.scale(tape.sub(h_next, h_now), 1.0 / dt)
    return tape.mean(tape.max0(tape.neg(
        tape.add(hdot, tape.scale(h_now, gain)))))


def predicted_next_obs(tape: Tape, batch: TrainData, sp_idx: np.ndarray,
                       u_node: int, f_nom, composer: ObsComposer,
                       dt: float) -> int:
    """Observation after one nominal-model step of the ego from s_t."""
    s_t = batch.state[sp_idx]
    deriv = f_nom.apply_on_tape(tape, s_t, u_node)
    s_nom = tape.add(tape.const(s_t), tape.scale(deriv, dt))
    consts = composer.constants(batch.obs[sp_idx], s_t)
    return composer.build(tape, s_nom, consts)


def corrected_successor(tape: Tape, obs_next_logged: np.ndarray,
                        obs_nom: int) -> int:
    """Successor with the logged value and the nominal gradient path.

    Built as logged + (obs_nom - detach(obs_nom)) so the forward value is
    the logged successor bit-for-bit while the backward pass sees d/d(obs_nom) = 1.
    """
    residual = tape.sub(obs_nom, tape.detach(obs_nom))
    return tape.add(tape.const(obs_next_logged), residual)


def loss_deriv_logged(tape: Tape, barrier: Mlp, bh: int, batch: TrainData,
                      sp_idx: np.ndarray, h_sp: int,
                      cfg: LearnerConfig) -> int:
    if len(sp_idx) == 0:
        return _zero(tape)
    h_next = forward_mlp(barrier, batch.obs_next[sp_idx], tape, bh)
    return rate_hinge(tape, h_next, h_sp, cfg.dt, cfg.alpha_gain)


def loss_deriv_nominal(tape: Tape, barrier: Mlp, bh: int, batch: TrainData,
                       sp_idx: np.ndarray, h_sp: int, u_node: int, f_nom,
                       composer: ObsComposer, cfg: LearnerConfig) -> int:
    if len(sp_idx) == 0:
        return _zero(tape)
    obs_nom = predicted_next_obs(tape, batch, sp_idx, u_node, f_nom,
                                 composer, cfg.dt)
    h_next = forward_mlp(barrier, obs_nom, tape, bh)
    return rate_hinge(tape, h_next, h_sp, cfg.dt, cfg.alpha_gain)


def loss_deriv_corrected(tape: Tape, barrier: Mlp, bh: int, batch: TrainData,
                         sp_idx: np.ndarray, h_sp: int, u_node: int, f_nom,
                         composer: ObsComposer, cfg: LearnerConfig) -> int:
    if len(sp_idx) == 0:
        return _zero(tape)
    obs_nom = predicted_next_obs(tape, batch, sp_idx, u_node, f_nom,
                                 composer, cfg.dt)
    sbar = corrected_successor(tape, batch.obs_next[sp_idx], obs_nom)
    h_next = forward_mlp(barrier, sbar, tape, bh)
    return rate_hinge(tape, h_next, h_sp, cfg.dt, cfg.alpha_gain)


def loss_goal(tape: Tape, u_node: int, u_nom: np.ndarray) -> int:
    """Mean squared control deviation from the nominal controller."""
    n = len(u_nom)
    if n == 0:
        return _zero(tape)
    d = tape.sub(u_node, tape.const(u_nom))
    return tape.scale(tape.sum(tape.mul(d, d)), 1.0 / n)


@dataclass
class LossBreakdown:
    root: int
    parts: dict            # name -> node handle
    values: dict           # name -> float
    sp_idx: np.ndarray
    barrier_handle: int
    controller_handle: int


def total_loss(tape: Tape, barrier: Mlp, controller: Mlp, f_nom,
               batch: TrainData, cfg: LearnerConfig, composer: ObsComposer,
               bh: int | None = None, ch: int | None = None) -> LossBreakdown:
    """Summed objective; safe-set membership uses the current barrier."""
    bh = tape.param(barrier.params) if bh is None else bh
    ch = tape.param(controller.params) if ch is None else ch
    h_all = forward_mlp(barrier, batch.obs, tape, bh)
    h_vals = tape.value(h_all)[:, 0]
    s0_idx = np.nonzero(batch.in_s0)[0]
    sd_idx = np.nonzero(batch.in_sd)[0]
    sp_idx = np.nonzero(h_vals >= 0.0)[0]

    l0 = loss_init(tape, h_all, s0_idx)
    ld = loss_danger(tape, h_all, sd_idx)

    if len(sp_idx):
        h_sp = tape.gather_rows(h_all, sp_idx)
        u_sp = forward_mlp(controller, batch.obs[sp_idx], tape, ch)
        if cfg.loss_variant == "lp1":
            lder = loss_deriv_logged(tape, barrier, bh, batch, sp_idx, h_sp, cfg)
        elif cfg.loss_variant in ("lp2", "whitebox"):
            lder = loss_deriv_nominal(tape, barrier, bh, batch, sp_idx, h_sp,
                                      u_sp, f_nom, composer, cfg)
        else:
            lder = loss_deriv_corrected(tape, barrier, bh, batch, sp_idx, h_sp,
                                        u_sp, f_nom, composer, cfg)
        lg = loss_goal(tape, u_sp, batch.u_nom[sp_idx])
    else:
        lder = _zero(tape)
        lg = _zero(tape)

    root = tape.add(tape.add(l0, ld), lder)
    if cfg.goal_weight != 0.0:
        root = tape.add(root, tape.scale(lg, cfg.goal_weight))

    parts = {"init": l0, "danger": ld, "deriv": lder, "goal": lg}
    values = {k: float(tape.value(v)) for k, v in parts.items()}
    values["total"] = float(tape.value(root))
    return LossBreakdown(root=root, parts=parts, values=values, sp_idx=sp_idx,
                         barrier_handle=bh, controller_handle=ch)
