"""Closed-loop episode rollout through the black-box stepper.

The ego transitions exclusively through ``bb.step``; NPCs advance through
the environment's own fleet logic.  Passing ``controller_fn=None`` rolls
out the nominal controller itself (bit-identical to the logged ``u_nom``
stream, which evaluation relies on for paired comparisons).
"""

from __future__ import annotations

import numpy as np

from ..env import (
    EpisodeLog, Scenario, World, advance_npcs, danger, in_initial_set,
    observe, reached_goal,
)
from ..nominal import RefTrajectory, nominal_control


def run_episode(controller_fn, world0: World, scn: Scenario,
                ref: RefTrajectory, bb) -> EpisodeLog:
    """Roll one episode; terminates on goal, timeout, or propagated fault.

    ``controller_fn(obs, state, t) -> control`` or None for nominal-only.
    """
    world = world0.copy()
    dt = bb.dt
    max_steps = int(np.ceil(scn.horizon / dt - 1e-9))
    ks, states, obss, us, dangers, s0s, refs, unoms = \
        [], [], [], [], [], [], [], []
    status = "timeout"
    for k in range(max_steps):
        t = k * dt
        obs = observe(world, scn, ref.position(t))
        u_nom = nominal_control(world.ego, ref, t, scn.kind)
        u = u_nom if controller_fn is None else \
            np.asarray(controller_fn(obs, world.ego, t), dtype=np.float64)
        ks.append(k)
        states.append(world.ego.copy())
        obss.append(obs)
        us.append(u)
        dangers.append(danger(world, scn))
        s0s.append(in_initial_set(world, scn))
        refs.append(ref.ref_state(t))
        unoms.append(u_nom)

        ego_next = bb.step(world.ego, u)
        world = advance_npcs(world, scn, dt)
        world.ego = ego_next
        if reached_goal(world, scn):
            status = "reached_goal"
            break
    return EpisodeLog(
        dt=dt, kind=scn.kind, status=status,
        step_index=np.asarray(ks, dtype=np.intp),
        state=np.asarray(states), obs=np.asarray(obss),
        control=np.asarray(us),
        danger_flag=np.asarray(dangers, dtype=bool),
        in_s0=np.asarray(s0s, dtype=bool),
        ref_state=np.asarray(refs), u_nom=np.asarray(unoms))


def policy_fn(controller):
    """Adapter turning a controller network into a rollout callable."""
    def fn(obs, _state, _t):
        return controller.forward(obs)
    return fn
