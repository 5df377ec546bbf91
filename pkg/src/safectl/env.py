"""CityEnv / ValleyEnv scenario logic.

A world holds one controlled ego vehicle, an NPC fleet with pre-planned
waypoints, and a goal.  NPCs never react to the ego.  The observation is a
fixed-length flat vector in component-blocked layout:

    [ ego state | rel-pos x slots(8) | rel-pos y | (rel-pos z) |
      rel-vel x slots(8) | ... | ref-point rel position ]

with the 8 nearest NPCs sorted by ascending distance (ties by NPC index)
and zero padding when fewer NPCs exist.  Vehicles collide when their
centers come within r_col, so a single vehicle keeps r_col/2 clearance
from buildings and arena bounds.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from . import dynamics
from .dynamics import (
    DRONE_CONTROL_DIM, DRONE_STATE_DIM, SHIP_CONTROL_DIM, SHIP_STATE_DIM,
    DroneParams, ShipParams, wrap_angle,
)

N_OBS_SLOTS = 8


class SamplingError(RuntimeError):
    """Rejection sampling exceeded its retry cap (arena too dense)."""


@dataclass
class Scenario:
    kind: str                      # "city" | "valley"
    npc_count: int
    bounds_lo: np.ndarray
    bounds_hi: np.ndarray
    r_col: float
    r_goal: float
    horizon: float                 # episode horizon T, seconds
    npc_mode: str = "static"       # "static" | "moving"
    min_goal_dist: float = 0.0
    corridor_frac: float = 0.0     # fraction of NPCs biased near start->goal
    corridor_radius: float = 0.0
    npc_speed: float = 1.0
    s0_clearance: float = 2.0      # label factor: in_s0 needs >= factor * r_col
    seed: int = 0                  # fixes building heights for this scenario
    buildings: np.ndarray = field(default_factory=lambda: np.zeros((0, 2, 3)))

    @property
    def pos_dim(self) -> int:
        return 3 if self.kind == "city" else 2

    @property
    def state_dim(self) -> int:
        return DRONE_STATE_DIM if self.kind == "city" else SHIP_STATE_DIM

    @property
    def control_dim(self) -> int:
        return DRONE_CONTROL_DIM if self.kind == "city" else SHIP_CONTROL_DIM


def city_scenario(npc_count: int = 32, npc_mode: str = "static",
                  seed: int = 0, corridor_frac: float = 0.75,
                  corridor_radius: float = 1.2) -> Scenario:
    scn = Scenario(
        kind="city", npc_count=npc_count,
        bounds_lo=np.array([0.0, 0.0, 0.0]),
        bounds_hi=np.array([16.0, 16.0, 6.0]),
        r_col=0.5, r_goal=1.0, horizon=40.0, npc_mode=npc_mode,
        min_goal_dist=9.0, corridor_frac=corridor_frac,
        corridor_radius=corridor_radius, npc_speed=1.2, seed=seed)
    scn.buildings = _city_buildings(seed)
    return scn


def valley_scenario(npc_count: int = 8, npc_mode: str = "static",
                    seed: int = 0, corridor_frac: float = 0.6,
                    corridor_radius: float = 6.0) -> Scenario:
    return Scenario(
        kind="valley", npc_count=npc_count,
        bounds_lo=np.array([0.0, 0.0]),
        bounds_hi=np.array([160.0, 100.0]),
        r_col=4.0, r_goal=8.0, horizon=120.0, npc_mode=npc_mode,
        min_goal_dist=60.0, corridor_frac=corridor_frac,
        corridor_radius=corridor_radius, npc_speed=1.0, seed=seed,
        buildings=np.zeros((0, 2, 2)))


def _city_buildings(seed: int) -> np.ndarray:
    """3x3 grid of boxes; heights are fixed per scenario seed."""
    rng = np.random.default_rng(seed)
    half = 0.8
    boxes = []
    for cx in (4.0, 8.0, 12.0):
        for cy in (4.0, 8.0, 12.0):
            h = rng.uniform(1.5, 4.5)
            boxes.append([[cx - half, cy - half, 0.0], [cx + half, cy + half, h]])
    return np.asarray(boxes)


@dataclass
class World:
    ego: np.ndarray                 # (state_dim,)
    npcs: np.ndarray                # (N, state_dim)
    goal: np.ndarray                # (pos_dim,)
    npc_waypoints: np.ndarray       # (N, W, pos_dim)
    npc_wp_idx: np.ndarray          # (N,)

    def copy(self) -> "World":
        return World(self.ego.copy(), self.npcs.copy(), self.goal.copy(),
                     self.npc_waypoints.copy(), self.npc_wp_idx.copy())


# -- geometry ----------------------------------------------------------------


def positions(states: np.ndarray, scn: Scenario) -> np.ndarray:
    return states[..., :scn.pos_dim]


def world_velocity(states: np.ndarray, scn: Scenario) -> np.ndarray:
    """Planar/spatial velocity in the world frame."""
    if scn.kind == "city":
        return states[..., 3:6]
    th, su, sv = states[..., 2], states[..., 3], states[..., 4]
    return np.stack([su * np.cos(th) - sv * np.sin(th),
                     su * np.sin(th) + sv * np.cos(th)], axis=-1)


def building_clearance(p: np.ndarray, scn: Scenario) -> float:
    """Distance from a point to the nearest building surface (inf if none)."""
    if scn.buildings.shape[0] == 0:
        return np.inf
    lo, hi = scn.buildings[:, 0, :], scn.buildings[:, 1, :]
    d = np.maximum(np.maximum(lo - p, p - hi), 0.0)
    outside = np.linalg.norm(d, axis=-1)
    inside = np.all((p >= lo) & (p <= hi), axis=-1)
    outside[inside] = 0.0
    return float(outside.min())


def in_bounds(p: np.ndarray, scn: Scenario, margin: float = 0.0) -> bool:
    return bool(np.all(p >= scn.bounds_lo + margin)
                and np.all(p <= scn.bounds_hi - margin))


def min_npc_distance(world: World, scn: Scenario) -> float:
    if world.npcs.shape[0] == 0:
        return np.inf
    d = positions(world.npcs, scn) - positions(world.ego, scn)
    return float(np.linalg.norm(d, axis=-1).min())


def danger(world: World, scn: Scenario) -> bool:
    """True iff the ego collides with an NPC, a building, or the bounds."""
    if min_npc_distance(world, scn) < scn.r_col:
        return True
    p = positions(world.ego, scn)
    if not in_bounds(p, scn):
        return True
    return building_clearance(p, scn) < scn.r_col / 2.0


def at_rest(state: np.ndarray, scn: Scenario, tol: float = 1e-9) -> bool:
    """Velocity/attitude trim, as produced by the initial-state sampler."""
    if scn.kind == "city":
        return bool(np.all(np.abs(state[3:8]) <= tol))
    return bool(np.all(np.abs(state[3:6]) <= tol))


def in_initial_set(world: World, scn: Scenario) -> bool:
    """Membership in the set episodes start from: a vehicle at rest with
    comfortable clearance.  Mid-trajectory states are moving, so in logged
    data this labels (exactly) the episode-start records."""
    p = positions(world.ego, scn)
    return (at_rest(world.ego, scn)
            and min_npc_distance(world, scn) >= scn.s0_clearance * scn.r_col
            and in_bounds(p, scn, margin=scn.r_col / 2.0)
            and building_clearance(p, scn) >= scn.r_col)


def reached_goal(world: World, scn: Scenario) -> bool:
    p = positions(world.ego, scn)
    return bool(np.linalg.norm(p - world.goal) < scn.r_goal)


# -- observation -------------------------------------------------------------


@dataclass(frozen=True)
class ObsLayout:
    state_dim: int
    pos_dim: int
    n_slots: int = N_OBS_SLOTS

    @property
    def total(self) -> int:
        return self.state_dim + 2 * self.pos_dim * self.n_slots + self.pos_dim

    @property
    def relpos_start(self) -> int:
        return self.state_dim

    @property
    def relvel_start(self) -> int:
        return self.state_dim + self.pos_dim * self.n_slots

    @property
    def ref_start(self) -> int:
        return self.state_dim + 2 * self.pos_dim * self.n_slots

    def slot_relpos(self, obs: np.ndarray, i: int) -> np.ndarray:
        base = self.relpos_start
        return np.array([obs[..., base + c * self.n_slots + i]
                         for c in range(self.pos_dim)]).T

    def slot_relvel(self, obs: np.ndarray, i: int) -> np.ndarray:
        base = self.relvel_start
        return np.array([obs[..., base + c * self.n_slots + i]
                         for c in range(self.pos_dim)]).T

    def ref_rel(self, obs: np.ndarray) -> np.ndarray:
        return obs[..., self.ref_start:self.ref_start + self.pos_dim]


def obs_layout(scn: Scenario) -> ObsLayout:
    return ObsLayout(state_dim=scn.state_dim, pos_dim=scn.pos_dim)


def control_limits(scn: Scenario) -> np.ndarray:
    """Actuator clamp magnitudes per control channel."""
    if scn.kind == "city":
        p = DroneParams()
        return np.array([p.rate_max, p.rate_max, p.accel_max])
    p = ShipParams()
    return np.array([p.tau_u_max, p.tau_r_max])


def obs_scale(scn: Scenario) -> np.ndarray:
    """Fixed per-channel input scaling applied inside the networks."""
    lay = obs_layout(scn)
    s = np.ones(lay.total)
    if scn.kind == "city":
        state = np.array([0.1, 0.1, 0.2, 0.25, 0.25, 0.25, 2.0, 2.0])
        pos_s, vel_s = 0.25, 0.25
    else:
        state = np.array([1 / 60.0, 1 / 60.0, 0.5, 0.25, 0.25, 1.0])
        pos_s, vel_s = 1 / 20.0, 0.25
    s[:lay.state_dim] = state
    s[lay.relpos_start:lay.relvel_start] = pos_s
    s[lay.relvel_start:lay.ref_start] = vel_s
    s[lay.ref_start:] = pos_s
    return s


def observe(world: World, scn: Scenario, ref_pos: np.ndarray) -> np.ndarray:
    """Flat observation; independent of any barrier function."""
    lay = obs_layout(scn)
    m, k = scn.pos_dim, lay.n_slots
    ego = world.ego
    ego_p = positions(ego, scn)
    slots_p = np.zeros((k, m))
    slots_v = np.zeros((k, m))
    if world.npcs.shape[0] > 0:
        rel_p = positions(world.npcs, scn) - ego_p
        dist = np.linalg.norm(rel_p, axis=-1)
        order = np.argsort(dist, kind="stable")[:k]
        rel_v = world_velocity(world.npcs[order], scn) - world_velocity(ego, scn)
        n = len(order)
        slots_p[:n] = rel_p[order]
        slots_v[:n] = rel_v
    return np.concatenate([
        ego,
        slots_p.T.reshape(-1),
        slots_v.T.reshape(-1),
        np.asarray(ref_pos, dtype=np.float64) - ego_p,
    ])


# -- sampling ----------------------------------------------------------------

_RETRY_CAP = 400


def _sample_position(scn: Scenario, rng: np.random.Generator,
                     clearance: float) -> np.ndarray:
    lo = scn.bounds_lo + clearance
    hi = scn.bounds_hi - clearance
    for _ in range(_RETRY_CAP):
        p = rng.uniform(lo, hi)
        if building_clearance(p, scn) >= clearance:
            return p
    raise SamplingError("could not place a point clear of buildings")


def _corridor_candidate(start, goal, scn, rng) -> np.ndarray:
    t = rng.uniform(0.15, 0.85)
    center = start + t * (goal - start)
    off = rng.uniform(-scn.corridor_radius, scn.corridor_radius, scn.pos_dim)
    return np.clip(center + off, scn.bounds_lo + scn.r_col,
                   scn.bounds_hi - scn.r_col)


def sample_initial(scn: Scenario, rng: np.random.Generator) -> World:
    """Ego + NPC placement with pairwise clearance >= 2 r_col.

    A ``corridor_frac`` share of NPCs is biased toward the straight
    start-goal line so the desk-scale arenas keep the interaction density
    of the full-size ones.
    """
    ego_p = _sample_position(scn, rng, clearance=2.0 * scn.r_col)
    for _ in range(_RETRY_CAP):
        goal = _sample_position(scn, rng, clearance=scn.r_goal)
        if np.linalg.norm(goal - ego_p) >= scn.min_goal_dist:
            break
    else:
        raise SamplingError("could not place a goal far enough from start")

    placed = [ego_p]
    npc_pos = []
    n_corridor = int(round(scn.corridor_frac * scn.npc_count))
    for i in range(scn.npc_count):
        ok = False
        for attempt in range(_RETRY_CAP):
            # corridor placement is a bias: over-dense tubes fall back to
            # uniform placement rather than failing the whole fleet
            if i < n_corridor and attempt < _RETRY_CAP // 2:
                p = _corridor_candidate(ego_p, goal, scn, rng)
            else:
                p = rng.uniform(scn.bounds_lo + scn.r_col,
                                scn.bounds_hi - scn.r_col)
            if building_clearance(p, scn) < scn.r_col:
                continue
            if np.linalg.norm(p - goal) < scn.r_goal + 2.0 * scn.r_col:
                continue
            if all(np.linalg.norm(p - q) >= 2.0 * scn.r_col for q in placed):
                ok = True
                break
        if not ok:
            raise SamplingError("could not place NPC fleet (arena too dense)")
        placed.append(p)
        npc_pos.append(p)

    ego = np.zeros(scn.state_dim)
    ego[:scn.pos_dim] = ego_p
    if scn.kind == "valley":
        to_goal = goal - ego_p
        ego[2] = wrap_angle(np.arctan2(to_goal[1], to_goal[0])
                            + rng.uniform(-0.3, 0.3))

    npcs = np.zeros((scn.npc_count, scn.state_dim))
    if scn.npc_count:
        npcs[:, :scn.pos_dim] = np.asarray(npc_pos)
        if scn.kind == "valley":
            npcs[:, 2] = rng.uniform(-np.pi, np.pi, scn.npc_count)

    n_wp = 3
    wps = np.zeros((scn.npc_count, n_wp, scn.pos_dim))
    for i in range(scn.npc_count):
        for j in range(n_wp):
            wps[i, j] = _sample_position(scn, rng, clearance=scn.r_col)
    return World(ego=ego, npcs=npcs, goal=goal, npc_waypoints=wps,
                 npc_wp_idx=np.zeros(scn.npc_count, dtype=np.intp))


# -- episode logs --------------------------------------------------------------


@dataclass
class EpisodeLog:
    """Time-indexed trajectory record; one entry per simulator step.

    ``t[k] == step_index[k] * dt`` exactly.  ``ref_state`` holds the
    reference position and velocity at each step; ``u_nom`` the nominal
    controller's output, which training losses need.
    """
    dt: float
    kind: str
    step_index: np.ndarray      # (L,) int
    state: np.ndarray           # (L, state_dim)
    obs: np.ndarray             # (L, obs_dim)
    control: np.ndarray         # (L, control_dim)
    danger_flag: np.ndarray     # (L,) bool
    in_s0: np.ndarray           # (L,) bool
    ref_state: np.ndarray       # (L, 2 * pos_dim): position then velocity
    u_nom: np.ndarray           # (L, control_dim)
    status: str                 # "reached_goal" | "timeout" | "fault"

    def __len__(self) -> int:
        return len(self.step_index)

    @property
    def t(self) -> np.ndarray:
        return self.step_index * self.dt

    def to_jsonl(self) -> str:
        import json
        lines = [json.dumps({"meta": {"dt": self.dt, "kind": self.kind,
                                      "status": self.status}})]
        for i in range(len(self)):
            lines.append(json.dumps({
                "k": int(self.step_index[i]),
                "t": self.step_index[i] * self.dt,
                "state": list(self.state[i]),
                "obs": list(self.obs[i]),
                "control": list(self.control[i]),
                "danger": bool(self.danger_flag[i]),
                "in_s0": bool(self.in_s0[i]),
                "ref_state": list(self.ref_state[i]),
                "u_nom": list(self.u_nom[i]),
            }))
        return "\n".join(lines) + "\n"

    @classmethod
    def from_jsonl(cls, text: str) -> "EpisodeLog":
        import json
        lines = [ln for ln in text.splitlines() if ln.strip()]
        meta = json.loads(lines[0])["meta"]
        rows = [json.loads(ln) for ln in lines[1:]]
        return cls(
            dt=meta["dt"], kind=meta["kind"], status=meta["status"],
            step_index=np.array([r["k"] for r in rows], dtype=np.intp),
            state=np.array([r["state"] for r in rows]),
            obs=np.array([r["obs"] for r in rows]),
            control=np.array([r["control"] for r in rows]),
            danger_flag=np.array([r["danger"] for r in rows], dtype=bool),
            in_s0=np.array([r["in_s0"] for r in rows], dtype=bool),
            ref_state=np.array([r["ref_state"] for r in rows]),
            u_nom=np.array([r["u_nom"] for r in rows]),
        )


# -- NPC motion ----------------------------------------------------------------

_DRONE_NPC = DroneParams()
_SHIP_NPC = ShipParams()


def advance_npcs(world: World, scn: Scenario, dt: float) -> World:
    """Advance the fleet one interval; identity in static mode.

    Moving NPCs chase their waypoint lists (cycling) with proportional
    controllers under the same vehicle dynamics as the ego.
    """
    if scn.npc_mode != "moving" or scn.npc_count == 0:
        return world
    out = world.copy()
    s = out.npcs
    idx = out.npc_wp_idx
    wp = out.npc_waypoints[np.arange(scn.npc_count), idx]
    p = positions(s, scn)
    arrive = np.linalg.norm(wp - p, axis=-1) < scn.r_goal
    idx[arrive] = (idx[arrive] + 1) % out.npc_waypoints.shape[1]
    wp = out.npc_waypoints[np.arange(scn.npc_count), idx]

    if scn.kind == "city":
        prm = _DRONE_NPC
        v_des = 1.0 * (wp - p)
        speed = np.linalg.norm(v_des, axis=-1, keepdims=True)
        v_des = np.where(speed > scn.npc_speed,
                         v_des * scn.npc_speed / np.maximum(speed, 1e-9), v_des)
        a_des = np.clip(2.0 * (v_des - s[:, 3:6]), -4.0, 4.0)
        ty_des = np.arctan2(a_des[:, 0], prm.g)
        tx_des = np.arctan2(-a_des[:, 1], prm.g)
        u = np.stack([6.0 * (tx_des - s[:, 6]),
                      6.0 * (ty_des - s[:, 7]),
                      a_des[:, 2]], axis=-1)
        u = dynamics.clamp_drone_control(u, prm)
        nxt = dynamics.rk4(lambda x, c: dynamics.drone_deriv(x, c, prm), s, u, dt)
        out.npcs = dynamics.postprocess_drone_state(nxt, prm)
    else:
        prm = _SHIP_NPC
        to_wp = wp - p
        dist = np.linalg.norm(to_wp, axis=-1)
        th_des = np.arctan2(to_wp[:, 1], to_wp[:, 0])
        v_des = np.minimum(scn.npc_speed, 0.5 * dist)
        u = np.stack([1.5 * (v_des - s[:, 3]),
                      1.0 * wrap_angle(th_des - s[:, 2]) - 1.0 * s[:, 5]],
                     axis=-1)
        u = dynamics.clamp_ship_control(u, prm)
        nxt = dynamics.rk4(lambda x, c: dynamics.ship_deriv(x, c, prm), s, u, dt)
        out.npcs = dynamics.postprocess_ship_state(nxt, prm)
    return out
