"""Everything "given" in the problem setup: reference planning, the
goal-reaching tracking controller, and the data-driven nominal dynamics.

The planner is a visibility-biased waypoint sampler over inflated
axis-aligned boxes with straight-line fallback; it ignores NPCs entirely.
The tracking controller is a PD law reading only the ego state and the
reference, never NPC positions.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .diffcore import Mlp, Tape, adam_init, adam_step, forward_mlp, init_mlp
from .diffcore.tape import TapeError
from .dynamics import wrap_angle
from .env import Scenario, World, building_clearance, in_bounds

PLAN_MARGIN = {"city": 0.6, "valley": 4.0}
CRUISE_SPEED = {"city": 2.0, "valley": 2.5}


class PlanningError(RuntimeError):
    """The waypoint sampler could not find a collision-free route."""


@dataclass
class RefTrajectory:
    """Piecewise-linear waypoint path with timestamps; lookups interpolate."""
    waypoints: np.ndarray   # (W, pos_dim)
    times: np.ndarray       # (W,) strictly increasing, times[0] == 0

    @property
    def duration(self) -> float:
        return float(self.times[-1])

    def position(self, t: float) -> np.ndarray:
        t = np.clip(t, 0.0, self.duration)
        i = int(np.searchsorted(self.times, t, side="right") - 1)
        i = min(i, len(self.times) - 2) if len(self.times) > 1 else 0
        if len(self.times) == 1:
            return self.waypoints[0].copy()
        span = self.times[i + 1] - self.times[i]
        w = 0.0 if span <= 0 else (t - self.times[i]) / span
        return (1.0 - w) * self.waypoints[i] + w * self.waypoints[i + 1]

    def velocity(self, t: float) -> np.ndarray:
        if len(self.times) == 1 or t >= self.duration or t < 0.0:
            return np.zeros_like(self.waypoints[0])
        i = int(np.searchsorted(self.times, t, side="right") - 1)
        i = min(i, len(self.times) - 2)
        span = self.times[i + 1] - self.times[i]
        return (self.waypoints[i + 1] - self.waypoints[i]) / span

    def ref_state(self, t: float) -> np.ndarray:
        return np.concatenate([self.position(t), self.velocity(t)])


def _segment_hits_box(a: np.ndarray, b: np.ndarray, lo: np.ndarray,
                      hi: np.ndarray) -> bool:
    """Slab test for segment a->b against the axis-aligned box [lo, hi]."""
    d = b - a
    t0, t1 = 0.0, 1.0
    for ax in range(len(a)):
        if abs(d[ax]) < 1e-12:
            if a[ax] < lo[ax] or a[ax] > hi[ax]:
                return False
            continue
        ta = (lo[ax] - a[ax]) / d[ax]
        tb = (hi[ax] - a[ax]) / d[ax]
        ta, tb = min(ta, tb), max(ta, tb)
        t0, t1 = max(t0, ta), min(t1, tb)
        if t0 > t1:
            return False
    return True


def segment_clear(a: np.ndarray, b: np.ndarray, scn: Scenario,
                  margin: float) -> bool:
    for box in scn.buildings:
        if _segment_hits_box(a, b, box[0] - margin, box[1] + margin):
            return False
    return True


def _free_candidates(a, b, scn, margin, rng, count) -> list[np.ndarray]:
    """Free-space waypoint candidates biased toward the a-b corridor."""
    out = []
    span = np.linalg.norm(b - a)
    for _ in range(count * 4):
        if len(out) >= count:
            break
        t = rng.uniform(0.0, 1.0)
        c = a + t * (b - a) + rng.uniform(-0.6 * span, 0.6 * span, len(a))
        if len(a) == 3:  # flying over is usually the cheapest detour
            c[2] = rng.uniform(scn.bounds_lo[2] + margin,
                               scn.bounds_hi[2] - margin)
        c = np.clip(c, scn.bounds_lo + margin, scn.bounds_hi - margin)
        if building_clearance(c, scn) >= margin:
            out.append(c)
    return out


def _route(a, b, scn, margin, rng) -> list[np.ndarray]:
    """Straight line, else one or two sampled intermediate waypoints."""
    if segment_clear(a, b, scn, margin):
        return [a, b]
    cands = _free_candidates(a, b, scn, margin, rng, count=60)
    from_a = [c for c in cands if segment_clear(a, c, scn, margin)]
    to_b = [c for c in cands if segment_clear(c, b, scn, margin)]
    for c in from_a:
        if segment_clear(c, b, scn, margin):
            return [a, c, b]
    for c1 in from_a[:25]:
        for c2 in to_b[:25]:
            if segment_clear(c1, c2, scn, margin):
                return [a, c1, c2, b]
    raise PlanningError("waypoint sampler exhausted its retry budget")


def plan_reference(world: World, scn: Scenario, rng: np.random.Generator,
                   cruise: float | None = None,
                   margin: float | None = None) -> RefTrajectory:
    """Collision-free route w.r.t. static obstacles only, time-parameterized
    at a constant cruise speed.  Output never depends on NPCs."""
    cruise = CRUISE_SPEED[scn.kind] if cruise is None else cruise
    margin = PLAN_MARGIN[scn.kind] if margin is None else margin
    start = world.ego[:scn.pos_dim].copy()
    pts = _route(start, world.goal.copy(), scn, margin, rng)
    wps = np.asarray(pts)
    seg = np.linalg.norm(np.diff(wps, axis=0), axis=1)
    # keep arrival comfortably inside the horizon
    total = float(seg.sum())
    speed = max(cruise, total / (0.7 * scn.horizon))
    times = np.concatenate([[0.0], np.cumsum(seg / speed)])
    return RefTrajectory(waypoints=wps, times=times)


# -- tracking controller -------------------------------------------------------


@dataclass
class DroneTrackingGains:
    kp: float = 1.2
    kd: float = 1.8
    kang: float = 8.0


@dataclass
class ShipTrackingGains:
    kv: float = 2.0
    kh: float = 1.2
    kw: float = 1.5
    k_dist: float = 0.5
    lookahead: float = 3.0
    cruise: float = 2.5


DRONE_GAINS = DroneTrackingGains()
SHIP_GAINS = ShipTrackingGains()

_DRONE_U_LIM = np.array([2.0, 2.0, 5.0])
_SHIP_U_LIM = np.array([2.0, 0.5])
_G_ACC = 9.8
_TILT_CAP = 0.9 * np.pi / 6.0


def nominal_control(state: np.ndarray, ref: RefTrajectory, t: float,
                    kind: str, gains=None) -> np.ndarray:
    """PD tracking of the reference; reads no NPC information."""
    if kind == "city":
        g = gains or DRONE_GAINS
        a_des = (g.kp * (ref.position(t) - state[0:3])
                 + g.kd * (ref.velocity(t) - state[3:6]))
        ty_des = np.clip(np.arctan2(a_des[0], _G_ACC), -_TILT_CAP, _TILT_CAP)
        tx_des = np.clip(np.arctan2(-a_des[1], _G_ACC), -_TILT_CAP, _TILT_CAP)
        u = np.array([g.kang * (tx_des - state[6]),
                      g.kang * (ty_des - state[7]),
                      a_des[2]])
        return np.clip(u, -_DRONE_U_LIM, _DRONE_U_LIM)
    g = gains or SHIP_GAINS
    target = ref.position(t + g.lookahead)
    to_t = target - state[0:2]
    dist = float(np.linalg.norm(to_t))
    v_des = min(g.cruise, g.k_dist * dist)
    if dist > 1e-9:
        th_des = np.arctan2(to_t[1], to_t[0])
        tau_r = g.kh * wrap_angle(th_des - state[2]) - g.kw * state[5]
    else:
        tau_r = -g.kw * state[5]
    u = np.array([g.kv * (v_des - state[3]), tau_r])
    return np.clip(u, -_SHIP_U_LIM, _SHIP_U_LIM)


# -- nominal dynamics model ------------------------------------------------------


class FitError(RuntimeError):
    """Nominal-model fitting failed (too few samples or ill-conditioning)."""


@dataclass
class NominalModel:
    """Differentiable approximation of the true derivative, fitted from data.

    ``kind == "linear"`` stores sdot ~ A s + B u + c; ``kind == "mlp"``
    wraps a small network over scaled (s, u) features predicting scaled
    derivatives.
    """
    kind: str
    state_dim: int
    control_dim: int
    a: np.ndarray | None = None
    b: np.ndarray | None = None
    c: np.ndarray | None = None
    net: Mlp | None = None
    target_scale: np.ndarray | None = None
    fit_report: dict = field(default_factory=dict)

    def apply(self, s: np.ndarray, u: np.ndarray) -> np.ndarray:
        s = np.asarray(s, dtype=np.float64)
        u = np.asarray(u, dtype=np.float64)
        if s.shape[-1] != self.state_dim or u.shape[-1] != self.control_dim:
            raise TapeError("nominal model dimension mismatch")
        if self.kind == "linear":
            return np.matmul(s, self.a.T) + np.matmul(u, self.b.T) + self.c
        out = self.net.forward(np.concatenate([s, u], axis=-1))
        return out * self.target_scale

    def apply_on_tape(self, tape: Tape, s, u_node: int) -> int:
        """Derivative prediction as tape ops; gradient flows through u."""
        if self.kind == "linear":
            s = np.asarray(s, dtype=np.float64)
            fixed = np.matmul(s, self.a.T) + self.c
            return tape.add(tape.matvec(tape.const(self.b), u_node),
                            tape.const(fixed))
        s_node = tape.const(s)
        x = tape.concat([s_node, u_node])
        y = forward_mlp(self.net, x, tape)
        return tape.mul(y, tape.const(self.target_scale))

    def zero(self) -> "NominalModel":
        """Degenerate copy predicting an identically zero derivative."""
        return NominalModel(kind="linear", state_dim=self.state_dim,
                            control_dim=self.control_dim,
                            a=np.zeros((self.state_dim, self.state_dim)),
                            b=np.zeros((self.state_dim, self.control_dim)),
                            c=np.zeros(self.state_dim),
                            fit_report={"residual_e": 1.0, "samples": 0})


def finite_diff_targets(states, next_states, dt, angle_dims=()) -> np.ndarray:
    d = np.asarray(next_states) - np.asarray(states)
    for ax in angle_dims:
        d[..., ax] = wrap_angle(d[..., ax])
    return d / dt


def residual_ratio(targets: np.ndarray, preds: np.ndarray) -> float:
    """Normalized model error: mean ||sdot - sdot_nom|| / mean ||sdot||."""
    num = np.mean(np.linalg.norm(targets - preds, axis=-1))
    den = np.mean(np.linalg.norm(targets, axis=-1))
    if den == 0.0:
        raise ZeroDivisionError("zero-motion probe data")
    return float(num / den)


def fit_nominal(states: np.ndarray, controls: np.ndarray,
                next_states: np.ndarray, kind: str, dt: float,
                angle_dims=(), hidden: int = 32, train_steps: int = 4000,
                batch: int = 256, lr: float = 1e-3, seed: int = 0,
                ridge: float = 1e-6) -> NominalModel:
    """Least-squares (linear) or Adam-trained MLP fit of the derivative."""
    states = np.asarray(states, dtype=np.float64)
    controls = np.asarray(controls, dtype=np.float64)
    ns, nu = states.shape[1], controls.shape[1]
    targets = finite_diff_targets(states, next_states, dt, angle_dims)
    n = len(states)

    if kind == "linear":
        n_params = ns * (ns + nu + 1)
        if n < 10 * n_params:
            raise FitError(f"need >= {10 * n_params} samples, got {n}")
        x = np.concatenate([states, controls, np.ones((n, 1))], axis=1)
        gram = x.T @ x + ridge * np.eye(x.shape[1])
        if np.linalg.cond(gram) > 1e14:
            raise FitError("normal equations rank-deficient beyond ridge")
        w = np.linalg.solve(gram, x.T @ targets)
        model = NominalModel(kind="linear", state_dim=ns, control_dim=nu,
                             a=w[:ns].T.copy(), b=w[ns:ns + nu].T.copy(),
                             c=w[ns + nu].copy())
    elif kind == "mlp":
        rng = np.random.default_rng(seed)
        in_scale = 1.0 / np.maximum(np.std(
            np.concatenate([states, controls], axis=1), axis=0), 1e-6)
        t_scale = np.maximum(np.std(targets, axis=0), 1e-6)
        net = init_mlp([ns + nu, hidden, hidden, ns], rng,
                       activation="tanh", input_scale=in_scale)
        n_params = len(net.params)
        if n < 10 * n_params:
            raise FitError(f"need >= {10 * n_params} samples, got {n}")
        feats = np.concatenate([states, controls], axis=1)
        scaled_t = targets / t_scale
        st = adam_init(n_params, lr=lr)
        params = net.params
        for it in range(train_steps):
            idx = rng.integers(0, n, size=min(batch, n))
            tape = Tape()
            ph = tape.param(params)
            net_it = Mlp(net.layer_shapes, params, activation=net.activation,
                         input_scale=net.input_scale)
            pred = forward_mlp(net_it, feats[idx], tape, ph)
            err = tape.sub(pred, tape.const(scaled_t[idx]))
            loss = tape.mean(tape.mul(err, err))
            params = adam_step(params, tape.backward(loss), st)
        model = NominalModel(
            kind="mlp", state_dim=ns, control_dim=nu,
            net=Mlp(net.layer_shapes, params, activation=net.activation,
                    input_scale=net.input_scale),
            target_scale=t_scale)
    else:
        raise ValueError(f"unknown nominal model kind {kind!r}")

    preds = model.apply(states, controls)
    den = np.mean(np.linalg.norm(targets, axis=-1))
    if den == 0.0:  # identically zero dynamics fit perfectly or not at all
        e = 0.0 if np.allclose(preds, 0.0) else np.inf
    else:
        e = residual_ratio(targets, preds)
    model.fit_report = {"kind": kind, "samples": int(n), "residual_e": e}
    return model


def eval_nominal(model: NominalModel, s: np.ndarray, u: np.ndarray) -> np.ndarray:
    return model.apply(s, u)


def save_nominal(path, model: NominalModel, env_kind: str) -> None:
    from .diffcore.checkpoint import encode_array, mlp_to_doc, write_doc
    payload = {
        "model_kind": model.kind,
        "state_dim": model.state_dim,
        "control_dim": model.control_dim,
        "env_kind": env_kind,
        "fit_report": model.fit_report,
    }
    if model.kind == "linear":
        payload["a"] = encode_array(model.a)
        payload["b"] = encode_array(model.b)
        payload["c"] = encode_array(model.c)
    else:
        payload["net"] = mlp_to_doc(model.net)
        payload["target_scale"] = encode_array(model.target_scale)
    write_doc(path, "nominal", payload)


def load_nominal(path) -> tuple[NominalModel, str]:
    from .diffcore.checkpoint import decode_array, mlp_from_doc, read_doc
    doc = read_doc(path, expect_kind="nominal")
    kind = doc["model_kind"]
    common = dict(kind=kind, state_dim=int(doc["state_dim"]),
                  control_dim=int(doc["control_dim"]),
                  fit_report=doc.get("fit_report", {}))
    if kind == "linear":
        model = NominalModel(a=decode_array(doc["a"]), b=decode_array(doc["b"]),
                             c=decode_array(doc["c"]), **common)
    else:
        model = NominalModel(net=mlp_from_doc(doc["net"]),
                             target_scale=decode_array(doc["target_scale"]),
                             **common)
    return model, doc["env_kind"]


class ControlAffineModel:
    """Differentiable wrapper for a control-affine derivative f0(s) + B u.

    Duck-types NominalModel's apply/apply_on_tape; used to feed the exact
    dynamics into the loss machinery in white-box reference checks.
    """

    def __init__(self, f0, b_matrix: np.ndarray, state_dim: int):
        self.f0 = f0
        self.b = np.asarray(b_matrix, dtype=np.float64)
        self.state_dim = state_dim
        self.control_dim = self.b.shape[1]
        self.fit_report = {"kind": "control-affine", "residual_e": 0.0}

    def apply(self, s, u):
        return self.f0(np.asarray(s)) + np.matmul(np.asarray(u), self.b.T)

    def apply_on_tape(self, tape: Tape, s, u_node: int) -> int:
        fixed = self.f0(np.asarray(s))
        return tape.add(tape.matvec(tape.const(self.b), u_node),
                        tape.const(fixed))


# -- excitation data --------------------------------------------------------------


def collect_excitation(bb, n_samples: int, rng: np.random.Generator,
                       state_sampler, control_limits,
                       steps_per_traj: int = 20,
                       control_hold: int = 5):
    """Random bounded-control trajectories through the black box.

    Returns (states, controls, next_states) arrays of length n_samples.
    """
    lim = np.asarray(control_limits, dtype=np.float64)
    ss, us, ns_ = [], [], []
    while len(ss) < n_samples:
        s = state_sampler(rng)
        u = rng.uniform(-lim, lim)
        for k in range(steps_per_traj):
            if k % control_hold == 0:
                u = rng.uniform(-lim, lim)
            s_next = bb.step(s, u)
            ss.append(s)
            us.append(u)
            ns_.append(s_next)
            s = s_next
            if len(ss) >= n_samples:
                break
    return np.asarray(ss), np.asarray(us), np.asarray(ns_)


def drone_state_sampler(bounds_lo, bounds_hi, theta_max=np.pi / 6.0):
    lo = np.asarray(bounds_lo, dtype=np.float64)
    hi = np.asarray(bounds_hi, dtype=np.float64)

    def sample(rng):
        s = np.zeros(8)
        s[0:3] = rng.uniform(lo, hi)
        s[3:6] = rng.uniform(-3.0, 3.0, 3)
        s[6:8] = rng.uniform(-theta_max, theta_max, 2)
        return s

    return sample


def ship_state_sampler(bounds_lo, bounds_hi):
    lo = np.asarray(bounds_lo, dtype=np.float64)
    hi = np.asarray(bounds_hi, dtype=np.float64)

    def sample(rng):
        s = np.zeros(6)
        s[0:2] = rng.uniform(lo, hi)
        s[2] = rng.uniform(-np.pi, np.pi)
        s[3] = rng.uniform(-1.0, 4.0)
        s[4] = rng.uniform(-1.5, 1.5)
        s[5] = rng.uniform(-1.0, 1.0)
        return s

    return sample
