"""Ground-truth vehicle dynamics behind a black-box stepping interface.

Two systems are provided: an 8-state near-hover drone and a 6-state
surface ship (3-DOF body-frame model).  Consumers of a :class:`BlackBox`
may only call ``step``; the derivative functions in this module must never
be imported by the learning code (an architectural test enforces this).

Drone state  [x, y, z, vx, vy, vz, tx, ty]; controls [u1, u2, u3] are the
roll rate, pitch rate and net vertical acceleration.  Ship state
[x, y, th, u, v, w] with body-frame surge/sway speeds and yaw rate;
controls [tau_u, tau_r] are normalized surge force and yaw moment.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

DRONE_STATE_DIM, DRONE_CONTROL_DIM = 8, 3
SHIP_STATE_DIM, SHIP_CONTROL_DIM = 6, 2


def wrap_angle(theta):
    """Wrap to (-pi, pi]."""
    return np.pi - np.mod(np.pi - np.asarray(theta), 2.0 * np.pi)


@dataclass
class DroneParams:
    g: float = 9.8            # m/s^2
    theta_max: float = np.pi / 6.0
    rate_max: float = 2.0     # |u1|, |u2| bound, rad/s
    accel_max: float = 5.0    # |u3| bound, m/s^2
    dt: float = 0.05          # s
    sigma: float = 0.0        # process-noise level on velocity states


@dataclass
class ShipParams:
    # normalized-unit coefficients; stable, underactuated sway
    m_u: float = 1.0
    m_v: float = 1.0
    m_r: float = 1.0
    m_c: float = 0.5
    d_u: float = 0.5
    d_v: float = 1.0
    d_r: float = 0.5
    tau_u_max: float = 2.0
    tau_r_max: float = 0.5
    dt: float = 0.2
    sigma: float = 0.0


def drone_deriv(s: np.ndarray, u: np.ndarray, p: DroneParams) -> np.ndarray:
    """Time derivative of the drone state; broadcasts over leading axes."""
    s = np.asarray(s, dtype=np.float64)
    u = np.asarray(u, dtype=np.float64)
    d = np.empty_like(s)
    d[..., 0:3] = s[..., 3:6]
    d[..., 3] = p.g * np.tan(s[..., 7])
    d[..., 4] = -p.g * np.tan(s[..., 6])
    d[..., 5] = u[..., 2]
    d[..., 6] = u[..., 0]
    d[..., 7] = u[..., 1]
    return d


def ship_deriv(s: np.ndarray, u: np.ndarray, p: ShipParams) -> np.ndarray:
    """Time derivative of the ship state; broadcasts over leading axes."""
    s = np.asarray(s, dtype=np.float64)
    u = np.asarray(u, dtype=np.float64)
    th, su, sv, w = s[..., 2], s[..., 3], s[..., 4], s[..., 5]
    d = np.empty_like(s)
    d[..., 0] = su * np.cos(th) - sv * np.sin(th)
    d[..., 1] = su * np.sin(th) + sv * np.cos(th)
    d[..., 2] = w
    d[..., 3] = (u[..., 0] - p.d_u * su) / p.m_u
    d[..., 4] = (-p.d_v * sv - p.m_c * su * w) / p.m_v
    d[..., 5] = (u[..., 1] - p.d_r * w) / p.m_r
    return d


def clamp_drone_control(u, p: DroneParams) -> np.ndarray:
    u = np.asarray(u, dtype=np.float64)
    lim = np.array([p.rate_max, p.rate_max, p.accel_max])
    return np.clip(u, -lim, lim)


def clamp_ship_control(u, p: ShipParams) -> np.ndarray:
    u = np.asarray(u, dtype=np.float64)
    lim = np.array([p.tau_u_max, p.tau_r_max])
    return np.clip(u, -lim, lim)


def postprocess_drone_state(s, p: DroneParams) -> np.ndarray:
    s = np.asarray(s, dtype=np.float64).copy()
    s[..., 6:8] = np.clip(s[..., 6:8], -p.theta_max, p.theta_max)
    return s


def postprocess_ship_state(s, p: ShipParams) -> np.ndarray:
    s = np.asarray(s, dtype=np.float64).copy()
    s[..., 2] = wrap_angle(s[..., 2])
    return s


def rk4(deriv, s: np.ndarray, u: np.ndarray, dt: float) -> np.ndarray:
    k1 = deriv(s, u)
    k2 = deriv(s + 0.5 * dt * k1, u)
    k3 = deriv(s + 0.5 * dt * k2, u)
    k4 = deriv(s + dt * k3, u)
    return s + (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)


class BlackBox:
    """Opaque stepping interface over a hidden derivative.

    Only ``step`` (and the dimension/dt metadata) is part of the consumer
    contract.  One instance per episode when stepping in parallel; the
    internal RNG is the only mutable piece.
    """

    def __init__(self, deriv, clamp_control, postprocess, dt: float,
                 state_dim: int, control_dim: int, noise_idx,
                 sigma: float = 0.0, seed: int = 0, tag: str = "custom"):
        self._deriv = deriv
        self._clamp = clamp_control
        self._post = postprocess
        self._noise_idx = np.asarray(noise_idx, dtype=np.intp)
        self._sigma = float(sigma)
        self._rng = np.random.default_rng(seed)
        self._seed = seed
        self.dt = float(dt)
        self.state_dim = int(state_dim)
        self.control_dim = int(control_dim)
        self.tag = tag

    def step(self, s: np.ndarray, u: np.ndarray) -> np.ndarray:
        """Advance one simulator interval; clamps controls, then integrates."""
        s = np.asarray(s, dtype=np.float64)
        if not np.all(np.isfinite(s)):
            raise FloatingPointError("non-finite state entering step")
        u = self._clamp(u)
        out = self._post(rk4(self._deriv, s, u, self.dt))
        if self._sigma > 0.0:
            noise = self._rng.standard_normal(self._noise_idx.size)
            out[..., self._noise_idx] += self._sigma * np.sqrt(self.dt) * noise
        if not np.all(np.isfinite(out)):
            raise FloatingPointError("non-finite state produced by step")
        return out

    def fresh(self, seed: int | None = None) -> "BlackBox":
        """Copy with a fresh noise stream (for per-episode instances)."""
        return BlackBox(self._deriv, self._clamp, self._post, self.dt,
                        self.state_dim, self.control_dim, self._noise_idx,
                        self._sigma, self._seed if seed is None else seed,
                        self.tag)


def drone_blackbox(p: DroneParams | None = None, seed: int = 0) -> BlackBox:
    p = p or DroneParams()
    return BlackBox(
        deriv=lambda s, u: drone_deriv(s, u, p),
        clamp_control=lambda u: clamp_drone_control(u, p),
        postprocess=lambda s: postprocess_drone_state(s, p),
        dt=p.dt, state_dim=DRONE_STATE_DIM, control_dim=DRONE_CONTROL_DIM,
        noise_idx=[3, 4, 5], sigma=p.sigma, seed=seed, tag="drone")


def ship_blackbox(p: ShipParams | None = None, seed: int = 0) -> BlackBox:
    p = p or ShipParams()
    return BlackBox(
        deriv=lambda s, u: ship_deriv(s, u, p),
        clamp_control=lambda u: clamp_ship_control(u, p),
        postprocess=lambda s: postprocess_ship_state(s, p),
        dt=p.dt, state_dim=SHIP_STATE_DIM, control_dim=SHIP_CONTROL_DIM,
        noise_idx=[3, 4, 5], sigma=p.sigma, seed=seed, tag="ship")


# Per-channel scale of the perturbation field, matched to the typical
# magnitude of each derivative channel so the model-error ratio responds
# roughly linearly to the perturbation gain.
_PHI_SCALE = {
    "drone": np.array([2.0, 2.0, 2.0, 3.0, 3.0, 3.0, 1.0, 1.0]),
    "ship": np.array([2.5, 2.5, 0.3, 0.5, 0.5, 0.3]),
}


def perturbation_field(state_dim: int, control_dim: int, tag: str):
    """Fixed smooth bounded field phi(s, u): each channel is a sinusoid of a
    fixed linear blend of the (roughly unit-scaled) state and control."""
    scale = _PHI_SCALE.get(tag, np.ones(state_dim))
    n = state_dim + control_dim
    i = np.arange(state_dim)[:, None]
    j = np.arange(n)[None, :]
    coef = np.cos(1.3 * i + 0.7 * j)
    phase = 0.5 * np.arange(state_dim)
    zs = 1.0 / np.maximum(_PHI_SCALE.get(tag, np.ones(state_dim)), 1e-9)

    def phi(s, u):
        z = np.concatenate([np.asarray(s) * zs, np.asarray(u)], axis=-1)
        return scale * np.sin(np.matmul(z, coef.T) + phase)

    return phi


def make_perturbed_truth(base: BlackBox, eps: float) -> BlackBox:
    """Black box whose hidden derivative is f(s,u) + eps * phi(s,u)."""
    if eps < 0:
        raise ValueError("perturbation scale must be >= 0")
    if eps == 0.0:
        return base.fresh()
    phi = perturbation_field(base.state_dim, base.control_dim, base.tag)
    inner = base._deriv

    def deriv(s, u):
        return inner(s, u) + eps * phi(s, u)

    return BlackBox(deriv, base._clamp, base._post, base.dt, base.state_dim,
                    base.control_dim, base._noise_idx, base._sigma,
                    base._seed, base.tag)
