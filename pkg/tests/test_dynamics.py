import numpy as np
import pytest
from scipy.linalg import expm

from safectl.dynamics import (
    BlackBox, DroneParams, ShipParams, drone_blackbox, drone_deriv,
    make_perturbed_truth, rk4, ship_blackbox, ship_deriv, wrap_angle,
)

DP = DroneParams()
SP = ShipParams()


def test_drone_hover_is_equilibrium():
    s = np.zeros(8)
    assert np.array_equal(drone_deriv(s, np.zeros(3), DP), np.zeros(8))


def test_drone_pitch_gives_forward_acceleration():
    s = np.zeros(8)
    s[7] = np.pi / 6.0
    d = drone_deriv(s, np.zeros(3), DP)
    assert d[3] == pytest.approx(9.8 * np.tan(np.pi / 6.0), abs=1e-12)
    assert d[3] == pytest.approx(5.658, abs=1e-3)


def test_drone_vertical_thrust_only_affects_vz_rate():
    d = drone_deriv(np.zeros(8), np.array([0.0, 0.0, 2.0]), DP)
    expect = np.zeros(8)
    expect[5] = 2.0
    assert np.array_equal(d, expect)


def test_ship_at_rest_is_equilibrium():
    assert np.array_equal(ship_deriv(np.zeros(6), np.zeros(2), SP)[:3],
                          np.zeros(3))


def test_ship_pure_surge_moves_along_heading():
    s = np.zeros(6)
    s[3] = 1.0
    d = ship_deriv(s, np.zeros(2), SP)
    assert d[0] == pytest.approx(1.0) and d[1] == pytest.approx(0.0)
    s[2] = np.pi / 2.0
    d = ship_deriv(s, np.zeros(2), SP)
    assert d[0] == pytest.approx(0.0, abs=1e-12)
    assert d[1] == pytest.approx(1.0)


def test_step_of_zero_derivative_system_is_identity():
    bb = BlackBox(deriv=lambda s, u: np.zeros_like(s),
                  clamp_control=lambda u: u, postprocess=lambda s: s,
                  dt=0.1, state_dim=3, control_dim=1, noise_idx=[])
    s = np.array([1.0, -2.0, 0.5])
    assert np.array_equal(bb.step(s, np.zeros(1)), s)


def test_constant_vertical_acceleration_integrates_exactly():
    bb = drone_blackbox()
    out = bb.step(np.zeros(8), np.array([0.0, 0.0, 1.0]))
    assert out[5] == pytest.approx(0.05, abs=1e-9)
    assert out[2] == pytest.approx(0.5 * 1.0 * 0.05 ** 2, abs=1e-9)


def test_rk4_matches_matrix_exponential_on_linear_system():
    a = np.array([[0.0, 1.0], [-2.0, -0.3]])
    dt = 0.05
    s0 = np.array([1.0, -0.5])
    got = rk4(lambda s, u: s @ a.T, s0, np.zeros(0), dt)
    want = expm(a * dt) @ s0
    assert np.max(np.abs(got - want)) < 10.0 * dt ** 5


def test_non_finite_state_is_rejected():
    bb = drone_blackbox()
    with pytest.raises(FloatingPointError):
        bb.step(np.full(8, np.nan), np.zeros(3))


def test_perturbed_truth_eps_zero_matches_base():
    bb = drone_blackbox()
    pert = make_perturbed_truth(bb, 0.0)
    s = np.array([1.0, 2.0, 3.0, 0.5, -0.5, 0.1, 0.05, -0.05])
    u = np.array([0.3, -0.3, 1.0])
    assert np.array_equal(bb.step(s, u), pert.step(s, u))


def test_perturbed_truth_error_grows_with_eps():
    base = drone_blackbox()
    rng = np.random.default_rng(0)
    states = rng.normal(size=(64, 8)) * np.array([4, 4, 2, 1, 1, 1, 0.2, 0.2])
    controls = rng.normal(size=(64, 3))
    # mean step deviation from the base system, on a fixed probe set
    def deviation(eps):
        pert = make_perturbed_truth(base, eps)
        d = [np.linalg.norm(pert.step(s, u) - base.step(s, u))
             for s, u in zip(states, controls)]
        return float(np.mean(d))

    devs = [deviation(e) for e in (0.0, 0.1, 0.3, 0.6)]
    assert devs[0] == 0.0
    assert devs[0] < devs[1] < devs[2] < devs[3]


def test_perturbed_truth_same_seed_same_trajectory():
    p = DroneParams(sigma=0.1)
    s = np.zeros(8)
    u = np.array([0.5, -0.2, 1.0])
    traj = []
    for _ in range(2):
        bb = make_perturbed_truth(drone_blackbox(p, seed=9), 0.2)
        x = s.copy()
        for _ in range(20):
            x = bb.step(x, u)
        traj.append(x)
    assert np.array_equal(traj[0], traj[1])


def test_ship_speeds_decay_under_damping():
    # surge and yaw rate decay channelwise; total speed energy decays for
    # yaw rates inside the actuated envelope (the sway coupling is bounded)
    bb = ship_blackbox()
    rng = np.random.default_rng(2)
    for _ in range(10):
        s = np.zeros(6)
        s[3:5] = rng.uniform(-3.0, 3.0, size=2)
        s[5] = rng.uniform(-1.0, 1.0)
        su, w, energy = [], [], []
        for _ in range(50):
            su.append(abs(s[3]))
            w.append(abs(s[5]))
            energy.append(float(np.sum(s[3:6] ** 2)))
            s = bb.step(s, np.zeros(2))
        assert np.all(np.diff(su) <= 1e-12)
        assert np.all(np.diff(w) <= 1e-12)
        assert np.all(np.diff(energy) <= 1e-12)


def test_heading_stays_wrapped():
    bb = ship_blackbox()
    s = np.array([0.0, 0.0, 3.0, 1.0, 0.0, 0.9])
    for _ in range(200):
        s = bb.step(s, np.array([0.5, 0.4]))
        assert -np.pi < s[2] <= np.pi


def test_wrap_angle_boundaries():
    assert wrap_angle(np.pi) == pytest.approx(np.pi)
    assert wrap_angle(-np.pi) == pytest.approx(np.pi)
    assert wrap_angle(3 * np.pi / 2) == pytest.approx(-np.pi / 2)
    assert wrap_angle(0.0) == 0.0
