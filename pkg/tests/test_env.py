import numpy as np
import pytest

from safectl.env import (
    EpisodeLog, N_OBS_SLOTS, SamplingError, World, advance_npcs,
    building_clearance, city_scenario, danger, in_initial_set,
    min_npc_distance, obs_layout, observe, sample_initial, valley_scenario,
)


def empty_world(scn, ego=None, npcs=None, goal=None):
    n = 0 if npcs is None else len(npcs)
    return World(
        ego=np.zeros(scn.state_dim) if ego is None else np.asarray(ego, dtype=float),
        npcs=np.zeros((0, scn.state_dim)) if npcs is None else np.asarray(npcs, dtype=float),
        goal=np.zeros(scn.pos_dim) if goal is None else np.asarray(goal, dtype=float),
        npc_waypoints=np.zeros((n, 3, scn.pos_dim)),
        npc_wp_idx=np.zeros(n, dtype=np.intp))


def test_sample_with_zero_npcs_is_valid():
    scn = city_scenario(npc_count=0)
    world = sample_initial(scn, np.random.default_rng(0))
    assert world.npcs.shape == (0, 8)
    assert not danger(world, scn)
    assert np.linalg.norm(world.goal - world.ego[:3]) >= scn.min_goal_dist


@pytest.mark.parametrize("make", [city_scenario, valley_scenario])
def test_thousand_samples_have_no_initial_danger(make):
    scn = make()
    rng = np.random.default_rng(1)
    for _ in range(1000):
        world = sample_initial(scn, rng)
        assert not danger(world, scn)
        assert min_npc_distance(world, scn) >= 2.0 * scn.r_col


def test_fixed_seed_reproduces_world():
    scn = city_scenario()
    w1 = sample_initial(scn, np.random.default_rng(7))
    w2 = sample_initial(scn, np.random.default_rng(7))
    assert np.array_equal(w1.ego, w2.ego)
    assert np.array_equal(w1.npcs, w2.npcs)
    assert np.array_equal(w1.goal, w2.goal)
    assert np.array_equal(w1.npc_waypoints, w2.npc_waypoints)


def test_observe_pads_missing_npcs_with_zeros():
    scn = city_scenario(npc_count=0)
    lay = obs_layout(scn)
    world = empty_world(scn, ego=[2, 2, 2, 0, 0, 0, 0, 0], goal=[9, 9, 3])
    obs = observe(world, scn, ref_pos=np.array([3.0, 2.0, 2.0]))
    assert obs.shape == (lay.total,)
    assert np.array_equal(obs[lay.relpos_start:lay.ref_start], np.zeros(48))
    assert np.array_equal(lay.ref_rel(obs), np.array([1.0, 0.0, 0.0]))


def test_observe_single_npc_relative_position():
    scn = city_scenario(npc_count=1)
    lay = obs_layout(scn)
    ego = [2, 2, 2, 0, 0, 0, 0, 0]
    npc = np.zeros((1, 8))
    npc[0, :3] = [3.0, 2.0, 2.0]
    world = empty_world(scn, ego=ego, npcs=npc, goal=[9, 9, 3])
    obs = observe(world, scn, ref_pos=np.array([2.0, 2.0, 2.0]))
    assert np.array_equal(lay.slot_relpos(obs, 0), np.array([1.0, 0.0, 0.0]))
    assert np.array_equal(lay.slot_relpos(obs, 1), np.zeros(3))


def test_observe_keeps_eight_nearest_and_sorts():
    scn = city_scenario(npc_count=9)
    lay = obs_layout(scn)
    rng = np.random.default_rng(3)
    npcs = np.zeros((9, 8))
    npcs[:, :3] = rng.uniform(3, 13, size=(9, 3))
    ego = np.zeros(8)
    ego[:3] = [8.0, 8.0, 3.0]
    world = empty_world(scn, ego=ego, npcs=npcs, goal=[15, 15, 3])
    obs = observe(world, scn, ref_pos=ego[:3])

    rel = npcs[:, :3] - ego[:3]
    dist = np.sort(np.linalg.norm(rel, axis=1))
    got = [np.linalg.norm(lay.slot_relpos(obs, i)) for i in range(N_OBS_SLOTS)]
    assert np.allclose(got, dist[:8])
    assert np.all(np.diff(got) >= 0)
    assert not np.isclose(got[-1], dist[-1])  # farthest of 9 excluded


def test_danger_thresholds_are_strict():
    scn = city_scenario(npc_count=1)
    for factor, expect in ((10.0, False), (0.5, True), (1.0, False)):
        npc = np.zeros((1, 8))
        npc[0, :3] = [2.0 + factor * scn.r_col, 2.0, 3.0]
        ego = np.zeros(8)
        ego[:3] = [2.0, 2.0, 3.0]
        world = empty_world(scn, ego=ego, npcs=npc, goal=[15, 15, 3])
        assert danger(world, scn) is expect


def test_danger_covers_buildings_and_bounds():
    scn = city_scenario(npc_count=0)
    ego = np.zeros(8)
    ego[:3] = [4.0, 4.0, 0.5]  # inside the first building footprint
    assert danger(empty_world(scn, ego=ego, goal=[15, 15, 3]), scn)
    ego[:3] = [-1.0, 4.0, 2.0]
    assert danger(empty_world(scn, ego=ego, goal=[15, 15, 3]), scn)


def test_initial_set_label_needs_double_clearance():
    scn = city_scenario(npc_count=1)
    for factor, expect in ((2.5, True), (1.5, False)):
        npc = np.zeros((1, 8))
        npc[0, :3] = [2.0 + factor * scn.r_col, 2.0, 3.0]
        ego = np.zeros(8)
        ego[:3] = [2.0, 2.0, 3.0]
        world = empty_world(scn, ego=ego, npcs=npc, goal=[15, 15, 3])
        assert in_initial_set(world, scn) is expect


def test_static_npcs_do_not_move():
    scn = city_scenario(npc_count=8, npc_mode="static")
    world = sample_initial(scn, np.random.default_rng(5))
    out = advance_npcs(world, scn, dt=0.05)
    assert np.array_equal(out.npcs, world.npcs)


@pytest.mark.parametrize("make", [city_scenario, valley_scenario])
def test_moving_npc_progresses_toward_waypoint(make):
    scn = make(npc_count=1, npc_mode="moving")
    world = sample_initial(scn, np.random.default_rng(6))
    world.npcs[0, :] = 0.0
    world.npcs[0, :scn.pos_dim] = scn.bounds_lo + 2.0
    wp = world.npcs[0, :scn.pos_dim].copy()
    wp[0] += scn.bounds_hi[0] * 0.5
    world.npc_waypoints[0, :] = wp
    dt = 0.05 if scn.kind == "city" else 0.2
    xs = [world.npcs[0, 0]]
    for _ in range(40):
        world = advance_npcs(world, scn, dt)
        xs.append(world.npcs[0, 0])
    assert xs[-1] > xs[0] + 0.1
    assert np.all(np.diff(xs[5:]) > -1e-9)


def test_moving_npcs_deterministic_for_same_world():
    scn = city_scenario(npc_count=4, npc_mode="moving")
    w0 = sample_initial(scn, np.random.default_rng(9))
    paths = []
    for _ in range(2):
        w = w0.copy()
        states = []
        for _ in range(20):
            w = advance_npcs(w, scn, 0.05)
            states.append(w.npcs.copy())
        paths.append(np.array(states))
    assert np.array_equal(paths[0], paths[1])


def test_observation_length_constant_across_npc_counts():
    for n in (0, 3, 8, 20):
        scn = city_scenario(npc_count=n)
        world = sample_initial(scn, np.random.default_rng(n))
        obs = observe(world, scn, ref_pos=world.ego[:3])
        assert obs.shape == (obs_layout(scn).total,)


def test_danger_agrees_with_bruteforce_all_pairs():
    scn = valley_scenario(npc_count=8)
    rng = np.random.default_rng(11)
    for _ in range(50):
        world = sample_initial(scn, rng)
        world.ego[:2] += rng.uniform(-6, 6, size=2)
        brute = min(np.linalg.norm(world.ego[:2] - q[:2]) for q in world.npcs)
        flag = brute < scn.r_col or not np.all(
            (world.ego[:2] >= scn.bounds_lo) & (world.ego[:2] <= scn.bounds_hi))
        assert danger(world, scn) == flag


def test_building_clearance_values():
    scn = city_scenario()
    assert building_clearance(np.array([4.0, 4.0, 1.0]), scn) == 0.0
    d = building_clearance(np.array([2.0, 4.0, 1.0]), scn)
    assert d == pytest.approx(1.2)  # box half-width 0.8 around x=4


def test_episode_log_jsonl_roundtrip():
    rng = np.random.default_rng(0)
    log = EpisodeLog(
        dt=0.05, kind="city", status="timeout",
        step_index=np.arange(4), state=rng.normal(size=(4, 8)),
        obs=rng.normal(size=(4, 59)), control=rng.normal(size=(4, 3)),
        danger_flag=np.array([False, True, False, False]),
        in_s0=np.array([True, False, True, True]),
        ref_state=rng.normal(size=(4, 6)), u_nom=rng.normal(size=(4, 3)))
    back = EpisodeLog.from_jsonl(log.to_jsonl())
    assert back.status == "timeout" and back.dt == 0.05
    assert np.array_equal(back.state, log.state)
    assert np.array_equal(back.obs, log.obs)
    assert np.array_equal(back.danger_flag, log.danger_flag)
    assert np.array_equal(back.t, log.t)
