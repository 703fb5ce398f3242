"""Environment tests: kinematics, grasping, tasks, observations, serialization."""

import math

import numpy as np
import pytest

from subgoal_diffusion.env import (CLOUD_POINTS, DRAWER_GEO, Env, EnvAction,
                                   GRASP_RADIUS, GRIP_RADIUS, HANDLE_ID, MAX_STEP,
                                   Obj, REACH_MARKER_RADIUS, RELEASE_MARKER_RADIUS,
                                   Rect, SLIDE_ZONE, TASK_NAMES, WorldState,
                                   check_subgoal, check_success, kinematic_step,
                                   make_observation, make_task, state_from_json,
                                   state_to_json)
from subgoal_diffusion.errors import InputError


def fresh_state(task_name: str, seed: int = 0) -> tuple:
    task = make_task(task_name)
    env = Env(task, seed)
    env.reset()
    return task, env.state


def test_env_action_validation():
    with pytest.raises(InputError):
        EnvAction(0.0, 0.0, grip="squeeze")
    with pytest.raises(InputError):
        EnvAction(math.nan, 0.0)
    act = EnvAction(0.01, -0.02)
    assert act.grip == "hold"


def test_rect_contains():
    r = Rect(np.array([0.5, 0.5]), np.array([0.125, 0.05]))
    assert r.contains([0.55, 0.52])
    assert r.contains([0.625, 0.5])  # boundary inclusive (exact in binary)
    assert not r.contains([0.63, 0.5])
    assert not r.contains([0.5, 0.56])


def test_make_task_errors_and_names():
    with pytest.raises(InputError):
        make_task("stack_cubes")
    with pytest.raises(InputError):
        make_task("pick_place", unreachable_handle=True)
    for name in TASK_NAMES:
        task = make_task(name)
        assert task.name == name
        assert task.n_subgoals == len(task.subgoals)


def test_step_is_pure_and_deterministic():
    task, state = fresh_state("pick_place", seed=3)
    before = state.signature()
    out1 = kinematic_step(task, state, EnvAction(0.02, -0.01))
    out2 = kinematic_step(task, state, EnvAction(0.02, -0.01))
    assert state.signature() == before
    assert out1.signature() == out2.signature()
    assert out1.step_count == state.step_count + 1


def test_displacement_clipped_per_axis():
    task, state = fresh_state("pick_place", seed=1)
    state.gripper = np.array([0.5, 0.5])
    out = kinematic_step(task, state, EnvAction(0.2, -0.2))
    np.testing.assert_allclose(out.gripper, [0.5 + MAX_STEP, 0.5 - MAX_STEP],
                               rtol=0, atol=1e-15)


def test_gripper_clipped_to_workspace():
    task, state = fresh_state("pick_place", seed=1)
    state.gripper = np.array([0.99, 0.01])
    out = kinematic_step(task, state, EnvAction(0.05, -0.05))
    np.testing.assert_allclose(out.gripper, [1.0, 0.0], rtol=0, atol=1e-15)


def test_close_grasps_within_radius_only():
    task, state = fresh_state("pick_place", seed=2)
    rubbish = state.objects["rubbish"].center
    state.gripper = rubbish + np.array([GRASP_RADIUS - 0.005, 0.0])
    out = kinematic_step(task, state, EnvAction(0.0, 0.0, grip="close"))
    assert out.held_id == "rubbish"
    assert out.grip_closed
    np.testing.assert_allclose(out.objects["rubbish"].center, out.gripper,
                               rtol=0, atol=1e-15)

    state.gripper = rubbish + np.array([GRASP_RADIUS + 0.01, 0.0])
    out = kinematic_step(task, state, EnvAction(0.0, 0.0, grip="close"))
    assert out.held_id is None
    assert out.grip_closed


def test_held_object_rides_gripper_until_open():
    task, state = fresh_state("pick_place", seed=2)
    state.gripper = state.objects["rubbish"].center.copy()
    held = kinematic_step(task, state, EnvAction(0.0, 0.0, grip="close"))
    moved = kinematic_step(task, held, EnvAction(0.03, 0.02))
    np.testing.assert_allclose(moved.objects["rubbish"].center, moved.gripper,
                               rtol=0, atol=1e-15)
    dropped = kinematic_step(task, moved, EnvAction(0.01, 0.0, grip="open"))
    assert dropped.held_id is None
    assert not dropped.grip_closed
    # the object stays where it was released, gripper moves on
    after = kinematic_step(task, dropped, EnvAction(0.04, 0.0))
    np.testing.assert_allclose(after.objects["rubbish"].center,
                               dropped.objects["rubbish"].center, rtol=0, atol=1e-15)


def test_grasp_tie_breaks_by_declared_order():
    task, state = fresh_state("drawer_open_place", seed=4)
    handle = DRAWER_GEO.handle_pos(state.drawer_extent)
    # place the item exactly as far from the gripper as the handle
    state.gripper = handle + np.array([0.02, 0.0])
    state.objects["item"].center = state.gripper + np.array([0.02, 0.0])
    out = kinematic_step(task, state, EnvAction(0.0, 0.0, grip="close"))
    assert out.held_id == "item"


def test_push_keeps_block_outside_contact_disc():
    task, state = fresh_state("slide_push", seed=5)
    block = state.objects["block"]
    contact = block.radius + GRIP_RADIUS
    state.gripper = block.center + np.array([0.0, -(contact + 0.004)])
    out = kinematic_step(task, state, EnvAction(0.0, 0.01))
    dist = float(np.linalg.norm(out.objects["block"].center - out.gripper))
    assert dist >= contact - 1e-12
    # block moved forward along the push direction
    assert out.objects["block"].center[1] > block.center[1] - 1e-12


def test_push_moves_block_toward_zone():
    task, state = fresh_state("slide_push", seed=6)
    block = state.objects["block"]
    contact = block.radius + GRIP_RADIUS
    state.gripper = block.center + np.array([0.0, -contact])
    s = state
    for _ in range(40):
        s = kinematic_step(task, s, EnvAction(0.0, 0.02))
        if SLIDE_ZONE.contains(s.objects["block"].center):
            break
    assert SLIDE_ZONE.contains(s.objects["block"].center)
    assert check_success(task, s)


def test_drawer_handle_grasp_and_pull():
    task, state = fresh_state("drawer_open_place", seed=7)
    handle = DRAWER_GEO.handle_pos(0.0)
    state.gripper = handle + np.array([0.01, 0.0])
    grasped = kinematic_step(task, state, EnvAction(0.0, 0.0, grip="close"))
    assert grasped.held_id == HANDLE_ID
    np.testing.assert_allclose(grasped.gripper, handle, rtol=0, atol=1e-15)

    pulled = grasped
    for _ in range(3):
        pulled = kinematic_step(task, pulled, EnvAction(0.0, -0.05))
    expected_extent = 3 * 0.05 / DRAWER_GEO.travel
    assert pulled.drawer_extent == pytest.approx(expected_extent, abs=1e-12)
    np.testing.assert_allclose(pulled.gripper,
                               DRAWER_GEO.handle_pos(pulled.drawer_extent),
                               rtol=0, atol=1e-12)
    # pulling past full travel saturates at extent 1
    for _ in range(20):
        pulled = kinematic_step(task, pulled, EnvAction(0.0, -0.05))
    assert pulled.drawer_extent == 1.0
    # sideways motion while holding the handle does not change the extent
    side = kinematic_step(task, pulled, EnvAction(0.05, 0.0))
    assert side.drawer_extent == pulled.drawer_extent


def test_drawer_release_leaves_extent():
    task, state = fresh_state("drawer_open_place", seed=8)
    state.gripper = DRAWER_GEO.handle_pos(0.0).copy()
    s = kinematic_step(task, state, EnvAction(0.0, 0.0, grip="close"))
    for _ in range(6):
        s = kinematic_step(task, s, EnvAction(0.0, -0.05))
    extent = s.drawer_extent
    released = kinematic_step(task, s, EnvAction(0.0, 0.0, grip="open"))
    assert released.held_id is None
    assert released.drawer_extent == extent
    moved = kinematic_step(task, released, EnvAction(0.03, 0.03))
    assert moved.drawer_extent == extent


def test_keepout_projects_gripper_away_from_handle():
    task = make_task("drawer_open_place", unreachable_handle=True)
    env = Env(task, 9)
    env.reset()
    state = env.state
    handle = DRAWER_GEO.handle_pos(state.drawer_extent)
    state.gripper = handle + np.array([0.0, -(task.handle_keepout + 0.01)])
    s = state
    for _ in range(30):
        s = kinematic_step(task, s, EnvAction(0.0, 0.05))
        assert float(np.linalg.norm(s.gripper - handle)) >= task.handle_keepout - 1e-12
    # the close command finds nothing graspable from outside the keepout disc
    grabbed = kinematic_step(task, s, EnvAction(0.0, 0.0, grip="close"))
    assert grabbed.held_id is None


def test_pick_place_checkers():
    task, state = fresh_state("pick_place", seed=10)
    assert not any(check_subgoal(task, i, state) for i in range(4))
    state.gripper = state.objects["rubbish"].center.copy()
    held = kinematic_step(task, state, EnvAction(0.0, 0.0, grip="close"))
    assert check_subgoal(task, 0, held)
    held.gripper = np.array([0.5, 0.5]) + np.array([0.03, 0.0])
    assert check_subgoal(task, 1, held)

    bin_rect = state.regions["bin"]
    held.gripper = bin_rect.center.copy()
    held.objects["rubbish"].center = bin_rect.center.copy()
    assert check_subgoal(task, 2, held)
    assert not check_subgoal(task, 3, held)  # still gripping
    dropped = kinematic_step(task, held, EnvAction(0.0, 0.0, grip="open"))
    assert check_subgoal(task, 3, dropped)
    assert check_success(task, dropped)
    with pytest.raises(InputError):
        check_subgoal(task, 4, state)


def test_drawer_checkers_sequence():
    task, state = fresh_state("drawer_open_place", seed=11)
    s = state.copy()
    s.gripper = DRAWER_GEO.handle_pos(0.0) + np.array([0.02, 0.0])
    assert check_subgoal(task, 0, s)
    s = kinematic_step(task, s, EnvAction(0.0, 0.0, grip="close"))
    assert check_subgoal(task, 1, s)
    assert not check_subgoal(task, 2, s)
    while s.drawer_extent < DRAWER_GEO.open_extent:
        s = kinematic_step(task, s, EnvAction(0.0, -0.05))
    assert check_subgoal(task, 2, s)
    assert not check_subgoal(task, 3, s)
    s = kinematic_step(task, s, EnvAction(0.0, 0.0, grip="open"))
    assert check_subgoal(task, 3, s)
    s.gripper = s.objects["item"].center.copy()
    s = kinematic_step(task, s, EnvAction(0.0, 0.0, grip="close"))
    assert check_subgoal(task, 4, s)
    tray = DRAWER_GEO.tray_center(s.drawer_extent)
    s.gripper = tray.copy()
    s.objects["item"].center = s.gripper.copy()
    assert check_subgoal(task, 5, s)
    s = kinematic_step(task, s, EnvAction(0.0, 0.0, grip="open"))
    assert check_subgoal(task, 6, s)
    assert check_success(task, s)


def test_observation_layout_and_relative_frame():
    task, state = fresh_state("pick_place", seed=12)
    obs = make_observation(task, state, 0, episode_seed=12)
    pts = obs.cloud.points
    assert pts.shape == (CLOUD_POINTS, 3)
    # z channel mirrors the grip flag
    assert np.all(pts[:, 2] == 0.0)
    closed = state.copy()
    closed.grip_closed = True
    closed_pts = make_observation(task, closed, 0, episode_seed=12).cloud.points
    assert np.all(closed_pts[:, 2] == 1.0)
    center, radius = task.affordance(state, 0)
    rel_center = pts[:, :2].mean(axis=0) + state.gripper
    # ring mean sits at the affordance center up to jitter noise
    assert float(np.linalg.norm(rel_center - center)) < 0.004
    radii = np.linalg.norm(pts[:, :2] + state.gripper - center, axis=1)
    assert abs(float(radii.mean()) - radius) < 0.004
    np.testing.assert_allclose(obs.proprio,
                               [state.gripper[0], state.gripper[1], 0.0],
                               rtol=0, atol=1e-15)
    assert obs.subgoal_description == task.subgoals[0]
    with pytest.raises(InputError):
        make_observation(task, state, 9, episode_seed=12)


def test_observation_jitter_keyed_by_seed_and_step():
    task, state = fresh_state("pick_place", seed=13)
    a = make_observation(task, state, 0, episode_seed=13)
    b = make_observation(task, state, 0, episode_seed=13)
    np.testing.assert_array_equal(a.cloud.points, b.cloud.points)
    c = make_observation(task, state, 0, episode_seed=14)
    assert not np.array_equal(a.cloud.points, c.cloud.points)
    stepped = state.copy()
    stepped.step_count += 1
    d = make_observation(task, stepped, 0, episode_seed=13)
    assert not np.array_equal(a.cloud.points, d.cloud.points)


def test_observation_tracks_active_subgoal_target():
    task, state = fresh_state("pick_place", seed=15)
    obs0 = make_observation(task, state, 0, episode_seed=15)
    obs1 = make_observation(task, state, 1, episode_seed=15)
    # different affordances for different subgoals, same state
    m0 = obs0.cloud.points[:, :2].mean(axis=0)
    m1 = obs1.cloud.points[:, :2].mean(axis=0)
    assert float(np.linalg.norm(m0 - m1)) > 0.01


def test_affordance_radius_encodes_subgoal_kind():
    """Grasp, move-to, and release markers use three distinct ring sizes."""
    task, state = fresh_state("pick_place", seed=16)
    radii = [task.affordance(state, i)[1] for i in range(task.n_subgoals)]
    assert radii == [state.objects["rubbish"].radius, REACH_MARKER_RADIUS,
                     REACH_MARKER_RADIUS, RELEASE_MARKER_RADIUS]
    assert radii[0] < REACH_MARKER_RADIUS < RELEASE_MARKER_RADIUS
    # same split on the drawer task: approach, grasp, pull, release
    dtask, dstate = fresh_state("drawer_open_place", seed=16)
    dradii = [dtask.affordance(dstate, i)[1] for i in range(dtask.n_subgoals)]
    assert dradii[0] == REACH_MARKER_RADIUS
    assert dradii[1] == dtask.drawer.handle_radius
    assert dradii[3] == RELEASE_MARKER_RADIUS
    assert dradii[5] == REACH_MARKER_RADIUS
    assert dradii[6] == RELEASE_MARKER_RADIUS
    # the pull marker sits at the handle's open-enough pose, not the current one
    pull_center = dtask.affordance(dstate, 2)[0]
    assert dstate.drawer_extent == 0.0
    goal = dtask.drawer.handle_pos(dtask.drawer.open_extent)
    np.testing.assert_allclose(pull_center, goal, rtol=0, atol=1e-15)
    here = dtask.drawer.handle_pos(dstate.drawer_extent)
    assert float(np.linalg.norm(goal - here)) > 0.1


def test_env_reset_deterministic_and_feasible():
    for name in TASK_NAMES:
        task = make_task(name)
        sig_by_seed = {}
        for seed in range(40):
            env = Env(task, seed)
            env.reset()  # raises InputError if any subgoal starts complete
            for i in range(task.n_subgoals):
                assert not check_subgoal(task, i, env.state)
            sig_by_seed[seed] = env.state.signature()
        env2 = Env(task, 17)
        env2.reset()
        assert env2.state.signature() == sig_by_seed[17]
        assert len(set(sig_by_seed.values())) == 40


def test_env_step_before_reset_raises():
    env = Env(make_task("pick_place"), 0)
    with pytest.raises(InputError):
        env.step(EnvAction(0.0, 0.0), 0)


def test_containment_fuzz_random_actions():
    rng = np.random.default_rng(99)
    for name in TASK_NAMES:
        task = make_task(name)
        env = Env(task, 21)
        env.reset()
        for _ in range(150):
            grip = ("hold", "close", "open")[rng.integers(3)]
            act = EnvAction(float(rng.uniform(-0.08, 0.08)),
                            float(rng.uniform(-0.08, 0.08)), grip)
            env.step(act, 0)
            s = env.state
            assert np.all(s.gripper >= 0.0) and np.all(s.gripper <= 1.0)
            for obj in s.objects.values():
                assert np.all(obj.center >= 0.0) and np.all(obj.center <= 1.0)
            if s.drawer_extent is not None:
                assert 0.0 <= s.drawer_extent <= 1.0


def test_state_json_round_trip():
    for name in TASK_NAMES:
        task = make_task(name)
        env = Env(task, 33)
        env.reset()
        env.step(EnvAction(0.02, 0.01, "close"), 0)
        state = env.state
        back = state_from_json(state_to_json(state))
        assert back.signature() == state.signature()
        assert back.regions.keys() == state.regions.keys()
        for key, rect in state.regions.items():
            np.testing.assert_array_equal(back.regions[key].center, rect.center)
            np.testing.assert_array_equal(back.regions[key].half, rect.half)
        assert back.step_count == state.step_count
