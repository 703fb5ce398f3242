"""A 2D kinematic manipulation bench with subgoal-decomposed tasks.

The world is the unit square. A point gripper moves by bounded displacements,
can close on nearby graspable objects (which then ride along with it), can
push the sliding block by disc contact, and can pull a drawer whose handle
travels on a fixed axis. There is no dynamics, only kinematic updates, which
keeps every trajectory exactly reproducible from its seed.

Observations are egocentric: the affordance point cloud of the active
subgoal's target is expressed relative to the gripper, so "the target is
centered" looks the same wherever the scene was randomized. Proprioception
carries the absolute gripper position and the grip flag. Every affordance
target is sampled as a circle boundary whose radius encodes the subgoal
kind (grasp targets use the object's own radius, move-to goals a wider
marker, release zones wider still), and the cloud's z channel carries the
camera-visible gripper aperture. Regions used for containment checks (bin,
drawer tray) expose a circular marker at their center as the affordance.

Tasks:
  pick_place          grasp a rubbish disc, pass through a home pose, carry
                      it above the bin, release.
  slide_push          get behind the sliding block, push it up into a target
                      band.
  drawer_open_place   reach and grasp the drawer handle, pull the drawer
                      open, release, fetch the item, drop it into the tray.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import InputError
from .nn import PointCloud

WORKSPACE_LOW = 0.0
WORKSPACE_HIGH = 1.0
MAX_STEP = 0.05
GRASP_RADIUS = 0.03
GRIP_RADIUS = 0.02
MARKER_RADIUS = 0.02
# Affordance rings come in three sizes so the three subgoal kinds are
# geometrically distinct in the cloud: grasp targets use the object's own
# radius, move-to goals use a wider marker, release zones wider still.
REACH_MARKER_RADIUS = 0.03
RELEASE_MARKER_RADIUS = 0.045
CLOUD_POINTS = 64
CLOUD_JITTER_STD = 0.002
HANDLE_ID = "handle"

TASK_NAMES = ("pick_place", "slide_push", "drawer_open_place")

_RESET_STREAM = 3
_OBS_STREAM = 7


@dataclass
class EnvAction:
    """One environment step: a displacement plus a grip command."""

    dx: float
    dy: float
    grip: str = "hold"

    def __post_init__(self):
        if self.grip not in ("open", "close", "hold"):
            raise InputError(f"unknown grip command {self.grip!r}")
        if not (math.isfinite(self.dx) and math.isfinite(self.dy)):
            raise InputError("non-finite action displacement")


@dataclass
class Obj:
    center: np.ndarray
    radius: float

    def copy(self) -> "Obj":
        return Obj(self.center.copy(), self.radius)


@dataclass(frozen=True)
class Rect:
    center: np.ndarray
    half: np.ndarray

    def contains(self, point) -> bool:
        p = np.asarray(point, dtype=np.float64)
        return bool(np.all(np.abs(p - self.center) <= self.half))


@dataclass
class WorldState:
    gripper: np.ndarray
    grip_closed: bool
    objects: dict[str, Obj]
    regions: dict[str, Rect] = field(default_factory=dict)
    held_id: str | None = None
    drawer_extent: float | None = None
    step_count: int = 0

    def copy(self) -> "WorldState":
        # regions are frozen per episode, safe to share
        return WorldState(self.gripper.copy(), self.grip_closed,
                          {k: o.copy() for k, o in self.objects.items()},
                          self.regions, self.held_id, self.drawer_extent,
                          self.step_count)

    def is_held(self, obj_id: str) -> bool:
        return self.held_id == obj_id

    def signature(self) -> tuple:
        """Hashable snapshot used by the stuck detector."""
        objs = tuple((k, float(o.center[0]), float(o.center[1]))
                     for k, o in sorted(self.objects.items()))
        return (float(self.gripper[0]), float(self.gripper[1]), self.grip_closed,
                self.held_id, self.drawer_extent, objs)


@dataclass(frozen=True)
class DrawerGeometry:
    body_center: np.ndarray
    body_half: np.ndarray
    axis: np.ndarray
    travel: float
    handle_base: np.ndarray
    handle_radius: float
    tray_half: np.ndarray
    open_extent: float = 0.8

    def handle_pos(self, extent: float) -> np.ndarray:
        return self.handle_base + extent * self.travel * self.axis

    def tray_center(self, extent: float) -> np.ndarray:
        return self.body_center + extent * self.travel * self.axis

    def tray_rect(self, extent: float) -> Rect:
        return Rect(self.tray_center(extent), self.tray_half)


@dataclass(frozen=True)
class Observation:
    """What the policy sees at one step (egocentric cloud, absolute proprio)."""

    proprio: np.ndarray
    cloud: PointCloud
    task_description: str
    subgoal_description: str
    subgoal_index: int
    step_count: int


@dataclass(frozen=True)
class TaskSpec:
    """A task: subgoal strings, their checkers, geometry, and planner hints."""

    name: str
    description: str
    subgoals: tuple[str, ...]
    max_steps: int
    target_ids: tuple[str, ...]
    checkers: tuple
    success: object
    affordance: object
    sampler: object
    plan: tuple
    graspable: tuple[str, ...] = ()
    pushable: str | None = None
    drawer: DrawerGeometry | None = None
    handle_keepout: float | None = None

    @property
    def n_subgoals(self) -> int:
        return len(self.subgoals)


def _clip_workspace(p: np.ndarray) -> np.ndarray:
    return np.clip(p, WORKSPACE_LOW, WORKSPACE_HIGH)


def kinematic_step(task: TaskSpec, state: WorldState, action: EnvAction) -> WorldState:
    """Pure one-step transition. The input state is not mutated.

    Order of effects: displacement (clipped per axis), drawer/keepout
    constraints, carried object update, push contact, then the grip command.
    A close command grasps the nearest graspable within reach; ties break by
    the task's declared graspable order.
    """
    s = state.copy()
    dx = float(np.clip(action.dx, -MAX_STEP, MAX_STEP))
    dy = float(np.clip(action.dy, -MAX_STEP, MAX_STEP))
    disp = np.array([dx, dy])

    if s.held_id == HANDLE_ID:
        geo = task.drawer
        extent = float(np.clip(s.drawer_extent + disp @ geo.axis / geo.travel, 0.0, 1.0))
        s.drawer_extent = extent
        s.gripper = geo.handle_pos(extent)
    else:
        g = _clip_workspace(s.gripper + disp)
        if task.handle_keepout is not None and task.drawer is not None:
            handle = task.drawer.handle_pos(s.drawer_extent)
            offset = g - handle
            dist = float(np.linalg.norm(offset))
            if dist < task.handle_keepout:
                if dist < 1e-12:
                    offset = s.gripper - handle
                    dist = float(np.linalg.norm(offset))
                if dist < 1e-12:
                    offset, dist = np.array([0.0, -1.0]), 1.0
                g = _clip_workspace(handle + offset / dist * task.handle_keepout)
        s.gripper = g
        if s.held_id is not None:
            s.objects[s.held_id].center = s.gripper.copy()
        if task.pushable is not None:
            block = s.objects[task.pushable]
            offset = block.center - s.gripper
            dist = float(np.linalg.norm(offset))
            contact = block.radius + GRIP_RADIUS
            if dist < contact:
                if dist < 1e-12:
                    norm = float(np.linalg.norm(disp))
                    offset = disp / norm if norm > 1e-12 else np.array([0.0, 1.0])
                else:
                    offset = offset / dist
                block.center = _clip_workspace(s.gripper + offset * contact)

    if action.grip == "close":
        s.grip_closed = True
        if s.held_id is None:
            best_id, best_dist = None, GRASP_RADIUS
            candidates = list(task.graspable)
            if task.drawer is not None:
                candidates.append(HANDLE_ID)
            for obj_id in candidates:
                pos = (task.drawer.handle_pos(s.drawer_extent) if obj_id == HANDLE_ID
                       else s.objects[obj_id].center)
                d = float(np.linalg.norm(pos - s.gripper))
                if d < best_dist:
                    best_id, best_dist = obj_id, d
            if best_id is not None:
                s.held_id = best_id
                if best_id == HANDLE_ID:
                    s.gripper = task.drawer.handle_pos(s.drawer_extent)
                else:
                    s.objects[best_id].center = s.gripper.copy()
    elif action.grip == "open":
        s.grip_closed = False
        s.held_id = None

    s.step_count += 1
    return s


def check_subgoal(task: TaskSpec, index: int, state: WorldState) -> bool:
    """Ground-truth completion of one subgoal, a pure function of state."""
    if not 0 <= index < task.n_subgoals:
        raise InputError(f"subgoal index {index} outside 0..{task.n_subgoals - 1} "
                         f"for task {task.name}")
    return bool(task.checkers[index](state))


def check_success(task: TaskSpec, state: WorldState) -> bool:
    return bool(task.success(state))


def make_observation(task: TaskSpec, state: WorldState, subgoal_index: int,
                     episode_seed: int) -> Observation:
    """Build the egocentric observation for the given active subgoal.

    The cloud jitter generator is keyed by (episode seed, step count), so
    re-observing the same state yields identical points.
    """
    if not 0 <= subgoal_index < task.n_subgoals:
        raise InputError(f"subgoal index {subgoal_index} out of range")
    center, radius = task.affordance(state, subgoal_index)
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence(
        entropy=int(episode_seed), spawn_key=(_OBS_STREAM, int(state.step_count)))))
    angles = 2.0 * math.pi * (np.arange(CLOUD_POINTS) + 0.5) / CLOUD_POINTS
    ring = np.stack([center[0] + radius * np.cos(angles),
                     center[1] + radius * np.sin(angles)], axis=1)
    pts = ring + rng.normal(0.0, CLOUD_JITTER_STD, size=(CLOUD_POINTS, 2))
    rel = pts - state.gripper
    # The z channel carries the camera-visible gripper aperture (a real
    # camera sees the fingers). It rides the cloud rather than proprio alone
    # so the point encoder can form joint geometry-and-grip features.
    grip01 = 1.0 if state.grip_closed else 0.0
    cloud = PointCloud(np.column_stack([rel, np.full(CLOUD_POINTS, grip01)]))
    proprio = np.array([state.gripper[0], state.gripper[1],
                        1.0 if state.grip_closed else 0.0])
    return Observation(proprio=proprio, cloud=cloud,
                       task_description=task.description,
                       subgoal_description=task.subgoals[subgoal_index],
                       subgoal_index=subgoal_index,
                       step_count=state.step_count)


class Env:
    """Stateful convenience wrapper over the pure transition functions."""

    def __init__(self, task: TaskSpec, seed: int):
        self.task = task
        self.seed = int(seed)
        self.state: WorldState | None = None

    def reset(self) -> Observation:
        rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence(
            entropy=self.seed, spawn_key=(_RESET_STREAM,))))
        self.state = self.task.sampler(rng)
        for i in range(self.task.n_subgoals):
            if check_subgoal(self.task, i, self.state):
                raise InputError(f"reset produced a pre-completed subgoal {i} "
                                 f"for task {self.task.name}, seed {self.seed}")
        return self.observe(0)

    def step(self, action: EnvAction, subgoal_index: int) -> Observation:
        if self.state is None:
            raise InputError("step before reset")
        self.state = kinematic_step(self.task, self.state, action)
        return self.observe(subgoal_index)

    def observe(self, subgoal_index: int) -> Observation:
        return make_observation(self.task, self.state, subgoal_index, self.seed)


# ---------------------------------------------------------------------------
# task library


def _sample_uniform(rng, lo, hi) -> np.ndarray:
    return np.array([rng.uniform(lo[0], hi[0]), rng.uniform(lo[1], hi[1])])


def _rejection(rng, draw, ok, what: str, tries: int = 1000):
    for _ in range(tries):
        value = draw(rng)
        if ok(value):
            return value
    raise InputError(f"could not sample a feasible {what} after {tries} attempts")


PICK_HOME = np.array([0.5, 0.5])
PICK_BIN_HALF = np.array([0.06, 0.06])
PICK_REACH_TOL = 0.04


def _build_pick_place() -> TaskSpec:
    home = PICK_HOME

    def sampler(rng: np.random.Generator) -> WorldState:
        rubbish = _sample_uniform(rng, (0.15, 0.15), (0.85, 0.45))
        bin_center = _sample_uniform(rng, (0.20, 0.68), (0.80, 0.86))

        def gripper_ok(g):
            return (np.linalg.norm(g - home) > 0.06
                    and np.linalg.norm(g - bin_center) > 0.06
                    and np.linalg.norm(g - rubbish) > 0.05)

        gripper = _rejection(rng, lambda r: _sample_uniform(r, (0.10, 0.10), (0.90, 0.60)),
                             gripper_ok, "pick_place gripper pose")
        return WorldState(gripper=gripper, grip_closed=False,
                          objects={"rubbish": Obj(rubbish, 0.02)},
                          regions={"bin": Rect(bin_center, PICK_BIN_HALF)})

    def bin_rect(state: WorldState) -> Rect:
        return state.regions["bin"]

    checkers = (
        lambda s: s.is_held("rubbish"),
        lambda s: float(np.linalg.norm(s.gripper - home)) <= PICK_REACH_TOL,
        lambda s: float(np.linalg.norm(s.gripper - bin_rect(s).center)) <= PICK_REACH_TOL,
        lambda s: bin_rect(s).contains(s.objects["rubbish"].center) and not s.grip_closed,
    )

    def affordance(state: WorldState, idx: int):
        if idx == 0:
            return state.objects["rubbish"].center, state.objects["rubbish"].radius
        if idx == 1:
            return home, REACH_MARKER_RADIUS
        if idx == 2:
            return bin_rect(state).center, REACH_MARKER_RADIUS
        return bin_rect(state).center, RELEASE_MARKER_RADIUS

    plan = (
        ("reach_close", lambda s: s.objects["rubbish"].center),
        ("reach", lambda s: home, PICK_REACH_TOL),
        ("reach", lambda s: bin_rect(s).center, PICK_REACH_TOL),
        ("open", None),
    )

    return TaskSpec(
        name="pick_place",
        description="put the rubbish in the bin",
        subgoals=("grasp the rubbish",
                  "reset to the default position",
                  "move the rubbish above the bin",
                  "open the gripper to drop the rubbish"),
        max_steps=120,
        target_ids=("rubbish", "home_marker", "bin_marker", "bin_marker"),
        checkers=checkers,
        success=checkers[3],
        affordance=affordance,
        sampler=sampler,
        plan=plan,
        graspable=("rubbish",),
    )


SLIDE_ZONE = Rect(np.array([0.5, 0.78]), np.array([0.28, 0.07]))
SLIDE_BEHIND_OFFSET = 0.055
SLIDE_BEHIND_TOL = 0.02
SLIDE_CONTACT = 0.025 + GRIP_RADIUS


def _build_slide_push() -> TaskSpec:
    def behind_point(state: WorldState) -> np.ndarray:
        return state.objects["block"].center + np.array([0.0, -SLIDE_BEHIND_OFFSET])

    def sampler(rng: np.random.Generator) -> WorldState:
        block = _sample_uniform(rng, (0.30, 0.20), (0.70, 0.40))
        bp = block + np.array([0.0, -SLIDE_BEHIND_OFFSET])

        def gripper_ok(g):
            return (np.linalg.norm(g - bp) > 0.04
                    and np.linalg.norm(g - block) > SLIDE_CONTACT + 0.01)

        gripper = _rejection(rng, lambda r: _sample_uniform(r, (0.10, 0.08), (0.90, 0.30)),
                             gripper_ok, "slide_push gripper pose")
        return WorldState(gripper=gripper, grip_closed=False,
                          objects={"block": Obj(block, 0.025)})

    checkers = (
        lambda s: float(np.linalg.norm(s.gripper - behind_point(s))) <= SLIDE_BEHIND_TOL,
        lambda s: SLIDE_ZONE.contains(s.objects["block"].center),
    )

    def affordance(state: WorldState, idx: int):
        return state.objects["block"].center, state.objects["block"].radius

    plan = (
        ("reach_detour", behind_point, SLIDE_BEHIND_TOL),
        ("push", None),
    )

    return TaskSpec(
        name="slide_push",
        description="slide the block to the target zone",
        subgoals=("move behind the block",
                  "push the block to the target zone"),
        max_steps=120,
        target_ids=("block", "block"),
        checkers=checkers,
        success=checkers[1],
        affordance=affordance,
        sampler=sampler,
        plan=plan,
        pushable="block",
    )


DRAWER_GEO = DrawerGeometry(
    body_center=np.array([0.70, 0.83]),
    body_half=np.array([0.10, 0.055]),
    axis=np.array([0.0, -1.0]),
    travel=0.18,
    handle_base=np.array([0.70, 0.755]),
    handle_radius=MARKER_RADIUS,
    tray_half=np.array([0.085, 0.05]),
)
DRAWER_HANDLE_REACH_TOL = 0.025
DRAWER_TRAY_REACH_TOL = 0.035


def _build_drawer(unreachable_handle: bool = False) -> TaskSpec:
    geo = DRAWER_GEO

    def sampler(rng: np.random.Generator) -> WorldState:
        item = _sample_uniform(rng, (0.12, 0.15), (0.45, 0.45))

        def gripper_ok(g):
            return (np.linalg.norm(g - geo.handle_base) > 0.06
                    and np.linalg.norm(g - item) > 0.05)

        gripper = _rejection(rng, lambda r: _sample_uniform(r, (0.08, 0.08), (0.55, 0.50)),
                             gripper_ok, "drawer gripper pose")
        return WorldState(gripper=gripper, grip_closed=False,
                          objects={"item": Obj(item, 0.02)}, drawer_extent=0.0)

    def open_enough(s: WorldState) -> bool:
        return s.drawer_extent >= geo.open_extent

    checkers = (
        lambda s: float(np.linalg.norm(s.gripper - geo.handle_pos(s.drawer_extent)))
        <= DRAWER_HANDLE_REACH_TOL,
        lambda s: s.is_held(HANDLE_ID),
        open_enough,
        lambda s: open_enough(s) and not s.is_held(HANDLE_ID),
        lambda s: s.is_held("item"),
        lambda s: float(np.linalg.norm(s.gripper - geo.tray_center(s.drawer_extent)))
        <= DRAWER_TRAY_REACH_TOL,
        lambda s: (open_enough(s)
                   and geo.tray_rect(s.drawer_extent).contains(s.objects["item"].center)
                   and not s.grip_closed),
    )

    def affordance(state: WorldState, idx: int):
        if idx == 0:
            return geo.handle_pos(state.drawer_extent), REACH_MARKER_RADIUS
        if idx == 1:
            return geo.handle_pos(state.drawer_extent), geo.handle_radius
        if idx == 2:
            # The pull subgoal is about where the handle must end up, so its
            # marker sits at the handle's open-enough pose. The gripper rides
            # the handle while pulling, which makes the remaining travel
            # directly visible as the marker offset.
            return geo.handle_pos(geo.open_extent), geo.handle_radius
        if idx == 3:
            return geo.handle_pos(state.drawer_extent), RELEASE_MARKER_RADIUS
        if idx == 4:
            return state.objects["item"].center, state.objects["item"].radius
        if idx == 5:
            return geo.tray_center(state.drawer_extent), REACH_MARKER_RADIUS
        return geo.tray_center(state.drawer_extent), RELEASE_MARKER_RADIUS

    plan = (
        ("reach", lambda s: geo.handle_pos(s.drawer_extent), DRAWER_HANDLE_REACH_TOL),
        ("close", None),
        ("pull", None),
        ("open", None),
        ("reach_close", lambda s: s.objects["item"].center),
        ("reach", lambda s: geo.tray_center(s.drawer_extent), DRAWER_TRAY_REACH_TOL),
        ("open", None),
    )

    return TaskSpec(
        name="drawer_open_place",
        description="open the drawer and put the item inside",
        subgoals=("move to the drawer handle",
                  "grasp the drawer handle",
                  "pull the drawer open",
                  "release the drawer handle",
                  "grasp the item",
                  "move the item above the drawer",
                  "open the gripper to drop the item"),
        max_steps=300,
        target_ids=(HANDLE_ID, HANDLE_ID, HANDLE_ID, HANDLE_ID,
                    "item", "tray_marker", "tray_marker"),
        checkers=checkers,
        success=checkers[6],
        affordance=affordance,
        sampler=sampler,
        plan=plan,
        graspable=("item",),
        drawer=geo,
        handle_keepout=0.08 if unreachable_handle else None,
    )


def state_to_json(state: WorldState) -> dict:
    """Plain-data snapshot of a world state, round-trippable via json."""
    out = {
        "gripper": [float(state.gripper[0]), float(state.gripper[1])],
        "grip_closed": bool(state.grip_closed),
        "objects": {k: {"center": [float(o.center[0]), float(o.center[1])],
                        "radius": float(o.radius)}
                    for k, o in sorted(state.objects.items())},
        "regions": {k: {"center": [float(r.center[0]), float(r.center[1])],
                        "half": [float(r.half[0]), float(r.half[1])]}
                    for k, r in sorted(state.regions.items())},
        "held_id": state.held_id,
        "drawer_extent": None if state.drawer_extent is None else float(state.drawer_extent),
        "step_count": int(state.step_count),
    }
    return out


def state_from_json(data: dict) -> WorldState:
    objects = {k: Obj(np.array(v["center"], dtype=np.float64), float(v["radius"]))
               for k, v in data["objects"].items()}
    regions = {k: Rect(np.array(v["center"], dtype=np.float64),
                       np.array(v["half"], dtype=np.float64))
               for k, v in data["regions"].items()}
    extent = data["drawer_extent"]
    return WorldState(gripper=np.array(data["gripper"], dtype=np.float64),
                      grip_closed=bool(data["grip_closed"]),
                      objects=objects, regions=regions,
                      held_id=data["held_id"],
                      drawer_extent=None if extent is None else float(extent),
                      step_count=int(data["step_count"]))


def make_task(name: str, unreachable_handle: bool = False) -> TaskSpec:
    """Build a task by name.

    ``unreachable_handle`` applies to drawer_open_place only: a keep-out disc
    around the handle blocks the gripper, a forced-failure variant for
    stall-behavior studies.
    """
    if name == "pick_place":
        task = _build_pick_place()
    elif name == "slide_push":
        task = _build_slide_push()
    elif name == "drawer_open_place":
        return _build_drawer(unreachable_handle)
    else:
        raise InputError(f"unknown task {name!r}; known: {', '.join(TASK_NAMES)}")
    if unreachable_handle:
        raise InputError(f"unreachable_handle only applies to drawer_open_place, not {name}")
    return task
