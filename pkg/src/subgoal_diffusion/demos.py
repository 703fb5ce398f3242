"""Scripted demonstration collection with per-frame completion labels.

A greedy waypoint planner executes each task's subgoal sequence, one
displacement per step, with small seeded exploration noise on move actions
for demo diversity. The collection loop checks the ground-truth subgoal
condition after every step; the frame whose action completed the active
subgoal is labeled 0, all earlier frames of the segment are labeled 1, so a
stored episode's label string always matches the pattern 1...1 0 1...1 0 ... 0
with exactly one 0 per subgoal.

Only successful episodes are stored. A dataset directory holds
``manifest.json`` plus one ``episode_<seed>.jsonl`` per demo, one frame per
line with keys {proprio, cloud, action, subgoal_index, label}; the manifest
carries per-file digests and the effective collection config.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, asdict
from pathlib import Path

import numpy as np

from .errors import DataError, InputError
from .env import (Env, EnvAction, TaskSpec, WorldState, make_task, check_subgoal,
                  check_success, state_to_json, MAX_STEP, GRASP_RADIUS, GRIP_RADIUS,
                  CLOUD_POINTS, CLOUD_JITTER_STD, MARKER_RADIUS)
from .ioutil import canonical_json, file_digest, read_json, read_jsonl, write_json
from .policy import encode_env_action

DATASET_FORMAT_VERSION = 1

_NOISE_STREAM = 11

_LABEL_PATTERN = re.compile(r"^(1*0)+$")


# Planner travel speed per task.  The free-space tasks move at the full
# actuator step; the drawer planner creeps at half speed because it works
# around an articulated body, which also keeps its long episodes dominated
# by in-progress frames (completion frames stay a rare minority there).
TASK_CRUISE = {
    "pick_place": MAX_STEP,
    "slide_push": MAX_STEP,
    "drawer_open_place": 0.025,
}


@dataclass(frozen=True)
class CollectConfig:
    """Knobs of the scripted collection run (all echoed into the manifest).

    ``cruise`` of None picks the task's own speed from TASK_CRUISE.
    """

    task_name: str
    n_episodes: int = 30
    base_seed: int = 0
    cruise: float | None = None
    noise_std: float = 0.005
    close_dist: float = 0.015
    stuck_patience: int = 20
    seed_budget_factor: int = 50
    unreachable_handle: bool = False

    def __post_init__(self):
        if self.n_episodes < 1:
            raise InputError("n_episodes must be >= 1")
        if self.cruise is None:
            fallback = TASK_CRUISE.get(self.task_name, MAX_STEP)
            object.__setattr__(self, "cruise", fallback)
        if not 0.0 < self.cruise <= MAX_STEP:
            raise InputError(f"cruise must lie in (0, {MAX_STEP}]")
        if self.noise_std < 0.0:
            raise InputError("noise_std must be >= 0")


@dataclass
class Frame:
    proprio: np.ndarray
    cloud: np.ndarray
    action: EnvAction
    subgoal_index: int
    label: int


@dataclass
class Episode:
    seed: int
    frames: list
    success: bool
    initial_state: dict

    @property
    def labels(self) -> list:
        return [f.label for f in self.frames]


_DETOUR_SIDE_GAP = 0.04
_PUSH_OVERLAP = 0.01
_WAYPOINT_REACHED = 0.012
_SEGMENT_CLEAR_MARGIN = 0.005
# Gap kept between the last in-progress frame and a subgoal's detection
# boundary (and, on the other side, how deep the landing step cuts in).
_LAND_CLEARANCE = 0.015


def _segment_distance(a: np.ndarray, b: np.ndarray, p: np.ndarray) -> float:
    """Distance from point p to the segment a-b."""
    ab = b - a
    denom = float(ab @ ab)
    if denom < 1e-18:
        return float(np.linalg.norm(p - a))
    t = float(np.clip((p - a) @ ab / denom, 0.0, 1.0))
    return float(np.linalg.norm(p - (a + t * ab)))


def plan_subgoal_action(task: TaskSpec, state: WorldState, subgoal_index: int,
                        rng: np.random.Generator, cfg: CollectConfig) -> EnvAction:
    """Greedy one-step action toward completing the given subgoal.

    Approaches that end inside a detection radius are quantized: the planner
    chases at cruise speed, pauses on a waypoint exactly _LAND_CLEARANCE
    outside the radius, and lands with one final noise-free step. In-progress
    frames therefore never hug the completion boundary, so the two label
    classes stay separated in observation space. Ordinary chase steps carry
    the seeded exploration noise (drawn only when a noisy move is produced,
    keeping replay order-stable); grip toggles are noise-free zero
    displacements.
    """
    entry = task.plan[subgoal_index]
    kind, target_fn = entry[0], entry[1]
    detect = entry[2] if len(entry) > 2 else None

    def move(target: np.ndarray, detect: float | None = None) -> EnvAction:
        delta = target - state.gripper
        dist = float(np.linalg.norm(delta))
        noisy = True
        if detect is not None:
            pre = detect + _LAND_CLEARANCE
            if dist > pre + 1e-12:
                step = min(cfg.cruise, dist - pre)
                # the step that arrives on the waypoint is exact, and so is
                # the chase step just before it (noise could leak a frame
                # into the clearance band otherwise)
                noisy = dist - pre > cfg.cruise + 4.0 * cfg.noise_std
            else:
                step = min(cfg.cruise, dist)
                noisy = False
        else:
            step = min(cfg.cruise, dist)
        disp = delta / dist * step if dist > 1e-12 else np.zeros(2)
        if noisy and cfg.noise_std > 0.0:
            disp = disp + rng.normal(0.0, cfg.noise_std, size=2)
        return EnvAction(float(disp[0]), float(disp[1]), "hold")

    if kind == "reach":
        return move(target_fn(state), detect)
    if kind == "reach_close":
        target = target_fn(state)
        if float(np.linalg.norm(target - state.gripper)) <= cfg.close_dist:
            return EnvAction(0.0, 0.0, "close")
        return move(target, cfg.close_dist)
    if kind == "close":
        return EnvAction(0.0, 0.0, "close")
    if kind == "open":
        return EnvAction(0.0, 0.0, "open")
    if kind == "pull":
        geo = task.drawer
        remaining = (geo.open_extent - state.drawer_extent) * geo.travel
        if remaining > _LAND_CLEARANCE + 1e-12:
            step = min(cfg.cruise, remaining - _LAND_CLEARANCE)
            noisy = remaining - _LAND_CLEARANCE > cfg.cruise + 4.0 * cfg.noise_std
        else:
            # one opening step carries the handle past the threshold
            step = cfg.cruise
            noisy = False
        disp = geo.axis * step
        if noisy and cfg.noise_std > 0.0:
            disp = disp + rng.normal(0.0, cfg.noise_std, size=2)
        return EnvAction(float(disp[0]), float(disp[1]), "hold")
    if kind == "push":
        block = state.objects[task.pushable]
        contact = block.radius + GRIP_RADIUS
        aim = block.center + np.array([0.0, -(contact - _PUSH_OVERLAP)])
        return move(aim)
    if kind == "reach_detour":
        target = target_fn(state)
        block = state.objects[task.pushable]
        contact = block.radius + GRIP_RADIUS
        waypoints = [target]
        if _segment_distance(state.gripper, target, block.center) < contact + _SEGMENT_CLEAR_MARGIN:
            side = 1.0 if state.gripper[0] >= block.center[0] else -1.0
            side_x = block.center[0] + side * (contact + _DETOUR_SIDE_GAP)
            waypoints.insert(0, np.array([side_x, target[1]]))
            if abs(state.gripper[0] - block.center[0]) < contact + _DETOUR_SIDE_GAP:
                waypoints.insert(0, np.array([side_x, state.gripper[1]]))
        for wp in waypoints:
            if float(np.linalg.norm(wp - state.gripper)) > _WAYPOINT_REACHED:
                return move(wp, detect if wp is target else None)
        return move(target, detect)
    raise InputError(f"unknown plan kind {kind!r}")


def collect_episode(task: TaskSpec, seed: int, cfg: CollectConfig) -> Episode:
    """Run the planner through all subgoals of one seeded episode.

    Each frame pairs the observation of the current state with the action
    executed from it. A frame is labeled 0 when its own state satisfies the
    active subgoal's checker, so the classifier is trained to recognize
    completed states, the same states the runtime reads p from. A finished
    subgoal has nothing left to do, so every 0-frame's action is a
    zero-motion hold; the next subgoal's segment then starts at that same
    state with its own first action under its own conditioning. The policy
    thereby learns to park on completion and wait for the monitor.

    Returns the episode whether or not it succeeded; callers filter. The
    episode fails when max_steps runs out or the stuck detector trips
    (``stuck_patience`` consecutive steps with an unchanged world state).
    """
    env = Env(task, seed)
    env.reset()
    initial_state = state_to_json(env.state)
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence(
        entropy=int(seed), spawn_key=(_NOISE_STREAM,))))

    hold = EnvAction(0.0, 0.0, "hold")
    frames: list = []
    subgoal = 0
    prev_sig = env.state.signature()
    stuck_streak = 0
    while subgoal < task.n_subgoals and len(frames) < task.max_steps:
        obs = env.observe(subgoal)
        if check_subgoal(task, subgoal, env.state):
            frames.append(Frame(proprio=obs.proprio, cloud=obs.cloud.points,
                                action=hold, subgoal_index=subgoal, label=0))
            subgoal += 1
            if subgoal == task.n_subgoals:
                break
            env.step(hold, subgoal)
        else:
            action = plan_subgoal_action(task, env.state, subgoal, rng, cfg)
            frames.append(Frame(proprio=obs.proprio, cloud=obs.cloud.points,
                                action=action, subgoal_index=subgoal, label=1))
            env.step(action, subgoal)
        sig = env.state.signature()
        if sig == prev_sig:
            stuck_streak += 1
            if stuck_streak >= cfg.stuck_patience:
                break
        else:
            stuck_streak = 0
        prev_sig = sig

    success = subgoal == task.n_subgoals and check_success(task, env.state)
    return Episode(seed=int(seed), frames=frames, success=success,
                   initial_state=initial_state)


def _frame_record(frame: Frame) -> dict:
    return {
        "proprio": [float(v) for v in frame.proprio],
        "cloud": [[float(v) for v in row] for row in frame.cloud],
        "action": [float(frame.action.dx), float(frame.action.dy), frame.action.grip],
        "subgoal_index": int(frame.subgoal_index),
        "label": int(frame.label),
    }


@dataclass
class CollectReport:
    path: str
    n_episodes: int
    n_attempts: int
    seeds: list


def collect_dataset(cfg: CollectConfig, out_dir) -> CollectReport:
    """Collect cfg.n_episodes successful demos and write a dataset directory.

    Seeds are scanned upward from base_seed. The run aborts with a
    diagnostic when the planner's success rate falls below 10% after 50
    attempts, or when the 50x seed budget is exhausted.
    """
    task = make_task(cfg.task_name, unreachable_handle=cfg.unreachable_handle)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)

    episodes: list = []
    attempts = 0
    budget = cfg.seed_budget_factor * cfg.n_episodes
    while len(episodes) < cfg.n_episodes:
        if attempts >= budget:
            raise DataError(
                f"seed budget exhausted: {len(episodes)}/{cfg.n_episodes} successes "
                f"in {attempts} attempts on {cfg.task_name}")
        seed = cfg.base_seed + attempts
        attempts += 1
        try:
            episode = collect_episode(task, seed, cfg)
        except InputError:
            continue
        if episode.success:
            episodes.append(episode)
        if attempts >= 50 and len(episodes) / attempts < 0.10:
            raise DataError(
                f"planner success rate {len(episodes)}/{attempts} below 10% "
                f"on {cfg.task_name}; geometry or planner regression likely")

    entries = []
    for ep in episodes:
        name = f"episode_{ep.seed}.jsonl"
        path = out / name
        with open(path, "w", encoding="utf-8") as fh:
            for frame in ep.frames:
                fh.write(canonical_json(_frame_record(frame)))
                fh.write("\n")
        entries.append({
            "seed": ep.seed,
            "file": name,
            "digest": file_digest(path),
            "n_frames": len(ep.frames),
            "initial_state": ep.initial_state,
        })

    manifest = {
        "format_version": DATASET_FORMAT_VERSION,
        "task": task.name,
        "task_description": task.description,
        "subgoals": list(task.subgoals),
        "n_episodes": len(episodes),
        "n_attempts": attempts,
        "config": asdict(cfg),
        "env": {
            "max_step": MAX_STEP,
            "grasp_radius": GRASP_RADIUS,
            "grip_radius": GRIP_RADIUS,
            "cloud_points": CLOUD_POINTS,
            "cloud_jitter_std": CLOUD_JITTER_STD,
            "marker_radius": MARKER_RADIUS,
        },
        "episodes": entries,
    }
    write_json(out / "manifest.json", manifest)
    return CollectReport(path=str(out), n_episodes=len(episodes),
                         n_attempts=attempts, seeds=[e.seed for e in episodes])


@dataclass
class EpisodeData:
    """One loaded demo with frame columns as arrays."""

    seed: int
    proprio: np.ndarray        # (T, 3)
    clouds: np.ndarray         # (T, N, 3)
    actions: np.ndarray        # (T, 3) with grip encoded numerically
    grips: list                # (T,) grip strings
    subgoal_indices: np.ndarray
    labels: np.ndarray

    @property
    def n_frames(self) -> int:
        return len(self.labels)


@dataclass
class Dataset:
    manifest: dict
    episodes: list

    @property
    def task_name(self) -> str:
        return self.manifest["task"]

    @property
    def subgoals(self) -> list:
        return self.manifest["subgoals"]

    @property
    def task_description(self) -> str:
        return self.manifest["task_description"]


def _check_label_pattern(labels, n_subgoals: int, where: str) -> list:
    problems = []
    text = "".join(str(int(v)) for v in labels)
    if not _LABEL_PATTERN.match(text):
        problems.append(f"{where}: label sequence violates the 1...1 0 pattern")
    zeros = sum(1 for v in labels if int(v) == 0)
    if zeros != n_subgoals:
        problems.append(f"{where}: {zeros} zero-labels, expected {n_subgoals}")
    return problems


def _check_subgoal_column(labels, indices, where: str) -> list:
    problems = []
    expected = 0
    for t, (label, idx) in enumerate(zip(labels, indices)):
        if int(idx) != expected:
            problems.append(f"{where}: frame {t} has subgoal_index {idx}, expected {expected}")
            break
        if int(label) == 0:
            expected += 1
    return problems


def load_dataset(path) -> Dataset:
    """Load and validate a dataset directory; raises DataError on corruption."""
    root = Path(path)
    manifest = read_json(root / "manifest.json")
    if manifest.get("format_version") != DATASET_FORMAT_VERSION:
        raise DataError(f"{root}: unsupported dataset format_version "
                        f"{manifest.get('format_version')}")
    episodes = []
    for entry in manifest["episodes"]:
        fpath = root / entry["file"]
        digest = file_digest(fpath)
        if digest != entry["digest"]:
            raise DataError(f"{fpath}: digest mismatch ({digest} != {entry['digest']})")
        records = read_jsonl(fpath)
        if len(records) != entry["n_frames"]:
            raise DataError(f"{fpath}: {len(records)} frames, manifest says "
                            f"{entry['n_frames']}")
        proprio = np.array([r["proprio"] for r in records], dtype=np.float64)
        clouds = np.array([r["cloud"] for r in records], dtype=np.float64)
        grips = [r["action"][2] for r in records]
        actions = np.stack([
            encode_env_action(float(r["action"][0]), float(r["action"][1]), g,
                              MAX_STEP)
            for r, g in zip(records, grips)])
        labels = np.array([int(r["label"]) for r in records], dtype=np.int64)
        indices = np.array([int(r["subgoal_index"]) for r in records], dtype=np.int64)
        problems = _check_label_pattern(labels, len(manifest["subgoals"]), entry["file"])
        problems += _check_subgoal_column(labels, indices, entry["file"])
        if problems:
            raise DataError("; ".join(problems))
        episodes.append(EpisodeData(seed=int(entry["seed"]), proprio=proprio,
                                    clouds=clouds, actions=actions, grips=grips,
                                    subgoal_indices=indices, labels=labels))
    return Dataset(manifest=manifest, episodes=episodes)


def audit_dataset(path) -> list:
    """Integrity scan of a dataset directory; returns problem strings."""
    root = Path(path)
    problems: list = []
    try:
        manifest = read_json(root / "manifest.json")
    except DataError as exc:
        return [str(exc)]
    if manifest.get("format_version") != DATASET_FORMAT_VERSION:
        problems.append(f"unsupported format_version {manifest.get('format_version')}")
        return problems
    n_subgoals = len(manifest.get("subgoals", []))
    for entry in manifest.get("episodes", []):
        fpath = root / entry["file"]
        where = entry["file"]
        if not fpath.exists():
            problems.append(f"{where}: file missing")
            continue
        digest = file_digest(fpath)
        if digest != entry["digest"]:
            problems.append(f"{where}: digest mismatch ({digest} != {entry['digest']})")
            continue
        try:
            records = read_jsonl(fpath)
        except DataError as exc:
            problems.append(str(exc))
            continue
        if len(records) != entry["n_frames"]:
            problems.append(f"{where}: {len(records)} frames, manifest says "
                            f"{entry['n_frames']}")
        labels = [int(r["label"]) for r in records]
        indices = [int(r["subgoal_index"]) for r in records]
        problems += _check_label_pattern(labels, n_subgoals, where)
        problems += _check_subgoal_column(labels, indices, where)
    return problems
