"""Closed-loop policy execution as a subgoal state machine.

The executor holds a pointer into the task's subgoal list. Each control step
it samples (or continues) an action chunk conditioned on the active subgoal,
executes one action, then re-observes and queries the completion head from
the freshest observation, still under the active subgoal. When the predicted
incompleteness p drops strictly below the threshold tau, the pointer
advances and any unexecuted actions of the current chunk are discarded. In
oracle mode the ground-truth subgoal checker replaces the head.

A subgoal that makes no progress for ``subgoal_timeout`` steps stalls the
episode: execution stops with the frozen subgoal identified in the trace,
which is the intended failure-localization behavior, not a crash.

Traces are jsonl: one meta line, one line per step, one terminal line.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, asdict
from pathlib import Path

import numpy as np

from .errors import ConfigurationError, DataError, InputError
from .env import (Env, EnvAction, TaskSpec, make_task, check_subgoal, check_success,
                  state_to_json, kinematic_step, MAX_STEP)
from .ioutil import canonical_json, read_jsonl
from .nn import PointCloud
from .policy import PolicyModel, decode_action_row

TRACE_FORMAT_VERSION = 1

_CHUNK_STREAM = 31


@dataclass(frozen=True)
class RuntimeConfig:
    """Closed-loop execution knobs (echoed into every trace header)."""

    tau: float = 0.2
    execute_steps: int = 4
    subgoal_timeout: int = 100
    oracle_completion: bool = False
    ablate_subgoal: bool = False
    rng_seed: int = 0

    def __post_init__(self):
        if not 0.0 < self.tau < 1.0:
            raise ConfigurationError(f"tau must lie in (0, 1), got {self.tau}")
        if self.execute_steps < 1:
            raise ConfigurationError("execute_steps must be >= 1")
        if self.subgoal_timeout < 1:
            raise ConfigurationError("subgoal_timeout must be >= 1")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "RuntimeConfig":
        return cls(**d)


@dataclass
class EpisodeTrace:
    meta: dict
    steps: list
    terminal: dict

    @property
    def success(self) -> bool:
        return bool(self.terminal["success"])


def _chunk_seed(run_seed: int, env_seed: int, chunk_counter: int) -> int:
    ss = np.random.SeedSequence([int(run_seed), int(env_seed),
                                 int(chunk_counter), _CHUNK_STREAM])
    return int(ss.generate_state(1, np.uint64)[0])


def run_episode(model: PolicyModel, task: TaskSpec, env_seed: int,
                cfg: RuntimeConfig) -> EpisodeTrace:
    """Execute one seeded episode and return its full trace."""
    env = Env(task, env_seed)
    env.reset()
    initial_state = state_to_json(env.state)
    config = model.config
    history = [env.observe(0).proprio]

    def window():
        padded = [history[0]] * max(0, config.obs_history - len(history)) + history
        return np.concatenate(padded[-config.obs_history:])

    subgoal = 0
    pending: deque = deque()
    chunk_counter = 0
    steps = 0
    advance_steps: list = []
    per_subgoal_steps = {i: 0 for i in range(task.n_subgoals)}
    step_rows: list = []
    success = False
    stall = False
    stall_subgoal = None
    predicted_done = False

    while steps < task.max_steps:
        if not pending:
            obs = env.observe(subgoal)
            c_action, _ = model.build_conditioning(
                window(), obs.cloud, task.description, task.subgoals[subgoal],
                ablate_subgoal=cfg.ablate_subgoal)
            chunk = model.sample_chunk(c_action, _chunk_seed(cfg.rng_seed, env_seed,
                                                             chunk_counter))
            chunk_counter += 1
            for row in chunk[:cfg.execute_steps]:
                pending.append(row)

        row = pending.popleft()
        dx, dy, grip = decode_action_row(row, MAX_STEP)
        obs = env.step(EnvAction(dx, dy, grip), subgoal)
        steps += 1
        per_subgoal_steps[subgoal] += 1
        history.append(obs.proprio)

        # Completion is judged on the freshest observation, once per step.
        # Training labels 0-frames the same way: the frame whose own state
        # satisfies the checker, so p here is read on in-distribution input.
        if cfg.oracle_completion:
            p = None
            advanced = check_subgoal(task, subgoal, env.state)
        else:
            _, c_head = model.build_conditioning(
                window(), obs.cloud, task.description, task.subgoals[subgoal],
                ablate_subgoal=cfg.ablate_subgoal)
            p = model.predict_completion(c_head)
            advanced = p < cfg.tau

        step_rows.append({
            "t": steps,
            "subgoal_index": subgoal,
            "subgoal_text": task.subgoals[subgoal],
            "p": p,
            "advanced": bool(advanced),
            "action": [dx, dy, grip],
            "gripper_xy": [float(env.state.gripper[0]), float(env.state.gripper[1])],
            "grip_closed": bool(env.state.grip_closed),
        })

        if advanced:
            advance_steps.append(steps)
            pending.clear()
            subgoal += 1
            if subgoal >= task.n_subgoals:
                predicted_done = True
        if check_success(task, env.state):
            success = True
            break
        if predicted_done:
            break
        if not advanced and per_subgoal_steps[subgoal] >= cfg.subgoal_timeout:
            stall = True
            stall_subgoal = subgoal
            break

    meta = {
        "format_version": TRACE_FORMAT_VERSION,
        "kind": "trace",
        "task": task.name,
        "env_seed": int(env_seed),
        "unreachable_handle": task.handle_keepout is not None,
        "subgoals": list(task.subgoals),
        "config": cfg.to_dict(),
        "model_config": config.to_dict(),
        "initial_state": initial_state,
    }
    terminal = {
        "success": bool(success),
        "steps": int(steps),
        "advances": [int(t) for t in advance_steps],
        "final_subgoal_index": int(min(subgoal, task.n_subgoals - 1)),
        "predicted_done": bool(predicted_done),
        "stall": bool(stall),
        "per_subgoal_steps": {str(i): int(c) for i, c in per_subgoal_steps.items() if c},
    }
    if stall:
        terminal["stall_subgoal"] = int(stall_subgoal)
        terminal["stall_subgoal_text"] = task.subgoals[stall_subgoal]
    return EpisodeTrace(meta=meta, steps=step_rows, terminal=terminal)


def write_trace(path, trace: EpisodeTrace) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(canonical_json(trace.meta) + "\n")
        for row in trace.steps:
            fh.write(canonical_json(row) + "\n")
        fh.write(canonical_json(trace.terminal) + "\n")


def load_trace(path) -> EpisodeTrace:
    records = read_jsonl(path)
    if len(records) < 2:
        raise DataError(f"{path}: trace needs a meta and a terminal line")
    meta, terminal = records[0], records[-1]
    if meta.get("kind") != "trace" or meta.get("format_version") != TRACE_FORMAT_VERSION:
        raise DataError(f"{path}: not a recognized trace file")
    return EpisodeTrace(meta=meta, steps=records[1:-1], terminal=terminal)


def audit_trace(trace: EpisodeTrace) -> list:
    """Structural invariants of one trace; returns problem strings."""
    problems: list = []
    steps = trace.steps
    n_subgoals = len(trace.meta.get("subgoals", []))
    prev_t = 0
    prev_index = 0
    prev_advanced = True  # episode starts at subgoal 0 by construction
    for i, row in enumerate(steps):
        where = f"step line {i + 1}"
        if row["t"] != prev_t + 1:
            problems.append(f"{where}: t={row['t']} not contiguous")
        prev_t = row["t"]
        idx = row["subgoal_index"]
        if not 0 <= idx < n_subgoals:
            problems.append(f"{where}: subgoal_index {idx} out of range")
        if idx < prev_index:
            problems.append(f"{where}: subgoal_index decreased {prev_index} -> {idx}")
        elif idx == prev_index + 1:
            if not prev_advanced:
                problems.append(f"{where}: subgoal advanced without an advance event")
        elif idx > prev_index + 1:
            problems.append(f"{where}: subgoal_index jumped {prev_index} -> {idx}")
        if row["p"] is not None and not 0.0 <= row["p"] <= 1.0:
            problems.append(f"{where}: p={row['p']} outside [0, 1]")
        prev_index = idx
        prev_advanced = bool(row["advanced"])
    terminal = trace.terminal
    if terminal["steps"] != len(steps):
        problems.append(f"terminal steps={terminal['steps']} but {len(steps)} step lines")
    advance_ts = [r["t"] for r in steps if r["advanced"]]
    if list(terminal["advances"]) != advance_ts:
        problems.append(f"terminal advances={terminal['advances']} but step lines "
                        f"mark advances at {advance_ts}")
    if terminal.get("stall"):
        if "stall_subgoal" not in terminal:
            problems.append("stall without stall_subgoal")
        else:
            stall_rows = [r for r in steps if r["subgoal_index"] > terminal["stall_subgoal"]]
            if stall_rows:
                problems.append("steps recorded beyond the stalled subgoal")
        if steps and steps[-1]["advanced"]:
            problems.append("stalled trace ends with an advance event")
    return problems


def replay_trace(trace: EpisodeTrace) -> list:
    """Re-simulate a trace's actions; verify recorded state and oracle advances.

    Returns problem strings. Works for any trace (the environment is
    deterministic given the seed); oracle-mode advances must coincide exactly
    with ground-truth checker firings.
    """
    problems: list = []
    task = make_task(trace.meta["task"],
                     unreachable_handle=bool(trace.meta.get("unreachable_handle")))
    env = Env(task, int(trace.meta["env_seed"]))
    env.reset()
    oracle = bool(trace.meta["config"]["oracle_completion"])
    subgoal = 0
    for i, row in enumerate(trace.steps):
        where = f"step line {i + 1}"
        if row["subgoal_index"] != subgoal:
            problems.append(f"{where}: active subgoal {row['subgoal_index']}, "
                            f"replay says {subgoal}")
            break
        dx, dy, grip = row["action"]
        env.state = kinematic_step(task, env.state, EnvAction(float(dx), float(dy), grip))
        gx, gy = row["gripper_xy"]
        if abs(gx - env.state.gripper[0]) > 1e-9 or abs(gy - env.state.gripper[1]) > 1e-9:
            problems.append(f"{where}: gripper mismatch on replay")
            break
        fired = check_subgoal(task, subgoal, env.state)
        if oracle and bool(row["advanced"]) != fired:
            problems.append(f"{where}: oracle advance={row['advanced']} but "
                            f"checker fired={fired}")
        if row["advanced"]:
            subgoal += 1
            if subgoal >= task.n_subgoals:
                break
    replay_success = check_success(task, env.state)
    if replay_success != bool(trace.terminal["success"]):
        problems.append(f"terminal success={trace.terminal['success']} but replay "
                        f"reaches success={replay_success}")
    return problems


def advance_times(p_values, tau: float) -> list:
    """Advance step indices produced by a threshold over a fixed p sequence.

    A mechanism-level view of the state machine: scanning the recorded
    per-step scores, an advance fires at each index with p < tau. Raising
    tau can only make every advance fire at the same index or earlier.
    """
    times = []
    for i, p in enumerate(p_values):
        if p < tau:
            times.append(i)
    return times


@dataclass
class EvalReport:
    task: str
    n_episodes: int
    n_success: int
    rows: list
    config: dict
    failure_histogram: dict

    @property
    def success_rate(self) -> float:
        return self.n_success / self.n_episodes if self.n_episodes else 0.0

    @property
    def mean_steps(self) -> float:
        if not self.rows:
            return 0.0
        return sum(r["steps"] for r in self.rows) / len(self.rows)


def evaluate(model: PolicyModel, task: TaskSpec, seeds, cfg: RuntimeConfig,
             trace_dir=None) -> EvalReport:
    """Run one episode per seed; optionally write each trace to a directory.

    The failure histogram counts the subgoal that was active when each
    failed episode ended, the paper-style localization summary.
    """
    rows = []
    n_success = 0
    histogram: dict = {}
    for seed in seeds:
        trace = run_episode(model, task, int(seed), cfg)
        if trace_dir is not None:
            write_trace(Path(trace_dir) / f"trace_{int(seed)}.jsonl", trace)
        n_success += int(trace.success)
        if not trace.success:
            at = int(trace.terminal["final_subgoal_index"])
            histogram[at] = histogram.get(at, 0) + 1
        rows.append({
            "seed": int(seed),
            "success": trace.success,
            "steps": trace.terminal["steps"],
            "advances": len(trace.terminal["advances"]),
            "stall": trace.terminal["stall"],
            "final_subgoal_index": trace.terminal["final_subgoal_index"],
        })
    return EvalReport(task=task.name, n_episodes=len(rows), n_success=n_success,
                      rows=rows, config=cfg.to_dict(),
                      failure_histogram={str(k): v for k, v in sorted(histogram.items())})


def completion_scores(model: PolicyModel, dataset, config=None):
    """Head scores over every frame of a demo dataset.

    Returns (p, y) arrays aligned frame-by-frame, for transparency metrics
    on held-out demonstrations.
    """
    config = config or model.config
    ps, ys = [], []
    task_text = dataset.task_description
    subgoal_texts = dataset.subgoals
    for ep in dataset.episodes:
        for t in range(ep.n_frames):
            win = [ep.proprio[max(0, t - h)]
                   for h in range(config.obs_history - 1, -1, -1)]
            _, c_head = model.build_conditioning(
                np.concatenate(win), PointCloud(ep.clouds[t]), task_text,
                subgoal_texts[int(ep.subgoal_indices[t])], ablate_subgoal=False)
            ps.append(model.predict_completion(c_head))
            ys.append(int(ep.labels[t]))
    return np.array(ps, dtype=np.float64), np.array(ys, dtype=np.int64)


def rank_auc(scores: np.ndarray, positive_mask: np.ndarray) -> float:
    """Mann-Whitney AUC: P(score of a positive > score of a negative).

    Ties get half credit. Positives here are the frames the score should
    rank higher.
    """
    scores = np.asarray(scores, dtype=np.float64)
    positive_mask = np.asarray(positive_mask, dtype=bool)
    pos = scores[positive_mask]
    neg = scores[~positive_mask]
    if len(pos) == 0 or len(neg) == 0:
        raise InputError("rank_auc needs both classes present")
    greater = (pos[:, None] > neg[None, :]).sum()
    ties = (pos[:, None] == neg[None, :]).sum()
    return float((greater + 0.5 * ties) / (len(pos) * len(neg)))


def transparency_metrics(p: np.ndarray, y: np.ndarray) -> dict:
    """Margin and AUC of completion scores against ground-truth labels.

    The head predicts incompleteness, so completion frames (y = 0) should
    score LOW: the margin is mean p(mid-segment) - mean p(final frame), and
    the AUC ranks completion frames by 1 - p.
    """
    p = np.asarray(p, dtype=np.float64)
    y = np.asarray(y, dtype=np.int64)
    complete = y == 0
    if not complete.any() or complete.all():
        raise InputError("need both complete and incomplete frames")
    margin = float(p[~complete].mean() - p[complete].mean())
    auc = rank_auc(1.0 - p, complete)
    return {"margin": margin, "auc": auc,
            "mean_p_mid": float(p[~complete].mean()),
            "mean_p_final": float(p[complete].mean())}
