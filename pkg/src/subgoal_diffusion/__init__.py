"""Subgoal-aware diffusion policy on a seeded 2D manipulation bench.

A small imitation-learning stack: a scripted planner collects demos whose
frames carry per-subgoal completion labels, a conditional DDPM learns action
chunks jointly with a subgoal-completion classifier, and a closed-loop
executor advances through the subgoal list whenever the classifier says the
active one is done.
"""

__version__ = "0.1.0"

from .diffusion import NoiseSchedule, build_schedule, forward_noise, sample_actions
from .env import Env, EnvAction, TaskSpec, WorldState, make_task, TASK_NAMES
from .demos import CollectConfig, collect_dataset, collect_episode, load_dataset
from .policy import ModelConfig, PolicyModel, focal_loss, lambda_schedule
from .runtime import RuntimeConfig, run_episode, evaluate, write_trace, load_trace
from .training import TrainConfig, Adam, make_samples, train, save_checkpoint, load_checkpoint

__all__ = [
    "__version__",
    "NoiseSchedule", "build_schedule", "forward_noise", "sample_actions",
    "Env", "EnvAction", "TaskSpec", "WorldState", "make_task", "TASK_NAMES",
    "CollectConfig", "collect_dataset", "collect_episode", "load_dataset",
    "ModelConfig", "PolicyModel", "focal_loss", "lambda_schedule",
    "RuntimeConfig", "run_episode", "evaluate", "write_trace", "load_trace",
    "TrainConfig", "Adam", "make_samples", "train", "save_checkpoint", "load_checkpoint",
]
