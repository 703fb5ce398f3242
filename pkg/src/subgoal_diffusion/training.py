"""Joint training of the denoiser and completion head, with checkpoints.

The epoch loop is fully derandomized: every draw an epoch makes (shuffle
order, per-sample diffusion timesteps, per-sample noise) comes from a
generator keyed by (run seed, epoch index). Training for N epochs in one
process is therefore bitwise identical to training for k epochs, saving a
checkpoint, reloading it, and training the remaining N - k, provided the
optimizer state rides along in the checkpoint (it does).
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, asdict
from pathlib import Path

import numpy as np

from .demos import Dataset
from .errors import ConfigurationError, DataError, TrainingError
from .ioutil import read_json, write_json
from .nn import ParamStore
from .policy import ModelConfig, PolicyModel, TrainBatch, lambda_schedule

CHECKPOINT_FORMAT_VERSION = 1

_EPOCH_STREAM = 23


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 500
    batch_size: int = 64
    learning_rate: float = 1e-3
    lambda_max: float = 0.1
    seed: int = 0
    ablate_subgoal: bool = False

    def __post_init__(self):
        if self.epochs < 0:
            raise ConfigurationError("epochs must be >= 0")
        if self.batch_size < 1:
            raise ConfigurationError("batch_size must be >= 1")
        if self.learning_rate <= 0.0:
            raise ConfigurationError("learning_rate must be > 0")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        return cls(**d)


@dataclass
class SampleSet:
    """Flattened per-frame training rows extracted from a demo dataset."""

    proprio: np.ndarray        # (S, obs_history * proprio_dim)
    clouds: np.ndarray         # (S, N, 3)
    a0: np.ndarray             # (S, chunk_length * action_dim)
    y: np.ndarray              # (S,) completion labels
    task_strings: list
    subgoal_strings: list
    sources: list              # (episode_seed, frame_index) per row

    def __len__(self) -> int:
        return self.proprio.shape[0]


def make_samples(dataset: Dataset, config: ModelConfig) -> SampleSet:
    """One training row per demo frame.

    The proprio window is left-padded by repeating the first frame; the
    action chunk is right-padded by repeating the last action of the episode.
    """
    proprio_rows, cloud_rows, a0_rows, y_rows = [], [], [], []
    tasks, subgoals, sources = [], [], []
    task_text = dataset.task_description
    subgoal_texts = dataset.subgoals
    for ep in dataset.episodes:
        t_count = ep.n_frames
        if t_count == 0:
            raise DataError(f"episode {ep.seed} has no frames")
        for t in range(t_count):
            window = [ep.proprio[max(0, t - h)]
                      for h in range(config.obs_history - 1, -1, -1)]
            proprio_rows.append(np.concatenate(window))
            cloud_rows.append(ep.clouds[t])
            chunk = ep.actions[t:t + config.chunk_length]
            if chunk.shape[0] < config.chunk_length:
                pad = np.repeat(chunk[-1:], config.chunk_length - chunk.shape[0], axis=0)
                chunk = np.vstack([chunk, pad])
            a0_rows.append(chunk.ravel())
            y_rows.append(float(ep.labels[t]))
            tasks.append(task_text)
            subgoals.append(subgoal_texts[int(ep.subgoal_indices[t])])
            sources.append((ep.seed, t))
    return SampleSet(proprio=np.array(proprio_rows, dtype=np.float64),
                     clouds=np.array(cloud_rows, dtype=np.float64),
                     a0=np.array(a0_rows, dtype=np.float64),
                     y=np.array(y_rows, dtype=np.float64),
                     task_strings=tasks, subgoal_strings=subgoals,
                     sources=sources)


class Adam:
    """Adam with exportable state so checkpoints resume exactly."""

    def __init__(self, store: ParamStore, learning_rate: float,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.store = store
        self.learning_rate = float(learning_rate)
        self.beta1 = float(beta1)
        self.beta2 = float(beta2)
        self.eps = float(eps)
        self.t = 0
        self.m = {name: np.zeros_like(p.values) for name, p in store.params.items()}
        self.v = {name: np.zeros_like(p.values) for name, p in store.params.items()}

    def step(self) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        bias1 = 1.0 - b1 ** self.t
        bias2 = 1.0 - b2 ** self.t
        for name, p in self.store.params.items():
            g = p.grads
            m = self.m[name]
            v = self.v[name]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            p.values -= self.learning_rate * (m / bias1) / (np.sqrt(v / bias2) + self.eps)

    def state_dict(self) -> dict:
        return {
            "t": self.t,
            "learning_rate": self.learning_rate,
            "beta1": self.beta1,
            "beta2": self.beta2,
            "eps": self.eps,
            "m": {n: a.ravel().tolist() for n, a in self.m.items()},
            "v": {n: a.ravel().tolist() for n, a in self.v.items()},
        }

    def load_state_dict(self, state: dict) -> None:
        self.t = int(state["t"])
        self.learning_rate = float(state["learning_rate"])
        self.beta1 = float(state["beta1"])
        self.beta2 = float(state["beta2"])
        self.eps = float(state["eps"])
        for name in self.m:
            if name not in state["m"] or name not in state["v"]:
                raise DataError(f"optimizer state missing moments for {name}")
            self.m[name] = np.array(state["m"][name], dtype=np.float64).reshape(
                self.m[name].shape)
            self.v[name] = np.array(state["v"][name], dtype=np.float64).reshape(
                self.v[name].shape)


def params_digest(store: ParamStore) -> str:
    """16-hex digest over all parameter bytes, order-stable."""
    h = hashlib.sha256()
    for name, p in store.params.items():
        h.update(name.encode("utf-8"))
        h.update(np.ascontiguousarray(p.values).tobytes())
    return h.hexdigest()[:16]


def train_epoch(model: PolicyModel, samples: SampleSet, optimizer: Adam,
                epoch: int, cfg: TrainConfig) -> dict:
    """One pass over the sample set; returns the epoch's mean loss row."""
    s_count = len(samples)
    if s_count == 0:
        raise TrainingError("empty sample set")
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence(
        entropy=int(cfg.seed), spawn_key=(_EPOCH_STREAM, int(epoch)))))
    perm = rng.permutation(s_count)
    ks = rng.integers(1, model.schedule.n_steps + 1, size=s_count)
    noise = rng.standard_normal((s_count, samples.a0.shape[1]))
    lam = lambda_schedule(epoch, cfg.epochs, cfg.lambda_max)

    sums = {"l_action": 0.0, "l_completion": 0.0, "l_total": 0.0}
    for start in range(0, s_count, cfg.batch_size):
        idx = perm[start:start + cfg.batch_size]
        batch = TrainBatch(
            proprio=samples.proprio[idx],
            clouds=samples.clouds[idx],
            task_strings=[samples.task_strings[i] for i in idx],
            subgoal_strings=[samples.subgoal_strings[i] for i in idx],
            a0=samples.a0[idx],
            y=samples.y[idx])
        model.store.zero_grads()
        report = model.loss_and_grads(batch, ks[idx], noise[idx], lam,
                                      ablate_subgoal=cfg.ablate_subgoal)
        if not np.isfinite(report.l_total):
            raise TrainingError(f"non-finite loss at epoch {epoch}")
        optimizer.step()
        weight = len(idx) / s_count
        sums["l_action"] += report.l_action * weight
        sums["l_completion"] += report.l_completion * weight
        sums["l_total"] += report.l_total * weight
    return {"epoch": int(epoch), "lambda": lam, **sums}


def train(model: PolicyModel, samples: SampleSet, cfg: TrainConfig,
          optimizer: Adam | None = None, start_epoch: int = 0,
          end_epoch: int | None = None, history: list | None = None,
          log_every: int = 0) -> list:
    """Run epochs [start_epoch, end_epoch or cfg.epochs); returns the history.

    The lambda ramp is always scheduled against cfg.epochs, so segmented
    runs (checkpoint resumes, periodic-eval interleaving) see the same
    weights as one straight run.
    """
    if optimizer is None:
        optimizer = Adam(model.store, cfg.learning_rate)
    history = list(history) if history else []
    stop = cfg.epochs if end_epoch is None else min(end_epoch, cfg.epochs)
    for epoch in range(start_epoch, stop):
        row = train_epoch(model, samples, optimizer, epoch, cfg)
        history.append(row)
        if log_every and (epoch + 1) % log_every == 0:
            print(f"epoch {epoch + 1}/{cfg.epochs} "
                  f"l_total={row['l_total']:.6f} l_action={row['l_action']:.6f} "
                  f"l_completion={row['l_completion']:.6f} lambda={row['lambda']:.4f}")
    return history


def dataset_meta(dataset: Dataset) -> dict:
    manifest = dataset.manifest
    return {
        "task": manifest["task"],
        "task_description": manifest["task_description"],
        "subgoals": list(manifest["subgoals"]),
        "n_episodes": manifest["n_episodes"],
        "episode_digests": [e["digest"] for e in manifest["episodes"]],
    }


def save_checkpoint(path, model: PolicyModel, optimizer: Adam, cfg: TrainConfig,
                    history: list, meta: dict) -> None:
    payload = {
        "format_version": CHECKPOINT_FORMAT_VERSION,
        "model_config": model.config.to_dict(),
        "train_config": cfg.to_dict(),
        "schedule_digest": model.schedule.digest(),
        "params": {name: {"shape": list(p.values.shape),
                          "data": p.values.ravel().tolist()}
                   for name, p in model.store.params.items()},
        "optimizer": optimizer.state_dict(),
        "dataset": meta,
        "history": history,
        "epochs_done": len(history),
    }
    write_json(path, payload)


@dataclass
class CheckpointBundle:
    model: PolicyModel
    optimizer: Adam
    train_config: TrainConfig
    history: list
    dataset: dict
    path: str


def load_checkpoint(path) -> CheckpointBundle:
    payload = read_json(path)
    if payload.get("format_version") != CHECKPOINT_FORMAT_VERSION:
        raise DataError(f"{path}: unsupported checkpoint format_version "
                        f"{payload.get('format_version')}")
    config = ModelConfig.from_dict(payload["model_config"])
    cfg = TrainConfig.from_dict(payload["train_config"])
    model = PolicyModel(config, seed=cfg.seed)
    if model.schedule.digest() != payload["schedule_digest"]:
        raise DataError(f"{path}: noise schedule digest mismatch")
    stored = payload["params"]
    for name, p in model.store.params.items():
        if name not in stored:
            raise DataError(f"{path}: parameter {name} missing")
        entry = stored[name]
        if list(p.values.shape) != list(entry["shape"]):
            raise DataError(f"{path}: parameter {name} shape "
                            f"{entry['shape']} != {list(p.values.shape)}")
        p.values[...] = np.array(entry["data"], dtype=np.float64).reshape(p.values.shape)
    extra = set(stored) - set(model.store.params)
    if extra:
        raise DataError(f"{path}: unknown parameters {sorted(extra)}")
    optimizer = Adam(model.store, cfg.learning_rate)
    optimizer.load_state_dict(payload["optimizer"])
    return CheckpointBundle(model=model, optimizer=optimizer, train_config=cfg,
                            history=list(payload["history"]),
                            dataset=payload["dataset"], path=str(Path(path)))
