"""The subgoal-conditioned policy: conditioning, losses, and the composed model.

The conditioning vector ``c`` concatenates, in order: flattened proprioceptive
history, the pooled point-cloud feature, the task embedding, and the subgoal
embedding. The denoiser is FiLM-conditioned on ``c`` at every hidden layer and
predicts the noise added to a flattened action chunk. A linear head on the
same ``c`` predicts the probability that the active subgoal is still ongoing;
its focal loss joins the action loss through a ramped weight.

The subgoal-conditioning ablation zeroes the subgoal slice of the copy of
``c`` fed to the denoiser (``c_action``); the completion head always receives
the full vector (``c_head``).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, asdict

import numpy as np

from . import diffusion
from .errors import ConfigurationError, InputError
from .nn import (Mlp, MlpSpec, Param, ParamStore, PointCloud, PointCloudEncoder,
                 embed_text, glorot_uniform)

GRIP_CODES = {"close": 1.0, "open": -1.0, "hold": 0.0}
GRIP_DECODE_THRESHOLD = 0.5


def stable_sigmoid(x):
    """Overflow-safe logistic function for scalars or arrays."""
    x = np.asarray(x, dtype=np.float64)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out if out.ndim else float(out)


@dataclass(frozen=True)
class FocalConfig:
    """Focal loss shape: beta weights the ongoing class, gamma focuses."""

    beta: float = 0.25
    gamma: float = 2.0

    def __post_init__(self):
        if not 0.0 < self.beta < 1.0:
            raise ConfigurationError(f"beta must be in (0, 1), got {self.beta}")
        if self.gamma < 0.0:
            raise ConfigurationError(f"gamma must be >= 0, got {self.gamma}")


P_CLAMP = 1e-12


def focal_loss(cfg: FocalConfig, p, y):
    """Focal loss and its gradient with respect to the logit.

    L = -beta * (1-p)^gamma * y * log(p) - (1-beta) * p^gamma * (1-y) * log(1-p)

    ``p`` is clamped to [1e-12, 1 - 1e-12] before evaluation. Works on scalars
    or aligned arrays; returns (loss, dL/dlogit) elementwise.
    """
    p = np.clip(np.asarray(p, dtype=np.float64), P_CLAMP, 1.0 - P_CLAMP)
    y = np.asarray(y, dtype=np.float64)
    if p.shape != y.shape:
        raise InputError(f"p shape {p.shape} != y shape {y.shape}")
    b, g = cfg.beta, cfg.gamma
    one_m_p = 1.0 - p
    log_p = np.log(p)
    log_1mp = np.log(one_m_p)
    loss = -b * one_m_p ** g * y * log_p - (1.0 - b) * p ** g * (1.0 - y) * log_1mp
    grad_pos = b * one_m_p ** g * (g * p * log_p + p - 1.0)
    grad_neg = (1.0 - b) * p ** g * (p - g * one_m_p * log_1mp)
    grad = y * grad_pos + (1.0 - y) * grad_neg
    if loss.ndim == 0:
        return float(loss), float(grad)
    return loss, grad


def lambda_schedule(epoch: int, total_epochs: int, lambda_max: float = 0.1) -> float:
    """Completion-loss weight: linear ramp from 0, flat at lambda_max.

    The ramp reaches ``lambda_max`` at ceil(total_epochs / 2) and stays there.
    """
    if total_epochs < 0 or epoch < 0 or epoch > total_epochs:
        raise ConfigurationError(f"need 0 <= epoch <= total_epochs, got {epoch}/{total_epochs}")
    if lambda_max < 0.0:
        raise ConfigurationError(f"lambda_max must be >= 0, got {lambda_max}")
    ramp_end = max(1, math.ceil(total_epochs / 2))
    return lambda_max * min(1.0, epoch / ramp_end)


@dataclass(frozen=True)
class LossReport:
    """One loss evaluation; l_total is exactly l_action + lambda * l_completion."""

    l_action: float
    l_completion: float
    lambda_weight: float
    l_total: float

    @classmethod
    def combine(cls, l_action: float, l_completion: float, lambda_weight: float) -> "LossReport":
        if lambda_weight < 0.0:
            raise ConfigurationError(f"lambda must be >= 0, got {lambda_weight}")
        return cls(l_action, l_completion, lambda_weight,
                   l_action + lambda_weight * l_completion)


@dataclass
class CompletionHead:
    """Linear gate over the conditioning vector: p = sigmoid(W . c + b)."""

    weight: Param
    bias: Param


def completion_probability(head: CompletionHead, c) -> float:
    """Predicted probability that the active subgoal is still ongoing."""
    vec = c.concat if isinstance(c, ConditioningVector) else np.asarray(c, dtype=np.float64)
    if vec.shape != head.weight.values.shape:
        raise InputError(f"conditioning width {vec.shape} != head width "
                         f"{head.weight.values.shape}")
    return float(stable_sigmoid(float(vec @ head.weight.values) + float(head.bias.values[0])))


@dataclass(frozen=True)
class ConditioningVector:
    """Named slices of the conditioning vector plus their concatenation."""

    proprio: np.ndarray
    pc_feature: np.ndarray
    task_embed: np.ndarray
    subgoal_embed: np.ndarray
    concat: np.ndarray

    @classmethod
    def from_parts(cls, proprio, pc_feature, task_embed, subgoal_embed) -> "ConditioningVector":
        parts = [np.asarray(a, dtype=np.float64).ravel()
                 for a in (proprio, pc_feature, task_embed, subgoal_embed)]
        return cls(*parts, concat=np.concatenate(parts))


@dataclass(frozen=True)
class ModelConfig:
    """Dimensions and schedule of the composed policy network."""

    obs_history: int = 2
    chunk_length: int = 8
    action_dim: int = 3
    proprio_dim: int = 3
    pc_widths: tuple[int, ...] = (64, 128)
    d_text: int = 32
    d_time: int = 16
    denoiser_hidden: tuple[int, ...] = (256, 256)
    n_diffusion_steps: int = 50
    beta_start: float = 1e-4
    beta_end: float = 0.02

    def __post_init__(self):
        for name in ("obs_history", "chunk_length", "action_dim", "proprio_dim",
                     "d_text", "d_time", "n_diffusion_steps"):
            if getattr(self, name) < 1:
                raise ConfigurationError(f"{name} must be >= 1")
        if not self.denoiser_hidden:
            raise ConfigurationError("denoiser needs at least one hidden layer")

    @property
    def d_pc(self) -> int:
        return self.pc_widths[-1]

    @property
    def proprio_flat(self) -> int:
        return self.obs_history * self.proprio_dim

    @property
    def action_flat(self) -> int:
        return self.chunk_length * self.action_dim

    @property
    def c_dim(self) -> int:
        return self.proprio_flat + self.d_pc + 2 * self.d_text

    @property
    def subgoal_slice(self) -> slice:
        start = self.proprio_flat + self.d_pc + self.d_text
        return slice(start, start + self.d_text)

    @property
    def pc_slice(self) -> slice:
        return slice(self.proprio_flat, self.proprio_flat + self.d_pc)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["pc_widths"] = list(self.pc_widths)
        d["denoiser_hidden"] = list(self.denoiser_hidden)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        d["pc_widths"] = tuple(d["pc_widths"])
        d["denoiser_hidden"] = tuple(d["denoiser_hidden"])
        return cls(**d)


@dataclass
class TrainBatch:
    """Aligned arrays for one optimizer step.

    proprio: (B, obs_history * proprio_dim), clouds: (B, N, 3),
    a0: (B, chunk_length * action_dim), y: (B,), plus per-row strings.
    """

    proprio: np.ndarray
    clouds: np.ndarray
    task_strings: list[str]
    subgoal_strings: list[str]
    a0: np.ndarray
    y: np.ndarray

    def __len__(self) -> int:
        return self.proprio.shape[0]


def encode_env_action(dx: float, dy: float, grip: str, max_step: float) -> np.ndarray:
    """Continuous 3-vector representation of an environment action.

    Displacements are scaled by 1/max_step so every channel spans [-1, 1];
    keeping all channels at unit scale stops the grip channel (and the
    standard-normal diffusion noise) from drowning out millimetre moves.
    """
    if grip not in GRIP_CODES:
        raise InputError(f"unknown grip command {grip!r}")
    if max_step <= 0:
        raise InputError(f"max_step must be positive, got {max_step}")
    return np.array([dx / max_step, dy / max_step, GRIP_CODES[grip]], dtype=np.float64)


def decode_action_row(row, max_step: float) -> tuple[float, float, str]:
    """Inverse of :func:`encode_env_action` with clipping and grip thresholds."""
    row = np.asarray(row, dtype=np.float64)
    if row.shape != (3,):
        raise InputError(f"expected an action row of width 3, got {row.shape}")
    if not np.all(np.isfinite(row)):
        raise InputError("non-finite action row")
    dx = float(np.clip(row[0], -1.0, 1.0)) * max_step
    dy = float(np.clip(row[1], -1.0, 1.0)) * max_step
    if row[2] > GRIP_DECODE_THRESHOLD:
        grip = "close"
    elif row[2] < -GRIP_DECODE_THRESHOLD:
        grip = "open"
    else:
        grip = "hold"
    return dx, dy, grip


class PolicyModel:
    """Point-cloud encoder + FiLM-conditioned denoiser + completion head.

    All parameters live in one :class:`ParamStore`, so a single optimizer
    step updates the shared encoder with gradient contributions from both
    branches.
    """

    def __init__(self, config: ModelConfig, seed: int = 0,
                 focal: FocalConfig | None = None):
        self.config = config
        self.focal = focal or FocalConfig()
        self.store = ParamStore()
        rng = np.random.Generator(np.random.PCG64(
            np.random.SeedSequence(entropy=int(seed), spawn_key=(101,))))
        self.point_encoder = PointCloudEncoder("pc", self.store, rng, config.pc_widths)
        hidden = tuple(config.denoiser_hidden)
        den_widths = (config.action_flat + config.d_time,) + hidden + (config.action_flat,)
        den_acts = ("relu",) * len(hidden) + ("identity",)
        self.denoiser = Mlp("denoiser",
                            MlpSpec(den_widths, den_acts, frozenset(range(len(hidden)))),
                            self.store, rng, film_dim=config.c_dim)
        w = self.store.add("head/W", glorot_uniform(rng, (config.c_dim,), config.c_dim, 1))
        b = self.store.add("head/b", np.zeros(1))
        self.head = CompletionHead(w, b)
        self.schedule = diffusion.build_schedule(
            config.n_diffusion_steps, config.beta_start, config.beta_end)
        self._time_table = diffusion.timestep_table(config.n_diffusion_steps, config.d_time)
        self._embed_cache: dict[str, np.ndarray] = {}

    def embedding(self, text: str) -> np.ndarray:
        vec = self._embed_cache.get(text)
        if vec is None:
            vec = embed_text(text, self.config.d_text).vector
            self._embed_cache[text] = vec
        return vec

    def build_conditioning(self, proprio_window, cloud, task_text: str,
                           subgoal_text: str, ablate_subgoal: bool = False):
        """Assemble (c_action, c_head) for a single observation.

        With the ablation flag off the two are the same object. With it on,
        c_action carries a zeroed subgoal slice while c_head keeps the full
        embedding.
        """
        proprio = np.asarray(proprio_window, dtype=np.float64).ravel()
        if proprio.size != self.config.proprio_flat:
            raise InputError(f"proprio window size {proprio.size} != "
                             f"{self.config.proprio_flat}")
        pts = cloud.points if isinstance(cloud, PointCloud) else np.asarray(cloud)
        feat = self.point_encoder.encode(pts)
        e_task = self.embedding(task_text)
        e_sub = self.embedding(subgoal_text)
        c_head = ConditioningVector.from_parts(proprio, feat, e_task, e_sub)
        if not ablate_subgoal:
            return c_head, c_head
        c_action = ConditioningVector.from_parts(proprio, feat, e_task,
                                                 np.zeros_like(e_sub))
        return c_action, c_head

    # ------------------------------------------------------------------
    # batched training path

    def _embed_rows(self, strings: list[str]) -> np.ndarray:
        return np.stack([self.embedding(s) for s in strings])

    def _batch_conditioning(self, batch: TrainBatch, ablate_subgoal: bool, cached: bool):
        b = len(batch)
        proprio = np.asarray(batch.proprio, dtype=np.float64)
        if proprio.shape != (b, self.config.proprio_flat):
            raise InputError(f"bad proprio batch shape {proprio.shape}")
        if cached:
            feats, pc_cache = self.point_encoder.encode_cached(batch.clouds)
        else:
            feats, pc_cache = self.point_encoder.encode(batch.clouds), None
        c_head = np.concatenate([proprio, feats,
                                 self._embed_rows(batch.task_strings),
                                 self._embed_rows(batch.subgoal_strings)], axis=1)
        if ablate_subgoal:
            c_action = c_head.copy()
            c_action[:, self.config.subgoal_slice] = 0.0
        else:
            c_action = c_head
        return c_action, c_head, pc_cache

    def _denoiser_input(self, a_k: np.ndarray, ks: np.ndarray) -> np.ndarray:
        t_emb = self._time_table[np.asarray(ks, dtype=np.int64) - 1]
        return np.concatenate([a_k, t_emb], axis=1)

    def _forward(self, batch: TrainBatch, ks: np.ndarray, eps: np.ndarray,
                 lambda_weight: float, ablate_subgoal: bool, cached: bool):
        cfg = self.config
        b = len(batch)
        ks = np.asarray(ks, dtype=np.int64)
        eps = np.asarray(eps, dtype=np.float64)
        a0 = np.asarray(batch.a0, dtype=np.float64)
        if a0.shape != (b, cfg.action_flat) or eps.shape != a0.shape or ks.shape != (b,):
            raise InputError("batch arrays misaligned")
        if ks.min() < 1 or ks.max() > cfg.n_diffusion_steps:
            raise InputError("diffusion step index outside schedule")
        c_action, c_head, pc_cache = self._batch_conditioning(batch, ablate_subgoal, cached)
        ab = self.schedule.alpha_bar[ks - 1][:, None]
        a_k = np.sqrt(ab) * a0 + np.sqrt(1.0 - ab) * eps
        den_in = self._denoiser_input(a_k, ks)
        if cached:
            eps_hat, den_cache = self.denoiser.forward_cached(den_in, film_signal=c_action)
        else:
            eps_hat, den_cache = self.denoiser.forward(den_in, film_signal=c_action), None
        l_action, d_eps_hat = diffusion.action_loss(eps, eps_hat)
        logits = c_head @ self.head.weight.values + self.head.bias.values[0]
        p = stable_sigmoid(logits)
        losses, dlogit = focal_loss(self.focal, p, batch.y)
        l_completion = float(np.mean(losses))
        report = LossReport.combine(l_action, l_completion, lambda_weight)
        ctx = {"d_eps_hat": d_eps_hat, "dlogit": dlogit / b, "den_cache": den_cache,
               "pc_cache": pc_cache, "c_head": c_head, "b": b}
        return report, ctx

    def loss(self, batch: TrainBatch, ks, eps, lambda_weight: float,
             ablate_subgoal: bool = False) -> LossReport:
        """Loss evaluation without caches or gradient accumulation."""
        report, _ = self._forward(batch, ks, eps, lambda_weight, ablate_subgoal, cached=False)
        return report

    def loss_and_grads(self, batch: TrainBatch, ks, eps, lambda_weight: float,
                       ablate_subgoal: bool = False) -> LossReport:
        """Full forward/backward; accumulates gradients for every parameter.

        The completion branch is scaled by lambda_weight before it reaches
        shared parameters, so a zero weight leaves the head and its pull on
        the encoder exactly untouched.
        """
        report, ctx = self._forward(batch, ks, eps, lambda_weight, ablate_subgoal, cached=True)
        _, d_c_action = self.denoiser.backward(ctx["den_cache"], ctx["d_eps_hat"])
        if ablate_subgoal:
            d_c_action[:, self.config.subgoal_slice] = 0.0
        dlogit = lambda_weight * ctx["dlogit"]
        self.head.weight.grads += ctx["c_head"].T @ dlogit
        self.head.bias.grads += dlogit.sum(keepdims=True)
        d_c = d_c_action + dlogit[:, None] * self.head.weight.values[None, :]
        self.point_encoder.backward(ctx["pc_cache"], d_c[:, self.config.pc_slice])
        return report

    # ------------------------------------------------------------------
    # inference path

    def denoise(self, a_k: np.ndarray, k: int, conditioning) -> np.ndarray:
        """Single-chunk epsilon prediction; accepts (chunk_length, action_dim)."""
        cfg = self.config
        c = conditioning.concat if isinstance(conditioning, ConditioningVector) else conditioning
        flat = np.asarray(a_k, dtype=np.float64).reshape(cfg.action_flat)
        x = np.concatenate([flat, diffusion.timestep_embedding(k, cfg.d_time)])
        out = self.denoiser.forward(x, film_signal=np.asarray(c, dtype=np.float64))
        return out.reshape(cfg.chunk_length, cfg.action_dim)

    def sample_chunk(self, c_action, rng_seed: int) -> np.ndarray:
        """Sample one (chunk_length, action_dim) action chunk."""
        cfg = self.config
        return diffusion.sample_actions(
            self.schedule, lambda a, k, c: self.denoise(a, k, c), c_action,
            (cfg.chunk_length, cfg.action_dim), rng_seed)

    def predict_completion(self, c_head) -> float:
        return completion_probability(self.head, c_head)
