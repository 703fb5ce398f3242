"""Denoising diffusion over action chunks.

A linear-beta schedule over K steps, the closed-form forward noising, the
epsilon-prediction training loss, and the stochastic reverse update. The
reverse chain is deterministic given an integer seed, which is what makes
episode traces reproducible end to end.

Indexing convention: diffusion steps k run 1..K; arrays are stored with
index ``k - 1``. ``alpha_bar[k-1]`` is the product of alphas up to and
including step k, with the empty product for k = 0 equal to 1.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass

import numpy as np

from .errors import ConfigurationError, InputError, SamplingError


@dataclass(frozen=True)
class NoiseSchedule:
    """Precomputed per-step quantities of a linear-beta DDPM schedule."""

    n_steps: int
    beta_start: float
    beta_end: float
    beta: np.ndarray
    alpha: np.ndarray
    alpha_bar: np.ndarray
    sigma: np.ndarray

    def digest(self) -> str:
        """Stable 64-bit content hash of the derived arrays."""
        h = hashlib.sha256()
        for arr in (self.beta, self.alpha, self.alpha_bar, self.sigma):
            h.update(np.ascontiguousarray(arr, dtype=np.float64).tobytes())
        return h.hexdigest()[:16]

    def check_step(self, k: int) -> None:
        if not isinstance(k, (int, np.integer)) or not 1 <= int(k) <= self.n_steps:
            raise InputError(f"step k={k} outside 1..{self.n_steps}")


def build_schedule(n_steps: int = 50, beta_start: float = 1e-4,
                   beta_end: float = 0.02) -> NoiseSchedule:
    """Construct the linear schedule and derived alpha/alpha_bar/sigma arrays.

    sigma_k = sqrt(beta_k * (1 - alpha_bar_{k-1}) / (1 - alpha_bar_k)) with
    sigma_1 = 0, so the final reverse step is deterministic.
    """
    if n_steps < 1:
        raise ConfigurationError(f"n_steps must be >= 1, got {n_steps}")
    if not (0.0 < beta_start <= beta_end < 1.0):
        raise ConfigurationError(
            f"need 0 < beta_start <= beta_end < 1, got [{beta_start}, {beta_end}]")
    beta = np.linspace(beta_start, beta_end, n_steps)
    alpha = 1.0 - beta
    alpha_bar = np.cumprod(alpha)
    prev = np.concatenate(([1.0], alpha_bar[:-1]))
    sigma = np.sqrt(beta * (1.0 - prev) / (1.0 - alpha_bar))
    sigma[0] = 0.0
    return NoiseSchedule(n_steps, float(beta_start), float(beta_end),
                         beta, alpha, alpha_bar, sigma)


def forward_noise(schedule: NoiseSchedule, a0: np.ndarray, k: int,
                  noise: np.ndarray) -> np.ndarray:
    """Closed-form q(a_k | a_0): sqrt(ab_k) a0 + sqrt(1 - ab_k) noise."""
    schedule.check_step(k)
    a0 = np.asarray(a0, dtype=np.float64)
    noise = np.asarray(noise, dtype=np.float64)
    if a0.shape != noise.shape:
        raise InputError(f"a0 shape {a0.shape} != noise shape {noise.shape}")
    ab = schedule.alpha_bar[k - 1]
    return math.sqrt(ab) * a0 + math.sqrt(1.0 - ab) * noise


def action_loss(eps_true: np.ndarray, eps_pred: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean squared error over all entries, plus its gradient w.r.t. eps_pred."""
    t = np.asarray(eps_true, dtype=np.float64)
    p = np.asarray(eps_pred, dtype=np.float64)
    if t.shape != p.shape:
        raise InputError(f"shape mismatch: true {t.shape} vs pred {p.shape}")
    diff = p - t
    loss = float(np.mean(diff * diff))
    grad = 2.0 * diff / diff.size
    return loss, grad


@dataclass
class DenoisingStep:
    """One reverse-update input bundle.

    ``z`` is the injected gaussian noise; it is ignored (forced to zero) at
    k = 1 regardless of what is passed.
    """

    k: int
    a_k: np.ndarray
    epsilon_pred: np.ndarray
    z: np.ndarray | None = None


def reverse_step(schedule: NoiseSchedule, step: DenoisingStep) -> np.ndarray:
    """One reverse update a_k -> a_{k-1}.

    a_{k-1} = (a_k - (1 - alpha_k) / sqrt(1 - ab_k) * eps_pred) / sqrt(alpha_k)
              + sigma_k * z
    """
    schedule.check_step(step.k)
    k = int(step.k)
    a_k = np.asarray(step.a_k, dtype=np.float64)
    eps = np.asarray(step.epsilon_pred, dtype=np.float64)
    if a_k.shape != eps.shape:
        raise InputError(f"a_k shape {a_k.shape} != epsilon shape {eps.shape}")
    ab = schedule.alpha_bar[k - 1]
    if ab >= 1.0:
        raise ConfigurationError(f"alpha_bar at step {k} is 1; reverse coefficient undefined")
    alpha = schedule.alpha[k - 1]
    mean = (a_k - (1.0 - alpha) / math.sqrt(1.0 - ab) * eps) / math.sqrt(alpha)
    if k == 1:
        return mean
    z = np.zeros_like(a_k) if step.z is None else np.asarray(step.z, dtype=np.float64)
    if z.shape != a_k.shape:
        raise InputError(f"z shape {z.shape} != a_k shape {a_k.shape}")
    return mean + schedule.sigma[k - 1] * z


def sample_actions(schedule: NoiseSchedule, denoiser, conditioning,
                   shape: tuple[int, ...], rng_seed: int) -> np.ndarray:
    """Run the full reverse chain from seeded gaussian noise.

    Args:
        denoiser: callable ``(a_k, k, conditioning) -> epsilon_pred``.
        shape: shape of the action array to sample.
        rng_seed: seeds the chain; the draw order is fixed (a_K first, then
            one z per step k = K..2), so outputs are bit-reproducible.

    Raises:
        SamplingError: if the denoiser returns non-finite values; the message
            names the offending step.
    """
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence(int(rng_seed))))
    a = rng.standard_normal(shape)
    for k in range(schedule.n_steps, 0, -1):
        eps = np.asarray(denoiser(a, k, conditioning), dtype=np.float64)
        if not np.all(np.isfinite(eps)):
            raise SamplingError(f"non-finite denoiser output at reverse step k={k}")
        z = rng.standard_normal(shape) if k > 1 else None
        a = reverse_step(schedule, DenoisingStep(k=k, a_k=a, epsilon_pred=eps, z=z))
    return a


def timestep_embedding(k: int, d_time: int) -> np.ndarray:
    """Sinusoidal embedding of a diffusion step index.

    Pairs (sin(k * w_i), cos(k * w_i)) over geometrically spaced frequencies;
    distinct integer steps map to distinct vectors.
    """
    if d_time < 2 or d_time % 2 != 0:
        raise ConfigurationError(f"d_time must be a positive even number, got {d_time}")
    if k < 1:
        raise InputError(f"step index must be >= 1, got {k}")
    half = d_time // 2
    freqs = np.exp(-math.log(10000.0) * np.arange(half) / half)
    ang = float(k) * freqs
    return np.concatenate([np.sin(ang), np.cos(ang)])


def timestep_table(n_steps: int, d_time: int) -> np.ndarray:
    """Rows k = 1..n_steps of :func:`timestep_embedding`."""
    return np.stack([timestep_embedding(k, d_time) for k in range(1, n_steps + 1)])
