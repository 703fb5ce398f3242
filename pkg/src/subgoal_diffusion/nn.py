"""Dense networks, FiLM modulation, a point-cloud encoder, and text embeddings.

Everything is plain float64 numpy with hand-written backward passes. Each
parameter owns a gradient buffer of the same shape; backward calls accumulate
into it with ``+=`` so that multi-branch losses can sum their contributions
before a single optimizer step. Call :meth:`ParamStore.zero_grads` between
steps.

All forward/backward entry points accept either a single vector or a batch
of rows and mirror that shape on output.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigurationError, InputError, TrainingError, UsageError

VALID_ACTIVATIONS = ("relu", "tanh", "identity")


@dataclass
class Param:
    """A named float64 tensor plus its gradient accumulator."""

    name: str
    values: np.ndarray
    grads: np.ndarray = field(default=None, repr=False)

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.grads is None:
            self.grads = np.zeros_like(self.values)

    @property
    def size(self) -> int:
        return self.values.size


class ParamStore:
    """Ordered name -> Param registry for one model.

    Insertion order is stable, which keeps serialization and digests
    reproducible across runs with the same construction sequence.
    """

    def __init__(self):
        self._params: dict[str, Param] = {}

    def add(self, name: str, values: np.ndarray) -> Param:
        if name in self._params:
            raise ConfigurationError(f"duplicate parameter name: {name}")
        p = Param(name, values)
        self._params[name] = p
        return p

    def __getitem__(self, name: str) -> Param:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __iter__(self):
        return iter(self._params.values())

    @property
    def params(self) -> dict:
        """Name -> Param mapping in insertion order."""
        return self._params

    def names(self) -> list[str]:
        return list(self._params)

    def zero_grads(self) -> None:
        for p in self._params.values():
            p.grads[...] = 0.0

    def n_values(self) -> int:
        return sum(p.size for p in self._params.values())

    def check_finite(self, context: str = "") -> None:
        for p in self._params.values():
            if not np.all(np.isfinite(p.values)):
                raise TrainingError(f"non-finite values in parameter {p.name} {context}".rstrip())


def glorot_uniform(rng: np.random.Generator, shape, fan_in: int, fan_out: int) -> np.ndarray:
    """Uniform init in +-sqrt(6 / (fan_in + fan_out))."""
    limit = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape)


@dataclass(frozen=True)
class MlpSpec:
    """Static shape of a dense network.

    Args:
        layer_widths: (d_in, d_h1, ..., d_out); at least one affine layer.
        activations: one activation name per affine layer output.
        film_layers: indices of layers whose post-activation output is
            modulated by a FiLM signal. Only non-final layers are eligible.
    """

    layer_widths: tuple[int, ...]
    activations: tuple[str, ...]
    film_layers: frozenset[int] = frozenset()

    def __post_init__(self):
        if len(self.layer_widths) < 2:
            raise ConfigurationError("need at least one layer (two widths)")
        if any(w < 1 for w in self.layer_widths):
            raise ConfigurationError(f"layer widths must be positive: {self.layer_widths}")
        if len(self.activations) != self.n_layers:
            raise ConfigurationError(
                f"expected {self.n_layers} activations, got {len(self.activations)}"
            )
        for a in self.activations:
            if a not in VALID_ACTIVATIONS:
                raise ConfigurationError(f"unknown activation {a!r}")
        hidden = set(range(self.n_layers - 1))
        if not set(self.film_layers) <= hidden:
            raise ConfigurationError(
                f"film_layers {sorted(self.film_layers)} outside hidden layers {sorted(hidden)}"
            )

    @property
    def n_layers(self) -> int:
        return len(self.layer_widths) - 1


def _as_rows(x, width: int, what: str) -> tuple[np.ndarray, bool]:
    """Promote a vector to a 1-row matrix; validate the trailing width."""
    arr = np.asarray(x, dtype=np.float64)
    if arr.ndim == 1:
        if arr.shape[0] != width:
            raise ConfigurationError(f"{what}: expected width {width}, got {arr.shape[0]}")
        return arr[None, :], True
    if arr.ndim == 2:
        if arr.shape[1] != width:
            raise ConfigurationError(f"{what}: expected width {width}, got {arr.shape[1]}")
        return arr, False
    raise ConfigurationError(f"{what}: expected 1 or 2 dims, got {arr.ndim}")


def _act(name: str, z: np.ndarray) -> np.ndarray:
    if name == "relu":
        return np.maximum(z, 0.0)
    if name == "tanh":
        return np.tanh(z)
    return z


def _act_grad(name: str, z: np.ndarray, a: np.ndarray) -> np.ndarray:
    if name == "relu":
        return (z > 0.0).astype(np.float64)
    if name == "tanh":
        return 1.0 - a * a
    return np.ones_like(z)


class Mlp:
    """A dense network with optional per-layer FiLM conditioning.

    FiLM layers compute ``(1 + s) * h + t`` on the post-activation output
    ``h``, where ``[s, t]`` is an affine projection of the conditioning
    signal. The residual parameterization of the scale keeps modulation
    near-neutral at init.
    """

    def __init__(self, name: str, spec: MlpSpec, store: ParamStore,
                 rng: np.random.Generator, film_dim: int | None = None):
        if spec.film_layers and not film_dim:
            raise ConfigurationError("spec has film_layers but film_dim not given")
        self.name = name
        self.spec = spec
        self.film_dim = film_dim if spec.film_layers else None
        self.weights: list[Param] = []
        self.biases: list[Param] = []
        self.film_weights: dict[int, Param] = {}
        self.film_biases: dict[int, Param] = {}
        widths = spec.layer_widths
        for l in range(spec.n_layers):
            d_in, d_out = widths[l], widths[l + 1]
            self.weights.append(store.add(
                f"{name}/W{l}", glorot_uniform(rng, (d_in, d_out), d_in, d_out)))
            self.biases.append(store.add(f"{name}/b{l}", np.zeros(d_out)))
            if l in spec.film_layers:
                self.film_weights[l] = store.add(
                    f"{name}/film_W{l}",
                    glorot_uniform(rng, (film_dim, 2 * d_out), film_dim, 2 * d_out))
                self.film_biases[l] = store.add(f"{name}/film_b{l}", np.zeros(2 * d_out))

    @property
    def in_dim(self) -> int:
        return self.spec.layer_widths[0]

    @property
    def out_dim(self) -> int:
        return self.spec.layer_widths[-1]

    def _check_film(self, film_signal):
        if self.spec.film_layers and film_signal is None:
            raise ConfigurationError(f"{self.name}: film signal required but missing")
        if not self.spec.film_layers and film_signal is not None:
            raise ConfigurationError(f"{self.name}: film signal given but spec has no film layers")

    def forward(self, x, film_signal=None) -> np.ndarray:
        """Forward pass without caching; cheaper for inference."""
        self._check_film(film_signal)
        h, squeeze = _as_rows(x, self.in_dim, f"{self.name} input")
        fs = None
        if film_signal is not None:
            fs, _ = _as_rows(film_signal, self.film_dim, f"{self.name} film signal")
            if fs.shape[0] == 1 and h.shape[0] > 1:
                fs = np.broadcast_to(fs, (h.shape[0], fs.shape[1]))
        for l in range(self.spec.n_layers):
            z = h @ self.weights[l].values + self.biases[l].values
            h = _act(self.spec.activations[l], z)
            if l in self.spec.film_layers:
                proj = fs @ self.film_weights[l].values + self.film_biases[l].values
                s, t = np.split(proj, 2, axis=1)
                h = (1.0 + s) * h + t
        return h[0] if squeeze else h

    def forward_cached(self, x, film_signal=None):
        """Forward pass that records everything needed by :meth:`backward`."""
        self._check_film(film_signal)
        h, squeeze = _as_rows(x, self.in_dim, f"{self.name} input")
        fs = None
        if film_signal is not None:
            fs, _ = _as_rows(film_signal, self.film_dim, f"{self.name} film signal")
            if fs.shape[0] != h.shape[0]:
                raise ConfigurationError(
                    f"{self.name}: film batch {fs.shape[0]} != input batch {h.shape[0]}")
        layers = []
        for l in range(self.spec.n_layers):
            x_in = h
            z = h @ self.weights[l].values + self.biases[l].values
            a = _act(self.spec.activations[l], z)
            s = None
            if l in self.spec.film_layers:
                proj = fs @ self.film_weights[l].values + self.film_biases[l].values
                s, t = np.split(proj, 2, axis=1)
                h = (1.0 + s) * a + t
            else:
                h = a
            layers.append((x_in, z, a, s))
        cache = {"layers": layers, "film": fs, "squeeze": squeeze, "batch": h.shape[0]}
        return (h[0] if squeeze else h), cache

    def backward(self, cache, output_grad):
        """Backprop through a cached forward.

        Accumulates parameter gradients and returns
        ``(input_grad, film_grad)``; ``film_grad`` is None when the spec has
        no FiLM layers. Shapes mirror the cached forward's inputs.
        """
        if cache is None:
            raise UsageError(f"{self.name}: backward called without a cached forward")
        g, _ = _as_rows(output_grad, self.out_dim, f"{self.name} output grad")
        if g.shape[0] != cache["batch"]:
            raise ConfigurationError(
                f"{self.name}: output grad batch {g.shape[0]} != cached batch {cache['batch']}")
        fs = cache["film"]
        dfilm = np.zeros_like(fs) if fs is not None else None
        for l in reversed(range(self.spec.n_layers)):
            x_in, z, a, s = cache["layers"][l]
            if s is not None:
                ds = g * a
                dt = g
                dproj = np.concatenate([ds, dt], axis=1)
                self.film_weights[l].grads += fs.T @ dproj
                self.film_biases[l].grads += dproj.sum(axis=0)
                dfilm += dproj @ self.film_weights[l].values.T
                g = g * (1.0 + s)
            dz = g * _act_grad(self.spec.activations[l], z, a)
            self.weights[l].grads += x_in.T @ dz
            self.biases[l].grads += dz.sum(axis=0)
            g = dz @ self.weights[l].values.T
        if cache["squeeze"]:
            return g[0], (dfilm[0] if dfilm is not None else None)
        return g, dfilm


@dataclass
class PointCloud:
    """A set of (x, y, z) points; z is fixed at 0 for the planar bench."""

    points: np.ndarray

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64)
        if self.points.ndim != 2 or self.points.shape[1] != 3:
            raise InputError(f"point cloud must be (N, 3), got {self.points.shape}")
        if self.points.shape[0] < 1:
            raise InputError("point cloud must contain at least one point")
        if not np.all(np.isfinite(self.points)):
            raise InputError("point cloud contains non-finite coordinates")

    @property
    def n_points(self) -> int:
        return self.points.shape[0]


class PointCloudEncoder:
    """Shared per-point MLP followed by coordinatewise max pooling.

    Max pooling makes the encoding exactly invariant to point order and to
    duplicated points. Gradients flow to the argmax point per feature
    coordinate (first occurrence on ties).
    """

    def __init__(self, name: str, store: ParamStore, rng: np.random.Generator,
                 widths: tuple[int, ...] = (64, 128), point_dim: int = 3):
        if len(widths) < 1:
            raise ConfigurationError("point encoder needs at least one layer width")
        acts = ("relu",) * (len(widths) - 1) + ("identity",)
        self.mlp = Mlp(name, MlpSpec((point_dim,) + tuple(widths), acts), store, rng)
        self.point_dim = point_dim
        self.out_dim = widths[-1]

    @staticmethod
    def _points(cloud) -> tuple[np.ndarray, bool]:
        if isinstance(cloud, PointCloud):
            return cloud.points[None, :, :], True
        arr = np.asarray(cloud, dtype=np.float64)
        if arr.ndim == 2:
            return arr[None, :, :], True
        if arr.ndim == 3:
            return arr, False
        raise InputError(f"expected (N, 3) or (B, N, 3) points, got shape {arr.shape}")

    def encode(self, cloud) -> np.ndarray:
        pts, squeeze = self._points(cloud)
        b, n, d = pts.shape
        if n < 1:
            raise InputError("cannot encode an empty point cloud")
        feats = self.mlp.forward(pts.reshape(b * n, d)).reshape(b, n, self.out_dim)
        pooled = feats.max(axis=1)
        return pooled[0] if squeeze else pooled

    def encode_cached(self, cloud):
        pts, squeeze = self._points(cloud)
        b, n, d = pts.shape
        if n < 1:
            raise InputError("cannot encode an empty point cloud")
        flat, mlp_cache = self.mlp.forward_cached(pts.reshape(b * n, d))
        feats = flat.reshape(b, n, self.out_dim)
        pooled = feats.max(axis=1)
        idx = feats.argmax(axis=1)
        cache = {"mlp": mlp_cache, "idx": idx, "b": b, "n": n, "squeeze": squeeze}
        return (pooled[0] if squeeze else pooled), cache

    def backward(self, cache, pooled_grad) -> None:
        """Accumulate parameter grads; cloud coordinates are data, not params."""
        if cache is None:
            raise UsageError("point encoder backward called without a cached forward")
        g = np.asarray(pooled_grad, dtype=np.float64)
        if cache["squeeze"]:
            g = g[None, :]
        b, n = cache["b"], cache["n"]
        per_point = np.zeros((b, n, self.out_dim))
        np.put_along_axis(per_point, cache["idx"][:, None, :], g[:, None, :], axis=1)
        self.mlp.backward(cache["mlp"], per_point.reshape(b * n, self.out_dim))


@dataclass(frozen=True)
class TextEmbedding:
    """Deterministic pseudo-embedding of a task or subgoal string."""

    vector: np.ndarray
    source_string: str


def embed_text(text: str, d_text: int = 32) -> TextEmbedding:
    """Map a string to a unit-norm float64 vector.

    The vector is derived from sha256 of the string, so it is stable across
    runs, platforms, and processes, and needs no trained parameters. Distinct
    strings collide with negligible probability.

    Raises:
        InputError: on an empty string.
        ConfigurationError: on a non-positive dimension.
    """
    if not text:
        raise InputError("cannot embed an empty string")
    if d_text < 1:
        raise ConfigurationError(f"d_text must be positive, got {d_text}")
    vals: list[float] = []
    block = 0
    while len(vals) < d_text:
        digest = hashlib.sha256(text.encode("utf-8") + b"\x00" + block.to_bytes(4, "big")).digest()
        for j in range(0, 32, 8):
            u = (int.from_bytes(digest[j:j + 8], "big") + 0.5) / 2.0 ** 64
            vals.append(2.0 * u - 1.0)
        block += 1
    v = np.array(vals[:d_text], dtype=np.float64)
    norm = float(np.linalg.norm(v))
    if norm <= 0.0:  # unreachable in practice, kept as a guard
        raise InputError(f"degenerate embedding for {text!r}")
    return TextEmbedding(vector=v / norm, source_string=text)
