"""Elevation as a learned function of (x, y): sinusoidal positional
encoding into a small fully connected network with a scalar output.

Inputs are normalized to [-1, 1] over the mesh bounds before encoding;
without this the upper frequency bands alias over scenes hundreds of
meters across. The encoding keeps the raw normalized coordinates alongside
the sin/cos bands so gentle large-scale slopes stay easy to represent.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .errors import DataError, NumericError
from .geometry import SE3Pose
from .mesh import Bounds
from .optim import Adam

DEFAULT_NUM_FREQS = 5
DEFAULT_HIDDEN_WIDTH = 128
DEFAULT_NUM_LAYERS = 8

CHECKPOINT_MAGIC = "roadmesh-elevation.v1"


@dataclass
class PositionalEncoding:
    """Maps (x, y) to [x^, y^, sin/cos bands] with 4 * num_freqs + 2 outputs.

    Band k covers frequency 2^k * pi over the normalized coordinates, in
    blocks of [sin(x), cos(x), sin(y), cos(y)] so that raising num_freqs
    only appends features.
    """

    num_freqs: int
    bounds: Bounds

    @property
    def dim(self) -> int:
        return 4 * self.num_freqs + 2

    def normalize(self, xy: np.ndarray) -> np.ndarray:
        b = self.bounds
        out = np.empty_like(xy, dtype=np.float64)
        out[:, 0] = 2.0 * (xy[:, 0] - b.x_min) / b.width - 1.0
        out[:, 1] = 2.0 * (xy[:, 1] - b.y_min) / b.height - 1.0
        return out

    def encode(self, xy) -> np.ndarray:
        xy = np.atleast_2d(np.asarray(xy, dtype=np.float64))
        norm = self.normalize(xy)
        n = norm.shape[0]
        feats = np.empty((n, self.dim))
        feats[:, :2] = norm
        for k in range(self.num_freqs):
            arg = norm * (np.pi * (2.0 ** k))
            base = 2 + 4 * k
            feats[:, base] = np.sin(arg[:, 0])
            feats[:, base + 1] = np.cos(arg[:, 0])
            feats[:, base + 2] = np.sin(arg[:, 1])
            feats[:, base + 3] = np.cos(arg[:, 1])
        return feats


class ActivationCache:
    """Layer inputs captured by forward_cached, consumed by backward."""

    def __init__(self, inputs: list[np.ndarray], version: int):
        self.inputs = inputs
        self.version = version


class ElevationField:
    """Positional encoding plus an MLP of `num_layers` fully connected
    layers (hidden width `hidden_width`, ReLU), scalar output in meters.

    The final layer is zero-initialized so a fresh field is exactly flat.
    Parameters live in `weights`/`biases`; after mutating them externally
    call bump_version() so stale activation caches are rejected.
    """

    def __init__(self, bounds: Bounds, num_freqs: int = DEFAULT_NUM_FREQS,
                 hidden_width: int = DEFAULT_HIDDEN_WIDTH,
                 num_layers: int = DEFAULT_NUM_LAYERS,
                 dtype=np.float32, seed: int = 0):
        if num_layers < 2:
            raise ValueError("need at least an input and an output layer")
        self.encoding = PositionalEncoding(num_freqs, bounds)
        self.hidden_width = hidden_width
        self.num_layers = num_layers
        self.dtype = np.dtype(dtype)
        self.version = 0
        rng = np.random.default_rng(seed)
        dims = [self.encoding.dim] + [hidden_width] * (num_layers - 1) + [1]
        self.weights: list[np.ndarray] = []
        self.biases: list[np.ndarray] = []
        for i in range(num_layers):
            fan_in = dims[i]
            if i == num_layers - 1:
                w = np.zeros((fan_in, dims[i + 1]))
            else:
                bound = np.sqrt(6.0 / fan_in)  # Kaiming uniform for ReLU
                w = rng.uniform(-bound, bound, size=(fan_in, dims[i + 1]))
            self.weights.append(w.astype(self.dtype))
            self.biases.append(np.zeros(dims[i + 1], dtype=self.dtype))

    @property
    def bounds(self) -> Bounds:
        return self.encoding.bounds

    @property
    def num_freqs(self) -> int:
        return self.encoding.num_freqs

    def params(self) -> list[np.ndarray]:
        """Flat parameter list, weights and biases interleaved per layer."""
        out = []
        for w, b in zip(self.weights, self.biases):
            out.extend([w, b])
        return out

    def bump_version(self) -> None:
        self.version += 1

    def check_finite(self) -> None:
        for k, p in enumerate(self.params()):
            if not np.isfinite(p).all():
                raise NumericError(f"elevation field parameter {k} went non-finite")

    def _run(self, xy, keep_cache: bool):
        feats = self.encoding.encode(xy).astype(self.dtype)
        inputs = [feats] if keep_cache else None
        h = feats
        for i in range(self.num_layers):
            a = h @ self.weights[i]
            a += self.biases[i]
            if i < self.num_layers - 1:
                np.maximum(a, 0, out=a)
                h = a
                if keep_cache:
                    inputs.append(h)
            else:
                h = a
        z = h[:, 0]
        if keep_cache:
            return z, ActivationCache(inputs, self.version)
        return z

    def forward(self, xy) -> np.ndarray:
        """Elevation in meters for an (n, 2) batch of (x, y).

        Deterministic for a fixed batch; each row's result is independent
        of other rows' values. Across different batch heights the backing
        GEMM may reassociate sums, so batch-vs-single agreement is exact
        only up to ULP-scale differences.
        """
        return self._run(xy, keep_cache=False)

    def forward_cached(self, xy):
        """forward() plus the activation cache needed by backward()."""
        return self._run(xy, keep_cache=True)

    def backward(self, cache: ActivationCache, upstream_dz) -> list[np.ndarray]:
        """Parameter gradients of sum(upstream_dz * z) for the cached batch.

        Returned in the same order as params(). The cache must come from a
        forward_cached call against the current parameter values.
        """
        if cache.version != self.version:
            raise NumericError(
                "stale activation cache: parameters changed since forward")
        da = np.asarray(upstream_dz, dtype=self.dtype).reshape(-1, 1)
        grads_w = [None] * self.num_layers
        grads_b = [None] * self.num_layers
        for i in range(self.num_layers - 1, -1, -1):
            h_in = cache.inputs[i]
            grads_w[i] = h_in.T @ da
            grads_b[i] = da.sum(axis=0)
            if i > 0:
                dh = da @ self.weights[i].T
                da = dh * (cache.inputs[i] > 0)
        out = []
        for gw, gb in zip(grads_w, grads_b):
            out.extend([gw, gb])
        return out

    def save(self, path) -> None:
        """Single-file checkpoint: one JSON header line, then the flat
        little-endian float32 parameter blob."""
        header = {
            "magic": CHECKPOINT_MAGIC,
            "num_freqs": self.num_freqs,
            "hidden_width": self.hidden_width,
            "num_layers": self.num_layers,
            "bounds": self.bounds.to_dict(),
            "layer_sizes": [list(w.shape) for w in self.weights],
        }
        blob = b"".join(
            np.ascontiguousarray(p, dtype="<f4").tobytes() for p in self.params())
        with open(path, "wb") as fh:
            fh.write(json.dumps(header, sort_keys=True).encode("utf-8"))
            fh.write(b"\n")
            fh.write(blob)

    @classmethod
    def load(cls, path, dtype=np.float32) -> "ElevationField":
        try:
            with open(path, "rb") as fh:
                header_line = fh.readline()
                blob = fh.read()
        except OSError as exc:
            raise DataError(f"cannot read elevation checkpoint {path}: {exc}") from exc
        try:
            header = json.loads(header_line.decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise DataError(f"corrupt elevation checkpoint header in {path}") from exc
        if header.get("magic") != CHECKPOINT_MAGIC:
            raise DataError(f"{path} is not an elevation checkpoint")
        field = cls(Bounds.from_dict(header["bounds"]),
                    num_freqs=int(header["num_freqs"]),
                    hidden_width=int(header["hidden_width"]),
                    num_layers=int(header["num_layers"]),
                    dtype=dtype)
        flat = np.frombuffer(blob, dtype="<f4")
        expected = sum(p.size for p in field.params())
        if flat.size != expected:
            raise DataError(
                f"elevation checkpoint {path} holds {flat.size} parameters, "
                f"expected {expected}")
        offset = 0
        for i in range(field.num_layers):
            for arr_name in ("weights", "biases"):
                target = getattr(field, arr_name)[i]
                chunk = flat[offset:offset + target.size]
                getattr(field, arr_name)[i] = (
                    chunk.reshape(target.shape).astype(field.dtype))
                offset += target.size
        field.bump_version()
        return field


def pretrain_points_from_trajectory(ego_poses: list[SE3Pose],
                                    lateral_halfwidth: float = 6.0,
                                    lateral_step: float = 0.5,
                                    ego_height: float = 1.7) -> np.ndarray:
    """Semi-dense surface points: each pose extended along its lateral
    axis and the whole line lowered by ego_height. Returns (n, 3)."""
    if len(ego_poses) == 0:
        raise DataError("need at least one ego pose to build pretraining points")
    k_max = int(np.floor(lateral_halfwidth / lateral_step + 1e-9))
    offsets = np.arange(-k_max, k_max + 1) * lateral_step
    points = []
    drop = np.array([0.0, 0.0, ego_height])
    for pose in ego_poses:
        lateral = pose.rotation @ np.array([0.0, 1.0, 0.0])
        pts = pose.translation[None, :] + offsets[:, None] * lateral[None, :]
        points.append(pts - drop)
    return np.concatenate(points, axis=0)


def pretrain(field: ElevationField, points, iterations: int = 1500,
             lr: float = 2e-3, checkpoint_every: int = 100) -> dict:
    """Fit the field to (x, y, z) points by full-batch Adam on squared error.

    Returns {"history": [(iteration, mse), ...], "final_rmse": float}.
    Raises NumericError if the loss diverges to NaN.
    """
    points = np.asarray(points, dtype=np.float64)
    if points.ndim != 2 or points.shape[1] != 3 or points.shape[0] < 10:
        raise DataError("pretraining needs at least 10 (x, y, z) points")
    xy = points[:, :2]
    z_target = points[:, 2]
    opt = Adam()
    opt.register("pretrain", field.params())
    n = points.shape[0]
    history = []
    for it in range(iterations):
        z, cache = field.forward_cached(xy)
        resid = z.astype(np.float64) - z_target
        mse = float(np.mean(resid ** 2))
        if not np.isfinite(mse):
            raise NumericError(
                f"elevation pretraining diverged at iteration {it} (mse={mse})")
        if it % checkpoint_every == 0:
            history.append((it, mse))
        grads = field.backward(cache, (2.0 / n) * resid)
        opt.step("pretrain", field.params(), grads, lr)
        field.bump_version()
        field.check_finite()
    z_final = field.forward(xy)
    final_mse = float(np.mean((z_final.astype(np.float64) - z_target) ** 2))
    history.append((iterations, final_mse))
    return {"history": history, "final_rmse": float(np.sqrt(final_mse))}
