"""Spatio-temporal feature planes plus a tiny MLP that predict per-Gaussian deformation."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from .errors import InvalidArgument, InvalidState
from .scene import GaussianCloud, normalize_quaternions

# Axis pairs of the six planes; axis 3 is time.
PLANE_AXES: tuple[tuple[int, int], ...] = ((0, 1), (0, 2), (1, 2), (0, 3), (1, 3), (2, 3))
PLANE_NAMES = ("xy", "xz", "yz", "xt", "yt", "zt")
SCALE_FLOOR = 1e-6
DEFAULT_RESOLUTION = (16, 16, 16, 25)
DEFAULT_FEATURE_DIM = 16
DEFAULT_HIDDEN = 64
DEFAULT_DEPTH = 2
HEAD_DIMS = (3, 4, 3)


def f32exact(a) -> np.ndarray:
    """Round to the nearest binary32 value, kept as float64."""
    return np.asarray(a, dtype=np.float32).astype(np.float64)


@dataclass(frozen=True)
class FeaturePlane:
    axes: tuple[int, int]
    values: np.ndarray  # (R1, R2, d)

    def __post_init__(self):
        if self.axes not in PLANE_AXES:
            raise InvalidArgument(f"unknown plane axes {self.axes}")
        v = self.values
        if v.ndim != 3 or v.shape[0] < 2 or v.shape[1] < 2 or v.shape[2] < 1:
            raise InvalidArgument(f"plane values must be (R1>=2, R2>=2, d>=1), got {v.shape}")
        if not np.all(np.isfinite(v)):
            raise InvalidArgument("plane values must be finite")

    @property
    def resolution(self) -> tuple[int, int]:
        return self.values.shape[0], self.values.shape[1]

    @property
    def feature_dim(self) -> int:
        return self.values.shape[2]


@dataclass(frozen=True)
class TinyMLP:
    """Dense ReLU network; the last layer is the fused (3, 4, 3) output head.

    Weights are stored (out, in).
    """

    weights: tuple[np.ndarray, ...]
    biases: tuple[np.ndarray, ...]

    def __post_init__(self):
        object.__setattr__(self, "weights", tuple(self.weights))
        object.__setattr__(self, "biases", tuple(self.biases))
        if len(self.weights) != len(self.biases) or not self.weights:
            raise InvalidArgument("MLP needs matching, non-empty weight and bias lists")
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            if w.ndim != 2 or b.shape != (w.shape[0],):
                raise InvalidArgument(f"layer {i}: weight {w.shape} / bias {b.shape} mismatch")
            if i and w.shape[1] != self.weights[i - 1].shape[0]:
                raise InvalidArgument(f"layer {i} input does not match previous output")
        if self.weights[-1].shape[0] != sum(HEAD_DIMS):
            raise InvalidArgument("output head must produce 10 values (3 + 4 + 3)")

    @property
    def input_dim(self) -> int:
        return self.weights[0].shape[1]

    def param_count(self) -> int:
        return sum(w.size + b.size for w, b in zip(self.weights, self.biases))


@dataclass(frozen=True)
class DeformationField:
    planes: tuple[FeaturePlane, ...]
    mlp: TinyMLP
    aabb: np.ndarray = field(default_factory=lambda: np.array([-1.0, -1.0, -1.0, 1.0, 1.0, 1.0]))
    time_range: np.ndarray = field(default_factory=lambda: np.array([0.0, 1.0]))

    def __post_init__(self):
        object.__setattr__(self, "planes", tuple(self.planes))
        object.__setattr__(self, "aabb", np.asarray(self.aabb, dtype=np.float64))
        object.__setattr__(self, "time_range", np.asarray(self.time_range, dtype=np.float64))
        if tuple(p.axes for p in self.planes) != PLANE_AXES:
            raise InvalidArgument("field needs exactly six planes in xy, xz, yz, xt, yt, zt order")
        dims = {p.feature_dim for p in self.planes}
        if len(dims) != 1:
            raise InvalidArgument("all planes must share feature_dim")
        res = [None] * 4
        for p in self.planes:
            for axis, r in zip(p.axes, p.resolution):
                if res[axis] is None:
                    res[axis] = r
                elif res[axis] != r:
                    raise InvalidArgument(f"planes disagree on resolution of axis {axis}")
        if self.mlp.input_dim != self.feature_dim:
            raise InvalidArgument("MLP input dim must equal feature_dim")

    @property
    def feature_dim(self) -> int:
        return self.planes[0].feature_dim

    @property
    def resolution(self) -> tuple[int, int, int, int]:
        p = self.planes
        return (p[0].resolution[0], p[0].resolution[1], p[1].resolution[1], p[3].resolution[1])

    def plane_value_count(self) -> int:
        return sum(p.values.size for p in self.planes)

    def replace(self, **changes) -> "DeformationField":
        kw = dict(planes=self.planes, mlp=self.mlp, aabb=self.aabb, time_range=self.time_range)
        kw.update(changes)
        return DeformationField(**kw)

    def with_plane_values(self, values) -> "DeformationField":
        return self.replace(planes=[FeaturePlane(p.axes, v) for p, v in zip(self.planes, values)])

    def equals(self, other: "DeformationField") -> bool:
        return (
            all(np.array_equal(a.values, b.values) for a, b in zip(self.planes, other.planes))
            and len(self.mlp.weights) == len(other.mlp.weights)
            and all(np.array_equal(a, b) for a, b in zip(self.mlp.weights, other.mlp.weights))
            and all(np.array_equal(a, b) for a, b in zip(self.mlp.biases, other.mlp.biases))
            and np.array_equal(self.aabb, other.aabb)
            and np.array_equal(self.time_range, other.time_range)
        )


@dataclass(frozen=True)
class Scene:
    """A renderable model: explicit Gaussians plus the deformation field that animates them."""

    cloud: GaussianCloud
    field: DeformationField


class FieldSample(NamedTuple):
    features: np.ndarray  # (N, d)
    plane_samples: tuple[np.ndarray, ...]  # six (N, d)
    lower: np.ndarray  # (N, 4) lower cell index per axis
    frac: np.ndarray  # (N, 4)
    inside: np.ndarray  # (N, 4) False where the coordinate was clamped
    coord_scale: np.ndarray  # (4,) d(grid coord)/d(world coord)


def _grid_coords(field: DeformationField, points: np.ndarray, t: float):
    lo, hi = field.aabb[:3], field.aabb[3:]
    t0, t1 = field.time_range
    if np.any(hi <= lo) or t1 <= t0:
        raise InvalidState("degenerate field bounds")
    res = np.array(field.resolution, dtype=np.float64)
    extent = np.concatenate([hi - lo, [t1 - t0]])
    scale = (res - 1.0) / extent
    raw = np.empty((points.shape[0], 4))
    raw[:, :3] = (points - lo) * scale[:3]
    raw[:, 3] = (t - t0) * scale[3]
    u = np.clip(raw, 0.0, res - 1.0)
    inside = (raw >= 0.0) & (raw <= res - 1.0)
    lower = np.minimum(np.floor(u).astype(np.int64), (res - 2).astype(np.int64))
    return lower, u - lower, inside, scale


def sample_field_batch(field: DeformationField, points: np.ndarray, t: float) -> FieldSample:
    """Product of bilinear lookups in all six planes for every point at time ``t``."""
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    lower, frac, inside, scale = _grid_coords(field, points, t)
    samples = []
    feats = None
    for plane in field.planes:
        a, b = plane.axes
        V = plane.values
        ia, ib = lower[:, a], lower[:, b]
        fa, fb = frac[:, a:a + 1], frac[:, b:b + 1]
        v = ((1 - fa) * (1 - fb) * V[ia, ib] + fa * (1 - fb) * V[ia + 1, ib]
             + (1 - fa) * fb * V[ia, ib + 1] + fa * fb * V[ia + 1, ib + 1])
        samples.append(v)
        feats = v if feats is None else feats * v
    return FieldSample(feats, tuple(samples), lower, frac, inside, scale)


def sample_field(field: DeformationField, mu, t: float) -> np.ndarray:
    if not 0.0 <= t <= 1.0:
        raise InvalidArgument(f"time {t} outside [0, 1]")
    return sample_field_batch(field, np.asarray(mu, dtype=np.float64)[None], t).features[0]


def mlp_forward_batch(mlp: TinyMLP, f: np.ndarray):
    """Returns (outputs (N,10), activations per layer input) for backward."""
    f = np.asarray(f, dtype=np.float64)
    if f.shape[-1] != mlp.input_dim:
        raise InvalidArgument(f"feature length {f.shape[-1]} != MLP input {mlp.input_dim}")
    acts = [f]
    h = f
    last = len(mlp.weights) - 1
    for i, (w, b) in enumerate(zip(mlp.weights, mlp.biases)):
        h = h @ w.T + b
        if i < last:
            h = np.maximum(h, 0.0)
            acts.append(h)
    return h, acts


def split_heads(out: np.ndarray):
    return out[..., 0:3], out[..., 3:7], out[..., 7:10]


def mlp_forward(mlp: TinyMLP, f):
    f = np.asarray(f, dtype=np.float64)
    if f.ndim != 1:
        raise InvalidArgument("mlp_forward takes a single feature vector")
    out, _ = mlp_forward_batch(mlp, f[None])
    return split_heads(out[0])


class DeformRecord(NamedTuple):
    d_mu: np.ndarray
    d_q: np.ndarray
    d_s: np.ndarray
    raw_rotations: np.ndarray  # q + dq before renormalization
    floored: np.ndarray  # (N, 3) True where the scale floor was applied
    sample: FieldSample
    activations: list
    time: float


def deform_cloud(cloud: GaussianCloud, field: DeformationField, t: float):
    """Apply the field at time ``t``; returns (deformed cloud, DeformRecord)."""
    if not 0.0 <= t <= 1.0:
        raise InvalidArgument(f"time {t} outside [0, 1]")
    sample = sample_field_batch(field, cloud.centers, t)
    out, acts = mlp_forward_batch(field.mlp, sample.features)
    d_mu, d_q, d_s = split_heads(out)
    raw_q = cloud.rotations + d_q
    changed = np.any(d_q != 0.0, axis=1)
    rotations = cloud.rotations.copy()
    if changed.any():
        rotations[changed] = normalize_quaternions(raw_q[changed])
    s = cloud.scales + d_s
    floored = s < SCALE_FLOOR
    s = np.where(floored, SCALE_FLOOR, s)
    deformed = cloud.replace(centers=cloud.centers + d_mu, rotations=rotations, scales=s)
    return deformed, DeformRecord(d_mu, d_q, d_s, raw_q, floored, sample, acts, t)


def init_field(
    resolution=DEFAULT_RESOLUTION,
    feature_dim: int = DEFAULT_FEATURE_DIM,
    seed: int = 0,
    hidden: int = DEFAULT_HIDDEN,
    depth: int = DEFAULT_DEPTH,
    aabb=(-1.0, -1.0, -1.0, 1.0, 1.0, 1.0),
) -> DeformationField:
    """Small random planes and a fan-in scaled MLP whose output head is zero."""
    if any(r < 2 for r in resolution):
        raise InvalidArgument("every resolution must be >= 2")
    rng = np.random.default_rng(seed)
    planes = [
        FeaturePlane(axes, f32exact(rng.uniform(-1e-4, 1e-4, (resolution[a], resolution[b], feature_dim))))
        for axes in PLANE_AXES
        for a, b in [axes]
    ]
    sizes = [feature_dim] + [hidden] * depth + [sum(HEAD_DIMS)]
    weights, biases = [], []
    for i, (n_in, n_out) in enumerate(zip(sizes[:-1], sizes[1:])):
        if i == len(sizes) - 2:
            weights.append(np.zeros((n_out, n_in)))
            biases.append(np.zeros(n_out))
        else:
            bound = 1.0 / np.sqrt(n_in)
            weights.append(f32exact(rng.uniform(-bound, bound, (n_out, n_in))))
            biases.append(f32exact(rng.uniform(-bound, bound, n_out)))
    return DeformationField(planes, TinyMLP(weights, biases), np.asarray(aabb, dtype=np.float64))


# --- reverse mode -----------------------------------------------------------


def mlp_backward(mlp: TinyMLP, acts: list, grad_out: np.ndarray):
    """Gradients of weights, biases and the MLP input given d(loss)/d(outputs)."""
    gw = [None] * len(mlp.weights)
    gb = [None] * len(mlp.weights)
    g = grad_out
    for i in range(len(mlp.weights) - 1, -1, -1):
        x = acts[i]
        gw[i] = g.T @ x
        gb[i] = g.sum(axis=0)
        g = g @ mlp.weights[i]
        if i > 0:
            g = g * (x > 0.0)
    return gw, gb, g


def field_backward(field: DeformationField, sample: FieldSample, grad_feat: np.ndarray):
    """Scatter d(loss)/d(features) into plane gradients and spatial coordinate gradients."""
    n = grad_feat.shape[0]
    plane_grads = [np.zeros_like(p.values) for p in field.planes]
    grad_coord = np.zeros((n, 4))
    samples = sample.plane_samples
    for k, plane in enumerate(field.planes):
        others = np.ones_like(grad_feat)
        for j, s in enumerate(samples):
            if j != k:
                others = others * s
        g = grad_feat * others  # d loss / d plane sample k
        a, b = plane.axes
        ia, ib = sample.lower[:, a], sample.lower[:, b]
        fa, fb = sample.frac[:, a:a + 1], sample.frac[:, b:b + 1]
        G = plane_grads[k]
        np.add.at(G, (ia, ib), (1 - fa) * (1 - fb) * g)
        np.add.at(G, (ia + 1, ib), fa * (1 - fb) * g)
        np.add.at(G, (ia, ib + 1), (1 - fa) * fb * g)
        np.add.at(G, (ia + 1, ib + 1), fa * fb * g)
        V = plane.values
        dva = (1 - fb) * (V[ia + 1, ib] - V[ia, ib]) + fb * (V[ia + 1, ib + 1] - V[ia, ib + 1])
        dvb = (1 - fa) * (V[ia, ib + 1] - V[ia, ib]) + fa * (V[ia + 1, ib + 1] - V[ia + 1, ib])
        grad_coord[:, a] += (g * dva).sum(axis=1)
        grad_coord[:, b] += (g * dvb).sum(axis=1)
    grad_coord = grad_coord * sample.inside * sample.coord_scale
    return plane_grads, grad_coord[:, :3]
