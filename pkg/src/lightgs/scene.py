"""Scene data model: Gaussians, clouds, cameras, frames and their closed-form geometry."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import sh as shlib
from .errors import InvalidArgument

DEFAULT_SH_DEGREE = 3


def _as_scales(s) -> np.ndarray:
    s = np.asarray(s, dtype=np.float64)
    if np.any(~(s > 0)):
        raise InvalidArgument("scales must be strictly positive")
    return s


def normalize_quaternions(q: np.ndarray) -> np.ndarray:
    q = np.asarray(q, dtype=np.float64)
    norm = np.sqrt((q * q).sum(axis=-1, keepdims=True))
    if np.any(norm == 0):
        raise InvalidArgument("zero-length quaternion")
    return q / norm


def rotation_matrices(q: np.ndarray) -> np.ndarray:
    """Rotation matrices for unit quaternions stored (w, x, y, z); ``[..., 3, 3]``."""
    q = np.asarray(q, dtype=np.float64)
    w, x, y, z = q[..., 0], q[..., 1], q[..., 2], q[..., 3]
    R = np.empty(q.shape[:-1] + (3, 3))
    R[..., 0, 0] = 1 - 2 * (y * y + z * z)
    R[..., 0, 1] = 2 * (x * y - w * z)
    R[..., 0, 2] = 2 * (x * z + w * y)
    R[..., 1, 0] = 2 * (x * y + w * z)
    R[..., 1, 1] = 1 - 2 * (x * x + z * z)
    R[..., 1, 2] = 2 * (y * z - w * x)
    R[..., 2, 0] = 2 * (x * z - w * y)
    R[..., 2, 1] = 2 * (y * z + w * x)
    R[..., 2, 2] = 1 - 2 * (x * x + y * y)
    return R


def covariances(q: np.ndarray, s: np.ndarray) -> np.ndarray:
    """Batched Sigma = R diag(s)^2 R^T. Quaternions are normalized first."""
    s = _as_scales(s)
    R = rotation_matrices(normalize_quaternions(q))
    M = R * s[..., None, :]
    return (M[..., :, None, :] * M[..., None, :, :]).sum(axis=-1)


def covariance_from(q, s) -> np.ndarray:
    q = np.asarray(q, dtype=np.float64)
    if abs(np.linalg.norm(q) - 1.0) > 1e-6:
        raise InvalidArgument("quaternion must be unit length")
    return covariances(q, s)


def gaussian_volume(s) -> np.ndarray | float:
    """Ellipsoid volume 4*pi*s1*s2*s3/3, batched over leading axes."""
    s = _as_scales(s)
    v = 4.0 * np.pi * s[..., 0] * s[..., 1] * s[..., 2] / 3.0
    return float(v) if np.ndim(v) == 0 else v


@dataclass(frozen=True)
class Gaussian:
    center: np.ndarray
    rotation: np.ndarray
    scale: np.ndarray
    opacity: float
    sh: np.ndarray  # (3, B)
    active_sh_degree: int = DEFAULT_SH_DEGREE

    def __post_init__(self):
        _as_scales(self.scale)
        if not 0.0 <= self.opacity <= 1.0:
            raise InvalidArgument("opacity must lie in [0, 1]")
        sh = np.asarray(self.sh)
        if sh.ndim != 2 or sh.shape[0] != 3:
            raise InvalidArgument("sh must have shape (3, B)")
        if self.active_sh_degree > shlib.degree_from_basis(sh.shape[1]):
            raise InvalidArgument("active degree exceeds stored SH degree")

    @property
    def covariance(self) -> np.ndarray:
        return covariances(self.rotation, self.scale)


def eval_gaussian(g: Gaussian, x) -> float:
    """Unnormalized density exp(-0.5 (x-mu)^T Sigma^-1 (x-mu))."""
    d = np.asarray(x, dtype=np.float64) - np.asarray(g.center, dtype=np.float64)
    m = d @ np.linalg.solve(g.covariance, d)
    return float(np.exp(-0.5 * m))


@dataclass(frozen=True)
class GaussianCloud:
    """Structure-of-arrays storage; row ``i`` is Gaussian ``i``.

    centers (N,3), rotations (N,4) as (w,x,y,z), scales (N,3) linear,
    opacities (N,), sh (N,3,B).
    """

    centers: np.ndarray
    rotations: np.ndarray
    scales: np.ndarray
    opacities: np.ndarray
    sh: np.ndarray

    def __post_init__(self):
        n = self.centers.shape[0]
        shapes = {
            "centers": (self.centers.shape, (n, 3)),
            "rotations": (self.rotations.shape, (n, 4)),
            "scales": (self.scales.shape, (n, 3)),
            "opacities": (self.opacities.shape, (n,)),
        }
        for name, (got, want) in shapes.items():
            if got != want:
                raise InvalidArgument(f"{name} has shape {got}, expected {want}")
        if self.sh.ndim != 3 or self.sh.shape[:2] != (n, 3):
            raise InvalidArgument(f"sh has shape {self.sh.shape}, expected ({n}, 3, B)")
        shlib.degree_from_basis(self.sh.shape[2])
        if n and np.any(~(self.scales > 0)):
            raise InvalidArgument("scales must be strictly positive")
        if n and (self.opacities.min() < 0 or self.opacities.max() > 1):
            raise InvalidArgument("opacities must lie in [0, 1]")

    def __len__(self) -> int:
        return self.centers.shape[0]

    def __getitem__(self, i: int) -> Gaussian:
        return Gaussian(
            self.centers[i], self.rotations[i], self.scales[i],
            float(self.opacities[i]), self.sh[i], self.sh_degree,
        )

    @property
    def sh_degree(self) -> int:
        return shlib.degree_from_basis(self.sh.shape[2])

    @classmethod
    def empty(cls, sh_degree: int = DEFAULT_SH_DEGREE) -> "GaussianCloud":
        b = shlib.num_basis(sh_degree)
        return cls(np.zeros((0, 3)), np.zeros((0, 4)), np.zeros((0, 3)), np.zeros(0), np.zeros((0, 3, b)))

    @classmethod
    def from_gaussians(cls, gaussians: Sequence[Gaussian]) -> "GaussianCloud":
        if not gaussians:
            return cls.empty()
        return cls(
            np.array([g.center for g in gaussians], dtype=np.float64),
            np.array([g.rotation for g in gaussians], dtype=np.float64),
            np.array([g.scale for g in gaussians], dtype=np.float64),
            np.array([g.opacity for g in gaussians], dtype=np.float64),
            np.array([g.sh for g in gaussians], dtype=np.float64),
        )

    def subset(self, index: np.ndarray) -> "GaussianCloud":
        return GaussianCloud(
            self.centers[index], self.rotations[index], self.scales[index],
            self.opacities[index], self.sh[index],
        )

    def replace(self, **changes) -> "GaussianCloud":
        fields = dict(
            centers=self.centers, rotations=self.rotations, scales=self.scales,
            opacities=self.opacities, sh=self.sh,
        )
        fields.update(changes)
        return GaussianCloud(**fields)

    def float_count(self) -> int:
        """Stored floats per Gaussian times count (center, quat, scale, opacity, SH)."""
        return len(self) * (3 + 4 + 3 + 1 + 3 * self.sh.shape[2])

    def equals(self, other: "GaussianCloud") -> bool:
        return all(
            np.array_equal(a, b)
            for a, b in zip(
                (self.centers, self.rotations, self.scales, self.opacities, self.sh),
                (other.centers, other.rotations, other.scales, other.opacities, other.sh),
            )
        )


@dataclass(frozen=True)
class Camera:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    world_to_camera: np.ndarray = field(default_factory=lambda: np.eye(4))

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise InvalidArgument("focal lengths must be positive")
        if self.width < 1 or self.height < 1:
            raise InvalidArgument("image size must be positive")
        w2c = np.asarray(self.world_to_camera, dtype=np.float64)
        if w2c.shape != (4, 4):
            raise InvalidArgument("world_to_camera must be 4x4")
        R = w2c[:3, :3]
        if np.abs(R @ R.T - np.eye(3)).max() > 1e-6:
            raise InvalidArgument("world_to_camera rotation block is not orthonormal")
        object.__setattr__(self, "world_to_camera", w2c)

    @property
    def rotation(self) -> np.ndarray:
        return self.world_to_camera[:3, :3]

    @property
    def translation(self) -> np.ndarray:
        return self.world_to_camera[:3, 3]

    @property
    def center(self) -> np.ndarray:
        return -self.rotation.T @ self.translation

    @staticmethod
    def look_at(eye, target, up, fx, fy, width, height) -> "Camera":
        """OpenCV-style camera (x right, y down, z forward) at ``eye`` facing ``target``."""
        eye, target, up = (np.asarray(v, dtype=np.float64) for v in (eye, target, up))
        forward = target - eye
        forward /= np.linalg.norm(forward)
        right = np.cross(forward, up)
        right /= np.linalg.norm(right)
        down = np.cross(forward, right)
        R = np.stack([right, down, forward])
        w2c = np.eye(4)
        w2c[:3, :3] = R
        w2c[:3, 3] = -R @ eye
        return Camera(fx, fy, width / 2.0, height / 2.0, width, height, w2c)


@dataclass(frozen=True)
class Frame:
    image: np.ndarray  # (H, W, 3)
    time: float
    camera: Camera

    def __post_init__(self):
        if not 0.0 <= self.time <= 1.0:
            raise InvalidArgument("frame time must lie in [0, 1]")
        if self.image.shape != (self.camera.height, self.camera.width, 3):
            raise InvalidArgument("image size does not match camera")


@dataclass(frozen=True)
class SceneDataset:
    frames: tuple[Frame, ...]

    def __post_init__(self):
        object.__setattr__(self, "frames", tuple(self.frames))
        times = [f.time for f in self.frames]
        if any(b < a for a, b in zip(times, times[1:])):
            raise InvalidArgument("frame timestamps must be nondecreasing")

    @property
    def T(self) -> int:
        return len(self.frames)

    def __len__(self) -> int:
        return len(self.frames)

    def __iter__(self):
        return iter(self.frames)

    def split(self, every: int = 8) -> tuple["SceneDataset", "SceneDataset"]:
        """Deterministic train/test split: every ``every``-th frame is held out."""
        test = tuple(f for i, f in enumerate(self.frames) if i % every == every - 1)
        train = tuple(f for i, f in enumerate(self.frames) if i % every != every - 1)
        return SceneDataset(train), SceneDataset(test)
