"""Synthetic dynamic scenes, image metrics and the compression benchmark."""
from __future__ import annotations

import math
import time
from dataclasses import asdict, dataclass, field, replace

import numpy as np
from scipy.signal import convolve2d

from . import sh as shlib
from .compressor import CompressionConfig, ScoreTable, SizeReport, compress, score_table
from .deformation import (
    PLANE_AXES, DeformationField, FeaturePlane, Scene, TinyMLP, f32exact,
)
from .errors import InvalidArgument
from .optimizer import OptimConfig, distill
from .renderer import render_dynamic
from .scene import Camera, Frame, GaussianCloud, SceneDataset, normalize_quaternions


@dataclass(frozen=True)
class SynthSpec:
    gaussian_count: int = 2000
    amplitude: float = 0.05
    field_resolution: tuple = (64, 64, 64, 100)
    feature_dim: int = 16
    frames: int = 25
    image_size: int = 128
    seed: int = 0
    dynamic_fraction: float = 0.3

    def __post_init__(self):
        object.__setattr__(self, "field_resolution", tuple(int(r) for r in self.field_resolution))
        if self.gaussian_count < 1 or self.frames < 1 or self.image_size < 1:
            raise InvalidArgument("counts must be >= 1")
        if self.amplitude < 0:
            raise InvalidArgument("amplitude must be >= 0")
        if self.feature_dim < 3:
            raise InvalidArgument("synthetic scenes need feature_dim >= 3")
        if not 0.0 < self.dynamic_fraction < 1.0:
            raise InvalidArgument("dynamic_fraction must lie in (0, 1)")
        if len(self.field_resolution) != 4 or min(self.field_resolution) < 2:
            raise InvalidArgument("field_resolution needs four values >= 2")


BOX = np.array([-0.5, -0.5, -0.5, 0.5, 0.5, 0.5])
MOTION_DIR = np.array([0.0, 1.0, 0.5])


def synth_camera(size: int) -> Camera:
    # Front face of the box sits at depth 1.1 and just fills the frame.
    f = size * 1.1
    return Camera.look_at([0.0, 0.0, -1.6], [0.0, 0.0, 0.0], [0.0, -1.0, 0.0], f, f, size, size)


def motion_weight(x: np.ndarray, cut: float, ramp: float) -> np.ndarray:
    """1 in the moving slab x <= cut - ramp, 0 for x >= cut, smooth in between."""
    u = np.clip((cut - x) / ramp, 0.0, 1.0)
    return u * u * (3.0 - 2.0 * u)


def _synth_cloud(spec: SynthSpec, rng: np.random.Generator) -> GaussianCloud:
    n = spec.gaussian_count
    centers = rng.uniform(BOX[:3], BOX[3:], (n, 3))
    rotations = normalize_quaternions(rng.normal(size=(n, 4)))
    scales = np.exp(rng.uniform(np.log(0.012), np.log(0.06), (n, 3)))
    # Trained splat scenes carry many faint Gaussians; a squared uniform skews opacity low.
    opacities = 0.02 + 0.97 * rng.uniform(size=n) ** 2
    sh = np.zeros((n, 3, shlib.num_basis(shlib.MAX_DEGREE)))
    phase = rng.uniform(0, 2 * np.pi, (3, 3))
    for c in range(3):
        base = 0.5 + 0.35 * np.sin(3.0 * centers @ np.cos(phase[c]) + phase[c, 0])
        sh[:, c, 0] = (base - 0.5) / shlib.C0
    for degree in range(1, shlib.MAX_DEGREE + 1):
        lo, hi = degree * degree, (degree + 1) ** 2
        sh[:, :, lo:hi] = rng.normal(0.0, 0.08 / degree**2, (n, 3, hi - lo))
    return GaussianCloud(*(f32exact(a) for a in (centers, rotations, scales, opacities, sh)))


def _synth_field(spec: SynthSpec) -> DeformationField:
    """Hand-built planes and MLP: a slab at low x oscillates and breathes, the rest is static.

    Channel 0 carries w(x) sin(2 pi t), channel 1 carries w(x) (1 - cos(2 pi t)) / 2;
    every other plane of those channels is 1 and every other channel is 0.
    """
    res = spec.field_resolution
    d = spec.feature_dim
    lo, hi = BOX[:3], BOX[3:]
    xs = np.linspace(lo[0], hi[0], res[0])
    ts = np.linspace(0.0, 1.0, res[3])
    cut = lo[0] + spec.dynamic_fraction * (hi[0] - lo[0])
    w = motion_weight(xs, cut, ramp=0.1)
    planes = []
    for axes in PLANE_AXES:
        shape = (res[axes[0]], res[axes[1]], d)
        v = np.zeros(shape)
        v[:, :, :2] = 1.0
        if axes == (0, 3):
            v[:, :, 0] = w[:, None] * np.sin(2 * np.pi * ts)[None, :]
            v[:, :, 1] = w[:, None] * (0.5 - 0.5 * np.cos(2 * np.pi * ts))[None, :]
        planes.append(FeaturePlane(axes, f32exact(v)))

    hidden = 64
    a = spec.amplitude
    w1 = np.zeros((hidden, d))
    w1[0, 0], w1[1, 0], w1[2, 1] = 1.0, -1.0, 1.0
    w2 = np.zeros((hidden, hidden))
    w2[0, 0] = w2[1, 1] = w2[2, 2] = 1.0
    head = np.zeros((10, hidden))
    head[0:3, 0] = a * MOTION_DIR
    head[0:3, 1] = -a * MOTION_DIR
    head[7:10, 2] = 0.25 * a
    mlp = TinyMLP(
        [f32exact(w1), f32exact(w2), f32exact(head)],
        [np.zeros(hidden), np.zeros(hidden), np.zeros(10)],
    )
    return DeformationField(planes, mlp, BOX.copy(), np.array([0.0, 1.0]))


def frame_times(count: int) -> np.ndarray:
    return np.linspace(0.0, 1.0, count) if count > 1 else np.zeros(1)


def synth_scene(spec: SynthSpec = SynthSpec()) -> tuple[Scene, SceneDataset]:
    """Seeded teacher scene and its own renders as ground truth from a fixed camera."""
    rng = np.random.default_rng(spec.seed)
    scene = Scene(_synth_cloud(spec, rng), _synth_field(spec))
    cam = synth_camera(spec.image_size)
    frames = []
    for t in frame_times(spec.frames):
        out, _, _ = render_dynamic(scene.cloud, scene.field, cam, float(t))
        frames.append(Frame(out.image, float(t), cam))
    return scene, SceneDataset(frames)


def moving_mask(cloud: GaussianCloud, spec: SynthSpec) -> np.ndarray:
    """Gaussians whose canonical center lies where the synthetic field is nonzero."""
    field = _synth_field(spec)
    from .deformation import sample_field_batch

    f = sample_field_batch(field, cloud.centers, 0.5).features
    return f[:, 1] != 0.0


# --- metrics -----------------------------------------------------------------------


def _pair(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise InvalidArgument(f"image shapes differ: {a.shape} vs {b.shape}")
    return a, b


def psnr(a, b) -> float:
    """10 log10(1 / MSE) for images in [0, 1]; ``inf`` flags identical inputs."""
    a, b = _pair(a, b)
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(1.0 / mse)


def gaussian_window(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    x = np.arange(size) - (size - 1) / 2.0
    g = np.exp(-(x**2) / (2 * sigma**2))
    g /= g.sum()
    return np.outer(g, g)


def ssim(a, b, k1: float = 0.01, k2: float = 0.03, data_range: float = 1.0) -> float:
    """Single-scale SSIM with an 11x11 Gaussian window (sigma 1.5), valid region, channel mean."""
    a, b = _pair(a, b)
    if a.ndim == 2:
        a, b = a[..., None], b[..., None]
    if a.shape[0] < 11 or a.shape[1] < 11:
        raise InvalidArgument("SSIM needs images of at least 11x11")
    win = gaussian_window()
    c1, c2 = (k1 * data_range) ** 2, (k2 * data_range) ** 2
    vals = []
    for ch in range(a.shape[2]):
        x, y = a[..., ch], b[..., ch]
        filt = lambda img: convolve2d(img, win, mode="valid")  # noqa: E731
        mx, my = filt(x), filt(y)
        sxx = filt(x * x) - mx * mx
        syy = filt(y * y) - my * my
        sxy = filt(x * y) - mx * my
        num = (2 * mx * my + c1) * (2 * sxy + c2)
        den = (mx * mx + my * my + c1) * (sxx + syy + c2)
        vals.append(np.mean(num / den))
    return float(np.mean(vals))


# --- benchmark ---------------------------------------------------------------------


@dataclass
class BenchRow:
    name: str
    before: SizeReport
    after: SizeReport
    psnr_db: float
    ssim: float
    renders_per_sec: float

    @property
    def compression_factor(self) -> float:
        return self.before.overall_bytes / self.after.overall_bytes

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "overall_bytes": self.after.overall_bytes,
            "gs_bytes": self.after.gs_bytes,
            "deform_bytes": self.after.deform_bytes,
            "gaussian_count": self.after.gaussian_count,
            "plane_cells": self.after.plane_cells,
            "compression_factor": self.compression_factor,
            "psnr_db": None if math.isinf(self.psnr_db) else self.psnr_db,
            "psnr_identical": math.isinf(self.psnr_db),
            "ssim": self.ssim,
            "renders_per_sec": self.renders_per_sec,
        }


@dataclass
class BenchReport:
    full: BenchRow
    ablations: list = field(default_factory=list)

    def to_dict(self) -> dict:
        doc = self.full.to_dict()
        doc.pop("name")
        doc["teacher"] = self.full.before.to_dict()
        doc["ablations"] = [r.to_dict() for r in self.ablations]
        return doc

    def table(self) -> str:
        head = f"{'model':<12}{'overall':>10}{'GS':>10}{'deform':>10}{'factor':>8}{'PSNR':>8}{'SSIM':>8}{'fps':>8}"
        lines = [head]
        for r in self.ablations + [self.full]:
            p = "inf" if math.isinf(r.psnr_db) else f"{r.psnr_db:.2f}"
            lines.append(
                f"{r.name:<12}{r.after.overall_bytes:>10}{r.after.gs_bytes:>10}{r.after.deform_bytes:>10}"
                f"{r.compression_factor:>8.2f}{p:>8}{r.ssim:>8.4f}{r.renders_per_sec:>8.2f}"
            )
        return "\n".join(lines)


def evaluate(teacher: Scene, student: Scene, dataset: SceneDataset, name: str = "full") -> BenchRow:
    """Sizes plus PSNR/SSIM/render rate of ``student`` on the held-out frames."""
    _, test = dataset.split()
    if len(test) == 0:
        test = dataset
    ps, ss = [], []
    start = time.perf_counter()
    for frame in test:
        out, _, _ = render_dynamic(student.cloud, student.field, frame.camera, frame.time)
        ps.append(psnr(out.image, frame.image))
        ss.append(ssim(out.image, frame.image))
    elapsed = time.perf_counter() - start
    p = math.inf if all(math.isinf(v) for v in ps) else float(np.mean([v for v in ps if not math.isinf(v)] or [math.inf]))
    if any(math.isinf(v) for v in ps) and not math.isinf(p):
        # mix of exact and inexact frames: average MSE instead of dB
        mses = [10 ** (-v / 10) if not math.isinf(v) else 0.0 for v in ps]
        p = 10 * math.log10(1 / float(np.mean(mses)))
    return BenchRow(name, SizeReport.of(teacher), SizeReport.of(student), p, float(np.mean(ss)),
                    len(test) / elapsed if elapsed > 0 else math.inf)


def ablation_configs(config: CompressionConfig, sh_degree: int = shlib.MAX_DEGREE) -> dict:
    return {
        "w/o DAP": replace(config, prune_ratio_sg=0.0, prune_ratio_dg=0.0),
        "w/o GAP": replace(config, h_sh=sh_degree),
        "w/o FFC": replace(config, pool_rates=(1, 1, 1, 1)),
    }


def compress_and_distill(teacher: Scene, dataset: SceneDataset, config: CompressionConfig,
                         optim: OptimConfig, table: ScoreTable | None = None):
    train, _ = dataset.split()
    if len(train) == 0:
        train = dataset
    result = compress(teacher, train, config, table=table)
    student, trace = distill(teacher, result.student, train, optim)
    return result, student, trace


def benchmark(teacher: Scene, dataset: SceneDataset, config: CompressionConfig = CompressionConfig(),
              optim: OptimConfig = OptimConfig(), student: Scene | None = None,
              ablations: bool = True) -> BenchReport:
    """Full pipeline row plus the three leave-one-pass-out rows."""
    train, _ = dataset.split()
    if len(train) == 0:
        train = dataset
    table = score_table(teacher.cloud, teacher.field, train, config)
    if student is None:
        _, student, _ = compress_and_distill(teacher, dataset, config, optim, table)
    report = BenchReport(evaluate(teacher, student, dataset, "full"))
    if ablations:
        for name, cfg in ablation_configs(config, teacher.cloud.sh_degree).items():
            _, s, _ = compress_and_distill(teacher, dataset, cfg, optim, table)
            report.ablations.append(evaluate(teacher, s, dataset, name))
    return report
