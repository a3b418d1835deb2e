"""Reverse-mode gradients of the renderer and the teacher-to-student distillation loop."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field, fields
from typing import NamedTuple

import numpy as np

from .deformation import (
    SCALE_FLOOR, DeformRecord, Scene, field_backward, mlp_backward,
)
from .errors import InvalidArgument, InvalidState
from .renderer import (
    ALPHA_MAX, RenderOutput, RenderRecord, _tile_alpha, _tile_bounds, _tile_pixels,
    cloud_digest, render_dynamic,
)
from .scene import Camera, GaussianCloud, SceneDataset, normalize_quaternions
from . import sh as shlib

log = logging.getLogger(__name__)

# d R / d q for q = (w, x, y, z); each entry is a function of q returning a 3x3 matrix batch.
def _rotation_partials(q: np.ndarray) -> np.ndarray:
    w, x, y, z = (q[:, i] for i in range(4))
    o = np.zeros_like(w)
    dw = [[o, -2 * z, 2 * y], [2 * z, o, -2 * x], [-2 * y, 2 * x, o]]
    dx = [[o, 2 * y, 2 * z], [2 * y, -4 * x, -2 * w], [2 * z, 2 * w, -4 * x]]
    dy = [[-4 * y, 2 * x, 2 * w], [2 * x, o, 2 * z], [-2 * w, 2 * z, -4 * y]]
    dz = [[-4 * z, -2 * w, 2 * x], [2 * w, -4 * z, 2 * y], [2 * x, 2 * y, o]]
    return np.stack([np.moveaxis(np.array(d), -1, 0) for d in (dw, dx, dy, dz)], axis=1)  # (N,4,3,3)


# --- losses -------------------------------------------------------------------


def _check_pair(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise InvalidArgument(f"image shapes differ: {a.shape} vs {b.shape}")
    return a, b


def image_distance(a, b) -> float:
    """Unsquared Euclidean norm of the flattened difference."""
    a, b = _check_pair(a, b)
    return float(np.sqrt(((a - b) ** 2).sum()))


def distill_loss(teacher_renders, student_renders) -> float:
    """Mean over timestamps of ||teacher(t) - student(t)||_2.

    Accepts a single image or a sequence of images (one per timestamp).
    """
    t, s = _check_pair(teacher_renders, student_renders)
    if t.ndim == 3:
        t, s = t[None], s[None]
    return float(np.mean([image_distance(a, b) for a, b in zip(t, s)]))


def render_loss(student_renders, ground_truth) -> float:
    return distill_loss(ground_truth, student_renders)


def distance_grad(student, reference) -> np.ndarray:
    """d ||student - reference|| / d student; zero where the images coincide."""
    diff = np.asarray(student, dtype=np.float64) - np.asarray(reference, dtype=np.float64)
    norm = np.sqrt((diff * diff).sum())
    if norm == 0.0:
        return np.zeros_like(diff)
    return diff / norm


@dataclass
class LossReport:
    L_d: float
    L_r: float
    per_frame: list

    @property
    def L(self) -> float:
        return self.L_d + self.L_r


# --- gradients ----------------------------------------------------------------


@dataclass
class GradientSet:
    centers: np.ndarray
    rotations: np.ndarray
    scales: np.ndarray
    opacities: np.ndarray
    sh: np.ndarray
    planes: list
    mlp_weights: list
    mlp_biases: list

    @classmethod
    def zeros_like(cls, scene: Scene) -> "GradientSet":
        c = scene.cloud
        return cls(
            np.zeros_like(c.centers), np.zeros_like(c.rotations), np.zeros_like(c.scales),
            np.zeros_like(c.opacities), np.zeros_like(c.sh),
            [np.zeros_like(p.values) for p in scene.field.planes],
            [np.zeros_like(w) for w in scene.field.mlp.weights],
            [np.zeros_like(b) for b in scene.field.mlp.biases],
        )

    def groups(self) -> dict:
        return {
            "centers": [self.centers], "rotations": [self.rotations], "scales": [self.scales],
            "opacities": [self.opacities], "sh": [self.sh], "planes": self.planes,
            "mlp": self.mlp_weights + self.mlp_biases,
        }

    def add(self, other: "GradientSet") -> "GradientSet":
        out = {}
        for f in fields(self):
            a, b = getattr(self, f.name), getattr(other, f.name)
            out[f.name] = [x + y for x, y in zip(a, b)] if isinstance(a, list) else a + b
        return GradientSet(**out)

    def is_zero(self) -> bool:
        return all(not np.any(a) for arrs in self.groups().values() for a in arrs)


class CloudGradients(NamedTuple):
    centers: np.ndarray
    unit_rotations: np.ndarray  # w.r.t. the normalized quaternion used by the renderer
    scales: np.ndarray
    opacities: np.ndarray
    sh: np.ndarray


def _tile_backward(bounds, proj, opac, tile, gpix):
    ids = tile.ids
    px, py = _tile_pixels(*bounds)
    dx, dy, G, raw = _tile_alpha(proj, opac, ids, px, py)
    inc, clamped = tile.included, tile.clamped
    alpha = np.where(clamped, ALPHA_MAX, raw)
    keep = np.where(inc, 1.0 - alpha, 1.0)
    t_after = np.cumprod(keep, axis=1)
    t_before = np.concatenate([np.ones((px.size, 1)), t_after[:, :-1]], axis=1)
    w = np.where(inc, alpha * t_before, 0.0)
    col = proj.color[ids]
    g_color = w.T @ gpix
    cg = gpix @ col.T
    wc = w * cg
    behind = np.cumsum(wc[:, ::-1], axis=1)[:, ::-1] - wc
    g_alpha = np.where(inc, t_before * cg - behind / (1.0 - alpha), 0.0)
    g_raw = np.where(clamped, 0.0, g_alpha)
    g_opac = (g_raw * G).sum(axis=0)
    g_m = -0.5 * G * g_raw * opac[ids]
    A, B, C = proj.conic[ids, 0], proj.conic[ids, 1], proj.conic[ids, 2]
    g_conic = np.stack([(g_m * dx * dx).sum(0), (g_m * 2.0 * dx * dy).sum(0), (g_m * dy * dy).sum(0)], axis=1)
    g_mean = np.stack([
        -(g_m * (2.0 * A * dx + 2.0 * B * dy)).sum(0),
        -(g_m * (2.0 * B * dx + 2.0 * C * dy)).sum(0),
    ], axis=1)
    return ids, g_color, g_opac, g_conic, g_mean


def backward_render(cloud: GaussianCloud, cam: Camera, record: RenderRecord, grad_image) -> CloudGradients:
    """Gradients of a scalar loss w.r.t. the rendered cloud, given d(loss)/d(image)."""
    if record.digest != cloud_digest(cloud, cam):
        raise InvalidState("render record does not belong to this cloud/camera (stale forward)")
    grad_image = np.asarray(grad_image, dtype=np.float64)
    if grad_image.shape != (cam.height, cam.width, 3):
        raise InvalidArgument("upstream gradient has the wrong image shape")
    proj = record.projection
    n = len(cloud)
    g_color = np.zeros((n, 3))
    g_opac = np.zeros(n)
    g_conic = np.zeros((n, 3))
    g_mean = np.zeros((n, 2))
    for bounds, tile in zip(_tile_bounds(cam, record.tile_size), record.tiles):
        if tile.ids.size == 0:
            continue
        x0, y0, x1, y1 = bounds
        gpix = grad_image[y0:y1, x0:x1].reshape(-1, 3)
        if not gpix.any():
            continue
        ids, gc, go, gq, gm = _tile_backward(bounds, proj, cloud.opacities, tile, gpix)
        g_color[ids] += gc
        g_opac[ids] += go
        g_conic[ids] += gq
        g_mean[ids] += gm

    # conic -> 2D covariance
    Q = np.empty((n, 2, 2))
    Q[:, 0, 0], Q[:, 0, 1], Q[:, 1, 0], Q[:, 1, 1] = proj.conic[:, 0], proj.conic[:, 1], proj.conic[:, 1], proj.conic[:, 2]
    GQ = np.empty((n, 2, 2))
    GQ[:, 0, 0], GQ[:, 1, 1] = g_conic[:, 0], g_conic[:, 2]
    GQ[:, 0, 1] = GQ[:, 1, 0] = 0.5 * g_conic[:, 1]
    g_cov2 = -Q @ GQ @ Q

    Wr = cam.rotation
    T = proj.jac @ Wr
    g_cov3 = np.transpose(T, (0, 2, 1)) @ g_cov2 @ T
    g_T = 2.0 * g_cov2 @ T @ proj.cov3d
    g_J = g_T @ Wr.T

    x, y, z = proj.cam_points[:, 0], proj.cam_points[:, 1], proj.cam_points[:, 2]
    z = np.where(proj.valid, z, 1.0)
    fx, fy = cam.fx, cam.fy
    g_t = np.zeros((n, 3))
    g_t[:, 0] = g_J[:, 0, 2] * (-fx / z**2) + g_mean[:, 0] * fx / z
    g_t[:, 1] = g_J[:, 1, 2] * (-fy / z**2) + g_mean[:, 1] * fy / z
    g_t[:, 2] = (
        g_J[:, 0, 0] * (-fx / z**2) + g_J[:, 0, 2] * (2.0 * fx * x / z**3)
        + g_J[:, 1, 1] * (-fy / z**2) + g_J[:, 1, 2] * (2.0 * fy * y / z**3)
        + g_mean[:, 0] * (-fx * x / z**2) + g_mean[:, 1] * (-fy * y / z**2)
    )
    g_centers = g_t @ Wr

    # SH color and view direction
    raw = proj.color_raw
    g_c = np.where((raw >= 0.0) & (raw <= 1.0), g_color, 0.0)
    g_sh = g_c[:, :, None] * proj.basis[:, None, :]
    jac = shlib.sh_basis_jacobian(cloud.sh_degree, proj.dirs)
    coef = (g_c[:, :, None] * cloud.sh).sum(axis=1)
    g_dir = (coef[:, :, None] * jac).sum(axis=1)
    d = proj.dirs
    g_view = (g_dir - d * (d * g_dir).sum(axis=1, keepdims=True)) / np.where(proj.view_vec_norm > 0, proj.view_vec_norm, 1.0)[:, None]
    g_centers = g_centers + g_view

    # 3D covariance -> scale, rotation
    R = proj.rot
    M = R * cloud.scales[:, None, :]
    g_M = 2.0 * g_cov3 @ M
    g_scales = (g_M * R).sum(axis=1)
    g_R = g_M * cloud.scales[:, None, :]
    g_unit = (_rotation_partials(proj.unit_q) * g_R[:, None]).sum(axis=(2, 3))

    dead = ~proj.valid
    for arr in (g_centers, g_unit, g_scales, g_opac, g_sh):
        arr[dead] = 0.0
    return CloudGradients(g_centers, g_unit, g_scales, g_opac, g_sh)


def _through_normalization(q_in: np.ndarray, g_unit: np.ndarray) -> np.ndarray:
    norm = np.sqrt((q_in * q_in).sum(axis=1, keepdims=True))
    qh = q_in / norm
    return (g_unit - qh * (qh * g_unit).sum(axis=1, keepdims=True)) / norm


def backward(
    scene: Scene,
    cam: Camera,
    t: float,
    grad_image,
    out: RenderOutput,
    deformed: GaussianCloud,
    rec: DeformRecord,
) -> GradientSet:
    """Gradients w.r.t. every student parameter for one rendered frame.

    ``out``, ``deformed`` and ``rec`` come from ``render_dynamic(scene.cloud, scene.field, cam, t)``.
    """
    if rec.time != t or rec.d_mu.shape[0] != len(scene.cloud):
        raise InvalidState("deformation record does not match this scene/time")
    cg = backward_render(deformed, cam, out.record, grad_image)
    g_qraw = _through_normalization(rec.raw_rotations, cg.unit_rotations)
    g_s_def = np.where(rec.floored, 0.0, cg.scales)
    grad_out = np.concatenate([cg.centers, g_qraw, g_s_def], axis=1)
    gw, gb, g_feat = mlp_backward(scene.field.mlp, rec.activations, grad_out)
    g_planes, g_coord = field_backward(scene.field, rec.sample, g_feat)
    return GradientSet(
        centers=cg.centers + g_coord,
        rotations=g_qraw,
        scales=g_s_def,
        opacities=cg.opacities,
        sh=cg.sh,
        planes=g_planes,
        mlp_weights=gw,
        mlp_biases=gb,
    )


# --- distillation --------------------------------------------------------------


@dataclass
class OptimConfig:
    lr_centers: float = 1.6e-4
    lr_sh: float = 2.5e-3
    lr_opacities: float = 5e-2
    # scales and the shared MLP see gradients two to three orders larger than the
    # other groups under plain descent, so their rates sit well below the rest
    lr_scales: float = 1e-4
    lr_rotations: float = 1e-3
    lr_planes: float = 1.6e-2
    lr_mlp: float = 1e-6
    iterations: int = 2000
    batch_size: int = 1
    seed: int = 0
    grad_check: bool = False

    def __post_init__(self):
        for f in fields(self):
            if f.name.startswith("lr_") and getattr(self, f.name) < 0:
                raise InvalidArgument(f"{f.name} must be >= 0")
        if self.iterations < 0:
            raise InvalidArgument("iterations must be >= 0")
        if self.batch_size < 1:
            raise InvalidArgument("batch_size must be >= 1")


@dataclass
class TraceRow:
    iteration: int
    L_d: float
    L_r: float

    @property
    def L(self) -> float:
        return self.L_d + self.L_r


def scene_loss(student: Scene, teacher_images, dataset: SceneDataset) -> LossReport:
    """L_d and L_r of ``student`` over every frame of ``dataset``."""
    per = []
    for frame, timg in zip(dataset, teacher_images):
        out, _, _ = render_dynamic(student.cloud, student.field, frame.camera, frame.time)
        per.append((image_distance(timg, out.image), image_distance(frame.image, out.image)))
    ld = float(np.mean([p[0] for p in per])) if per else 0.0
    lr = float(np.mean([p[1] for p in per])) if per else 0.0
    return LossReport(ld, lr, per)


def _step(scene: Scene, g: GradientSet, cfg: OptimConfig) -> Scene:
    c = scene.cloud
    rot = c.rotations - cfg.lr_rotations * g.rotations
    moved = np.any(rot != c.rotations, axis=1)
    if moved.any():
        rot[moved] = normalize_quaternions(rot[moved])
    scales = np.maximum(c.scales - cfg.lr_scales * g.scales, SCALE_FLOOR)
    opac = np.clip(c.opacities - cfg.lr_opacities * g.opacities, 0.0, 1.0)
    cloud = c.replace(
        centers=c.centers - cfg.lr_centers * g.centers,
        rotations=rot, scales=scales, opacities=opac,
        sh=c.sh - cfg.lr_sh * g.sh,
    )
    f = scene.field
    planes = [p.values - cfg.lr_planes * gp for p, gp in zip(f.planes, g.planes)]
    mlp = type(f.mlp)(
        [w - cfg.lr_mlp * gw for w, gw in zip(f.mlp.weights, g.mlp_weights)],
        [b - cfg.lr_mlp * gb for b, gb in zip(f.mlp.biases, g.mlp_biases)],
    )
    return Scene(cloud, f.with_plane_values(planes).replace(mlp=mlp))


def _blame(scene: Scene) -> str:
    c, f = scene.cloud, scene.field
    groups = {
        "centers": [c.centers], "rotations": [c.rotations], "scales": [c.scales],
        "opacities": [c.opacities], "sh": [c.sh], "planes": [p.values for p in f.planes],
        "mlp": list(f.mlp.weights) + list(f.mlp.biases),
    }
    bad = [name for name, arrs in groups.items() if not all(np.all(np.isfinite(a)) for a in arrs)]
    return f"non-finite parameters in group(s) {', '.join(bad)}" if bad else "all parameters finite"


def _check_finite(g: GradientSet):
    for name, arrs in g.groups().items():
        if not all(np.all(np.isfinite(a)) for a in arrs):
            raise InvalidState(f"non-finite gradient in parameter group '{name}'")


def _perturbed(scene: Scene, group: str, k: int, index, delta: float) -> Scene:
    c, f = scene.cloud, scene.field
    if group in ("centers", "rotations", "scales", "opacities", "sh"):
        a = getattr(c, group).copy()
        a[index] += delta
        return Scene(c.replace(**{group: a}), f)
    if group == "planes":
        vals = [p.values for p in f.planes]
        vals[k] = vals[k].copy()
        vals[k][index] += delta
        return Scene(c, f.with_plane_values(vals))
    arrs = list(f.mlp.weights) + list(f.mlp.biases)
    arrs[k] = arrs[k].copy()
    arrs[k][index] += delta
    nw = len(f.mlp.weights)
    return Scene(c, f.replace(mlp=type(f.mlp)(arrs[:nw], arrs[nw:])))


def gradient_check(scene: Scene, cam: Camera, t: float, references, entries: int = 3,
                   step: float = 1e-4, seed: int = 0) -> dict:
    """Spot-check analytic gradients of sum_k ||render - references[k]|| by central differences.

    Discrete decisions are frozen from the base render. Returns, per group, the worst
    |a - fd| / max(1e-3 * max(|a|, |fd|), 1e-5); values above 1 indicate a mismatch.
    """
    out, deformed, rec = render_dynamic(scene.cloud, scene.field, cam, t)
    gimg = sum(distance_grad(out.image, r) for r in references)
    g = backward(scene, cam, t, gimg, out, deformed, rec)

    def loss(s):
        o, _, _ = render_dynamic(s.cloud, s.field, cam, t, frozen=out.record)
        return sum(image_distance(o.image, r) for r in references)

    rng = np.random.default_rng(seed)
    worst = {}
    for group, arrs in g.groups().items():
        err = 0.0
        for k, ga in enumerate(arrs):
            if ga.size == 0:
                continue
            for flat in rng.choice(ga.size, min(entries, ga.size), replace=False):
                idx = np.unravel_index(flat, ga.shape)
                fd = (loss(_perturbed(scene, group, k, idx, step))
                      - loss(_perturbed(scene, group, k, idx, -step))) / (2 * step)
                a = ga[idx]
                err = max(err, abs(a - fd) / max(1e-3 * max(abs(a), abs(fd)), 1e-5))
        worst[group] = err
    return worst


def distill(
    teacher: Scene,
    student: Scene,
    dataset: SceneDataset,
    config: OptimConfig,
    teacher_images=None,
    callback=None,
):
    """Gradient descent on L = L_d + L_r over the frames of ``dataset``.

    Returns (student, trace). ``teacher_images`` may be passed to reuse
    precomputed teacher renders.
    """
    if config.iterations == 0 or len(dataset) == 0:
        return student, []
    if teacher_images is None:
        teacher_images = [
            render_dynamic(teacher.cloud, teacher.field, f.camera, f.time)[0].image for f in dataset
        ]
    rng = np.random.default_rng(config.seed)
    order = np.array([], dtype=np.int64)
    trace: list[TraceRow] = []
    for it in range(config.iterations):
        if order.size < config.batch_size:
            order = np.concatenate([order, rng.permutation(len(dataset))])
        batch, order = order[: config.batch_size], order[config.batch_size:]
        total = None
        ld = lr = 0.0
        for k in sorted(batch.tolist()):
            frame = dataset.frames[k]
            if config.grad_check and it == 0:
                worst = gradient_check(student, frame.camera, frame.time,
                                       [teacher_images[k], frame.image], seed=config.seed)
                log.info("gradient check: %s", worst)
                bad = [g for g, e in worst.items() if e > 1.0]
                if bad:
                    raise InvalidState(f"gradient check failed for group(s) {', '.join(bad)}")
            out, deformed, rec = render_dynamic(student.cloud, student.field, frame.camera, frame.time)
            d_t = image_distance(teacher_images[k], out.image)
            d_r = image_distance(frame.image, out.image)
            ld += d_t / len(batch)
            lr += d_r / len(batch)
            if not np.isfinite(d_t + d_r):
                raise InvalidState(f"non-finite loss at iteration {it}; {_blame(student)}")
            gimg = (distance_grad(out.image, teacher_images[k]) + distance_grad(out.image, frame.image)) / len(batch)
            g = backward(student, frame.camera, frame.time, gimg, out, deformed, rec)
            total = g if total is None else total.add(g)
        _check_finite(total)
        trace.append(TraceRow(it, ld, lr))
        student = _step(student, total, config)
        if callback is not None:
            callback(it, trace[-1])
        if it % 100 == 0:
            log.info("iter %d  L_d=%.5f  L_r=%.5f", it, ld, lr)
    return student, trace
