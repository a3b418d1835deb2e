"""Tile-based CPU splatting with per-Gaussian contribution statistics.

Pixel ``(row, col)`` samples the image plane at ``(col + 0.5, row + 0.5)``.
Gaussians are composited front to back; a Gaussian contributes to a pixel when
its alpha is at least 1/255 and the transmittance in front of it is still at
least 1e-4. Those contributions are what ``hit_counts`` tallies.
"""
from __future__ import annotations

import hashlib
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from . import sh as shlib
from .deformation import DeformationField, DeformRecord, deform_cloud
from .errors import InvalidArgument
from .scene import Camera, GaussianCloud, normalize_quaternions, rotation_matrices

NEAR_PLANE = 0.01
LOW_PASS = 0.3
ALPHA_MAX = 0.99
ALPHA_MIN = 1.0 / 255.0
T_MIN = 1e-4
TILE_SIZE = 16


class Projection(NamedTuple):
    mean2d: np.ndarray  # (N, 2)
    cov2d: np.ndarray  # (N, 2, 2)
    conic: np.ndarray  # (N, 3) entries (a, b, c) of the inverse 2D covariance
    depth: np.ndarray
    color: np.ndarray  # (N, 3)
    color_raw: np.ndarray  # (N, 3) before clamping
    radius: np.ndarray  # pixel radius of the contribution footprint
    valid: np.ndarray
    # intermediates reused by backward
    cam_points: np.ndarray
    jac: np.ndarray  # (N, 2, 3)
    cov3d: np.ndarray
    rot: np.ndarray
    unit_q: np.ndarray
    dirs: np.ndarray
    view_vec_norm: np.ndarray
    basis: np.ndarray


@dataclass(frozen=True)
class ProjectedGaussian:
    mean2d: np.ndarray
    cov2d: np.ndarray
    depth: float
    color: np.ndarray
    opacity: float
    source_index: int


class TileResult(NamedTuple):
    index: int
    ids: np.ndarray
    included: np.ndarray  # (P, n) bool
    clamped: np.ndarray  # (P, n) bool
    color: np.ndarray  # (P, 3)
    weight_sum: np.ndarray  # (P,)
    transmittance: np.ndarray  # (P,)
    hits: np.ndarray  # (n,)
    alpha_sums: np.ndarray  # (n,)


@dataclass
class RenderRecord:
    """What backward needs from a forward pass, plus the frozen discrete decisions."""

    projection: Projection
    tiles: list
    tile_size: int
    digest: str


@dataclass
class RenderOutput:
    image: np.ndarray  # (H, W, 3)
    hit_counts: np.ndarray  # (N,) int64
    alpha_sums: np.ndarray  # (N,)
    weight_sum: np.ndarray  # (H, W)
    transmittance: np.ndarray  # (H, W)
    record: RenderRecord


def cloud_digest(cloud: GaussianCloud, cam: Camera) -> str:
    h = hashlib.sha1()
    for a in (cloud.centers, cloud.rotations, cloud.scales, cloud.opacities, cloud.sh, cam.world_to_camera):
        h.update(np.ascontiguousarray(a).tobytes())
    h.update(repr((cam.fx, cam.fy, cam.cx, cam.cy, cam.width, cam.height)).encode())
    return h.hexdigest()


def _footprint_sigmas(opacity: np.ndarray) -> np.ndarray:
    # Alpha drops below 1/255 once the Mahalanobis distance exceeds sqrt(2 ln(255 sigma)).
    with np.errstate(divide="ignore"):
        k = np.sqrt(np.maximum(2.0 * np.log(np.maximum(opacity, 1e-30) * 255.0), 0.0))
    return np.maximum(3.0, k)


def project(cloud: GaussianCloud, cam: Camera, frozen: Projection | None = None) -> Projection:
    """Perspective projection with the first-order (EWA) covariance transform."""
    n = len(cloud)
    W = cam.rotation
    t = cloud.centers @ W.T + cam.translation
    x, y, z = t[:, 0], t[:, 1], t[:, 2]
    zs = np.where(z > NEAR_PLANE, z, 1.0)
    jac = np.zeros((n, 2, 3))
    jac[:, 0, 0] = cam.fx / zs
    jac[:, 0, 2] = -cam.fx * x / zs**2
    jac[:, 1, 1] = cam.fy / zs
    jac[:, 1, 2] = -cam.fy * y / zs**2
    unit_q = normalize_quaternions(cloud.rotations) if n else np.zeros((0, 4))
    rot = rotation_matrices(unit_q)
    M = rot * cloud.scales[:, None, :]
    cov3d = (M[:, :, None, :] * M[:, None, :, :]).sum(axis=-1)
    T = (jac[:, :, :, None] * W[None, None, :, :]).sum(axis=2)  # J W
    TS = (T[:, :, :, None] * cov3d[:, None, :, :]).sum(axis=2)
    cov2d = (TS[:, :, None, :] * T[:, None, :, :]).sum(axis=-1)
    cov2d[:, 0, 0] += LOW_PASS
    cov2d[:, 1, 1] += LOW_PASS
    a, b, c = cov2d[:, 0, 0], cov2d[:, 0, 1], cov2d[:, 1, 1]
    det = a * c - b * b
    conic = np.stack([c / det, -b / det, a / det], axis=1)
    mean2d = np.stack([cam.fx * x / zs + cam.cx, cam.fy * y / zs + cam.cy], axis=1)

    view = cloud.centers - cam.center
    vnorm = np.sqrt((view * view).sum(axis=1))
    dirs = view / np.where(vnorm > 0, vnorm, 1.0)[:, None]
    degree = cloud.sh_degree
    basis = shlib.sh_basis(degree, dirs)
    color_raw = shlib.sh_dot(cloud.sh, basis) + shlib.SH_OFFSET
    color = np.clip(color_raw, 0.0, 1.0)

    mid = 0.5 * (a + c)
    lam = mid + np.sqrt(0.25 * (a - c) ** 2 + b * b)
    radius = _footprint_sigmas(cloud.opacities) * np.sqrt(lam) * 1.01 + 1e-6
    if frozen is not None:
        valid = frozen.valid
    else:
        mx, my = mean2d[:, 0], mean2d[:, 1]
        on_screen = (
            (mx + radius >= 0.5) & (mx - radius <= cam.width - 0.5)
            & (my + radius >= 0.5) & (my - radius <= cam.height - 0.5)
        )
        valid = (z > NEAR_PLANE) & on_screen
    return Projection(mean2d, cov2d, conic, z, color, color_raw, radius, valid,
                      t, jac, cov3d, rot, unit_q, dirs, vnorm, basis)


def project_gaussian(g, cam: Camera, index: int = 0) -> ProjectedGaussian | None:
    """Single-Gaussian projection; ``None`` when culled."""
    cloud = GaussianCloud.from_gaussians([g])
    p = project(cloud, cam)
    if not p.valid[0]:
        return None
    return ProjectedGaussian(p.mean2d[0], p.cov2d[0], float(p.depth[0]), p.color[0], float(g.opacity), index)


def depth_order(proj: Projection) -> np.ndarray:
    """Indices of valid Gaussians sorted by depth, ties broken by index."""
    idx = np.flatnonzero(proj.valid)
    order = np.lexsort((idx, proj.depth[idx]))
    return idx[order]


def _tile_bounds(cam: Camera, tile_size: int):
    for ty in range(0, cam.height, tile_size):
        for tx in range(0, cam.width, tile_size):
            yield tx, ty, min(tx + tile_size, cam.width), min(ty + tile_size, cam.height)


def _tile_pixels(x0, y0, x1, y1):
    cols = np.arange(x0, x1) + 0.5
    rows = np.arange(y0, y1) + 0.5
    px = np.tile(cols, y1 - y0)
    py = np.repeat(rows, x1 - x0)
    return px, py


def _tile_alpha(proj: Projection, opac: np.ndarray, ids, px, py):
    dx = px[:, None] - proj.mean2d[ids, 0][None, :]
    dy = py[:, None] - proj.mean2d[ids, 1][None, :]
    A, B, C = proj.conic[ids, 0], proj.conic[ids, 1], proj.conic[ids, 2]
    m = A * dx * dx + 2.0 * B * dx * dy + C * dy * dy
    G = np.exp(-0.5 * m)
    raw = opac[ids] * G
    return dx, dy, G, raw


def _render_tile(k, bounds, proj, opac, ordered, frozen_tile):
    x0, y0, x1, y1 = bounds
    px, py = _tile_pixels(x0, y0, x1, y1)
    P = px.size
    if frozen_tile is not None:
        ids = frozen_tile.ids
    else:
        mx, my, r = proj.mean2d[ordered, 0], proj.mean2d[ordered, 1], proj.radius[ordered]
        hit = (mx + r >= x0 + 0.5) & (mx - r <= x1 - 0.5) & (my + r >= y0 + 0.5) & (my - r <= y1 - 0.5)
        ids = ordered[hit]
    n = ids.size
    if n == 0:
        z = np.zeros((P, 0), dtype=bool)
        return TileResult(k, ids, z, z, np.zeros((P, 3)), np.zeros(P), np.ones(P), np.zeros(0, np.int64), np.zeros(0))
    _, _, _, raw = _tile_alpha(proj, opac, ids, px, py)
    if frozen_tile is not None:
        clamped = frozen_tile.clamped
        alpha = np.where(clamped, ALPHA_MAX, raw)
        included = frozen_tile.included
    else:
        clamped = raw > ALPHA_MAX
        alpha = np.where(clamped, ALPHA_MAX, raw)
        gate = alpha >= ALPHA_MIN
        trans_after = np.cumprod(np.where(gate, 1.0 - alpha, 1.0), axis=1)
        trans_before = np.concatenate([np.ones((P, 1)), trans_after[:, :-1]], axis=1)
        included = gate & (trans_before >= T_MIN)
    keep = np.where(included, 1.0 - alpha, 1.0)
    trans_after = np.cumprod(keep, axis=1)
    trans_before = np.concatenate([np.ones((P, 1)), trans_after[:, :-1]], axis=1)
    w = np.where(included, alpha * trans_before, 0.0)
    # cumsum keeps a fixed left-to-right summation order, so padding a pixel's
    # list with non-contributing Gaussians never changes its bits
    color = np.cumsum(w[:, :, None] * proj.color[ids][None, :, :], axis=1)[:, -1, :]
    weight_sum = np.cumsum(w, axis=1)[:, -1]
    return TileResult(k, ids, included, clamped, color, weight_sum, trans_after[:, -1],
                      included.sum(axis=0).astype(np.int64), w.sum(axis=0))


def render(
    cloud: GaussianCloud,
    cam: Camera,
    *,
    tile_size: int = TILE_SIZE,
    workers: int = 1,
    frozen: RenderRecord | None = None,
) -> RenderOutput:
    """Splat ``cloud`` into ``cam``.

    ``frozen`` re-evaluates the image with every discrete decision (culling, tile
    lists, depth order, alpha gates, clamps) taken from an earlier record, which
    turns the renderer into a smooth function of the parameters.
    """
    if tile_size < 1:
        raise InvalidArgument("tile_size must be positive")
    if frozen is not None:
        tile_size = frozen.tile_size
    proj = project(cloud, cam, frozen.projection if frozen is not None else None)
    if frozen is not None:
        base = frozen.projection.color_raw
        in_range = (base >= 0.0) & (base <= 1.0)
        proj = proj._replace(color=np.where(in_range, proj.color_raw, np.clip(base, 0.0, 1.0)))
    ordered = depth_order(proj)
    bounds = list(_tile_bounds(cam, tile_size))
    opac = cloud.opacities

    def work(k):
        ft = frozen.tiles[k] if frozen is not None else None
        return _render_tile(k, bounds[k], proj, opac, ordered, ft)

    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            tiles = list(pool.map(work, range(len(bounds))))
    else:
        tiles = [work(k) for k in range(len(bounds))]

    H, Wd = cam.height, cam.width
    image = np.zeros((H, Wd, 3))
    weight_sum = np.zeros((H, Wd))
    trans = np.ones((H, Wd))
    hits = np.zeros(len(cloud), dtype=np.int64)
    asums = np.zeros(len(cloud))
    for (x0, y0, x1, y1), tr in zip(bounds, tiles):
        h, w = y1 - y0, x1 - x0
        image[y0:y1, x0:x1] = tr.color.reshape(h, w, 3)
        weight_sum[y0:y1, x0:x1] = tr.weight_sum.reshape(h, w)
        trans[y0:y1, x0:x1] = tr.transmittance.reshape(h, w)
        hits[tr.ids] += tr.hits
        asums[tr.ids] += tr.alpha_sums
    record = RenderRecord(proj, tiles, tile_size, cloud_digest(cloud, cam))
    return RenderOutput(image, hits, asums, weight_sum, trans, record)


def render_dynamic(cloud: GaussianCloud, field: DeformationField, cam: Camera, t: float, **kw):
    """Deform at time ``t`` then render; returns (RenderOutput, deformed cloud, DeformRecord)."""
    if not 0.0 <= t <= 1.0:
        raise InvalidArgument(f"time {t} outside [0, 1]")
    deformed, rec = deform_cloud(cloud, field, t)
    out = render(deformed, cam, **kw)
    return out, deformed, rec
