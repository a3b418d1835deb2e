"""Deformation-aware pruning, SH attribute pruning and feature-plane pooling."""
from __future__ import annotations

import math
from dataclasses import dataclass, asdict

import numpy as np

from . import sh as shlib
from .deformation import DeformationField, FeaturePlane, Scene
from .errors import InvalidArgument, InvalidState
from .renderer import render_dynamic
from .scene import GaussianCloud, SceneDataset, gaussian_volume

STABLE, DYNAMIC = "SG", "DG"


@dataclass(frozen=True)
class CompressionConfig:
    h: float = 0.5
    beta: float = 0.1
    prune_ratio_sg: float = 0.7
    prune_ratio_dg: float = 0.3
    h_sh: int = 2
    n_rgb: int = 3
    pool_rates: tuple = (4, 4, 4, 4)

    def __post_init__(self):
        object.__setattr__(self, "pool_rates", tuple(int(r) for r in self.pool_rates))
        if not 0.0 <= self.h <= 1.0:
            raise InvalidArgument("h must lie in [0, 1]")
        if not self.beta > 0:
            raise InvalidArgument("beta must be positive")
        for name in ("prune_ratio_sg", "prune_ratio_dg"):
            if not 0.0 <= getattr(self, name) < 1.0:
                raise InvalidArgument(f"{name} must lie in [0, 1)")
        if not 0 <= self.h_sh <= shlib.MAX_DEGREE:
            raise InvalidArgument(f"h_sh must lie in [0, {shlib.MAX_DEGREE}]")
        if len(self.pool_rates) != 4 or min(self.pool_rates) < 1:
            raise InvalidArgument("pool_rates needs four positive integers (x, y, z, t)")

    @classmethod
    def identity(cls, sh_degree: int = shlib.MAX_DEGREE) -> "CompressionConfig":
        return cls(prune_ratio_sg=0.0, prune_ratio_dg=0.0, h_sh=sh_degree, pool_rates=(1, 1, 1, 1))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["pool_rates"] = list(self.pool_rates)
        return d


@dataclass
class ScoreTable:
    hits: np.ndarray  # total contributing pixels over all frames
    volume_change: np.ndarray  # sum over frames of |V(s) - V(s + ds)|
    deformation_scores: np.ndarray
    normalized_scores: np.ndarray
    importance_scores: np.ndarray
    classes: np.ndarray  # "SG" / "DG"

    def __len__(self) -> int:
        return self.deformation_scores.shape[0]


def volume_change(cloud: GaussianCloud, deformed_scales: np.ndarray) -> np.ndarray:
    if len(cloud) == 0:
        return np.zeros(0)
    return np.abs(gaussian_volume(cloud.scales) - gaussian_volume(deformed_scales))


def accumulate_statistics(cloud: GaussianCloud, field: DeformationField, dataset: SceneDataset):
    """Total hit counts and total volume change of every Gaussian across ``dataset``."""
    if len(dataset) == 0:
        raise InvalidArgument("dataset is empty")
    hits = np.zeros(len(cloud), dtype=np.int64)
    dv = np.zeros(len(cloud))
    for frame in dataset:
        out, deformed, _ = render_dynamic(cloud, field, frame.camera, frame.time)
        hits += out.hit_counts
        dv += volume_change(cloud, deformed.scales)
    return hits, dv


def deformation_scores(cloud, field, dataset) -> np.ndarray:
    hits, dv = accumulate_statistics(cloud, field, dataset)
    return hits * dv


def normalize_scores(d: np.ndarray) -> np.ndarray:
    d = np.asarray(d, dtype=np.float64)
    top = d.max() if d.size else 0.0
    return d / top if top > 0 else np.zeros_like(d)


def classify(d_hat, h: float) -> np.ndarray:
    """Stable when the normalized score is at most ``h``, deformed otherwise."""
    d_hat = np.asarray(d_hat, dtype=np.float64)
    return np.where(d_hat > h, DYNAMIC, STABLE)


def percentile_volume(volumes: np.ndarray, q: float = 0.9) -> float:
    """Nearest-rank percentile on the ascending sort."""
    v = np.sort(np.asarray(volumes, dtype=np.float64))
    if v.size == 0:
        raise InvalidState("no volumes")
    rank = max(1, math.ceil(q * v.size))
    return float(v[rank - 1])


def importance_scores(cloud: GaussianCloud, hits, dv, classes, beta: float) -> np.ndarray:
    if not beta > 0:
        raise InvalidArgument("beta must be positive")
    hits = np.asarray(hits, dtype=np.float64)
    dv = np.asarray(dv, dtype=np.float64)
    classes = np.asarray(classes)
    if not (hits.shape == dv.shape == classes.shape == (len(cloud),)):
        raise InvalidState("score arrays do not match the cloud")
    vol = gaussian_volume(cloud.scales)
    vmax = percentile_volume(vol)
    if vmax == 0:
        raise InvalidState("90th-percentile volume is zero")
    vnorm = (vol / vmax) ** beta
    stable = hits * cloud.opacities * vnorm
    dynamic = hits * dv * vnorm
    return np.where(classes == DYNAMIC, dynamic, stable)


def score_table(cloud, field, dataset, config: CompressionConfig) -> ScoreTable:
    hits, dv = accumulate_statistics(cloud, field, dataset)
    return table_from_statistics(cloud, hits, dv, config)


def table_from_statistics(cloud, hits, dv, config: CompressionConfig) -> ScoreTable:
    d = hits * dv
    d_hat = normalize_scores(d)
    classes = classify(d_hat, config.h)
    imp = importance_scores(cloud, hits, dv, classes, config.beta) if len(cloud) else np.zeros(0)
    return ScoreTable(hits, dv, d, d_hat, imp, classes)


def prune_indices(importance, classes, ratio_sg: float, ratio_dg: float) -> np.ndarray:
    """Sorted indices removed: the floor(ratio * |class|) lowest scores of each class."""
    for r in (ratio_sg, ratio_dg):
        if not 0.0 <= r < 1.0:
            raise InvalidArgument("prune ratios must lie in [0, 1)")
    importance = np.asarray(importance, dtype=np.float64)
    classes = np.asarray(classes)
    removed = []
    for label, ratio in ((STABLE, ratio_sg), (DYNAMIC, ratio_dg)):
        members = np.flatnonzero(classes == label)
        cut = math.floor(ratio * members.size)
        if cut:
            order = np.lexsort((members, importance[members]))
            removed.append(members[order[:cut]])
    return np.sort(np.concatenate(removed)) if removed else np.zeros(0, dtype=np.int64)


def dap_prune(cloud: GaussianCloud, table: ScoreTable, config: CompressionConfig):
    """Returns (pruned cloud, old->new index map with -1 for removed Gaussians)."""
    if len(table) != len(cloud):
        raise InvalidState("score table does not match cloud")
    removed = prune_indices(table.importance_scores, table.classes,
                            config.prune_ratio_sg, config.prune_ratio_dg)
    keep = np.ones(len(cloud), dtype=bool)
    keep[removed] = False
    index_map = np.full(len(cloud), -1, dtype=np.int64)
    index_map[keep] = np.arange(int(keep.sum()))
    return cloud.subset(keep), index_map


def gap_prune(cloud: GaussianCloud, h_sh: int) -> GaussianCloud:
    """Drop every SH coefficient above degree ``h_sh`` in all three channels."""
    if not 0 <= h_sh <= cloud.sh_degree:
        raise InvalidArgument(f"h_sh={h_sh} exceeds stored SH degree {cloud.sh_degree}")
    if h_sh == cloud.sh_degree:
        return cloud
    return cloud.replace(sh=np.ascontiguousarray(cloud.sh[:, :, : shlib.num_basis(h_sh)]))


def pool_plane(values: np.ndarray, r1: int, r2: int) -> np.ndarray:
    R1, R2, d = values.shape
    if R1 % r1 or R2 % r2:
        raise InvalidArgument(f"pool rates ({r1}, {r2}) do not divide plane resolution ({R1}, {R2})")
    if R1 // r1 < 2 or R2 // r2 < 2:
        raise InvalidArgument("pooled plane would have fewer than 2 cells per axis")
    if r1 == r2 == 1:
        return values
    blocks = values.reshape(R1 // r1, r1, R2 // r2, r2, d)
    return blocks.sum(axis=(1, 3)) / (r1 * r2)


def ffc_pool(field: DeformationField, rates) -> DeformationField:
    """Block-average each plane by its per-axis rates; the MLP and bounds are kept."""
    rates = tuple(int(r) for r in rates)
    if len(rates) != 4 or min(rates) < 1:
        raise InvalidArgument("rates must be four positive integers (x, y, z, t)")
    planes = []
    for p in field.planes:
        a, b = p.axes
        planes.append(FeaturePlane(p.axes, pool_plane(p.values, rates[a], rates[b])))
    return field.replace(planes=planes)


@dataclass
class SizeReport:
    overall_bytes: int
    gs_bytes: int
    deform_bytes: int
    gaussian_count: int
    plane_cells: int

    @classmethod
    def of(cls, scene: Scene) -> "SizeReport":
        from .formats import section_sizes

        gs, deform = section_sizes(scene)
        cells = sum(p.resolution[0] * p.resolution[1] for p in scene.field.planes)
        return cls(gs + deform, gs, deform, len(scene.cloud), cells)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class CompressionResult:
    student: Scene
    table: ScoreTable
    index_map: np.ndarray
    before: SizeReport
    after: SizeReport

    @property
    def factor(self) -> float:
        return self.before.overall_bytes / self.after.overall_bytes


def compress(scene: Scene, dataset: SceneDataset, config: CompressionConfig, table: ScoreTable | None = None):
    """DAP, then GAP, then FFC. A precomputed ``table`` skips the scoring renders."""
    if table is None:
        table = score_table(scene.cloud, scene.field, dataset, config)
    elif len(table) != len(scene.cloud):
        raise InvalidState("score table does not match cloud")
    cloud, index_map = dap_prune(scene.cloud, table, config)
    cloud = gap_prune(cloud, min(config.h_sh, cloud.sh_degree))
    field = ffc_pool(scene.field, config.pool_rates)
    student = Scene(cloud, field)
    return CompressionResult(student, table, index_map, SizeReport.of(scene), SizeReport.of(student))
