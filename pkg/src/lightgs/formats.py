"""On-disk formats: the LGS1 scene container, binary PPM images, camera/dataset and config files.

Scene file layout (little-endian, floats binary32)::

    "LGS1" | version u32 | gaussian_count u64 | sh_degree u8
    per Gaussian: center 3f | quaternion (w,x,y,z) 4f | scale 3f | opacity f | sh 3*(D+1)^2 f
    feature_dim u16
    6 x [axes tag u8 | R1 u32 | R2 u32 | R1*R2*d f]
    layer_count u8, per layer: rows u32 | cols u32 | rows*cols f | rows f
    aabb 6f | time range 2f
"""
from __future__ import annotations

import json
import struct
from dataclasses import fields
from pathlib import Path

import numpy as np

from . import sh as shlib
from .compressor import CompressionConfig
from .deformation import PLANE_AXES, DeformationField, FeaturePlane, Scene, TinyMLP
from .errors import FormatError, InvalidArgument
from .optimizer import OptimConfig
from .scene import Camera, Frame, GaussianCloud, SceneDataset

MAGIC = b"LGS1"
VERSION = 1
HEADER = struct.Struct("<4sIQB")
PLANE_HEADER = struct.Struct("<BII")
LAYER_HEADER = struct.Struct("<II")
F32 = np.dtype("<f4")


def _f32(a) -> bytes:
    return np.ascontiguousarray(a, dtype=F32).tobytes()


def gaussian_record_floats(sh_degree: int) -> int:
    return 3 + 4 + 3 + 1 + 3 * shlib.num_basis(sh_degree)


def encode_cloud(cloud: GaussianCloud) -> bytes:
    n = len(cloud)
    head = HEADER.pack(MAGIC, VERSION, n, cloud.sh_degree)
    body = np.concatenate(
        [cloud.centers, cloud.rotations, cloud.scales, cloud.opacities[:, None],
         cloud.sh.reshape(n, 3 * cloud.sh.shape[-1])],
        axis=1,
    )
    return head + _f32(body)


def encode_field(field: DeformationField) -> bytes:
    parts = [struct.pack("<H", field.feature_dim)]
    for tag, plane in enumerate(field.planes):
        r1, r2 = plane.resolution
        parts.append(PLANE_HEADER.pack(tag, r1, r2))
        parts.append(_f32(plane.values))
    mlp = field.mlp
    parts.append(struct.pack("<B", len(mlp.weights)))
    for w, b in zip(mlp.weights, mlp.biases):
        parts.append(LAYER_HEADER.pack(*w.shape))
        parts.append(_f32(w))
        parts.append(_f32(b))
    parts.append(_f32(field.aabb))
    parts.append(_f32(field.time_range))
    return b"".join(parts)


def encode_scene(scene: Scene) -> bytes:
    return encode_cloud(scene.cloud) + encode_field(scene.field)


def section_sizes(scene: Scene) -> tuple[int, int]:
    """Byte sizes of (Gaussian section, deformation section) without encoding."""
    c, f = scene.cloud, scene.field
    gs = HEADER.size + 4 * len(c) * gaussian_record_floats(c.sh_degree)
    deform = 2 + sum(PLANE_HEADER.size + 4 * p.values.size for p in f.planes)
    deform += 1 + sum(LAYER_HEADER.size + 4 * (w.size + b.size) for w, b in zip(f.mlp.weights, f.mlp.biases))
    deform += 4 * 8
    return gs, deform


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise FormatError("length", f"payload truncated at byte {self.pos} (needed {n} more)")
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, st: struct.Struct):
        return st.unpack(self.take(st.size))

    def floats(self, count: int) -> np.ndarray:
        return np.frombuffer(self.take(4 * count), dtype=F32).astype(np.float64)


def decode_scene(data: bytes) -> Scene:
    r = _Reader(data)
    if len(data) < 4 or data[:4] != MAGIC:
        raise FormatError("magic", f"expected {MAGIC!r}, got {bytes(data[:4])!r}")
    _, version, n, degree = r.unpack(HEADER)
    if version != VERSION:
        raise FormatError("version", f"unsupported version {version}")
    if degree > shlib.MAX_DEGREE:
        raise FormatError("header", f"SH degree {degree} out of range")
    per = gaussian_record_floats(degree)
    if n * per * 4 > len(data):
        raise FormatError("length", "declared Gaussian count exceeds payload")
    body = r.floats(n * per).reshape(n, per)
    cloud = GaussianCloud(
        body[:, 0:3].copy(), body[:, 3:7].copy(), body[:, 7:10].copy(), body[:, 10].copy(),
        body[:, 11:].reshape(n, 3, shlib.num_basis(degree)).copy(),
    )
    (d,) = r.unpack(struct.Struct("<H"))
    planes = []
    for expected, axes in enumerate(PLANE_AXES):
        tag, r1, r2 = r.unpack(PLANE_HEADER)
        if tag != expected:
            raise FormatError("header", f"plane {expected} has axes tag {tag}")
        planes.append(FeaturePlane(axes, r.floats(r1 * r2 * d).reshape(r1, r2, d)))
    (layers,) = r.unpack(struct.Struct("<B"))
    weights, biases = [], []
    for _ in range(layers):
        rows, cols = r.unpack(LAYER_HEADER)
        weights.append(r.floats(rows * cols).reshape(rows, cols))
        biases.append(r.floats(rows))
    aabb = r.floats(6)
    trange = r.floats(2)
    if r.pos != len(data):
        raise FormatError("length", f"{len(data) - r.pos} trailing bytes")
    try:
        field = DeformationField(planes, TinyMLP(weights, biases), aabb, trange)
    except InvalidArgument as exc:
        raise FormatError("header", str(exc)) from exc
    return Scene(cloud, field)


def save_scene(scene: Scene, path) -> int:
    data = encode_scene(scene)
    Path(path).write_bytes(data)
    return len(data)


def load_scene(path) -> Scene:
    return decode_scene(Path(path).read_bytes())


# --- PPM ------------------------------------------------------------------------


def quantize(image) -> np.ndarray:
    return np.round(np.clip(np.asarray(image, dtype=np.float64), 0.0, 1.0) * 255.0).astype(np.uint8)


def write_image(path, image) -> None:
    q = quantize(image)
    h, w, _ = q.shape
    Path(path).write_bytes(f"P6\n{w} {h}\n255\n".encode() + q.tobytes())


def read_image(path) -> np.ndarray:
    data = Path(path).read_bytes()
    tokens = []
    pos = 0
    while len(tokens) < 4:
        while pos < len(data) and data[pos:pos + 1].isspace():
            pos += 1
        if pos < len(data) and data[pos:pos + 1] == b"#":
            while pos < len(data) and data[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise FormatError("header", "truncated PPM header")
        tokens.append(data[start:pos])
    if tokens[0] != b"P6":
        raise FormatError("magic", f"unsupported PPM variant {tokens[0]!r}")
    try:
        w, h, maxval = (int(t) for t in tokens[1:])
    except ValueError as exc:
        raise FormatError("header", "non-numeric PPM header field") from exc
    if maxval != 255:
        raise FormatError("maxval", f"maxval must be 255, got {maxval}")
    pos += 1  # single whitespace after maxval
    pixels = data[pos:]
    if len(pixels) != w * h * 3:
        raise FormatError("length", f"expected {w * h * 3} pixel bytes, got {len(pixels)}")
    return np.frombuffer(pixels, dtype=np.uint8).reshape(h, w, 3).astype(np.float64) / 255.0


# --- cameras and datasets ------------------------------------------------------------

CAMERA_KEYS = ("fx", "fy", "cx", "cy", "width", "height", "world_to_camera")


def camera_to_dict(cam: Camera) -> dict:
    return {
        "fx": cam.fx, "fy": cam.fy, "cx": cam.cx, "cy": cam.cy,
        "width": cam.width, "height": cam.height,
        "world_to_camera": [float(v) for v in cam.world_to_camera.reshape(-1)],
    }


def camera_from_dict(doc: dict) -> Camera:
    missing = [k for k in CAMERA_KEYS if k not in doc]
    if missing:
        raise InvalidArgument(f"camera file missing keys: {', '.join(missing)}")
    w2c = np.asarray(doc["world_to_camera"], dtype=np.float64)
    if w2c.size != 16:
        raise InvalidArgument("world_to_camera needs 16 numbers")
    return Camera(float(doc["fx"]), float(doc["fy"]), float(doc["cx"]), float(doc["cy"]),
                  int(doc["width"]), int(doc["height"]), w2c.reshape(4, 4))


def load_camera(path) -> Camera:
    return camera_from_dict(json.loads(Path(path).read_text()))


def save_dataset(dataset: SceneDataset, directory) -> None:
    """Writes ``cameras.json`` plus one PPM per frame. All frames share one camera."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    if len(dataset) == 0:
        raise InvalidArgument("cannot save an empty dataset")
    doc = camera_to_dict(dataset.frames[0].camera)
    doc["frames"] = []
    for i, frame in enumerate(dataset):
        name = f"frame_{i:04d}.ppm"
        write_image(directory / name, frame.image)
        doc["frames"].append({"time": frame.time, "image": name})
    (directory / "cameras.json").write_text(json.dumps(doc, indent=2))


def load_dataset(directory) -> SceneDataset:
    directory = Path(directory)
    doc = json.loads((directory / "cameras.json").read_text())
    cam = camera_from_dict(doc)
    frames = []
    for entry in doc.get("frames", []):
        t = float(entry["time"])
        if not 0.0 <= t <= 1.0:
            raise InvalidArgument(f"frame time {t} outside [0, 1]")
        frames.append(Frame(read_image(directory / entry["image"]), t, cam))
    return SceneDataset(frames)


# --- configs ---------------------------------------------------------------------


def _build(cls, doc: dict, where: str):
    known = {f.name for f in fields(cls)}
    unknown = set(doc) - known
    if unknown:
        raise InvalidArgument(f"unknown keys in {where}: {', '.join(sorted(unknown))}")
    try:
        return cls(**doc)
    except TypeError as exc:
        raise InvalidArgument(f"bad {where}: {exc}") from exc


def parse_config(doc: dict) -> tuple[CompressionConfig, OptimConfig]:
    """A config document has optional ``compression`` and ``optim`` sections."""
    if not isinstance(doc, dict):
        raise InvalidArgument("config must be a JSON object")
    unknown = set(doc) - {"compression", "optim"}
    if unknown:
        raise InvalidArgument(f"unknown config sections: {', '.join(sorted(unknown))}")
    return (
        _build(CompressionConfig, doc.get("compression", {}), "compression"),
        _build(OptimConfig, doc.get("optim", {}), "optim"),
    )


def load_config(path) -> tuple[CompressionConfig, OptimConfig]:
    return parse_config(json.loads(Path(path).read_text()))


def write_trace(path, trace) -> None:
    lines = ["iteration,L_d,L_r,L"]
    lines += [f"{r.iteration},{r.L_d!r},{r.L_r!r},{r.L!r}" for r in trace]
    Path(path).write_text("\n".join(lines) + "\n")
