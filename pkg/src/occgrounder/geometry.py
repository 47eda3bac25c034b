"""Rigid transforms, pinhole cameras, LiDAR sweeps and voxel ray traversal."""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ConfigError, FormatError
from .voxelcore import GridSpec

TIE_EPS = 1e-12
CLIP_NUDGE = 1e-9
MIN_DEPTH = 1e-6


@dataclass(frozen=True, eq=False)
class Pose:
    """Rigid transform ``x_target = R @ x_source + t``."""

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        r = np.array(self.rotation, dtype=np.float64).reshape(3, 3)
        t = np.array(self.translation, dtype=np.float64).reshape(3)
        if not (np.all(np.isfinite(r)) and np.all(np.isfinite(t))):
            raise ConfigError("pose must be finite")
        if np.abs(r @ r.T - np.eye(3)).max() > 1e-6 or abs(np.linalg.det(r) - 1.0) > 1e-6:
            raise ConfigError("pose rotation is not a proper rotation matrix")
        r.setflags(write=False)
        t.setflags(write=False)
        object.__setattr__(self, "rotation", r)
        object.__setattr__(self, "translation", t)

    @classmethod
    def identity(cls) -> "Pose":
        return cls(np.eye(3), np.zeros(3))

    @classmethod
    def from_yaw(cls, yaw: float, translation=(0.0, 0.0, 0.0)) -> "Pose":
        c, s = np.cos(yaw), np.sin(yaw)
        return cls(np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]]), translation)

    @classmethod
    def from_matrix34(cls, m) -> "Pose":
        m = np.asarray(m, dtype=np.float64).reshape(3, 4)
        return cls(m[:, :3], m[:, 3])

    def matrix34(self) -> np.ndarray:
        return np.hstack([self.rotation, self.translation[:, None]])

    def matrix44(self) -> np.ndarray:
        return np.vstack([self.matrix34(), [0.0, 0.0, 0.0, 1.0]])

    def apply(self, points) -> np.ndarray:
        pts = np.asarray(points, dtype=np.float64)
        return pts @ self.rotation.T + self.translation

    def inverse(self) -> "Pose":
        rt = self.rotation.T
        return Pose(rt, -rt @ self.translation)

    def compose(self, other: "Pose") -> "Pose":
        """``self ∘ other``: apply ``other`` first."""
        return Pose(self.rotation @ other.rotation, self.rotation @ other.translation + self.translation)

    def __matmul__(self, other: "Pose") -> "Pose":
        return self.compose(other)


def warp_points(points, src: Pose, dst: Pose) -> np.ndarray:
    """Move points from the ego frame of ``src`` to the ego frame of ``dst``.

    Both poses map ego to world, so the applied transform is ``dst⁻¹ ∘ src``.
    """
    return dst.inverse().compose(src).apply(points)


@dataclass(frozen=True, eq=False)
class CameraModel:
    intrinsics: np.ndarray
    extrinsic: Pose  # ego -> camera
    width: int
    height: int
    name: str = ""

    def __post_init__(self):
        k = np.array(self.intrinsics, dtype=np.float64).reshape(3, 3)
        fx, fy, cx, cy = k[0, 0], k[1, 1], k[0, 2], k[1, 2]
        if not (fx > 0 and fy > 0):
            raise ConfigError(f"camera {self.name!r}: focal lengths must be positive")
        if not (0 <= cx < self.width and 0 <= cy < self.height):
            raise ConfigError(f"camera {self.name!r}: principal point outside the image")
        if not (k[1, 0] == 0 and k[2, 0] == 0 and k[2, 1] == 0 and k[2, 2] == 1):
            raise ConfigError(f"camera {self.name!r}: intrinsics must be upper triangular with K[2,2]=1")
        k.setflags(write=False)
        object.__setattr__(self, "intrinsics", k)
        object.__setattr__(self, "width", int(self.width))
        object.__setattr__(self, "height", int(self.height))

    @classmethod
    def pinhole(cls, fx, fy, cx, cy, width, height, extrinsic=None, name="") -> "CameraModel":
        k = np.array([[fx, 0.0, cx], [0.0, fy, cy], [0.0, 0.0, 1.0]])
        return cls(k, extrinsic or Pose.identity(), width, height, name)


def project_points(camera: CameraModel, points_ego) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Vectorised projection. Returns ``(uv (N,2), depth (N,), visible (N,))``."""
    pc = camera.extrinsic.apply(np.asarray(points_ego, dtype=np.float64).reshape(-1, 3))
    depth = pc[:, 2]
    front = depth > MIN_DEPTH
    z = np.where(front, depth, 1.0)
    k = camera.intrinsics
    xn, yn = pc[:, 0] / z, pc[:, 1] / z
    u = k[0, 0] * xn + k[0, 1] * yn + k[0, 2]
    v = k[1, 1] * yn + k[1, 2]
    visible = front & (u >= 0) & (u < camera.width) & (v >= 0) & (v < camera.height)
    return np.stack([u, v], axis=1), depth, visible


def project_point(camera: CameraModel, point_ego) -> tuple[float, float, float] | None:
    uv, depth, visible = project_points(camera, np.asarray(point_ego, dtype=np.float64)[None])
    if not visible[0]:
        return None
    return float(uv[0, 0]), float(uv[0, 1]), float(depth[0])


def backproject(camera: CameraModel, u, v, depth) -> np.ndarray:
    k = camera.intrinsics
    y = (np.asarray(v, dtype=np.float64) - k[1, 2]) / k[1, 1]
    x = (np.asarray(u, dtype=np.float64) - k[0, 2] - k[0, 1] * y) / k[0, 0]
    d = np.asarray(depth, dtype=np.float64)
    pc = np.stack(np.broadcast_arrays(x * d, y * d, d), axis=-1)
    return camera.extrinsic.inverse().apply(pc)


def nearest_pixel(uv: np.ndarray, width: int, height: int, scale: int = 1) -> tuple[np.ndarray, np.ndarray]:
    """Nearest integer pixel (pixel centres at integer coordinates), optionally in a map downscaled by ``scale``."""
    col = np.minimum(np.floor(uv[:, 0] + 0.5).astype(np.int64), width - 1)
    row = np.minimum(np.floor(uv[:, 1] + 0.5).astype(np.int64), height - 1)
    return row // scale, col // scale


@dataclass(frozen=True, eq=False)
class LidarSweep:
    points: np.ndarray  # (N, 3) float32, sensor frame
    sensor_to_ego: Pose
    ego_to_world: Pose
    timestamp: int  # microseconds

    def __post_init__(self):
        pts = np.ascontiguousarray(np.asarray(self.points, dtype=np.float32).reshape(-1, 3))
        if not np.all(np.isfinite(pts)):
            raise ConfigError("sweep points must be finite")
        pts.setflags(write=False)
        object.__setattr__(self, "points", pts)
        object.__setattr__(self, "timestamp", int(self.timestamp))

    def points_ego(self) -> np.ndarray:
        return self.sensor_to_ego.apply(self.points.astype(np.float64))

    @property
    def sensor_origin_ego(self) -> np.ndarray:
        return self.sensor_to_ego.translation.copy()


# ---------------------------------------------------------------- traversal


def _clip_params(spec: GridSpec, a: np.ndarray, b: np.ndarray):
    """Slab clipping of segments ``a + t (b - a)``, ``t ∈ [0, 1]``, to the half-open grid box."""
    lo, hi = spec.lower, spec.upper
    d = b - a
    n = a.shape[0]
    t0 = np.zeros(n)
    t1 = np.ones(n)
    ok = np.ones(n, dtype=bool)
    with np.errstate(divide="ignore", invalid="ignore"):
        for ax in range(3):
            flat = d[:, ax] == 0
            inside = (a[:, ax] >= lo[ax]) & (a[:, ax] < hi[ax])
            ok &= ~flat | inside
            ta = (lo[ax] - a[:, ax]) / d[:, ax]
            tb = (hi[ax] - a[:, ax]) / d[:, ax]
            t0 = np.where(flat, t0, np.maximum(t0, np.minimum(ta, tb)))
            t1 = np.where(flat, t1, np.minimum(t1, np.maximum(ta, tb)))
    length = np.sqrt(d[:, 0] * d[:, 0] + d[:, 1] * d[:, 1] + d[:, 2] * d[:, 2])
    nudge = np.divide(CLIP_NUDGE, length, out=np.zeros(n), where=length > 0)
    t0 = np.where(t0 > 0, t0 + nudge, t0)
    t1 = np.where(t1 < 1, t1 - nudge, t1)
    ok &= t0 <= t1
    return t0, t1, ok, length


def traverse(spec: GridSpec, origins, endpoints):
    """Incremental grid traversal of many segments at once.

    Returns ``(ray_id, ijk)`` with rows grouped by ray and ordered by entry
    distance inside each ray. Segments missing the grid contribute no rows.
    """
    a = np.asarray(origins, dtype=np.float64).reshape(-1, 3)
    b = np.asarray(endpoints, dtype=np.float64).reshape(-1, 3)
    if a.shape != b.shape:
        raise ConfigError("origins and endpoints must have the same shape")
    n = a.shape[0]
    if n == 0:
        return np.zeros(0, dtype=np.int64), np.zeros((0, 3), dtype=np.int64)
    t0, t1, ok, length = _clip_params(spec, a, b)
    rays = np.flatnonzero(ok)
    a, b, t0, t1, length = a[rays], b[rays], t0[rays], t1[rays], length[rays]
    d = b - a
    p0 = a + t0[:, None] * d
    p1 = a + t1[:, None] * d
    lo = spec.lower
    size = np.asarray(spec.voxel_size)
    dims = np.asarray(spec.dims)
    c0 = np.clip(np.floor((p0 - lo) / size), 0, dims - 1).astype(np.int64)
    c1 = np.clip(np.floor((p1 - lo) / size), 0, dims - 1).astype(np.int64)
    step = np.sign(c1 - c0)
    remaining = np.abs(c1 - c0)
    unit = np.divide(d, length[:, None], out=np.zeros_like(d), where=length[:, None] > 0)
    with np.errstate(divide="ignore", invalid="ignore"):
        boundary = lo + (c0 + (step > 0)) * size
        t_max = np.where(step != 0, (boundary - p0) / unit, np.inf)
        t_delta = np.where(step != 0, size / np.abs(unit), np.inf)

    out_ray = [rays]
    out_step = [np.zeros(rays.size, dtype=np.int64)]
    out_ijk = [c0.copy()]
    cur = c0
    active = np.flatnonzero(remaining.sum(axis=1) > 0)
    k = 0
    while active.size:
        k += 1
        tm = np.where(remaining[active] > 0, t_max[active], np.inf)
        best = tm.min(axis=1, keepdims=True)
        # first axis within TIE_EPS of the minimum: fixed x -> y -> z priority
        axis = np.argmax(tm <= best + TIE_EPS, axis=1)
        cur[active, axis] += step[active, axis]
        t_max[active, axis] += t_delta[active, axis]
        remaining[active, axis] -= 1
        out_ray.append(rays[active])
        out_step.append(np.full(active.size, k, dtype=np.int64))
        out_ijk.append(cur[active].copy())
        active = active[remaining[active].sum(axis=1) > 0]

    ray_id = np.concatenate(out_ray)
    steps = np.concatenate(out_step)
    ijk = np.concatenate(out_ijk)
    order = np.lexsort((steps, ray_id))
    return ray_id[order], ijk[order]


def cast_rays(spec: GridSpec, origins, endpoints) -> list[np.ndarray]:
    n = np.asarray(origins).reshape(-1, 3).shape[0]
    ray_id, ijk = traverse(spec, origins, endpoints)
    bounds = np.searchsorted(ray_id, np.arange(n + 1))
    return [ijk[bounds[i] : bounds[i + 1]] for i in range(n)]


def cast_ray(spec: GridSpec, origin, endpoint) -> list[tuple[int, int, int]]:
    """Voxels crossed by the segment ``origin -> endpoint``, in order of entry distance."""
    (cells,) = cast_rays(spec, np.asarray(origin, dtype=np.float64)[None], np.asarray(endpoint, dtype=np.float64)[None])
    return [tuple(int(x) for x in c) for c in cells]


# ---------------------------------------------------------------- file formats

AGOP_MAGIC = b"AGOP"
AGOP_VERSION = 1
_AGOP_HEADER = struct.Struct("<4sIQ12d12dI")


def sweep_to_bytes(sweep: LidarSweep) -> bytes:
    header = _AGOP_HEADER.pack(
        AGOP_MAGIC,
        AGOP_VERSION,
        sweep.timestamp,
        *sweep.sensor_to_ego.matrix34().reshape(-1),
        *sweep.ego_to_world.matrix34().reshape(-1),
        sweep.points.shape[0],
    )
    return header + sweep.points.astype("<f4").tobytes()


def sweep_from_bytes(buf: bytes) -> LidarSweep:
    if len(buf) < _AGOP_HEADER.size:
        raise FormatError(f"AGOP header truncated: {len(buf)} of {_AGOP_HEADER.size} bytes", len(buf))
    fields = _AGOP_HEADER.unpack_from(buf, 0)
    if fields[0] != AGOP_MAGIC:
        raise FormatError(f"bad magic {fields[0]!r}, expected {AGOP_MAGIC!r}", 0)
    if fields[1] != AGOP_VERSION:
        raise FormatError(f"unsupported AGOP version {fields[1]}", 4)
    n = fields[-1]
    expected = _AGOP_HEADER.size + 12 * n
    if len(buf) != expected:
        raise FormatError(f"point payload has {len(buf) - _AGOP_HEADER.size} bytes, expected {12 * n}", min(len(buf), expected))
    try:
        s2e = Pose.from_matrix34(fields[3:15])
        e2w = Pose.from_matrix34(fields[15:27])
    except ConfigError as exc:
        raise FormatError(str(exc), 16) from exc
    pts = np.frombuffer(buf, dtype="<f4", count=3 * n, offset=_AGOP_HEADER.size).reshape(n, 3)
    try:
        return LidarSweep(pts, s2e, e2w, fields[2])
    except ConfigError as exc:
        raise FormatError(str(exc), _AGOP_HEADER.size) from exc


def write_sweep(sweep: LidarSweep, path) -> None:
    Path(path).write_bytes(sweep_to_bytes(sweep))


def read_sweep(path) -> LidarSweep:
    return sweep_from_bytes(Path(path).read_bytes())


def rig_to_dict(rig: list[CameraModel]) -> dict:
    return {
        "cameras": [
            {
                "name": cam.name,
                "intrinsics": cam.intrinsics.reshape(-1).tolist(),
                "extrinsic": cam.extrinsic.matrix34().reshape(-1).tolist(),
                "width": cam.width,
                "height": cam.height,
            }
            for cam in rig
        ]
    }


def rig_from_dict(d: dict) -> list[CameraModel]:
    try:
        cams = d["cameras"]
        return [
            CameraModel(
                np.asarray(c["intrinsics"], dtype=np.float64).reshape(3, 3),
                Pose.from_matrix34(c["extrinsic"]),
                int(c["width"]),
                int(c["height"]),
                str(c.get("name", f"cam{i}")),
            )
            for i, c in enumerate(cams)
        ]
    except (KeyError, TypeError, ValueError) as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(f"invalid camera rig: {exc}") from exc


def write_rig(rig: list[CameraModel], path) -> None:
    Path(path).write_text(json.dumps(rig_to_dict(rig), indent=2) + "\n", encoding="utf-8")


def read_rig(path) -> list[CameraModel]:
    try:
        data = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path}: invalid JSON: {exc.msg}", exc.pos) from exc
    return rig_from_dict(data)
