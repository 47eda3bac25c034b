"""Procedural scenes: a ground plane plus labelled boxes, seen by a LiDAR and a camera rig."""

from __future__ import annotations

import hashlib
from dataclasses import dataclass

import numpy as np

from ..geometry import CameraModel, LidarSweep, Pose, project_points
from ..voxelcore import IGNORE_ID, GridSpec, LabelSpace, SemanticVoxelGrid, voxel_center

SENSOR_HEIGHT = 1.8
MAX_RANGE = 40.0
SURFACE_NUDGE = 1e-4  # returns are pushed this far into the hit surface

DEFAULT_SCENE_CLASSES = ("driveable surface", "car", "pedestrian", "barrier", "vegetation")


def default_scene_spec() -> GridSpec:
    return GridSpec((-8.0, -8.0, -1.0), (0.5, 0.5, 0.5), (32, 32, 10))


def default_scene_space() -> LabelSpace:
    return LabelSpace(DEFAULT_SCENE_CLASSES)


def phrase_embedding(phrase: str, dim: int) -> np.ndarray:
    """Deterministic unit vector for a phrase (stand-in for a frozen text encoder)."""
    seed = int.from_bytes(hashlib.sha256(phrase.encode("utf-8")).digest()[:8], "little")
    v = np.random.default_rng(seed).standard_normal(dim)
    return v / np.linalg.norm(v)


@dataclass(frozen=True)
class Box:
    lo: tuple[float, float, float]
    hi: tuple[float, float, float]
    label: int


@dataclass
class SyntheticScene:
    spec: GridSpec
    label_space: LabelSpace
    gt: SemanticVoxelGrid  # key-frame ego frame (= world frame)
    boxes: list[Box]
    ground_z: float
    sweeps: list[LidarSweep]
    rig: list[CameraModel]
    masks: list[list[np.ndarray]]  # [sweep][camera] (H, W) uint16
    image_embeddings: list[list[np.ndarray]]  # [sweep][camera] (H, W, C) float32
    text_prototypes: np.ndarray  # (n_cls, C)
    image_prototypes: np.ndarray  # (n_cls, C)
    key_index: int = 0


def intersect_scene(origins, dirs, boxes: list[Box], ground_z: float, max_range: float = MAX_RANGE):
    """First hit along unit rays. Returns ``(t, label)`` with ``t = inf`` / ``label = -1`` on a miss."""
    o = np.asarray(origins, dtype=np.float64).reshape(-1, 3)
    d = np.asarray(dirs, dtype=np.float64).reshape(-1, 3)
    n = d.shape[0]
    best_t = np.full(n, np.inf)
    best_l = np.full(n, -1, dtype=np.int64)
    with np.errstate(divide="ignore", invalid="ignore"):
        tg = np.where(d[:, 2] < 0, (ground_z - o[:, 2]) / d[:, 2], np.inf)
    tg = np.where(tg > 0, tg, np.inf)
    best_t, best_l = np.where(tg < best_t, tg, best_t), np.where(tg < best_t, 0, best_l)
    for box in boxes:
        lo, hi = np.asarray(box.lo), np.asarray(box.hi)
        with np.errstate(divide="ignore", invalid="ignore"):
            ta = (lo - o) / d
            tb = (hi - o) / d
        tmin = np.where(d == 0, np.where((o >= lo) & (o <= hi), -np.inf, np.inf), np.minimum(ta, tb))
        tmax = np.where(d == 0, np.where((o >= lo) & (o <= hi), np.inf, -np.inf), np.maximum(ta, tb))
        t_in = tmin.max(axis=1)
        t_out = tmax.min(axis=1)
        hit = (t_in <= t_out) & (t_in > 0)
        t = np.where(hit, t_in, np.inf)
        closer = t < best_t
        best_t = np.where(closer, t, best_t)
        best_l = np.where(closer, box.label, best_l)
    miss = best_t > max_range
    best_t[miss] = np.inf
    best_l[miss] = -1
    return best_t, best_l


def _camera_rotation(yaw: float, pitch: float) -> np.ndarray:
    """Ego -> camera rotation for a camera looking along ``yaw`` tilted down by ``pitch``."""
    f = np.array([np.cos(yaw) * np.cos(pitch), np.sin(yaw) * np.cos(pitch), -np.sin(pitch)])
    r = np.array([np.sin(yaw), -np.cos(yaw), 0.0])
    down = np.cross(f, r)
    return np.stack([r, down, f])


def make_rig(n_cameras: int, width: int = 128, height: int = 96, pitch: float = np.radians(10.0), yaw0: float = 0.0) -> list[CameraModel]:
    centre = np.array([0.0, 0.0, SENSOR_HEIGHT])
    f = width / 2.0  # 90 degree horizontal field of view
    rig = []
    for j in range(n_cameras):
        rot = _camera_rotation(yaw0 + 2 * np.pi * j / n_cameras, pitch)
        rig.append(
            CameraModel.pinhole(f, f, (width - 1) / 2.0, (height - 1) / 2.0, width, height, Pose(rot, -rot @ centre), f"cam{j}")
        )
    return rig


def _place_boxes(rng, spec: GridSpec, ground_z: float, n_boxes: int, n_cls: int, keepout: tuple[float, float]) -> list[Box]:
    size = np.asarray(spec.voxel_size)
    lo_grid, hi_grid = spec.lower, spec.upper
    boxes: list[Box] = []
    cells = []
    for _ in range(200 * n_boxes):
        if len(boxes) == n_boxes:
            break
        ext = rng.integers(2, 7, size=2)
        height = int(rng.integers(2, 6))
        i0 = rng.integers(1, spec.dims[0] - ext[0] - 1)
        j0 = rng.integers(1, spec.dims[1] - ext[1] - 1)
        lo = np.array([lo_grid[0] + i0 * size[0], lo_grid[1] + j0 * size[1], ground_z])
        hi = lo + np.array([ext[0] * size[0], ext[1] * size[1], height * size[2]])
        hi[2] = min(hi[2], hi_grid[2] - size[2])
        # keep clear of the sensor path along the x axis
        if lo[1] < 1.5 and hi[1] > -1.5 and lo[0] < keepout[1] + 1.5 and hi[0] > keepout[0] - 1.5:
            continue
        # one free cell between boxes so a surface never belongs to two of them
        if any(np.all(lo < c_hi + size) and np.all(hi > c_lo - size) for c_lo, c_hi in cells):
            continue
        cells.append((lo, hi))
        boxes.append(Box(tuple(lo), tuple(hi), int(rng.integers(1, n_cls))))
    return boxes


def _rasterise(spec: GridSpec, n_cls: int, boxes: list[Box], ground_z: float) -> SemanticVoxelGrid:
    ijk = np.stack(np.meshgrid(*[np.arange(d) for d in spec.dims], indexing="ij"), axis=-1).reshape(-1, 3)
    c = voxel_center(spec, ijk)
    labels = np.full(spec.n_voxels, n_cls, dtype=np.uint16)
    # one-voxel-thick ground slab directly below the surface
    labels[(c[:, 2] < ground_z) & (c[:, 2] > ground_z - spec.voxel_size[2])] = 0
    labels[c[:, 2] < ground_z - spec.voxel_size[2]] = IGNORE_ID
    for b in boxes:
        inside = np.all((c > np.asarray(b.lo)) & (c < np.asarray(b.hi)), axis=1)
        labels[inside] = b.label
    return SemanticVoxelGrid(spec, labels, n_cls)


def _sample_rays(rng, rig, n_rays: int, cam_pose_ok) -> np.ndarray:
    """Unit directions (ego frame) from the sensor that land inside at least one camera image."""
    origin = np.array([0.0, 0.0, SENSOR_HEIGHT])
    out = []
    have = 0
    while have < n_rays:
        m = 2 * (n_rays - have) + 64
        az = rng.uniform(-np.pi, np.pi, m)
        el = rng.uniform(np.radians(-30.0), np.radians(8.0), m)
        d = np.stack([np.cos(el) * np.cos(az), np.cos(el) * np.sin(az), np.sin(el)], axis=1)
        ok = np.zeros(m, dtype=bool)
        for cam in rig:
            ok |= project_points(cam, origin + d)[2]
        d = d[ok][: n_rays - have]
        out.append(d)
        have += d.shape[0]
    return np.concatenate(out)


def render_camera(cam: CameraModel, ego_to_world: Pose, boxes, ground_z: float):
    """Per-pixel label (IGNORE_ID on a miss) from a ray through every integer pixel centre."""
    v, u = np.mgrid[0 : cam.height, 0 : cam.width]
    k = cam.intrinsics
    y = (v.reshape(-1) - k[1, 2]) / k[1, 1]
    x = (u.reshape(-1) - k[0, 2] - k[0, 1] * y) / k[0, 0]
    dc = np.stack([x, y, np.ones_like(x)], axis=1)
    cam_to_world = ego_to_world.compose(cam.extrinsic.inverse())
    d = dc @ cam_to_world.rotation.T
    d /= np.linalg.norm(d, axis=1, keepdims=True)
    o = np.broadcast_to(cam_to_world.translation, d.shape)
    _, lab = intersect_scene(o, d, boxes, ground_z)
    mask = np.where(lab >= 0, lab, IGNORE_ID).astype(np.uint16)
    return mask.reshape(cam.height, cam.width)


def make_synthetic_scene(
    seed: int,
    spec: GridSpec | None = None,
    label_space: LabelSpace | None = None,
    n_boxes: int | None = None,
    n_cameras: int | None = None,
    n_rays: int | None = None,
    n_sweeps: int = 1,
    image_size: tuple[int, int] = (96, 128),
    emb_dim: int = 16,
    emb_noise: float = 0.05,
    sweep_step: float = 0.5,
) -> SyntheticScene:
    """Deterministic scene for a seed.

    Class 0 of the label space is the ground. Boxes are lattice aligned, so the
    analytic ground truth is exact. Sweep ``i`` has its ego ``i * sweep_step``
    metres further along +x with a small yaw; sweep 0 is the key frame.
    """
    rng = np.random.default_rng(seed)
    spec = spec or default_scene_spec()
    space = label_space or default_scene_space()
    n_cls = space.n_cls
    sz = spec.voxel_size[2]
    ground_z = spec.origin[2] + round((0.0 - spec.origin[2]) / sz) * sz
    n_boxes = int(rng.integers(3, 7)) if n_boxes is None else n_boxes
    n_cameras = int(rng.integers(1, 5)) if n_cameras is None else n_cameras
    n_rays = int(rng.integers(2000, 20001)) if n_rays is None else n_rays
    boxes = _place_boxes(rng, spec, ground_z, n_boxes, n_cls, (0.0, sweep_step * (n_sweeps - 1)))
    gt = _rasterise(spec, n_cls, boxes, ground_z)
    h, w = image_size
    rig = make_rig(n_cameras, w, h, yaw0=float(rng.uniform(-np.pi, np.pi)))

    text = np.stack([phrase_embedding(c, emb_dim) for c in space.classes])
    mix = rng.standard_normal((n_cls, emb_dim))
    mix /= np.linalg.norm(mix, axis=1, keepdims=True)
    image_protos = 0.6 * text + 0.8 * mix
    image_protos /= np.linalg.norm(image_protos, axis=1, keepdims=True)

    sensor_to_ego = Pose(np.eye(3), (0.0, 0.0, SENSOR_HEIGHT))
    sweeps, masks, embs = [], [], []
    for i in range(n_sweeps):
        ego_to_world = Pose.from_yaw(0.02 * i, (sweep_step * i, 0.0, 0.0))
        dirs_ego = _sample_rays(rng, rig, n_rays, None)
        s2w = ego_to_world.compose(sensor_to_ego)
        d_w = dirs_ego @ s2w.rotation.T
        o_w = np.broadcast_to(s2w.translation, d_w.shape)
        t, _ = intersect_scene(o_w, d_w, boxes, ground_z)
        keep = np.isfinite(t)
        p_w = o_w[keep] + (t[keep, None] + SURFACE_NUDGE) * d_w[keep]
        pts = s2w.inverse().apply(p_w)
        sweeps.append(LidarSweep(pts.astype(np.float32), sensor_to_ego, ego_to_world, 1_000_000 + 500_000 * i))
        cam_masks, cam_embs = [], []
        for cam in rig:
            m = render_camera(cam, ego_to_world, boxes, ground_z)
            cam_masks.append(m)
            e = np.where((m != IGNORE_ID)[..., None], image_protos[np.minimum(m, n_cls - 1)], 0.0)
            e = e + emb_noise * rng.standard_normal(e.shape)
            cam_embs.append(e.astype(np.float32))
        masks.append(cam_masks)
        embs.append(cam_embs)
    return SyntheticScene(spec, space, gt, boxes, ground_z, sweeps, rig, masks, embs, text, image_protos)
