"""Dense 3-D pseudo-labels from 2-D semantic masks and LiDAR sweeps.

The pipeline per selected sweep: look up each LiDAR point in the camera masks,
warp the points into the key frame, vote per voxel, and carve free space along
every LiDAR ray. Partial vote grids are merged by count addition and boolean OR,
so sweep order and worker count never change the result.
"""

from __future__ import annotations

import logging
from collections.abc import Mapping, Sequence
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError
from .geometry import CameraModel, LidarSweep, Pose, nearest_pixel, project_points, traverse, warp_points
from .voxelcore import IGNORE_ID, GridSpec, LabelSpace, SemanticVoxelGrid, flat_index, voxel_indices

log = logging.getLogger(__name__)

CameraRig = Sequence[CameraModel]
MaskSet = Sequence[np.ndarray]


def check_masks(masks: MaskSet, rig: CameraRig, n_cls: int) -> None:
    if len(masks) != len(rig):
        raise ConfigError(f"{len(masks)} masks for a rig of {len(rig)} cameras")
    for cam, m in zip(rig, masks):
        m = np.asarray(m)
        if m.shape != (cam.height, cam.width):
            raise ConfigError(f"mask for camera {cam.name!r} is {m.shape}, expected {(cam.height, cam.width)}")
        bad = (m >= n_cls) & (m != IGNORE_ID)
        if bad.any():
            raise ConfigError(f"mask for camera {cam.name!r} holds label {int(m[bad][0])} outside the label space")


@dataclass
class VoteGrid:
    spec: GridSpec
    n_cls: int
    counts: np.ndarray = field(default=None)  # (n_voxels, n_cls) int64
    hit: np.ndarray = field(default=None)
    freed: np.ndarray = field(default=None)

    def __post_init__(self):
        n = self.spec.n_voxels
        if self.counts is None:
            self.counts = np.zeros((n, self.n_cls), dtype=np.int64)
        if self.hit is None:
            self.hit = np.zeros(n, dtype=bool)
        if self.freed is None:
            self.freed = np.zeros(n, dtype=bool)

    def merge(self, other: "VoteGrid") -> "VoteGrid":
        if other.spec != self.spec or other.n_cls != self.n_cls:
            raise ConfigError("cannot merge vote grids over different grids or label spaces")
        self.counts += other.counts
        self.hit |= other.hit
        self.freed |= other.freed
        return self


def label_points(sweep: LidarSweep, rig: CameraRig, masks: MaskSet, n_cls: int) -> np.ndarray:
    """Per-point class id from the camera masks, ``-1`` where no camera saw a usable label.

    Multiple witnessing cameras vote; ties go to the lowest class id.
    """
    check_masks(masks, rig, n_cls)
    pts = sweep.points_ego()
    votes = np.zeros((pts.shape[0], n_cls), dtype=np.int64)
    for cam, mask in zip(rig, masks):
        uv, _, vis = project_points(cam, pts)
        idx = np.flatnonzero(vis)
        if idx.size == 0:
            continue
        row, col = nearest_pixel(uv[idx], cam.width, cam.height)
        lab = np.asarray(mask)[row, col].astype(np.int64)
        keep = lab != IGNORE_ID
        np.add.at(votes, (idx[keep], lab[keep]), 1)
    labels = np.argmax(votes, axis=1)
    labels[votes.max(axis=1) == 0] = -1
    return labels


def accumulate(vote: VoteGrid, points, labels) -> VoteGrid:
    """Count labelled points per voxel; unlabelled points (``-1``) only mark ``hit``."""
    ijk, inside = voxel_indices(vote.spec, points)
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    flat = flat_index(vote.spec, ijk[inside])
    lab = labels[inside]
    vote.hit[flat] = True
    sem = lab >= 0
    if np.any(lab[sem] >= vote.n_cls):
        raise ConfigError("point label outside the label space")
    np.add.at(vote.counts, (flat[sem], lab[sem]), 1)
    return vote


def carve_free(vote: VoteGrid, sensor_origin, endpoints) -> VoteGrid:
    """Mark voxels strictly between the sensor and each return as freed.

    The voxel holding an in-grid endpoint is never freed by its own ray; rays
    whose endpoint lies outside the grid free every clipped voxel they cross.
    """
    ends = np.asarray(endpoints, dtype=np.float64).reshape(-1, 3)
    if ends.shape[0] == 0:
        return vote
    origins = np.broadcast_to(np.asarray(sensor_origin, dtype=np.float64).reshape(-1, 3), ends.shape)
    ray_id, ijk = traverse(vote.spec, origins, ends)
    if ray_id.size == 0:
        return vote
    _, end_inside = voxel_indices(vote.spec, ends)
    last = np.ones(ray_id.size, dtype=bool)
    last[:-1] = ray_id[1:] != ray_id[:-1]
    drop = last & end_inside[ray_id]
    vote.freed[flat_index(vote.spec, ijk[~drop])] = True
    return vote


def finalize(vote: VoteGrid) -> SemanticVoxelGrid:
    """Majority class where points voted; FREE where only carved; IGNORE elsewhere.

    A voxel that holds a LiDAR return but no semantic vote stays IGNORE even if
    another ray carved through it: a return proves the voxel is occupied.
    """
    has_votes = vote.counts.max(axis=1) > 0
    labels = np.full(vote.spec.n_voxels, IGNORE_ID, dtype=np.uint16)
    labels[vote.freed & ~vote.hit] = vote.n_cls
    labels[has_votes] = np.argmax(vote.counts[has_votes], axis=1)
    return SemanticVoxelGrid(vote.spec, labels, vote.n_cls)


@dataclass(frozen=True)
class PipelineConfig:
    spec: GridSpec
    label_space: LabelSpace
    n_sweep: int = 30
    n_interval: int = 2
    key_index: int = 0

    def __post_init__(self):
        if self.n_sweep < 1 or self.n_interval < 1:
            raise ConfigError("n_sweep and n_interval must be >= 1")


def select_sweeps(n_available: int, key_index: int, n_sweep: int, n_interval: int) -> list[int]:
    """Indices of ``n_sweep`` sweeps at stride ``n_interval`` containing the key frame.

    The window is centred on the key frame and shifted (in whole strides) when it
    would run past either end of the sequence.
    """
    if not 0 <= key_index < n_available:
        raise ConfigError(f"key frame {key_index} outside the {n_available} available sweeps")
    span = (n_sweep - 1) * n_interval
    # the window starts ``m`` strides before the key frame
    m_min = max(0, -(-(key_index + span - (n_available - 1)) // n_interval))
    m_max = min(n_sweep - 1, key_index // n_interval)
    if m_min > m_max:
        raise ConfigError(
            f"need {n_sweep} sweeps at interval {n_interval} around key frame {key_index}, "
            f"only {n_available} available"
        )
    m = min(max((n_sweep - 1) // 2, m_min), m_max)
    start = key_index - m * n_interval
    return [start + j * n_interval for j in range(n_sweep)]


def nearest_sweep(sweep_timestamps, t: int) -> int:
    """Index of the sweep temporally closest to ``t`` (earliest on ties)."""
    ts = np.asarray(sweep_timestamps, dtype=np.int64)
    if ts.size == 0:
        raise ConfigError("no sweeps to synchronise with")
    return int(np.argmin(np.abs(ts - int(t))))


def _rig_for(rigs, i: int) -> CameraRig:
    if rigs and isinstance(rigs[0], CameraModel):
        return rigs
    return rigs[i]


def sweep_votes(spec: GridSpec, n_cls: int, sweep: LidarSweep, rig: CameraRig, masks: MaskSet, reference: Pose) -> VoteGrid:
    labels = label_points(sweep, rig, masks, n_cls)
    pts = warp_points(sweep.points_ego(), sweep.ego_to_world, reference)
    origin = warp_points(sweep.sensor_origin_ego[None], sweep.ego_to_world, reference)[0]
    vote = VoteGrid(spec, n_cls)
    accumulate(vote, pts, labels)
    carve_free(vote, origin, pts)
    return vote


def aggregate_votes(config: PipelineConfig, sweeps: Sequence[LidarSweep], rigs, masks, threads: int = 1) -> VoteGrid:
    ts = [s.timestamp for s in sweeps]
    if ts != sorted(ts):
        raise ConfigError("sweeps must be sorted by timestamp")
    chosen = select_sweeps(len(sweeps), config.key_index, config.n_sweep, config.n_interval)
    reference = sweeps[config.key_index].ego_to_world
    n_cls = config.label_space.n_cls
    jobs = []
    for i in chosen:
        if isinstance(masks, Mapping):
            if i not in masks:
                raise ConfigError(f"no masks for selected sweep {i}")
            m = masks[i]
        else:
            if i >= len(masks):
                raise ConfigError(f"no masks for selected sweep {i}")
            m = masks[i]
        jobs.append((sweeps[i], _rig_for(rigs, i), m))
    log.info("aggregating %d sweeps %s around key frame %d", len(chosen), chosen, config.key_index)

    def work(job):
        return sweep_votes(config.spec, n_cls, job[0], job[1], job[2], reference)

    total = VoteGrid(config.spec, n_cls)
    if threads > 1 and len(jobs) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            for part in pool.map(work, jobs):
                total.merge(part)
    else:
        for job in jobs:
            total.merge(work(job))
    return total


def generate_pseudolabels(config: PipelineConfig, sweeps: Sequence[LidarSweep], rigs, masks, threads: int = 1) -> SemanticVoxelGrid:
    """Multi-sweep aggregation, ray-cast free space and per-voxel semantic voting.

    ``rigs`` is either one camera rig shared by all sweeps or one rig per sweep;
    ``masks`` is indexed by sweep position (sequence or mapping).
    """
    return finalize(aggregate_votes(config, sweeps, rigs, masks, threads))


def project_embeddings(emb_maps, sweeps: Sequence[LidarSweep], rigs, spec: GridSpec, reference: Pose | None = None, scale: int = 1):
    """Average 2-D image embeddings into voxels through the LiDAR points.

    ``emb_maps[s][c]`` is the ``(rows, cols, C)`` map of camera ``c`` at sweep
    ``s``; with ``scale > 1`` a map covers ``scale x scale`` image pixels per cell.
    Every visible (point, camera) pair contributes one vector. Returns
    ``(E_3d (n_voxels, C) float64, visible (n_voxels,) bool)``.
    """
    if len(emb_maps) != len(sweeps):
        raise ConfigError(f"{len(emb_maps)} embedding sets for {len(sweeps)} sweeps")
    if reference is None:
        reference = sweeps[0].ego_to_world
    sums = None
    count = np.zeros(spec.n_voxels, dtype=np.int64)
    for s, sweep in enumerate(sweeps):
        rig = _rig_for(rigs, s)
        maps = emb_maps[s]
        if len(maps) != len(rig):
            raise ConfigError(f"sweep {s}: {len(maps)} embedding maps for {len(rig)} cameras")
        pts = sweep.points_ego()
        ijk, inside = voxel_indices(spec, warp_points(pts, sweep.ego_to_world, reference))
        flat = flat_index(spec, ijk)
        for cam, emb in zip(rig, maps):
            emb = np.asarray(emb)
            want = (-(-cam.height // scale), -(-cam.width // scale))
            if emb.ndim != 3 or emb.shape[:2] != want:
                raise ConfigError(f"embedding map for camera {cam.name!r} is {emb.shape}, expected {want} x C")
            if sums is None:
                sums = np.zeros((spec.n_voxels, emb.shape[2]), dtype=np.float64)
            elif emb.shape[2] != sums.shape[1]:
                raise ConfigError("embedding maps disagree on channel count")
            uv, _, vis = project_points(cam, pts)
            idx = np.flatnonzero(vis & inside)
            if idx.size == 0:
                continue
            row, col = nearest_pixel(uv[idx], cam.width, cam.height, scale)
            np.add.at(sums, flat[idx], emb[row, col].astype(np.float64))
            np.add.at(count, flat[idx], 1)
    if sums is None:
        raise ConfigError("no embedding maps given")
    visible = count > 0
    sums[visible] /= count[visible, None]
    return sums, visible
