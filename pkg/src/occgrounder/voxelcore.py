"""Voxel grid, label space and the AGOV grid file format."""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError, FormatError

IGNORE_ID = 65535

AGOV_MAGIC = b"AGOV"
AGOV_VERSION = 1
# magic, version, dims[3], origin[3], voxel_size[3], n_cls
_AGOV_HEADER = struct.Struct("<4sI3I3f3fI")


def _as_f32_triple(values) -> tuple[float, float, float]:
    arr = np.asarray(values, dtype=np.float64).reshape(-1)
    if arr.shape != (3,):
        raise ConfigError(f"expected a 3-vector, got shape {arr.shape}")
    # values are stored as f32 on disk; keep the in-memory copy on the same lattice
    return tuple(float(v) for v in arr.astype(np.float32))


@dataclass(frozen=True)
class GridSpec:
    """Axis-aligned voxel lattice. Cells are half-open ``[min, max)`` along each axis."""

    origin: tuple[float, float, float]
    voxel_size: tuple[float, float, float]
    dims: tuple[int, int, int]

    def __post_init__(self):
        object.__setattr__(self, "origin", _as_f32_triple(self.origin))
        object.__setattr__(self, "voxel_size", _as_f32_triple(self.voxel_size))
        dims = tuple(int(d) for d in self.dims)
        if len(dims) != 3:
            raise ConfigError(f"dims must have 3 entries, got {dims}")
        object.__setattr__(self, "dims", dims)
        if not all(np.isfinite(self.origin)):
            raise ConfigError("origin must be finite")
        if not all(s > 0 and np.isfinite(s) for s in self.voxel_size):
            raise ConfigError(f"voxel_size must be positive, got {self.voxel_size}")
        if not all(d >= 1 for d in dims):
            raise ConfigError(f"dims must be >= 1, got {dims}")

    @classmethod
    def occ3d(cls) -> "GridSpec":
        """The Occ3D-nuScenes lattice: 80 m x 80 m x 6.4 m at 0.4 m."""
        return cls((-40.0, -40.0, -1.0), (0.4, 0.4, 0.4), (200, 200, 16))

    @property
    def n_voxels(self) -> int:
        h, w, d = self.dims
        return h * w * d

    @property
    def lower(self) -> np.ndarray:
        return np.asarray(self.origin, dtype=np.float64)

    @property
    def upper(self) -> np.ndarray:
        return self.lower + np.asarray(self.dims) * np.asarray(self.voxel_size)

    def to_dict(self) -> dict:
        return {"origin": list(self.origin), "voxel_size": list(self.voxel_size), "dims": list(self.dims)}

    @classmethod
    def from_dict(cls, d: dict) -> "GridSpec":
        try:
            return cls(tuple(d["origin"]), tuple(d["voxel_size"]), tuple(d["dims"]))
        except (KeyError, TypeError) as exc:
            raise ConfigError(f"invalid grid spec: {exc}") from exc


def voxel_index(spec: GridSpec, point) -> tuple[int, int, int] | None:
    p = np.asarray(point, dtype=np.float64)
    idx = np.floor((p - spec.lower) / np.asarray(spec.voxel_size))
    out = []
    for i, n in zip(idx, spec.dims):
        if not np.isfinite(i) or i < 0 or i >= n:
            return None
        out.append(int(i))
    return tuple(out)


def voxel_indices(spec: GridSpec, points) -> tuple[np.ndarray, np.ndarray]:
    """Vectorised ``voxel_index``.

    Returns ``(ijk, valid)``: an ``(N, 3)`` int64 array and a boolean mask of
    points that fall inside the grid. Rows where ``valid`` is False are garbage.
    """
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    with np.errstate(invalid="ignore"):
        f = np.floor((pts - spec.lower) / np.asarray(spec.voxel_size))
        valid = np.all(np.isfinite(f), axis=1)
        valid &= np.all((f >= 0) & (f < np.asarray(spec.dims)), axis=1)
    ijk = np.where(valid[:, None], f, 0).astype(np.int64)
    return ijk, valid


def voxel_center(spec: GridSpec, ijk) -> np.ndarray:
    return spec.lower + (np.asarray(ijk, dtype=np.float64) + 0.5) * np.asarray(spec.voxel_size)


def flat_index(spec: GridSpec, ijk) -> np.ndarray:
    """x-major flattening: ``(i * W + j) * D + k``."""
    ijk = np.asarray(ijk, dtype=np.int64)
    _, w, d = spec.dims
    return (ijk[..., 0] * w + ijk[..., 1]) * d + ijk[..., 2]


def unflatten_index(spec: GridSpec, flat) -> np.ndarray:
    return np.stack(np.unravel_index(np.asarray(flat, dtype=np.int64), spec.dims), axis=-1)


@dataclass(frozen=True, eq=False)
class SemanticVoxelGrid:
    spec: GridSpec
    labels: np.ndarray
    n_cls: int

    def __post_init__(self):
        labels = np.ascontiguousarray(np.asarray(self.labels).reshape(-1))
        if labels.size != self.spec.n_voxels:
            raise ConfigError(f"label count {labels.size} != grid size {self.spec.n_voxels}")
        if labels.dtype != np.uint16:
            if labels.size and (labels.min() < 0 or labels.max() > IGNORE_ID):
                raise ConfigError("labels must fit in uint16")
            labels = labels.astype(np.uint16)
        n_cls = int(self.n_cls)
        if not 0 <= n_cls < IGNORE_ID:
            raise ConfigError(f"n_cls out of range: {n_cls}")
        bad = (labels > n_cls) & (labels != IGNORE_ID)
        if bad.any():
            first = int(np.flatnonzero(bad)[0])
            raise ConfigError(f"label {int(labels[first])} at voxel {first} is not a class, FREE_ID or IGNORE_ID")
        labels.setflags(write=False)
        object.__setattr__(self, "labels", labels)
        object.__setattr__(self, "n_cls", n_cls)

    @property
    def free_id(self) -> int:
        return self.n_cls

    @classmethod
    def filled(cls, spec: GridSpec, n_cls: int, value: int) -> "SemanticVoxelGrid":
        return cls(spec, np.full(spec.n_voxels, value, dtype=np.uint16), n_cls)

    def volume(self) -> np.ndarray:
        """Read-only ``(H, W, D)`` view of the labels."""
        return self.labels.reshape(self.spec.dims)

    def __eq__(self, other):
        if not isinstance(other, SemanticVoxelGrid):
            return NotImplemented
        return (
            self.spec == other.spec
            and self.n_cls == other.n_cls
            and np.array_equal(self.labels, other.labels)
        )

    __hash__ = None


def grid_to_bytes(grid: SemanticVoxelGrid) -> bytes:
    header = _AGOV_HEADER.pack(
        AGOV_MAGIC, AGOV_VERSION, *grid.spec.dims, *grid.spec.origin, *grid.spec.voxel_size, grid.n_cls
    )
    return header + grid.labels.astype("<u2").tobytes()


def grid_from_bytes(buf: bytes) -> SemanticVoxelGrid:
    if len(buf) < _AGOV_HEADER.size:
        raise FormatError(f"AGOV header truncated: {len(buf)} of {_AGOV_HEADER.size} bytes", len(buf))
    magic, version, h, w, d, ox, oy, oz, sx, sy, sz, n_cls = _AGOV_HEADER.unpack_from(buf, 0)
    if magic != AGOV_MAGIC:
        raise FormatError(f"bad magic {magic!r}, expected {AGOV_MAGIC!r}", 0)
    if version != AGOV_VERSION:
        raise FormatError(f"unsupported AGOV version {version}", 4)
    if min(h, w, d) < 1:
        raise FormatError(f"invalid dims {(h, w, d)}", 8)
    n = h * w * d
    expected = _AGOV_HEADER.size + 2 * n
    if len(buf) != expected:
        raise FormatError(f"label payload has {len(buf) - _AGOV_HEADER.size} bytes, expected {2 * n}", min(len(buf), expected))
    try:
        spec = GridSpec((ox, oy, oz), (sx, sy, sz), (h, w, d))
    except ConfigError as exc:
        raise FormatError(str(exc), 20) from exc
    labels = np.frombuffer(buf, dtype="<u2", count=n, offset=_AGOV_HEADER.size).astype(np.uint16)
    try:
        return SemanticVoxelGrid(spec, labels, n_cls)
    except ConfigError as exc:
        raise FormatError(str(exc), _AGOV_HEADER.size) from exc


def write_grid(grid: SemanticVoxelGrid, path) -> None:
    Path(path).write_bytes(grid_to_bytes(grid))


def read_grid(path) -> SemanticVoxelGrid:
    return grid_from_bytes(Path(path).read_bytes())


@dataclass(frozen=True)
class LabelSpace:
    classes: tuple[str, ...]
    subclass_prompts: dict[int, tuple[str, ...]] = field(default_factory=dict)
    supercategory_map: dict[str, tuple[int, ...]] = field(default_factory=dict)

    def __post_init__(self):
        classes = tuple(str(c) for c in self.classes)
        if not classes:
            raise ConfigError("label space needs at least one class")
        if len(set(classes)) != len(classes):
            dup = sorted({c for c in classes if classes.count(c) > 1})
            raise ConfigError(f"duplicate class names: {dup}")
        prompts = {}
        for k in range(len(classes)):
            p = self.subclass_prompts.get(k)
            if p is None:
                p = (classes[k],)
            p = tuple(str(x) for x in p)
            if not p or any(not s.strip() for s in p):
                raise ConfigError(f"class {classes[k]!r} has an empty prompt list")
            prompts[k] = p
        extra = set(self.subclass_prompts) - set(range(len(classes)))
        if extra:
            raise ConfigError(f"prompts given for unknown class indices {sorted(extra)}")
        seen: dict[int, str] = {}
        supers = {}
        for name, members in self.supercategory_map.items():
            members = tuple(int(m) for m in members)
            for m in members:
                if not 0 <= m < len(classes):
                    raise ConfigError(f"supercategory {name!r} references class index {m}")
                if m in seen:
                    raise ConfigError(f"class {classes[m]!r} is in supercategories {seen[m]!r} and {name!r}")
                seen[m] = name
            supers[str(name)] = members
        object.__setattr__(self, "classes", classes)
        object.__setattr__(self, "subclass_prompts", prompts)
        object.__setattr__(self, "supercategory_map", supers)

    @property
    def n_cls(self) -> int:
        return len(self.classes)

    @property
    def free_id(self) -> int:
        return self.n_cls

    def index(self, name: str) -> int:
        try:
            return self.classes.index(name)
        except ValueError:
            raise ConfigError(f"unknown class {name!r}") from None

    def to_dict(self) -> dict:
        return {
            "classes": list(self.classes),
            "subclass_prompts": {str(k): list(v) for k, v in self.subclass_prompts.items()},
            "supercategories": {k: [self.classes[i] for i in v] for k, v in self.supercategory_map.items()},
        }

    @classmethod
    def from_dict(cls, d: dict) -> "LabelSpace":
        if "classes" not in d:
            raise ConfigError("label space JSON lacks 'classes'")
        classes = list(d["classes"])

        def resolve(key):
            if isinstance(key, int) or (isinstance(key, str) and key.isdigit()):
                return int(key)
            if key in classes:
                return classes.index(key)
            raise ConfigError(f"unknown class reference {key!r}")

        prompts = {resolve(k): tuple(v) for k, v in (d.get("subclass_prompts") or {}).items()}
        supers = {
            name: tuple(resolve(m) for m in members)
            for name, members in (d.get("supercategories") or {}).items()
        }
        return cls(tuple(classes), prompts, supers)


def read_label_space(path) -> LabelSpace:
    try:
        data = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path}: invalid JSON: {exc.msg}", exc.pos) from exc
    return LabelSpace.from_dict(data)


def write_label_space(space: LabelSpace, path) -> None:
    Path(path).write_text(json.dumps(space.to_dict(), indent=2) + "\n", encoding="utf-8")


# Occ3D-nuScenes classes with the subclass prompts used for self-supervised training.
OCC3D_SUBCLASSES: dict[str, tuple[str, ...]] = {
    "others": (
        "animal", "skateboard", "segway", "scooter", "stroller", "wheelchair", "trash bag", "dolley",
        "wheel barrow", "trash bin", "shopping cart", "bicycle rack", "ambulance", "police vehicle", "cyclist",
    ),
    "barrier": ("barrier",),
    "bicycle": ("bicycle",),
    "bus": ("bendy bus", "rigid bus"),
    "car": ("car", "van", "suv"),
    "construction vehicle": ("construction vehicle",),
    "motorcycle": ("motorcycle",),
    "pedestrian": ("adult pedestrian", "child pedestrian", "worker", "police officer"),
    "traffic cone": ("traffic cone",),
    "trailer": ("trailer",),
    "truck": ("truck",),
    "driveable surface": ("road",),
    "other flat": ("traffic island", "traffic delimiter", "rail track", "lake", "river"),
    "sidewalk": ("sidewalk",),
    "terrain": ("lawn",),
    "manmade": ("building", "sign", "pole", "traffic light"),
    "vegetation": ("tree", "bush"),
}

OPEN_WORLD_SUPERCATEGORIES: dict[str, tuple[str, ...]] = {
    "vehicle": ("car", "bus", "construction vehicle", "trailer", "truck"),
    "cycle": ("bicycle", "motorcycle"),
}

OPEN_WORLD_PRETRAIN_KNOWN = ("pedestrian", "driveable surface", "sidewalk", "vehicle", "cycle")

# dropped from every open-world stage as semantically ambiguous
OPEN_WORLD_EXCLUDED = ("others", "other flat")


def occ3d_label_space(with_subclasses: bool = True) -> LabelSpace:
    classes = tuple(OCC3D_SUBCLASSES)
    prompts = {i: OCC3D_SUBCLASSES[c] if with_subclasses else (c,) for i, c in enumerate(classes)}
    supers = {k: tuple(classes.index(m) for m in v) for k, v in OPEN_WORLD_SUPERCATEGORIES.items()}
    return LabelSpace(classes, prompts, supers)


def open_world_label_space() -> LabelSpace:
    """Occ3D classes minus the ambiguous ones, one prompt per class (its own name)."""
    classes = tuple(c for c in OCC3D_SUBCLASSES if c not in OPEN_WORLD_EXCLUDED)
    supers = {k: tuple(classes.index(m) for m in v) for k, v in OPEN_WORLD_SUPERCATEGORIES.items()}
    return LabelSpace(classes, {i: (c,) for i, c in enumerate(classes)}, supers)
