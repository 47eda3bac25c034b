"""IoU/mIoU metrics and the three-stage open-world protocol."""

from __future__ import annotations

import enum
import json
from collections.abc import Iterable, Mapping
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, FeasibilityError
from .voxelcore import (
    IGNORE_ID,
    OPEN_WORLD_PRETRAIN_KNOWN,
    OPEN_WORLD_SUPERCATEGORIES,
    LabelSpace,
    SemanticVoxelGrid,
    open_world_label_space,
)


@dataclass
class MetricReport:
    class_names: list[str]
    iou: dict[str, float | None]
    tp: dict[str, int]
    fp: dict[str, int]
    fn: dict[str, int]
    miou: float | None
    known_miou: float | None = None
    unknown_miou: float | None = None
    miou_star: float | None = None
    n_evaluated: int = 0
    known: list[str] = field(default_factory=list)
    unknown: list[str] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "classes": self.class_names,
            "iou": self.iou,
            "tp": self.tp,
            "fp": self.fp,
            "fn": self.fn,
            "miou": self.miou,
            "known_miou": self.known_miou,
            "unknown_miou": self.unknown_miou,
            "miou_star": self.miou_star,
            "n_evaluated": self.n_evaluated,
            "known": self.known,
            "unknown": self.unknown,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    def to_table(self) -> str:
        width = max([len(n) for n in self.class_names] + [12])
        pct = lambda x: "     -" if x is None else f"{100 * x:6.2f}"  # noqa: E731
        lines = [f"{'class':<{width}}  {'IoU':>6}  {'TP':>9}  {'FP':>9}  {'FN':>9}"]
        for n in self.class_names:
            lines.append(f"{n:<{width}}  {pct(self.iou[n])}  {self.tp[n]:>9}  {self.fp[n]:>9}  {self.fn[n]:>9}")
        lines.append(f"{'mIoU':<{width}}  {pct(self.miou)}")
        if self.known:
            lines.append(f"{'known mIoU':<{width}}  {pct(self.known_miou)}")
        if self.unknown:
            lines.append(f"{'unknown mIoU':<{width}}  {pct(self.unknown_miou)}")
        if self.miou_star is not None:
            lines.append(f"{'mIoU*':<{width}}  {pct(self.miou_star)}")
        return "\n".join(lines) + "\n"


def _mean(values) -> float | None:
    vals = [v for v in values if v is not None]
    return float(np.mean(vals)) if vals else None


def iou_report(
    pred: SemanticVoxelGrid,
    gt: SemanticVoxelGrid,
    eval_mask=None,
    class_set: Iterable[int] | None = None,
    class_names: list[str] | None = None,
    known: Iterable[int] = (),
    unknown: Iterable[int] = (),
    star_exclude: Iterable[int] = (),
) -> MetricReport:
    """Per-class IoU over voxels whose ground truth is not IGNORE (and inside ``eval_mask``).

    Classes absent from both prediction and ground truth get ``None`` and are
    left out of every mean.
    """
    if pred.spec != gt.spec:
        raise ConfigError("prediction and ground truth grids differ in spec")
    if pred.n_cls != gt.n_cls:
        raise ConfigError(f"prediction has {pred.n_cls} classes, ground truth {gt.n_cls}")
    classes = list(range(gt.n_cls)) if class_set is None else [int(c) for c in class_set]
    names = class_names or [str(c) for c in range(gt.n_cls + 1)]
    evaluated = gt.labels != IGNORE_ID
    if eval_mask is not None:
        m = np.asarray(eval_mask, dtype=bool).reshape(-1)
        if m.size != gt.labels.size:
            raise ConfigError("evaluation mask size does not match the grid")
        evaluated &= m
    p = pred.labels[evaluated].astype(np.int64)
    g = gt.labels[evaluated].astype(np.int64)
    # joint histogram over label values 0..n_cls (IGNORE predictions folded into a spare bin)
    nb = gt.n_cls + 2
    p = np.where(p == IGNORE_ID, nb - 1, p)
    conf = np.bincount(g * nb + p, minlength=nb * nb).reshape(nb, nb)
    iou, tp, fp, fn = {}, {}, {}, {}
    for c in classes:
        name = names[c]
        t = int(conf[c, c])
        f_p = int(conf[:, c].sum() - t)
        f_n = int(conf[c, :].sum() - t)
        tp[name], fp[name], fn[name] = t, f_p, f_n
        denom = t + f_p + f_n
        iou[name] = t / denom if denom else None
    known = [names[c] for c in known if c in classes]
    unknown = [names[c] for c in unknown if c in classes]
    star = set(star_exclude)
    return MetricReport(
        class_names=[names[c] for c in classes],
        iou=iou,
        tp=tp,
        fp=fp,
        fn=fn,
        miou=_mean(iou[names[c]] for c in classes),
        known_miou=_mean(iou[n] for n in known) if known else None,
        unknown_miou=_mean(iou[n] for n in unknown) if unknown else None,
        miou_star=_mean(iou[names[c]] for c in classes if c not in star) if star else None,
        n_evaluated=int(evaluated.sum()),
        known=known,
        unknown=unknown,
    )


def remap(grid: SemanticVoxelGrid, mapping, n_cls_out: int | None = None, unmapped: str = "pass") -> SemanticVoxelGrid:
    """Substitute semantic labels; FREE maps to the output FREE id and IGNORE stays.

    ``mapping`` is a dict or an iterable of ``(src, dst)`` pairs. Unmapped labels
    pass through (``unmapped="pass"``) or become IGNORE (``unmapped="ignore"``).
    """
    pairs = mapping.items() if isinstance(mapping, Mapping) else mapping
    table: dict[int, int] = {}
    for src, dst in pairs:
        src, dst = int(src), int(dst)
        if table.get(src, dst) != dst:
            raise ConfigError(f"label {src} is mapped to both {table[src]} and {dst}")
        table[src] = dst
    n_out = grid.n_cls if n_cls_out is None else int(n_cls_out)
    if unmapped not in ("pass", "ignore"):
        raise ConfigError(f"unmapped must be 'pass' or 'ignore', got {unmapped!r}")
    for c, d in table.items():
        if not 0 <= c < grid.n_cls:
            raise ConfigError(f"mapping source {c} is not a class of the grid")
        if not 0 <= d < n_out:
            raise ConfigError(f"mapping target {d} is outside the {n_out}-class output space")
    lut = np.full(IGNORE_ID + 1, IGNORE_ID, dtype=np.uint16)
    for c in range(grid.n_cls):
        if c in table:
            lut[c] = table[c]
        elif unmapped == "pass":
            lut[c] = c
    lut[grid.n_cls] = n_out
    out = lut[grid.labels]
    return SemanticVoxelGrid(grid.spec, out, n_out)


def name_mapping(src: list[str], dst: list[str], supercategories: Mapping[str, Iterable[str]]) -> dict[int, int]:
    """Source class id -> destination id by name, routing supercategory members to their supercategory."""
    owner = {}
    for sup, members in supercategories.items():
        for m in members:
            if m in owner:
                raise ConfigError(f"class {m!r} belongs to supercategories {owner[m]!r} and {sup!r}")
            owner[m] = sup
    out = {}
    for i, name in enumerate(src):
        if name in dst:
            out[i] = dst.index(name)
        elif owner.get(name) in dst:
            out[i] = dst.index(owner[name])
    return out


# ---------------------------------------------------------------- few-shot sampling


def fewshot_sample(inventory, k: int, seed: int) -> tuple[list[int], dict[int, int]]:
    """Greedy seeded cover so that every class appears in at least ``k`` chosen samples.

    ``inventory[i]`` is the set of classes present in sample ``i``. Classes are
    handled from rarest to most frequent (ties by class id); for each, samples
    containing it are added in a seeded random order until its count reaches
    ``k``. Returns the chosen sample indices (in selection order) and the final
    per-class counts.
    """
    if k < 1:
        raise ConfigError("k must be >= 1")
    inv = [frozenset(int(c) for c in s) for s in inventory]
    classes = sorted(set().union(*inv)) if inv else []
    freq = {c: sum(c in s for s in inv) for c in classes}
    deficient = {c: n for c, n in freq.items() if n < k}
    if deficient:
        raise FeasibilityError(f"classes {sorted(deficient)} appear in fewer than {k} samples", deficient)
    rng = np.random.default_rng(seed)
    chosen: list[int] = []
    taken = np.zeros(len(inv), dtype=bool)
    counts = dict.fromkeys(classes, 0)
    for c in sorted(classes, key=lambda c: (freq[c], c)):
        if counts[c] >= k:
            continue
        candidates = np.array([i for i, s in enumerate(inv) if c in s and not taken[i]], dtype=np.int64)
        for i in candidates[rng.permutation(candidates.size)]:
            taken[i] = True
            chosen.append(int(i))
            for d in inv[i]:
                counts[d] += 1
            if counts[c] >= k:
                break
    return chosen, counts


def fewshot_repeats(inventory, k: int, seed: int, repeats: int) -> list[list[int]]:
    """Independent few-shot draws, one per repeat, seeded ``seed, seed+1, ...``."""
    return [fewshot_sample(inventory, k, seed + r)[0] for r in range(repeats)]


# ---------------------------------------------------------------- stages


class Stage(str, enum.Enum):
    PRETRAIN = "pretrain"
    ZERO_SHOT = "zero-shot"
    FEW_SHOT = "few-shot"


@dataclass(frozen=True)
class StagePlan:
    stage: Stage
    known: tuple[str, ...]
    unknown: tuple[str, ...]
    supercategory_map: dict[str, tuple[str, ...]] = field(default_factory=dict)
    k: int = 100
    repeats: int = 5

    def __post_init__(self):
        object.__setattr__(self, "stage", Stage(self.stage))
        object.__setattr__(self, "known", tuple(self.known))
        object.__setattr__(self, "unknown", tuple(self.unknown))
        object.__setattr__(self, "supercategory_map", {k: tuple(v) for k, v in self.supercategory_map.items()})
        if set(self.known) & set(self.unknown):
            raise ConfigError(f"classes both known and unknown: {sorted(set(self.known) & set(self.unknown))}")
        members = [m for v in self.supercategory_map.values() for m in v]
        if len(members) != len(set(members)):
            raise ConfigError("a fine class belongs to two supercategories")
        if set(members) & (set(self.known) | set(self.unknown)):
            raise ConfigError("supercategory members must not be listed as known/unknown themselves")
        if self.stage is Stage.FEW_SHOT and (self.k < 1 or self.repeats < 1):
            raise ConfigError("few-shot stage needs k >= 1 and repeats >= 1")

    def fine_known(self) -> list[str]:
        """Known classes that are not supercategories (keep their identity after splitting)."""
        return [c for c in self.known if c not in self.supercategory_map]

    def split_members(self) -> list[str]:
        return [m for c in self.known if c in self.supercategory_map for m in self.supercategory_map[c]]

    def class_names(self) -> list[str]:
        """Label space of predictions scored at this stage."""
        if self.stage is Stage.PRETRAIN:
            return list(self.known) + list(self.unknown)
        return self.fine_known() + self.split_members() + list(self.unknown)

    def known_names(self) -> list[str]:
        return list(self.known) if self.stage is Stage.PRETRAIN else self.fine_known()

    def unknown_names(self) -> list[str]:
        if self.stage is Stage.PRETRAIN:
            return list(self.unknown)
        return self.split_members() + list(self.unknown)

    def to_dict(self) -> dict:
        return {
            "stage": self.stage.value,
            "known": list(self.known),
            "unknown": list(self.unknown),
            "supercategories": {k: list(v) for k, v in self.supercategory_map.items()},
            "k": self.k,
            "repeats": self.repeats,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "StagePlan":
        try:
            return cls(
                Stage(d["stage"]),
                tuple(d["known"]),
                tuple(d.get("unknown", ())),
                {k: tuple(v) for k, v in (d.get("supercategories") or {}).items()},
                int(d.get("k", 100)),
                int(d.get("repeats", 5)),
            )
        except (KeyError, ValueError, TypeError) as exc:
            if isinstance(exc, ConfigError):
                raise
            raise ConfigError(f"invalid stage plan: {exc}") from exc


def open_world_plan(stage=Stage.PRETRAIN, k: int = 100, repeats: int = 5) -> StagePlan:
    """Default plan: five pretraining classes incl. the 'vehicle'/'cycle' supercategories."""
    space = open_world_label_space()
    members = {m for v in OPEN_WORLD_SUPERCATEGORIES.values() for m in v}
    unknown = tuple(c for c in space.classes if c not in OPEN_WORLD_PRETRAIN_KNOWN and c not in members)
    return StagePlan(Stage(stage), OPEN_WORLD_PRETRAIN_KNOWN, unknown, dict(OPEN_WORLD_SUPERCATEGORIES), k, repeats)


def stage_eval(plan: StagePlan, pred: SemanticVoxelGrid, gt: SemanticVoxelGrid, gt_space: LabelSpace, eval_mask=None) -> MetricReport:
    """Score a prediction made in ``plan.class_names()`` against fine-label ground truth.

    Ground-truth classes outside the stage label space become IGNORE. In the
    pretraining stage supercategory members are merged into their supercategory.
    """
    names = plan.class_names()
    missing = [
        c
        for c in list(plan.fine_known()) + list(plan.unknown) + [m for v in plan.supercategory_map.values() for m in v]
        if c not in gt_space.classes
    ]
    if missing:
        raise ConfigError(f"stage classes missing from the ground-truth label space: {missing}")
    if gt.n_cls != gt_space.n_cls:
        raise ConfigError(f"ground truth has {gt.n_cls} classes, label space {gt_space.n_cls}")
    if pred.n_cls != len(names):
        raise ConfigError(f"prediction has {pred.n_cls} classes, stage {plan.stage.value} expects {len(names)}")
    sup = plan.supercategory_map if plan.stage is Stage.PRETRAIN else {}
    gt_stage = remap(gt, name_mapping(list(gt_space.classes), names, sup), n_cls_out=len(names), unmapped="ignore")
    known = [names.index(n) for n in plan.known_names()]
    unknown = [names.index(n) for n in plan.unknown_names()]
    return iou_report(pred, gt_stage, eval_mask, range(len(names)), names + ["free"], known, unknown)
