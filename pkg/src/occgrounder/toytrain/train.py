"""Gradient-descent toy trainer over a learnable per-voxel embedding table."""

from __future__ import annotations

import csv
import enum
import io
from dataclasses import dataclass, field
from importlib import resources

import numpy as np

from ..benchmark import iou_report
from ..errors import ConfigError, DivergenceError
from ..grounding import (
    TOKEN_MEAN,
    AdapterWeights,
    LossWeights,
    TokenGroups,
    TotalLoss,
    adapter_backward,
    adapter_forward,
    alignment_loss,
    ce_loss,
    lovasz_softmax_loss,
    occupancy_loss,
    prompt_tokens,
    semantic_logits,
    semantic_logits_backward,
    similarity_scores,
    token_groups,
    total_loss,
)
from ..voxelcore import IGNORE_ID, GridSpec, LabelSpace, SemanticVoxelGrid
from .scene import phrase_embedding

TRACE_COLUMNS = ("step", "L_ce", "L_lovasz", "L_occ", "L_align", "train_mIoU")


class Paradigm(str, enum.Enum):
    ALIGN_ONLY = "align-only"
    GROUNDING_ONLY = "grounding-only"
    GROUNDING_PLUS_ALIGN_SHARED = "grounding-plus-align-shared"
    ADAPTIVE = "adaptive"


def load_noise_words() -> list[str]:
    text = resources.files("occgrounder").joinpath("data/noise_words.txt").read_text(encoding="utf-8")
    return [w.strip() for w in text.splitlines() if w.strip() and not w.startswith("#")]


@dataclass
class ToyProblem:
    spec: GridSpec
    label_space: LabelSpace
    targets: SemanticVoxelGrid  # pseudo-labels
    image_emb: np.ndarray  # (V, C)
    visible: np.ndarray  # (V,) bool
    text: np.ndarray  # (N_text, C), rows in token order
    free: np.ndarray  # (C,)
    groups: TokenGroups  # no noise rows

    @property
    def dim(self) -> int:
        return self.text.shape[1]


TOY_SPACE = LabelSpace(
    ("driveable surface", "car", "pedestrian"),
    {1: ("car", "sedan"), 2: ("pedestrian", "person walking")},
)


def _toy_labels(spec: GridSpec, n_cls: int) -> np.ndarray:
    # bottom layer is road with one car, the top layer a pedestrian, a car roof and free space
    lab = np.full(spec.dims, n_cls, dtype=np.uint16)
    lab[:, :, 0] = 0
    lab[2:4, 2:4, 0] = 1
    lab[2:4, 2:4, 1] = 1
    lab[0, 0, 1] = 2
    lab[3, 0, 1] = IGNORE_ID
    return lab.reshape(-1)


def make_toy_problem(seed: int = 0, labels=None, dim: int = 16, label_space: LabelSpace | None = None, spec: GridSpec | None = None) -> ToyProblem:
    """The 4x4x2 fixture. Every class (and free) has a distinct prototype, so it is linearly separable."""
    rng = np.random.default_rng(seed)
    space = label_space or TOY_SPACE
    spec = spec or GridSpec((0.0, 0.0, 0.0), (1.0, 1.0, 1.0), (4, 4, 2))
    n_cls = space.n_cls
    lab = _toy_labels(spec, n_cls) if labels is None else np.asarray(labels, dtype=np.uint16).reshape(-1)
    targets = SemanticVoxelGrid(spec, lab, n_cls)
    text = np.stack([phrase_embedding(t, dim) for t in prompt_tokens(space)])
    free = phrase_embedding("free", dim)
    protos = rng.standard_normal((n_cls + 1, dim))
    protos /= np.linalg.norm(protos, axis=1, keepdims=True)
    valid = lab != IGNORE_ID
    image = np.zeros((spec.n_voxels, dim))
    image[valid] = protos[lab[valid]] + 0.05 * rng.standard_normal((int(valid.sum()), dim))
    visible = valid & (lab != n_cls)
    return ToyProblem(spec, space, targets, image, visible, text, free, token_groups(space))


@dataclass
class ToyModel:
    table: np.ndarray  # (V, C) learnable voxel embeddings
    adapter: AdapterWeights
    text: np.ndarray
    free: np.ndarray
    groups: TokenGroups

    @classmethod
    def init(cls, problem: ToyProblem, seed: int, hidden: int | None = None, scale: float = 0.1) -> "ToyModel":
        rng = np.random.default_rng(seed)
        dim = problem.dim
        table = scale * rng.standard_normal((problem.spec.n_voxels, dim))
        adapter = AdapterWeights.init(dim, hidden or 2 * dim, rng)
        return cls(table, adapter, problem.text.copy(), problem.free.copy(), problem.groups)

    def copy(self) -> "ToyModel":
        return ToyModel(self.table.copy(), self.adapter.copy(), self.text, self.free, self.groups)


@dataclass
class TrainConfig:
    steps: int = 500
    lr: float = 1.0
    seed: int = 0
    paradigm: Paradigm = Paradigm.ADAPTIVE
    n_noise: int = 10
    hidden: int | None = None
    weights: LossWeights = field(default_factory=LossWeights)
    halve_on_increase: bool = False
    resample_noise: bool = True

    def __post_init__(self):
        try:
            self.paradigm = Paradigm(self.paradigm)
        except ValueError:
            raise ConfigError(f"unknown paradigm {self.paradigm!r}; expected one of {[p.value for p in Paradigm]}") from None
        if self.steps < 1:
            raise ConfigError("steps must be at least 1")
        if not self.lr >= 0:
            raise ConfigError("learning rate must be non-negative")
        if self.n_noise < 0:
            raise ConfigError("n_noise must be non-negative")


@dataclass
class StepResult:
    loss: TotalLoss
    g_table: np.ndarray
    g_adapter: AdapterWeights | None
    s_sem: np.ndarray


def evaluate_losses(model: ToyModel, problem: ToyProblem, paradigm, noise_emb=None, weights: LossWeights = LossWeights()) -> StepResult:
    """All loss terms that ``paradigm`` trains, with gradients for the table and adapter."""
    paradigm = Paradigm(paradigm)
    dim = model.table.shape[1]
    noise = np.zeros((0, dim)) if noise_emb is None else np.asarray(noise_emb, dtype=np.float64).reshape(-1, dim)
    groups = model.groups.with_noise(noise.shape[0])
    n_cls = groups.n_cls
    g_table = np.zeros_like(model.table)
    ce = lov = occ = align = None
    # scores are always computed so the trace can report training mIoU
    cat = np.vstack([model.text, noise, model.free[None]])
    s = similarity_scores(model.table, cat)
    s_sem = semantic_logits(s, groups, TOKEN_MEAN)
    if paradigm is not Paradigm.ALIGN_ONLY:
        ce = ce_loss(s_sem, problem.targets, n_cls)
        lov = lovasz_softmax_loss(s_sem, problem.targets, n_cls)
        occ = occupancy_loss(s_sem, problem.targets, n_cls)
    g_adapter = None
    adapted = None
    if paradigm is Paradigm.ADAPTIVE:
        adapted = adapter_forward(model.adapter, model.table)
        align = alignment_loss(adapted, problem.image_emb, problem.visible)[:2]
    elif paradigm is not Paradigm.GROUNDING_ONLY:
        align = alignment_loss(model.table, problem.image_emb, problem.visible)[:2]
    res = total_loss(ce, lov, occ, align, weights)
    if not np.isfinite(res.total):
        # diverged; the caller reports it, gradients would only overflow further
        return StepResult(res, g_table, None, s_sem)
    if res.grad_sem is not None:
        g_table += semantic_logits_backward(res.grad_sem, s, groups, TOKEN_MEAN) @ cat
    if res.grad_align is not None:
        if paradigm is Paradigm.ADAPTIVE:
            g_adapter, g_x = adapter_backward(model.adapter, model.table, res.grad_align)
            g_table += g_x
        else:
            g_table += res.grad_align
    return StepResult(res, g_table, g_adapter, s_sem)


def train_miou(s_sem, problem: ToyProblem) -> float:
    """mIoU of the grounding argmax over ``[classes; free]`` against the targets, semantic classes only."""
    n_cls = problem.label_space.n_cls
    sub = np.concatenate([s_sem[:, :n_cls], s_sem[:, -1:]], axis=1)
    pred = SemanticVoxelGrid(problem.spec, np.argmax(sub, axis=1).astype(np.uint16), n_cls)
    m = iou_report(pred, problem.targets, class_set=range(n_cls)).miou
    return float("nan") if m is None else m


def _noise_bank(dim: int) -> np.ndarray:
    return np.stack([phrase_embedding(w, dim) for w in load_noise_words()])


def train(model: ToyModel, problem: ToyProblem, cfg: TrainConfig) -> tuple[ToyModel, list[dict]]:
    """Plain gradient descent; returns the trained copy of ``model`` and one trace row per step.

    Row ``t`` reports the losses at the parameters entering step ``t``. With
    ``halve_on_increase`` a step that raises the total loss is rejected and the
    learning rate halved, so the recorded total never increases.
    """
    rng = np.random.default_rng(cfg.seed)
    model = model.copy()
    bank = _noise_bank(problem.dim) if cfg.n_noise else None
    if bank is not None and cfg.n_noise > bank.shape[0]:
        raise ConfigError(f"n_noise={cfg.n_noise} exceeds the {bank.shape[0]} bundled noise words")

    def draw():
        if bank is None:
            return None
        return bank[np.sort(rng.choice(bank.shape[0], cfg.n_noise, replace=False))]

    noise = draw()
    lr = cfg.lr
    trace = []
    cur = evaluate_losses(model, problem, cfg.paradigm, noise, cfg.weights)
    for step in range(cfg.steps):
        if not np.isfinite(cur.loss.total):
            raise DivergenceError(step)
        t = cur.loss.terms
        trace.append(
            {
                "step": step,
                "L_ce": t["ce"],
                "L_lovasz": t["lovasz"],
                "L_occ": t["occ"],
                "L_align": t["align"],
                "train_mIoU": train_miou(cur.s_sem, problem),
                "total": cur.loss.total,
            }
        )
        while True:
            cand = model.copy()
            with np.errstate(over="ignore", invalid="ignore"):
                cand.table = model.table - lr * cur.g_table
                if cur.g_adapter is not None:
                    moved = {k: v - lr * getattr(cur.g_adapter, k) for k, v in model.adapter.arrays().items()}
            if not np.all(np.isfinite(cand.table)) or (
                cur.g_adapter is not None and not all(np.all(np.isfinite(v)) for v in moved.values())
            ):
                if not cfg.halve_on_increase or lr < 1e-12:
                    raise DivergenceError(step + 1)
                lr *= 0.5
                continue
            if cur.g_adapter is not None:
                cand.adapter = AdapterWeights(**moved)
            nxt_noise = draw() if cfg.resample_noise else noise
            with np.errstate(over="ignore", invalid="ignore"):
                nxt = evaluate_losses(cand, problem, cfg.paradigm, nxt_noise, cfg.weights)
            if not cfg.halve_on_increase or nxt.loss.total <= cur.loss.total or lr < 1e-12:
                break
            lr *= 0.5
        if not np.isfinite(nxt.loss.total):
            raise DivergenceError(step + 1)
        if cfg.halve_on_increase and nxt.loss.total > cur.loss.total:
            continue  # step size exhausted; stay put
        model, cur, noise = cand, nxt, nxt_noise
    return model, trace


def trace_csv(trace: list[dict]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(TRACE_COLUMNS)
    for row in trace:
        w.writerow([row["step"]] + [repr(float(row[k])) for k in TRACE_COLUMNS[1:]])
    return buf.getvalue()
