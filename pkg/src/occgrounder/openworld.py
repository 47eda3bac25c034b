"""Open-world identifier: fuse grounding and adapted predictions per voxel."""

from __future__ import annotations

import csv
import enum
import io
from dataclasses import dataclass

import numpy as np

from .errors import ShapeError
from .grounding import SUBCLASS_MAX, TokenGroups, semantic_logits, similarity_scores
from .voxelcore import GridSpec, SemanticVoxelGrid


class Criterion(str, enum.Enum):
    MIN_ENTROPY = "min-entropy"
    MAX_CONFIDENCE = "max-confidence"
    GROUNDING_ONLY = "grounding-only"


# closed-world prediction always trusts the grounding stream
CLOSED_WORLD = Criterion.GROUNDING_ONLY


def softmax_probs(s) -> np.ndarray:
    s = np.asarray(s, dtype=np.float64)
    z = np.exp(s - s.max(axis=-1, keepdims=True))
    return z / z.sum(axis=-1, keepdims=True)


def entropy(p) -> np.ndarray:
    """Shannon entropy in nats along the last axis, with ``0 ln 0 = 0``."""
    p = np.asarray(p, dtype=np.float64)
    logp = np.log(np.where(p > 0, p, 1.0))
    return -np.sum(p * logp, axis=-1)


def select(p, p_adapted, criterion=Criterion.MIN_ENTROPY) -> tuple[np.ndarray, np.ndarray]:
    """Pick per voxel between the grounding and adapted distributions.

    Returns ``(P_final, c)`` where ``c`` is 1 wherever the grounding
    distribution was kept. Ties favour the grounding stream.
    """
    criterion = Criterion(criterion)
    p = np.asarray(p, dtype=np.float64)
    if criterion is Criterion.GROUNDING_ONLY:
        return p.copy(), np.ones(p.shape[:-1], dtype=np.int8)
    q = np.asarray(p_adapted, dtype=np.float64)
    if p.shape != q.shape:
        raise ShapeError(f"distribution shapes differ: {p.shape} vs {q.shape}")
    if criterion is Criterion.MIN_ENTROPY:
        keep = entropy(p) <= entropy(q)
    else:
        keep = p.max(axis=-1) >= q.max(axis=-1)
    return np.where(keep[..., None], p, q), keep.astype(np.int8)


def query_scores(emb, text_emb, free_emb, groups: TokenGroups, mode: str = SUBCLASS_MAX) -> np.ndarray:
    """Semantic logits of ``emb`` against ``[query text; free]`` (no noise rows at inference)."""
    if groups.n_noise:
        groups = groups.with_noise(0)
    cat = np.vstack([np.asarray(text_emb, dtype=np.float64), np.asarray(free_emb, dtype=np.float64).reshape(1, -1)])
    return semantic_logits(similarity_scores(emb, cat), groups, mode)


@dataclass
class Inference:
    labels: np.ndarray  # (V,) class ids, n_cls for free
    indicator: np.ndarray  # (V,) int8
    p: np.ndarray
    p_adapted: np.ndarray | None
    p_final: np.ndarray

    def grid(self, spec: GridSpec) -> SemanticVoxelGrid:
        return SemanticVoxelGrid(spec, self.labels.astype(np.uint16), self.p.shape[1] - 1)


def infer_occupancy(voxel_emb, adapted_emb, text_emb, free_emb, groups: TokenGroups, criterion=Criterion.MIN_ENTROPY, mode: str = SUBCLASS_MAX) -> Inference:
    """Labels for every voxel; the free column maps to label ``n_cls``.

    With ``GROUNDING_ONLY`` the adapted embeddings are never read.
    """
    criterion = Criterion(criterion)
    p = softmax_probs(query_scores(voxel_emb, text_emb, free_emb, groups, mode))
    q = None
    if criterion is not Criterion.GROUNDING_ONLY:
        if adapted_emb is None:
            raise ShapeError(f"criterion {criterion.value} needs adapted embeddings")
        q = softmax_probs(query_scores(adapted_emb, text_emb, free_emb, groups, mode))
    final, c = select(p, q, criterion)
    # argmax returns the first maximum, i.e. the lowest class id
    return Inference(np.argmax(final, axis=1), c, p, q, final)


def class_entropy_report(p, p_adapted, labels, class_names) -> list[dict]:
    """Mean entropy of both streams over the voxels predicted as each class.

    ``class_names`` covers every column (include ``"free"`` last if desired).
    Classes with no predicted voxel report ``None``.
    """
    hp = entropy(p)
    hq = entropy(p_adapted)
    labels = np.asarray(labels).reshape(-1)
    rows = []
    for k, name in enumerate(class_names):
        sel = labels == k
        n = int(sel.sum())
        rows.append(
            {
                "class": name,
                "voxels": n,
                "grounding_entropy": float(hp[sel].mean()) if n else None,
                "adapted_entropy": float(hq[sel].mean()) if n else None,
            }
        )
    return rows


def entropy_report_csv(rows: list[dict]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["class", "voxels", "grounding_entropy", "adapted_entropy"])
    for r in rows:
        fmt = lambda x: "" if x is None else f"{x:.9f}"  # noqa: E731
        writer.writerow([r["class"], r["voxels"], fmt(r["grounding_entropy"]), fmt(r["adapted_entropy"])])
    return buf.getvalue()
