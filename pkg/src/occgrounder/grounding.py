"""Grounding scores and losses with hand-written gradients.

Scores live in float64 regardless of the input precision. Column layout of the
semantic logits is always ``[classes (n_cls); noise (n_noise); free (1)]``; target
grids use ``0..n_cls-1`` for classes and ``n_cls`` for free, so the free label is
remapped to the last column.
"""

from __future__ import annotations

from dataclasses import dataclass, field, fields

import numpy as np

from .errors import ContractError, ShapeError
from .voxelcore import IGNORE_ID, LabelSpace, SemanticVoxelGrid

TOKEN_MEAN = "token-mean"
SUBCLASS_MAX = "subclass-max"
MODES = (TOKEN_MEAN, SUBCLASS_MAX)


# ---------------------------------------------------------------- token layout


@dataclass(frozen=True, eq=False)
class TokenGroups:
    """Which rows of ``[TEXT; NOISE; FREE]`` belong to which class.

    ``classes[k]`` lists one index array per subclass prompt of class ``k``.
    Each noise prompt and the free embedding are singleton groups.
    """

    classes: tuple[tuple[np.ndarray, ...], ...]
    noise: tuple[int, ...]
    free: int

    def __post_init__(self):
        cls = tuple(tuple(np.asarray(g, dtype=np.int64).reshape(-1) for g in groups) for groups in self.classes)
        object.__setattr__(self, "classes", cls)
        object.__setattr__(self, "noise", tuple(int(i) for i in self.noise))
        seen = []
        for k, groups in enumerate(cls):
            if not groups:
                raise ContractError(f"class {k} has no subclass groups")
            for g in groups:
                if g.size == 0:
                    raise ContractError(f"class {k} has an empty token group")
                seen.extend(g.tolist())
        seen.extend(self.noise)
        seen.append(int(self.free))
        if sorted(seen) != list(range(len(seen))):
            raise ContractError("token groups must be disjoint and cover rows 0..width-1")

    @property
    def n_cls(self) -> int:
        return len(self.classes)

    @property
    def n_noise(self) -> int:
        return len(self.noise)

    @property
    def width(self) -> int:
        return sum(g.size for groups in self.classes for g in groups) + self.n_noise + 1

    @property
    def n_text(self) -> int:
        return self.width - self.n_noise - 1

    @property
    def sem_width(self) -> int:
        return self.n_cls + self.n_noise + 1

    def with_noise(self, n_noise: int) -> "TokenGroups":
        """Same class layout with a different number of noise rows."""
        n_text = self.n_text
        return TokenGroups(self.classes, tuple(range(n_text, n_text + n_noise)), n_text + n_noise)

    @classmethod
    def from_token_counts(cls, counts: list[list[int]], n_noise: int = 0) -> "TokenGroups":
        """``counts[k][j]`` is the number of tokens of prompt ``j`` of class ``k``; rows are laid out in order."""
        row = 0
        classes = []
        for per_class in counts:
            groups = []
            for n in per_class:
                groups.append(np.arange(row, row + n))
                row += n
            classes.append(tuple(groups))
        return cls(tuple(classes), tuple(range(row, row + n_noise)), row + n_noise)

    @classmethod
    def one_per_class(cls, n_cls: int, n_noise: int = 0) -> "TokenGroups":
        return cls.from_token_counts([[1]] * n_cls, n_noise)


def tokenize(phrase: str) -> list[str]:
    return phrase.lower().split()


def token_groups(space: LabelSpace, n_noise: int = 0) -> TokenGroups:
    """Token rows for every prompt of ``space`` using whitespace tokenisation."""
    counts = [[len(tokenize(p)) for p in space.subclass_prompts[k]] for k in range(space.n_cls)]
    return TokenGroups.from_token_counts(counts, n_noise)


def prompt_tokens(space: LabelSpace) -> list[str]:
    """Token strings in the row order used by ``token_groups``."""
    return [t for k in range(space.n_cls) for p in space.subclass_prompts[k] for t in tokenize(p)]


# ---------------------------------------------------------------- scores


def similarity_scores(voxels, cat) -> np.ndarray:
    v = np.asarray(voxels, dtype=np.float64)
    c = np.asarray(cat, dtype=np.float64)
    if v.ndim != 2 or c.ndim != 2 or v.shape[1] != c.shape[1]:
        raise ShapeError(f"cannot score {v.shape} voxel embeddings against {c.shape} prompt embeddings")
    return v @ c.T


def _mean_matrix(groups: TokenGroups) -> np.ndarray:
    m = np.zeros((groups.width, groups.sem_width))
    for k, gs in enumerate(groups.classes):
        rows = np.concatenate(gs)
        m[rows, k] = 1.0 / rows.size
    for j, r in enumerate(groups.noise):
        m[r, groups.n_cls + j] = 1.0
    m[groups.free, -1] = 1.0
    return m


def _subclass_matrix(groups: TokenGroups):
    """Per-subclass token means plus the owning class of each subclass column."""
    subs = [(k, g) for k, gs in enumerate(groups.classes) for g in gs]
    m = np.zeros((groups.width, len(subs)))
    owner = np.empty(len(subs), dtype=np.int64)
    for j, (k, g) in enumerate(subs):
        m[g, j] = 1.0 / g.size
        owner[j] = k
    return m, owner


def _passthrough(s: np.ndarray, groups: TokenGroups) -> np.ndarray:
    return s[:, list(groups.noise) + [groups.free]]


def _check_width(s: np.ndarray, groups: TokenGroups) -> np.ndarray:
    s = np.asarray(s, dtype=np.float64)
    if s.ndim != 2 or s.shape[1] != groups.width:
        raise ShapeError(f"score width {s.shape[-1]} does not match token layout width {groups.width}")
    return s


def semantic_logits(s, groups: TokenGroups, mode: str = TOKEN_MEAN) -> np.ndarray:
    """Class logits from token scores; noise and free columns pass through."""
    s = _check_width(s, groups)
    if mode == TOKEN_MEAN:
        return s @ _mean_matrix(groups)
    if mode == SUBCLASS_MAX:
        m, owner = _subclass_matrix(groups)
        sub = s @ m
        out = np.empty((s.shape[0], groups.sem_width))
        for k in range(groups.n_cls):
            out[:, k] = sub[:, owner == k].max(axis=1)
        out[:, groups.n_cls :] = _passthrough(s, groups)
        return out
    raise ValueError(f"unknown mode {mode!r}; expected one of {MODES}")


def semantic_logits_backward(g_sem, s, groups: TokenGroups, mode: str = TOKEN_MEAN) -> np.ndarray:
    """Gradient w.r.t. the token scores; max ties route to the first subclass."""
    g_sem = np.asarray(g_sem, dtype=np.float64)
    if mode == TOKEN_MEAN:
        return g_sem @ _mean_matrix(groups).T
    if mode != SUBCLASS_MAX:
        raise ValueError(f"unknown mode {mode!r}")
    s = _check_width(s, groups)
    m, owner = _subclass_matrix(groups)
    sub = s @ m
    g_sub = np.zeros_like(sub)
    rows = np.arange(s.shape[0])
    for k in range(groups.n_cls):
        cols = np.flatnonzero(owner == k)
        win = cols[np.argmax(sub[:, cols], axis=1)]
        g_sub[rows, win] = g_sem[:, k]
    g = g_sub @ m.T
    g[:, list(groups.noise) + [groups.free]] += g_sem[:, groups.n_cls :]
    return g


def binary_scores(s_sem, n_cls: int) -> np.ndarray:
    """``[max over class columns, free column]``; noise columns are excluded from the max."""
    s_sem = np.asarray(s_sem, dtype=np.float64)
    if n_cls < 1 or s_sem.shape[1] < n_cls + 1:
        raise ShapeError(f"semantic logits of width {s_sem.shape[1]} cannot hold {n_cls} classes plus free")
    return np.stack([s_sem[:, :n_cls].max(axis=1), s_sem[:, -1]], axis=1)


# ---------------------------------------------------------------- losses


def _labels(targets) -> np.ndarray:
    if isinstance(targets, SemanticVoxelGrid):
        return targets.labels.astype(np.int64)
    return np.asarray(targets).astype(np.int64).reshape(-1)


def target_columns(targets, n_cls: int, width: int) -> np.ndarray:
    """Column of each target in the semantic logits, ``-1`` for ignored voxels."""
    t = _labels(targets)
    if n_cls + 1 > width:
        raise ShapeError(f"width {width} cannot hold {n_cls} classes plus free")
    bad = ((t < 0) | (t > n_cls)) & (t != IGNORE_ID)
    if bad.any():
        raise ContractError(
            f"target label {int(t[bad][0])} is neither a class (< {n_cls}), FREE ({n_cls}) nor IGNORE; "
            "noise columns are never targets"
        )
    cols = np.where(t == n_cls, width - 1, t)
    cols[t == IGNORE_ID] = -1
    return cols


def softmax(s) -> np.ndarray:
    s = np.asarray(s, dtype=np.float64)
    z = s - s.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def log_softmax(s) -> np.ndarray:
    s = np.asarray(s, dtype=np.float64)
    z = s - s.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def _softmax_backward(p: np.ndarray, g_p: np.ndarray) -> np.ndarray:
    return p * (g_p - np.sum(g_p * p, axis=1, keepdims=True))


def _check_rows(s: np.ndarray, cols: np.ndarray) -> None:
    if s.shape[0] != cols.shape[0]:
        raise ShapeError(f"{s.shape[0]} score rows for {cols.shape[0]} targets")


def ce_loss(s_sem, targets, n_cls: int) -> tuple[float, np.ndarray]:
    """Mean cross-entropy over non-ignored voxels; noise columns only enter the denominator."""
    s = np.asarray(s_sem, dtype=np.float64)
    cols = target_columns(targets, n_cls, s.shape[1])
    _check_rows(s, cols)
    grad = np.zeros_like(s)
    valid = np.flatnonzero(cols >= 0)
    if valid.size == 0:
        return 0.0, grad
    ls = log_softmax(s[valid])
    picked = ls[np.arange(valid.size), cols[valid]]
    loss = float(-picked.sum() / valid.size)
    g = np.exp(ls)
    g[np.arange(valid.size), cols[valid]] -= 1.0
    grad[valid] = g / valid.size
    return loss, grad


def lovasz_grad(fg_sorted: np.ndarray) -> np.ndarray:
    """Lovász-extension weights of the Jaccard loss for errors sorted in decreasing order."""
    gts = fg_sorted.sum()
    intersection = gts - np.cumsum(fg_sorted)
    union = gts + np.cumsum(1.0 - fg_sorted)
    jaccard = 1.0 - intersection / union
    jaccard[1:] = jaccard[1:] - jaccard[:-1]
    return jaccard


def lovasz_softmax_probs(probs, cols) -> tuple[float, np.ndarray]:
    """Lovász-softmax on probabilities over the classes present in ``cols``.

    ``cols`` holds the target column per row (``-1`` rows are ignored). Returns
    the loss and its gradient w.r.t. ``probs``, with the sort order held fixed.
    The loss uses the level-set form ``Σ (e_i - e_{i+1}) J_i`` so that all-zero
    and all-one error vectors evaluate exactly.
    """
    p = np.asarray(probs, dtype=np.float64)
    cols = np.asarray(cols, dtype=np.int64)
    grad = np.zeros_like(p)
    valid = np.flatnonzero(cols >= 0)
    present = np.unique(cols[valid])
    if present.size == 0:
        return 0.0, grad
    pv = p[valid]
    cv = cols[valid]
    losses = []
    for c in present:
        fg = (cv == c).astype(np.float64)
        errors = np.abs(fg - pv[:, c])
        order = np.argsort(-errors, kind="stable")
        e_sorted = errors[order]
        fg_sorted = fg[order]
        gts = fg_sorted.sum()
        jaccard = 1.0 - (gts - np.cumsum(fg_sorted)) / (gts + np.cumsum(1.0 - fg_sorted))
        drops = e_sorted - np.append(e_sorted[1:], 0.0)
        losses.append(float(np.dot(drops, jaccard)))
        w = np.empty_like(errors)
        w[order] = lovasz_grad(fg_sorted)
        # d|fg - p|/dp: -1 on foreground rows, +1 on background rows
        grad[valid, c] += w * np.where(fg > 0, -1.0, 1.0)
    grad /= present.size
    return float(np.mean(losses)), grad


def lovasz_softmax_loss(s_sem, targets, n_cls: int) -> tuple[float, np.ndarray]:
    s = np.asarray(s_sem, dtype=np.float64)
    cols = target_columns(targets, n_cls, s.shape[1])
    _check_rows(s, cols)
    p = softmax(s)
    loss, g_p = lovasz_softmax_probs(p, cols)
    return loss, _softmax_backward(p, g_p)


def occupancy_loss(s_sem, targets, n_cls: int) -> tuple[float, np.ndarray]:
    """Two-column cross-entropy: column 0 occupied (max over classes), column 1 free."""
    s = np.asarray(s_sem, dtype=np.float64)
    cols = target_columns(targets, n_cls, s.shape[1])
    _check_rows(s, cols)
    grad = np.zeros_like(s)
    valid = np.flatnonzero(cols >= 0)
    if valid.size == 0:
        return 0.0, grad
    sv = s[valid]
    arg = np.argmax(sv[:, :n_cls], axis=1)
    b = np.stack([sv[np.arange(valid.size), arg], sv[:, -1]], axis=1)
    t = (cols[valid] == s.shape[1] - 1).astype(np.int64)
    ls = log_softmax(b)
    loss = float(-ls[np.arange(valid.size), t].sum() / valid.size)
    g = np.exp(ls)
    g[np.arange(valid.size), t] -= 1.0
    g /= valid.size
    grad[valid, arg] = g[:, 0]
    grad[valid, -1] += g[:, 1]
    return loss, grad


# ---------------------------------------------------------------- adapter


def softplus(t):
    t = np.asarray(t, dtype=np.float64)
    return np.where(t > 30.0, t, np.log1p(np.exp(np.minimum(t, 30.0))))


def sigmoid(t):
    t = np.asarray(t, dtype=np.float64)
    e = np.exp(-np.abs(t))
    return np.where(t >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


@dataclass
class AdapterWeights:
    """Two-layer MLP ``softplus(x W1 + b1) W2 + b2`` on row vectors."""

    w1: np.ndarray  # (C, C_h)
    b1: np.ndarray  # (C_h,)
    w2: np.ndarray  # (C_h, C)
    b2: np.ndarray  # (C,)

    def __post_init__(self):
        for f in fields(self):
            setattr(self, f.name, np.asarray(getattr(self, f.name), dtype=np.float64))
        c, h = self.w1.shape
        if self.b1.shape != (h,) or self.w2.shape != (h, c) or self.b2.shape != (c,):
            raise ShapeError(
                f"inconsistent adapter shapes w1={self.w1.shape} b1={self.b1.shape} "
                f"w2={self.w2.shape} b2={self.b2.shape}"
            )
        if not all(np.all(np.isfinite(getattr(self, f.name))) for f in fields(self)):
            raise ShapeError("adapter weights must be finite")

    @classmethod
    def init(cls, dim: int, hidden: int, rng: np.random.Generator, scale: float | None = None) -> "AdapterWeights":
        s1 = scale if scale is not None else 1.0 / np.sqrt(dim)
        s2 = scale if scale is not None else 1.0 / np.sqrt(hidden)
        return cls(
            rng.normal(0.0, s1, (dim, hidden)),
            np.zeros(hidden),
            rng.normal(0.0, s2, (hidden, dim)),
            np.zeros(dim),
        )

    @classmethod
    def zeros_like(cls, other: "AdapterWeights") -> "AdapterWeights":
        return cls(*(np.zeros_like(getattr(other, f.name)) for f in fields(cls)))

    def arrays(self) -> dict[str, np.ndarray]:
        return {f.name: getattr(self, f.name) for f in fields(self)}

    def copy(self) -> "AdapterWeights":
        return AdapterWeights(**{k: v.copy() for k, v in self.arrays().items()})

    def axpy(self, alpha: float, other: "AdapterWeights") -> "AdapterWeights":
        """``self + alpha * other``."""
        return AdapterWeights(**{k: v + alpha * getattr(other, k) for k, v in self.arrays().items()})


def adapter_forward(w: AdapterWeights, x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != w.w1.shape[0]:
        raise ShapeError(f"adapter expects (N, {w.w1.shape[0]}) input, got {x.shape}")
    return softplus(x @ w.w1 + w.b1) @ w.w2 + w.b2


def adapter_backward(w: AdapterWeights, x, g_out) -> tuple[AdapterWeights, np.ndarray]:
    """Parameter gradients and input gradient for upstream gradient ``g_out``."""
    x = np.asarray(x, dtype=np.float64)
    g_out = np.asarray(g_out, dtype=np.float64)
    pre = x @ w.w1 + w.b1
    hidden = softplus(pre)
    g_hidden = g_out @ w.w2.T
    g_pre = g_hidden * sigmoid(pre)
    grads = AdapterWeights(x.T @ g_pre, g_pre.sum(axis=0), hidden.T @ g_out, g_out.sum(axis=0))
    return grads, g_pre @ w.w1.T


# ---------------------------------------------------------------- alignment


def alignment_loss(adapted, image, visible) -> tuple[float, np.ndarray, int]:
    """Mean ``1 - cos`` over visible voxels.

    Visible rows where either vector has zero norm are left out of the mean;
    their number is returned as the third element. If no row is left the loss
    is 0.
    """
    a = np.asarray(adapted, dtype=np.float64)
    e = np.asarray(image, dtype=np.float64)
    vis = np.asarray(visible, dtype=bool).reshape(-1)
    if a.shape != e.shape or a.ndim != 2 or vis.shape[0] != a.shape[0]:
        raise ShapeError(f"alignment inputs disagree: {a.shape}, {e.shape}, {vis.shape}")
    if not vis.any():
        raise ContractError("alignment loss needs at least one visible voxel")
    na = np.linalg.norm(a, axis=1)
    ne = np.linalg.norm(e, axis=1)
    used = vis & (na > 0) & (ne > 0)
    excluded = int(vis.sum() - used.sum())
    grad = np.zeros_like(a)
    if not used.any():
        # nothing left to average: report every visible row as excluded
        return 0.0, grad, excluded
    idx = np.flatnonzero(used)
    av, ev, nav, nev = a[idx], e[idx], na[idx, None], ne[idx, None]
    cos = np.sum(av * ev, axis=1, keepdims=True) / (nav * nev)
    loss = float(np.mean(1.0 - cos))
    grad[idx] = -(ev / (nav * nev) - cos * av / nav**2) / idx.size
    return loss, grad, excluded


# ---------------------------------------------------------------- total


@dataclass(frozen=True)
class LossWeights:
    ce: float = 1.0
    lovasz: float = 1.0
    occ: float = 1.0
    align: float = 1.0


@dataclass
class TotalLoss:
    total: float
    terms: dict[str, float] = field(default_factory=dict)
    grad_sem: np.ndarray | None = None  # w.r.t. the semantic logits
    grad_align: np.ndarray | None = None  # w.r.t. the aligned embeddings


def total_loss(ce=None, lovasz=None, occ=None, align=None, weights: LossWeights = LossWeights()) -> TotalLoss:
    """Weighted sum of whichever ``(loss, grad)`` components are given; missing terms count as zero."""
    terms = {}
    grad_sem = None
    total = 0.0
    for name, comp in (("ce", ce), ("lovasz", lovasz), ("occ", occ)):
        if comp is None:
            terms[name] = 0.0
            continue
        wt = getattr(weights, name)
        terms[name] = float(comp[0])
        total += wt * float(comp[0])
        if comp[1] is not None:
            g = wt * np.asarray(comp[1], dtype=np.float64)
            grad_sem = g if grad_sem is None else grad_sem + g
    grad_align = None
    if align is None:
        terms["align"] = 0.0
    else:
        terms["align"] = float(align[0])
        total += weights.align * float(align[0])
        if align[1] is not None:
            grad_align = weights.align * np.asarray(align[1], dtype=np.float64)
    terms["grounding"] = terms["ce"] + terms["lovasz"]
    return TotalLoss(total, terms, grad_sem, grad_align)
