"""Pick a small set of distinct lines out of many overlapping detections.

Two routes are provided: ranking-and-matching over pairwise comparison
matrices, and greedy overlap suppression by score.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import DimensionError, ValidationError
from .geometry import ImageSize, miou_matrix
from .model import SiameseHeadParams, siamese_forward_batch

RANKING = "ranking"
MATCHING = "matching"
MATCH_PROB = 0.5
NMS_OVERLAP = 0.85


def _features(features) -> np.ndarray:
    f = np.asarray(features, dtype=float)
    if f.ndim != 2 or len(f) < 1:
        raise DimensionError(f"expected a nonempty (N, D) feature array, got shape {f.shape}")
    return f


def pairwise_scores(features, rparams: SiameseHeadParams, mparams: SiameseHeadParams):
    """``(Pr, Pm)``: both heads evaluated on every ordered pair, zero diagonal."""
    f = _features(features)
    n = len(f)
    pr = np.zeros((n, n))
    pm = np.zeros((n, n))
    if n == 1:
        return pr, pm
    ii, jj = np.nonzero(~np.eye(n, dtype=bool))
    pr[ii, jj] = siamese_forward_batch(rparams, f[ii], f[jj])[0][:, 0]
    pm[ii, jj] = siamese_forward_batch(mparams, f[ii], f[jj])[0][:, 0]
    return pr, pm


def _square(m, name: str) -> np.ndarray:
    m = np.asarray(m, dtype=float)
    if m.ndim != 2 or m.shape[0] != m.shape[1]:
        raise DimensionError(f"{name} must be square, got shape {m.shape}")
    return m


def reliability(pr, alive) -> np.ndarray:
    """Summed win probability of each alive line against the other alive lines.

    Returned in the order of ``alive``.
    """
    pr = _square(pr, "Pr")
    alive = np.asarray(alive, dtype=int)
    if alive.size == 0:
        raise ValidationError("reliability needs at least one alive line")
    sub = pr[np.ix_(alive, alive)].copy()
    np.fill_diagonal(sub, 0.0)
    return sub.sum(axis=1)


@dataclass
class SelectionResult:
    selected: list = field(default_factory=list)
    removed: list = field(default_factory=list)  # removed[k] goes with selected[k]

    @property
    def primary(self) -> int | None:
        return self.selected[0] if self.selected else None

    def trace_lines(self) -> list[str]:
        """One ``step selected removed...`` row per iteration."""
        out = []
        for k, (s, r) in enumerate(zip(self.selected, self.removed)):
            out.append(" ".join([str(k), str(s)] + [str(j) for j in r]))
        return out


def select_iterate(pr, pm, threshold: float = MATCH_PROB) -> SelectionResult:
    """Alternate picking the most reliable alive line and dropping its matches."""
    pr = _square(pr, "Pr")
    pm = _square(pm, "Pm")
    if pr.shape != pm.shape:
        raise DimensionError(f"Pr {pr.shape} and Pm {pm.shape} differ in size")
    alive = list(range(len(pr)))
    result = SelectionResult()
    while alive:
        r = reliability(pr, alive)
        best = alive[int(np.argmax(r))]  # argmax takes the first maximum
        alive.remove(best)
        gone = [j for j in alive if pm[best, j] > threshold]
        alive = [j for j in alive if j not in gone]
        result.selected.append(best)
        result.removed.append(gone)
    return result


def nms(lines, scores, size: ImageSize, overlap_thr: float = NMS_OVERLAP) -> list[int]:
    """Greedy suppression: keep the best remaining line, drop its overlaps."""
    scores = np.asarray(scores, dtype=float).reshape(-1)
    if len(lines) != len(scores):
        raise DimensionError(f"{len(lines)} lines but {len(scores)} scores")
    if len(lines) == 0:
        return []
    overlap = miou_matrix(lines, size=size)
    order = sorted(range(len(scores)), key=lambda k: (-scores[k], k))
    alive = np.ones(len(scores), dtype=bool)
    keep = []
    for k in order:
        if not alive[k]:
            continue
        keep.append(k)
        alive &= ~(overlap[k] > overlap_thr)
        alive[k] = False
    return keep


@dataclass(frozen=True)
class PairLabel:
    """Training target for one ordered pair of lines.

    ``first`` and ``second`` index the pooled list ``gts + detections``.
    """

    first: int
    second: int
    task: str
    target: tuple

    def __post_init__(self):
        if self.task not in (RANKING, MATCHING):
            raise ValidationError(f"unknown pair task {self.task!r}")
        if sorted(self.target) != [0.0, 1.0]:
            raise ValidationError(f"pair target must be one-hot, got {self.target}")


def build_pair_labels(detections, gts, primary: int | None = None) -> list[PairLabel]:
    """Ranking and matching targets from matched detections.

    ``detections`` holds ``(line, gt_index or None)`` tuples. Each gt outranks
    its own detections, and two detections match iff they share a gt. With a
    ``primary`` gt index, the primary gt also outranks every other gt and
    every detection of another gt. All pairs are emitted in both orders.
    """
    n_gt = len(gts)
    owner = [g for _, g in detections]
    for g in owner:
        if g is not None and not 0 <= g < n_gt:
            raise ValidationError(f"detection matched to unknown gt {g}")
    labels = []

    def rank(better: int, worse: int):
        labels.append(PairLabel(better, worse, RANKING, (1.0, 0.0)))
        labels.append(PairLabel(worse, better, RANKING, (0.0, 1.0)))

    for d, g in enumerate(owner):
        if g is not None:
            rank(g, n_gt + d)
    if primary is not None:
        if not 0 <= primary < n_gt:
            raise ValidationError(f"primary gt {primary} out of range")
        for g in range(n_gt):
            if g != primary:
                rank(primary, g)
        for d, g in enumerate(owner):
            if g is not None and g != primary:
                rank(primary, n_gt + d)
    for a in range(len(owner)):
        for b in range(len(owner)):
            if a == b:
                continue
            same = owner[a] is not None and owner[a] == owner[b]
            labels.append(PairLabel(n_gt + a, n_gt + b, MATCHING, (1.0, 0.0) if same else (0.0, 1.0)))
    return labels
