"""Accuracy, precision and recall of detected lines, swept over an mIoU threshold."""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .errors import DimensionError, ValidationError
from .geometry import ImageSize, Line, miou, miou_matrix

TAU_LO = 0.50
TAU_HI = 1.00
TAU_STEP = 0.005
EMPTY_RATIO = 1.0  # value of a ratio whose denominator is zero


@dataclass(frozen=True)
class Detection:
    """One output line with its detector score; ``primary`` marks the dominant line."""

    line: Line
    score: float
    primary: bool = False


def _sizes(size, n: int) -> list[ImageSize]:
    if isinstance(size, ImageSize):
        return [size] * n
    size = list(size)
    if len(size) != n:
        raise DimensionError(f"{len(size)} image sizes for {n} images")
    return size


def _check_tau(tau: float) -> None:
    if not 0.0 <= tau <= 1.0:
        raise ValidationError(f"tau must lie in [0, 1], got {tau}")


def _ratio(num: int, den: int) -> float:
    return num / den if den else EMPTY_RATIO


# ---------------------------------------------------------------------------
# primary line accuracy


def primary_overlaps(preds: Sequence[Line | None], gts: Sequence[Line], size) -> np.ndarray:
    """mIoU of each predicted primary with its gt; -1 where nothing was predicted."""
    if len(preds) != len(gts):
        raise DimensionError(f"{len(preds)} predictions for {len(gts)} images")
    sizes = _sizes(size, len(gts))
    return np.array([-1.0 if p is None else miou(p, g, s) for p, g, s in zip(preds, gts, sizes)])


def primary_accuracy(preds, gts, size, tau: float) -> float:
    """Fraction of images whose predicted primary line overlaps its gt above ``tau``."""
    _check_tau(tau)
    ov = primary_overlaps(preds, gts, size)
    return float(np.mean(ov > tau)) if len(ov) else EMPTY_RATIO


# ---------------------------------------------------------------------------
# precision / recall


def greedy_pairs(overlap: np.ndarray) -> list[tuple[int, int, float]]:
    """One-to-one pairs ``(pred, gt, miou)`` taken in descending overlap order.

    Ties keep the lower pred index, then the lower gt index. Pairs with zero
    overlap are never taken.
    """
    overlap = np.asarray(overlap, dtype=float)
    if overlap.size == 0:
        return []
    order = sorted(((-overlap[i, j], i, j) for i in range(overlap.shape[0]) for j in range(overlap.shape[1])))
    used_p, used_g = set(), set()
    out = []
    for neg, i, j in order:
        if -neg <= 0.0:
            break
        if i in used_p or j in used_g:
            continue
        used_p.add(i)
        used_g.add(j)
        out.append((i, j, -neg))
    return out


def match_counts(overlap: np.ndarray, tau: float) -> tuple[int, int, int]:
    """``(N_l, N_e, N_m)`` for one image under greedy matching at ``tau``."""
    overlap = np.asarray(overlap, dtype=float)
    if overlap.ndim != 2:
        raise DimensionError(f"overlap matrix must be 2-D, got shape {overlap.shape}")
    n_pred, n_gt = overlap.shape
    used_p, used_g = set(), set()
    hits = 0
    order = sorted((-overlap[i, j], i, j) for i in range(n_pred) for j in range(n_gt))
    for neg, i, j in order:
        if -neg <= tau:
            break
        if i in used_p or j in used_g:
            continue
        used_p.add(i)
        used_g.add(j)
        hits += 1
    return hits, n_pred - hits, n_gt - hits


def overlap_matrices(preds, gts, size) -> list[np.ndarray]:
    """Per-image ``(n_pred, n_gt)`` mIoU matrices."""
    if len(preds) != len(gts):
        raise DimensionError(f"{len(preds)} prediction sets for {len(gts)} images")
    out = []
    for p, g, s in zip(preds, gts, _sizes(size, len(gts))):
        if len(p) and len(g):
            out.append(miou_matrix(list(p), list(g), size=s))
        else:
            out.append(np.zeros((len(p), len(g))))
    return out


def precision_recall(preds, gts, size, tau: float) -> tuple[float, float]:
    _check_tau(tau)
    tot = np.zeros(3, dtype=int)
    for m in overlap_matrices(preds, gts, size):
        tot += match_counts(m, tau)
    n_l, n_e, n_m = (int(v) for v in tot)
    return _ratio(n_l, n_l + n_e), _ratio(n_l, n_l + n_m)


class SweepCounts:
    """Precomputed greedy matches so a whole tau sweep costs one matching per image.

    Greedy matching at threshold ``tau`` takes exactly the untruncated greedy
    pairs whose overlap exceeds ``tau``, so counts at any ``tau`` follow from
    one sorted pass.
    """

    def __init__(self, preds, gts, size):
        mats = overlap_matrices(preds, gts, size)
        self.n_pred = sum(m.shape[0] for m in mats)
        self.n_gt = sum(m.shape[1] for m in mats)
        self.match_overlaps = np.sort([ov for m in mats for _, _, ov in greedy_pairs(m)])

    def counts(self, tau: float) -> tuple[int, int, int]:
        hits = len(self.match_overlaps) - int(np.searchsorted(self.match_overlaps, tau, side="right"))
        return hits, self.n_pred - hits, self.n_gt - hits

    def precision(self, tau: float) -> float:
        n_l, n_e, _ = self.counts(tau)
        return _ratio(n_l, n_l + n_e)

    def recall(self, tau: float) -> float:
        n_l, _, n_m = self.counts(tau)
        return _ratio(n_l, n_l + n_m)


# ---------------------------------------------------------------------------
# curves


@dataclass(frozen=True)
class EvalCurve:
    taus: np.ndarray
    values: np.ndarray
    auc: float


def tau_grid(tau_lo: float = TAU_LO, tau_hi: float = TAU_HI, step: float = TAU_STEP) -> np.ndarray:
    if not tau_lo < tau_hi:
        raise ValidationError(f"tau range must be increasing, got [{tau_lo}, {tau_hi}]")
    if not step > 0:
        raise ValidationError(f"tau step must be positive, got {step}")
    n = int(math.floor((tau_hi - tau_lo) / step + 1e-9))
    taus = tau_lo + step * np.arange(n + 1)
    if tau_hi - taus[-1] > 1e-9 * step:
        taus = np.append(taus, tau_hi)
    taus[-1] = tau_hi
    return taus


def area_percent(taus: np.ndarray, values: np.ndarray) -> float:
    """Trapezoid area under ``values`` as a percentage of the tau range."""
    taus = np.asarray(taus, dtype=float)
    values = np.asarray(values, dtype=float)
    heights = (values[1:] + values[:-1]) / 2.0
    dt = np.diff(taus)
    if np.allclose(dt, dt[0], rtol=1e-9, atol=0):
        # uniform grid: the mean height avoids rounding in the tau differences
        return 100.0 * float(np.mean(heights))
    return 100.0 * float(np.sum(heights * dt)) / (taus[-1] - taus[0])


def curve_and_auc(metric: Callable[[float], float], tau_lo: float = TAU_LO, tau_hi: float = TAU_HI,
                  step: float = TAU_STEP) -> EvalCurve:
    taus = tau_grid(tau_lo, tau_hi, step)
    values = np.array([float(metric(t)) for t in taus])
    return EvalCurve(taus, values, area_percent(taus, values))


def evaluate(primary_preds, primary_gts, line_preds, line_gts, size, tau_lo: float = TAU_LO,
             tau_hi: float = TAU_HI, step: float = TAU_STEP, line_size=None) -> dict[str, EvalCurve]:
    """Accuracy, precision and recall curves over one shared tau grid.

    ``line_size`` gives the per-image sizes of the line lists when those
    cover different images than the primary lists (images without a primary).
    """
    ov = primary_overlaps(primary_preds, primary_gts, size)
    counts = SweepCounts(line_preds, line_gts, size if line_size is None else line_size)

    def accuracy(t):
        return float(np.mean(ov > t)) if len(ov) else EMPTY_RATIO

    return {
        "accuracy": curve_and_auc(accuracy, tau_lo, tau_hi, step),
        "precision": curve_and_auc(counts.precision, tau_lo, tau_hi, step),
        "recall": curve_and_auc(counts.recall, tau_lo, tau_hi, step),
    }


def write_curve_csv(path, curves: dict[str, EvalCurve]) -> None:
    """``tau,<name>...`` rows with six decimals; all curves share one tau grid."""
    names = list(curves)
    taus = curves[names[0]].taus
    for name in names[1:]:
        if not np.array_equal(curves[name].taus, taus):
            raise DimensionError(f"curve {name} uses a different tau grid")
    rows = [",".join(["tau"] + names)]
    for k, t in enumerate(taus):
        rows.append(",".join(f"{v:.6f}" for v in [t] + [curves[n].values[k] for n in names]))
    Path(path).write_text("\n".join(rows) + "\n")


def format_summary(values: dict) -> str:
    """``key=value`` lines; floats get six decimals."""
    out = []
    for k, v in values.items():
        if isinstance(v, float):
            v = f"{v:.6f}"
        out.append(f"{k}={v}")
    return "\n".join(out) + "\n"


def parse_summary(text: str) -> dict[str, str]:
    out = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        raw = raw.strip()
        if not raw or raw.startswith("#"):
            continue
        if "=" not in raw:
            raise ValidationError(f"line {lineno}: expected key=value, got {raw!r}")
        k, v = raw.split("=", 1)
        out[k.strip()] = v.strip()
    return out
