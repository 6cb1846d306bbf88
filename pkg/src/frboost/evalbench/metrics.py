"""Verification metrics on similarity scores: LFW-style accuracy, ROC sweeps, TPR at fixed FPR."""
from __future__ import annotations

import dataclasses
import math
from collections.abc import Callable, Iterable

import numpy as np

SWEEP_RANGE = (0.1, 0.75)


def _scores(x, name: str) -> np.ndarray:
    a = np.asarray(x, dtype=np.float64).ravel()
    if a.size == 0:
        raise ValueError(f"{name} scores are empty")
    return a


def _neg_chunks(neg) -> Iterable[np.ndarray]:
    """Negatives may be an array, an iterable of chunks, or a zero-argument callable producing chunks."""
    if callable(neg):
        return neg()
    if isinstance(neg, np.ndarray) or (isinstance(neg, (list, tuple)) and neg and np.isscalar(neg[0])):
        return [np.asarray(neg, dtype=np.float64)]
    return neg


# ---------------------------------------------------------------- accuracy


def _accuracy_curve(scores: np.ndarray, labels: np.ndarray):
    """Unique sorted scores ``u`` and correct counts of rule "score >= u[k]" for each k, plus the all-negative rule."""
    order = np.argsort(scores, kind="stable")
    s, y = scores[order], labels[order]
    u, first = np.unique(s, return_index=True)
    pos_below = np.concatenate([[0], np.cumsum(y)])[first]  # positives strictly below u[k]
    neg_below = np.concatenate([[0], np.cumsum(1 - y)])[first]
    n_pos = y.sum()
    correct = (n_pos - pos_below) + neg_below
    correct = np.append(correct, len(y) - n_pos)  # threshold above every score
    return u, correct


def _best_threshold(scores, labels, allow_flip: bool) -> tuple[float, int, float]:
    """(threshold, direction, accuracy); direction +1 means "same person if score >= t"."""
    u, correct = _accuracy_curve(scores, labels)
    n = len(labels)
    # midpoints between neighbouring unique scores; outer ends step one unit past the data
    cuts = np.concatenate([[u[0] - 1.0], (u[:-1] + u[1:]) / 2, [u[-1] + 1.0]])
    # integer counts keep ties exact; ties go to the lower cut, so swapping labels picks the mirrored rule
    k = int(np.argmax(correct))
    best_cut, direction, best_correct = cuts[k], 1, int(correct[k])
    if allow_flip:
        kf = int(np.argmin(correct))
        flipped = n - int(correct[kf])
        if flipped > best_correct or (flipped == best_correct and cuts[kf] < cuts[k]):
            best_cut, direction, best_correct = cuts[kf], -1, flipped
    return float(best_cut), direction, best_correct / n


def _apply(scores, labels, threshold, direction) -> float:
    pred = scores >= threshold if direction > 0 else scores < threshold
    return float((pred == labels.astype(bool)).mean())


@dataclasses.dataclass
class AccuracyResult:
    accuracy: float  # mean held-out fold accuracy, percent
    best_threshold_accuracy: float  # single threshold fitted on all pairs, percent
    fold_accuracies: list
    thresholds: list
    directions: list

    @property
    def std(self) -> float:
        return float(np.std(self.fold_accuracies, ddof=1)) if len(self.fold_accuracies) > 1 else 0.0


def lfw_accuracy(pos_scores, neg_scores, folds: int = 10, seed: int = 0, allow_flip: bool = True) -> AccuracyResult:
    """Cross-validated verification accuracy in percent.

    Each class is shuffled with ``seed`` and split into contiguous folds;
    each fold is scored with the threshold that is best on the remaining folds.
    With ``allow_flip`` the threshold direction is also fitted, which makes
    the result invariant to swapping positives and negatives.
    """
    pos, neg = _scores(pos_scores, "positive"), _scores(neg_scores, "negative")
    if folds < 2:
        raise ValueError("folds must be >= 2")
    if folds > max(len(pos), len(neg)):
        raise ValueError(f"cannot split {len(pos)} + {len(neg)} pairs into {folds} folds")
    scores = np.concatenate([pos, neg])
    labels = np.concatenate([np.ones(len(pos), np.int64), np.zeros(len(neg), np.int64)])
    # each class is shuffled with the same seed and cut into contiguous blocks,
    # so swapping the classes leaves every pair in its fold
    pos_blocks = np.array_split(np.random.default_rng(seed).permutation(len(pos)), folds)
    neg_blocks = np.array_split(len(pos) + np.random.default_rng(seed).permutation(len(neg)), folds)
    everything = np.arange(len(scores))
    accs, ths, dirs = [], [], []
    for pb, nb in zip(pos_blocks, neg_blocks):
        held = np.concatenate([pb, nb])
        train = np.setdiff1d(everything, held, assume_unique=True)
        t, d, _ = _best_threshold(scores[train], labels[train], allow_flip)
        accs.append(100.0 * _apply(scores[held], labels[held], t, d))
        ths.append(t)
        dirs.append(d)
    _, _, best = _best_threshold(scores, labels, allow_flip)
    return AccuracyResult(float(np.mean(accs)), 100.0 * best, accs, ths, dirs)


# ---------------------------------------------------------------- ROC


@dataclasses.dataclass
class RocCurve:
    thresholds: np.ndarray  # ascending
    tpr: np.ndarray
    fpr: np.ndarray
    n_pos: int = 0
    n_neg: int = 0

    def __post_init__(self):
        if not len(self.thresholds) == len(self.tpr) == len(self.fpr):
            raise ValueError("thresholds, tpr and fpr must have equal length")


def count_at_least(sorted_scores_or_chunks, thresholds: np.ndarray) -> np.ndarray:
    """For each threshold t, how many scores are >= t (streams over chunks)."""
    thresholds = np.asarray(thresholds, dtype=np.float64)
    counts = np.zeros(len(thresholds), dtype=np.int64)
    for chunk in sorted_scores_or_chunks:
        c = np.sort(np.asarray(chunk, dtype=np.float64))
        counts += len(c) - np.searchsorted(c, thresholds, side="left")
    return counts


def roc_sweep(pos_scores, neg_scores, range_lo: float = SWEEP_RANGE[0], range_hi: float = SWEEP_RANGE[1], steps: int = 66) -> RocCurve:
    """TPR/FPR at ``steps`` evenly spaced thresholds (rule: score >= t); negatives may stream."""
    if not range_lo < range_hi:
        raise ValueError("range_lo must be < range_hi")
    if steps < 2:
        raise ValueError("steps must be >= 2")
    pos = _scores(pos_scores, "positive")
    th = np.linspace(range_lo, range_hi, steps)
    pos_counts = count_at_least([pos], th)
    neg_counts = np.zeros(steps, dtype=np.int64)
    n_neg = 0
    for chunk in _neg_chunks(neg_scores):
        chunk = np.asarray(chunk, dtype=np.float64)
        n_neg += len(chunk)
        neg_counts += count_at_least([chunk], th)
    if n_neg == 0:
        raise ValueError("negative scores are empty")
    return RocCurve(th, pos_counts / len(pos), neg_counts / n_neg, len(pos), n_neg)


def exact_roc(pos_scores, neg_scores) -> RocCurve:
    """ROC at every distinct observed score (plus one threshold above all scores)."""
    pos, neg = _scores(pos_scores, "positive"), _scores(neg_scores, "negative")
    th = np.unique(np.concatenate([pos, neg]))
    th = np.append(th, np.nextafter(th[-1], np.inf))
    return RocCurve(th, count_at_least([pos], th) / len(pos), count_at_least([neg], th) / len(neg), len(pos), len(neg))


@dataclasses.dataclass
class TprResult:
    tpr: float  # percent
    threshold: float
    fpr: float
    mode: str
    below_resolution: bool


def _allowed_false_positives(fpr_target: float, n_neg: int) -> int:
    # floor with a relative guard so that e.g. 1e-2 * 100 counts as exactly 1
    return int(math.floor(fpr_target * n_neg * (1 + 1e-12)))


def _top_k(chunks, k: int) -> tuple[np.ndarray, int]:
    """The k largest values (descending) across chunks and the total count."""
    top = np.zeros(0)
    n = 0
    for chunk in chunks:
        chunk = np.asarray(chunk, dtype=np.float64)
        n += len(chunk)
        merged = np.concatenate([top, chunk])
        if len(merged) > k:
            merged = np.partition(merged, len(merged) - k)[len(merged) - k:]
        top = merged
    return np.sort(top)[::-1], n


def _exact_tpr(pos: np.ndarray, make_chunks: Callable, fpr_target: float) -> TprResult:
    n_neg = sum(len(c) for c in make_chunks())
    if n_neg == 0:
        raise ValueError("negative scores are empty")
    k = _allowed_false_positives(fpr_target, n_neg)
    flag = n_neg < 1.0 / fpr_target
    if k >= n_neg:
        return TprResult(100.0, -math.inf, 1.0, "exact", flag)
    top, _ = _top_k(make_chunks(), k + 1)
    cut = top[k]  # (k+1)-th largest negative: the threshold has to sit strictly above it
    threshold = float(np.nextafter(cut, np.inf))
    tp = int((pos >= threshold).sum())
    fp = int((top >= threshold).sum())
    return TprResult(100.0 * tp / len(pos), threshold, fp / n_neg, "exact", flag)


def tpr_at_fpr(pos_scores, neg_scores=None, fpr_target: float = 1e-3, mode: str = "exact") -> TprResult:
    """TPR (percent) at the smallest threshold whose FPR does not exceed ``fpr_target``.

    ``mode="exact"`` considers every real threshold; negatives may be an
    array, a list of chunks or a zero-argument callable returning a fresh
    chunk stream (read twice). ``mode="sweep"`` takes a :class:`RocCurve`
    (or builds the default sweep) and only considers its thresholds.
    ``below_resolution`` flags targets finer than one negative pair.
    """
    if not 0.0 < fpr_target < 1.0:
        raise ValueError("fpr_target must lie in (0, 1)")
    if mode == "sweep":
        curve = pos_scores if isinstance(pos_scores, RocCurve) else roc_sweep(pos_scores, neg_scores)
        ok = np.flatnonzero(curve.fpr <= fpr_target)
        flag = curve.n_neg < 1.0 / fpr_target
        if len(ok) == 0:
            return TprResult(0.0, math.inf, 0.0, "sweep", flag)
        k = ok[0]
        return TprResult(100.0 * float(curve.tpr[k]), float(curve.thresholds[k]), float(curve.fpr[k]), "sweep", flag)
    if mode != "exact":
        raise ValueError(f"unknown mode {mode!r}")
    pos = _scores(pos_scores, "positive")
    if callable(neg_scores):
        return _exact_tpr(pos, neg_scores, fpr_target)
    chunks = list(_neg_chunks(neg_scores))
    return _exact_tpr(pos, lambda: chunks, fpr_target)
