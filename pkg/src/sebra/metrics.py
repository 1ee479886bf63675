"""Ranking and robustness metrics.

Accuracies are percentages in [0, 100]. Gaps are signed: a negative gap is a
drop relative to in-distribution accuracy.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np

from sebra.errors import ConfigError


def _tie_pairs(sorted_vals: np.ndarray) -> int:
    if len(sorted_vals) == 0:
        return 0
    change = np.flatnonzero(np.diff(sorted_vals) != 0)
    runs = np.diff(np.concatenate(([0], change + 1, [len(sorted_vals)])))
    return int(np.sum(runs * (runs - 1) // 2))


def _tie_pairs_2(a: np.ndarray, b: np.ndarray) -> int:
    if len(a) == 0:
        return 0
    change = np.flatnonzero((np.diff(a) != 0) | (np.diff(b) != 0))
    runs = np.diff(np.concatenate(([0], change + 1, [len(a)])))
    return int(np.sum(runs * (runs - 1) // 2))


def _count_inversions(b: np.ndarray) -> int:
    """Pairs i < j with b[i] > b[j], via a Fenwick tree over dense ranks."""
    ranks = np.unique(b, return_inverse=True)[1].ravel() + 1
    m = int(ranks.max()) if len(ranks) else 0
    tree = [0] * (m + 1)
    inversions = 0
    seen = 0
    for r in ranks.tolist():
        # count previously seen values <= r
        i, le = r, 0
        while i > 0:
            le += tree[i]
            i -= i & -i
        inversions += seen - le
        i = r
        while i <= m:
            tree[i] += 1
            i += i & -i
        seen += 1
    return inversions


def kendall_tau_b(rank_a, rank_b) -> float:
    """Kendall's tau-b with tie correction, O(n log n)."""
    a = np.asarray(rank_a, dtype=float)
    b = np.asarray(rank_b, dtype=float)
    if a.shape != b.shape or a.ndim != 1:
        raise ConfigError("rank vectors must be 1-D and of equal length")
    n = len(a)
    if n < 2:
        raise ConfigError("kendall_tau_b needs at least two items")
    order = np.lexsort((b, a))
    a, b = a[order], b[order]
    n0 = n * (n - 1) // 2
    n1 = _tie_pairs(a)
    n3 = _tie_pairs_2(a, b)
    n2 = _tie_pairs(np.sort(b))
    if n1 == n0 or n2 == n0:
        raise ConfigError("kendall_tau_b is undefined when one input is constant")
    swaps = _count_inversions(b)
    s = n0 - n1 - n2 + n3 - 2 * swaps
    return float(s / math.sqrt((n0 - n1) * (n0 - n2)))


def accuracy(y_true, y_pred) -> float:
    y_true = np.asarray(y_true)
    if len(y_true) == 0:
        raise ConfigError("accuracy of an empty group")
    return float(100.0 * np.mean(y_true == np.asarray(y_pred)))


def id_accuracy(group_accs: Sequence[float], weights: Sequence[float]) -> float:
    w = np.asarray(weights, dtype=float)
    if abs(w.sum() - 1.0) > 1e-6:
        raise ConfigError(f"group weights sum to {w.sum()}, not 1")
    return float(np.dot(w, np.asarray(group_accs, dtype=float)))


def worst_group_accuracy(group_accs) -> float:
    vals = list(group_accs.values()) if isinstance(group_accs, Mapping) else list(group_accs)
    if not vals:
        raise ConfigError("no groups")
    return float(min(vals))


def bias_gaps(
    id_acc: float,
    pattern_accs: Mapping[tuple[bool, ...], float],
    bias_names: Sequence[str],
) -> tuple[dict[str, float], float, float]:
    """Per-bias gaps, the all-conflicting gap and their mean.

    ``pattern_accs`` maps an alignment pattern (one flag per bias, True =
    aligned) to accuracy on that pattern. Bias ``b``'s gap uses the pattern
    conflicting on ``b`` only.
    """
    K = len(bias_names)
    if K == 0:
        return {}, 0.0, 0.0
    per_bias = {}
    for b, name in enumerate(bias_names):
        pattern = tuple(i != b for i in range(K))
        if pattern not in pattern_accs:
            raise ConfigError(f"no samples in group {pattern}")
        per_bias[name] = pattern_accs[pattern] - id_acc
    all_conflict = tuple([False] * K)
    if all_conflict not in pattern_accs:
        raise ConfigError("no all-conflicting samples")
    combined = pattern_accs[all_conflict] - id_acc
    gaps = list(per_bias.values()) + [combined]
    return per_bias, combined, float(np.mean(gaps))


@dataclass
class MetricsReport:
    tau_b: float | None = None
    pd: float | None = None
    id_acc: float | None = None
    per_bias_gap: dict[str, float] = field(default_factory=dict)
    combined_gap: float | None = None
    avg_gap: float | None = None
    worst_group_acc: float | None = None
    group_acc: dict[str, float] = field(default_factory=dict)

    def to_dict(self) -> dict:
        return asdict(self)


def group_accuracies(dataset, predictions: np.ndarray, split: str = "test"):
    """Accuracy per (class, pattern) group and per pattern pooled over classes."""
    from sebra.synthdata import group_key

    mask = dataset.split == split
    y = dataset.y[mask]
    align = dataset.align[mask]
    pred = np.asarray(predictions)
    if len(pred) != int(mask.sum()):
        raise ConfigError("one prediction per sample of the split is required")
    keys = [group_key(c, a) for c, a in zip(y, align)]
    per_group = {}
    for key in sorted(set(keys)):
        sel = np.array([k == key for k in keys])
        per_group[key] = accuracy(y[sel], pred[sel])
    per_pattern = {}
    for pattern in {tuple(bool(v) for v in a) for a in align}:
        sel = np.all(align == np.array(pattern, dtype=bool), axis=1)
        per_pattern[pattern] = accuracy(y[sel], pred[sel])
    return per_group, per_pattern


def train_group_weights(dataset) -> dict[str, float]:
    from sebra.synthdata import group_key

    mask = dataset.split == "train"
    keys = [group_key(c, a) for c, a in zip(dataset.y[mask], dataset.align[mask])]
    uniq, counts = np.unique(keys, return_counts=True)
    return {str(k): c / counts.sum() for k, c in zip(uniq, counts)}


def robustness_report(dataset, predictions: np.ndarray) -> MetricsReport:
    """I.D. accuracy, gaps and worst-group accuracy on the unbiased test split."""
    per_group, per_pattern = group_accuracies(dataset, predictions)
    weights = train_group_weights(dataset)
    keys = [k for k in weights if k in per_group]
    w = np.array([weights[k] for k in keys])
    ida = id_accuracy([per_group[k] for k in keys], w / w.sum())
    names = [b.name for b in dataset.spec.biases]
    per_bias, combined, avg = bias_gaps(ida, per_pattern, names)
    return MetricsReport(
        id_acc=ida,
        per_bias_gap=per_bias,
        combined_gap=combined,
        avg_gap=avg,
        worst_group_acc=worst_group_accuracy(per_group),
        group_acc=per_group,
    )


TrainFn = Callable[[np.ndarray, np.ndarray, int], Callable[[np.ndarray], np.ndarray]]


def head_tail_subsets(dataset, ranked, k: int) -> tuple[np.ndarray, np.ndarray]:
    """Row indices of the top-k (most spurious) and bottom-k samples.

    Taken per class, k // C from each, so both subsets stay class-balanced.
    """
    train_mask = dataset.split == "train"
    n_train = int(train_mask.sum())
    if not 0 < k <= n_train // 2:
        raise ConfigError(f"k={k} must lie in (0, {n_train // 2}]")
    row_of = {int(s): i for i, s in enumerate(dataset.ids)}
    rows = np.array([row_of[int(s)] for s in ranked.sample_ids])
    C = dataset.spec.num_classes
    per_class = k // C
    if per_class < 1:
        raise ConfigError("k smaller than the number of classes")
    top, bottom = [], []
    for c in range(C):
        rc = rows[dataset.y[rows] == c]
        if len(rc) < per_class:
            raise ConfigError(f"class {c} has fewer than {per_class} ranked samples")
        top.append(rc[:per_class])
        bottom.append(rc[len(rc) - per_class :])
    return np.concatenate(top), np.concatenate(bottom)


def performance_disparity(dataset, ranked, k: int, train_fn: TrainFn, seed: int = 0) -> float:
    """Test accuracy of a model fit on the bottom-k minus one fit on the top-k."""
    top, bottom = head_tail_subsets(dataset, ranked, k)
    test = dataset.split == "test"
    accs = []
    for rows, s in ((bottom, seed), (top, seed)):
        predict = train_fn(dataset.X[rows], dataset.y[rows], s)
        accs.append(accuracy(dataset.y[test], predict(dataset.X[test])))
    return accs[0] - accs[1]


def summarize(values: Sequence[float]) -> dict:
    v = [float(x) for x in values]
    return {
        "values": v,
        "mean": float(np.mean(v)) if v else None,
        "std": float(np.std(v)) if v else None,
    }
