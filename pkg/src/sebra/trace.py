"""Per-epoch learning dynamics on the balanced validation split.

Signals are the model's agreement with each bias attribute's implied label
(``bias_<name>``) and its accuracy on all-conflicting samples (``core``).
Epoch ``e`` is the model after ``e`` training epochs; epoch 0 is the
untrained network.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from sebra import tinynn as nn
from sebra.errors import ConfigError
from sebra.ranking import SebraConfig, erm_rank, sebra_rank


@dataclass
class Trace:
    method: str
    signals: list[str]
    # acc[e, j]: signal j after e epochs, in percent
    acc: np.ndarray
    # epoch at which each train sample first crossed the threshold (max_rank if never)
    first_crossing: np.ndarray

    @property
    def epochs(self) -> int:
        return self.acc.shape[0]

    def peak_epoch(self, signal: str) -> int:
        return int(np.argmax(self.acc[:, self.signals.index(signal)]))

    def rows(self):
        for e in range(self.epochs):
            for j, s in enumerate(self.signals):
                yield self.method, e, s, float(self.acc[e, j])


def _probe(dataset):
    val = dataset.split == "val"
    if not np.any(val):
        raise ConfigError("trace needs a validation split")
    if dataset.bias_labels is None:
        raise ConfigError("trace needs bias attribute labels")
    X, y = dataset.X[val], dataset.y[val]
    conflicting = ~np.any(dataset.align[val], axis=1)
    names = [b.name for b in dataset.spec.biases]
    targets = [dataset.bias_labels[val][:, k] for k in range(len(names))]
    return X, y, conflicting, names, targets


class TraceRecorder:
    """Epoch hook for the rankers that records probe accuracies.

    Pass :meth:`on_epoch` as ``on_epoch`` to ``sebra_rank`` or ``erm_rank``
    running on ``dataset``'s train split, then call :meth:`result`.
    """

    def __init__(self, dataset, max_rank: int):
        self.Xv, self.yv, self.conflicting, names, self.targets = _probe(dataset)
        if not np.any(self.conflicting):
            raise ConfigError("validation split has no all-conflicting samples")
        self.signals = list(names) + ["core"]
        self.max_rank = max_rank
        self.rows: list[list[float]] = []
        self.first = np.full(int(np.sum(dataset.split == "train")), max_rank, dtype=np.int64)

    def on_epoch(self, e: int, params, state) -> None:
        pred = nn.predict(params, self.Xv)
        vals = [100.0 * np.mean(pred == t) for t in self.targets]
        vals.append(100.0 * np.mean(pred[self.conflicting] == self.yv[self.conflicting]))
        self.rows.append(vals)
        if e > 0:
            done = (state.v_prev == 0) & (self.first == self.max_rank)
            self.first[done] = e - 1

    def result(self, method: str) -> Trace:
        return Trace(method, self.signals, np.array(self.rows), self.first.copy())


def training_trace(dataset, config: SebraConfig, method: str = "sebra") -> Trace:
    """Run a ranker on the train split and record probe accuracies per epoch."""
    if method not in ("sebra", "erm"):
        raise ConfigError(f"unknown method {method!r}")
    rec = TraceRecorder(dataset, config.max_rank)
    train = dataset.subset("train")
    ranker = sebra_rank if method == "sebra" else erm_rank
    ranker(train.X, train.y, train.ids, config, dataset.spec.num_classes, on_epoch=rec.on_epoch)
    return rec.result(method)


def save_traces(traces, path: str | Path) -> None:
    """Long-format CSV: ``method,epoch,signal,accuracy``."""
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["method", "epoch", "signal", "accuracy"])
        for tr in traces:
            for m, e, s, a in tr.rows():
                w.writerow([m, e, s, f"{a:.6g}"])


def mean_crossing_by_group(trace: Trace, dataset) -> dict[str, float]:
    """Mean first-crossing epoch per alignment pattern of the train split."""
    from sebra.synthdata import group_name

    train = dataset.split == "train"
    names = np.array([group_name(a) for a in dataset.align[train]])
    return {g: float(trace.first_crossing[names == g].mean()) for g in sorted(set(names))}


def crossing_split(trace: Trace, dataset) -> tuple[float, float]:
    """Mean first-crossing epoch of fully aligned vs. partly conflicting train samples."""
    aligned = np.all(dataset.align[dataset.split == "train"], axis=1)
    if aligned.all() or not aligned.any():
        raise ConfigError("need both aligned and conflicting train samples")
    return float(trace.first_crossing[aligned].mean()), float(trace.first_crossing[~aligned].mean())
