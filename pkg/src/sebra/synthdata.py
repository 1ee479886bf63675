"""Synthetic multi-bias classification data with a known spuriosity order.

Every sample is a concatenation of feature blocks: one core block whose
prototype is chosen by the true label, and one block per bias whose prototype
is chosen by the label with probability ``correlation`` (bias-aligned) and by
a uniformly drawn other label otherwise (bias-conflicting). A block's
learnability is set by its ``snr``, the prototype magnitude relative to unit
noise, so a bias with higher snr is easier to pick up than the core block.
"""

from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterator, NamedTuple, Sequence

import numpy as np

from sebra.errors import ConfigError

SPLITS = ("train", "val", "test")


@dataclass(frozen=True)
class BiasSpec:
    name: str
    correlation: float
    snr: float
    dim: int = 8

    def validate(self) -> None:
        if not 0.0 <= self.correlation <= 1.0:
            raise ConfigError(f"bias {self.name!r}: correlation must lie in [0, 1]")
        if not self.snr > 0:
            raise ConfigError(f"bias {self.name!r}: snr must be positive")
        if int(self.dim) < 1:
            raise ConfigError(f"bias {self.name!r}: dim must be >= 1")


@dataclass(frozen=True)
class DatasetSpec:
    num_classes: int = 2
    train_per_class: int = 500
    test_per_class: int = 400
    core_snr: float = 1.0
    core_dim: int = 8
    biases: tuple[BiasSpec, ...] = ()
    noise_sigma: float = 1.0
    seed: int = 0

    def validate(self) -> None:
        if self.num_classes < 2:
            raise ConfigError("num_classes must be >= 2")
        if self.train_per_class <= 0 or self.test_per_class <= 0:
            raise ConfigError("sample counts must be positive")
        if not self.core_snr > 0:
            raise ConfigError("core_snr must be positive")
        if not self.noise_sigma > 0:
            raise ConfigError("noise_sigma must be positive")
        for dim in [self.core_dim] + [b.dim for b in self.biases]:
            # Gram-Schmidt needs one direction per class inside each block.
            if dim < self.num_classes:
                raise ConfigError(
                    f"block dim {dim} is smaller than num_classes={self.num_classes}"
                )
        for b in self.biases:
            b.validate()
        snrs = [b.snr for b in self.biases]
        if any(a <= b for a, b in zip(snrs, snrs[1:])):
            raise ConfigError("biases must be sorted by strictly decreasing snr")
        if snrs and self.core_snr >= min(snrs):
            raise ConfigError("core_snr must be below every bias snr")
        if self.test_per_class < 2 ** len(self.biases):
            raise ConfigError("test_per_class too small for a group-balanced test split")

    @property
    def num_biases(self) -> int:
        return len(self.biases)

    @property
    def input_dim(self) -> int:
        return self.core_dim + sum(b.dim for b in self.biases)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["biases"] = [asdict(b) for b in self.biases]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "DatasetSpec":
        d = dict(d)
        try:
            biases = tuple(BiasSpec(**b) for b in d.pop("biases", []))
            return cls(biases=biases, **d)
        except TypeError as exc:
            raise ConfigError(f"bad dataset spec: {exc}") from exc


def synthcars_spec(seed: int = 0, scale: float = 1.0, dim: int = 8) -> DatasetSpec:
    """Default two-bias benchmark: 95%/95% skew, snr ratio 4:2:1."""
    return DatasetSpec(
        num_classes=2,
        train_per_class=500,
        test_per_class=400,
        core_snr=1.0 * scale,
        core_dim=dim,
        biases=(
            BiasSpec("bias_a", 0.95, 4.0 * scale, dim),
            BiasSpec("bias_b", 0.95, 2.0 * scale, dim),
        ),
        noise_sigma=1.0,
        seed=seed,
    )


class Sample(NamedTuple):
    id: int
    x: np.ndarray
    y: int
    alignment: tuple[bool, ...]
    mu: float
    split: str


@dataclass(eq=False)
class Dataset:
    """Column-oriented dataset; row ``i`` is one sample."""

    spec: DatasetSpec
    ids: np.ndarray
    split: np.ndarray
    y: np.ndarray
    align: np.ndarray
    mu: np.ndarray
    X: np.ndarray
    # Label whose prototype drove each bias block; not part of the CSV schema.
    bias_labels: np.ndarray | None = field(default=None, repr=False)

    def __len__(self) -> int:
        return len(self.ids)

    @property
    def num_biases(self) -> int:
        return self.align.shape[1]

    def sample(self, i: int) -> Sample:
        return Sample(
            int(self.ids[i]),
            self.X[i],
            int(self.y[i]),
            tuple(bool(a) for a in self.align[i]),
            float(self.mu[i]),
            str(self.split[i]),
        )

    def __iter__(self) -> Iterator[Sample]:
        return (self.sample(i) for i in range(len(self)))

    def subset(self, split: str) -> "Dataset":
        mask = self.split == split
        return Dataset(
            self.spec,
            self.ids[mask],
            self.split[mask],
            self.y[mask],
            self.align[mask],
            self.mu[mask],
            self.X[mask],
            None if self.bias_labels is None else self.bias_labels[mask],
        )

    def group_rank(self) -> np.ndarray:
        return group_rank(self.align)

    def equals(self, other: "Dataset") -> bool:
        return (
            self.spec == other.spec
            and np.array_equal(self.ids, other.ids)
            and np.array_equal(self.split, other.split)
            and np.array_equal(self.y, other.y)
            and np.array_equal(self.align, other.align)
            and np.array_equal(self.mu, other.mu)
            and np.array_equal(self.X, other.X)
        )


def group_rank(align: np.ndarray) -> np.ndarray:
    """Canonical group position: all-aligned is 0, all-conflicting is 2**K - 1.

    The first (strongest) bias is the most significant bit, so it dominates
    the ordering.
    """
    align = np.asarray(align, dtype=bool)
    k = align.shape[1]
    weights = 1 << np.arange(k - 1, -1, -1, dtype=np.int64)
    return (~align).astype(np.int64) @ weights if k else np.zeros(len(align), np.int64)


def group_name(alignment: Sequence[bool]) -> str:
    return "".join("A" if a else "C" for a in alignment)


def group_key(y: int, alignment: Sequence[bool]) -> str:
    return f"{int(y)}:{group_name(alignment)}"


def all_patterns(k: int) -> list[tuple[bool, ...]]:
    """Alignment patterns in canonical (decreasing spuriosity) order."""
    return [tuple(not (r >> (k - 1 - b)) & 1 for b in range(k)) for r in range(2**k)]


def ground_truth_order(dataset: Dataset) -> np.ndarray:
    """Rank value per train sample; lower means more spurious, ties share a value."""
    return group_rank(dataset.subset("train").align)


def _quantize(a: np.ndarray) -> np.ndarray:
    # Round to the CSV precision up front so save/load is exact.
    if a.size == 0:
        return a.astype(float)
    return np.char.mod("%.9g", a).astype(float)


def _prototypes(rng: np.random.Generator, num_classes: int, dim: int) -> np.ndarray:
    raw = rng.standard_normal((num_classes, dim))
    q, _ = np.linalg.qr(raw.T)
    # QR is Gram-Schmidt up to sign; fix signs against the raw draw.
    signs = np.sign(np.sum(q.T * raw, axis=1))
    signs[signs == 0] = 1.0
    return q.T * signs[:, None]


def _blocks(spec: DatasetSpec, rng: np.random.Generator):
    core = _prototypes(rng, spec.num_classes, spec.core_dim)
    bias = [_prototypes(rng, spec.num_classes, b.dim) for b in spec.biases]
    return core, bias


def _draw(spec, rng, protos, y, align):
    core, bias = protos
    n = len(y)
    C = spec.num_classes
    parts = [spec.core_snr * core[y] + spec.noise_sigma * rng.standard_normal((n, spec.core_dim))]
    labels = np.empty((n, spec.num_biases), dtype=np.int64)
    for b, bs in enumerate(spec.biases):
        other = (y + rng.integers(1, C, size=n)) % C
        lab = np.where(align[:, b], y, other)
        labels[:, b] = lab
        parts.append(bs.snr * bias[b][lab] + spec.noise_sigma * rng.standard_normal((n, bs.dim)))
    return np.concatenate(parts, axis=1), labels


def _mu(align: np.ndarray) -> np.ndarray:
    if align.shape[1] == 0:
        return np.ones(len(align))
    return _quantize(align.mean(axis=1))


def generate(spec: DatasetSpec) -> Dataset:
    """Draw train, group-balanced val and group-balanced test splits."""
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    protos = _blocks(spec, rng)
    K = spec.num_biases
    C = spec.num_classes
    corr = np.array([b.correlation for b in spec.biases])
    patterns = np.array(all_patterns(K), dtype=bool).reshape(2**K, K)

    ys, aligns, splits = [], [], []
    for c in range(C):
        n = spec.train_per_class
        ys.append(np.full(n, c))
        aligns.append(rng.random((n, K)) < corr)
        splits.append(np.full(n, "train"))
    per_group = {
        "val": max(1, (spec.train_per_class // 10) // 2**K),
        "test": spec.test_per_class // 2**K,
    }
    for split in ("val", "test"):
        m = per_group[split]
        for c in range(C):
            ys.append(np.full(m * 2**K, c))
            aligns.append(np.repeat(patterns, m, axis=0))
            splits.append(np.full(m * 2**K, split))

    y = np.concatenate(ys).astype(np.int64)
    align = np.concatenate(aligns).astype(bool).reshape(len(y), K)
    X, labels = _draw(spec, rng, protos, y, align)
    return Dataset(
        spec=spec,
        ids=np.arange(len(y), dtype=np.int64),
        split=np.concatenate(splits).astype("<U5"),
        y=y,
        align=align,
        mu=_mu(align),
        X=_quantize(X),
        bias_labels=labels,
    )


def spec_path_for(csv_path: str | Path) -> Path:
    p = Path(csv_path)
    return p.with_name(p.stem + ".spec.json")


def save(dataset: Dataset, path: str | Path) -> None:
    """Write the dataset CSV and its spec JSON next to it."""
    path = Path(path)
    K = dataset.num_biases
    D = dataset.X.shape[1]
    header = ["id", "split", "y", "mu"] + [f"align_{k}" for k in range(K)] + [f"x_{d}" for d in range(D)]
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for i in range(len(dataset)):
            w.writerow(
                [int(dataset.ids[i]), dataset.split[i], int(dataset.y[i]), f"{dataset.mu[i]:.9g}"]
                + [int(a) for a in dataset.align[i]]
                + [f"{v:.9g}" for v in dataset.X[i]]
            )
    with open(spec_path_for(path), "w", encoding="utf-8", newline="\n") as fh:
        json.dump(dataset.spec.to_dict(), fh, indent=2)
        fh.write("\n")


def load(path: str | Path, spec: DatasetSpec | None = None) -> Dataset:
    path = Path(path)
    if spec is None:
        sp = spec_path_for(path)
        if sp.exists():
            spec = DatasetSpec.from_dict(json.loads(sp.read_text(encoding="utf-8")))
    with open(path, encoding="utf-8", newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise ConfigError(f"{path}: empty dataset file")
    header = rows[0]
    if header[:4] != ["id", "split", "y", "mu"]:
        raise ConfigError(f"{path}: unexpected header {header[:4]}")
    K = sum(1 for h in header if h.startswith("align_"))
    D = sum(1 for h in header if h.startswith("x_"))
    expected = ["id", "split", "y", "mu"] + [f"align_{k}" for k in range(K)] + [f"x_{d}" for d in range(D)]
    if header != expected:
        raise ConfigError(f"{path}: malformed header")
    body = rows[1:]
    if not body:
        raise ConfigError(f"{path}: no samples")
    for n, r in enumerate(body, start=2):
        if len(r) != len(header):
            raise ConfigError(f"{path}:{n}: expected {len(header)} columns, got {len(r)}")
    try:
        cols = list(zip(*body))
        ids = np.array(cols[0], dtype=np.int64)
        split = np.array(cols[1], dtype="<U5")
        y = np.array(cols[2], dtype=np.int64)
        mu = np.array(cols[3], dtype=float)
        align = np.array([r[4 : 4 + K] for r in body], dtype=np.int64).astype(bool).reshape(len(body), K)
        X = np.array([r[4 + K :] for r in body], dtype=float).reshape(len(body), D)
    except ValueError as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    if not set(np.unique(split)) <= set(SPLITS):
        raise ConfigError(f"{path}: unknown split value")
    if spec is None:
        C = int(y.max()) + 1
        spec = DatasetSpec(
            num_classes=max(C, 2),
            train_per_class=int(np.sum(split == "train")) // max(C, 1) or 1,
            test_per_class=max(int(np.sum(split == "test")) // max(C, 1), 2**K),
            core_dim=max(D, 2),
            biases=tuple(BiasSpec(f"bias_{k}", 0.0, float(K - k) + 1.0, 2) for k in range(K)),
        )
    elif spec.num_biases != K or spec.input_dim != D:
        raise ConfigError(f"{path}: columns do not match the dataset spec")

    ds = Dataset(spec, ids, split, y, align, mu, X)
    if spec.num_classes == 2:
        ds.bias_labels = np.where(align, y[:, None], 1 - y[:, None])
    elif spec.train_per_class > 0:
        # Conflicting labels are not recoverable from the CSV for C > 2;
        # regeneration from the spec is exact when the file is untouched.
        try:
            ref = generate(spec)
        except ConfigError:
            ref = None
        if ref is not None and ref.equals(ds):
            ds.bias_labels = ref.bias_labels
    return ds
