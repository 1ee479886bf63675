"""Spuriosity ranking by modulated ERM, plus the plain-ERM proxy ranker.

Each epoch the still-unranked samples are upweighted by ``p_y ** (1/beta)``
and trained on; afterwards every sample whose ``p_y`` crossed
``p_critical`` is dropped from training and appended to the ranked list,
ordered by decreasing weight. Leftovers after ``max_rank`` epochs form the
residual bucket.
"""

from __future__ import annotations

import csv
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable, Iterator, NamedTuple

import numpy as np

from sebra import tinynn as nn
from sebra.controllers import lambda_from_p_critical, p_critical_from, select, upweight
from sebra.errors import ConfigError, DomainError, NumericalError


@dataclass(frozen=True)
class SebraConfig:
    beta: float = 1.25
    lam: float | None = None
    p_critical: float | None = 0.75
    max_rank: int = 30
    lr: float = 0.05
    batch_size: int = 32
    seed: int = 0
    hidden: tuple[int, ...] = (32,)
    activation: str = "relu"
    # Ablation switch: False trains selected samples with u = 1.
    use_upweight: bool = True

    def __post_init__(self):
        object.__setattr__(self, "hidden", tuple(int(h) for h in self.hidden))

    def validate(self) -> None:
        if not self.beta > 0:
            raise ConfigError("beta must be positive")
        if (self.lam is None) == (self.p_critical is None):
            raise ConfigError("give exactly one of lambda and p_critical")
        try:
            self.thresholds()
        except DomainError as exc:
            raise ConfigError(str(exc)) from exc
        if self.max_rank < 0:
            raise ConfigError("max_rank must be >= 0")
        if not self.lr > 0 or self.batch_size < 1:
            raise ConfigError("lr must be positive and batch_size >= 1")

    def thresholds(self) -> tuple[float, float]:
        """(lambda, p_critical), deriving whichever was not given."""
        if self.p_critical is not None:
            return lambda_from_p_critical(self.p_critical, self.beta), self.p_critical
        return self.lam, p_critical_from(self.lam, self.beta)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["lambda"] = d.pop("lam")
        d["hidden"] = list(self.hidden)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "SebraConfig":
        d = dict(d)
        if "lambda" in d:
            d["lam"] = d.pop("lambda")
        try:
            return cls(**d)
        except TypeError as exc:
            raise ConfigError(f"bad sebra config: {exc}") from exc


class RankRecord(NamedTuple):
    sample_id: int
    bucket: int
    u_at_rank: float
    fine_index: int


@dataclass
class RankedList:
    """Train samples from most to least spurious."""

    sample_ids: np.ndarray
    buckets: np.ndarray
    u_at_rank: np.ndarray
    residual_bucket: int

    def __len__(self) -> int:
        return len(self.sample_ids)

    def __iter__(self) -> Iterator[RankRecord]:
        for i, (s, b, u) in enumerate(zip(self.sample_ids, self.buckets, self.u_at_rank)):
            yield RankRecord(int(s), int(b), float(u), i)

    @property
    def records(self) -> list[RankRecord]:
        return list(self)

    def fine_index_of(self, ids) -> np.ndarray:
        pos = {int(s): i for i, s in enumerate(self.sample_ids)}
        try:
            return np.array([pos[int(i)] for i in np.atleast_1d(ids)], dtype=np.int64)
        except KeyError as exc:
            raise ConfigError(f"sample id {exc} not in ranked list") from None

    def bucket_of(self, ids) -> np.ndarray:
        return self.buckets[self.fine_index_of(ids)]

    def save(self, path: str | Path, dataset=None) -> None:
        """Write ``fine_index,sample_id,bucket,u_at_rank,mu,group_key``."""
        from sebra.synthdata import group_key

        lookup = {}
        if dataset is not None:
            lookup = {int(s): i for i, s in enumerate(dataset.ids)}
        with open(path, "w", encoding="utf-8", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["fine_index", "sample_id", "bucket", "u_at_rank", "mu", "group_key"])
            for r in self:
                if r.sample_id in lookup:
                    j = lookup[r.sample_id]
                    mu = f"{dataset.mu[j]:.9g}"
                    key = group_key(dataset.y[j], dataset.align[j])
                else:
                    mu, key = "", ""
                w.writerow([r.fine_index, r.sample_id, r.bucket, f"{r.u_at_rank:.9g}", mu, key])

    @classmethod
    def load(cls, path: str | Path) -> "RankedList":
        header = ["fine_index", "sample_id", "bucket", "u_at_rank", "mu", "group_key"]
        with open(path, encoding="utf-8", newline="") as fh:
            rows = list(csv.reader(fh))
        if not rows or rows[0] != header:
            raise ConfigError(f"{path}: not a ranked-list CSV")
        body = rows[1:]
        if not body or any(len(r) != len(header) for r in body):
            raise ConfigError(f"{path}: malformed ranked-list rows")
        try:
            fine = np.array([int(r[0]) for r in body])
            ids = np.array([int(r[1]) for r in body], dtype=np.int64)
            buckets = np.array([int(r[2]) for r in body], dtype=np.int64)
            u = np.array([float(r[3]) for r in body])
        except ValueError as exc:
            raise ConfigError(f"{path}: {exc}") from exc
        if not np.array_equal(fine, np.arange(len(body))):
            raise ConfigError(f"{path}: fine_index must run 0..N-1 in order")
        if len(np.unique(ids)) != len(ids):
            raise ConfigError(f"{path}: duplicate sample ids")
        return cls(ids, buckets, u, int(buckets.max()))


@dataclass
class RankState:
    v_prev: np.ndarray
    v_curr: np.ndarray
    u: np.ndarray
    p_y_last: np.ndarray

    @classmethod
    def fresh(cls, n: int) -> "RankState":
        return cls(np.ones(n, np.int8), np.ones(n, np.int8), np.ones(n), np.full(n, np.nan))


@dataclass
class RankResult:
    ranked: RankedList
    params: nn.ModelParams
    # v after each epoch (row t), for auditing monotonicity.
    v_history: list[np.ndarray] = field(default_factory=list)


EpochHook = Callable[[int, nn.ModelParams, RankState], None]
BatchHook = Callable[[int, np.ndarray, np.ndarray], None]


def _order(u: np.ndarray, ids: np.ndarray) -> np.ndarray:
    # u descending, ties by ascending id
    return np.lexsort((ids, -u))


def init_model(input_dim: int, num_classes: int, config: SebraConfig, seed: int | None = None):
    dims = [input_dim, *config.hidden, num_classes]
    return nn.init(dims, config.activation, config.seed if seed is None else seed)


def _weights(p_y: np.ndarray, config: SebraConfig) -> np.ndarray:
    return upweight(p_y, config.beta) if config.use_upweight else np.ones_like(p_y)


def _p_y(params, X, y) -> np.ndarray:
    pred, _ = nn.forward(params, X, y)
    return pred.p_y


def sebra_epoch(
    params: nn.ModelParams,
    state: RankState,
    X: np.ndarray,
    y: np.ndarray,
    config: SebraConfig,
    t: int,
    rng: np.random.Generator,
    on_batch: BatchHook | None = None,
) -> tuple[nn.ModelParams, RankState, np.ndarray]:
    """One upweight -> train -> select pass over the active samples.

    Returns the positions (into ``X``) of samples ranked in this epoch,
    sorted by decreasing ``u``.
    """
    if t >= config.max_rank:
        raise ConfigError(f"epoch {t} is past max_rank={config.max_rank}")
    _, p_c = config.thresholds()
    active = np.flatnonzero(state.v_prev == 1)
    order = active[rng.permutation(len(active))]
    for start in range(0, len(order), config.batch_size):
        batch = order[start : start + config.batch_size]
        pred, cache = nn.forward(params, X[batch], y[batch])
        u = _weights(pred.p_y, config)
        if on_batch is not None:
            on_batch(t, batch, u)
        grads = nn.backward(params, cache, y[batch], weights=u)
        params = nn.sgd_step(params, grads, config.lr)

    p_y = state.p_y_last.copy()
    if len(active):
        p_y[active] = _p_y(params, X[active], y[active])
        if not np.all(np.isfinite(p_y[active])):
            raise NumericalError(f"non-finite probabilities at epoch {t}")
    u_all = state.u.copy()
    u_all[active] = _weights(p_y[active], config)
    v_curr = state.v_prev.copy()
    v_curr[active] = select(p_y[active], state.v_prev[active], p_c)
    newly = np.flatnonzero((state.v_prev == 1) & (v_curr == 0))
    newly = newly[_order(u_all[newly], newly)]
    new_state = RankState(v_prev=v_curr, v_curr=v_curr.copy(), u=u_all, p_y_last=p_y)
    return params, new_state, newly


def sebra_rank(
    X: np.ndarray,
    y: np.ndarray,
    ids: np.ndarray,
    config: SebraConfig,
    num_classes: int | None = None,
    on_epoch: EpochHook | None = None,
    on_batch: BatchHook | None = None,
) -> RankResult:
    config.validate()
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=np.int64)
    ids = np.asarray(ids, dtype=np.int64)
    C = num_classes or int(y.max()) + 1
    params = init_model(X.shape[1], C, config)
    rng = np.random.default_rng(config.seed)
    state = RankState.fresh(len(X))
    if on_epoch is not None:
        on_epoch(0, params, state)

    positions, buckets, us, history = [], [], [], []
    for t in range(config.max_rank):
        if not np.any(state.v_prev):
            break
        params, state, newly = sebra_epoch(params, state, X, y, config, t, rng, on_batch)
        positions.append(newly)
        buckets.append(np.full(len(newly), t))
        us.append(state.u[newly])
        history.append(state.v_prev.copy())
        if on_epoch is not None:
            on_epoch(t + 1, params, state)

    rest = np.flatnonzero(state.v_prev == 1)
    if len(rest):
        u_rest = _weights(_p_y(params, X[rest], y[rest]), config)
        perm = _order(u_rest, ids[rest])
        positions.append(rest[perm])
        buckets.append(np.full(len(rest), config.max_rank))
        us.append(u_rest[perm])
    pos = np.concatenate(positions) if positions else np.zeros(0, np.int64)
    ranked = RankedList(
        sample_ids=ids[pos],
        buckets=np.concatenate(buckets).astype(np.int64) if buckets else np.zeros(0, np.int64),
        u_at_rank=np.concatenate(us) if us else np.zeros(0),
        residual_bucket=config.max_rank,
    )
    return RankResult(ranked, params, history)


def erm_rank(
    X: np.ndarray,
    y: np.ndarray,
    ids: np.ndarray,
    config: SebraConfig,
    num_classes: int | None = None,
    on_epoch: EpochHook | None = None,
) -> RankResult:
    """Bucket = first epoch whose end-of-epoch p_y exceeds the threshold."""
    config.validate()
    _, threshold = config.thresholds()
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=np.int64)
    ids = np.asarray(ids, dtype=np.int64)
    C = num_classes or int(y.max()) + 1
    params = init_model(X.shape[1], C, config)
    rng = np.random.default_rng(config.seed)
    n = len(X)
    first = np.full(n, config.max_rank, dtype=np.int64)
    p_at = np.zeros(n)
    state = RankState.fresh(n)
    if on_epoch is not None:
        on_epoch(0, params, state)
    for t in range(config.max_rank):
        order = rng.permutation(n)
        for start in range(0, n, config.batch_size):
            batch = order[start : start + config.batch_size]
            _, cache = nn.forward(params, X[batch], y[batch])
            params = nn.sgd_step(params, nn.backward(params, cache, y[batch]), config.lr)
        p_y = _p_y(params, X, y)
        if not np.all(np.isfinite(p_y)):
            raise NumericalError(f"non-finite probabilities at epoch {t}")
        crossed = (first == config.max_rank) & (p_y > threshold)
        first[crossed] = t
        p_at[crossed] = p_y[crossed]
        state = RankState(
            v_prev=(first == config.max_rank).astype(np.int8),
            v_curr=(first == config.max_rank).astype(np.int8),
            u=np.ones(n),
            p_y_last=p_y,
        )
        if on_epoch is not None:
            on_epoch(t + 1, params, state)
    rest = first == config.max_rank
    if np.any(rest):
        p_at[rest] = _p_y(params, X[rest], y[rest])
    pos = np.lexsort((ids, -p_at, first))
    return RankResult(RankedList(ids[pos], first[pos], p_at[pos], config.max_rank), params)


def ablation_variant(config: SebraConfig, name: str) -> SebraConfig:
    if name == "ce+v":
        return replace(config, use_upweight=False)
    if name == "ce+v+u":
        return replace(config, use_upweight=True)
    raise ConfigError(f"unknown ablation variant {name!r}")
