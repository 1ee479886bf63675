"""Contrastive debiasing driven by a spuriosity ranking.

For an anchor in bucket ``r`` of class ``c``, positives come from class ``c``
at buckets above ``r`` (less spurious) and negatives from class ``c`` at
bucket ``r`` itself. The encoder is trained with a supervised contrastive
loss on these pairs while the whole network is trained with cross entropy.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import NamedTuple

import numpy as np

from sebra import tinynn as nn
from sebra.errors import ConfigError, NumericalError


@dataclass(frozen=True)
class ContrastiveConfig:
    tau: float = 0.1
    gamma: float = 0.5
    num_pos: int = 1
    num_neg: int = 4
    epochs: int = 30
    lr: float = 0.05
    batch_size: int = 32
    seed: int = 0
    hidden: tuple[int, ...] = (64, 32)
    activation: str = "tanh"
    normalize: bool = True

    def __post_init__(self):
        object.__setattr__(self, "hidden", tuple(int(h) for h in self.hidden))

    def validate(self) -> None:
        if not self.tau > 0:
            raise ConfigError("tau must be positive")
        if self.gamma < 0:
            raise ConfigError("gamma must be >= 0")
        if self.num_pos < 1 or self.num_neg < 0:
            raise ConfigError("need num_pos >= 1 and num_neg >= 0")
        if self.epochs < 0 or not self.lr > 0 or self.batch_size < 1:
            raise ConfigError("invalid optimisation settings")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["hidden"] = list(self.hidden)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ContrastiveConfig":
        try:
            return cls(**d)
        except TypeError as exc:
            raise ConfigError(f"bad contrastive config: {exc}") from exc


class PairBatch(NamedTuple):
    anchor_id: int
    positive_ids: np.ndarray
    negative_ids: np.ndarray


class PairSampler:
    """Per-class bucket pools built once from a ranked list."""

    def __init__(self, ranked, ids, y):
        label = {int(i): int(c) for i, c in zip(ids, y)}
        self._bucket = {}
        self._class = {}
        pools: dict[int, dict[int, list[int]]] = {}
        for sid, b in zip(ranked.sample_ids, ranked.buckets):
            sid, b = int(sid), int(b)
            if sid not in label:
                raise ConfigError(f"ranked sample {sid} missing from the dataset")
            c = label[sid]
            self._bucket[sid] = b
            self._class[sid] = c
            pools.setdefault(c, {}).setdefault(b, []).append(sid)
        self._same = {}
        self._higher = {}
        for c, by_bucket in pools.items():
            order = sorted(by_bucket)
            for j, b in enumerate(order):
                self._same[c, b] = np.array(by_bucket[b], dtype=np.int64)
                above = [s for bb in order[j + 1 :] for s in by_bucket[bb]]
                self._higher[c, b] = np.array(above, dtype=np.int64)

    def sample(self, anchor: int, num_pos: int, num_neg: int, rng: np.random.Generator) -> PairBatch | None:
        anchor = int(anchor)
        if anchor not in self._bucket:
            raise ConfigError(f"anchor {anchor} is not in the ranked list")
        key = (self._class[anchor], self._bucket[anchor])
        pos_pool = self._higher[key]
        if len(pos_pool) == 0:
            return None
        neg_pool = self._same[key]
        neg_pool = neg_pool[neg_pool != anchor]
        if num_neg > 0 and len(neg_pool) == 0:
            return None
        pos = rng.choice(pos_pool, size=num_pos, replace=len(pos_pool) < num_pos)
        if num_neg > 0:
            neg = rng.choice(neg_pool, size=num_neg, replace=len(neg_pool) < num_neg)
        else:
            neg = np.zeros(0, dtype=np.int64)
        return PairBatch(anchor, pos, neg)


def sample_pairs(ranked, dataset, anchor: int, num_pos: int, num_neg: int, rng) -> PairBatch | None:
    """Draw one anchor's pairs; ``None`` means the anchor is skipped."""
    return PairSampler(ranked, dataset.ids, dataset.y).sample(anchor, num_pos, num_neg, rng)


def _normalize(z: np.ndarray):
    norm = np.linalg.norm(z, axis=-1, keepdims=True)
    if np.any(norm == 0):
        raise NumericalError("zero-norm embedding")
    return z / norm, norm


def supcon_loss_and_grad(z, z_pos, z_neg, tau: float, normalize: bool = True):
    """Loss for one anchor and its gradients w.r.t. z, z_pos and z_neg."""
    z = np.asarray(z, dtype=float)
    z_pos = np.atleast_2d(np.asarray(z_pos, dtype=float))
    z_neg = np.asarray(z_neg, dtype=float).reshape(-1, z.shape[-1])
    if len(z_pos) == 0:
        raise ConfigError("at least one positive is required")
    if normalize:
        za, na = _normalize(z[None, :])
        zp, npn = _normalize(z_pos)
        zn, nn_ = _normalize(z_neg) if len(z_neg) else (z_neg, np.ones((0, 1)))
        za = za[0]
    else:
        za, zp, zn = z, z_pos, z_neg
    others = np.vstack([zp, zn])
    s = others @ za / tau
    m = s.max()
    lse = m + np.log(np.sum(np.exp(s - m)))
    M = len(zp)
    loss = float(lse - s[:M].mean())

    g = np.exp(s - lse)
    g[:M] -= 1.0 / M
    d_za = (g @ others) / tau
    d_others = np.outer(g, za) / tau
    d_zp, d_zn = d_others[:M], d_others[M:]
    if normalize:
        d_za = (d_za - za * (za @ d_za)) / na[0]
        d_zp = (d_zp - zp * np.sum(zp * d_zp, axis=1, keepdims=True)) / npn
        if len(zn):
            d_zn = (d_zn - zn * np.sum(zn * d_zn, axis=1, keepdims=True)) / nn_
    return loss, d_za, d_zp, d_zn


def supcon_loss(z, z_pos, z_neg, tau: float, normalize: bool = True) -> float:
    return supcon_loss_and_grad(z, z_pos, z_neg, tau, normalize)[0]


def batch_objective(
    params: nn.ModelParams,
    X: np.ndarray,
    y: np.ndarray,
    anchors: np.ndarray,
    pairs: list[PairBatch | None],
    row_of: dict[int, int],
    config: ContrastiveConfig,
):
    """Objective and gradients for one mini-batch of anchors (row indices).

    The contrastive term is averaged over anchors that have pairs and enters
    the network at the embedding, so only the encoder sees it; the CE term is
    ``gamma`` times the mean over all anchors.
    """
    B = len(anchors)
    rows = list(anchors)
    slots = []
    for pb in pairs:
        if pb is None:
            slots.append(None)
            continue
        p_rows = [row_of[int(s)] for s in pb.positive_ids]
        n_rows = [row_of[int(s)] for s in pb.negative_ids]
        slots.append((len(rows), len(p_rows), len(n_rows)))
        rows.extend(p_rows + n_rows)
    rows = np.array(rows, dtype=np.int64)

    pred, cache = nn.forward(params, X[rows], y[rows])
    Z = cache.post[-1]
    dZ = np.zeros_like(Z)
    active = [k for k, s in enumerate(slots) if s is not None]
    con = 0.0
    for k in active:
        off, mp, mn = slots[k]
        loss, da, dp, dn = supcon_loss_and_grad(
            Z[k], Z[off : off + mp], Z[off + mp : off + mp + mn], config.tau, config.normalize
        )
        con += loss
        dZ[k] += da
        dZ[off : off + mp] += dp
        dZ[off + mp : off + mp + mn] += dn
    if active:
        con /= len(active)
        dZ /= len(active)
    ce = float(np.mean(nn.ce_loss(pred.probs[:B], y[anchors])))
    # backward() divides CE by the stacked row count; rescale to a mean over anchors.
    w = np.zeros(len(rows))
    w[:B] = config.gamma * len(rows) / B
    grads = nn.backward(params, cache, y[rows], weights=w, dembed=dZ if active else None)
    return con + config.gamma * ce, grads


def debias_train(
    params: nn.ModelParams,
    X: np.ndarray,
    y: np.ndarray,
    ids: np.ndarray,
    ranked,
    config: ContrastiveConfig,
) -> nn.ModelParams:
    """Minimise contrastive + gamma * CE over mini-batches of anchors."""
    config.validate()
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=np.int64)
    ids = np.asarray(ids, dtype=np.int64)
    row_of = {int(s): i for i, s in enumerate(ids)}
    sampler = PairSampler(ranked, ids, y)
    rng = np.random.default_rng(config.seed)
    n = len(X)
    for _ in range(config.epochs):
        order = rng.permutation(n)
        for start in range(0, n, config.batch_size):
            anchors = order[start : start + config.batch_size]
            pairs = [sampler.sample(ids[a], config.num_pos, config.num_neg, rng) for a in anchors]
            if config.gamma == 0 and all(p is None for p in pairs):
                continue
            _, grads = batch_objective(params, X, y, anchors, pairs, row_of, config)
            params = nn.sgd_step(params, grads, config.lr)
    return params
