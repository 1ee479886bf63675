"""Seeded experiment runs shared by the CLI and the acceptance suite.

A run seed ``s`` fans out to independent component seeds (dataset, ranker,
PD models, debiasing, ...) through :func:`derive_seed`, so changing one
component never shifts the random stream of another.
"""

from __future__ import annotations

import json
import zlib
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from sebra import tinynn as nn
from sebra.debias import ContrastiveConfig, debias_train
from sebra.errors import ConfigError
from sebra.metrics import (
    MetricsReport,
    kendall_tau_b,
    performance_disparity,
    robustness_report,
    summarize,
)
from sebra.ranking import RankedList, SebraConfig, ablation_variant, erm_rank, sebra_rank
from sebra.synthdata import Dataset, DatasetSpec, generate, ground_truth_order, synthcars_spec
from sebra.trace import Trace, TraceRecorder

MASK64 = (1 << 64) - 1


def splitmix64(x: int) -> int:
    x = (x + 0x9E3779B97F4A7C15) & MASK64
    x = ((x ^ (x >> 30)) * 0xBF58476D1CE4E5B9) & MASK64
    x = ((x ^ (x >> 27)) * 0x94D049BB133111EB) & MASK64
    return x ^ (x >> 31)


def derive_seed(master: int, component: str) -> int:
    """31-bit seed for ``component`` under run seed ``master``."""
    return splitmix64((int(master) & MASK64) ^ zlib.crc32(component.encode())) >> 33


COMPONENTS = ("dataset", "sebra", "erm", "pd", "random", "debias", "control")


def seed_table(master: int) -> dict[str, int]:
    return {c: derive_seed(master, c) for c in COMPONENTS}


@dataclass(frozen=True)
class ErmConfig:
    """Plain cross-entropy schedule used for PD models and the debiasing control."""

    epochs: int = 30
    lr: float = 0.05
    batch_size: int = 16
    hidden: tuple[int, ...] = (64,)
    activation: str = "relu"

    def __post_init__(self):
        object.__setattr__(self, "hidden", tuple(int(h) for h in self.hidden))

    def validate(self) -> None:
        if self.epochs < 0 or not self.lr > 0 or self.batch_size < 1:
            raise ConfigError("invalid ERM schedule")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["hidden"] = list(self.hidden)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ErmConfig":
        try:
            return cls(**d)
        except TypeError as exc:
            raise ConfigError(f"bad erm config: {exc}") from exc


def default_sebra() -> SebraConfig:
    return SebraConfig(
        beta=2.0, p_critical=0.65, max_rank=30, lr=0.2, batch_size=16, hidden=(32,), activation="relu"
    )


def default_contrastive() -> ContrastiveConfig:
    return ContrastiveConfig(tau=0.5, gamma=0.1, lr=0.1)


@dataclass(frozen=True)
class ExperimentConfig:
    dataset: DatasetSpec = field(default_factory=synthcars_spec)
    sebra: SebraConfig = field(default_factory=default_sebra)
    contrastive: ContrastiveConfig = field(default_factory=default_contrastive)
    erm: ErmConfig = field(default_factory=ErmConfig)
    pd_k: int = 100
    output_dir: str = "runs"
    seeds: tuple[int, ...] = (0, 1, 2, 3)

    def __post_init__(self):
        object.__setattr__(self, "seeds", tuple(int(s) for s in self.seeds))

    def validate(self) -> None:
        if not self.seeds:
            raise ConfigError("seeds must be non-empty")
        self.dataset.validate()
        self.sebra.validate()
        self.contrastive.validate()
        self.erm.validate()
        n_train = self.dataset.train_per_class * self.dataset.num_classes
        if not 0 < self.pd_k <= n_train // 2 or self.pd_k < self.dataset.num_classes:
            raise ConfigError(f"pd_k={self.pd_k} invalid for {n_train} training samples")

    def to_dict(self) -> dict:
        return {
            "dataset": self.dataset.to_dict(),
            "sebra": self.sebra.to_dict(),
            "contrastive": self.contrastive.to_dict(),
            "erm": self.erm.to_dict(),
            "pd_k": self.pd_k,
            "output_dir": self.output_dir,
            "seeds": list(self.seeds),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        known = {"dataset", "sebra", "contrastive", "erm", "pd_k", "output_dir", "seeds"}
        extra = set(d) - known
        if extra:
            raise ConfigError(f"unknown config keys: {sorted(extra)}")
        base = cls()
        return cls(
            dataset=DatasetSpec.from_dict(d["dataset"]) if "dataset" in d else base.dataset,
            sebra=SebraConfig.from_dict(d["sebra"]) if "sebra" in d else base.sebra,
            contrastive=ContrastiveConfig.from_dict(d["contrastive"]) if "contrastive" in d else base.contrastive,
            erm=ErmConfig.from_dict(d["erm"]) if "erm" in d else base.erm,
            pd_k=int(d.get("pd_k", base.pd_k)),
            output_dir=str(d.get("output_dir", base.output_dir)),
            seeds=tuple(d.get("seeds", base.seeds)),
        )


def load_config(path: str | Path | None) -> ExperimentConfig:
    if path is None:
        config = ExperimentConfig()
    else:
        try:
            with open(path, encoding="utf-8") as fh:
                raw = json.load(fh)
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        if not isinstance(raw, dict):
            raise ConfigError("config must be a JSON object")
        config = ExperimentConfig.from_dict(raw)
    config.validate()
    return config


def dataset_for(config: ExperimentConfig, seed: int) -> Dataset:
    return generate(replace(config.dataset, seed=derive_seed(seed, "dataset")))


# ----------------------------------------------------------------- ranking


def rank(dataset: Dataset, config: SebraConfig, method: str, seed: int, on_epoch=None) -> RankedList:
    """Rank the train split with ``method`` in {sebra, ce+v, erm}."""
    train = dataset.subset("train")
    C = dataset.spec.num_classes
    if method in ("sebra", "ce+v+u", "ce+v"):
        variant = "ce+v" if method == "ce+v" else "ce+v+u"
        cfg = replace(ablation_variant(config, variant), seed=derive_seed(seed, "sebra"))
        return sebra_rank(train.X, train.y, train.ids, cfg, C, on_epoch=on_epoch).ranked
    if method == "erm":
        cfg = replace(config, seed=derive_seed(seed, "erm"))
        return erm_rank(train.X, train.y, train.ids, cfg, C, on_epoch=on_epoch).ranked
    raise ConfigError(f"unknown ranking method {method!r}")


def rank_with_trace(dataset: Dataset, config: SebraConfig, method: str, seed: int) -> tuple[RankedList, Trace]:
    rec = TraceRecorder(dataset, config.max_rank)
    ranked = rank(dataset, config, method, seed, on_epoch=rec.on_epoch)
    return ranked, rec.result(method)


def random_ranking(dataset: Dataset, seed: int) -> RankedList:
    """Uniformly shuffled order; every sample gets its own bucket."""
    ids = dataset.ids[dataset.split == "train"]
    rng = np.random.default_rng(derive_seed(seed, "random"))
    order = ids[rng.permutation(len(ids))]
    n = len(order)
    return RankedList(order, np.arange(n, dtype=np.int64), np.ones(n), n - 1)


def ranking_tau(dataset: Dataset, ranked: RankedList) -> float:
    """Kendall tau-b between group rank and the ranking's bucket index."""
    train_ids = dataset.ids[dataset.split == "train"]
    return kendall_tau_b(ground_truth_order(dataset), ranked.bucket_of(train_ids))


# ----------------------------------------------------------------- ERM models


def train_erm(X: np.ndarray, y: np.ndarray, num_classes: int, config: ErmConfig, seed: int) -> nn.ModelParams:
    config.validate()
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=np.int64)
    params = nn.init([X.shape[1], *config.hidden, num_classes], config.activation, seed)
    rng = np.random.default_rng(seed)
    for _ in range(config.epochs):
        order = rng.permutation(len(X))
        for start in range(0, len(X), config.batch_size):
            b = order[start : start + config.batch_size]
            _, grads = nn.loss_and_grads(params, X[b], y[b])
            params = nn.sgd_step(params, grads, config.lr)
    return params


def erm_train_fn(config: ErmConfig, num_classes: int):
    """Adapter for :func:`sebra.metrics.performance_disparity`."""

    def fit(X, y, seed):
        params = train_erm(X, y, num_classes, config, seed)
        return lambda Xt: nn.predict(params, Xt)

    return fit


def pd(config: ExperimentConfig, dataset: Dataset, ranked: RankedList, seed: int) -> float:
    fit = erm_train_fn(config.erm, dataset.spec.num_classes)
    return performance_disparity(dataset, ranked, config.pd_k, fit, derive_seed(seed, "pd"))


# ----------------------------------------------------------------- debiasing


@dataclass
class DebiasOutcome:
    sebra: MetricsReport
    erm: MetricsReport
    sebra_params: nn.ModelParams
    erm_params: nn.ModelParams


def debias(config: ExperimentConfig, dataset: Dataset, ranked: RankedList, seed: int) -> DebiasOutcome:
    """Contrastive model from ``ranked`` plus an ERM control with the same network."""
    cc = replace(config.contrastive, seed=derive_seed(seed, "debias"))
    train = dataset.subset("train")
    test = dataset.subset("test")
    C = dataset.spec.num_classes
    dims = [train.X.shape[1], *cc.hidden, C]
    init = nn.init(dims, cc.activation, cc.seed)
    model = debias_train(init, train.X, train.y, train.ids, ranked, cc)
    control_cfg = ErmConfig(cc.epochs, cc.lr, cc.batch_size, cc.hidden, cc.activation)
    control = train_erm(train.X, train.y, C, control_cfg, derive_seed(seed, "control"))
    return DebiasOutcome(
        sebra=robustness_report(dataset, nn.predict(model, test.X)),
        erm=robustness_report(dataset, nn.predict(control, test.X)),
        sebra_params=model,
        erm_params=control,
    )


# ----------------------------------------------------------------- sweeps


ABLATION_ROWS = (("CE", "erm"), ("CE+v", "ce+v"), ("CE+v+u", "sebra"))


def ablation(config: ExperimentConfig) -> dict[str, dict]:
    """tau-b per loss variant, with per-seed values and mean/std."""
    out = {}
    datasets = {s: dataset_for(config, s) for s in config.seeds}
    for label, method in ABLATION_ROWS:
        taus = [ranking_tau(datasets[s], rank(datasets[s], config.sebra, method, s)) for s in config.seeds]
        out[label] = summarize(taus)
    return out


def beta_sweep(config: ExperimentConfig, betas=(0.5, 1.0, 2.0, 4.0, 8.0)) -> dict[float, dict]:
    """Sebra tau-b per beta, holding p_critical fixed."""
    _, p_c = config.sebra.thresholds()
    datasets = {s: dataset_for(config, s) for s in config.seeds}
    out = {}
    for beta in betas:
        cfg = replace(config.sebra, beta=beta, lam=None, p_critical=p_c)
        out[beta] = summarize([ranking_tau(datasets[s], rank(datasets[s], cfg, "sebra", s)) for s in config.seeds])
    return out
