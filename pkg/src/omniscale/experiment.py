"""Training protocol: one set of hyperparameters for every dataset, several seeds per run.

``fit`` only ever receives the training split. The test split is passed to
``evaluate`` after training has finished, so nothing about the test data can
influence the weights.
"""
from __future__ import annotations

import hashlib
import json
import math
import platform
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable

import numpy as np

from . import __version__
from . import tensor as T
from .data_io import TimeSeriesDataset, prepare_splits
from .errors import InvalidArgumentError, RunAbortedError, TrainingDivergedError
from .models import (
    FCN_KERNELS,
    INIT_SCHEME,
    RESIDUAL_ORDER,
    Classifier,
    ModelSpec,
    analytic_weight_count,
    build_model,
    fcn_receptive_field,
)
from .optim import Adam, ReduceLROnPlateau
from .stats import per_dataset_ranks

RESULT_SCHEMA_VERSION = 1
DEFAULT_SEEDS = tuple(range(10))


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 500
    learning_rate: float = 1e-3
    plateau_factor: float = 0.5
    plateau_patience: int = 50
    min_lr: float = 1e-4
    batch_divisor: int = 10
    batch_floor: int = 2
    batch_cap: int = 16
    batch_size: int | None = None  # overrides the rule when set
    seeds: tuple[int, ...] = DEFAULT_SEEDS
    znorm: bool = False
    interpolate: bool = False
    device: str = "cpu"

    def __post_init__(self):
        object.__setattr__(self, "seeds", tuple(int(s) for s in self.seeds))
        if self.epochs < 1:
            raise InvalidArgumentError("epochs must be >= 1")
        if not self.seeds:
            raise InvalidArgumentError("at least one seed is required")
        if len(set(self.seeds)) != len(self.seeds):
            raise InvalidArgumentError("seeds must be distinct")
        if self.learning_rate <= 0 or self.min_lr <= 0:
            raise InvalidArgumentError("learning rates must be positive")
        if self.batch_size is not None and self.batch_size < 1:
            raise InvalidArgumentError("batch_size must be >= 1")
        if not 1 <= self.batch_floor <= self.batch_cap:
            raise InvalidArgumentError("batch floor and cap must satisfy 1 <= floor <= cap")
        if self.device != "cpu":
            raise InvalidArgumentError(f"only the cpu device is available, got {self.device!r}")

    def batch_size_for(self, n_train: int) -> int:
        if self.batch_size is not None:
            return min(self.batch_size, n_train)
        return batch_size(n_train, self.batch_divisor, self.batch_floor, self.batch_cap)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["seeds"] = list(self.seeds)
        return d

    @classmethod
    def from_dict(cls, d) -> "TrainConfig":
        return cls(**d)


def batch_size(n_train: int, divisor=10, floor=2, cap=16) -> int:
    """``clamp(round_half_up(n_train / divisor), floor, cap)``."""
    if n_train < 1:
        raise InvalidArgumentError("n_train must be >= 1")
    rounded = (2 * n_train + divisor) // (2 * divisor)
    return max(floor, min(cap, rounded))


# -- fingerprints -------------------------------------------------------------

def fingerprint(spec: ModelSpec, config: TrainConfig, extra: dict | None = None) -> dict:
    """Everything needed to rerun a result, plus a digest of it."""
    body = {
        "package_version": __version__,
        "model": spec.to_dict(),
        "weight_count": analytic_weight_count(spec),
        "train_config": config.to_dict(),
        "residual_order": RESIDUAL_ORDER,
        "init": INIT_SCHEME,
        "bn_eps": T.BN_EPS,
        "bn_momentum": T.BN_MOMENTUM,
        "optimizer": "adam(0.9, 0.999, 1e-8)",
        "loss": "softmax-cross-entropy",
        "lr_monitor": "train-loss",
        "numpy": np.__version__,
        "python": platform.python_version(),
    }
    if extra:
        body.update(extra)
    digest = hashlib.sha256(json.dumps(body, sort_keys=True).encode()).hexdigest()
    return dict(body, sha256=digest)


# -- model specs from CLI-style names -------------------------------------------

def model_spec_for(name: str, train: TimeSeriesDataset, **overrides) -> ModelSpec:
    """``os-cnn``, ``os-cnn-res:K``, ``mos-cnn``, ``fcn`` or ``fcn-scaled`` sized for ``train``."""
    name = name.lower()
    base = dict(n_classes=train.n_classes, n_variates=train.n_variates, series_length=train.max_length)
    if name == "os-cnn":
        base["kind"] = "OS_CNN"
    elif name.startswith("os-cnn-res"):
        _, _, k = name.partition(":")
        base.update(kind="OS_CNN_RES", depth=int(k) if k else 1)
    elif name == "mos-cnn":
        base["kind"] = "MOS_CNN"
    elif name == "fcn":
        base["kind"] = "FCN"
    elif name == "fcn-scaled":
        base["kind"] = "FCN_SCALED"
    else:
        raise InvalidArgumentError(f"unknown model {name!r}")
    base.update(overrides)
    return ModelSpec(**base)


# -- training -----------------------------------------------------------------

@dataclass
class TrainingLog:
    losses: list[float] = field(default_factory=list)
    learning_rates: list[float] = field(default_factory=list)
    batch_size: int = 0


def _labels_array(ds: TimeSeriesDataset) -> np.ndarray:
    return np.asarray(ds.labels, dtype=np.int64)


def fit(model: Classifier, train: TimeSeriesDataset, config: TrainConfig, seed: int) -> TrainingLog:
    """Adam on softmax cross-entropy over the training split only."""
    x = train.to_array()
    y = _labels_array(train)
    n = len(x)
    if n == 0:
        raise InvalidArgumentError("empty training split")
    bs = config.batch_size_for(n)
    rng = np.random.default_rng([seed, 1])
    opt = Adam(model.parameters(), lr=config.learning_rate)
    schedule = ReduceLROnPlateau(opt, config.plateau_factor, config.plateau_patience, config.min_lr)
    log = TrainingLog(batch_size=bs)
    model.train()
    for epoch in range(config.epochs):
        order = rng.permutation(n)
        total = 0.0
        for start in range(0, n, bs):
            idx = order[start : start + bs]
            opt.zero_grad()
            loss = T.softmax_cross_entropy(model(T.Tensor(x[idx])), y[idx])
            value = float(loss.data)
            if not math.isfinite(value):
                raise TrainingDivergedError(epoch, seed)
            loss.backward()
            opt.step()
            total += value * len(idx)
        epoch_loss = total / n
        log.losses.append(epoch_loss)
        log.learning_rates.append(schedule.step(epoch_loss))
    model.eval()
    return log


def evaluate(model: Classifier, test: TimeSeriesDataset) -> float:
    if len(test) == 0:
        raise InvalidArgumentError("empty test split")
    probs = model.predict_proba(test.to_array())
    return float(np.mean(np.argmax(probs, axis=1) == _labels_array(test)))


@dataclass
class SeedResult:
    seed: int
    accuracy: float
    final_loss: float | None
    wall_time: float


def train(spec: ModelSpec, train_split: TimeSeriesDataset, test_split: TimeSeriesDataset, config: TrainConfig,
          seed: int) -> SeedResult:
    """Build with ``seed``, fit on the training split, then score the test split once."""
    start = time.perf_counter()
    model = build_model(spec, seed)
    log = fit(model, train_split, config, seed)
    acc = evaluate(model, test_split)
    return SeedResult(seed, acc, log.losses[-1] if log.losses else None, time.perf_counter() - start)


# -- protocol ---------------------------------------------------------------------

@dataclass
class RunResult:
    dataset: str
    model: str
    fingerprint: dict
    seeds: list[int]
    accuracies: list[float]
    wall_time: float
    status: str = "complete"
    schema_version: int = RESULT_SCHEMA_VERSION

    def __post_init__(self):
        if len(self.seeds) != len(self.accuracies):
            raise InvalidArgumentError("one accuracy per seed is required")
        if any(not 0.0 <= a <= 1.0 for a in self.accuracies):
            raise InvalidArgumentError("accuracies must lie in [0, 1]")

    @property
    def mean_accuracy(self) -> float | None:
        return math.fsum(self.accuracies) / len(self.accuracies) if self.accuracies else None

    def to_dict(self) -> dict:
        d = asdict(self)
        d["mean_accuracy"] = self.mean_accuracy
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    @classmethod
    def from_dict(cls, d) -> "RunResult":
        d = dict(d)
        d.pop("mean_accuracy", None)
        if d.get("schema_version") != RESULT_SCHEMA_VERSION:
            raise InvalidArgumentError(f"unsupported result schema {d.get('schema_version')!r}")
        return cls(**d)


def append_result(path, result: RunResult) -> None:
    with Path(path).open("a", encoding="utf-8") as fh:
        fh.write(result.to_json() + "\n")


def read_results(path) -> list[RunResult]:
    out = []
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        if line.strip():
            out.append(RunResult.from_dict(json.loads(line)))
    return out


Trainer = Callable[[ModelSpec, TimeSeriesDataset, TimeSeriesDataset, TrainConfig, int], SeedResult]


def run_protocol(train_split: TimeSeriesDataset, test_split: TimeSeriesDataset, config: TrainConfig,
                 model: str | ModelSpec = "os-cnn", trainer: Trainer = train, jobs: int = 1,
                 out_path=None, dataset_name: str | None = None, **spec_overrides) -> RunResult:
    """Run every seed in ``config.seeds`` and aggregate; optionally append the result to a JSON-lines file.

    A seed that fails stops the run. The seeds that did finish are appended as
    a partial result and carried by the raised :class:`RunAbortedError`.
    """
    train_split, test_split = prepare_splits(train_split, test_split, config.znorm, config.interpolate)
    if isinstance(model, ModelSpec):
        spec, model_name = model, model.kind
    else:
        spec, model_name = model_spec_for(model, train_split, **spec_overrides), model
    name = dataset_name or train_split.name
    fp = fingerprint(spec, config, {"dataset": name})
    start = time.perf_counter()
    done: dict[int, SeedResult] = {}
    failure = None
    if jobs <= 1:
        for seed in config.seeds:
            try:
                done[seed] = trainer(spec, train_split, test_split, config, seed)
            except (TrainingDivergedError, ArithmeticError) as exc:
                failure = (seed, exc)
                break
    else:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            futures = {seed: pool.submit(trainer, spec, train_split, test_split, config, seed) for seed in config.seeds}
            for seed, fut in futures.items():
                try:
                    done[seed] = fut.result()
                except (TrainingDivergedError, ArithmeticError) as exc:
                    failure = failure or (seed, exc)
    seeds = [s for s in config.seeds if s in done]
    result = RunResult(name, model_name, fp, seeds, [done[s].accuracy for s in seeds],
                       time.perf_counter() - start, "complete" if failure is None else "aborted")
    if out_path is not None:
        append_result(out_path, result)
    if failure is not None:
        seed, exc = failure
        raise RunAbortedError(f"seed {seed} failed: {exc}", result) from exc
    return result


# -- receptive-field sweep -------------------------------------------------------

FCN_REFERENCE_RF = 1 + sum(k - 1 for k in FCN_KERNELS)


def rf_sweep(train_split: TimeSeriesDataset, test_split: TimeSeriesDataset, rf_values, mode: str,
             config: TrainConfig, trainer: Trainer = train, jobs: int = 1, out_path=None,
             os_overrides: dict | None = None) -> list[RunResult]:
    """One scaled FCN per receptive field in ``rf_values``, then one OS-CNN for reference."""
    if mode not in ("fixed_channels", "fixed_size"):
        raise InvalidArgumentError(f"mode must be fixed_channels or fixed_size, got {mode!r}")
    if not rf_values:
        raise InvalidArgumentError("rf_values is empty")
    results = []
    for rf in rf_values:
        spec = model_spec_for("fcn-scaled", train_split, fcn_mode=mode, rf_scale=float(rf) / FCN_REFERENCE_RF)
        res = run_protocol(train_split, test_split, config, spec, trainer, jobs, out_path)
        res.model = f"FCN_SCALED[{mode}, rf={fcn_receptive_field(spec)}]"
        results.append(res)
    os_res = run_protocol(train_split, test_split, config, "os-cnn", trainer, jobs, out_path, **(os_overrides or {}))
    results.append(os_res)
    return results


def rank_table(results_by_dataset: dict[str, list[RunResult]]) -> list[dict]:
    """Average rank (1 = best mean accuracy) of each model across datasets."""
    datasets = sorted(results_by_dataset)
    if not datasets:
        raise InvalidArgumentError("no results to rank")
    models = [r.model for r in results_by_dataset[datasets[0]]]
    table = []
    for d in datasets:
        by_model = {r.model: r.mean_accuracy for r in results_by_dataset[d]}
        if set(by_model) != set(models):
            raise InvalidArgumentError(f"dataset {d} has a different set of models")
        table.append([by_model[m] for m in models])
    ranks = per_dataset_ranks(np.array(table)).mean(axis=0)
    rows = [{"model": m, "average_rank": float(r), "datasets": len(datasets)} for m, r in zip(models, ranks)]
    return sorted(rows, key=lambda row: row["average_rank"])


def with_seeds(config: TrainConfig, seeds) -> TrainConfig:
    return replace(config, seeds=tuple(seeds))
