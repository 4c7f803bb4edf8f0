"""
Shared pieces of the offline trainers: hyperparameter schemas, tensor batches and the
epoch loop with best-snapshot selection and early stopping.
"""

import copy
import dataclasses
import logging
from typing import Any, Callable, Dict, List, Mapping, Optional

import numpy as np
import torch as t
from torch.nn import Module

from simstore_orl.data.dataset import (NORMALIZATION_MODES, Dataset, NormalizationSpec,
                                       NStepTargets, fit_normalizer)
from simstore_orl.errors import ConfigError, TrainingError
from simstore_orl.gbt.boosting import THRESHOLD_METRICS, GbtHyperparams
from simstore_orl.neural.modules import DTYPE
from simstore_orl.utils.tensor_utils import Timer, itpeek, shuffled_batches

logger = logging.getLogger(__name__)

ALGORITHMS = ("bc", "bgbt", "dqn", "modqn", "bcq", "crr", "cql")
CRR_MODES = ("binary", "exp", "all")

# Knobs every algorithm accepts; they steer splitting and stopping, not the model.
_RUN_KNOBS = {"seed", "patience", "train_fraction", "time_unit"}
_NETWORK_KNOBS = {"batch_size", "learning_rate", "num_layers", "max_epochs", "layer_size",
                  "state_transformation"}
_TD_KNOBS = _NETWORK_KNOBS | {"gamma", "target_update_frequency"}

ALLOWED_KNOBS = {
    "bc": _NETWORK_KNOBS,
    "bgbt": {"max_trees", "max_depth", "learning_rate", "colsample_bytree", "colsample_bylevel",
             "subsample", "scale_pos_weight", "threshold_metric"},
    "dqn": _TD_KNOBS | {"ensembles", "n_step", "is_double"},
    "modqn": _TD_KNOBS | {"ensembles", "n_step", "is_double", "beta"},
    "bcq": _TD_KNOBS | {"n_step", "is_double", "eval_eps", "unlikely_act_threshold",
                        "imitation_logits_penalty"},
    "crr": _TD_KNOBS | {"policy_improvement_mode", "beta", "ratio_upper_bound"},
    "cql": _TD_KNOBS | {"quantiles", "n_step", "cql_lambda"},
}

_ALIASES = {"lambda": "cql_lambda", "number_of_quantiles": "quantiles",
            "number_of_ensembles": "ensembles", "number_of_estimation_step": "n_step"}


@dataclasses.dataclass
class TrainSpec:
    """Hyperparameters of one training run. Unused knobs keep their defaults."""
    algorithm: str
    gamma: float = 0.9
    batch_size: int = 128
    learning_rate: float = 1e-3
    target_update_frequency: int = 250
    num_layers: int = 3
    layer_size: int = 64
    ensembles: int = 1
    n_step: int = 1
    max_epochs: int = 100
    state_transformation: str = "standard"
    is_double: bool = False
    beta: float = 1.0
    eval_eps: float = 0.0
    unlikely_act_threshold: float = 0.3
    imitation_logits_penalty: float = 1e-2
    policy_improvement_mode: str = "exp"
    ratio_upper_bound: float = 20.0
    quantiles: int = 8
    cql_lambda: float = 1.0
    max_trees: int = 1000
    max_depth: int = 6
    colsample_bytree: float = 1.0
    colsample_bylevel: float = 1.0
    subsample: float = 1.0
    scale_pos_weight: float = 1.0
    threshold_metric: str = "f1"
    seed: int = 0
    patience: int = 50
    train_fraction: float = 0.75
    time_unit: float = 1.0

    def validate(self) -> "TrainSpec":
        if self.algorithm not in ALGORITHMS:
            raise ConfigError(f"unknown algorithm {self.algorithm!r}; expected one of {ALGORITHMS}")
        if not 0.0 <= self.gamma <= 1.0:
            raise ConfigError(f"gamma must be in [0, 1], got {self.gamma}")
        for name in ("batch_size", "target_update_frequency", "num_layers", "layer_size",
                     "ensembles", "n_step", "max_epochs", "quantiles", "patience"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.state_transformation not in NORMALIZATION_MODES:
            raise ConfigError(f"state_transformation must be one of {NORMALIZATION_MODES}")
        if self.policy_improvement_mode not in CRR_MODES:
            raise ConfigError(f"policy_improvement_mode must be one of {CRR_MODES}, "
                              f"got {self.policy_improvement_mode!r}")
        if self.threshold_metric not in THRESHOLD_METRICS:
            raise ConfigError(f"threshold_metric must be one of {THRESHOLD_METRICS}")
        for name in ("eval_eps", "unlikely_act_threshold", "train_fraction"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ConfigError(f"{name} must be in [0, 1], got {getattr(self, name)}")
        if self.learning_rate < 0 or self.time_unit <= 0 or self.ratio_upper_bound <= 0:
            raise ConfigError("learning_rate must be >= 0; time_unit and ratio_upper_bound > 0")
        if self.algorithm == "crr" and self.beta <= 0:
            raise ConfigError(f"CRR beta must be > 0, got {self.beta}")
        if self.algorithm == "bgbt":
            self.gbt_hyperparams()
        return self

    @classmethod
    def from_mapping(cls, mapping: Mapping[str, Any],
                     algorithm: Optional[str] = None) -> "TrainSpec":
        """Build from a config section, rejecting knobs the algorithm does not use."""
        mapping = dict(mapping or {})
        algorithm = algorithm or mapping.pop("algorithm", None)
        mapping.pop("algorithm", None)
        if algorithm not in ALGORITHMS:
            raise ConfigError(f"unknown algorithm {algorithm!r}; expected one of {ALGORITHMS}")
        allowed = ALLOWED_KNOBS[algorithm] | _RUN_KNOBS
        types = {field.name: field.type for field in dataclasses.fields(cls)}
        kwargs = {}
        for key, value in mapping.items():
            name = _ALIASES.get(key, key)
            if name not in allowed:
                raise ConfigError(f"unknown hyperparameter {key!r} for algorithm {algorithm}")
            kwargs[name] = _coerce(types[name], value, key)
        return cls(algorithm=algorithm, **kwargs).validate()

    def to_mapping(self) -> Dict[str, Any]:
        """Only the knobs this algorithm uses (plus run knobs)."""
        allowed = ALLOWED_KNOBS[self.algorithm] | _RUN_KNOBS
        out = {"algorithm": self.algorithm}
        out.update({name: getattr(self, name) for name in sorted(allowed)})
        return out

    def replace(self, **changes) -> "TrainSpec":
        return dataclasses.replace(self, **changes).validate()

    def gbt_hyperparams(self) -> GbtHyperparams:
        return GbtHyperparams(max_trees=self.max_trees, max_depth=self.max_depth,
                              learning_rate=self.learning_rate,
                              colsample_bytree=self.colsample_bytree,
                              colsample_bylevel=self.colsample_bylevel, subsample=self.subsample,
                              scale_pos_weight=self.scale_pos_weight,
                              patience=self.patience).validate()


def _coerce(kind, value, key):
    try:
        if kind in (bool, "bool"):
            if isinstance(value, str):
                return value.strip().lower() in ("1", "true", "yes")
            return bool(value)
        if kind in (int, "int"):
            return int(value)
        if kind in (float, "float"):
            return float(value)
        return str(value)
    except (TypeError, ValueError) as err:
        raise ConfigError(f"invalid value {value!r} for hyperparameter {key!r}") from err


@dataclasses.dataclass
class Batch:
    """Tensors of a (normalised) transition set, aligned on the first axis."""
    obs: t.Tensor
    action: t.Tensor
    y_hat: t.Tensor
    reward_sum: t.Tensor
    discount: t.Tensor
    bootstrap_obs: t.Tensor

    def __len__(self):
        return len(self.action)

    def select(self, index: t.Tensor) -> "Batch":
        return Batch(**{field.name: getattr(self, field.name)[index]
                        for field in dataclasses.fields(self)})


def make_batch(dataset: Dataset, normalizer: NormalizationSpec, spec: TrainSpec) -> Batch:
    arrays = dataset.to_arrays()
    targets = NStepTargets.build(arrays, n=spec.n_step, gamma=spec.gamma,
                                 time_unit=spec.time_unit, reward_scale=normalizer.reward_scale)
    has_bootstrap = targets.bootstrap_index >= 0
    bootstrap_obs = np.where(has_bootstrap[:, None], normalizer.transform(targets.bootstrap_obs), 0.0)
    return Batch(
        obs=t.tensor(normalizer.transform(arrays.obs), dtype=DTYPE),
        action=t.tensor(arrays.a, dtype=t.long),
        y_hat=t.tensor(arrays.y_hat, dtype=t.long),
        reward_sum=t.tensor(targets.reward_sum, dtype=DTYPE),
        discount=t.tensor(targets.discount, dtype=DTYPE),
        bootstrap_obs=t.tensor(bootstrap_obs, dtype=DTYPE),
    )


def prepare(train: Dataset, test: Dataset, spec: TrainSpec):
    """Fit the normaliser on ``train`` and turn both splits into batches."""
    if len(train) == 0:
        raise TrainingError("training split is empty")
    normalizer = fit_normalizer(train, spec.state_transformation)
    return normalizer, make_batch(train, normalizer, spec), make_batch(test, normalizer, spec)


@dataclasses.dataclass
class TrainHistory:
    train_loss: List[float] = dataclasses.field(default_factory=list)
    test_loss: List[float] = dataclasses.field(default_factory=list)
    best_epoch: int = -1
    best_test_loss: float = float("inf")
    steps: int = 0

    def to_mapping(self) -> Dict[str, Any]:
        return dataclasses.asdict(self)


LossFn = Callable[[Batch], t.Tensor]


class EpochTrainer:
    """
    Minibatch training over shuffled epochs. After every epoch the objective is
    evaluated on the test split; the parameters with the lowest test objective are
    restored at the end, and training stops once ``patience`` epochs pass without
    improvement.
    """

    def __init__(self, spec: TrainSpec, modules: Mapping[str, Module], optimizer: t.optim.Optimizer,
                 loss_fn: LossFn, after_step: Optional[Callable[[int], None]] = None):
        self.spec = spec
        self.modules = dict(modules)
        self.optimizer = optimizer
        self.loss_fn = loss_fn
        self.after_step = after_step

    def _snapshot(self) -> Dict[str, Dict[str, t.Tensor]]:
        return {name: copy.deepcopy(module.state_dict()) for name, module in self.modules.items()}

    def _restore(self, snapshot):
        for name, module in self.modules.items():
            module.load_state_dict(snapshot[name])

    def _evaluate(self, batch: Batch) -> float:
        with t.no_grad():
            losses, sizes = [], []
            for index in shuffled_batches(len(batch), self.spec.batch_size, generator=None):
                losses.append(float(self.loss_fn(batch.select(index))))
                sizes.append(len(index))
        return float(np.average(losses, weights=sizes))

    def fit(self, train: Batch, test: Batch) -> TrainHistory:
        spec = self.spec
        history = TrainHistory()
        generator = t.Generator()
        generator.manual_seed(spec.seed)
        best = self._snapshot()

        with Timer(f"{spec.algorithm} training", logger):
            for epoch in range(spec.max_epochs):
                epoch_losses = []
                for index in shuffled_batches(len(train), spec.batch_size, generator=generator):
                    loss = self.loss_fn(train.select(index))
                    if not t.isfinite(loss):
                        raise TrainingError(f"non-finite loss at epoch {epoch}: {itpeek(loss)}")
                    self.optimizer.zero_grad()
                    loss.backward()
                    self.optimizer.step()
                    history.steps += 1
                    if self.after_step is not None:
                        self.after_step(history.steps)
                    epoch_losses.append(float(loss))

                train_loss = float(np.mean(epoch_losses))
                test_loss = self._evaluate(test) if len(test) else train_loss
                history.train_loss.append(train_loss)
                history.test_loss.append(test_loss)
                logger.debug("%s epoch %d train %.6g test %.6g", spec.algorithm, epoch,
                             train_loss, test_loss)
                if test_loss < history.best_test_loss:
                    history.best_test_loss, history.best_epoch = test_loss, epoch
                    best = self._snapshot()
                elif epoch - history.best_epoch >= spec.patience:
                    logger.info("%s stopped early at epoch %d (best %d)", spec.algorithm, epoch,
                                history.best_epoch)
                    break

        self._restore(best)
        return history
