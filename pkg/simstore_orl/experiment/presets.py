"""
Hyperparameter search spaces and the best parameters found for each collection level.

Every knob name matches a ``TrainSpec`` field.
"""

import dataclasses
import math
from typing import Any, Dict, Mapping, Sequence

import numpy as np

from simstore_orl.errors import ConfigError

LEVELS = ("medium", "expert")

GAMMAS = [0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9, 0.95, 0.99]
TARGET_UPDATE_FREQUENCIES = [50, 100, 250, 500, 1000, 2500, 5000]


@dataclasses.dataclass(frozen=True)
class Choice:
    options: Sequence[Any]

    def sample(self, rng: np.random.Generator):
        value = self.options[int(rng.integers(len(self.options)))]
        return value.item() if isinstance(value, np.generic) else value

    def contains(self, value) -> bool:
        return value in self.options


@dataclasses.dataclass(frozen=True)
class Uniform:
    low: float
    high: float

    def sample(self, rng: np.random.Generator) -> float:
        return float(rng.uniform(self.low, self.high))

    def contains(self, value) -> bool:
        return self.low <= value <= self.high


@dataclasses.dataclass(frozen=True)
class LogUniform:
    low: float
    high: float

    def sample(self, rng: np.random.Generator) -> float:
        return float(math.exp(rng.uniform(math.log(self.low), math.log(self.high))))

    def contains(self, value) -> bool:
        return self.low <= value <= self.high


_NETWORK_SPACE = {
    "batch_size": Choice([64, 128, 256]),
    "learning_rate": LogUniform(1e-4, 1e-1),
    "num_layers": Choice([2, 3, 4, 5]),
    "max_epochs": Choice([50, 100, 250]),
    "layer_size": Choice([32, 64, 128]),
    "state_transformation": Choice(["standard", "minmax"]),
}
_TD_SPACE = dict(_NETWORK_SPACE, gamma=Choice(GAMMAS),
                 target_update_frequency=Choice(TARGET_UPDATE_FREQUENCIES))
_DQN_SPACE = dict(_TD_SPACE, ensembles=Choice([2, 4, 8, 16]), n_step=Choice([1, 2, 3, 4]),
                  is_double=Choice([False, True]))

SEARCH_SPACES: Dict[str, Dict[str, Any]] = {
    "bc": dict(_NETWORK_SPACE),
    "bgbt": {
        "max_trees": Choice([500, 1000, 1500]),
        "max_depth": Choice([3, 4, 5, 6, 7, 8]),
        "learning_rate": LogUniform(1e-3, 1e-1),
        "colsample_bytree": Uniform(0.25, 1.0),
        "colsample_bylevel": Uniform(0.25, 1.0),
        "subsample": Uniform(0.25, 1.0),
        "scale_pos_weight": LogUniform(1e-1, 1e2),
        "threshold_metric": Choice(["f1", "reward"]),
    },
    "dqn": _DQN_SPACE,
    "modqn": dict(_DQN_SPACE, beta=LogUniform(1e-4, 1e1)),
    "bcq": dict(_TD_SPACE, n_step=Choice([1, 2, 3, 4]), is_double=Choice([False, True]),
                eval_eps=Uniform(0.0, 0.99), unlikely_act_threshold=Uniform(0.0, 0.99),
                imitation_logits_penalty=LogUniform(1e-4, 1e1)),
    "crr": dict(_TD_SPACE, policy_improvement_mode=Choice(["binary", "exp", "all"]),
                beta=LogUniform(1e-3, 1e1), ratio_upper_bound=LogUniform(1e-3, 1e2)),
    "cql": dict(_TD_SPACE, quantiles=Choice([2, 4, 8, 16]), n_step=Choice([1, 2, 3, 4]),
                cql_lambda=LogUniform(1e-3, 1e1)),
}

BEST_PARAMS: Dict[str, Dict[str, Dict[str, Any]]] = {
    "bc": {
        "medium": dict(batch_size=64, learning_rate=2.19e-3, num_layers=5, max_epochs=50,
                       layer_size=128, state_transformation="standard"),
        "expert": dict(batch_size=64, learning_rate=2.2e-3, num_layers=4, max_epochs=100,
                       layer_size=64, state_transformation="minmax"),
    },
    "bgbt": {
        "medium": dict(max_trees=1500, max_depth=3, learning_rate=2.79e-3, colsample_bytree=0.36,
                       colsample_bylevel=0.71, subsample=0.67, scale_pos_weight=0.48,
                       threshold_metric="reward"),
        "expert": dict(max_trees=1000, max_depth=8, learning_rate=7.8e-2, colsample_bytree=0.93,
                       colsample_bylevel=0.28, subsample=0.51, scale_pos_weight=0.15,
                       threshold_metric="reward"),
    },
    "dqn": {
        "medium": dict(gamma=0.9, batch_size=128, learning_rate=6.7e-2, target_update_frequency=250,
                       num_layers=4, ensembles=8, n_step=4, max_epochs=250, layer_size=32,
                       is_double=True, state_transformation="standard"),
        "expert": dict(gamma=0.3, batch_size=128, learning_rate=5.4e-3, target_update_frequency=50,
                       num_layers=4, ensembles=16, n_step=3, max_epochs=50, layer_size=32,
                       is_double=True, state_transformation="minmax"),
    },
    "modqn": {
        "medium": dict(gamma=0.6, batch_size=64, learning_rate=6e-3, target_update_frequency=5000,
                       num_layers=5, ensembles=8, n_step=3, max_epochs=100, layer_size=64,
                       is_double=True, state_transformation="minmax", beta=7.3e-2),
        "expert": dict(gamma=0.8, batch_size=256, learning_rate=8.7e-4, target_update_frequency=50,
                       num_layers=5, ensembles=8, n_step=3, max_epochs=50, layer_size=64,
                       is_double=True, state_transformation="minmax", beta=7.9e-3),
    },
    "bcq": {
        "medium": dict(gamma=0.7, batch_size=64, learning_rate=5.1e-4, target_update_frequency=250,
                       num_layers=3, n_step=2, max_epochs=100, layer_size=128, is_double=True,
                       eval_eps=9.4e-3, unlikely_act_threshold=0.86,
                       imitation_logits_penalty=3.2e-3, state_transformation="minmax"),
        "expert": dict(gamma=0.9, batch_size=128, learning_rate=3.9e-2, target_update_frequency=500,
                       num_layers=2, n_step=1, max_epochs=50, layer_size=64, is_double=True,
                       eval_eps=0.29, unlikely_act_threshold=0.77,
                       imitation_logits_penalty=0.91, state_transformation="standard"),
    },
    "crr": {
        "medium": dict(gamma=0.99, batch_size=128, learning_rate=1.6e-3, target_update_frequency=50,
                       num_layers=4, max_epochs=100, layer_size=64,
                       policy_improvement_mode="binary", state_transformation="standard"),
        "expert": dict(gamma=0.4, batch_size=256, learning_rate=5.3e-3, target_update_frequency=250,
                       num_layers=4, max_epochs=50, layer_size=32,
                       policy_improvement_mode="all", state_transformation="minmax"),
    },
    "cql": {
        "medium": dict(gamma=0.8, batch_size=256, learning_rate=3.5e-2, target_update_frequency=500,
                       num_layers=4, quantiles=16, n_step=4, max_epochs=100, layer_size=32,
                       state_transformation="standard", cql_lambda=0.79),
        "expert": dict(gamma=0.9, batch_size=64, learning_rate=1.4e-4, target_update_frequency=250,
                       num_layers=4, quantiles=4, n_step=2, max_epochs=50, layer_size=32,
                       state_transformation="minmax", cql_lambda=2.2e-3),
    },
}


def best_params(algorithm: str, level: str) -> Dict[str, Any]:
    try:
        return dict(BEST_PARAMS[algorithm][level])
    except KeyError as err:
        raise ConfigError(f"no preset for algorithm {algorithm!r} at level {level!r}") from err


def search_space(algorithm: str, overrides: Mapping[str, Any] = None) -> Dict[str, Any]:
    """The default space of ``algorithm``, with constants or sub-spaces from ``overrides``."""
    if algorithm not in SEARCH_SPACES:
        raise ConfigError(f"no search space for algorithm {algorithm!r}")
    space = dict(SEARCH_SPACES[algorithm])
    for key, value in (overrides or {}).items():
        space[key] = value if isinstance(value, (Choice, Uniform, LogUniform)) else Choice([value])
    return space


def sample_config(space: Mapping[str, Any], rng: np.random.Generator) -> Dict[str, Any]:
    """One draw from every dimension, in sorted key order so draws are reproducible."""
    return {key: space[key].sample(rng) for key in sorted(space)}
