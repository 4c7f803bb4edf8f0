"""
Configuration for SimStore runs.

Config files are YAML. The ``simstore`` section is keyed by the display names of the
SimStore hyperparameter table (e.g. ``Ratio of regular customers: 0.8``); durations may
be given as plain numbers of days or as strings like ``"4 hours"`` or ``"15 minutes"``.
"""

import copy
import dataclasses
import hashlib
import json
import logging
import math
import re
from pathlib import Path
from typing import Any, Dict, Mapping, Optional, Union

import yaml

from simstore_orl.errors import ConfigError
from simstore_orl.sim.features import RiskVarParams

logger = logging.getLogger(__name__)

# Unit lengths in days. A month is 30 days throughout the package.
_UNIT_DAYS = {
    "second": 1 / 86400, "seconds": 1 / 86400, "s": 1 / 86400,
    "minute": 1 / 1440, "minutes": 1 / 1440, "min": 1 / 1440,
    "hour": 1 / 24, "hours": 1 / 24, "h": 1 / 24,
    "day": 1.0, "days": 1.0, "d": 1.0,
    "week": 7.0, "weeks": 7.0,
    "month": 30.0, "months": 30.0,
}
_DURATION_RE = re.compile(r"^\s*([0-9]*\.?[0-9]+(?:[eE][-+]?[0-9]+)?)\s*([a-zA-Z]+)\s*$")


def parse_duration(value: Union[int, float, str]) -> float:
    """Parse a duration into days. Bare numbers are already days."""
    if isinstance(value, bool):
        raise ConfigError(f"invalid duration {value!r}")
    if isinstance(value, (int, float)):
        return float(value)
    match = _DURATION_RE.match(str(value))
    if match is None or match.group(2).lower() not in _UNIT_DAYS:
        raise ConfigError(f"invalid duration {value!r}")
    return float(match.group(1)) * _UNIT_DAYS[match.group(2).lower()]


# Display name -> SimConfig field.
TABLE_KEYS = {
    "Number of customers": "num_initial_customers",
    "Ratio of regular customers": "ratio_regular",
    "Ratio of sleeper attack bad actors among bad actors": "ratio_sleeper_among_bad",
    "Mean time between new customer sign-ups, regular customer": "mean_signup_interval_regular",
    "Mean time between new customer sign-ups, bad actors": "mean_signup_interval_bad",
    "Regular customer, mean time between consecutive orders": "regular_mean_order_interval",
    "Regular customer, probability of reinstate": "regular_reinstate_prob",
    "Regular customer, mean time between consecutive orders, post-reinstate":
        "regular_mean_order_interval_post_reinstate",
    "Bad actor, percentile of most expensive items to target during attack":
        "bad_actor_target_percentile",
    "Bad actor, sleeper attack, percentile of cheapest items to target before attack":
        "sleeper_cheap_percentile",
    "Bad actor, sleeper attack, mean time between consecutive orders before attack":
        "sleeper_mean_order_interval_before_attack",
    "Bad actor, sleeper attack, mean number of orders before attack":
        "sleeper_mean_orders_before_attack",
    "Bad actor, sleeper attack, probability of chargeback before attack":
        "sleeper_chargeback_prob_before_attack",
    "Bad actor, sleeper attack, probability of chargeback during attack":
        "sleeper_chargeback_prob_during_attack",
    "Bad actor, sleeper attack, mean time between consecutive orders during attack":
        "sleeper_mean_order_interval_during_attack",
    "Bad actor, immediate attack, probability of chargeback": "immediate_chargeback_prob",
    "Bad actor, immediate attack, mean time between consecutive orders":
        "immediate_mean_order_interval",
    "Item price, mean": "price_mean",
    "Item price, standard deviation": "price_sd",
    "Number of products": "num_items",
    "Number of product categories": "num_categories",
    "Maximum time between orders placed": "max_order_interval",
    "Simulation duration": "sim_duration",
    "Random seed": "rng_seed",
    "Risk variable beta parameters": "risk_params",
}
FIELD_TO_KEY = {field: key for key, field in TABLE_KEYS.items()}

_DURATION_FIELDS = {
    "mean_signup_interval_regular", "mean_signup_interval_bad",
    "regular_mean_order_interval", "regular_mean_order_interval_post_reinstate",
    "sleeper_mean_order_interval_before_attack", "sleeper_mean_order_interval_during_attack",
    "immediate_mean_order_interval", "max_order_interval", "sim_duration",
}
_PROBABILITY_FIELDS = {
    "ratio_regular", "ratio_sleeper_among_bad", "regular_reinstate_prob",
    "sleeper_chargeback_prob_before_attack", "sleeper_chargeback_prob_during_attack",
    "immediate_chargeback_prob",
}


@dataclasses.dataclass
class SimConfig:
    """SimStore hyperparameters. Durations are in days."""
    num_initial_customers: int = 1000
    ratio_regular: float = 0.8
    ratio_sleeper_among_bad: float = 0.2
    mean_signup_interval_regular: float = 4 / 24
    mean_signup_interval_bad: float = 15 / 1440
    regular_mean_order_interval: float = 2.0
    regular_reinstate_prob: float = 0.2
    regular_mean_order_interval_post_reinstate: float = 4.0
    bad_actor_target_percentile: float = 10.0
    sleeper_cheap_percentile: float = 10.0
    sleeper_mean_order_interval_before_attack: float = 2.0
    sleeper_mean_orders_before_attack: float = 5.0
    sleeper_chargeback_prob_before_attack: float = 0.01
    sleeper_chargeback_prob_during_attack: float = 0.99
    sleeper_mean_order_interval_during_attack: float = 6 / 24
    immediate_chargeback_prob: float = 0.99
    immediate_mean_order_interval: float = 6 / 24
    price_mean: float = 50.0
    price_sd: float = 100.0
    num_items: int = 1000
    num_categories: int = 20
    max_order_interval: float = 30.0
    sim_duration: float = 90.0
    rng_seed: int = 0
    risk_params: RiskVarParams = dataclasses.field(default_factory=RiskVarParams)

    @property
    def price_log_sd(self) -> float:
        """Log-scale sigma of the price distribution, solved from the price moments."""
        self._check_price_moments()
        return math.sqrt(math.log1p((self.price_sd / self.price_mean) ** 2))

    @property
    def price_log_mean(self) -> float:
        """Log-scale mu of the price distribution, solved from the price moments."""
        return math.log(self.price_mean) - self.price_log_sd ** 2 / 2

    def _check_price_moments(self):
        if not (self.price_mean > 0 and self.price_sd > 0):
            raise ConfigError(
                f"log-normal price needs positive mean and sd, got "
                f"mean={self.price_mean}, sd={self.price_sd}")

    def validate(self) -> "SimConfig":
        for name in _PROBABILITY_FIELDS:
            value = getattr(self, name)
            if not 0.0 <= value <= 1.0:
                raise ConfigError(f"{FIELD_TO_KEY[name]} must be in [0, 1], got {value}")
        for name in _DURATION_FIELDS:
            value = getattr(self, name)
            # A zero-length run is allowed and simply produces no orders.
            if value < 0 or (value == 0 and name != "sim_duration"):
                raise ConfigError(f"{FIELD_TO_KEY[name]} must be > 0, got {value}")
        for name in ("bad_actor_target_percentile", "sleeper_cheap_percentile"):
            value = getattr(self, name)
            if not 0.0 < value <= 100.0:
                raise ConfigError(f"{FIELD_TO_KEY[name]} must be in (0, 100], got {value}")
        if self.num_items < 0 or self.num_initial_customers < 0:
            raise ConfigError("counts must be non-negative")
        if self.num_categories < 1:
            raise ConfigError("Number of product categories must be >= 1")
        if self.sleeper_mean_orders_before_attack < 0:
            raise ConfigError("mean number of orders before attack must be >= 0")
        self._check_price_moments()
        self.risk_params.validate()
        return self

    @classmethod
    def from_mapping(cls, mapping: Optional[Mapping[str, Any]]) -> "SimConfig":
        """Build from a mapping keyed by table display names (field names also accepted)."""
        kwargs = {}
        for key, value in (mapping or {}).items():
            field = TABLE_KEYS.get(key, key if key in FIELD_TO_KEY else None)
            if field is None:
                raise ConfigError(f"unknown SimStore hyperparameter {key!r}")
            if field in _DURATION_FIELDS:
                value = parse_duration(value)
            elif field == "risk_params":
                value = RiskVarParams.from_mapping(value)
            elif field in ("num_initial_customers", "num_items", "num_categories", "rng_seed"):
                value = int(value)
            else:
                value = float(value)
            kwargs[field] = value
        return cls(**kwargs).validate()

    def to_mapping(self) -> Dict[str, Any]:
        out = {}
        for field in dataclasses.fields(self):
            value = getattr(self, field.name)
            if field.name == "risk_params":
                value = value.to_mapping()
            out[FIELD_TO_KEY[field.name]] = value
        return out

    def replace(self, **changes) -> "SimConfig":
        return dataclasses.replace(self, **changes).validate()


@dataclasses.dataclass
class RunConfig:
    """A parsed config file. Only the ``simstore`` section is interpreted here."""
    simstore: SimConfig
    collection: Dict[str, Any] = dataclasses.field(default_factory=dict)
    evaluation: Dict[str, Any] = dataclasses.field(default_factory=dict)
    train: Dict[str, Any] = dataclasses.field(default_factory=dict)
    search: Dict[str, Any] = dataclasses.field(default_factory=dict)
    raw: Dict[str, Any] = dataclasses.field(default_factory=dict)

    @property
    def eval_seeds(self):
        seeds = self.evaluation.get("seeds", 5)
        if isinstance(seeds, int):
            return list(range(seeds))
        return [int(seed) for seed in seeds]

    def digest(self) -> str:
        return config_hash(self.raw)


_SECTIONS = ("simstore", "collection", "evaluation", "train", "search")


def load_config(path: Union[str, Path]) -> RunConfig:
    try:
        with open(path, "r", encoding="utf-8") as handle:
            raw = yaml.safe_load(handle) or {}
    except OSError as err:
        raise ConfigError(f"cannot read config {path}: {err}") from err
    except yaml.YAMLError as err:
        raise ConfigError(f"cannot parse config {path}: {err}") from err
    return config_from_mapping(raw)


def config_from_mapping(raw: Mapping[str, Any]) -> RunConfig:
    if not isinstance(raw, Mapping):
        raise ConfigError("config root must be a mapping")
    unknown = set(raw) - set(_SECTIONS)
    if unknown:
        raise ConfigError(f"unknown config section(s): {sorted(unknown)}")
    sections = {name: copy.deepcopy(raw.get(name) or {}) for name in _SECTIONS[1:]}
    return RunConfig(simstore=SimConfig.from_mapping(raw.get("simstore")), raw=dict(raw),
                     **sections)


def config_hash(mapping: Mapping[str, Any]) -> str:
    """Stable sha256 of a JSON-serialisable mapping."""
    blob = json.dumps(mapping, sort_keys=True, default=str).encode("utf-8")
    return hashlib.sha256(blob).hexdigest()
