"""
Logged transitions, per-customer episodes, time-discounted returns and n-step targets.

A dataset file is line-delimited JSON: a header line naming the observation columns,
then one transition per line. Provenance (SimStore config, collection level, seed)
goes into a ``<dataset>.meta.json`` sidecar.
"""

import dataclasses
import json
import logging
from collections import defaultdict
from pathlib import Path
from typing import Any, Callable, Dict, Iterable, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np

from simstore_orl.errors import ConfigError, ContractViolation, DatasetParseError
from simstore_orl.sim.features import NUM_FEATURES, OBSERVATION_FIELDS, PRICE_COLUMN

logger = logging.getLogger(__name__)

FORMAT_NAME = "simstore-transitions"
FORMAT_VERSION = 1
NORMALIZATION_MODES = ("minmax", "standard")


@dataclasses.dataclass(frozen=True)
class TransitionRecord:
    o: Tuple[float, ...]
    t: float
    a: int
    c: int
    r: float
    y_hat: int
    o_next: Optional[Tuple[float, ...]]
    terminal: bool

    def __post_init__(self):
        if (self.o_next is None) != bool(self.terminal):
            raise ContractViolation("o_next must be absent exactly when the record is terminal")
        if self.a not in (0, 1) or self.y_hat not in (0, 1):
            raise ContractViolation(f"a and y_hat must be binary, got a={self.a}, y_hat={self.y_hat}")
        if len(self.o) != NUM_FEATURES:
            raise ContractViolation(f"observation must have {NUM_FEATURES} values, got {len(self.o)}")


@dataclasses.dataclass
class Episode:
    customer_id: int
    records: List[TransitionRecord]

    def __len__(self):
        return len(self.records)


class TransitionRecorder:
    """
    Turns a stream of decisions into TransitionRecords.

    A record stays open until the same customer's next order arrives (that order's
    observation becomes ``o_next``) or the customer can no longer order, in which
    case it is terminal. ``finish`` closes everything still open as terminal.
    """

    def __init__(self):
        self._rows: List[Dict[str, Any]] = []
        self._open: Dict[int, int] = {}

    def add_step(self, observation: Sequence[float], time: float, action: int,
                 customer_id: int, reward: float, y_hat: int, customer_active: bool = True):
        observation = tuple(float(v) for v in observation)
        previous = self._open.pop(customer_id, None)
        if previous is not None:
            self._rows[previous]["o_next"] = observation
        self._rows.append(dict(o=observation, t=float(time), a=int(action), c=int(customer_id),
                               r=float(reward), y_hat=int(y_hat), o_next=None))
        if customer_active:
            self._open[customer_id] = len(self._rows) - 1

    def __len__(self):
        return len(self._rows)

    def finish(self) -> List[TransitionRecord]:
        self._open.clear()
        return [TransitionRecord(terminal=row["o_next"] is None, **row) for row in self._rows]


@dataclasses.dataclass
class TransitionArrays:
    """Column view of a dataset; ``next_index`` points at the successor record or is -1."""
    obs: np.ndarray
    t: np.ndarray
    a: np.ndarray
    c: np.ndarray
    r: np.ndarray
    y_hat: np.ndarray
    next_obs: np.ndarray
    terminal: np.ndarray
    next_index: np.ndarray

    def __len__(self):
        return len(self.t)


class Dataset:
    """An immutable list of TransitionRecords."""

    def __init__(self, records: Iterable[TransitionRecord] = ()):
        self.records: Tuple[TransitionRecord, ...] = tuple(records)

    def __len__(self):
        return len(self.records)

    def __iter__(self):
        return iter(self.records)

    def episodes(self) -> List[Episode]:
        """Group records by customer, chronologically, ordered by first appearance."""
        grouped: Dict[int, List[TransitionRecord]] = defaultdict(list)
        for record in self.records:
            grouped[record.c].append(record)
        return [Episode(customer_id, sorted(records, key=lambda rec: rec.t))
                for customer_id, records in grouped.items()]

    @classmethod
    def from_episodes(cls, episodes: Iterable[Episode]) -> "Dataset":
        return cls(record for episode in episodes for record in episode.records)

    def to_arrays(self) -> TransitionArrays:
        n = len(self.records)
        obs = np.array([rec.o for rec in self.records], dtype=np.float64).reshape(n, NUM_FEATURES)
        next_obs = np.zeros_like(obs)
        terminal = np.array([rec.terminal for rec in self.records], dtype=bool)
        for i, rec in enumerate(self.records):
            if rec.o_next is not None:
                next_obs[i] = rec.o_next
        times = np.array([rec.t for rec in self.records], dtype=np.float64)
        customers = np.array([rec.c for rec in self.records], dtype=np.int64)

        next_index = np.full(n, -1, dtype=np.int64)
        by_customer: Dict[int, List[int]] = defaultdict(list)
        for i, rec in enumerate(self.records):
            by_customer[rec.c].append(i)
        for indices in by_customer.values():
            indices.sort(key=lambda i: times[i])
            for current, successor in zip(indices, indices[1:]):
                if not terminal[current]:
                    next_index[current] = successor

        return TransitionArrays(
            obs=obs, t=times,
            a=np.array([rec.a for rec in self.records], dtype=np.int64),
            c=customers,
            r=np.array([rec.r for rec in self.records], dtype=np.float64),
            y_hat=np.array([rec.y_hat for rec in self.records], dtype=np.int64),
            next_obs=next_obs, terminal=terminal, next_index=next_index)


def _check_gamma(gamma: float):
    if not 0.0 <= gamma <= 1.0:
        raise ContractViolation(f"gamma must be in [0, 1], got {gamma}")


def _discount(gamma: float, elapsed, time_unit: float):
    # 0 ** 0 == 1, so gamma = 0 keeps the reward of the record itself.
    return np.power(gamma, np.asarray(elapsed, dtype=np.float64) / time_unit)


def compute_return(episode: Episode, i: int, gamma: float, time_unit: float = 1.0) -> float:
    """Time-discounted sum of this customer's rewards from record ``i`` onwards."""
    _check_gamma(gamma)
    if not 0 <= i < len(episode):
        raise ContractViolation(f"index {i} outside episode of length {len(episode)}")
    records = episode.records[i:]
    rewards = np.array([rec.r for rec in records])
    elapsed = np.array([rec.t for rec in records]) - records[0].t
    return float(np.sum(rewards * _discount(gamma, elapsed, time_unit)))


def n_step_target(episode: Episode, i: int, n: int, gamma: float, time_unit: float,
                  q_target: Callable[[Tuple[float, ...]], Sequence[float]]) -> float:
    """n-step, time-discounted TD target of record ``i``; no bootstrap past a terminal."""
    _check_gamma(gamma)
    if n < 1:
        raise ContractViolation(f"n must be >= 1, got {n}")
    records = episode.records
    m = min(n, len(records) - i)
    t_i = records[i].t
    target = sum(float(_discount(gamma, records[i + k].t - t_i, time_unit)) * records[i + k].r
                 for k in range(m))
    last = records[i + m - 1]
    if last.terminal:
        return float(target)
    if i + m >= len(records):
        raise ContractViolation("episode ends on a non-terminal record; cannot bootstrap")
    bootstrap = float(np.max(q_target(last.o_next)))
    return float(target + _discount(gamma, records[i + m].t - t_i, time_unit) * bootstrap)


@dataclasses.dataclass
class NStepTargets:
    """
    Vectorised n-step targets: ``reward_sum + discount * max_a Q_target(bootstrap_obs)``.

    ``discount`` is zero wherever the episode ends within n steps.
    """
    reward_sum: np.ndarray
    discount: np.ndarray
    bootstrap_obs: np.ndarray
    bootstrap_index: np.ndarray

    @classmethod
    def build(cls, arrays: TransitionArrays, n: int, gamma: float, time_unit: float = 1.0,
              reward_scale: float = 1.0) -> "NStepTargets":
        _check_gamma(gamma)
        if n < 1:
            raise ContractViolation(f"n must be >= 1, got {n}")
        broken = ~arrays.terminal & (arrays.next_index < 0)
        if np.any(broken):
            raise ContractViolation(
                f"{int(broken.sum())} non-terminal records have no successor in the dataset")

        rewards = arrays.r / reward_scale
        current = np.arange(len(arrays))
        reward_sum = rewards.copy()
        for _ in range(n - 1):
            successor = arrays.next_index[current]
            extend = successor >= 0
            if not np.any(extend):
                break
            step = successor[extend]
            elapsed = arrays.t[step] - arrays.t[extend]
            reward_sum[extend] += _discount(gamma, elapsed, time_unit) * rewards[step]
            current = np.where(extend, successor, current)

        bootstrap_index = arrays.next_index[current]
        has_bootstrap = bootstrap_index >= 0
        safe_index = np.where(has_bootstrap, bootstrap_index, 0)
        discount = np.where(has_bootstrap,
                            _discount(gamma, arrays.t[safe_index] - arrays.t, time_unit), 0.0)
        bootstrap_obs = np.where(has_bootstrap[:, None], arrays.obs[safe_index], 0.0)
        return cls(reward_sum=reward_sum, discount=discount, bootstrap_obs=bootstrap_obs,
                   bootstrap_index=bootstrap_index)


def split_episodes(dataset: Dataset, train_fraction: float,
                   rng: np.random.Generator) -> Tuple[Dataset, Dataset]:
    """Assign whole episodes to train or test."""
    episodes = dataset.episodes()
    if not episodes:
        raise ContractViolation("cannot split an empty dataset")
    if not 0.0 <= train_fraction <= 1.0:
        raise ContractViolation(f"train fraction must be in [0, 1], got {train_fraction}")
    order = rng.permutation(len(episodes))
    num_train = int(round(train_fraction * len(episodes)))
    train = [episodes[i] for i in sorted(order[:num_train])]
    test = [episodes[i] for i in sorted(order[num_train:])]
    return Dataset.from_episodes(train), Dataset.from_episodes(test)


def split_orders(dataset: Dataset, train_fraction: float,
                 rng: np.random.Generator) -> Tuple[Dataset, Dataset]:
    """Assign individual records to train or test, ignoring episodes."""
    if len(dataset) == 0:
        raise ContractViolation("cannot split an empty dataset")
    if not 0.0 <= train_fraction <= 1.0:
        raise ContractViolation(f"train fraction must be in [0, 1], got {train_fraction}")
    order = rng.permutation(len(dataset))
    num_train = int(round(train_fraction * len(dataset)))
    records = dataset.records
    return (Dataset(records[i] for i in sorted(order[:num_train])),
            Dataset(records[i] for i in sorted(order[num_train:])))


@dataclasses.dataclass
class NormalizationSpec:
    """Per-feature (min, max) or (mean, sd) statistics plus the reward scale."""
    mode: str
    center: np.ndarray
    spread: np.ndarray
    reward_scale: float = 1.0

    def transform(self, observations) -> np.ndarray:
        x = np.asarray(observations, dtype=np.float64)
        if self.mode == "minmax":
            width = self.spread - self.center
            safe = np.where(width > 0, width, 1.0)
            return np.where(width > 0, (x - self.center) / safe, 0.0)
        safe = np.where(self.spread > 0, self.spread, 1.0)
        return np.where(self.spread > 0, (x - self.center) / safe, 0.0)

    def scale_reward(self, reward):
        return np.asarray(reward, dtype=np.float64) / self.reward_scale

    def to_mapping(self) -> Dict[str, Any]:
        return {"mode": self.mode, "center": self.center.tolist(),
                "spread": self.spread.tolist(), "reward_scale": self.reward_scale}

    @classmethod
    def from_mapping(cls, mapping: Mapping[str, Any]) -> "NormalizationSpec":
        return cls(mode=mapping["mode"], center=np.asarray(mapping["center"], dtype=np.float64),
                   spread=np.asarray(mapping["spread"], dtype=np.float64),
                   reward_scale=float(mapping["reward_scale"]))


def fit_normalizer(train: Union[Dataset, TransitionArrays], mode: str) -> NormalizationSpec:
    """Fit statistics on the training split only."""
    if mode not in NORMALIZATION_MODES:
        raise ConfigError(f"state transformation must be one of {NORMALIZATION_MODES}, got {mode!r}")
    arrays = train.to_arrays() if isinstance(train, Dataset) else train
    if len(arrays) == 0:
        raise ContractViolation("cannot fit a normalizer on an empty training split")
    if mode == "minmax":
        center, spread = arrays.obs.min(axis=0), arrays.obs.max(axis=0)
    else:
        center, spread = arrays.obs.mean(axis=0), arrays.obs.std(axis=0)
    max_abs_reward = float(np.max(np.abs(arrays.r)))
    return NormalizationSpec(mode=mode, center=center, spread=spread,
                             reward_scale=max_abs_reward if max_abs_reward > 0 else 1.0)


def apply_normalizer(spec: NormalizationSpec, value):
    """Scalars are rewards; anything with a feature axis is an observation (batch)."""
    if np.ndim(value) == 0:
        return float(spec.scale_reward(value))
    return spec.transform(value)


def _header() -> Dict[str, Any]:
    return {"format": FORMAT_NAME, "version": FORMAT_VERSION, "fields": list(OBSERVATION_FIELDS)}


def meta_path(path: Union[str, Path]) -> Path:
    path = Path(path)
    return path.with_name(path.name + ".meta.json")


def write_dataset(path: Union[str, Path], records: Iterable[TransitionRecord],
                  meta: Optional[Mapping[str, Any]] = None) -> int:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    count = 0
    with open(path, "w", encoding="utf-8") as handle:
        handle.write(json.dumps(_header()) + "\n")
        for record in records:
            row = dataclasses.asdict(record)
            row["o"] = list(record.o)
            row["o_next"] = None if record.o_next is None else list(record.o_next)
            handle.write(json.dumps(row) + "\n")
            count += 1
    if meta is not None:
        with open(meta_path(path), "w", encoding="utf-8") as handle:
            json.dump(dict(meta, records=count), handle, indent=2, sort_keys=True)
    logger.info("wrote %d transitions to %s", count, path)
    return count


def _parse_record(row: Any) -> TransitionRecord:
    if not isinstance(row, dict):
        raise ValueError("record must be a JSON object")
    o_next = row.get("o_next")
    return TransitionRecord(
        o=tuple(float(v) for v in row["o"]),
        t=float(row["t"]),
        a=int(row["a"]),
        c=int(row["c"]),
        r=float(row["r"]),
        y_hat=int(row["y_hat"]),
        o_next=None if o_next is None else tuple(float(v) for v in o_next),
        terminal=bool(row.get("terminal", o_next is None)),
    )


def read_dataset(path: Union[str, Path]) -> Dataset:
    records = []
    with open(path, "r", encoding="utf-8") as handle:
        for line_number, line in enumerate(handle, start=1):
            if not line.strip():
                continue
            try:
                row = json.loads(line)
            except json.JSONDecodeError as err:
                raise DatasetParseError(f"invalid JSON: {err.msg}", line_number) from err
            if line_number == 1 and isinstance(row, dict) and "format" in row:
                if row.get("format") != FORMAT_NAME or row.get("fields") != list(OBSERVATION_FIELDS):
                    raise DatasetParseError("header does not match the transition schema",
                                            line_number)
                continue
            try:
                records.append(_parse_record(row))
            except (KeyError, TypeError, ValueError, ContractViolation) as err:
                raise DatasetParseError(f"malformed transition: {err}", line_number) from err
    logger.debug("read %d transitions from %s", len(records), path)
    return Dataset(records)


def read_metadata(path: Union[str, Path]) -> Dict[str, Any]:
    sidecar = meta_path(path)
    if not sidecar.exists():
        return {}
    with open(sidecar, "r", encoding="utf-8") as handle:
        return json.load(handle)


def prices(arrays: TransitionArrays) -> np.ndarray:
    return arrays.obs[:, PRICE_COLUMN]
