"""
Logged-data collection with a daily retrained fraud classifier.

The behaviour policy starts out passing orders at random (probability 0.9). At the start
of every simulated day a gradient-boosted classifier is refit on the accumulated
(observation, inferred outcome) pairs and its thresholded policy takes over. Auto-close
stays active across retrains. The quality of the collected data is set by the level's
classifier preset. After the first retrain a fraction ``action_noise`` of the classifier's
decisions is flipped; only the medium preset sets it.
"""

import dataclasses
import logging
import math
from pathlib import Path
from typing import Any, Dict, List, Mapping, Optional, Union

import numpy as np

from simstore_orl.algos.policies import AutoClosePolicy, RandomPolicy, ThresholdPolicy
from simstore_orl.config import SimConfig
from simstore_orl.data.dataset import Dataset, TransitionRecorder, write_dataset
from simstore_orl.errors import ConfigError, ContractViolation
from simstore_orl.experiment.evaluate import policy_seed
from simstore_orl.gbt.boosting import GbtHyperparams, fit_gbt, select_threshold
from simstore_orl.sim.features import PRICE_COLUMN
from simstore_orl.sim.store import SimStore

logger = logging.getLogger(__name__)

DEFAULT_COLLECTION = {
    "medium": {"classifier": {"max_depth": 2, "max_trees": 25}, "threshold_metric": "f1",
               "window_days": 7, "action_noise": 0.2},
    "expert": {"classifier": {"max_depth": 6, "max_trees": 300}, "threshold_metric": "reward",
               "window_days": None},
}


@dataclasses.dataclass
class CollectionSpec:
    level: str
    pass_prob: float = 0.9
    retrain_every: float = 1.0
    duration: Optional[float] = None
    classifier: GbtHyperparams = dataclasses.field(default_factory=GbtHyperparams)
    threshold_metric: str = "f1"
    window_days: Optional[float] = None
    valid_fraction: float = 0.25
    action_noise: float = 0.0

    def validate(self, horizon: float) -> "CollectionSpec":
        if not 0.0 <= self.pass_prob <= 1.0:
            raise ConfigError(f"pass probability must be in [0, 1], got {self.pass_prob}")
        if self.retrain_every <= 0:
            raise ConfigError("retrain cadence must be > 0")
        if horizon > 0 and not math.isclose(horizon / self.retrain_every,
                                            round(horizon / self.retrain_every)):
            raise ConfigError(f"retrain cadence {self.retrain_every} does not divide the "
                              f"horizon {horizon}")
        if not 0.0 < self.valid_fraction < 1.0:
            raise ConfigError("valid_fraction must be in (0, 1)")
        if not 0.0 <= self.action_noise <= 1.0:
            raise ConfigError(f"action noise must be in [0, 1], got {self.action_noise}")
        self.classifier.validate()
        return self

    @classmethod
    def for_level(cls, level: str, overrides: Optional[Mapping[str, Any]] = None) -> "CollectionSpec":
        """Defaults of ``level`` updated with a ``collection.<level>`` config section."""
        if level not in DEFAULT_COLLECTION:
            raise ConfigError(f"unknown collection level {level!r}")
        settings = dict(DEFAULT_COLLECTION[level])
        settings.update(overrides or {})
        classifier = GbtHyperparams.from_mapping(settings.pop("classifier", {}))
        known = {field.name for field in dataclasses.fields(cls)}
        unknown = set(settings) - known
        if unknown:
            raise ConfigError(f"unknown collection setting(s) {sorted(unknown)}")
        return cls(level=level, classifier=classifier, **settings)

    def to_mapping(self) -> Dict[str, Any]:
        out = dataclasses.asdict(self)
        out["classifier"] = dataclasses.asdict(self.classifier)
        return out


@dataclasses.dataclass
class CollectionResult:
    dataset: Dataset
    net_revenue: float
    retrains: List[Dict[str, Any]]
    config: SimConfig


class _Retrainer:
    """Refits the classifier on the labelled history seen so far."""

    def __init__(self, spec: CollectionSpec, rng: np.random.Generator):
        self.spec = spec
        self.rng = rng
        self.observations: List[np.ndarray] = []
        self.labels: List[int] = []
        self.times: List[float] = []

    def add(self, observation: np.ndarray, y_hat: int, time: float):
        self.observations.append(observation)
        self.labels.append(y_hat)
        self.times.append(time)

    def fit(self, now: float) -> Optional[ThresholdPolicy]:
        if not self.labels:
            return None
        x = np.array(self.observations)
        y = np.array(self.labels)
        if self.spec.window_days is not None:
            recent = np.array(self.times) >= now - self.spec.window_days
            x, y = x[recent], y[recent]
        order = self.rng.permutation(len(y))
        num_train = int(round((1 - self.spec.valid_fraction) * len(y)))
        train, valid = order[:num_train], order[num_train:]
        if len(np.unique(y[train])) < 2:
            return None
        model = fit_gbt(x[train], y[train], x[valid], y[valid], self.spec.classifier, self.rng)
        held_out = valid if len(valid) and y[valid].sum() > 0 else train
        model.metric = self.spec.threshold_metric
        model.threshold = select_threshold(model.predict_proba(x[held_out]), y[held_out],
                                           self.spec.threshold_metric,
                                           prices=x[held_out, PRICE_COLUMN])
        return ThresholdPolicy(model)


def collect_dataset(level: str, config: SimConfig, seed: int,
                    spec: Optional[CollectionSpec] = None) -> CollectionResult:
    """Roll the simulator under the level's behaviour policy and log every transition."""
    spec = spec or CollectionSpec.for_level(level)
    if spec.duration is not None:
        config = config.replace(sim_duration=spec.duration)
    spec.validate(config.sim_duration)

    env = SimStore(config)
    observation = env.reset(seed)
    behaviour = AutoClosePolicy(RandomPolicy(spec.pass_prob))
    behaviour.reset(policy_seed(seed))
    retrainer = _Retrainer(spec, np.random.default_rng(policy_seed(seed).spawn(1)[0]))
    noise_rng = np.random.default_rng(policy_seed(seed).spawn(2)[1])
    recorder = TransitionRecorder()
    retrains = []
    next_retrain = spec.retrain_every

    while observation is not None:
        context = env.pending_context()
        if context.time >= next_retrain:
            day = math.floor(context.time / spec.retrain_every) * spec.retrain_every
            policy = retrainer.fit(day)
            if policy is not None:
                behaviour.inner = policy
                retrains.append({"day": day, "rows": len(retrainer.labels),
                                 "trees": len(policy.model.trees),
                                 "threshold": policy.model.threshold})
                logger.info("%s collection day %.0f: retrained on %d rows, threshold %.4f",
                            level, day, len(retrainer.labels), policy.model.threshold)
            next_retrain = day + spec.retrain_every

        features = observation.as_array()
        action = behaviour.act(features, context)
        if (retrains and context.customer_id not in behaviour.closed
                and noise_rng.random() < spec.action_noise):
            action = 1 - action
        result = env.step(action)
        behaviour.feedback(context, action, result)
        recorder.add_step(features, context.time, action, context.customer_id, result.reward,
                          result.y_hat, customer_active=result.info["customer_active"])
        retrainer.add(features, result.y_hat, context.time)
        observation = result.observation

    dataset = Dataset(recorder.finish())
    logger.info("%s collection seed %d: %d transitions, net revenue %.2f", level, seed,
                len(dataset), env.ledger.net_revenue)
    return CollectionResult(dataset=dataset, net_revenue=env.ledger.net_revenue,
                            retrains=retrains, config=config)


def write_collection(result: CollectionResult, path: Union[str, Path], level: str, seed: int,
                     spec: CollectionSpec) -> int:
    if not isinstance(result.dataset, Dataset):
        raise ContractViolation("collection result has no dataset")
    meta = {"level": level, "seed": int(seed), "simstore": result.config.to_mapping(),
            "collection": spec.to_mapping(), "net_revenue": result.net_revenue,
            "retrains": result.retrains}
    return write_dataset(path, result.dataset.records, meta=meta)
