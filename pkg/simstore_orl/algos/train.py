"""Entry point that splits a dataset and dispatches to the algorithm's trainer."""

import dataclasses
import logging
from typing import Callable, Dict, Tuple

import numpy as np

from simstore_orl.algos.base import TrainHistory, TrainSpec
from simstore_orl.algos.bc import train_bc
from simstore_orl.algos.bcq import train_bcq
from simstore_orl.algos.bgbt import train_bgbt
from simstore_orl.algos.crr import train_crr
from simstore_orl.algos.policies import Policy
from simstore_orl.algos.q_learning import train_cql, train_dqn, train_modqn
from simstore_orl.data.dataset import Dataset, split_episodes, split_orders

logger = logging.getLogger(__name__)

Trainer = Callable[[Dataset, Dataset, TrainSpec], Tuple[Policy, TrainHistory]]

TRAINERS: Dict[str, Trainer] = {
    "bc": train_bc,
    "bgbt": train_bgbt,
    "dqn": train_dqn,
    "modqn": train_modqn,
    "bcq": train_bcq,
    "crr": train_crr,
    "cql": train_cql,
}


@dataclasses.dataclass
class TrainResult:
    policy: Policy
    history: TrainHistory
    spec: TrainSpec


def split_for(dataset: Dataset, spec: TrainSpec) -> Tuple[Dataset, Dataset]:
    """Episode-level split for the neural methods, order-level for BGBT."""
    rng = np.random.default_rng(spec.seed)
    if spec.algorithm == "bgbt":
        return split_orders(dataset, spec.train_fraction, rng)
    return split_episodes(dataset, spec.train_fraction, rng)


def train_policy(dataset: Dataset, spec: TrainSpec) -> TrainResult:
    spec.validate()
    train, test = split_for(dataset, spec)
    logger.info("training %s on %d transitions (%d held out)", spec.algorithm, len(train),
                len(test))
    policy, history = TRAINERS[spec.algorithm](train, test, spec)
    return TrainResult(policy=policy, history=history, spec=spec)
