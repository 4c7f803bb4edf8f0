"""Behavioural cloning: a classifier of the logged actions."""

import logging

import numpy as np

from simstore_orl.algos.base import Batch, EpochTrainer, TrainHistory, TrainSpec, prepare
from simstore_orl.algos.policies import ActorPolicy, ConstantPolicy
from simstore_orl.data.dataset import Dataset
from simstore_orl.neural.modules import Adam, Mlp, cross_entropy, make_generator
from simstore_orl.sim.features import NUM_FEATURES

logger = logging.getLogger(__name__)


def bc_loss(actor: Mlp, batch: Batch):
    return cross_entropy(actor(batch.obs), batch.action)


def train_bc(train: Dataset, test: Dataset, spec: TrainSpec):
    actions = np.unique([record.a for record in train])
    if len(actions) == 1:
        logger.warning("training data holds a single action (%d); BC degenerates to a constant "
                       "policy", actions[0])
        return ConstantPolicy(int(actions[0])), TrainHistory()

    normalizer, train_batch, test_batch = prepare(train, test, spec)
    actor = Mlp.build(NUM_FEATURES, spec.layer_size, spec.num_layers, 2,
                      generator=make_generator(spec.seed))
    optimizer = Adam(actor.parameters(), lr=spec.learning_rate)
    trainer = EpochTrainer(spec, {"actor": actor}, optimizer, lambda batch: bc_loss(actor, batch))
    history = trainer.fit(train_batch, test_batch)
    return ActorPolicy(actor, normalizer, "bc"), history
