"""Discrete batch-constrained Q-learning."""

import logging

import torch as t

from simstore_orl.algos.base import Batch, EpochTrainer, TrainSpec, prepare
from simstore_orl.algos.policies import BcqPolicy, allowed_actions
from simstore_orl.algos.q_learning import build_ensemble, target_sync
from simstore_orl.data.dataset import Dataset
from simstore_orl.neural.modules import (Adam, Mlp, QEnsemble, cross_entropy, make_generator,
                                         mse)
from simstore_orl.sim.features import NUM_FEATURES

logger = logging.getLogger(__name__)


def bcq_objective(ensemble: QEnsemble, imitation: Mlp, batch: Batch, spec: TrainSpec) -> t.Tensor:
    """
    TD loss whose bootstrap action is restricted to behaviour-supported actions, plus
    the imitation head's cross-entropy and an L2 penalty on its logits.
    """
    with t.no_grad():
        allowed = allowed_actions(imitation(batch.bootstrap_obs), spec.unlikely_act_threshold)
        target_q = ensemble.target_forward(batch.bootstrap_obs)
        chooser = ensemble(batch.bootstrap_obs) if spec.is_double else target_q
        chooser = t.where(allowed, chooser, t.full_like(chooser, -float("inf")))
        best = chooser.argmax(dim=-1, keepdim=True)
        target = batch.reward_sum + batch.discount * t.gather(target_q, 1, best).squeeze(1)

    q = ensemble(batch.obs)
    q_taken = t.gather(q, 1, batch.action.unsqueeze(1)).squeeze(1)
    logits = imitation(batch.obs)
    imitation_loss = cross_entropy(logits, batch.action)
    penalty = spec.imitation_logits_penalty * (logits ** 2).mean()
    return mse(q_taken, target) + imitation_loss + penalty


def train_bcq(train: Dataset, test: Dataset, spec: TrainSpec):
    normalizer, train_batch, test_batch = prepare(train, test, spec)
    ensemble = build_ensemble(spec, 1)
    imitation = Mlp.build(NUM_FEATURES, spec.layer_size, spec.num_layers, 2,
                          generator=make_generator(spec.seed + 1))
    optimizer = Adam(list(ensemble.online_parameters()) + list(imitation.parameters()),
                     lr=spec.learning_rate)
    trainer = EpochTrainer(spec, {"ensemble": ensemble, "imitation": imitation}, optimizer,
                           lambda batch: bcq_objective(ensemble, imitation, batch, spec),
                           after_step=target_sync(ensemble, spec.target_update_frequency))
    history = trainer.fit(train_batch, test_batch)
    policy = BcqPolicy(ensemble, imitation, normalizer, threshold=spec.unlikely_act_threshold,
                       eval_eps=spec.eval_eps, seed=spec.seed)
    return policy, history
