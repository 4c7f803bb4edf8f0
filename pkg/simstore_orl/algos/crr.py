"""Critic-regularised regression: advantage-filtered behavioural cloning."""

import logging

import torch as t

from simstore_orl.algos.base import Batch, EpochTrainer, TrainSpec, prepare
from simstore_orl.algos.policies import ActorPolicy
from simstore_orl.algos.q_learning import build_ensemble, target_sync
from simstore_orl.data.dataset import Dataset
from simstore_orl.errors import ConfigError
from simstore_orl.neural.modules import (Adam, Mlp, QEnsemble, cross_entropy, make_generator,
                                         mse, softmax)
from simstore_orl.sim.features import NUM_FEATURES

logger = logging.getLogger(__name__)


def advantage_weights(advantage: t.Tensor, mode: str, beta: float = 1.0,
                      ratio_upper_bound: float = 20.0) -> t.Tensor:
    if mode == "binary":
        return (advantage > 0).to(advantage.dtype)
    if mode == "exp":
        return t.clamp(t.exp(advantage / beta), max=ratio_upper_bound)
    if mode == "all":
        return t.ones_like(advantage)
    raise ConfigError(f"unknown policy improvement mode {mode!r}")


def critic_loss(critic: QEnsemble, actor: Mlp, batch: Batch) -> t.Tensor:
    """TD loss whose bootstrap is the target critic's value under the actor's policy."""
    with t.no_grad():
        probs = softmax(actor(batch.bootstrap_obs), dim=-1)
        expected = (probs * critic.target_forward(batch.bootstrap_obs)).sum(dim=-1)
        target = batch.reward_sum + batch.discount * expected
    q_taken = t.gather(critic(batch.obs), 1, batch.action.unsqueeze(1)).squeeze(1)
    return mse(q_taken, target)


def actor_loss(critic: QEnsemble, actor: Mlp, batch: Batch, spec: TrainSpec) -> t.Tensor:
    with t.no_grad():
        q = critic(batch.obs)
        advantage = t.gather(q, 1, batch.action.unsqueeze(1)).squeeze(1) - q.mean(dim=-1)
        weights = advantage_weights(advantage, spec.policy_improvement_mode, spec.beta,
                                    spec.ratio_upper_bound)
    return cross_entropy(actor(batch.obs), batch.action, weights)


def crr_objective(critic: QEnsemble, actor: Mlp, batch: Batch, spec: TrainSpec) -> t.Tensor:
    return critic_loss(critic, actor, batch) + actor_loss(critic, actor, batch, spec)


def train_crr(train: Dataset, test: Dataset, spec: TrainSpec):
    if spec.policy_improvement_mode not in ("binary", "exp", "all"):
        raise ConfigError(f"unknown policy improvement mode {spec.policy_improvement_mode!r}")
    normalizer, train_batch, test_batch = prepare(train, test, spec)
    critic = build_ensemble(spec, 1)
    actor = Mlp.build(NUM_FEATURES, spec.layer_size, spec.num_layers, 2,
                      generator=make_generator(spec.seed + 1))
    optimizer = Adam(list(critic.online_parameters()) + list(actor.parameters()),
                     lr=spec.learning_rate)
    trainer = EpochTrainer(spec, {"critic": critic, "actor": actor}, optimizer,
                           lambda batch: crr_objective(critic, actor, batch, spec),
                           after_step=target_sync(critic, spec.target_update_frequency))
    history = trainer.fit(train_batch, test_batch)
    return ActorPolicy(actor, normalizer, "crr"), history
