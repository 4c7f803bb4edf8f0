"""
Q-learning on logged transitions: DQN, MODQN and quantile-regression CQL.

Targets are n-step and time-discounted (see ``NStepTargets``); the ensemble mean is used
both inside the TD target and in the loss. MODQN adds a cross-entropy term that pulls
softmax(Q) towards the inferred outcomes; CQL trains quantile heads and penalises
Q-values of actions the data does not support.
"""

import logging
from typing import Callable

import torch as t

from simstore_orl.algos.base import Batch, EpochTrainer, TrainSpec, prepare
from simstore_orl.algos.policies import GreedyQPolicy
from simstore_orl.data.dataset import Dataset
from simstore_orl.errors import ContractViolation
from simstore_orl.neural.modules import (Adam, QEnsemble, bce, bootstrap_quantiles, logsumexp,
                                         make_generator, mse, quantile_huber, softmax)
from simstore_orl.sim.features import NUM_FEATURES

logger = logging.getLogger(__name__)


def build_ensemble(spec: TrainSpec, num_members: int, num_quantiles: int = 1) -> QEnsemble:
    return QEnsemble(num_members, NUM_FEATURES, spec.layer_size, spec.num_layers,
                     num_actions=2, num_quantiles=num_quantiles,
                     generator=make_generator(spec.seed))


def target_sync(ensemble: QEnsemble, frequency: int) -> Callable[[int], None]:
    def after_step(step: int):
        if step % frequency == 0:
            ensemble.sync_target()
    return after_step


def td_target(ensemble: QEnsemble, batch: Batch, double_q: bool) -> t.Tensor:
    bootstrap = bootstrap_quantiles(ensemble, batch.bootstrap_obs, double_q).mean(dim=-1)
    return batch.reward_sum + batch.discount * bootstrap


def dqn_objective(ensemble: QEnsemble, batch: Batch, double_q: bool, beta: float = 0.0) -> t.Tensor:
    """Squared TD error, plus ``beta`` times BCE(P(Fraud) = softmax(Q)[1], y_hat)."""
    q = ensemble(batch.obs)
    q_taken = t.gather(q, 1, batch.action.unsqueeze(1)).squeeze(1)
    loss = mse(q_taken, td_target(ensemble, batch, double_q))
    return loss + beta * bce(softmax(q, dim=-1)[:, 1], batch.y_hat)


def conservative_penalty(q: t.Tensor, action: t.Tensor) -> t.Tensor:
    """Mean of logsumexp_a Q(o, a) - Q(o, a_logged)."""
    return (logsumexp(q, dim=-1) - t.gather(q, 1, action.unsqueeze(1)).squeeze(1)).mean()


def cql_objective(ensemble: QEnsemble, batch: Batch, cql_lambda: float) -> t.Tensor:
    """Quantile TD loss on the logged action plus the conservative penalty on quantile means."""
    quantiles = ensemble.quantiles(batch.obs)
    index = batch.action.view(-1, 1, 1).expand(-1, 1, quantiles.shape[-1])
    taken = t.gather(quantiles, 1, index).squeeze(1)
    with t.no_grad():
        bootstrap = bootstrap_quantiles(ensemble, batch.bootstrap_obs, double_q=False)
        target = batch.reward_sum.unsqueeze(1) + batch.discount.unsqueeze(1) * bootstrap
    loss = quantile_huber(taken, target)
    return loss + cql_lambda * conservative_penalty(quantiles.mean(dim=-1), batch.action)


def _fit(ensemble: QEnsemble, objective, train: Dataset, test: Dataset, spec: TrainSpec):
    normalizer, train_batch, test_batch = prepare(train, test, spec)
    optimizer = Adam(ensemble.online_parameters(), lr=spec.learning_rate)
    trainer = EpochTrainer(spec, {"ensemble": ensemble}, optimizer, objective,
                           after_step=target_sync(ensemble, spec.target_update_frequency))
    history = trainer.fit(train_batch, test_batch)
    return GreedyQPolicy(ensemble, normalizer, spec.algorithm), history


def train_dqn(train: Dataset, test: Dataset, spec: TrainSpec):
    ensemble = build_ensemble(spec, spec.ensembles)
    return _fit(ensemble, lambda batch: dqn_objective(ensemble, batch, spec.is_double),
                train, test, spec)


def train_modqn(train: Dataset, test: Dataset, spec: TrainSpec):
    if spec.beta < 0:
        raise ContractViolation(f"MODQN beta must be >= 0, got {spec.beta}")
    ensemble = build_ensemble(spec, spec.ensembles)
    return _fit(ensemble,
                lambda batch: dqn_objective(ensemble, batch, spec.is_double, beta=spec.beta),
                train, test, spec)


def train_cql(train: Dataset, test: Dataset, spec: TrainSpec):
    if spec.cql_lambda < 0:
        raise ContractViolation(f"CQL lambda must be >= 0, got {spec.cql_lambda}")
    ensemble = build_ensemble(spec, 1, num_quantiles=spec.quantiles)
    return _fit(ensemble, lambda batch: cql_objective(ensemble, batch, spec.cql_lambda),
                train, test, spec)
