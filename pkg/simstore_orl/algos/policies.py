"""
Risk policies: map an observation to Pass (0) or Fraud (1).

Every policy exposes ``act(observation, context)`` and ``feedback(context, action, result)``.
``context`` is the simulator's info channel for the pending order; only the oracle
reads the true outcome from it, and the auto-close wrapper reads the customer id.
"""

import logging
from pathlib import Path
from typing import Any, Dict, Optional, Set, Union

import numpy as np
import torch as t

from simstore_orl.data.dataset import NormalizationSpec
from simstore_orl.errors import ConfigError, ContractViolation
from simstore_orl.gbt.boosting import GbtModel
from simstore_orl.neural.modules import DTYPE, Mlp, QEnsemble, softmax

logger = logging.getLogger(__name__)

PASS, FRAUD = 0, 1


class Policy:
    kind = "policy"

    def act(self, observation, context=None) -> int:
        return int(self.act_batch(np.asarray(observation, dtype=np.float64)[None, :])[0])

    def act_batch(self, observations: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def feedback(self, context, action: int, result) -> None:
        pass

    def reset(self, seed: Optional[int] = None) -> None:
        pass


class ConstantPolicy(Policy):
    kind = "constant"

    def __init__(self, action: int):
        if action not in (PASS, FRAUD):
            raise ContractViolation(f"action must be 0 or 1, got {action}")
        self.action = action

    def act_batch(self, observations):
        return np.full(len(observations), self.action, dtype=np.int64)


class FraudAllPolicy(ConstantPolicy):
    kind = "fraud_all"

    def __init__(self):
        super().__init__(FRAUD)


class OraclePolicy(Policy):
    """Passes exactly the orders whose true outcome is legitimate."""
    kind = "oracle"

    def act(self, observation, context=None) -> int:
        if context is None:
            raise ContractViolation("the oracle needs the evaluation info channel")
        return FRAUD if context.y else PASS

    def act_batch(self, observations):
        raise ContractViolation("the oracle needs the evaluation info channel")


class RandomPolicy(Policy):
    """Passes with probability ``pass_prob``; seeded by ``reset``."""
    kind = "random"

    def __init__(self, pass_prob: float = 0.9, seed: int = 0):
        if not 0.0 <= pass_prob <= 1.0:
            raise ContractViolation(f"pass probability must be in [0, 1], got {pass_prob}")
        self.pass_prob = pass_prob
        self.reset(seed)

    def reset(self, seed: Optional[int] = None):
        self.rng = np.random.default_rng(seed)

    def act_batch(self, observations):
        return (self.rng.random(len(observations)) >= self.pass_prob).astype(np.int64)


class AutoClosePolicy(Policy):
    """Frauds every later order of a customer once one of their passed orders charged back."""

    def __init__(self, inner: Policy):
        self.inner = inner
        self.closed: Set[int] = set()

    @property
    def kind(self):
        return self.inner.kind

    def act(self, observation, context=None) -> int:
        if context is not None and context.customer_id in self.closed:
            return FRAUD
        return self.inner.act(observation, context)

    def act_batch(self, observations):
        return self.inner.act_batch(observations)

    def feedback(self, context, action, result):
        self.inner.feedback(context, action, result)
        if result.info.get("chargeback"):
            self.closed.add(result.info["customer_id"])

    def reset(self, seed=None):
        self.closed.clear()
        self.inner.reset(seed)


def wrap_autoclose(policy: Policy) -> Policy:
    if isinstance(policy, AutoClosePolicy):
        return policy
    return AutoClosePolicy(policy)


class ThresholdPolicy(Policy):
    """Frauds when the classifier probability exceeds its threshold."""
    kind = "bgbt"

    def __init__(self, model: GbtModel):
        self.model = model

    def act_batch(self, observations):
        return (self.model.predict_proba(observations) > self.model.threshold).astype(np.int64)


class NeuralPolicy(Policy):
    """Base for policies that normalise observations and run torch modules."""

    def __init__(self, normalizer: NormalizationSpec, algorithm: str):
        self.normalizer = normalizer
        self.algorithm = algorithm

    @property
    def kind(self):
        return self.algorithm

    def _inputs(self, observations) -> t.Tensor:
        return t.tensor(self.normalizer.transform(observations), dtype=DTYPE)

    def modules(self) -> Dict[str, t.nn.Module]:
        raise NotImplementedError

    def architecture(self) -> Dict[str, Any]:
        raise NotImplementedError


class ActorPolicy(NeuralPolicy):
    """Argmax over the logits of a single network (BC, CRR actor)."""

    def __init__(self, actor: Mlp, normalizer: NormalizationSpec, algorithm: str = "bc"):
        super().__init__(normalizer, algorithm)
        self.actor = actor

    @t.no_grad()
    def act_batch(self, observations):
        return self.actor(self._inputs(observations)).argmax(dim=-1).numpy()

    def modules(self):
        return {"actor": self.actor}

    def architecture(self):
        return {"actor_sizes": self.actor.sizes}


class GreedyQPolicy(NeuralPolicy):
    """Argmax of the ensemble-mean Q-value (quantile mean for distributional heads)."""

    def __init__(self, ensemble: QEnsemble, normalizer: NormalizationSpec, algorithm: str = "dqn"):
        super().__init__(normalizer, algorithm)
        self.ensemble = ensemble

    @t.no_grad()
    def q_values(self, observations) -> np.ndarray:
        return self.ensemble(self._inputs(observations)).numpy()

    def act_batch(self, observations):
        return self.q_values(observations).argmax(axis=-1)

    def modules(self):
        return {"ensemble": self.ensemble}

    def architecture(self):
        return _ensemble_architecture(self.ensemble)


def allowed_actions(imitation_logits: t.Tensor, threshold: float) -> t.Tensor:
    """Actions whose imitation probability is at least ``threshold`` times the modal one."""
    probs = softmax(imitation_logits, dim=-1)
    return probs / probs.max(dim=-1, keepdim=True).values >= threshold


class BcqPolicy(NeuralPolicy):
    """Greedy Q over behaviour-supported actions, with optional evaluation epsilon noise."""

    def __init__(self, ensemble: QEnsemble, imitation: Mlp, normalizer: NormalizationSpec,
                 threshold: float, eval_eps: float = 0.0, seed: int = 0):
        super().__init__(normalizer, "bcq")
        self.ensemble = ensemble
        self.imitation = imitation
        self.threshold = threshold
        self.eval_eps = eval_eps
        self.seed = seed
        self.reset(seed)

    def reset(self, seed=None):
        self.rng = np.random.default_rng(seed)

    @t.no_grad()
    def greedy(self, observations) -> np.ndarray:
        x = self._inputs(observations)
        q = self.ensemble(x)
        allowed = allowed_actions(self.imitation(x), self.threshold)
        return t.where(allowed, q, t.full_like(q, -float("inf"))).argmax(dim=-1).numpy()

    def act_batch(self, observations):
        actions = self.greedy(observations)
        if self.eval_eps > 0:
            explore = self.rng.random(len(actions)) < self.eval_eps
            actions = np.where(explore, self.rng.integers(0, 2, size=len(actions)), actions)
        return actions

    def modules(self):
        return {"ensemble": self.ensemble, "imitation": self.imitation}

    def architecture(self):
        return dict(_ensemble_architecture(self.ensemble), imitation_sizes=self.imitation.sizes,
                    threshold=self.threshold, eval_eps=self.eval_eps, seed=self.seed)


def _ensemble_architecture(ensemble: QEnsemble) -> Dict[str, Any]:
    sizes = ensemble.members[0].sizes
    return {"num_members": len(ensemble.members), "input_size": sizes[0],
            "hidden_size": sizes[1], "num_layers": len(sizes) - 1,
            "num_actions": ensemble.num_actions, "num_quantiles": ensemble.num_quantiles}


def _build_ensemble(arch: Dict[str, Any]) -> QEnsemble:
    return QEnsemble(arch["num_members"], arch["input_size"], arch["hidden_size"],
                     arch["num_layers"], num_actions=arch["num_actions"],
                     num_quantiles=arch["num_quantiles"])


def save_policy(policy: Policy, path: Union[str, Path], meta: Optional[Dict[str, Any]] = None):
    """Checkpoint a trained policy; reloadable without its training data."""
    if isinstance(policy, AutoClosePolicy):
        policy = policy.inner
    payload: Dict[str, Any] = {"kind": type(policy).__name__, "meta": meta or {}}
    if isinstance(policy, ThresholdPolicy):
        payload["gbt"] = policy.model.to_mapping()
    elif isinstance(policy, NeuralPolicy):
        payload.update(algorithm=policy.algorithm, normalizer=policy.normalizer.to_mapping(),
                       architecture=policy.architecture(),
                       state={name: module.state_dict() for name, module in policy.modules().items()})
    elif isinstance(policy, ConstantPolicy):
        payload["action"] = policy.action
    else:
        raise ContractViolation(f"cannot checkpoint a {type(policy).__name__}")
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    t.save(payload, path)


def load_policy(path: Union[str, Path]) -> Policy:
    payload = t.load(path, weights_only=False)
    kind = payload["kind"]
    if kind == "ThresholdPolicy":
        return ThresholdPolicy(GbtModel.from_mapping(payload["gbt"]))
    if kind == "FraudAllPolicy":
        return FraudAllPolicy()
    if kind == "ConstantPolicy":
        return ConstantPolicy(payload["action"])
    normalizer = NormalizationSpec.from_mapping(payload["normalizer"])
    arch, state = payload["architecture"], payload["state"]
    if kind == "ActorPolicy":
        policy = ActorPolicy(Mlp(arch["actor_sizes"]), normalizer, payload["algorithm"])
    elif kind == "GreedyQPolicy":
        policy = GreedyQPolicy(_build_ensemble(arch), normalizer, payload["algorithm"])
    elif kind == "BcqPolicy":
        policy = BcqPolicy(_build_ensemble(arch), Mlp(arch["imitation_sizes"]), normalizer,
                           threshold=arch["threshold"], eval_eps=arch["eval_eps"],
                           seed=arch.get("seed", 0))
    else:
        raise ConfigError(f"unknown checkpoint kind {kind!r} in {path}")
    for name, module in policy.modules().items():
        module.load_state_dict(state[name])
    return policy
