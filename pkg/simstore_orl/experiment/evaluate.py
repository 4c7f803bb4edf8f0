"""
Policy evaluation on fresh SimStore environments, anchored per seed so that the
fraud-all policy scores 0 and the oracle scores 100.
"""

import dataclasses
import logging
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np

from simstore_orl.algos.policies import (FraudAllPolicy, OraclePolicy, Policy, RandomPolicy,
                                         wrap_autoclose)
from simstore_orl.config import SimConfig, config_hash
from simstore_orl.errors import ReportError
from simstore_orl.sim.store import FRAUD, SimStore

logger = logging.getLogger(__name__)

# Policy-side randomness (random baselines, evaluation epsilon) gets its own stream.
POLICY_STREAM = 1_000_003


@dataclasses.dataclass
class RolloutResult:
    seed: int
    net_revenue: float
    revenue: float
    chargeback_loss: float
    num_orders: int
    num_frauded: int


def policy_seed(seed: int) -> np.random.SeedSequence:
    return np.random.SeedSequence([int(seed), POLICY_STREAM])


def rollout(policy: Policy, config: SimConfig, seed: int, autoclose: bool = True) -> RolloutResult:
    """Run one environment to its horizon under ``policy``."""
    policy = wrap_autoclose(policy) if autoclose else policy
    env = SimStore(config)
    observation = env.reset(seed)
    policy.reset(policy_seed(seed))
    num_orders = num_frauded = 0
    while observation is not None:
        context = env.pending_context()
        action = policy.act(observation.as_array(), context)
        result = env.step(action)
        policy.feedback(context, action, result)
        num_orders += 1
        num_frauded += int(action == FRAUD)
        observation = result.observation
    return RolloutResult(seed=int(seed), net_revenue=env.ledger.net_revenue,
                         revenue=env.ledger.revenue, chargeback_loss=env.ledger.chargeback_loss,
                         num_orders=num_orders, num_frauded=num_frauded)


def reference_policies(pass_prob: float = 0.5) -> Dict[str, Policy]:
    return {"oracle": OraclePolicy(), "fraud_all": FraudAllPolicy(),
            "random": RandomPolicy(pass_prob)}


_ANCHORS: Dict[Tuple[str, int], Tuple[float, float]] = {}


def anchors(config: SimConfig, seed: int) -> Tuple[float, float]:
    """(fraud-all, oracle) net revenues for one seed, cached per config and seed."""
    key = (config_hash(config.to_mapping()), int(seed))
    if key not in _ANCHORS:
        fraud_all = rollout(FraudAllPolicy(), config, seed).net_revenue
        oracle = rollout(OraclePolicy(), config, seed).net_revenue
        _ANCHORS[key] = (fraud_all, oracle)
    return _ANCHORS[key]


def normalize(net_revenue: float, fraud_all: float, oracle: float) -> float:
    span = oracle - fraud_all
    if not span > 0:
        raise ReportError(
            f"degenerate anchors: oracle {oracle} does not exceed fraud-all {fraud_all}")
    return 100.0 * (net_revenue - fraud_all) / span


@dataclasses.dataclass
class EvalReport:
    name: str
    seeds: List[int]
    net_revenues: List[float]
    fraud_all: List[float]
    oracle: List[float]
    normalized: List[float]
    details: List[Dict[str, Any]] = dataclasses.field(default_factory=list)

    @property
    def mean(self) -> float:
        return float(np.mean(self.normalized))

    @property
    def std(self) -> float:
        return float(np.std(self.normalized))

    def to_mapping(self) -> Dict[str, Any]:
        return dict(dataclasses.asdict(self), mean=self.mean, std=self.std)

    @classmethod
    def from_mapping(cls, mapping: Dict[str, Any]) -> "EvalReport":
        fields = {field.name for field in dataclasses.fields(cls)}
        return cls(**{key: value for key, value in mapping.items() if key in fields})


def evaluate_policy(policy: Policy, config: SimConfig, seeds: Sequence[int],
                    name: Optional[str] = None) -> EvalReport:
    """Normalised net revenue of ``policy`` (auto-close applied) on every seed."""
    if not seeds:
        raise ReportError("evaluation needs at least one seed")
    report = EvalReport(name=name or policy.kind, seeds=[], net_revenues=[], fraud_all=[],
                        oracle=[], normalized=[])
    for seed in seeds:
        result = rollout(policy, config, seed)
        fraud_all, oracle = anchors(config, seed)
        report.seeds.append(int(seed))
        report.net_revenues.append(result.net_revenue)
        report.fraud_all.append(fraud_all)
        report.oracle.append(oracle)
        report.normalized.append(normalize(result.net_revenue, fraud_all, oracle))
        report.details.append(dataclasses.asdict(result))
    logger.info("%s: normalized net revenue %.2f +- %.2f over %d seeds", report.name,
                report.mean, report.std, len(report.seeds))
    return report
