"""
Gradient-boosted regression trees for binary classification with the logistic loss.

Trees are grown depth-first with exact greedy split finding on second-order statistics
(gradient and hessian of the log loss), L2 leaf regularisation and the usual sampling
knobs: per-tree row subsampling and per-tree / per-level column subsampling. Boosting
stops once the validation ROC-AUC has not improved for ``patience`` rounds and the
model is truncated to its best round.
"""

import dataclasses
import json
import logging
import math
from pathlib import Path
from typing import Any, Dict, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np
from scipy.stats import rankdata

from simstore_orl.errors import ConfigError, ContractViolation

logger = logging.getLogger(__name__)

THRESHOLD_METRICS = ("f1", "reward")


@dataclasses.dataclass
class GbtHyperparams:
    max_trees: int = 1000
    max_depth: int = 6
    learning_rate: float = 0.3
    colsample_bytree: float = 1.0
    colsample_bylevel: float = 1.0
    subsample: float = 1.0
    scale_pos_weight: float = 1.0
    reg_lambda: float = 1.0
    min_child_weight: float = 1.0
    min_split_gain: float = 0.0
    base_score: float = 0.5
    patience: int = 50

    def validate(self) -> "GbtHyperparams":
        for name in ("colsample_bytree", "colsample_bylevel", "subsample"):
            value = getattr(self, name)
            if not 0.0 < value <= 1.0:
                raise ConfigError(f"{name} must be in (0, 1], got {value}")
        if self.max_depth < 1:
            raise ConfigError(f"max_depth must be >= 1, got {self.max_depth}")
        if self.max_trees < 0 or self.patience < 1:
            raise ConfigError("max_trees must be >= 0 and patience >= 1")
        if self.learning_rate < 0 or self.reg_lambda < 0 or self.min_child_weight < 0:
            raise ConfigError("learning_rate, reg_lambda and min_child_weight must be >= 0")
        if self.scale_pos_weight <= 0:
            raise ConfigError(f"scale_pos_weight must be > 0, got {self.scale_pos_weight}")
        if not 0.0 < self.base_score < 1.0:
            raise ConfigError(f"base_score must be in (0, 1), got {self.base_score}")
        return self

    @classmethod
    def from_mapping(cls, mapping: Optional[Mapping[str, Any]]) -> "GbtHyperparams":
        known = {field.name for field in dataclasses.fields(cls)}
        kwargs = {}
        for key, value in (mapping or {}).items():
            if key not in known:
                raise ConfigError(f"unknown hyperparameter {key!r} for gradient boosting")
            kwargs[key] = value
        hp = cls(**kwargs)
        hp.max_trees, hp.max_depth, hp.patience = int(hp.max_trees), int(hp.max_depth), int(hp.patience)
        return hp.validate()


@dataclasses.dataclass
class Node:
    feature: int = -1
    threshold: float = 0.0
    left: int = -1
    right: int = -1
    value: float = 0.0

    @property
    def is_leaf(self) -> bool:
        return self.feature < 0


class RegressionTree:
    """A single tree; leaf values already include the learning rate."""

    def __init__(self, nodes: Optional[List[Node]] = None):
        self.nodes: List[Node] = nodes or [Node()]

    def predict(self, x: np.ndarray) -> np.ndarray:
        feature = np.array([node.feature for node in self.nodes])
        threshold = np.array([node.threshold for node in self.nodes])
        left = np.array([node.left for node in self.nodes])
        right = np.array([node.right for node in self.nodes])
        value = np.array([node.value for node in self.nodes])

        node_ids = np.zeros(len(x), dtype=np.int64)
        rows = np.arange(len(x))
        while True:
            active = feature[node_ids] >= 0
            if not np.any(active):
                break
            current = node_ids[active]
            go_left = x[rows[active], feature[current]] < threshold[current]
            node_ids[active] = np.where(go_left, left[current], right[current])
        return value[node_ids]

    def used_features(self) -> set:
        return {node.feature for node in self.nodes if not node.is_leaf}

    def to_mapping(self) -> List[Dict[str, Any]]:
        return [dataclasses.asdict(node) for node in self.nodes]

    @classmethod
    def from_mapping(cls, nodes: Sequence[Mapping[str, Any]]) -> "RegressionTree":
        return cls([Node(feature=int(n["feature"]), threshold=float(n["threshold"]),
                         left=int(n["left"]), right=int(n["right"]), value=float(n["value"]))
                    for n in nodes])


class _TreeBuilder:

    def __init__(self, x: np.ndarray, grad: np.ndarray, hess: np.ndarray,
                 hp: GbtHyperparams, features: np.ndarray, rng: np.random.Generator):
        self.x, self.grad, self.hess = x, grad, hess
        self.hp = hp
        self.features = features
        self.rng = rng
        self.level_features: Dict[int, np.ndarray] = {}
        self.nodes: List[Node] = []

    def _features_at(self, depth: int) -> np.ndarray:
        if depth not in self.level_features:
            count = max(1, int(round(self.hp.colsample_bylevel * len(self.features))))
            chosen = self.rng.choice(self.features, size=count, replace=False)
            self.level_features[depth] = np.sort(chosen)
        return self.level_features[depth]

    def _leaf_value(self, g: float, h: float) -> float:
        return -g / (h + self.hp.reg_lambda) * self.hp.learning_rate

    def _best_split(self, rows: np.ndarray, depth: int) -> Optional[Tuple[float, int, float]]:
        hp = self.hp
        g_total, h_total = self.grad[rows].sum(), self.hess[rows].sum()
        parent_score = g_total ** 2 / (h_total + hp.reg_lambda)
        best = None
        for feature in self._features_at(depth):
            values = self.x[rows, feature]
            order = np.argsort(values, kind="stable")
            sorted_values = values[order]
            g_left = np.cumsum(self.grad[rows][order])[:-1]
            h_left = np.cumsum(self.hess[rows][order])[:-1]
            g_right, h_right = g_total - g_left, h_total - h_left
            valid = ((sorted_values[1:] != sorted_values[:-1])
                     & (h_left >= hp.min_child_weight) & (h_right >= hp.min_child_weight))
            if not np.any(valid):
                continue
            gain = 0.5 * (g_left ** 2 / (h_left + hp.reg_lambda)
                          + g_right ** 2 / (h_right + hp.reg_lambda) - parent_score) - hp.min_split_gain
            gain = np.where(valid, gain, -np.inf)
            k = int(np.argmax(gain))
            if gain[k] > 0 and (best is None or gain[k] > best[0]):
                best = (float(gain[k]), int(feature),
                        float((sorted_values[k] + sorted_values[k + 1]) / 2))
        return best

    def grow(self, rows: np.ndarray, depth: int = 0) -> int:
        index = len(self.nodes)
        node = Node(value=self._leaf_value(self.grad[rows].sum(), self.hess[rows].sum()))
        self.nodes.append(node)
        if depth >= self.hp.max_depth or len(rows) < 2:
            return index
        split = self._best_split(rows, depth)
        if split is None:
            return index
        _, feature, threshold = split
        go_left = self.x[rows, feature] < threshold
        node.feature, node.threshold = feature, threshold
        node.left = self.grow(rows[go_left], depth + 1)
        node.right = self.grow(rows[~go_left], depth + 1)
        return index


def build_tree(x: np.ndarray, grad: np.ndarray, hess: np.ndarray, hp: GbtHyperparams,
               rng: np.random.Generator) -> RegressionTree:
    n, num_features = x.shape
    num_tree_features = max(1, int(round(hp.colsample_bytree * num_features)))
    features = np.sort(rng.choice(num_features, size=num_tree_features, replace=False))
    if hp.subsample < 1.0:
        num_rows = max(1, int(round(hp.subsample * n)))
        rows = np.sort(rng.choice(n, size=num_rows, replace=False))
    else:
        rows = np.arange(n)
    builder = _TreeBuilder(x, grad, hess, hp, features, rng)
    builder.grow(rows)
    return RegressionTree(builder.nodes)


def sigmoid(margin: np.ndarray) -> np.ndarray:
    return 1.0 / (1.0 + np.exp(-margin))


def roc_auc(labels: Sequence[int], scores: Sequence[float]) -> float:
    """Area under the ROC curve via the rank-sum statistic; ties count one half."""
    labels = np.asarray(labels).astype(bool)
    num_pos = int(labels.sum())
    num_neg = len(labels) - num_pos
    if num_pos == 0 or num_neg == 0:
        raise ContractViolation("ROC-AUC needs both classes")
    ranks = rankdata(np.asarray(scores, dtype=np.float64))
    return float((ranks[labels].sum() - num_pos * (num_pos + 1) / 2) / (num_pos * num_neg))


@dataclasses.dataclass
class GbtModel:
    trees: List[RegressionTree]
    base_score: float = 0.5
    num_features: int = 0
    threshold: float = 0.5
    metric: str = "f1"
    history: List[float] = dataclasses.field(default_factory=list)

    @property
    def base_margin(self) -> float:
        return math.log(self.base_score / (1 - self.base_score))

    def margin(self, x) -> np.ndarray:
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        if self.num_features and x.shape[1] != self.num_features:
            raise ContractViolation(f"expected {self.num_features} features, got {x.shape[1]}")
        total = np.full(len(x), self.base_margin)
        for tree in self.trees:
            total += tree.predict(x)
        return total

    def predict_proba(self, x) -> np.ndarray:
        return sigmoid(self.margin(x))

    def to_mapping(self) -> Dict[str, Any]:
        return {
            "base_score": self.base_score, "num_features": self.num_features,
            "threshold": self.threshold, "metric": self.metric, "history": self.history,
            "trees": [tree.to_mapping() for tree in self.trees],
        }

    @classmethod
    def from_mapping(cls, mapping: Mapping[str, Any]) -> "GbtModel":
        return cls(trees=[RegressionTree.from_mapping(tree) for tree in mapping["trees"]],
                   base_score=float(mapping["base_score"]),
                   num_features=int(mapping["num_features"]),
                   threshold=float(mapping["threshold"]), metric=mapping["metric"],
                   history=list(mapping.get("history", [])))

    def save(self, path: Union[str, Path]):
        with open(path, "w", encoding="utf-8") as handle:
            json.dump(self.to_mapping(), handle)

    @classmethod
    def load(cls, path: Union[str, Path]) -> "GbtModel":
        with open(path, "r", encoding="utf-8") as handle:
            return cls.from_mapping(json.load(handle))


def _logistic_grad_hess(labels: np.ndarray, margin: np.ndarray,
                        weights: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    prob = sigmoid(margin)
    grad = (prob - labels) * weights
    hess = np.maximum(prob * (1.0 - prob), 1e-16) * weights
    return grad, hess


def fit_gbt(x_train, y_train, x_valid, y_valid, hp: GbtHyperparams,
            rng: np.random.Generator) -> GbtModel:
    """Boost trees on (x_train, y_train), early-stopping on validation ROC-AUC."""
    hp.validate()
    x_train = np.asarray(x_train, dtype=np.float64)
    y_train = np.asarray(y_train, dtype=np.float64)
    if len(np.unique(y_train)) < 2:
        raise ContractViolation("gradient boosting needs both classes in the training data")
    if not np.all((y_train == 0) | (y_train == 1)):
        raise ContractViolation("labels must be 0 or 1")
    x_valid = np.asarray(x_valid, dtype=np.float64).reshape(-1, x_train.shape[1])
    y_valid = np.asarray(y_valid, dtype=np.int64)
    can_stop = len(np.unique(y_valid)) == 2

    model = GbtModel(trees=[], base_score=hp.base_score, num_features=x_train.shape[1])
    weights = np.where(y_train == 1, hp.scale_pos_weight, 1.0)
    train_margin = np.full(len(x_train), model.base_margin)
    valid_margin = np.full(len(x_valid), model.base_margin)
    best_auc, best_round = -np.inf, -1

    for round_index in range(hp.max_trees):
        grad, hess = _logistic_grad_hess(y_train, train_margin, weights)
        tree = build_tree(x_train, grad, hess, hp, rng)
        model.trees.append(tree)
        train_margin += tree.predict(x_train)
        if not can_stop:
            continue
        valid_margin += tree.predict(x_valid)
        auc = roc_auc(y_valid, valid_margin)
        model.history.append(auc)
        if auc > best_auc:
            best_auc, best_round = auc, round_index
        elif round_index - best_round >= hp.patience:
            break

    if can_stop and best_round >= 0:
        del model.trees[best_round + 1:]
        logger.debug("boosting kept %d trees, best validation AUC %.4f", len(model.trees), best_auc)
    return model


def select_threshold(probs, labels, metric: str = "f1", prices=None) -> float:
    """
    Choose the decision threshold: orders with probability > threshold are frauded.

    Candidates are 0, 1 and the midpoints between consecutive distinct probabilities.
    ``f1`` maximises F1 of the fraud class; ``reward`` maximises the summed reward of
    the induced policy (passed legitimate orders earn their price, passed fraud costs
    it). Ties go to the smaller threshold.
    """
    if metric not in THRESHOLD_METRICS:
        raise ConfigError(f"threshold metric must be one of {THRESHOLD_METRICS}, got {metric!r}")
    probs = np.asarray(probs, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    if labels.sum() == 0:
        return 1.0

    distinct = np.unique(probs)
    candidates = np.concatenate([[0.0], (distinct[1:] + distinct[:-1]) / 2, [1.0]])
    order = np.argsort(probs, kind="stable")
    sorted_probs, sorted_labels = probs[order], labels[order]
    num_passed = np.searchsorted(sorted_probs, candidates, side="right")

    if metric == "f1":
        passed_positives = np.concatenate([[0], np.cumsum(sorted_labels)])[num_passed]
        true_pos = labels.sum() - passed_positives
        false_pos = (len(labels) - num_passed) - true_pos
        false_neg = passed_positives
        denominator = 2 * true_pos + false_pos + false_neg
        score = np.where(denominator > 0, 2 * true_pos / np.maximum(denominator, 1), 0.0)
    else:
        if prices is None:
            raise ContractViolation("reward threshold selection needs order prices")
        sorted_prices = np.asarray(prices, dtype=np.float64)[order]
        pass_reward = np.where(sorted_labels == 1, -sorted_prices, sorted_prices)
        score = np.concatenate([[0.0], np.cumsum(pass_reward)])[num_passed]
    return float(candidates[int(np.argmax(score))])
