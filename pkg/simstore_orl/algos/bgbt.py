"""Binary gradient-boosted trees on the inferred outcomes, thresholded into a policy."""

import logging

import numpy as np

from simstore_orl.algos.base import TrainHistory, TrainSpec
from simstore_orl.algos.policies import ThresholdPolicy
from simstore_orl.data.dataset import Dataset, prices
from simstore_orl.gbt.boosting import fit_gbt, select_threshold

logger = logging.getLogger(__name__)


def train_bgbt(train: Dataset, test: Dataset, spec: TrainSpec):
    """``train`` and ``test`` are expected to come from an order-level split."""
    train_arrays, test_arrays = train.to_arrays(), test.to_arrays()
    rng = np.random.default_rng(spec.seed)
    model = fit_gbt(train_arrays.obs, train_arrays.y_hat, test_arrays.obs, test_arrays.y_hat,
                    spec.gbt_hyperparams(), rng)
    if len(test_arrays):
        held_out = test_arrays
    else:
        held_out = train_arrays
    model.metric = spec.threshold_metric
    model.threshold = select_threshold(model.predict_proba(held_out.obs), held_out.y_hat,
                                       spec.threshold_metric, prices=prices(held_out))
    logger.info("bgbt: %d trees, threshold %.4f (%s)", len(model.trees), model.threshold,
                model.metric)
    history = TrainHistory(test_loss=[-auc for auc in model.history],
                           best_epoch=len(model.trees) - 1)
    return ThresholdPolicy(model), history
