"""
Random hyperparameter search and the algorithm benchmark grid.

Configurations and per-trial seeds are drawn up front in the calling process, so a search
run with worker processes returns the same leaderboard as a serial one.
"""

import concurrent.futures
import dataclasses
import logging
import math
from typing import Any, Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from simstore_orl.algos.base import TrainSpec
from simstore_orl.algos.train import train_policy
from simstore_orl.config import SimConfig
from simstore_orl.data.dataset import Dataset
from simstore_orl.errors import ConfigError, SimStoreError
from simstore_orl.experiment.evaluate import EvalReport, evaluate_policy
from simstore_orl.experiment.presets import best_params, sample_config, search_space

logger = logging.getLogger(__name__)

DEFAULT_BUDGET = 128


@dataclasses.dataclass
class TrialResult:
    index: int
    seed: int
    params: Dict[str, Any]
    mean: float = float("nan")
    std: float = float("nan")
    normalized: List[float] = dataclasses.field(default_factory=list)
    error: Optional[str] = None

    @property
    def ok(self) -> bool:
        return self.error is None

    def to_mapping(self) -> Dict[str, Any]:
        return dataclasses.asdict(self)


@dataclasses.dataclass
class SearchResult:
    algorithm: str
    best_spec: Optional[TrainSpec]
    leaderboard: List[TrialResult]

    @property
    def failures(self) -> List[TrialResult]:
        return [trial for trial in self.leaderboard if not trial.ok]


def trial_seed(master_seed: int, index: int) -> int:
    return int(np.random.SeedSequence([int(master_seed), int(index)]).generate_state(1)[0])


def rank(trials: Sequence[TrialResult]) -> List[TrialResult]:
    """Best mean first, ties to the lower trial index, failed trials last."""
    scored = [trial for trial in trials if trial.ok and not math.isnan(trial.mean)]
    scored_ids = {trial.index for trial in scored}
    failed = [trial for trial in trials if trial.index not in scored_ids]
    return (sorted(scored, key=lambda trial: (-trial.mean, trial.index))
            + sorted(failed, key=lambda trial: trial.index))


def _run_trial(algorithm: str, index: int, seed: int, params: Dict[str, Any], dataset: Dataset,
               config: SimConfig, eval_seeds: Sequence[int]) -> TrialResult:
    trial = TrialResult(index=index, seed=seed, params=dict(params))
    try:
        spec = TrainSpec.from_mapping(dict(params, seed=seed), algorithm)
        policy = train_policy(dataset, spec).policy
        report = evaluate_policy(policy, config, eval_seeds, name=f"{algorithm}#{index}")
    except SimStoreError as err:
        trial.error = f"{type(err).__name__}: {err}"
        return trial
    except Exception as err:
        logger.exception("%s trial %d crashed", algorithm, index)
        trial.error = f"{type(err).__name__}: {err}"
        return trial
    trial.mean, trial.std, trial.normalized = report.mean, report.std, list(report.normalized)
    return trial


def random_search(algorithm: str, dataset: Dataset, config: SimConfig,
                  space: Optional[Mapping[str, Any]] = None, master_seed: int = 0,
                  budget: int = DEFAULT_BUDGET, eval_seeds: Sequence[int] = range(5),
                  workers: int = 1) -> SearchResult:
    """
    Train ``budget`` configurations drawn from ``space`` and rank them by mean normalised
    net revenue over ``eval_seeds``. A trial that raises is kept on the leaderboard with
    its error and the search carries on.
    """
    if budget < 1:
        raise ConfigError(f"search budget must be >= 1, got {budget}")
    if workers < 1:
        raise ConfigError(f"search workers must be >= 1, got {workers}")
    space = search_space(algorithm) if space is None else dict(space)
    eval_seeds = list(eval_seeds)
    rng = np.random.default_rng(master_seed)
    draws = [(index, trial_seed(master_seed, index), sample_config(space, rng))
             for index in range(budget)]

    trials: List[TrialResult] = []
    if workers == 1:
        for index, seed, params in draws:
            trials.append(_run_trial(algorithm, index, seed, params, dataset, config, eval_seeds))
            _log_trial(algorithm, trials[-1], budget)
    else:
        with concurrent.futures.ProcessPoolExecutor(max_workers=workers) as pool:
            futures = [pool.submit(_run_trial, algorithm, index, seed, params, dataset, config,
                                   eval_seeds) for index, seed, params in draws]
            for future in concurrent.futures.as_completed(futures):
                trials.append(future.result())
                _log_trial(algorithm, trials[-1], budget)

    leaderboard = rank(trials)
    best = leaderboard[0] if leaderboard and leaderboard[0].ok else None
    best_spec = (TrainSpec.from_mapping(dict(best.params, seed=best.seed), algorithm)
                 if best is not None else None)
    if best is None:
        logger.warning("%s search: all %d trials failed", algorithm, budget)
    else:
        logger.info("%s search: best trial %d scored %.2f +- %.2f", algorithm, best.index,
                    best.mean, best.std)
    return SearchResult(algorithm=algorithm, best_spec=best_spec, leaderboard=leaderboard)


def _log_trial(algorithm: str, trial: TrialResult, budget: int):
    if trial.ok:
        logger.info("%s trial %d/%d: %.2f +- %.2f", algorithm, trial.index + 1, budget,
                    trial.mean, trial.std)
    else:
        logger.warning("%s trial %d/%d failed: %s", algorithm, trial.index + 1, budget,
                       trial.error)


def benchmark(dataset: Dataset, config: SimConfig, level: str, algorithms: Sequence[str],
              eval_seeds: Sequence[int] = range(5), seed: int = 0,
              overrides: Optional[Mapping[str, Mapping[str, Any]]] = None
              ) -> Tuple[Dict[str, EvalReport], Dict[str, TrainSpec]]:
    """Train every algorithm with its preset for ``level`` and evaluate it: one row of the grid."""
    reports, specs = {}, {}
    for algorithm in algorithms:
        params = best_params(algorithm, level)
        params.update((overrides or {}).get(algorithm, {}))
        spec = TrainSpec.from_mapping(dict(params, seed=seed), algorithm)
        policy = train_policy(dataset, spec).policy
        reports[algorithm] = evaluate_policy(policy, config, list(eval_seeds),
                                             name=f"{algorithm}/{level}")
        specs[algorithm] = spec
    return reports, specs
