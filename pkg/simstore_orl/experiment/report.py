"""
Line-delimited report files and the summary tables rendered from them.

Each evaluation record is one JSON line: an ``EvalReport`` mapping plus the algorithm and
dataset it belongs to. The summary pivots records into a dataset-by-algorithm grid of
``mean ± sd`` normalised net revenue.
"""

import json
import logging
from pathlib import Path
from typing import Any, Dict, Iterable, List, Optional, Sequence, Union

import pandas as pd

from simstore_orl.errors import ReportError
from simstore_orl.experiment.evaluate import EvalReport
from simstore_orl.experiment.search import TrialResult

logger = logging.getLogger(__name__)

ALGORITHM_LABELS = {"bc": "BC", "bgbt": "BGBT", "dqn": "DQN", "modqn": "MODQN", "bcq": "BCQ",
                    "crr": "CRR", "cql": "CQL"}
COLUMN_ORDER = ["BC", "BGBT", "DQN", "MODQN", "BCQ", "CRR", "CQL"]


def report_record(report: EvalReport, algorithm: str, dataset: str) -> Dict[str, Any]:
    return dict(report.to_mapping(), algorithm=algorithm, dataset=dataset)


def write_records(path: Union[str, Path], records: Iterable[Dict[str, Any]], append: bool = False):
    with open(path, "a" if append else "w", encoding="utf-8") as handle:
        for record in records:
            handle.write(json.dumps(record, sort_keys=True) + "\n")


def read_records(paths: Union[str, Path, Sequence[Union[str, Path]]]) -> List[Dict[str, Any]]:
    if isinstance(paths, (str, Path)):
        paths = [paths]
    records = []
    for path in paths:
        try:
            with open(path, "r", encoding="utf-8") as handle:
                for number, line in enumerate(handle, start=1):
                    if not line.strip():
                        continue
                    try:
                        records.append(json.loads(line))
                    except json.JSONDecodeError as err:
                        raise ReportError(f"{path}:{number}: not a JSON record ({err.msg})") from err
        except OSError as err:
            raise ReportError(f"cannot read report {path}: {err}") from err
    return records


def summary_frame(records: Sequence[Dict[str, Any]]) -> pd.DataFrame:
    """Long frame with one row per (dataset, algorithm) evaluation."""
    rows = []
    for record in records:
        missing = {"algorithm", "dataset", "normalized"} - set(record)
        if missing:
            raise ReportError(f"evaluation record lacks {sorted(missing)}")
        report = EvalReport.from_mapping(record)
        rows.append({"dataset": record["dataset"],
                     "algorithm": ALGORITHM_LABELS.get(record["algorithm"], record["algorithm"]),
                     "mean": report.mean, "std": report.std, "seeds": len(report.seeds)})
    if not rows:
        raise ReportError("no evaluation records to summarise")
    return pd.DataFrame(rows)


def summary_table(records: Sequence[Dict[str, Any]], precision: int = 2) -> pd.DataFrame:
    """Dataset rows by algorithm columns, cells formatted as ``mean ± sd``."""
    frame = summary_frame(records)
    # Latest record wins when the same cell was evaluated twice.
    frame = frame.drop_duplicates(subset=["dataset", "algorithm"], keep="last")
    frame["cell"] = [f"{mean:.{precision}f} ± {std:.{precision}f}"
                     for mean, std in zip(frame["mean"], frame["std"])]
    table = frame.pivot(index="dataset", columns="algorithm", values="cell")
    columns = [name for name in COLUMN_ORDER if name in table.columns]
    columns += sorted(set(table.columns) - set(columns))
    return table[columns].fillna("-")


def leaderboard_frame(trials: Sequence[TrialResult], top: Optional[int] = None) -> pd.DataFrame:
    rows = []
    for place, trial in enumerate(trials, start=1):
        row = {"rank": place, "trial": trial.index, "seed": trial.seed, "mean": trial.mean,
               "std": trial.std, "error": trial.error or ""}
        row.update(trial.params)
        rows.append(row)
    frame = pd.DataFrame(rows)
    return frame.head(top) if top is not None else frame


def render(table: pd.DataFrame, title: Optional[str] = None) -> str:
    text = table.to_string()
    return f"{title}\n{text}" if title else text


def ordering_violations(records: Sequence[Dict[str, Any]], medium: str = "medium",
                        expert: str = "expert", margin: float = 10.0, slack: float = 3.0,
                        sigmas: float = 3.0) -> List[str]:
    """
    Check a benchmark grid for the orderings a healthy run shows and list what breaks.

    On ``medium`` the better of DQN and MODQN must beat BGBT by ``margin`` points. No
    algorithm may lose more than ``slack`` points going from ``medium`` to ``expert`` data.
    Every mean must lie in ``[0, 100 + sigmas * sd]``. Pairs with a missing cell are skipped.
    """
    frame = summary_frame(records).drop_duplicates(subset=["dataset", "algorithm"], keep="last")
    cells = {(row.dataset, row.algorithm): row for row in frame.itertuples(index=False)}
    problems = []

    value_based = [cells[medium, name].mean for name in ("DQN", "MODQN") if (medium, name) in cells]
    if value_based and (medium, "BGBT") in cells:
        baseline = cells[medium, "BGBT"].mean
        if max(value_based) < baseline + margin:
            problems.append(f"{medium}: best of DQN/MODQN {max(value_based):.2f} is not "
                            f"{margin:g} above BGBT {baseline:.2f}")

    for (dataset, algorithm), row in sorted(cells.items()):
        if dataset == expert and (medium, algorithm) in cells:
            before = cells[medium, algorithm].mean
            if row.mean < before - slack:
                problems.append(f"{algorithm}: {expert} {row.mean:.2f} is more than {slack:g} "
                                f"below {medium} {before:.2f}")
        upper = 100.0 + sigmas * row.std
        if not 0.0 <= row.mean <= upper:
            problems.append(f"{dataset}/{algorithm}: mean {row.mean:.2f} outside "
                            f"[0, {upper:.2f}]")

    for problem in problems:
        logger.warning("benchmark ordering: %s", problem)
    return problems
