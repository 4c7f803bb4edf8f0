"""
Command-line entry point: ``simstore-orl <verb> --config FILE [options]``.

Hyperparameters come from the config file only; flags override the seed and paths.
Every verb writes ``manifest.json`` into its output directory.
"""

import argparse
import dataclasses
import json
import logging
import platform
import sys
from importlib import metadata
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple

from simstore_orl.algos.base import ALGORITHMS, TrainSpec
from simstore_orl.algos.policies import ConstantPolicy, Policy, load_policy, save_policy
from simstore_orl.algos.train import train_policy
from simstore_orl.config import RunConfig, SimConfig, config_hash, load_config
from simstore_orl.data.dataset import Dataset, read_dataset, read_metadata
from simstore_orl.errors import (ConfigError, ContractViolation, DatasetParseError, ReportError,
                                 SimStoreError)
from simstore_orl.experiment.collect import CollectionSpec, collect_dataset, write_collection
from simstore_orl.experiment.evaluate import evaluate_policy, reference_policies, rollout
from simstore_orl.experiment.presets import LEVELS, best_params, search_space
from simstore_orl.experiment.report import (leaderboard_frame, ordering_violations, read_records,
                                            render, report_record, summary_table, write_records)
from simstore_orl.experiment.search import DEFAULT_BUDGET, benchmark, random_search
from simstore_orl.sim.store import PASS

logger = logging.getLogger(__name__)

VERBS = ("simulate", "collect", "train", "eval", "search", "benchmark", "report")

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_DATA = 3
EXIT_RUNTIME = 4

_LIBRARIES = ("simstore_orl", "torch", "numpy", "scipy", "einops", "gymnasium", "pandas",
              "pyyaml")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="simstore-orl",
                                     description="SimStore fraud simulator and offline RL benchmark")
    parser.add_argument("--verbose", "-v", action="store_true", help="log at DEBUG level")
    verbs = parser.add_subparsers(dest="verb", required=True, metavar="VERB")

    def add(name: str, help_text: str, config: bool = True) -> argparse.ArgumentParser:
        sub = verbs.add_parser(name, help=help_text)
        if config:
            sub.add_argument("--config", required=True, type=Path, help="YAML config file")
        sub.add_argument("--seed", type=int, default=None, help="override the random seed")
        sub.add_argument("--out", type=Path, default=Path("runs"), help="output directory")
        return sub

    simulate = add("simulate", "roll one environment under a reference policy")
    simulate.add_argument("--policy", default="random",
                          choices=("random", "oracle", "fraud_all", "pass_all"))

    collect = add("collect", "collect a logged dataset")
    collect.add_argument("--level", required=True, choices=LEVELS)

    train = add("train", "train an offline policy on a dataset")
    train.add_argument("--dataset", required=True, type=Path)
    train.add_argument("--algorithm", choices=ALGORITHMS, default=None)

    evaluate = add("eval", "evaluate a checkpoint or a reference policy")
    evaluate.add_argument("--policy", required=True,
                          help="checkpoint path, or one of oracle, fraud_all, random")
    evaluate.add_argument("--dataset", type=Path, default=None,
                          help="dataset the policy was trained on (labels the report)")

    search = add("search", "random hyperparameter search")
    search.add_argument("--dataset", required=True, type=Path)
    search.add_argument("--algorithm", required=True, choices=ALGORITHMS)

    grid = add("benchmark", "collect both levels, train every algorithm and check the grid")
    grid.add_argument("--algorithms", nargs="+", choices=ALGORITHMS, default=list(ALGORITHMS))

    report = add("report", "summarise evaluation records", config=False)
    report.add_argument("reports", nargs="+", type=Path, help="eval.jsonl files")
    return parser


def evaluation_config(run: RunConfig) -> SimConfig:
    """The collection config with the ``evaluation.simstore`` overrides applied."""
    overrides = run.evaluation.get("simstore") or {}
    if not overrides:
        return run.simstore
    return SimConfig.from_mapping(dict(run.simstore.to_mapping(), **overrides))


def eval_seeds(run: RunConfig, seed: Optional[int]) -> List[int]:
    seeds = run.eval_seeds
    if seed is None:
        return seeds
    return [seed + offset for offset in range(len(seeds))]


def train_section(run: RunConfig, algorithm: Optional[str]) -> Dict[str, Any]:
    """``train.<algorithm>`` when present, otherwise the flat ``train`` section."""
    section = dict(run.train)
    if algorithm is not None and isinstance(section.get(algorithm), dict):
        return dict(section[algorithm])
    return {key: value for key, value in section.items() if key not in ALGORITHMS}


def _versions() -> Dict[str, str]:
    versions = {"python": platform.python_version()}
    for name in _LIBRARIES:
        try:
            versions[name] = metadata.version(name)
        except metadata.PackageNotFoundError:
            versions[name] = "unknown"
    return versions


def write_manifest(out: Path, args: argparse.Namespace, run: Optional[RunConfig],
                   seed: Optional[int], outputs: Dict[str, Any]):
    manifest = {
        "command": args.verb,
        "argv": sys.argv[1:],
        "config": None if run is None else str(args.config),
        "config_hash": None if run is None else run.digest(),
        "simstore_hash": None if run is None else config_hash(run.simstore.to_mapping()),
        "seed": seed,
        "versions": _versions(),
        "outputs": outputs,
    }
    with open(out / "manifest.json", "w", encoding="utf-8") as handle:
        json.dump(manifest, handle, indent=2, sort_keys=True, default=str)


def _require(path: Path, what: str):
    if not path.exists():
        raise DatasetParseError(f"{what} {path} does not exist")


def _load_dataset(path: Path) -> Dataset:
    _require(path, "dataset")
    return read_dataset(path)


def _dataset_label(path: Optional[Path]) -> str:
    if path is None:
        return "-"
    return read_metadata(path).get("level", path.stem)


def _cmd_simulate(args, run: RunConfig) -> Dict[str, Any]:
    seed = run.simstore.rng_seed if args.seed is None else args.seed
    policies = dict(reference_policies(), pass_all=ConstantPolicy(PASS))
    result = rollout(policies[args.policy], run.simstore, seed)
    summary = dataclasses.asdict(result)
    print(json.dumps(summary, indent=2))
    with open(args.out / "ledger.json", "w", encoding="utf-8") as handle:
        json.dump(summary, handle, indent=2)
    return {"seed": seed, "ledger": "ledger.json"}


def _cmd_collect(args, run: RunConfig) -> Dict[str, Any]:
    seed = run.simstore.rng_seed if args.seed is None else args.seed
    spec = CollectionSpec.for_level(args.level, run.collection.get(args.level))
    result = collect_dataset(args.level, run.simstore, seed, spec)
    path = args.out / f"{args.level}.jsonl"
    count = write_collection(result, path, args.level, seed, spec)
    print(f"{count} transitions written to {path}; net revenue {result.net_revenue:.2f}")
    return {"seed": seed, "dataset": path.name, "records": count}


def _train_spec(args, run: RunConfig, dataset_path: Path, seed: Optional[int]) -> TrainSpec:
    section = train_section(run, args.algorithm)
    algorithm = args.algorithm or section.get("algorithm")
    if algorithm is None:
        raise ConfigError("no algorithm given on the command line or in the train section")
    section.pop("algorithm", None)
    if not section:
        level = read_metadata(dataset_path).get("level")
        if level in LEVELS:
            section = best_params(algorithm, level)
            logger.info("no train section; using the %s preset for %s", level, algorithm)
    if seed is not None:
        section["seed"] = seed
    return TrainSpec.from_mapping(section, algorithm)


def _cmd_train(args, run: RunConfig) -> Dict[str, Any]:
    # Schema problems in the train section surface before the dataset is read.
    spec = _train_spec(args, run, args.dataset, args.seed)
    dataset = _load_dataset(args.dataset)
    result = train_policy(dataset, spec)
    meta = {"spec": spec.to_mapping(), "dataset": str(args.dataset),
            "level": _dataset_label(args.dataset)}
    save_policy(result.policy, args.out / "policy.pt", meta=meta)
    with open(args.out / "history.json", "w", encoding="utf-8") as handle:
        json.dump(dict(result.history.to_mapping(), spec=spec.to_mapping()), handle, indent=2)
    print(f"trained {spec.algorithm}: best epoch {result.history.best_epoch}, "
          f"test loss {result.history.best_test_loss:.6g}")
    return {"seed": spec.seed, "checkpoint": "policy.pt", "history": "history.json"}


def _resolve_policy(name: str) -> Tuple[Policy, str]:
    references = reference_policies()
    if name in references:
        return references[name], name
    path = Path(name)
    _require(path, "policy checkpoint")
    try:
        policy = load_policy(path)
    except (OSError, RuntimeError, KeyError) as err:
        raise DatasetParseError(f"cannot load policy checkpoint {path}: {err}") from err
    return policy, policy.kind


def _cmd_eval(args, run: RunConfig) -> Dict[str, Any]:
    policy, algorithm = _resolve_policy(args.policy)
    seeds = eval_seeds(run, args.seed)
    report = evaluate_policy(policy, evaluation_config(run), seeds, name=algorithm)
    record = report_record(report, algorithm=algorithm, dataset=_dataset_label(args.dataset))
    write_records(args.out / "eval.jsonl", [record])
    print(render(summary_table([record]), title="Normalized net revenue"))
    return {"seeds": seeds, "report": "eval.jsonl"}


def _cmd_search(args, run: RunConfig) -> Dict[str, Any]:
    settings = dict(run.search)
    master_seed = int(settings.pop("seed", 0)) if args.seed is None else args.seed
    budget = int(settings.pop("budget", DEFAULT_BUDGET))
    workers = int(settings.pop("workers", 1))
    overrides = settings.pop("space", {}) or {}
    if settings:
        raise ConfigError(f"unknown search setting(s) {sorted(settings)}")
    space = search_space(args.algorithm, overrides.get(args.algorithm, {}))
    dataset = _load_dataset(args.dataset)
    result = random_search(args.algorithm, dataset, evaluation_config(run), space=space,
                           master_seed=master_seed, budget=budget,
                           eval_seeds=eval_seeds(run, None), workers=workers)
    write_records(args.out / "leaderboard.jsonl",
                  [trial.to_mapping() for trial in result.leaderboard])
    table = render(leaderboard_frame(result.leaderboard, top=10),
                   title=f"{args.algorithm} search, {budget} trials")
    with open(args.out / "leaderboard.txt", "w", encoding="utf-8") as handle:
        handle.write(table + "\n")
    print(table)
    outputs = {"master_seed": master_seed, "leaderboard": "leaderboard.jsonl",
               "failures": len(result.failures)}
    if result.best_spec is not None:
        best = train_policy(dataset, result.best_spec)
        save_policy(best.policy, args.out / "best.pt",
                    meta={"spec": result.best_spec.to_mapping(), "dataset": str(args.dataset),
                          "level": _dataset_label(args.dataset)})
        outputs["checkpoint"] = "best.pt"
    return outputs


def _cmd_benchmark(args, run: RunConfig) -> Dict[str, Any]:
    seed = run.simstore.rng_seed if args.seed is None else args.seed
    overrides = {algorithm: dict(run.train[algorithm]) for algorithm in args.algorithms
                 if isinstance(run.train.get(algorithm), dict)}
    config, seeds = evaluation_config(run), eval_seeds(run, None)
    records = []
    for level in LEVELS:
        spec = CollectionSpec.for_level(level, run.collection.get(level))
        collected = collect_dataset(level, run.simstore, seed, spec)
        write_collection(collected, args.out / f"{level}.jsonl", level, seed, spec)
        reports, _ = benchmark(collected.dataset, config, level, args.algorithms,
                               eval_seeds=seeds, seed=seed, overrides=overrides)
        records += [report_record(report, algorithm, level)
                    for algorithm, report in reports.items()]
    write_records(args.out / "eval.jsonl", records)
    problems = ordering_violations(records)
    table = render(summary_table(records), title="Normalized net revenue")
    with open(args.out / "summary.txt", "w", encoding="utf-8") as handle:
        handle.write(table + "\n")
        handle.writelines(f"ordering: {problem}\n" for problem in problems)
    print(table)
    for problem in problems:
        print(f"ordering: {problem}")
    return {"seed": seed, "datasets": [f"{level}.jsonl" for level in LEVELS],
            "report": "eval.jsonl", "summary": "summary.txt", "ordering_violations": problems}


def _cmd_report(args, run) -> Dict[str, Any]:
    for path in args.reports:
        if not path.exists():
            raise ReportError(f"report {path} does not exist")
    table = render(summary_table(read_records(args.reports)), title="Normalized net revenue")
    with open(args.out / "summary.txt", "w", encoding="utf-8") as handle:
        handle.write(table + "\n")
    print(table)
    return {"summary": "summary.txt", "inputs": [str(path) for path in args.reports]}


COMMANDS = {"simulate": _cmd_simulate, "collect": _cmd_collect, "train": _cmd_train,
            "eval": _cmd_eval, "search": _cmd_search, "benchmark": _cmd_benchmark,
            "report": _cmd_report}


def exit_code(err: BaseException) -> int:
    if isinstance(err, (ConfigError, ContractViolation)):
        return EXIT_USAGE
    if isinstance(err, DatasetParseError):
        return EXIT_DATA
    return EXIT_RUNTIME


def run(args: argparse.Namespace) -> int:
    """Execute one parsed command and return its exit status."""
    try:
        config = load_config(args.config) if getattr(args, "config", None) is not None else None
        args.out.mkdir(parents=True, exist_ok=True)
        outputs = COMMANDS[args.verb](args, config)
        write_manifest(args.out, args, config, args.seed, outputs)
    except SimStoreError as err:
        logger.error("%s failed: %s", args.verb, err)
        print(f"error: {err}", file=sys.stderr)
        return exit_code(err)
    except Exception:  # pylint: disable=broad-except
        logger.exception("%s failed unexpectedly", args.verb)
        return EXIT_RUNTIME
    return EXIT_OK


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    return run(args)


if __name__ == "__main__":
    sys.exit(main())
