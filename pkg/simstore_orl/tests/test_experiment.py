"""Test evaluation anchoring, data collection, search and the summary tables."""

import math
import tempfile
import unittest
from pathlib import Path
from unittest.mock import patch

import numpy as np
from scipy import stats

from simstore_orl.algos.base import ALGORITHMS, TrainSpec
from simstore_orl.algos.policies import ConstantPolicy, FraudAllPolicy, OraclePolicy
from simstore_orl.errors import ConfigError, ReportError
from simstore_orl.experiment.collect import (CollectionSpec, collect_dataset, write_collection)
from simstore_orl.experiment.evaluate import (EvalReport, anchors, evaluate_policy, normalize,
                                              rollout)
from simstore_orl.experiment.presets import (BEST_PARAMS, LEVELS, Choice, LogUniform,
                                             best_params, sample_config, search_space)
from simstore_orl.experiment.report import (leaderboard_frame, ordering_violations,
                                            read_records, render, report_record, summary_table,
                                            write_records)
from simstore_orl.experiment.search import TrialResult, rank, random_search, trial_seed
from simstore_orl.data.dataset import read_dataset, read_metadata
from simstore_orl.tests.ml_test import small_config, synthetic_dataset

QUICK_SPACE = {"max_epochs": 1, "layer_size": 8, "batch_size": 64}


class TestEvaluate(unittest.TestCase):

    @classmethod
    def setUpClass(cls):
        cls.config = small_config()

    def test_anchors(self):
        fraud_all = evaluate_policy(FraudAllPolicy(), self.config, [0, 1])
        oracle = evaluate_policy(OraclePolicy(), self.config, [0, 1])
        self.assertEqual(fraud_all.normalized, [0.0, 0.0])
        for value in oracle.normalized:
            self.assertAlmostEqual(value, 100.0)

    def test_anchor_values(self):
        fraud_all, oracle = anchors(self.config, 0)
        self.assertEqual(fraud_all, 0.0)
        self.assertGreater(oracle, 0.0)
        self.assertEqual(anchors(self.config, 0), (fraud_all, oracle))

    def test_normalize(self):
        self.assertAlmostEqual(normalize(50.0, 0.0, 100.0), 50.0)
        self.assertAlmostEqual(normalize(-20.0, 0.0, 100.0), -20.0)
        with self.assertRaises(ReportError):
            normalize(1.0, 5.0, 5.0)

    def test_rollout_is_seeded(self):
        first = rollout(ConstantPolicy(0), self.config, 3)
        second = rollout(ConstantPolicy(0), self.config, 3)
        self.assertEqual(first, second)
        self.assertAlmostEqual(first.net_revenue, first.revenue - first.chargeback_loss)

    def test_report_mapping(self):
        report = evaluate_policy(ConstantPolicy(0), self.config, [0], name="pass_all")
        mapping = report.to_mapping()
        self.assertEqual(mapping["mean"], report.mean)
        self.assertEqual(EvalReport.from_mapping(mapping), report)

    def test_no_seeds(self):
        with self.assertRaises(ReportError):
            evaluate_policy(FraudAllPolicy(), self.config, [])


class TestCollect(unittest.TestCase):

    def spec(self, **changes):
        spec = CollectionSpec.for_level("medium")
        for key, value in changes.items():
            setattr(spec, key, value)
        return spec

    def test_seeded(self):
        config = small_config(sim_duration=3.0)
        first = collect_dataset("medium", config, seed=5)
        second = collect_dataset("medium", config, seed=5)
        self.assertEqual(first.dataset.records, second.dataset.records)
        self.assertEqual(first.retrains, second.retrains)

    def test_retrains_daily(self):
        result = collect_dataset("medium", small_config(sim_duration=4.0), seed=1)
        days = [retrain["day"] for retrain in result.retrains]
        self.assertEqual(days, sorted(days))
        self.assertTrue(all(day in (1.0, 2.0, 3.0) for day in days))

    def test_fraud_everything(self):
        config = small_config(sim_duration=2.0)
        result = collect_dataset("medium", config, seed=0,
                                 spec=self.spec(pass_prob=0.0, retrain_every=2.0))
        self.assertGreater(len(result.dataset), 0)
        self.assertTrue(all(record.a == 1 for record in result.dataset))
        self.assertEqual(result.retrains, [])

    def test_autoclose_during_collection(self):
        config = small_config(sim_duration=2.0)
        result = collect_dataset("medium", config, seed=0,
                                 spec=self.spec(pass_prob=1.0, retrain_every=2.0))
        charged_back = set()
        for record in sorted(result.dataset, key=lambda record: record.t):
            if record.a == 1:
                # With every order passed by default, a Fraud can only come from auto-close.
                self.assertIn(record.c, charged_back)
            elif record.r < 0:
                charged_back.add(record.c)

    def test_zero_duration(self):
        result = collect_dataset("medium", small_config(sim_duration=0.0), seed=0)
        self.assertEqual(len(result.dataset), 0)

    def test_duration_override(self):
        spec = self.spec(duration=1.0)
        result = collect_dataset("medium", small_config(), seed=0, spec=spec)
        self.assertEqual(result.config.sim_duration, 1.0)
        self.assertTrue(all(record.t < 1.0 for record in result.dataset))

    def test_cadence_must_divide_horizon(self):
        with self.assertRaises(ConfigError):
            collect_dataset("medium", small_config(), seed=0, spec=self.spec(retrain_every=4.0))
        with self.assertRaises(ConfigError):
            collect_dataset("medium", small_config(), seed=0, spec=self.spec(action_noise=1.5))

    def test_expert_outearns_medium(self):
        config = small_config(num_initial_customers=100)
        revenue = {level: np.mean([collect_dataset(level, config, seed=seed).net_revenue
                                   for seed in range(5)])
                   for level in ("medium", "expert")}
        self.assertGreater(revenue["expert"], revenue["medium"])

    def test_level_presets(self):
        medium, expert = CollectionSpec.for_level("medium"), CollectionSpec.for_level("expert")
        self.assertEqual((medium.classifier.max_depth, medium.classifier.max_trees), (2, 25))
        self.assertEqual(medium.window_days, 7)
        self.assertEqual(expert.threshold_metric, "reward")
        self.assertIsNone(expert.window_days)
        self.assertEqual((medium.action_noise, expert.action_noise), (0.2, 0.0))
        with self.assertRaises(ConfigError):
            CollectionSpec.for_level("novice")
        with self.assertRaises(ConfigError):
            CollectionSpec.for_level("medium", {"retrain_hourly": True})

    def test_write_collection(self):
        result = collect_dataset("medium", small_config(sim_duration=2.0), seed=2)
        spec = CollectionSpec.for_level("medium")
        with tempfile.TemporaryDirectory() as tmp:
            path = Path(tmp) / "medium.jsonl"
            write_collection(result, path, "medium", 2, spec)
            self.assertEqual(read_dataset(path).records, result.dataset.records)
            meta = read_metadata(path)
        self.assertEqual(meta["level"], "medium")
        self.assertEqual(meta["simstore"], result.config.to_mapping())
        self.assertEqual(meta["records"], len(result.dataset))


class TestPresets(unittest.TestCase):

    def test_best_params_are_valid_specs(self):
        for algorithm in ALGORITHMS:
            for level in LEVELS:
                with self.subTest(algorithm=algorithm, level=level):
                    TrainSpec.from_mapping(best_params(algorithm, level), algorithm)

    def test_best_params_copy(self):
        best_params("bc", "medium")["batch_size"] = 1
        self.assertEqual(BEST_PARAMS["bc"]["medium"]["batch_size"], 64)

    def test_search_draws_are_valid_specs(self):
        rng = np.random.default_rng(0)
        for algorithm in ALGORITHMS:
            for _ in range(20):
                TrainSpec.from_mapping(sample_config(search_space(algorithm), rng), algorithm)

    def test_overrides(self):
        space = search_space("bc", {"max_epochs": 3, "learning_rate": Choice([0.5])})
        draw = sample_config(space, np.random.default_rng(0))
        self.assertEqual((draw["max_epochs"], draw["learning_rate"]), (3, 0.5))
        with self.assertRaises(ConfigError):
            search_space("ppo")

    def test_log_uniform(self):
        rng = np.random.default_rng(1)
        space = LogUniform(1e-4, 1e-1)
        exponents = np.log10([space.sample(rng) for _ in range(5000)])
        counts, _ = np.histogram(exponents, bins=10, range=(-4, -1))
        self.assertGreater(stats.chisquare(counts).pvalue, 1e-3)

    def test_sampling_is_seeded(self):
        space = search_space("cql")
        self.assertEqual(sample_config(space, np.random.default_rng(7)),
                         sample_config(space, np.random.default_rng(7)))


class TestSearch(unittest.TestCase):

    @classmethod
    def setUpClass(cls):
        cls.dataset = synthetic_dataset(num_customers=30)
        cls.config = small_config()

    def test_budget_and_seeds(self):
        space = search_space("bc", QUICK_SPACE)
        result = random_search("bc", self.dataset, self.config, space=space, master_seed=3,
                               budget=2, eval_seeds=[0])
        self.assertEqual(len(result.leaderboard), 2)
        self.assertEqual(sorted(trial.index for trial in result.leaderboard), [0, 1])
        self.assertEqual({trial.seed for trial in result.leaderboard},
                         {trial_seed(3, 0), trial_seed(3, 1)})
        best = result.leaderboard[0]
        self.assertTrue(best.ok)
        self.assertEqual(result.best_spec.seed, best.seed)
        self.assertEqual(result.best_spec.algorithm, "bc")

    def test_failures_are_kept(self):
        space = search_space("bc", dict(QUICK_SPACE, num_layers=0))
        result = random_search("bc", self.dataset, self.config, space=space, budget=2,
                               eval_seeds=[0])
        self.assertEqual(len(result.failures), 2)
        self.assertIsNone(result.best_spec)
        self.assertIn("ConfigError", result.failures[0].error)

    def test_crashing_trainer_is_recorded(self):
        space = search_space("bc", QUICK_SPACE)
        with patch("simstore_orl.experiment.search.train_policy",
                   side_effect=RuntimeError("weights went nan")):
            with self.assertLogs("simstore_orl.experiment.search", level="ERROR") as logs:
                result = random_search("bc", self.dataset, self.config, space=space, budget=2,
                                       eval_seeds=[0])
        self.assertEqual(len(result.failures), 2)
        self.assertIsNone(result.best_spec)
        self.assertEqual(result.failures[0].error, "RuntimeError: weights went nan")
        self.assertTrue(any("crashed" in line for line in logs.output))

    def test_invalid_budget(self):
        with self.assertRaises(ConfigError):
            random_search("bc", self.dataset, self.config, budget=0)
        with self.assertRaises(ConfigError):
            random_search("bc", self.dataset, self.config, budget=1, workers=0)

    def test_rank(self):
        trials = [TrialResult(0, 0, {}, mean=10.0), TrialResult(1, 0, {}, mean=30.0),
                  TrialResult(2, 0, {}, error="TrainingError: boom"),
                  TrialResult(3, 0, {}, mean=30.0), TrialResult(4, 0, {})]
        self.assertEqual([trial.index for trial in rank(trials)], [1, 3, 0, 2, 4])

    def test_trial_seed(self):
        self.assertEqual(trial_seed(0, 1), trial_seed(0, 1))
        self.assertNotEqual(trial_seed(0, 1), trial_seed(0, 2))
        self.assertNotEqual(trial_seed(0, 1), trial_seed(1, 1))


def record(algorithm, dataset, normalized):
    report = EvalReport(name=algorithm, seeds=list(range(len(normalized))),
                        net_revenues=list(normalized), fraud_all=[0.0] * len(normalized),
                        oracle=[100.0] * len(normalized), normalized=list(normalized))
    return report_record(report, algorithm, dataset)


class TestReport(unittest.TestCase):

    def test_summary_table(self):
        records = [record("dqn", "medium", [40.0, 60.0]), record("bc", "medium", [50.0]),
                   record("bc", "expert", [70.0, 70.0])]
        table = summary_table(records)
        self.assertEqual(list(table.columns), ["BC", "DQN"])
        self.assertEqual(table.loc["medium", "DQN"], "50.00 ± 10.00")
        self.assertEqual(table.loc["expert", "BC"], "70.00 ± 0.00")
        self.assertEqual(table.loc["expert", "DQN"], "-")

    def test_latest_record_wins(self):
        records = [record("bc", "medium", [10.0]), record("bc", "medium", [20.0])]
        self.assertEqual(summary_table(records).loc["medium", "BC"], "20.00 ± 0.00")

    def test_missing_fields(self):
        with self.assertRaises(ReportError):
            summary_table([{"algorithm": "bc"}])
        with self.assertRaises(ReportError):
            summary_table([])

    def test_records_file(self):
        records = [record("bc", "medium", [50.0]), record("cql", "expert", [25.0, 35.0])]
        with tempfile.TemporaryDirectory() as tmp:
            path = Path(tmp) / "eval.jsonl"
            write_records(path, records[:1])
            write_records(path, records[1:], append=True)
            self.assertEqual(read_records(path), records)
            with open(path, "a", encoding="utf-8") as handle:
                handle.write("not json\n")
            with self.assertRaisesRegex(ReportError, ":3:"):
                read_records(path)
            with self.assertRaises(ReportError):
                read_records(Path(tmp) / "missing.jsonl")

    def test_ordering_holds(self):
        records = [record("bgbt", "medium", [20.0, 22.0]), record("dqn", "medium", [35.0, 37.0]),
                   record("modqn", "medium", [28.0]), record("bgbt", "expert", [25.0]),
                   record("dqn", "expert", [34.0]), record("bc", "expert", [90.0, 110.0])]
        self.assertEqual(ordering_violations(records), [])

    def test_ordering_violations(self):
        records = [record("bgbt", "medium", [30.0]), record("modqn", "medium", [35.0]),
                   record("modqn", "expert", [31.0]), record("cql", "expert", [-5.0]),
                   record("bc", "medium", [104.0, 104.0])]
        problems = ordering_violations(records)
        self.assertEqual(len(problems), 4)
        self.assertIn("BGBT", problems[0])
        self.assertTrue(any(problem.startswith("MODQN: expert") for problem in problems))
        self.assertTrue(any(problem.startswith("expert/CQL") for problem in problems))
        self.assertTrue(any(problem.startswith("medium/BC") for problem in problems))

    def test_ordering_skips_missing_cells(self):
        records = [record("dqn", "medium", [5.0]), record("bc", "expert", [50.0])]
        self.assertEqual(ordering_violations(records), [])

    def test_leaderboard(self):
        trials = rank([TrialResult(0, 11, {"learning_rate": 0.1}, mean=5.0),
                       TrialResult(1, 12, {"learning_rate": 0.2}, mean=9.0)])
        frame = leaderboard_frame(trials, top=1)
        self.assertEqual(len(frame), 1)
        self.assertEqual(frame.iloc[0]["trial"], 1)
        self.assertIn("learning_rate", render(frame, title="bc"))
        self.assertTrue(render(frame, title="bc").startswith("bc\n"))
        self.assertTrue(math.isclose(frame.iloc[0]["mean"], 9.0))


if __name__ == '__main__':
    unittest.main()
