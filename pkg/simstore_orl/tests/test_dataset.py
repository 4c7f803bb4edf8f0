"""Test transition recording, returns, n-step targets, splits, normalisation and file IO."""

import json
import tempfile
import unittest
from pathlib import Path

import numpy as np

from simstore_orl.data.dataset import (Dataset, Episode, NStepTargets, TransitionRecord,
                                       TransitionRecorder, apply_normalizer, compute_return,
                                       fit_normalizer, meta_path, n_step_target, read_dataset,
                                       read_metadata, split_episodes, split_orders, write_dataset)
from simstore_orl.errors import ConfigError, ContractViolation, DatasetParseError
from simstore_orl.sim.features import NUM_FEATURES
from simstore_orl.tests.ml_test import synthetic_dataset


def obs(value: float):
    return tuple([float(value)] * NUM_FEATURES)


def chain(times, rewards, customer=0, terminal_last=True):
    """One customer's episode with observations equal to the record index."""
    records = []
    for i, (time, reward) in enumerate(zip(times, rewards)):
        last = i == len(times) - 1
        terminal = last and terminal_last
        records.append(TransitionRecord(o=obs(i), t=time, a=0, c=customer, r=reward, y_hat=0,
                                        o_next=None if terminal else obs(i + 1),
                                        terminal=terminal))
    return Episode(customer, records)


class TestTransitionRecord(unittest.TestCase):

    def test_terminal_consistency(self):
        with self.assertRaises(ContractViolation):
            TransitionRecord(o=obs(0), t=0.0, a=0, c=0, r=1.0, y_hat=0, o_next=obs(1),
                             terminal=True)
        with self.assertRaises(ContractViolation):
            TransitionRecord(o=obs(0), t=0.0, a=0, c=0, r=1.0, y_hat=0, o_next=None,
                             terminal=False)

    def test_binary_fields(self):
        with self.assertRaises(ContractViolation):
            TransitionRecord(o=obs(0), t=0.0, a=2, c=0, r=1.0, y_hat=0, o_next=None, terminal=True)


class TestRecorder(unittest.TestCase):

    def test_links_successor_of_same_customer(self):
        recorder = TransitionRecorder()
        recorder.add_step(obs(1), 0.0, 0, customer_id=1, reward=5.0, y_hat=0)
        recorder.add_step(obs(2), 0.5, 0, customer_id=2, reward=3.0, y_hat=0)
        recorder.add_step(obs(3), 1.0, 1, customer_id=1, reward=0.0, y_hat=1,
                          customer_active=False)
        records = recorder.finish()
        self.assertEqual(records[0].o_next, obs(3))
        self.assertFalse(records[0].terminal)
        self.assertTrue(records[1].terminal)
        self.assertTrue(records[2].terminal)

    def test_episodes_grouped_and_sorted(self):
        dataset = synthetic_dataset(num_customers=10)
        episodes = dataset.episodes()
        self.assertEqual(sum(len(episode) for episode in episodes), len(dataset))
        for episode in episodes:
            times = [record.t for record in episode.records]
            self.assertEqual(times, sorted(times))
            self.assertTrue(episode.records[-1].terminal)
            self.assertTrue(all(not record.terminal for record in episode.records[:-1]))


class TestReturns(unittest.TestCase):

    def test_time_discounted_return(self):
        episode = chain([0.0, 1.0, 3.0], [1.0, 2.0, 4.0])
        self.assertAlmostEqual(compute_return(episode, 0, gamma=0.5), 1 + 0.5 * 2 + 0.125 * 4)
        self.assertAlmostEqual(compute_return(episode, 1, gamma=0.5), 2 + 0.25 * 4)

    def test_time_unit(self):
        episode = chain([0.0, 2.0], [1.0, 1.0])
        self.assertAlmostEqual(compute_return(episode, 0, gamma=0.5, time_unit=2.0), 1.5)

    def test_gamma_extremes(self):
        episode = chain([0.0, 1.0, 3.0], [1.0, 2.0, 4.0])
        self.assertAlmostEqual(compute_return(episode, 0, gamma=0.0), 1.0)
        self.assertAlmostEqual(compute_return(episode, 0, gamma=1.0), 7.0)

    def test_invalid_gamma(self):
        with self.assertRaises(ContractViolation):
            compute_return(chain([0.0], [1.0]), 0, gamma=1.5)

    def test_n_step_bootstrap(self):
        episode = chain([0.0, 1.0, 2.0, 3.0], [1.0, 1.0, 1.0, 1.0])
        q = lambda o: [o[0], 10 * o[0]]
        # Two rewards, then bootstrap on the third record's observation (value 2 -> max 20).
        self.assertAlmostEqual(n_step_target(episode, 0, 2, 0.5, 1.0, q), 1 + 0.5 + 0.25 * 20)

    def test_n_step_stops_at_terminal(self):
        episode = chain([0.0, 1.0], [1.0, 2.0])
        q = lambda o: [100.0, 100.0]
        self.assertAlmostEqual(n_step_target(episode, 0, 5, 0.5, 1.0, q), 2.0)

    def test_vectorised_targets_match(self):
        dataset = synthetic_dataset(num_customers=12)
        arrays = dataset.to_arrays()
        index_of = {id(record): i for i, record in enumerate(dataset.records)}
        q = lambda o: [o[0], o[-1]]
        for n in (1, 3):
            targets = NStepTargets.build(arrays, n=n, gamma=0.7)
            bootstrap = np.max(targets.bootstrap_obs[:, [0, -1]], axis=1)
            vectorised = targets.reward_sum + targets.discount * bootstrap
            for episode in dataset.episodes():
                for i, record in enumerate(episode.records):
                    expected = n_step_target(episode, i, n, 0.7, 1.0, q)
                    self.assertAlmostEqual(vectorised[index_of[id(record)]], expected)

    def test_return_recursion(self):
        rng = np.random.default_rng(20)
        for _ in range(1000):
            length = int(rng.integers(1, 9))
            times = np.cumsum(rng.exponential(1.0, length))
            episode = chain(times.tolist(), (10 * rng.standard_normal(length)).tolist())
            gamma, unit = float(rng.uniform(0.05, 1.0)), float(rng.choice([0.5, 1.0, 2.0]))
            returns = [compute_return(episode, i, gamma, unit) for i in range(length)]
            self.assertAlmostEqual(returns[-1], episode.records[-1].r, delta=1e-10)
            for i in range(length - 1):
                step = gamma ** ((times[i + 1] - times[i]) / unit)
                self.assertAlmostEqual(returns[i], episode.records[i].r + step * returns[i + 1],
                                       delta=1e-10)

    def test_long_n_step_is_full_return(self):
        rng = np.random.default_rng(21)
        q = lambda o: [1e6, 1e6]
        episodes = []
        for customer in range(50):
            length = int(rng.integers(1, 7))
            times = np.cumsum(rng.exponential(1.0, length))
            episodes.append(chain(times.tolist(), rng.normal(0.0, 5.0, length).tolist(),
                                  customer=customer))
        dataset = Dataset.from_episodes(episodes)
        targets = NStepTargets.build(dataset.to_arrays(), n=10, gamma=0.8)
        index_of = {id(record): i for i, record in enumerate(dataset.records)}
        for episode in episodes:
            for i, record in enumerate(episode.records):
                expected = compute_return(episode, i, 0.8)
                self.assertAlmostEqual(n_step_target(episode, i, 10, 0.8, 1.0, q), expected,
                                       delta=1e-10)
                self.assertAlmostEqual(targets.reward_sum[index_of[id(record)]], expected,
                                       delta=1e-10)
                self.assertEqual(targets.discount[index_of[id(record)]], 0.0)

    def test_broken_episode_rejected(self):
        dataset = Dataset(chain([0.0, 1.0], [1.0, 1.0], terminal_last=False).records)
        with self.assertRaises(ContractViolation):
            NStepTargets.build(dataset.to_arrays(), n=1, gamma=0.9)


class TestSplits(unittest.TestCase):

    def test_episode_split_keeps_customers_whole(self):
        dataset = synthetic_dataset()
        train, test = split_episodes(dataset, 0.75, np.random.default_rng(0))
        self.assertEqual(len(train) + len(test), len(dataset))
        self.assertFalse({r.c for r in train} & {r.c for r in test})
        self.assertEqual(len(train.episodes()), round(0.75 * len(dataset.episodes())))

    def test_split_is_seeded(self):
        dataset = synthetic_dataset()
        first, _ = split_episodes(dataset, 0.5, np.random.default_rng(9))
        second, _ = split_episodes(dataset, 0.5, np.random.default_rng(9))
        self.assertEqual(first.records, second.records)

    def test_order_split(self):
        dataset = synthetic_dataset()
        train, test = split_orders(dataset, 0.75, np.random.default_rng(0))
        self.assertEqual(len(train), round(0.75 * len(dataset)))
        self.assertEqual(len(train) + len(test), len(dataset))

    def test_empty_dataset(self):
        with self.assertRaises(ContractViolation):
            split_episodes(Dataset(), 0.75, np.random.default_rng(0))
        with self.assertRaises(ContractViolation):
            split_orders(Dataset(), 0.75, np.random.default_rng(0))


class TestNormalization(unittest.TestCase):

    def test_minmax(self):
        dataset = synthetic_dataset()
        spec = fit_normalizer(dataset, "minmax")
        x = spec.transform(dataset.to_arrays().obs)
        self.assertGreaterEqual(x.min(), 0.0)
        self.assertLessEqual(x.max(), 1.0)

    def test_standard(self):
        dataset = synthetic_dataset()
        spec = fit_normalizer(dataset, "standard")
        x = spec.transform(dataset.to_arrays().obs)
        varying = dataset.to_arrays().obs.std(axis=0) > 0
        self.assertTrue(np.allclose(x[:, varying].mean(axis=0), 0.0, atol=1e-9))
        self.assertTrue(np.allclose(x[:, varying].std(axis=0), 1.0))
        # Constant columns map to zero instead of dividing by zero.
        self.assertTrue(np.all(x[:, ~varying] == 0.0))

    def test_reward_scale(self):
        dataset = synthetic_dataset()
        spec = fit_normalizer(dataset, "standard")
        largest = max(abs(record.r) for record in dataset)
        self.assertAlmostEqual(spec.reward_scale, largest)
        self.assertAlmostEqual(apply_normalizer(spec, -largest), -1.0)

    def test_unknown_mode(self):
        with self.assertRaises(ConfigError):
            fit_normalizer(synthetic_dataset(), "robust")


class TestFiles(unittest.TestCase):

    def test_write_read(self):
        dataset = synthetic_dataset(num_customers=8)
        with tempfile.TemporaryDirectory() as tmp:
            path = Path(tmp) / "data.jsonl"
            count = write_dataset(path, dataset.records, meta={"level": "medium", "seed": 3})
            self.assertEqual(count, len(dataset))
            self.assertEqual(read_dataset(path).records, dataset.records)
            meta = read_metadata(path)
            self.assertEqual(meta["level"], "medium")
            self.assertEqual(meta["records"], len(dataset))
            self.assertTrue(meta_path(path).exists())

    def test_missing_metadata(self):
        with tempfile.TemporaryDirectory() as tmp:
            path = Path(tmp) / "data.jsonl"
            write_dataset(path, synthetic_dataset(num_customers=2).records)
            self.assertEqual(read_metadata(path), {})

    def test_malformed_line_reports_number(self):
        with tempfile.TemporaryDirectory() as tmp:
            path = Path(tmp) / "data.jsonl"
            write_dataset(path, synthetic_dataset(num_customers=2).records)
            with open(path, "a", encoding="utf-8") as handle:
                handle.write("{not json\n")
            lines = len(path.read_text().splitlines())
            with self.assertRaises(DatasetParseError) as caught:
                read_dataset(path)
            self.assertEqual(caught.exception.line_number, lines)

    def test_missing_field(self):
        with tempfile.TemporaryDirectory() as tmp:
            path = Path(tmp) / "data.jsonl"
            path.write_text(json.dumps({"o": list(obs(0)), "t": 0.0}) + "\n")
            with self.assertRaisesRegex(DatasetParseError, "line 1"):
                read_dataset(path)

    def test_schema_mismatch(self):
        with tempfile.TemporaryDirectory() as tmp:
            path = Path(tmp) / "data.jsonl"
            path.write_text(json.dumps({"format": "simstore-transitions", "fields": ["a"]}) + "\n")
            with self.assertRaises(DatasetParseError):
                read_dataset(path)


if __name__ == '__main__':
    unittest.main()
