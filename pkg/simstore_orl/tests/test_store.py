"""Test the SimStore simulator: dynamics, rewards, reproducibility and the Gym adapter."""

import unittest

import numpy as np
from scipy import stats

from simstore_orl.config import SimConfig
from simstore_orl.errors import ContractViolation, SimulationError
from simstore_orl.sim.features import NUM_FEATURES, PRICE_COLUMN
from simstore_orl.sim.gym_env import SimStoreGymEnv
from simstore_orl.sim.store import (FRAUD, PASS, AccountState, Customer, CustomerKind, Inventory,
                                    Item, Ledger, Order, SimStore, apply_action, init_inventory,
                                    next_event_delay, originate_order, reset, spawn_customer)
from simstore_orl.tests.ml_test import small_config


def run(env: SimStore, seed: int, choose):
    """Roll ``env`` to the horizon; ``choose(observation, context)`` picks each action."""
    trace = []
    observation = env.reset(seed)
    while observation is not None:
        context = env.pending_context()
        action = choose(observation, context)
        result = env.step(action)
        trace.append((observation, context, action, result))
        observation = result.observation
    return trace


class TestInventory(unittest.TestCase):

    def test_price_moments(self):
        config = SimConfig(num_items=20000)
        items = init_inventory(config, np.random.default_rng(0))
        log_prices = np.log([item.price for item in items])
        self.assertAlmostEqual(log_prices.mean(), config.price_log_mean, delta=0.05)
        self.assertAlmostEqual(log_prices.std(), config.price_log_sd, delta=0.03)

    def test_categories_in_range(self):
        config = SimConfig(num_items=500, num_categories=7)
        categories = {item.category_id for item in init_inventory(config, np.random.default_rng(1))}
        self.assertTrue(categories <= set(range(7)))

    def test_percentile_subsets(self):
        items = [Item(item_id=i, category_id=0, price=float(p))
                 for i, p in enumerate([5, 1, 9, 3, 7, 2, 8, 4, 6, 10])]
        inventory = Inventory(items, expensive_percentile=20, cheap_percentile=10)
        self.assertEqual(sorted(items[i].price for i in inventory.expensive_ids), [9.0, 10.0])
        self.assertEqual([items[i].price for i in inventory.cheap_ids], [1.0])


class TestCustomerDynamics(unittest.TestCase):

    def test_mix_of_kinds(self):
        config = SimConfig()
        rng = np.random.default_rng(2)
        kinds = [spawn_customer(config, rng, 0.0).kind for _ in range(100_000)]
        regular = np.mean([kind is CustomerKind.REGULAR for kind in kinds])
        self.assertAlmostEqual(regular, 0.8, delta=0.01)
        bad = [kind for kind in kinds if kind is not CustomerKind.REGULAR]
        sleeper = np.mean([kind is CustomerKind.SLEEPER for kind in bad])
        self.assertAlmostEqual(sleeper, 0.2, delta=0.01)

    def test_all_regular(self):
        config = SimConfig(ratio_regular=1.0)
        rng = np.random.default_rng(7)
        self.assertTrue(all(spawn_customer(config, rng, 0.0).kind is CustomerKind.REGULAR
                            for _ in range(1000)))

    def test_order_interval_is_exponential(self):
        config = SimConfig(max_order_interval=1e6)
        customer = Customer(customer_id=0, kind=CustomerKind.REGULAR, signup_time=0.0)
        rng = np.random.default_rng(3)
        delays = [next_event_delay(customer, config, rng) for _ in range(10_000)]
        self.assertGreater(stats.kstest(delays, stats.expon(scale=2.0).cdf).pvalue, 0.01)
        self.assertAlmostEqual(np.mean(delays), 2.0, delta=0.1)

    def test_order_interval_clipped(self):
        config = SimConfig(max_order_interval=0.5)
        customer = Customer(customer_id=0, kind=CustomerKind.REGULAR, signup_time=0.0)
        rng = np.random.default_rng(4)
        self.assertLessEqual(max(next_event_delay(customer, config, rng) for _ in range(500)), 0.5)

    def test_suspended_customer_cannot_order(self):
        customer = Customer(customer_id=0, kind=CustomerKind.REGULAR, signup_time=0.0,
                            account_state=AccountState.SUSPENDED)
        with self.assertRaises(ContractViolation):
            next_event_delay(customer, SimConfig(), np.random.default_rng(0))

    def test_empty_inventory(self):
        customer = Customer(customer_id=0, kind=CustomerKind.REGULAR, signup_time=0.0)
        with self.assertRaises(SimulationError):
            originate_order(customer, Inventory([]), SimConfig(), np.random.default_rng(0), 0.0)

    def test_sleeper_switches_to_expensive_items(self):
        config = SimConfig(sleeper_chargeback_prob_before_attack=0.0,
                           sleeper_chargeback_prob_during_attack=1.0)
        items = [Item(item_id=i, category_id=0, price=float(i + 1)) for i in range(100)]
        inventory = Inventory(items)
        customer = Customer(customer_id=0, kind=CustomerKind.SLEEPER, signup_time=0.0,
                            sleeper_orders_before_attack=3)
        rng = np.random.default_rng(5)
        orders = [originate_order(customer, inventory, config, rng, float(i)) for i in range(6)]
        self.assertTrue(all(order.price <= 10 and order.y == 0 for order in orders[:3]))
        self.assertTrue(all(order.price > 90 and order.y == 1 for order in orders[3:]))

    def test_regular_orders_never_fraudulent(self):
        config = SimConfig()
        inventory = Inventory(init_inventory(config, np.random.default_rng(0)))
        customer = Customer(customer_id=0, kind=CustomerKind.REGULAR, signup_time=0.0)
        rng = np.random.default_rng(6)
        self.assertTrue(all(originate_order(customer, inventory, config, rng, 0.0).y == 0
                            for _ in range(200)))


class TestApplyAction(unittest.TestCase):

    def setUp(self):
        self.rng = np.random.default_rng(0)
        self.ledger = Ledger()

    def order(self, y):
        return Order(order_id=0, customer_id=0, item_id=0, category_id=0, price=25.0, time=0.0, y=y)

    def test_pass_legitimate(self):
        customer = Customer(0, CustomerKind.REGULAR, 0.0)
        reward, y_hat, chargeback = apply_action(self.order(0), PASS, customer, self.ledger, self.rng)
        self.assertEqual((reward, y_hat, chargeback), (25.0, 0, False))
        self.assertEqual(self.ledger.net_revenue, 25.0)

    def test_pass_fraudulent(self):
        customer = Customer(0, CustomerKind.IMMEDIATE, 0.0)
        reward, y_hat, chargeback = apply_action(self.order(1), PASS, customer, self.ledger, self.rng)
        self.assertEqual((reward, y_hat, chargeback), (-25.0, 1, True))
        self.assertEqual(self.ledger.net_revenue, -25.0)

    def test_fraud_bad_actor(self):
        customer = Customer(0, CustomerKind.SLEEPER, 0.0)
        reward, y_hat, _ = apply_action(self.order(0), FRAUD, customer, self.ledger, self.rng)
        self.assertEqual((reward, y_hat), (0.0, 1))
        self.assertFalse(customer.can_order)

    def test_fraud_regular_reinstated(self):
        customer = Customer(0, CustomerKind.REGULAR, 0.0)
        reward, y_hat, _ = apply_action(self.order(0), FRAUD, customer, self.ledger, self.rng,
                                        reinstate_prob=1.0)
        self.assertEqual((reward, y_hat), (0.0, 0))
        self.assertIs(customer.account_state, AccountState.REINSTATED)
        self.assertTrue(customer.can_order)

    def test_fraud_regular_abandons(self):
        customer = Customer(0, CustomerKind.REGULAR, 0.0)
        _, y_hat, _ = apply_action(self.order(0), FRAUD, customer, self.ledger, self.rng,
                                   reinstate_prob=0.0)
        self.assertEqual(y_hat, 1)
        self.assertIs(customer.account_state, AccountState.ABANDONED)

    def test_label_bias_rate(self):
        rng = np.random.default_rng(8)
        labels = []
        for _ in range(10_000):
            customer = Customer(0, CustomerKind.REGULAR, 0.0)
            labels.append(apply_action(self.order(0), FRAUD, customer, self.ledger, rng)[1])
        self.assertAlmostEqual(np.mean(labels), 0.8, delta=0.02)
        self.assertEqual(self.ledger.net_revenue, 0.0)

    def test_passed_orders_reveal_true_outcome(self):
        rng = np.random.default_rng(9)
        for _ in range(200):
            regular = Customer(0, CustomerKind.REGULAR, 0.0)
            self.assertEqual(apply_action(self.order(0), PASS, regular, self.ledger, rng)[1], 0)
            bad = Customer(1, CustomerKind.IMMEDIATE, 0.0)
            self.assertEqual(apply_action(self.order(1), PASS, bad, self.ledger, rng)[1], 1)

    def test_invalid_action(self):
        customer = Customer(0, CustomerKind.REGULAR, 0.0)
        with self.assertRaises(ContractViolation):
            apply_action(self.order(0), 2, customer, self.ledger, self.rng)


class TestSimStore(unittest.TestCase):

    def test_same_seed_same_run(self):
        config = small_config()
        first = run(SimStore(config), 11, lambda obs, ctx: ctx.order_id % 2)
        second = run(SimStore(config), 11, lambda obs, ctx: ctx.order_id % 2)
        self.assertEqual(len(first), len(second))
        for (obs_a, _, _, res_a), (obs_b, _, _, res_b) in zip(first, second):
            self.assertTrue(np.array_equal(obs_a.as_array(), obs_b.as_array()))
            self.assertEqual(res_a.reward, res_b.reward)

    def test_different_seeds_differ(self):
        config = small_config()
        first = run(SimStore(config), 1, lambda obs, ctx: PASS)
        second = run(SimStore(config), 2, lambda obs, ctx: PASS)
        self.assertNotEqual([step[0].order_total_price for step in first],
                            [step[0].order_total_price for step in second])

    def test_clock_monotone_within_horizon(self):
        config = small_config()
        times = [ctx.time for _, ctx, _, _ in run(SimStore(config), 3, lambda obs, ctx: PASS)]
        self.assertTrue(times)
        self.assertEqual(times, sorted(times))
        self.assertLessEqual(times[-1], config.sim_duration)

    def test_fraud_all_earns_nothing(self):
        env = SimStore(small_config())
        trace = run(env, 5, lambda obs, ctx: FRAUD)
        self.assertTrue(trace)
        self.assertEqual(env.ledger.net_revenue, 0.0)
        self.assertTrue(all(result.reward == 0.0 for *_, result in trace))

    def test_oracle_never_charged_back(self):
        env = SimStore(small_config())
        run(env, 5, lambda obs, ctx: FRAUD if ctx.y else PASS)
        self.assertEqual(env.ledger.chargeback_loss, 0.0)
        self.assertGreater(env.ledger.net_revenue, 0.0)

    def test_oracle_beats_pass_all(self):
        config = small_config()
        oracle, pass_all = SimStore(config), SimStore(config)
        run(oracle, 6, lambda obs, ctx: FRAUD if ctx.y else PASS)
        run(pass_all, 6, lambda obs, ctx: PASS)
        self.assertGreaterEqual(oracle.ledger.net_revenue, pass_all.ledger.net_revenue)

    def test_reward_matches_ledger(self):
        env = SimStore(small_config())
        trace = run(env, 7, lambda obs, ctx: int(ctx.order_id % 3 == 0))
        self.assertAlmostEqual(sum(result.reward for *_, result in trace), env.ledger.net_revenue)

    def test_reward_sign_matches_outcome(self):
        trace = run(SimStore(small_config()), 8, lambda obs, ctx: PASS)
        for observation, context, _, result in trace:
            price = observation.as_array()[PRICE_COLUMN]
            self.assertAlmostEqual(result.reward, -price if context.y else price)
            self.assertEqual(result.y_hat, context.y)

    def test_suspended_bad_actors_stop_ordering(self):
        env = SimStore(small_config())
        trace = run(env, 9, lambda obs, ctx: FRAUD)
        counts = {}
        for _, context, _, _ in trace:
            counts[context.customer_id] = counts.get(context.customer_id, 0) + 1
        for customer_id, count in counts.items():
            if env.customers[customer_id].is_bad_actor:
                self.assertEqual(count, 1)

    def test_first_observation_of_customer(self):
        trace = run(SimStore(small_config()), 10, lambda obs, ctx: PASS)
        seen = set()
        for observation, context, _, _ in trace:
            if context.customer_id not in seen:
                self.assertEqual(observation.customer_past_lifetime_num_orders, 0)
                self.assertEqual(observation.customer_days_since_first_order, -1.0)
                seen.add(context.customer_id)

    def test_zero_duration(self):
        env, observation = reset(small_config(sim_duration=0.0), 0)
        self.assertIsNone(observation)
        self.assertTrue(env.done)
        with self.assertRaises(ContractViolation):
            env.step(PASS)

    def test_step_before_reset(self):
        with self.assertRaises(ContractViolation):
            SimStore(small_config()).step(PASS)

    def test_invalid_action(self):
        env = SimStore(small_config())
        env.reset(0)
        with self.assertRaises(ContractViolation):
            env.step(3)

    def test_info_channel(self):
        env = SimStore(small_config())
        env.reset(0)
        context = env.pending_context()
        result = env.step(PASS)
        self.assertEqual(result.info["order_id"], context.order_id)
        self.assertEqual(result.info["customer_id"], context.customer_id)
        self.assertEqual(result.info["y"], context.y)
        if not result.terminal:
            self.assertEqual(result.info["next"]["order_id"], env.pending_context().order_id)


class TestGymEnv(unittest.TestCase):

    def test_episode(self):
        env = SimStoreGymEnv(small_config())
        observation, info = env.reset(seed=0)
        self.assertEqual(observation.shape, (NUM_FEATURES,))
        self.assertTrue(env.observation_space.contains(observation))
        self.assertIn("customer_id", info)
        total, steps, terminated = 0.0, 0, False
        while not terminated:
            observation, reward, terminated, truncated, info = env.step(env.action_space.sample())
            self.assertFalse(truncated)
            self.assertIn(info["y_hat"], (0, 1))
            total += reward
            steps += 1
        self.assertGreater(steps, 0)
        self.assertTrue(np.array_equal(observation, np.zeros(NUM_FEATURES)))
        self.assertAlmostEqual(total, env.store.ledger.net_revenue)


if __name__ == '__main__':
    unittest.main()
