"""
SimStore: a discrete-event simulation of an online store subject to order fraud.

Customers (regular, sleeper bad actors, immediate bad actors) place orders on their own
exponential clocks. Each order is routed to a risk policy through ``SimStore.step``; the
action (0 = Pass, 1 = Fraud) determines the reward, the inferred outcome and whether the
customer keeps shopping.

Randomness is split into independent streams derived from the run seed: one for the
inventory, one for the initial population, one per sign-up process and two per customer
(orders, reinstatement). Two policies run on the same seed therefore see the same
customers behave the same way until their actions make the runs diverge.
"""

import dataclasses
import enum
import heapq
import logging
import math
from typing import Any, Dict, List, Optional, Tuple

import numpy as np

from simstore_orl.config import SimConfig
from simstore_orl.errors import ConfigError, ContractViolation, SimulationError
from simstore_orl.sim.features import (HistoryStore, Observation, compute_observation,
                                       draw_risk_vars, update_history)

logger = logging.getLogger(__name__)

PASS, FRAUD = 0, 1

_STREAM_INVENTORY = 0
_STREAM_POPULATION = 1
_STREAM_SIGNUP_REGULAR = 2
_STREAM_SIGNUP_BAD = 3
_STREAM_CUSTOMER = 4
_STREAM_REINSTATE = 5

_EVENT_SIGNUP_REGULAR = 0
_EVENT_SIGNUP_BAD = 1
_EVENT_ORDER = 2


class CustomerKind(enum.Enum):
    REGULAR = "regular"
    SLEEPER = "sleeper_bad_actor"
    IMMEDIATE = "immediate_bad_actor"


class AccountState(enum.Enum):
    ACTIVE = "active"
    SUSPENDED = "suspended"
    ABANDONED = "abandoned"
    REINSTATED = "reinstated"


@dataclasses.dataclass(frozen=True)
class Item:
    item_id: int
    category_id: int
    price: float


class Inventory:
    """Items plus the price-ranked subsets bad actors draw from."""

    def __init__(self, items: List[Item], expensive_percentile: float = 10.0,
                 cheap_percentile: float = 10.0):
        self.items = list(items)
        self.prices = np.array([item.price for item in self.items], dtype=np.float64)
        by_price = np.argsort(self.prices, kind="stable")
        n = len(self.items)
        num_expensive = max(1, math.ceil(n * expensive_percentile / 100)) if n else 0
        num_cheap = max(1, math.ceil(n * cheap_percentile / 100)) if n else 0
        self.expensive_ids = by_price[n - num_expensive:] if n else by_price
        self.cheap_ids = by_price[:num_cheap]

    def __len__(self):
        return len(self.items)

    def __getitem__(self, index: int) -> Item:
        return self.items[index]


@dataclasses.dataclass
class Customer:
    customer_id: int
    kind: CustomerKind
    signup_time: float
    account_state: AccountState = AccountState.ACTIVE
    sleeper_orders_before_attack: int = 0
    orders_placed: int = 0

    @property
    def is_bad_actor(self) -> bool:
        return self.kind is not CustomerKind.REGULAR

    @property
    def in_attack(self) -> bool:
        if self.kind is CustomerKind.IMMEDIATE:
            return True
        if self.kind is CustomerKind.SLEEPER:
            return self.orders_placed >= self.sleeper_orders_before_attack
        return False

    @property
    def can_order(self) -> bool:
        return self.account_state in (AccountState.ACTIVE, AccountState.REINSTATED)


@dataclasses.dataclass(frozen=True)
class Order:
    order_id: int
    customer_id: int
    item_id: int
    category_id: int
    price: float
    time: float
    y: int
    payment_method_risk: float = 0.5
    location_risk: float = 0.5


@dataclasses.dataclass
class Ledger:
    revenue: float = 0.0
    chargeback_loss: float = 0.0

    @property
    def net_revenue(self) -> float:
        return self.revenue - self.chargeback_loss


@dataclasses.dataclass(frozen=True)
class OrderContext:
    """Info channel for the order awaiting a decision. ``y`` is for oracles only."""
    customer_id: int
    order_id: int
    time: float
    y: int


@dataclasses.dataclass
class StepResult:
    observation: Optional[Observation]
    reward: float
    y_hat: int
    terminal: bool
    info: Dict[str, Any]


def init_inventory(config: SimConfig, rng: np.random.Generator) -> List[Item]:
    """Items with uniform categories and log-normal prices matching the configured moments."""
    if config.num_items < 0:
        raise ConfigError("Number of products must be >= 0")
    try:
        mu, sigma = config.price_log_mean, config.price_log_sd
    except ValueError as err:
        raise ConfigError(f"invalid log-normal price parameters: {err}") from err
    categories = rng.integers(0, config.num_categories, size=config.num_items)
    prices = rng.lognormal(mean=mu, sigma=sigma, size=config.num_items)
    return [Item(item_id=i, category_id=int(c), price=float(p))
            for i, (c, p) in enumerate(zip(categories, prices))]


def spawn_customer(config: SimConfig, rng: np.random.Generator, now: float,
                   customer_id: int = 0, bad_actor: Optional[bool] = None) -> Customer:
    """
    Create a customer. The kind is drawn from the configured mix unless ``bad_actor``
    fixes the regular/bad split (sign-up processes run separately for the two groups).
    """
    if bad_actor is None:
        bad_actor = not rng.random() < config.ratio_regular
    if not bad_actor:
        return Customer(customer_id=customer_id, kind=CustomerKind.REGULAR, signup_time=now)
    if rng.random() < config.ratio_sleeper_among_bad:
        return Customer(customer_id=customer_id, kind=CustomerKind.SLEEPER, signup_time=now,
                        sleeper_orders_before_attack=int(
                            rng.poisson(config.sleeper_mean_orders_before_attack)))
    return Customer(customer_id=customer_id, kind=CustomerKind.IMMEDIATE, signup_time=now)


def mean_order_interval(customer: Customer, config: SimConfig) -> float:
    if customer.kind is CustomerKind.REGULAR:
        if customer.account_state is AccountState.REINSTATED:
            return config.regular_mean_order_interval_post_reinstate
        return config.regular_mean_order_interval
    if customer.kind is CustomerKind.SLEEPER:
        if customer.in_attack:
            return config.sleeper_mean_order_interval_during_attack
        return config.sleeper_mean_order_interval_before_attack
    return config.immediate_mean_order_interval


def next_event_delay(customer: Customer, config: SimConfig, rng: np.random.Generator) -> float:
    """Time until the customer's next order, clipped at the configured maximum."""
    if not customer.can_order:
        raise ContractViolation(
            f"customer {customer.customer_id} is {customer.account_state.value} and cannot order")
    return float(min(rng.exponential(mean_order_interval(customer, config)),
                     config.max_order_interval))


def chargeback_probability(customer: Customer, config: SimConfig) -> float:
    if customer.kind is CustomerKind.SLEEPER:
        if customer.in_attack:
            return config.sleeper_chargeback_prob_during_attack
        return config.sleeper_chargeback_prob_before_attack
    if customer.kind is CustomerKind.IMMEDIATE:
        return config.immediate_chargeback_prob
    return 0.0


def originate_order(customer: Customer, inventory: Inventory, config: SimConfig,
                    rng: np.random.Generator, now: float, order_id: int = 0) -> Order:
    """The customer picks an item and decides the fraudulent intent of the order."""
    if not customer.can_order:
        raise ContractViolation(
            f"customer {customer.customer_id} is {customer.account_state.value} and cannot order")
    if len(inventory) == 0:
        raise SimulationError("cannot originate an order from an empty inventory")

    if customer.kind is CustomerKind.REGULAR:
        item = inventory[int(rng.integers(len(inventory)))]
        y = 0
    else:
        pool = inventory.expensive_ids if customer.in_attack else inventory.cheap_ids
        item = inventory[int(pool[rng.integers(len(pool))])]
        y = int(rng.random() < chargeback_probability(customer, config))
    customer.orders_placed += 1
    return Order(order_id=order_id, customer_id=customer.customer_id, item_id=item.item_id,
                 category_id=item.category_id, price=item.price, time=now, y=y)


def apply_action(order: Order, action: int, customer: Customer, ledger: Ledger,
                 rng: np.random.Generator, reinstate_prob: float = 0.2
                 ) -> Tuple[float, int, bool]:
    """Apply Pass/Fraud to an order. Returns (reward, inferred outcome, chargeback flag)."""
    if action not in (PASS, FRAUD):
        raise ContractViolation(f"action must be 0 (Pass) or 1 (Fraud), got {action!r}")
    if not customer.can_order:
        raise ContractViolation(
            f"customer {customer.customer_id} is {customer.account_state.value}")

    if action == PASS:
        if order.y == 0:
            ledger.revenue += order.price
            return order.price, 0, False
        ledger.chargeback_loss += order.price
        return -order.price, 1, True

    # Fraud: the order is cancelled and the account suspended.
    customer.account_state = AccountState.SUSPENDED
    if customer.is_bad_actor:
        return 0.0, 1, False
    if rng.random() < reinstate_prob:
        customer.account_state = AccountState.REINSTATED
        return 0.0, 0, False
    # Abandoned legitimate accounts are recorded as fraud.
    customer.account_state = AccountState.ABANDONED
    return 0.0, 1, False


def _stream(seed: int, *keys: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(entropy=seed, spawn_key=keys))


class SimStore:
    """
    Gym-style store environment.

    ``reset`` returns the observation of the first order awaiting a decision; every
    ``step(action)`` resolves that order and returns the next one. The oracle-only info
    channel for the pending order is ``pending_context()``.
    """

    def __init__(self, config: Optional[SimConfig] = None):
        self.config = (config or SimConfig()).validate()
        self.done = True
        self._pending: Optional[Tuple[Order, Observation]] = None

    def reset(self, seed: Optional[int] = None) -> Optional[Observation]:
        config = self.config
        self.seed = config.rng_seed if seed is None else int(seed)
        self.inventory = Inventory(
            init_inventory(config, _stream(self.seed, _STREAM_INVENTORY)),
            expensive_percentile=config.bad_actor_target_percentile,
            cheap_percentile=config.sleeper_cheap_percentile)
        self.ledger = Ledger()
        self.history = HistoryStore()
        self.customers: Dict[int, Customer] = {}
        self._customer_rngs: Dict[int, np.random.Generator] = {}
        self._reinstate_rngs: Dict[int, np.random.Generator] = {}
        self._signup_rngs = {
            _EVENT_SIGNUP_REGULAR: _stream(self.seed, _STREAM_SIGNUP_REGULAR),
            _EVENT_SIGNUP_BAD: _stream(self.seed, _STREAM_SIGNUP_BAD),
        }
        self._queue: List[Tuple[float, int, int, int]] = []
        self._sequence = 0
        self._next_order_id = 0
        self.clock = 0.0
        self.done = False
        self._pending = None

        population_rng = _stream(self.seed, _STREAM_POPULATION)
        for _ in range(config.num_initial_customers):
            self._add_customer(spawn_customer(config, population_rng, 0.0,
                                              customer_id=len(self.customers)))
        self._schedule_signup(_EVENT_SIGNUP_REGULAR)
        self._schedule_signup(_EVENT_SIGNUP_BAD)
        logger.debug("reset seed=%d: %d items, %d customers", self.seed, len(self.inventory),
                     len(self.customers))
        return self._advance()

    def pending_context(self) -> Optional[OrderContext]:
        if self._pending is None:
            return None
        order, _ = self._pending
        return OrderContext(customer_id=order.customer_id, order_id=order.order_id,
                            time=order.time, y=order.y)

    @property
    def pending_order(self) -> Optional[Order]:
        return None if self._pending is None else self._pending[0]

    def step(self, action: int) -> StepResult:
        if self.done or self._pending is None:
            raise ContractViolation("step called without a pending order; call reset()")
        if action not in (PASS, FRAUD):
            raise ContractViolation(f"action must be 0 (Pass) or 1 (Fraud), got {action!r}")
        order, _ = self._pending
        customer = self.customers[order.customer_id]
        reward, y_hat, chargeback = apply_action(
            order, int(action), customer, self.ledger, self._reinstate_rngs[customer.customer_id],
            reinstate_prob=self.config.regular_reinstate_prob)
        update_history(self.history, order, int(action), y_hat, chargeback)
        if customer.can_order:
            self._schedule_order(customer)

        info = {
            "customer_id": order.customer_id,
            "order_id": order.order_id,
            "time": order.time,
            "price": order.price,
            "y": order.y,
            "action": int(action),
            "chargeback": chargeback,
            "customer_active": customer.can_order,
        }
        observation = self._advance()
        context = self.pending_context()
        if context is not None:
            info["next"] = dataclasses.asdict(context)
        return StepResult(observation=observation, reward=float(reward), y_hat=int(y_hat),
                          terminal=self.done, info=info)

    def _add_customer(self, customer: Customer):
        self.customers[customer.customer_id] = customer
        rng = _stream(self.seed, _STREAM_CUSTOMER, customer.customer_id)
        self._customer_rngs[customer.customer_id] = rng
        self._reinstate_rngs[customer.customer_id] = _stream(
            self.seed, _STREAM_REINSTATE, customer.customer_id)
        self._schedule_order(customer)

    def _push(self, time: float, customer_id: int, event: int):
        heapq.heappush(self._queue, (time, customer_id, self._sequence, event))
        self._sequence += 1

    def _schedule_order(self, customer: Customer):
        delay = next_event_delay(customer, self.config,
                                 self._customer_rngs[customer.customer_id])
        self._push(self.clock + delay, customer.customer_id, _EVENT_ORDER)

    def _schedule_signup(self, event: int):
        config = self.config
        mean = (config.mean_signup_interval_regular if event == _EVENT_SIGNUP_REGULAR
                else config.mean_signup_interval_bad)
        self._push(self.clock + float(self._signup_rngs[event].exponential(mean)), -1, event)

    def _advance(self) -> Optional[Observation]:
        """Run events until the next order needs a decision or the horizon passes."""
        while self._queue:
            time, customer_id, _, event = self._queue[0]
            if time > self.config.sim_duration:
                break
            heapq.heappop(self._queue)
            self.clock = time
            if event == _EVENT_ORDER:
                customer = self.customers[customer_id]
                if not customer.can_order:
                    continue
                rng = self._customer_rngs[customer_id]
                order = originate_order(customer, self.inventory, self.config, rng, time,
                                        order_id=self._next_order_id)
                self._next_order_id += 1
                risk = draw_risk_vars(order.y, self.config.risk_params, rng)
                order = dataclasses.replace(order, payment_method_risk=risk[0],
                                            location_risk=risk[1])
                observation = compute_observation(self.history, order, risk, time)
                self._pending = (order, observation)
                return observation
            rng = self._signup_rngs[event]
            customer = spawn_customer(self.config, rng, time, customer_id=len(self.customers),
                                      bad_actor=event == _EVENT_SIGNUP_BAD)
            self._add_customer(customer)
            self._schedule_signup(event)
        self._pending = None
        self.done = True
        return None


def reset(config: SimConfig, seed: int) -> Tuple[SimStore, Optional[Observation]]:
    """Create an environment and return it with its first observation."""
    env = SimStore(config)
    return env, env.reset(seed)
