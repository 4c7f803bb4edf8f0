"""
Risk variables for order fraud evaluation.

Every order is described by twelve variables. Ten are aggregates over the history of the
customer and the item that strictly precede the order being evaluated; the last two,
payment method risk and location risk, are drawn from Beta distributions whose parameters
depend on the order's fraudulent intent.
"""

import dataclasses
from typing import Dict, Mapping, NamedTuple, Optional, Set, Tuple

import numpy as np

from simstore_orl.errors import ConfigError, ContractViolation

# Column order of observations everywhere (arrays, dataset files, checkpoints).
OBSERVATION_FIELDS = (
    "customer_past_lifetime_num_orders",
    "customer_past_lifetime_dollars_spent",
    "customer_past_lifetime_num_unique_categories",
    "customer_past_lifetime_num_unique_asins",
    "customer_days_since_first_order",
    "customer_days_since_last_order",
    "customer_past_lifetime_num_chargeback_orders",
    "order_total_price",
    "item_past_lifetime_num_orders",
    "item_past_lifetime_num_unique_customers",
    "payment_method_risk",
    "location_risk",
)
NUM_FEATURES = len(OBSERVATION_FIELDS)
PRICE_COLUMN = OBSERVATION_FIELDS.index("order_total_price")

# Day fields of a customer's first order: no prior order exists.
NO_PRIOR_ORDER = -1.0


class Observation(NamedTuple):
    customer_past_lifetime_num_orders: float
    customer_past_lifetime_dollars_spent: float
    customer_past_lifetime_num_unique_categories: float
    customer_past_lifetime_num_unique_asins: float
    customer_days_since_first_order: float
    customer_days_since_last_order: float
    customer_past_lifetime_num_chargeback_orders: float
    order_total_price: float
    item_past_lifetime_num_orders: float
    item_past_lifetime_num_unique_customers: float
    payment_method_risk: float
    location_risk: float

    def as_array(self) -> np.ndarray:
        return np.asarray(self, dtype=np.float64)

    @classmethod
    def from_array(cls, values) -> "Observation":
        values = [float(v) for v in values]
        if len(values) != NUM_FEATURES:
            raise ContractViolation(f"expected {NUM_FEATURES} features, got {len(values)}")
        return cls(*values)


@dataclasses.dataclass(frozen=True)
class BetaParams:
    alpha: float
    beta: float

    @property
    def mean(self) -> float:
        return self.alpha / (self.alpha + self.beta)


@dataclasses.dataclass
class RiskVarParams:
    """Beta parameters of the two risk variables, conditioned on fraudulent intent."""
    payment_fraud: BetaParams = BetaParams(5.0, 2.0)
    payment_non_fraud: BetaParams = BetaParams(2.0, 5.0)
    location_fraud: BetaParams = BetaParams(5.0, 2.0)
    location_non_fraud: BetaParams = BetaParams(2.0, 5.0)

    def validate(self) -> "RiskVarParams":
        for name in ("payment", "location"):
            fraud = getattr(self, f"{name}_fraud")
            non_fraud = getattr(self, f"{name}_non_fraud")
            for params in (fraud, non_fraud):
                if not (params.alpha > 0 and params.beta > 0):
                    raise ConfigError(f"{name} risk Beta parameters must be > 0, got {params}")
            if fraud.mean <= non_fraud.mean:
                raise ConfigError(
                    f"{name} risk must have a larger mean for fraudulent orders "
                    f"({fraud.mean:.3f} <= {non_fraud.mean:.3f})")
        return self

    @classmethod
    def from_mapping(cls, mapping: Optional[Mapping]) -> "RiskVarParams":
        """Parse ``{payment_method_risk: {fraud: [a, b], non_fraud: [a, b]}, location_risk: ...}``."""
        kwargs = {}
        names = {"payment_method_risk": "payment", "location_risk": "location"}
        for key, value in (mapping or {}).items():
            if key not in names:
                raise ConfigError(f"unknown risk variable {key!r}")
            for outcome in ("fraud", "non_fraud"):
                if outcome in value:
                    alpha, beta = value[outcome]
                    kwargs[f"{names[key]}_{outcome}"] = BetaParams(float(alpha), float(beta))
        return cls(**kwargs).validate()

    def to_mapping(self) -> Dict:
        return {
            "payment_method_risk": {
                "fraud": [self.payment_fraud.alpha, self.payment_fraud.beta],
                "non_fraud": [self.payment_non_fraud.alpha, self.payment_non_fraud.beta],
            },
            "location_risk": {
                "fraud": [self.location_fraud.alpha, self.location_fraud.beta],
                "non_fraud": [self.location_non_fraud.alpha, self.location_non_fraud.beta],
            },
        }


def draw_risk_vars(y: int, params: RiskVarParams, rng: np.random.Generator) -> Tuple[float, float]:
    """Draw (payment_method_risk, location_risk) for an order with true outcome y."""
    if y:
        payment, location = params.payment_fraud, params.location_fraud
    else:
        payment, location = params.payment_non_fraud, params.location_non_fraud
    payment_risk = float(rng.beta(payment.alpha, payment.beta))
    location_risk = float(rng.beta(location.alpha, location.beta))
    # Keep strictly inside (0, 1) even when a draw underflows.
    tiny = np.finfo(np.float64).eps
    return (float(np.clip(payment_risk, tiny, 1 - tiny)),
            float(np.clip(location_risk, tiny, 1 - tiny)))


@dataclasses.dataclass
class CustomerHistory:
    num_orders: int = 0
    dollars_spent: float = 0.0
    categories: Set[int] = dataclasses.field(default_factory=set)
    items: Set[int] = dataclasses.field(default_factory=set)
    first_order_time: Optional[float] = None
    last_order_time: Optional[float] = None
    num_chargebacks: int = 0


@dataclasses.dataclass
class ItemHistory:
    num_orders: int = 0
    customers: Set[int] = dataclasses.field(default_factory=set)


class HistoryStore:
    """Per-customer and per-item aggregates of all evaluated orders."""

    def __init__(self):
        self.customers: Dict[int, CustomerHistory] = {}
        self.items: Dict[int, ItemHistory] = {}
        self._seen_orders: Set[int] = set()

    def customer(self, customer_id: int) -> CustomerHistory:
        return self.customers.get(customer_id) or CustomerHistory()

    def item(self, item_id: int) -> ItemHistory:
        return self.items.get(item_id) or ItemHistory()


def compute_observation(history: HistoryStore, order, risk_draws: Tuple[float, float],
                        now: float) -> Observation:
    """Observation of ``order`` from the aggregates of strictly earlier orders."""
    customer = history.customer(order.customer_id)
    item = history.item(order.item_id)
    if customer.first_order_time is None:
        days_since_first = days_since_last = NO_PRIOR_ORDER
    else:
        days_since_first = now - customer.first_order_time
        days_since_last = now - customer.last_order_time
    payment_risk, location_risk = risk_draws
    return Observation(
        customer_past_lifetime_num_orders=float(customer.num_orders),
        customer_past_lifetime_dollars_spent=float(customer.dollars_spent),
        customer_past_lifetime_num_unique_categories=float(len(customer.categories)),
        customer_past_lifetime_num_unique_asins=float(len(customer.items)),
        customer_days_since_first_order=float(days_since_first),
        customer_days_since_last_order=float(days_since_last),
        customer_past_lifetime_num_chargeback_orders=float(customer.num_chargebacks),
        order_total_price=float(order.price),
        item_past_lifetime_num_orders=float(item.num_orders),
        item_past_lifetime_num_unique_customers=float(len(item.customers)),
        payment_method_risk=float(payment_risk),
        location_risk=float(location_risk),
    )


def update_history(history: HistoryStore, order, action: int, y_hat: int,
                   chargeback: bool) -> None:
    """Fold an evaluated order into the history. Frauded orders count but add no spend."""
    if order.order_id in history._seen_orders:
        raise ContractViolation(f"order {order.order_id} was already folded into the history")
    history._seen_orders.add(order.order_id)

    customer = history.customers.setdefault(order.customer_id, CustomerHistory())
    customer.num_orders += 1
    if action == 0:
        customer.dollars_spent += order.price
    customer.categories.add(order.category_id)
    customer.items.add(order.item_id)
    if customer.first_order_time is None:
        customer.first_order_time = order.time
    customer.last_order_time = order.time
    if chargeback:
        customer.num_chargebacks += 1

    item = history.items.setdefault(order.item_id, ItemHistory())
    item.num_orders += 1
    item.customers.add(order.customer_id)
