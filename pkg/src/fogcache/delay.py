"""Average download delay and hit probability of a cache placement."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigurationError, FeasibilityError
from .model import DemandModel, NetworkInstance
from .rates import ExpectedRateTable, Scheme

REPORT_COLUMNS = ("avg_delay_s", "hit_prob", "min_user_delay_s", "max_user_delay_s")


@dataclass(eq=False)
class Placement:
    """Binary N x M caching matrix with per-BS capacities.

    Ground-set element ``(m, n)`` has incidence index ``m * N + n``.
    Placements tagged ``allow_infeasible`` may exceed capacities; they only
    occur as intermediate BP estimates.
    """

    X: np.ndarray
    capacities: np.ndarray
    allow_infeasible: bool = False

    def __post_init__(self):
        self.X = np.asarray(self.X, dtype=bool)
        if self.X.ndim != 2:
            raise ValueError("placement matrix must be N x M")
        self.capacities = np.broadcast_to(np.asarray(self.capacities, dtype=np.int64), (self.M,)).copy()
        if np.any(self.capacities < 0):
            raise ValueError("capacities must be non-negative")

    @property
    def N(self) -> int:
        return self.X.shape[0]

    @property
    def M(self) -> int:
        return self.X.shape[1]

    @classmethod
    def empty(cls, N: int, M: int, capacities) -> "Placement":
        return cls(np.zeros((N, M), dtype=bool), capacities)

    @classmethod
    def from_sets(cls, sets, N: int, capacities, allow_infeasible=False) -> "Placement":
        X = np.zeros((N, len(sets)), dtype=bool)
        for m, files in enumerate(sets):
            X[list(files), m] = True
        return cls(X, capacities, allow_infeasible)

    @classmethod
    def from_incidence(cls, mu, N: int, M: int, capacities, allow_infeasible=False) -> "Placement":
        return cls(np.asarray(mu, dtype=bool).reshape(M, N).T, capacities, allow_infeasible)

    @property
    def sets(self) -> tuple[tuple[int, ...], ...]:
        return tuple(tuple(int(n) for n in np.flatnonzero(self.X[:, m])) for m in range(self.M))

    def incidence(self) -> np.ndarray:
        return self.X.T.reshape(-1).copy()

    def loads(self) -> np.ndarray:
        return self.X.sum(axis=0)

    @property
    def feasible(self) -> bool:
        return bool(np.all(self.loads() <= self.capacities))

    def check(self) -> None:
        if self.allow_infeasible:
            return
        loads = self.loads()
        over = np.flatnonzero(loads > self.capacities)
        if over.size:
            m = int(over[0])
            raise FeasibilityError(m, int(loads[m]), int(self.capacities[m]))

    def with_element(self, m: int, n: int) -> "Placement":
        X = self.X.copy()
        X[n, m] = True
        return Placement(X, self.capacities, self.allow_infeasible)

    def __eq__(self, other):
        if not isinstance(other, Placement):
            return NotImplemented
        return np.array_equal(self.X, other.X) and np.array_equal(self.capacities, other.capacities)


@dataclass(frozen=True, eq=False)
class EvalReport:
    average_delay_s: float
    hit_probability: float
    user_delay_s: np.ndarray
    cached: np.ndarray

    def csv_row(self) -> list[str]:
        """Values in ``REPORT_COLUMNS`` order."""
        ud = self.user_delay_s
        lo = float(ud.min()) if ud.size else 0.0
        hi = float(ud.max()) if ud.size else 0.0
        return [format(v, ".12g") for v in (self.average_delay_s, self.hit_probability, lo, hi)]


class DelayEvaluator:
    """Vectorised delay model for one (instance, demand, rate table) triple.

    ``hit_delay[k, mask]`` is the delivery time when the caching BSs of user
    ``k`` form ``mask``; ``miss_delay[k, n]`` adds the backhaul fetch.
    """

    def __init__(self, instance: NetworkInstance, demand: DemandModel, table: ExpectedRateTable):
        if demand.K != instance.K or table.K != instance.K:
            raise ConfigurationError("instance, demand and rate table disagree on the number of users")
        self.instance = instance
        self.demand = demand
        self.table = table
        self.scheme = table.scheme
        self.K, self.N, self.M = instance.K, demand.N, instance.M
        self.serving = table.serving
        unserved = [k for k, A in enumerate(self.serving) if not A]
        if unserved:
            raise ConfigurationError(f"users {unserved[:5]} have no serving BS")

        width = 1 << max((len(A) for A in self.serving), default=0)
        self.bitpos = np.full((self.K, self.M), -1, dtype=np.int64)
        self.hit_delay = np.full((self.K, width), np.inf)
        f = demand.file_bits
        for k, A in enumerate(self.serving):
            self.bitpos[k, list(A)] = np.arange(len(A))
            r = table.rates[k]
            self.hit_delay[k, 1:r.size] = f / r[1:]
        fetch_rate = np.array([table.rates[k][table.fetch_masks[k]] for k in range(self.K)])
        self.miss_delay = demand.backhaul_matrix() + (f / fetch_rate)[:, None]
        self.hit_delay[:, 0] = np.nan
        self.weights = demand.preferences / max(self.K, 1)
        self._check_standing_inequality()

    def _check_standing_inequality(self):
        worst_hit = np.nanmax(np.where(np.isinf(self.hit_delay), np.nan, self.hit_delay), axis=1, initial=0.0)
        bad = self.miss_delay <= worst_hit[:, None]
        if np.any(bad):
            k, n = (int(v) for v in np.argwhere(bad)[0])
            raise ConfigurationError(
                f"uncached delay {self.miss_delay[k, n]:.4g}s for user {k}, file {n} does not exceed "
                f"the slowest cached delivery {worst_hit[k]:.4g}s; increase the backhaul delay"
            )

    def masks(self, X: np.ndarray) -> np.ndarray:
        """K x N bitmask of caching serving BSs for every (user, file)."""
        X = np.asarray(X, dtype=np.int64)
        masks = np.zeros((self.K, self.N), dtype=np.int64)
        for m in range(self.M):
            users = np.flatnonzero(self.bitpos[:, m] >= 0)
            if users.size:
                masks[users] |= X[:, m][None, :] << self.bitpos[users, m][:, None]
        return masks

    def delays(self, masks: np.ndarray, users=None) -> np.ndarray:
        users = np.arange(self.K) if users is None else np.asarray(users)
        hit = np.take_along_axis(self.hit_delay[users], masks, axis=1)
        return np.where(masks > 0, hit, self.miss_delay[users])

    def evaluate(self, placement: Placement) -> EvalReport:
        placement.check()
        masks = self.masks(placement.X)
        d = self.delays(masks)
        p = self.demand.preferences
        per_user = (p * d).sum(axis=1)
        cached = masks > 0
        avg = float(per_user.sum() / self.K) if self.K else 0.0
        hit = float((p * cached).sum() / self.K) if self.K else 0.0
        return EvalReport(avg, hit, per_user, cached)

    def average_delay(self, placement: Placement) -> float:
        return self.evaluate(placement).average_delay_s

    def pair_delay(self, k: int, n: int, mask: int) -> float:
        return float(self.miss_delay[k, n]) if mask == 0 else float(self.hit_delay[k, mask])


def serving_subset(k: int, n: int, placement: Placement, table: ExpectedRateTable) -> tuple[int, ...]:
    """BSs that actually transmit file ``n`` to user ``k``."""
    caching = tuple(m for m in table.serving[k] if placement.X[n, m])
    if not caching or table.scheme is Scheme.COOPERATIVE:
        return caching
    b = table.best_singleton(k, table.mask_of(k, caching))
    return (table.serving[k][b],)


def request_delay(k: int, n: int, placement: Placement, table: ExpectedRateTable, demand: DemandModel) -> float:
    """Mean time for user ``k`` to obtain file ``n``.

    ``|f| / E{R}`` over the transmitting subset when some serving BS caches
    the file, else the backhaul delay plus delivery from the fetch set.
    """
    subset = serving_subset(k, n, placement, table)
    if subset:
        rate = table.rate(k, subset)
        assert rate > 0, "cached delivery with zero expected rate"
        return demand.file_bits / rate
    return float(demand.backhaul_matrix()[k, n]) + demand.file_bits / table.fetch_rate(k)


def objective(placement: Placement, evaluator: DelayEvaluator) -> EvalReport:
    return evaluator.evaluate(placement)


def hit_probability(placement: Placement, evaluator: DelayEvaluator) -> float:
    return evaluator.evaluate(placement).hit_probability
