"""Slow, independent reference implementations used to validate the fast paths.

Nothing here touches the vectorised evaluator or the message engine: delays
are recomputed straight from the rate table and the demand model, and the
max-product messages are kept as literal two-valued functions.
"""
from __future__ import annotations

import itertools
import math
from dataclasses import dataclass

import numpy as np

from .bp import FactorGraph
from .delay import DelayEvaluator, Placement
from .errors import ConfigurationError
from .model import ChannelParams, DemandModel
from .rates import ExpectedRateTable, Scheme

ENUMERATION_LIMIT = 10**7


# --------------------------------------------------------------------------
# plain objective
# --------------------------------------------------------------------------

def _pair_delay(table: ExpectedRateTable, demand: DemandModel, backhaul, k: int, n: int, caching) -> float:
    serving = table.serving[k]
    bits = [b for b, m in enumerate(serving) if m in caching]
    f = demand.file_bits
    if not bits:
        return float(backhaul[k, n]) + f / float(table.rates[k][table.fetch_masks[k]])
    if table.scheme is Scheme.COOPERATIVE:
        mask = sum(1 << b for b in bits)
        return f / float(table.rates[k][mask])
    return f / max(float(table.rates[k][1 << b]) for b in bits)


def plain_objective(X: np.ndarray, table: ExpectedRateTable, demand: DemandModel) -> float:
    """Average delay by explicit summation over every requested (user, file)."""
    backhaul = demand.backhaul_matrix()
    p = demand.preferences
    total = 0.0
    for k in range(demand.K):
        for n in range(demand.N):
            if p[k, n] <= 0:
                continue
            caching = {m for m in table.serving[k] if X[n, m]}
            total += p[k, n] * _pair_delay(table, demand, backhaul, k, n, caching)
    return total / demand.K


class _PlainDelays:
    """Per (user, file) delay for every caching pattern of the user's serving BSs."""

    def __init__(self, table: ExpectedRateTable, demand: DemandModel):
        self.table = table
        self.demand = demand
        backhaul = demand.backhaul_matrix()
        self.pairs = []
        for k in range(demand.K):
            A = table.serving[k]
            for n in range(demand.N):
                p = demand.preferences[k, n]
                if p <= 0:
                    continue
                lut = []
                for mask in range(1 << len(A)):
                    caching = {A[b] for b in range(len(A)) if mask >> b & 1}
                    lut.append(p * _pair_delay(table, demand, backhaul, k, n, caching))
                self.pairs.append((n, A, lut))

    def __call__(self, X: np.ndarray) -> float:
        total = 0.0
        for n, A, lut in self.pairs:
            mask = 0
            for b, m in enumerate(A):
                if X[n, m]:
                    mask |= 1 << b
            total += lut[mask]
        return total / self.demand.K


# --------------------------------------------------------------------------
# exhaustive optimum
# --------------------------------------------------------------------------

def brute_force_optimal(evaluator: DelayEvaluator, capacities) -> tuple[Placement, float]:
    """Exact minimum average delay by enumerating per-BS file subsets.

    Raises ``ConfigurationError`` when the number of candidate placements
    exceeds ``ENUMERATION_LIMIT``. Ties keep the first placement in
    enumeration order.
    """
    N, M = evaluator.N, evaluator.M
    cap = np.broadcast_to(np.asarray(capacities, dtype=np.int64), (M,))
    sizes = [int(min(cap[m], N)) for m in range(M)]
    count = math.prod(sum(math.comb(N, r) for r in range(q + 1)) for q in sizes)
    if count > ENUMERATION_LIMIT:
        raise ConfigurationError(f"{count} candidate placements exceed the enumeration limit {ENUMERATION_LIMIT}")
    choices = [[c for r in range(q + 1) for c in itertools.combinations(range(N), r)] for q in sizes]

    delay = _PlainDelays(evaluator.table, evaluator.demand)
    best_X, best = None, math.inf
    X = np.zeros((N, M), dtype=bool)
    for combo in itertools.product(*choices):
        X[:] = False
        for m, files in enumerate(combo):
            X[list(files), m] = True
        d = delay(X)
        if d < best:
            best, best_X = d, X.copy()
    return Placement(best_X, cap), best


# --------------------------------------------------------------------------
# slot-level download simulation
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class SlotSimConfig:
    max_slots: int = 200_000
    trials: int = 400
    seed: int = 0

    def __post_init__(self):
        if self.trials < 1:
            raise ValueError("trials must be at least 1")
        if self.max_slots < 1:
            raise ValueError("max_slots must be at least 1")


@dataclass(frozen=True)
class SimResult:
    mean_delay_s: float
    mean_slots: float
    truncated: int
    trials: int
    wireless_subset: tuple[int, ...]
    cached: bool

    @property
    def complete(self) -> bool:
        return self.truncated == 0


def _transmitting(k: int, n: int, placement: Placement, table: ExpectedRateTable) -> tuple[tuple[int, ...], bool]:
    A = table.serving[k]
    caching = [m for m in A if placement.X[n, m]]
    if not caching:
        return table.fetch_set(k), False
    if table.scheme is Scheme.COOPERATIVE:
        return tuple(caching), True
    best = max(caching, key=lambda m: (table.rates[k][1 << A.index(m)], -m))
    return (best,), True


def simulate_download(
    k: int,
    n: int,
    placement: Placement,
    table: ExpectedRateTable,
    demand: DemandModel,
    channel: ChannelParams,
    config: SlotSimConfig = SlotSimConfig(),
) -> SimResult:
    """Mean time to deliver file ``n`` to user ``k`` with fresh fading every slot.

    Each slot draws unit-mean exponential gains for the transmitting BSs and
    delivers ``B log2(1 + sum c g) * dt`` bits; the download ends in the first
    slot where the running total reaches the file size. Uncached files add the
    backhaul delay. Trials that hit ``max_slots`` are counted in ``truncated``.
    """
    subset, cached = _transmitting(k, n, placement, table)
    if not subset:
        raise ConfigurationError(f"user {k} has no BS to download from")
    c = np.array([table.gains[k, m] for m in subset])
    rng = np.random.default_rng([config.seed, k, n])
    per_slot_bits = channel.bandwidth_hz * channel.slot_seconds
    need = demand.file_bits / per_slot_bits  # in units of bits/s/Hz accumulated over slots

    slots = np.zeros(config.trials, dtype=np.int64)
    acc = np.zeros(config.trials)
    active = np.arange(config.trials)
    chunk = 256
    used = 0
    while active.size and used < config.max_slots:
        width = min(chunk, config.max_slots - used)
        g = rng.standard_exponential((active.size, width, c.size))
        se = np.log2(1.0 + (g * c).sum(axis=2))
        run = acc[active, None] + np.cumsum(se, axis=1)
        done = run >= need
        hit = done.any(axis=1)
        first = np.argmax(done, axis=1)
        slots[active[hit]] = used + first[hit] + 1
        acc[active] = run[:, -1]
        active = active[~hit]
        used += width
    slots[active] = config.max_slots

    mean_slots = float(slots.mean())
    delay = mean_slots * channel.slot_seconds
    if not cached:
        delay += float(demand.backhaul_matrix()[k, n])
    return SimResult(delay, mean_slots, int(active.size), config.trials, tuple(subset), cached)


# --------------------------------------------------------------------------
# literal max-product
# --------------------------------------------------------------------------

RAW_VARIABLE_LIMIT = 6


@dataclass
class RawMessages:
    """Two-valued messages per edge: ``var_to_fac[e] = (m(0), m(1))`` and back."""

    var_to_fac: np.ndarray  # (E, 2)
    fac_to_var: np.ndarray  # (E, 2)

    @classmethod
    def uniform(cls, graph: FactorGraph) -> "RawMessages":
        return cls(np.full((graph.E, 2), 0.5), np.full((graph.E, 2), 0.5))

    def log_ratios(self) -> tuple[np.ndarray, np.ndarray]:
        a = np.log(self.var_to_fac[:, 1]) - np.log(self.var_to_fac[:, 0])
        b = np.log(self.fac_to_var[:, 1]) - np.log(self.fac_to_var[:, 0])
        return a, b


def _factor_value(graph: FactorGraph, evaluator: DelayEvaluator, capacities, j: int, x: dict[int, int]) -> float:
    if j >= graph.J_eta:
        m = j - graph.J_eta
        return 1.0 if sum(x.values()) <= capacities[m] else 0.0
    k, n = int(graph.eta_user[j]), int(graph.eta_file[j])
    N = graph.N
    caching = {i // N for i, on in x.items() if on}
    backhaul = evaluator.demand.backhaul_matrix()
    d = _pair_delay(evaluator.table, evaluator.demand, backhaul, k, n, caching)
    return math.exp(-evaluator.demand.preferences[k, n] * d)


def raw_max_product_round(
    graph: FactorGraph,
    evaluator: DelayEvaluator,
    capacities,
    messages: RawMessages,
    normalize: bool = True,
) -> RawMessages:
    """One flooding round of max-product on the literal factor values.

    Function messages are computed from the incoming variable messages,
    then variable messages from the new function messages. Delay factors
    are ``exp(-p * delay)``; capacity factors are 0/1 indicators.
    """
    if graph.I > RAW_VARIABLE_LIMIT:
        raise ConfigurationError(f"raw max-product is limited to {RAW_VARIABLE_LIMIT} variables")
    cap = np.broadcast_to(np.asarray(capacities, dtype=np.int64), (graph.M,))
    fac_to_var = np.empty((graph.E, 2))
    for j in range(graph.J):
        edges = [int(e) for e in graph.fac_edges(j)]
        vars_ = [int(graph.edge_var[e]) for e in edges]
        for e, i in zip(edges, vars_):
            others = [(l, v) for l, v in zip(edges, vars_) if l != e]
            for xi in (0, 1):
                best = 0.0
                for pattern in itertools.product((0, 1), repeat=len(others)):
                    x = {i: xi}
                    w = 1.0
                    for (l, v), xv in zip(others, pattern):
                        x[v] = xv
                        w *= messages.var_to_fac[l, xv]
                    best = max(best, _factor_value(graph, evaluator, cap, j, x) * w)
                fac_to_var[e, xi] = best
    var_to_fac = np.empty((graph.E, 2))
    for i in range(graph.I):
        edges = [int(e) for e in graph.var_edges(i)]
        for e in edges:
            prod = np.ones(2)
            for l in edges:
                if l != e:
                    prod = prod * fac_to_var[l]
            var_to_fac[e] = prod
    if normalize:
        fac_to_var /= fac_to_var.sum(axis=1, keepdims=True)
        var_to_fac /= var_to_fac.sum(axis=1, keepdims=True)
    return RawMessages(var_to_fac, fac_to_var)


# --------------------------------------------------------------------------
# diminishing-returns probe
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class ProbeReport:
    trials: int
    min_slack: float
    min_gain: float
    violations: int
    monotone_violations: int
    tolerance: float

    @property
    def passed(self) -> bool:
        return self.violations == 0 and self.monotone_violations == 0


def submodularity_probe(
    evaluator: DelayEvaluator,
    trials: int = 1000,
    seed: int = 0,
    capacities=None,
    tolerance: float = 1e-9,
) -> ProbeReport:
    """Sample nested placements ``A <= B`` and an element outside ``B``.

    The slack is ``gain(A, s) - gain(B, s)`` where a gain is the drop in
    average delay; a slack below ``-tolerance`` is a violation, and so is a
    gain below ``-tolerance`` for either set.
    ``capacities`` (default: unbounded) limits the size of ``B`` per BS.
    """
    N, M = evaluator.N, evaluator.M
    cap = np.full(M, N) if capacities is None else np.broadcast_to(np.asarray(capacities), (M,))
    rng = np.random.default_rng(seed)
    delay = _PlainDelays(evaluator.table, evaluator.demand)
    min_slack, min_gain = math.inf, math.inf
    violations = mono = 0
    done = 0
    while done < trials:
        B = np.zeros((N, M), dtype=bool)
        for m in range(M):
            size = rng.integers(0, min(int(cap[m]), N) + 1)
            B[rng.choice(N, size=size, replace=False), m] = True
        free = np.argwhere(~B)
        if free.size == 0:
            continue
        n, m = free[rng.integers(free.shape[0])]
        A = B & (rng.random(B.shape) < 0.5)
        dA = delay(A)
        dB = delay(B)
        A[n, m] = True
        B[n, m] = True
        gA = dA - delay(A)
        gB = dB - delay(B)
        slack = gA - gB
        min_slack = min(min_slack, slack)
        min_gain = min(min_gain, gA, gB)
        violations += slack < -tolerance
        mono += min(gA, gB) < -tolerance
        done += 1
    return ProbeReport(trials, float(min_slack), float(min_gain), int(violations), int(mono), tolerance)
