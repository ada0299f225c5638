"""Centralised placement: greedy over the partition matroid, plus popularity baselines.

The objective maximised is the negated average delay, so the marginal gain
of caching file ``n`` at BS ``m`` is the average-delay reduction it buys.
Ground-set element ``(m, n)`` has index ``m * N + n``; ties between equal
gains go to the lowest index.
"""
from __future__ import annotations

import csv
import heapq
from dataclasses import dataclass, field

import numpy as np

from .delay import DelayEvaluator, Placement
from .errors import SolverError
from .model import PopularityAggregates

TRACE_COLUMNS = ("step", "bs", "file", "gain", "avg_delay_s", "calculations")

# float slack allowed when checking that selected gains never increase
_MONOTONE_SLACK = 1e-12


@dataclass
class SolveTrace:
    steps: list[tuple[int, int, float, float, int]] = field(default_factory=list)
    calculations: int = 0
    initial_delay_s: float = 0.0

    @property
    def gains(self) -> list[float]:
        return [s[2] for s in self.steps]

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(TRACE_COLUMNS)
            for i, (m, n, g, obj, calc) in enumerate(self.steps, 1):
                w.writerow([i, m, n, format(g, ".12g"), format(obj, ".12g"), calc])


class _GainModel:
    """Incremental marginal gains; only users of BS ``m`` matter for ``(m, n)``."""

    def __init__(self, ev: DelayEvaluator):
        self.ev = ev
        self.masks = np.zeros((ev.K, ev.N), dtype=np.int64)
        self.rows = []
        for m in range(ev.M):
            users = np.flatnonzero(ev.bitpos[:, m] >= 0)
            self.rows.append((users, np.int64(1) << ev.bitpos[users, m]))

    def load(self, X: np.ndarray) -> None:
        self.masks = self.ev.masks(X)

    def gains(self, m: int, cols) -> np.ndarray:
        users, bits = self.rows[m]
        cols = np.atleast_1d(np.asarray(cols))
        if users.size == 0:
            return np.zeros(cols.size)
        ev = self.ev
        cur = self.masks[np.ix_(users, cols)]
        new = cur | bits[:, None]
        hit = ev.hit_delay[users]
        miss = ev.miss_delay[np.ix_(users, cols)]
        d_cur = np.where(cur > 0, np.take_along_axis(hit, cur, axis=1), miss)
        d_new = np.take_along_axis(hit, new, axis=1)
        contrib = ev.weights[np.ix_(users, cols)] * (d_cur - d_new)
        # fixed row order so that eager and lazy sums agree bit for bit
        total = contrib[0].copy()
        for r in range(1, users.size):
            total += contrib[r]
        return total

    def add(self, m: int, n: int) -> None:
        users, bits = self.rows[m]
        self.masks[users, n] |= bits


def marginal_gain(placement: Placement, m: int, n: int, evaluator: DelayEvaluator) -> float:
    """Average-delay reduction from additionally caching file ``n`` at BS ``m``."""
    if placement.X[n, m]:
        raise ValueError(f"file {n} is already cached at BS {m}")
    model = _GainModel(evaluator)
    model.load(placement.X)
    return float(model.gains(m, [n])[0])


def _check_trace(trace: SolveTrace) -> None:
    g = trace.gains
    for i in range(1, len(g)):
        if g[i] > g[i - 1] + _MONOTONE_SLACK * max(1.0, abs(g[i - 1])):
            raise SolverError(f"greedy gain increased at step {i + 1}: {g[i - 1]!r} -> {g[i]!r}")


def greedy_place(evaluator: DelayEvaluator, capacities) -> tuple[Placement, SolveTrace]:
    """Plain greedy: re-evaluate every uncached element after each addition.

    Stops when every BS is full or no admissible element reduces the delay.
    ``trace.calculations`` counts one unit per element of ``S \\ X`` per
    evaluation pass.
    """
    ev = evaluator
    N, M = ev.N, ev.M
    placement = Placement.empty(N, M, capacities)
    cap = placement.capacities
    model = _GainModel(ev)
    chosen = np.zeros((M, N), dtype=bool)
    trace = SolveTrace(initial_delay_s=ev.average_delay(placement))
    delay = trace.initial_delay_s
    n_chosen = 0

    while True:
        gains = np.empty((M, N))
        for m in range(M):
            gains[m] = model.gains(m, np.arange(N))
        trace.calculations += M * N - n_chosen
        admissible = ~chosen & (placement.loads() < cap)[:, None]
        if not admissible.any():
            break
        masked = np.where(admissible, gains, -np.inf)
        best = int(np.argmax(masked))  # first maximum = lowest ground-set index
        g = float(masked.flat[best])
        if g <= 0.0:
            break
        m, n = divmod(best, N)
        chosen[m, n] = True
        placement.X[n, m] = True
        model.add(m, n)
        n_chosen += 1
        delay -= g
        trace.steps.append((m, n, g, delay, trace.calculations))

    _check_trace(trace)
    return placement, trace


def greedy_place_lazy(evaluator: DelayEvaluator, capacities) -> tuple[Placement, SolveTrace]:
    """Lazy greedy with stale upper bounds in a max-heap.

    Returns the same placement and selections as :func:`greedy_place`.
    ``trace.calculations`` counts the initial evaluations, every heap pop
    and every re-evaluation.
    """
    ev = evaluator
    N, M = ev.N, ev.M
    placement = Placement.empty(N, M, capacities)
    cap = placement.capacities
    loads = np.zeros(M, dtype=np.int64)
    model = _GainModel(ev)
    trace = SolveTrace(initial_delay_s=ev.average_delay(placement))
    delay = trace.initial_delay_s

    heap = []
    for m in range(M):
        if cap[m] == 0:
            continue
        g = model.gains(m, np.arange(N))
        heap.extend((-float(g[n]), m * N + n, 0) for n in range(N))
        trace.calculations += N
    heapq.heapify(heap)
    version = 0

    while heap:
        neg, idx, ver = heapq.heappop(heap)
        trace.calculations += 1
        m, n = divmod(idx, N)
        if loads[m] >= cap[m]:
            continue
        if ver != version:
            g = float(model.gains(m, [n])[0])
            trace.calculations += 1
            heapq.heappush(heap, (-g, idx, version))
            continue
        g = -neg
        if g <= 0.0:
            break
        placement.X[n, m] = True
        model.add(m, n)
        loads[m] += 1
        version += 1
        delay -= g
        trace.steps.append((m, n, g, delay, trace.calculations))

    _check_trace(trace)
    return placement, trace


def _top_q(popularity: np.ndarray, q: int) -> np.ndarray:
    order = np.argsort(-popularity, kind="stable")
    return order[:q]


def gpc_place(capacities, aggregates: PopularityAggregates) -> Placement:
    """Every BS caches the files with the highest network-wide popularity."""
    N = aggregates.global_.size
    M = aggregates.local.shape[0]
    placement = Placement.empty(N, M, capacities)
    for m in range(M):
        placement.X[_top_q(aggregates.global_, int(placement.capacities[m])), m] = True
    return placement


def lpc_place(capacities, aggregates: PopularityAggregates) -> Placement:
    """Every BS caches the files its own users like most on average."""
    M, N = aggregates.local.shape
    placement = Placement.empty(N, M, capacities)
    for m in range(M):
        placement.X[_top_q(aggregates.local[m], int(placement.capacities[m])), m] = True
    return placement
