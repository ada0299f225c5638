"""Distributed placement by max-product belief propagation in the log-ratio domain.

Variable node ``i = m * N + n`` stands for "BS m caches file n". Function
nodes are one delay factor per requested (file, user) pair, ordered by user
then file, followed by one capacity factor per BS. Messages are scalar log
ratios: ``alpha`` on variable-to-function edges and ``beta`` on
function-to-variable edges, both indexed by edge.

Every delay factor of a user is handled by that user's lowest-index serving
BS; a message crossing from one BS to another counts as exchanged.
"""
from __future__ import annotations

import csv
import itertools
from dataclasses import dataclass, field

import numpy as np

from .delay import DelayEvaluator, Placement
from .errors import SolverError

ETA_RULES = ("sign", "exact")
SCHEDULES = ("flooding", "sequential")


@dataclass(frozen=True, eq=False)
class FactorGraph:
    N: int
    M: int
    K: int
    eta_user: np.ndarray      # (J_eta,) user of each delay factor
    eta_file: np.ndarray      # (J_eta,) file of each delay factor
    eta_start: np.ndarray     # (J_eta + 1,) edge offsets of delay factors
    edge_var: np.ndarray      # (E,)
    edge_fac: np.ndarray      # (E,)
    edge_bit: np.ndarray      # (E,) local serving-set bit of the variable's BS (delay edges), -1 for capacity edges
    fac_owner: np.ndarray     # (J,) BS that computes each function node
    user_offsets: np.ndarray  # (K + 1,) first delay factor of every user

    @property
    def I(self) -> int:
        return self.N * self.M

    @property
    def J_eta(self) -> int:
        return self.eta_user.size

    @property
    def J(self) -> int:
        return self.J_eta + self.M

    @property
    def E(self) -> int:
        return self.edge_var.size

    @property
    def n_eta_edges(self) -> int:
        return int(self.eta_start[-1])

    def cap_node(self, m: int) -> int:
        return self.J_eta + m

    def cap_edges(self, m: int) -> np.ndarray:
        start = self.n_eta_edges + m * self.N
        return np.arange(start, start + self.N)

    def eta_node(self, n: int, k: int) -> int:
        lo, hi = self.user_offsets[k], self.user_offsets[k + 1]
        pos = np.searchsorted(self.eta_file[lo:hi], n)
        if lo + pos >= hi or self.eta_file[lo + pos] != n:
            raise KeyError(f"user {k} never requests file {n}")
        return int(lo + pos)

    def var_owner(self, i) -> np.ndarray:
        return np.asarray(i) // self.N

    def fac_edges(self, j: int) -> np.ndarray:
        if j < self.J_eta:
            return np.arange(self.eta_start[j], self.eta_start[j + 1])
        return self.cap_edges(j - self.J_eta)

    def fac_neighbors(self, j: int) -> list[int]:
        return [int(v) for v in self.edge_var[self.fac_edges(j)]]

    def var_edges(self, i: int) -> np.ndarray:
        return np.flatnonzero(self.edge_var == i)

    def var_neighbors(self, i: int) -> list[int]:
        return [int(j) for j in self.edge_fac[self.var_edges(i)]]

    def edge(self, i: int, j: int) -> int:
        hits = np.flatnonzero((self.edge_var == i) & (self.edge_fac == j))
        if hits.size == 0:
            raise KeyError(f"variable {i} is not adjacent to function {j}")
        return int(hits[0])

    def processed_users(self, m: int) -> tuple[int, ...]:
        owners = self.fac_owner[self.user_offsets[:-1]] if self.J_eta else np.array([], dtype=int)
        has = self.user_offsets[1:] > self.user_offsets[:-1]
        return tuple(int(k) for k in np.flatnonzero(has & (owners == m)))

    def crossing(self) -> np.ndarray:
        """Edges whose variable and function live at different BSs."""
        return self.var_owner(self.edge_var) != self.fac_owner[self.edge_fac]

    def per_round_counts(self) -> tuple[np.ndarray, np.ndarray]:
        """Messages computed and sent to another BS, per BS, in one round."""
        var_bs = self.var_owner(self.edge_var)
        fac_bs = self.fac_owner[self.edge_fac]
        computed = np.bincount(var_bs, minlength=self.M) + np.bincount(fac_bs, minlength=self.M)
        x = self.crossing()
        exchanged = np.bincount(var_bs[x], minlength=self.M) + np.bincount(fac_bs[x], minlength=self.M)
        return computed, exchanged


def build_factor_graph(evaluator: DelayEvaluator) -> FactorGraph:
    """Factor graph of the placement problem behind ``evaluator``.

    Delay factors exist only for pairs with positive preference.
    """
    ev = evaluator
    N, M, K = ev.N, ev.M, ev.K
    p = ev.demand.preferences
    eta_user, eta_file, degrees = [], [], []
    edge_var, edge_bit = [], []
    user_offsets = [0]
    owners = []
    for k in range(K):
        A = np.asarray(ev.serving[k], dtype=np.int64)
        files = np.flatnonzero(p[k] > 0)
        eta_user.append(np.full(files.size, k))
        eta_file.append(files)
        degrees.append(np.full(files.size, A.size))
        edge_var.append((A[None, :] * N + files[:, None]).reshape(-1))
        edge_bit.append(np.tile(np.arange(A.size), files.size))
        owners.append(np.full(files.size, A[0] if A.size else 0))
        user_offsets.append(user_offsets[-1] + files.size)

    def cat(parts, dtype=np.int64):
        return np.concatenate(parts).astype(dtype) if parts else np.zeros(0, dtype=dtype)

    eta_user = cat(eta_user)
    eta_file = cat(eta_file)
    degrees = cat(degrees)
    J_eta = eta_user.size
    eta_start = np.concatenate([[0], np.cumsum(degrees)]).astype(np.int64)
    n_eta_edges = int(eta_start[-1])

    cap_var = (np.arange(M)[:, None] * N + np.arange(N)[None, :]).reshape(-1)
    cap_fac = J_eta + np.repeat(np.arange(M), N)
    eta_fac = np.repeat(np.arange(J_eta), degrees) if J_eta else np.zeros(0, dtype=np.int64)
    return FactorGraph(
        N=N, M=M, K=K,
        eta_user=eta_user,
        eta_file=eta_file,
        eta_start=eta_start,
        edge_var=np.concatenate([cat(edge_var), cap_var]).astype(np.int64),
        edge_fac=np.concatenate([eta_fac, cap_fac]).astype(np.int64),
        edge_bit=np.concatenate([cat(edge_bit), np.full(M * N, -1)]).astype(np.int64),
        fac_owner=np.concatenate([cat(owners), np.arange(M)]).astype(np.int64),
        user_offsets=np.asarray(user_offsets, dtype=np.int64),
    )


@dataclass
class MessageState:
    alpha: np.ndarray
    beta: np.ndarray
    beliefs: np.ndarray
    estimates: np.ndarray
    t: int = 0

    @classmethod
    def initial(cls, graph: FactorGraph) -> "MessageState":
        return cls(
            alpha=np.zeros(graph.E),
            beta=np.zeros(graph.E),
            beliefs=np.zeros(graph.I),
            estimates=np.zeros(graph.I, dtype=bool),
        )


@dataclass
class BPOptions:
    t_max: int = 200
    tol: float = 1e-6
    damping: float = 0.0
    stable_rounds: int = 3
    eta_rule: str = "sign"
    schedule: str = "flooding"

    def __post_init__(self):
        if self.schedule not in SCHEDULES:
            raise ValueError(f"schedule must be one of {SCHEDULES}")
        if not 0.0 <= self.damping < 1.0:
            raise ValueError("damping must lie in [0, 1)")
        if self.eta_rule not in ETA_RULES:
            raise ValueError(f"eta_rule must be one of {ETA_RULES}")
        if self.t_max < 1:
            raise ValueError("t_max must be at least 1")


TRACE_COLUMNS = ("round", "avg_delay_s", "changed", "max_delta", "computed", "exchanged")


@dataclass
class BPTrace:
    rounds: list[tuple[int, float, int, float]] = field(default_factory=list)
    computed_per_round: np.ndarray | None = None
    exchanged_per_round: np.ndarray | None = None
    converged: bool = False
    repaired: bool = False

    @property
    def n_rounds(self) -> int:
        return len(self.rounds)

    @property
    def delays(self) -> list[float]:
        return [r[1] for r in self.rounds]

    def write_csv(self, path) -> None:
        M = self.computed_per_round.size
        header = list(TRACE_COLUMNS) + [f"computed_bs{m}" for m in range(M)] + [f"exchanged_bs{m}" for m in range(M)]
        comp = self.computed_per_round
        exch = self.exchanged_per_round
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(header)
            for t, delay, changed, delta in self.rounds:
                w.writerow(
                    [t, format(delay, ".12g"), changed, format(delta, ".12g"),
                     int(comp.sum()) * t, int(exch.sum()) * t]
                    + [int(c) * t for c in comp] + [int(x) * t for x in exch]
                )


@dataclass
class BPResult:
    placement: Placement
    estimates: Placement
    trace: BPTrace
    state: MessageState

    @property
    def converged(self) -> bool:
        return self.trace.converged

    @property
    def rounds(self) -> int:
        return self.trace.n_rounds


# --------------------------------------------------------------------------
# single-message updates (reference forms)
# --------------------------------------------------------------------------

def update_alpha(graph: FactorGraph, state: MessageState, i: int, j: int, damping: float = 0.0) -> float:
    """Sum of the messages into variable ``i`` from every function except ``j``."""
    e = graph.edge(i, j)
    total = 0.0
    for l in graph.var_edges(i):
        if l != e:
            total += state.beta[l]
    return damping * state.alpha[e] + (1.0 - damping) * total


def _pair_delay(ev: DelayEvaluator, k: int, n: int, mask: int) -> float:
    return ev.pair_delay(k, n, mask)


def update_beta_eta(graph: FactorGraph, state: MessageState, j: int, i: int, evaluator: DelayEvaluator) -> float:
    """Delay-factor message: weighted delay saving of turning ``i`` on,
    given that the other neighbours with positive incoming messages are on."""
    k, n = int(graph.eta_user[j]), int(graph.eta_file[j])
    edges = graph.fac_edges(j)
    e = graph.edge(i, j)
    bit = 1 << int(graph.edge_bit[e])
    on = 0
    for l in edges:
        if l != e and state.alpha[l] > 0:
            on |= 1 << int(graph.edge_bit[l])
    p = evaluator.demand.preferences[k, n]
    return p * (_pair_delay(evaluator, k, n, on) - _pair_delay(evaluator, k, n, on | bit))


def update_beta_cap(graph: FactorGraph, state: MessageState, j: int, i: int, capacity: int) -> float:
    """Capacity-factor message ``min(0, -a_Q)``.

    ``a_Q`` is the Q-th largest message arriving from the other variables;
    when fewer than Q others exist the capacity cannot bind and the message
    is 0. Capacity zero is handled by clamping, not here.
    """
    if capacity <= 0:
        raise ValueError("zero-capacity BSs are clamped, not messaged")
    e = graph.edge(i, j)
    others = sorted((state.alpha[l] for l in graph.fac_edges(j) if l != e), reverse=True)
    if len(others) < capacity:
        return 0.0
    if capacity >= 2 and others[capacity - 2] < 0:
        return 0.0
    return min(0.0, -others[capacity - 1])


def belief_and_decide(graph: FactorGraph, state: MessageState, i: int) -> tuple[float, bool]:
    b = 0.0
    for l in graph.var_edges(i):
        b += state.beta[l]
    return b, b > 0


# --------------------------------------------------------------------------
# vectorised rounds
# --------------------------------------------------------------------------

class _Engine:
    def __init__(self, graph: FactorGraph, ev: DelayEvaluator, capacities, options: BPOptions):
        self.g = graph
        self.ev = ev
        self.opt = options
        self.cap = np.broadcast_to(np.asarray(capacities, dtype=np.int64), (graph.M,)).copy()
        p = ev.demand.preferences
        # delay factors grouped by (owner BS, degree) so each group is one dense block
        deg = np.diff(graph.eta_start)
        owner = graph.fac_owner[: graph.J_eta]
        self.groups_by_bs = [[] for _ in range(graph.M)]
        for m in range(graph.M):
            for d in np.unique(deg[owner == m]):
                nodes = np.flatnonzero((deg == d) & (owner == m))
                edges = graph.eta_start[nodes][:, None] + np.arange(d)[None, :]
                k = graph.eta_user[nodes]
                n = graph.eta_file[nodes]
                self.groups_by_bs[m].append((int(d), edges, k, n, p[k, n], ev.miss_delay[k, n]))
        self.groups = [grp for groups in self.groups_by_bs for grp in groups]
        self.clamped_bs = self.cap <= 0
        var_bs = graph.var_owner(graph.edge_var)
        self.var_edges_by_bs = [np.flatnonzero(var_bs == m) for m in range(graph.M)]
        self.clamped_edge = self.clamped_bs[var_bs]
        self.clamped_var = np.repeat(self.clamped_bs, graph.N)

    def beta_eta(self, alpha: np.ndarray, out: np.ndarray, groups=None) -> None:
        hit = self.ev.hit_delay
        exact = self.opt.eta_rule == "exact"
        for d, edges, k, n, p, miss in self.groups if groups is None else groups:
            a = alpha[edges]
            if exact:
                out[edges] = self._beta_eta_exact(a, d, k, p, miss)
                continue
            pos = (a > 0).astype(np.int64) << np.arange(d)[None, :]
            posmask = pos.sum(axis=1)
            for b in range(d):
                bit = 1 << b
                off = posmask & ~bit
                on = off | bit
                d_off = np.where(off > 0, hit[k, off], miss)
                d_on = hit[k, on]
                out[edges[:, b]] = p * (d_off - d_on)

    def _beta_eta_exact(self, a, d, k, p, miss):
        # literal max over the other neighbours' on/off patterns
        hit = self.ev.hit_delay
        res = np.empty_like(a)
        for b in range(d):
            bit = 1 << b
            others = [x for x in range(d) if x != b]
            best1 = np.full(a.shape[0], -np.inf)
            best0 = np.full(a.shape[0], -np.inf)
            for pattern in itertools.product((0, 1), repeat=len(others)):
                mask = 0
                score = np.zeros(a.shape[0])
                for x, on in zip(others, pattern):
                    if on:
                        mask |= 1 << x
                        score = score + a[:, x]
                d_off = miss if mask == 0 else hit[k, mask]
                best0 = np.maximum(best0, score - p * d_off)
                best1 = np.maximum(best1, score - p * hit[k, mask | bit])
            res[:, b] = best1 - best0
        return res

    def beta_cap(self, alpha: np.ndarray, out: np.ndarray, bss=None) -> None:
        N = self.g.N
        for m in range(self.g.M) if bss is None else bss:
            edges = self.g.cap_edges(m)
            Q = int(self.cap[m])
            if Q <= 0 or N - 1 < Q:
                out[edges] = 0.0
                continue
            a = alpha[edges]
            order = np.argsort(-a, kind="stable")
            srt = a[order]
            rank = np.empty(N, dtype=np.int64)
            rank[order] = np.arange(N)
            # Q-th (and (Q-1)-th) largest among the others: skip one slot if i itself is above it
            qth = np.where(rank < Q, srt[Q] if Q < N else -np.inf, srt[Q - 1])
            if Q >= 2:
                q1 = np.where(rank < Q - 1, srt[Q - 1], srt[Q - 2])
                out[edges] = np.where(q1 >= 0, np.minimum(0.0, -qth), 0.0)
            else:
                out[edges] = np.minimum(0.0, -qth)

    def round(self, state: MessageState) -> float:
        if self.opt.schedule == "sequential":
            return self._round_sequential(state)
        return self._round_flooding(state)

    def _check_finite(self, state, alpha, beta):
        bad = ~np.isfinite(beta) | ~np.isfinite(alpha)
        if bad.any():
            g = self.g
            e = int(np.flatnonzero(bad)[0])
            raise SolverError(
                f"non-finite message in round {state.t + 1} on edge {e} "
                f"(variable {g.edge_var[e]}, function {g.edge_fac[e]})"
            )

    def _finish(self, state, alpha, beta, beliefs) -> float:
        self._check_finite(state, alpha, beta)
        delta = 0.0
        if self.g.E:
            delta = float(max(np.max(np.abs(alpha - state.alpha)), np.max(np.abs(beta - state.beta))))
        state.alpha = alpha
        state.beta = beta
        state.beliefs = beliefs
        state.estimates = (beliefs > 0) & ~self.clamped_var
        state.t += 1
        return delta

    def _round_flooding(self, state: MessageState) -> float:
        g = self.g
        beta = np.empty(g.E)
        self.beta_eta(state.alpha, beta)
        self.beta_cap(state.alpha, beta)
        beliefs = np.bincount(g.edge_var, weights=beta, minlength=g.I)
        with np.errstate(invalid="ignore"):  # inf - inf is reported by _check_finite
            alpha = beliefs[g.edge_var] - beta
        lam = self.opt.damping
        if lam:
            alpha = lam * state.alpha + (1.0 - lam) * alpha
        alpha[self.clamped_edge] = 0.0
        return self._finish(state, alpha, beta, beliefs)

    def _round_sequential(self, state: MessageState) -> float:
        # one sweep over the BSs in index order, each using the freshest messages
        g = self.g
        N = g.N
        alpha = state.alpha.copy()
        beta = state.beta.copy()
        lam = self.opt.damping
        for m in range(g.M):
            edges = self.var_edges_by_bs[m]
            local = g.edge_var[edges] - m * N
            b = np.bincount(local, weights=beta[edges], minlength=N)
            new = b[local] - beta[edges]
            if lam:
                new = lam * alpha[edges] + (1.0 - lam) * new
            alpha[edges] = 0.0 if self.clamped_bs[m] else new
            self.beta_eta(alpha, beta, self.groups_by_bs[m])
            self.beta_cap(alpha, beta, (m,))
        beliefs = np.bincount(g.edge_var, weights=beta, minlength=g.I)
        return self._finish(state, alpha, beta, beliefs)


def run_rounds(graph: FactorGraph, evaluator: DelayEvaluator, capacities, rounds: int, options: BPOptions | None = None):
    """Yield the message state after each of ``rounds`` synchronous rounds."""
    engine = _Engine(graph, evaluator, capacities, options or BPOptions())
    state = MessageState.initial(graph)
    for _ in range(rounds):
        engine.round(state)
        yield state


def repair(estimates: np.ndarray, beliefs: np.ndarray, N: int, M: int, capacities) -> tuple[Placement, bool]:
    """Keep, per BS, the ``Q_m`` switched-on files with the largest beliefs."""
    cap = np.broadcast_to(np.asarray(capacities, dtype=np.int64), (M,))
    X = estimates.reshape(M, N).T.copy()
    b = beliefs.reshape(M, N).T
    repaired = False
    for m in range(M):
        on = np.flatnonzero(X[:, m])
        if on.size > cap[m]:
            repaired = True
            keep = on[np.argsort(-b[on, m], kind="stable")[: cap[m]]]
            X[:, m] = False
            X[keep, m] = True
    return Placement(X, cap), repaired


def bp_solve(
    evaluator: DelayEvaluator,
    capacities,
    options: BPOptions | None = None,
    report_evaluator: DelayEvaluator | None = None,
) -> BPResult:
    """Run max-product rounds until the estimates settle.

    With the default ``flooding`` schedule a round computes all
    function-to-variable messages from the current variable-to-function
    messages, then all variable-to-function messages from the new ones.
    The ``sequential`` schedule sweeps the BSs in index order instead, each
    BS updating its own variables and factors from the freshest messages.
    Convergence requires the estimates to stay unchanged for
    ``stable_rounds`` rounds while the largest message change is below
    ``tol``. The estimates are trimmed to capacity afterwards if needed.

    ``report_evaluator`` scores the per-round estimates; it defaults to
    ``evaluator`` and differs only when solving with approximate preferences.
    """
    opt = options or BPOptions()
    ev = evaluator
    report = report_evaluator or ev
    graph = build_factor_graph(ev)
    engine = _Engine(graph, ev, capacities, opt)
    state = MessageState.initial(graph)
    trace = BPTrace()
    trace.computed_per_round, trace.exchanged_per_round = graph.per_round_counts()

    prev = state.estimates.copy()
    stable = 0
    for _ in range(opt.t_max):
        delta = engine.round(state)
        changed = int(np.count_nonzero(state.estimates != prev))
        stable = stable + 1 if changed == 0 else 0
        prev = state.estimates.copy()
        est = Placement.from_incidence(state.estimates, ev.N, ev.M, engine.cap, allow_infeasible=True)
        trace.rounds.append((state.t, report.average_delay(est), changed, delta))
        if engine.clamped_var.all():
            trace.converged = True
            break
        if stable >= opt.stable_rounds and delta < opt.tol:
            trace.converged = True
            break

    estimates = Placement.from_incidence(state.estimates, ev.N, ev.M, engine.cap, allow_infeasible=True)
    placement, trace.repaired = repair(state.estimates, state.beliefs, ev.N, ev.M, engine.cap)
    return BPResult(placement=placement, estimates=estimates, trace=trace, state=state)


def exchange_accounting(graph: FactorGraph, trace: BPTrace) -> tuple[np.ndarray, np.ndarray]:
    """Total messages computed and sent across BS boundaries, per BS."""
    computed, exchanged = graph.per_round_counts()
    return computed * trace.n_rounds, exchanged * trace.n_rounds
