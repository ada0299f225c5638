"""Seeded oracle checks that compare the fast solvers with the references.

Each check returns a :class:`CheckResult` whose rows can be written as CSV;
the ``verify`` subcommand and the acceptance tests both use them.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from .bp import BPOptions, build_factor_graph, run_rounds
from .delay import DelayEvaluator, Placement
from .greedy import greedy_place
from .model import ChannelParams, build_grid_topology, instance_from_positions, make_demand
from .oracle import (
    RawMessages,
    SlotSimConfig,
    brute_force_optimal,
    raw_max_product_round,
    simulate_download,
    submodularity_probe,
)
from .rates import Scheme, build_rate_table


@dataclass
class CheckResult:
    name: str
    columns: tuple[str, ...]
    rows: list[list] = field(default_factory=list)
    passed: bool = True
    summary: str = ""

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(self.columns)
            for r in self.rows:
                w.writerow([format(v, ".12g") if isinstance(v, float) else v for v in r])


def wald_check(cases: int = 20, seed: int = 0, trials: int = 400, tol: float = 0.05, min_slots: float = 50.0) -> CheckResult:
    """Slot-simulated download time against the expected-rate formula.

    Cases are random (user, caching subset, scheme) draws on the standard
    10-BS line whose expected duration exceeds ``min_slots`` slots.
    """
    channel = ChannelParams(mc_seed=seed)
    inst = build_grid_topology(10, 100, seed=seed)
    demand = make_demand(100, 1, 0.0, seed=seed)
    tables = {s: build_rate_table(inst, channel, s) for s in Scheme}
    rng = np.random.default_rng(seed)
    res = CheckResult("wald", ("case", "user", "scheme", "caching", "theory_s", "simulated_s", "rel_err", "truncated"))
    worst = 0.0
    while len(res.rows) < cases:
        k = int(rng.integers(inst.K))
        scheme = Scheme.COOPERATIVE if rng.random() < 0.5 else Scheme.NON_COOPERATIVE
        table = tables[scheme]
        A = table.serving[k]
        pick = rng.random(len(A)) < 0.5
        caching = [m for m, on in zip(A, pick) if on]
        X = np.zeros((1, inst.M), dtype=bool)
        X[0, caching] = True
        placement = Placement(X, 1)
        theory = float(DelayEvaluator(inst, demand, table).evaluate(placement).user_delay_s[k])
        wireless = theory - (0.0 if caching else demand.backhaul_delay_s)
        if wireless / channel.slot_seconds <= min_slots:
            continue
        sim = simulate_download(k, 0, placement, table, demand, channel,
                                SlotSimConfig(trials=trials, seed=seed + len(res.rows)))
        err = abs(sim.mean_delay_s - theory) / theory
        worst = max(worst, err)
        ok = err < tol and sim.complete
        res.passed &= ok
        res.rows.append([len(res.rows), k, scheme.value, " ".join(map(str, caching)) or "-",
                         theory, sim.mean_delay_s, err, sim.truncated])
    res.summary = f"worst relative error {worst:.4f} (limit {tol})"
    return res


def submodularity_check(trials: int = 1000, seed: int = 0) -> CheckResult:
    """Diminishing returns and monotonicity on a small three-BS line, both schemes."""
    inst = build_grid_topology(3, 10, seed=seed)
    demand = make_demand(10, 5, 0.8, seed=seed + 1)
    channel = ChannelParams(mc_seed=seed, mc_samples=2000)
    res = CheckResult("submodularity", ("scheme", "trials", "min_slack", "min_gain", "violations", "monotone_violations"))
    parts = []
    for scheme in Scheme:
        ev = DelayEvaluator(inst, demand, build_rate_table(inst, channel, scheme))
        rep = submodularity_probe(ev, trials=trials, seed=seed)
        res.passed &= rep.passed
        res.rows.append([scheme.value, rep.trials, rep.min_slack, rep.min_gain, rep.violations, rep.monotone_violations])
        parts.append(f"{scheme.value}: min slack {rep.min_slack:.3g}, {rep.violations + rep.monotone_violations} violations")
    res.summary = "; ".join(parts)
    return res


def _micro_instance(rng, M, K, seed):
    # BSs 200 m apart on a line; users uniform over the covered stretch
    bs = [(200.0 * m, 0.0) for m in range(M)]
    x = rng.uniform(-150.0, 200.0 * (M - 1) + 150.0, size=K)
    y = rng.uniform(-100.0, 100.0, size=K)
    inst = instance_from_positions(bs, np.column_stack([x, y]), seed=seed)
    if any(not A for A in inst.serving_sets):
        return None
    return inst


def greedy_ratio_check(instances: int = 100, seed: int = 0, bound: float = 0.5) -> CheckResult:
    """Greedy delay reduction over the exhaustive optimum on micro instances."""
    rng = np.random.default_rng(seed)
    channel = ChannelParams(mc_seed=seed, mc_samples=2000)
    res = CheckResult("greedy_ratio", ("case", "M", "N", "K", "Q", "scheme", "empty_s", "greedy_s", "optimal_s", "ratio"))
    worst = np.inf
    case = 0
    while case < instances:
        M, N, K, Q = (int(rng.integers(1, 4)), int(rng.integers(2, 5)), int(rng.integers(1, 6)), int(rng.integers(1, 3)))
        inst = _micro_instance(rng, M, K, seed + case)
        if inst is None:
            continue
        scheme = Scheme.COOPERATIVE if rng.random() < 0.5 else Scheme.NON_COOPERATIVE
        demand = make_demand(K, N, float(rng.uniform(0.2, 2.0)), seed=seed + case)
        ev = DelayEvaluator(inst, demand, build_rate_table(inst, channel, scheme))
        empty = ev.average_delay(Placement.empty(N, M, Q))
        greedy = ev.average_delay(greedy_place(ev, Q)[0])
        _, best = brute_force_optimal(ev, Q)
        ratio = (empty - greedy) / (empty - best)
        worst = min(worst, ratio)
        res.passed &= ratio >= bound and best <= greedy + 1e-9
        res.rows.append([case, M, N, K, Q, scheme.value, empty, greedy, best, ratio])
        case += 1
    res.summary = f"minimum greedy/optimal improvement ratio {worst:.4f} (bound {bound})"
    return res


def bp_equivalence_check(instances: int = 20, rounds: int = 5, seed: int = 0, eta_rule: str = "sign",
                         tol: float = 1e-9) -> CheckResult:
    """Scalar log-ratio messages against literal max-product on two-BS graphs.

    Each instance has one user per cell plus one in the overlap, at most
    three files and capacity one or two, so at most six variables.
    """
    rng = np.random.default_rng(seed)
    channel = ChannelParams(mc_seed=seed, mc_samples=2000)
    res = CheckResult("bp_equivalence", ("case", "scheme", "N", "Q", "round", "max_abs_err"))
    worst = 0.0
    for case in range(instances):
        users = [(rng.uniform(-140, 40), rng.uniform(-40, 40)),
                 (rng.uniform(60, 140), rng.uniform(-40, 40)),
                 (rng.uniform(160, 340), rng.uniform(-40, 40))]
        inst = instance_from_positions([(0.0, 0.0), (200.0, 0.0)], users, seed=seed + case)
        N, Q = int(rng.integers(2, 4)), int(rng.integers(1, 3))
        scheme = Scheme.COOPERATIVE if case % 2 == 0 else Scheme.NON_COOPERATIVE
        demand = make_demand(3, N, float(rng.uniform(0.3, 2.0)), seed=seed + case)
        ev = DelayEvaluator(inst, demand, build_rate_table(inst, channel, scheme))
        graph = build_factor_graph(ev)
        raw = RawMessages.uniform(graph)
        for state in run_rounds(graph, ev, Q, rounds, BPOptions(eta_rule=eta_rule)):
            raw = raw_max_product_round(graph, ev, Q, raw)
            a, b = raw.log_ratios()
            err = float(max(np.max(np.abs(a - state.alpha)), np.max(np.abs(b - state.beta))))
            worst = max(worst, err)
            res.rows.append([case, scheme.value, N, Q, state.t, err])
    res.passed = worst <= tol
    res.summary = f"largest log-ratio difference {worst:.3g} (limit {tol:g}, rule {eta_rule})"
    return res
