"""Experiment configuration, capacity/skew sweeps and comparison reports.

A sweep writes one CSV of result rows, per-cell BP traces under
``traces/`` (prefixed with the sweep name) and a ``manifest.json``
holding the configuration and a hash of every output, so reruns can be
compared byte for byte.
"""
from __future__ import annotations

import configparser
import csv
import hashlib
import json
import re
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from . import __version__
from .bp import BPOptions, bp_solve
from .delay import DelayEvaluator, Placement
from .errors import ConfigurationError, FeasibilityError, SolverError
from .greedy import gpc_place, greedy_place, greedy_place_lazy, lpc_place
from .model import (
    GEOMETRIES,
    ChannelParams,
    aggregate_popularity,
    build_grid_topology,
    cell_average_preferences,
    gamma_ramp,
    make_demand,
)
from .rates import Scheme, build_rate_table

STRATEGIES = ("greedy-cotc", "greedy-noncotc", "bp-cotc", "bp-noncotc", "gpc", "lpc")
SWEEP_COLUMNS = (
    "sweep_value", "strategy", "scheme", "avg_delay_s", "hit_prob",
    "calc_count", "bp_rounds", "messages_exchanged", "bp_converged",
)
SUMMARY_COLUMNS = ("source", "sweep_value", "scheme", "strategy_a", "strategy_b", "delay_a_s", "delay_b_s", "gap_s", "rel_gap")

_RAMP = re.compile(r"^\s*([-+0-9.eE]+)\s*\+\s*([-+0-9.eE]+)\s*\*?\s*k\s*/\s*K\s*$")


def parse_gamma(spec, K: int) -> np.ndarray:
    """Per-user Zipf skew from ``"0.65"`` or a ramp like ``"0.2+4.8k/K"``."""
    if isinstance(spec, (int, float)):
        return np.full(K, float(spec))
    text = str(spec).strip()
    m = _RAMP.match(text)
    if m:
        return gamma_ramp(K, float(m.group(1)), float(m.group(2)))
    try:
        return np.full(K, float(text))
    except ValueError:
        raise ConfigurationError(f"cannot read Zipf parameter {spec!r}; use a number or 'a+b*k/K'") from None


def _fmt(x) -> str:
    return format(float(x), ".12g")


@dataclass
class ExperimentConfig:
    # network
    M: int = 10
    K: int = 100
    geometry: str = "line"
    cell_radius: float = 150.0
    bs_spacing: float = 200.0
    seed: int = 0
    # demand
    N: int = 1000
    gamma: str = "0.65"
    file_bits: float = 1e8
    backhaul_delay_s: float = 40.0
    # channel
    bandwidth_hz: float = 5e6
    slot_seconds: float = 0.02
    pathloss_exponent: float = 3.5
    edge_snr_db: float = 0.0
    mc_samples: int = 10000
    # experiment
    strategies: tuple[str, ...] = STRATEGIES
    sweep: str = "q"
    q_values: tuple[int, ...] = tuple(range(20, 201, 20))
    gamma_values: tuple[float, ...] = ()
    q: int = 50
    greedy: str = "eager"
    approx_prefs: bool = False
    name: str = "sweep"
    out: str = "results"
    # belief propagation
    bp_tmax: int = 200
    bp_tol: float = 1e-6
    bp_damping: float = 0.8
    bp_schedule: str = "sequential"
    bp_eta_rule: str = "sign"

    def validate(self) -> "ExperimentConfig":
        if not self.strategies:
            raise ConfigurationError("no strategies selected")
        bad = [s for s in self.strategies if s not in STRATEGIES]
        if bad:
            raise ConfigurationError(f"unknown strategies {bad}; choose from {', '.join(STRATEGIES)}")
        if self.geometry not in GEOMETRIES:
            raise ConfigurationError(f"geometry must be one of {GEOMETRIES}")
        if self.greedy not in ("eager", "lazy"):
            raise ConfigurationError("greedy must be 'eager' or 'lazy'")
        for name in ("M", "K", "N", "mc_samples", "bp_tmax"):
            if getattr(self, name) < 1:
                raise ConfigurationError(f"{name} must be positive")
        if self.sweep == "q":
            values = self.q_values
        elif self.sweep == "gamma":
            values = self.gamma_values
            if not 0 < self.q <= self.N:
                raise ConfigurationError(f"q = {self.q} must lie in 1..N")
        else:
            raise ConfigurationError("sweep must be 'q' or 'gamma'")
        if not values:
            raise ConfigurationError(f"no {self.sweep} values to sweep")
        if any(v <= 0 for v in values):
            raise ConfigurationError("sweep values must be positive")
        if self.sweep == "q" and max(values) > self.N:
            raise ConfigurationError(f"capacity {max(values)} exceeds the number of files {self.N}")
        parse_gamma(self.gamma, self.K)
        try:
            self.bp_options()
            self.channel()
        except ValueError as exc:
            raise ConfigurationError(str(exc)) from None
        return self

    def channel(self) -> ChannelParams:
        return ChannelParams(
            bandwidth_hz=self.bandwidth_hz,
            slot_seconds=self.slot_seconds,
            pathloss_exponent=self.pathloss_exponent,
            edge_snr_linear=10.0 ** (self.edge_snr_db / 10.0),
            mc_samples=self.mc_samples,
            mc_seed=self.seed,
        )

    def bp_options(self) -> BPOptions:
        return BPOptions(
            t_max=self.bp_tmax, tol=self.bp_tol, damping=self.bp_damping,
            eta_rule=self.bp_eta_rule, schedule=self.bp_schedule,
        )

    def to_dict(self) -> dict:
        d = asdict(self)
        return {k: list(v) if isinstance(v, tuple) else v for k, v in d.items()}

    @classmethod
    def from_file(cls, path, **overrides) -> "ExperimentConfig":
        return cls.from_mapping(read_config_file(path), **overrides)

    @classmethod
    def from_mapping(cls, values: dict, **overrides) -> "ExperimentConfig":
        known = {f.name: f for f in fields(cls)}
        kwargs = {}
        for key, raw in values.items():
            if key not in known:
                raise ConfigurationError(f"unknown configuration key {key!r}")
            kwargs[key] = _coerce(known[key], raw)
        kwargs.update({k: v for k, v in overrides.items() if v is not None})
        return cls(**kwargs).validate()


def read_config_file(path) -> dict[str, str]:
    """Raw ``key = value`` pairs; ``#`` starts a comment, ``[section]`` headers are ignored."""
    parser = configparser.ConfigParser(inline_comment_prefixes=("#",), interpolation=None)
    parser.optionxform = str
    try:
        parser.read_string("[experiment]\n" + Path(path).read_text())
    except configparser.Error as exc:
        raise ConfigurationError(f"{path}: {exc}") from None
    values = {}
    for section in parser.sections():
        values.update(parser[section])
    return values


def _expand(text: str, kind):
    out = []
    for part in str(text).split(","):
        part = part.strip()
        if not part:
            continue
        if ":" in part:
            a, b, *step = (kind(x) for x in part.split(":"))
            step = step[0] if step else kind(1)
            v = a
            while v <= b + (1e-12 if kind is float else 0):
                out.append(v)
                v += step
        else:
            out.append(kind(part))
    return tuple(out)


def _coerce(f, raw):
    name, text = f.name, str(raw).strip()
    try:
        if name == "strategies":
            return tuple(s.strip() for s in text.split(",") if s.strip())
        if name == "q_values":
            return _expand(text, int)
        if name == "gamma_values":
            return _expand(text, float)
        if name == "approx_prefs":
            low = text.lower()
            if low not in ("1", "0", "true", "false", "yes", "no", "on", "off"):
                raise ValueError(text)
            return low in ("1", "true", "yes", "on")
        if name == "gamma":
            return text
        default = f.default
        if isinstance(default, bool):
            return text.lower() in ("1", "true", "yes", "on")
        if isinstance(default, int):
            return int(text)
        if isinstance(default, float):
            return float(text)
        return text
    except ValueError:
        raise ConfigurationError(f"bad value for {name}: {raw!r}") from None


# --------------------------------------------------------------------------
# scenario construction
# --------------------------------------------------------------------------

@dataclass
class Scenario:
    """Instance, demand and per-scheme evaluators for one sweep value."""

    config: ExperimentConfig
    instance: object
    demand: object
    tables: dict
    _evaluators: dict = field(default_factory=dict)

    def evaluator(self, scheme: Scheme, approx: bool = False) -> DelayEvaluator:
        key = (scheme, approx)
        if key not in self._evaluators:
            demand = self.demand
            if approx:
                demand = demand.with_preferences(cell_average_preferences(self.demand, self.instance))
            self._evaluators[key] = DelayEvaluator(self.instance, demand, self.tables[scheme])
        return self._evaluators[key]


class ScenarioFactory:
    def __init__(self, config: ExperimentConfig):
        self.config = config
        self.channel = config.channel()
        self.instance = build_grid_topology(
            config.M, config.K, cell_radius=config.cell_radius, bs_spacing=config.bs_spacing,
            seed=config.seed, geometry=config.geometry,
        )
        self.tables = {s: build_rate_table(self.instance, self.channel, s) for s in Scheme}

    def scenario(self, gamma) -> Scenario:
        c = self.config
        demand = make_demand(
            c.K, c.N, parse_gamma(gamma, c.K), seed=c.seed + 1,
            file_bits=c.file_bits, backhaul_delay_s=c.backhaul_delay_s,
        )
        return Scenario(c, self.instance, demand, self.tables)


@dataclass
class CellResult:
    strategy: str
    scheme: Scheme
    placement: Placement
    avg_delay_s: float
    hit_prob: float
    calc_count: int | None = None
    bp_rounds: int | None = None
    messages_exchanged: int | None = None
    bp_converged: bool | None = None
    trace: object = None

    def row(self, sweep_value) -> list[str]:
        def opt(v):
            return "" if v is None else str(int(v))
        return [
            str(sweep_value), self.strategy, self.scheme.value, _fmt(self.avg_delay_s), _fmt(self.hit_prob),
            opt(self.calc_count), opt(self.bp_rounds), opt(self.messages_exchanged), opt(self.bp_converged),
        ]


def run_strategy(scenario: Scenario, strategy: str, q: int) -> list[CellResult]:
    """Solve one strategy at capacity ``q``; popularity baselines are scored under both schemes."""
    c = scenario.config
    approx = c.approx_prefs
    if strategy in ("gpc", "lpc"):
        solve_demand = scenario.evaluator(Scheme.COOPERATIVE, approx).demand
        agg = aggregate_popularity(solve_demand, scenario.instance)
        placement = (gpc_place if strategy == "gpc" else lpc_place)(q, agg)
        out = []
        for scheme in Scheme:
            rep = scenario.evaluator(scheme).evaluate(placement)
            out.append(CellResult(strategy, scheme, placement, rep.average_delay_s, rep.hit_probability))
        return out

    kind, scheme_name = strategy.split("-", 1)
    scheme = Scheme.parse(scheme_name)
    truth = scenario.evaluator(scheme)
    solve_ev = scenario.evaluator(scheme, approx)
    if kind == "greedy":
        solver = greedy_place if c.greedy == "eager" else greedy_place_lazy
        placement, trace = solver(solve_ev, q)
        rep = truth.evaluate(placement)
        return [CellResult(strategy, scheme, placement, rep.average_delay_s, rep.hit_probability,
                           calc_count=trace.calculations, trace=trace)]
    res = bp_solve(solve_ev, q, c.bp_options(), report_evaluator=truth)
    rep = truth.evaluate(res.placement)
    tr = res.trace
    return [CellResult(
        strategy, scheme, res.placement, rep.average_delay_s, rep.hit_probability,
        calc_count=int(tr.computed_per_round.sum()) * tr.n_rounds,
        bp_rounds=tr.n_rounds,
        messages_exchanged=int(tr.exchanged_per_round.sum()) * tr.n_rounds,
        bp_converged=tr.converged,
        trace=tr,
    )]


# --------------------------------------------------------------------------
# sweeps
# --------------------------------------------------------------------------

@dataclass
class SweepResult:
    csv_path: Path
    manifest_path: Path
    rows: list[dict]
    trace_paths: list[Path]


def _value_label(v) -> str:
    return str(v) if isinstance(v, int) else format(v, "g")


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def run_sweep(config: ExperimentConfig, out_dir=None) -> SweepResult:
    """Run every strategy at every sweep value and write the result files.

    A failing cell aborts the whole run with the cell identified.
    """
    config.validate()
    out = Path(out_dir if out_dir is not None else config.out)
    traces = out / "traces"
    traces.mkdir(parents=True, exist_ok=True)
    factory = ScenarioFactory(config)

    if config.sweep == "q":
        cells = [(v, config.gamma, v) for v in config.q_values]
    else:
        cells = [(v, v, config.q) for v in config.gamma_values]

    table_rows, trace_paths = [], []
    scenario, last_gamma = None, object()
    for value, gamma, q in cells:
        if gamma != last_gamma:
            scenario, last_gamma = factory.scenario(gamma), gamma
        for strategy in config.strategies:
            try:
                results = run_strategy(scenario, strategy, q)
            except (SolverError, FeasibilityError) as exc:
                raise SolverError(f"{config.sweep}={_value_label(value)}, strategy {strategy}: {exc}") from exc
            for r in results:
                table_rows.append(r.row(_value_label(value)))
                if r.bp_rounds is not None:
                    p = traces / f"{config.name}_{strategy}_{config.sweep}{_value_label(value)}.csv"
                    r.trace.write_csv(p)
                    trace_paths.append(p)

    csv_path = out / f"{config.name}.csv"
    with open(csv_path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(SWEEP_COLUMNS)
        w.writerows(table_rows)

    outputs = {str(p.relative_to(out)): _sha256(p) for p in [csv_path, *trace_paths]}
    settings = {k: v for k, v in config.to_dict().items() if k != "out"}
    manifest = {"tool": "fogcache", "version": __version__, "config": settings, "outputs": outputs}
    manifest_path = out / f"{config.name}.manifest.json"
    manifest_path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    rows = [dict(zip(SWEEP_COLUMNS, r)) for r in table_rows]
    return SweepResult(csv_path, manifest_path, rows, trace_paths)


def read_sweep(path) -> list[dict]:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    if rows and set(SWEEP_COLUMNS) - set(rows[0]):
        raise ConfigurationError(f"{path}: missing columns {sorted(set(SWEEP_COLUMNS) - set(rows[0]))}")
    return rows


def verify_manifest(manifest_path) -> list[str]:
    """Names of outputs whose current hash differs from the manifest."""
    manifest_path = Path(manifest_path)
    data = json.loads(manifest_path.read_text())
    base = manifest_path.parent
    return [name for name, digest in sorted(data["outputs"].items())
            if not (base / name).exists() or _sha256(base / name) != digest]


# --------------------------------------------------------------------------
# comparison report
# --------------------------------------------------------------------------

def _by_key(rows):
    table = {}
    for r in rows:
        table[(r["sweep_value"], r["scheme"], r["strategy"])] = float(r["avg_delay_s"])
    return table


def _gap_row(source, value, scheme, a, b, da, db):
    gap = da - db
    rel = gap / db if db else 0.0
    return [source, value, scheme, a, b, _fmt(da), _fmt(db), _fmt(gap), _fmt(rel)]


def compare_report(paths, out_dir) -> list[list[str]]:
    """Pairwise delay gaps within each sweep file and between files.

    Within a file every pair of strategies sharing a sweep value and scheme
    is compared (``rel_gap`` is relative to ``strategy_b``); BP rows are
    always paired with the greedy row of the same scheme. With several
    files, each later file is compared against the first cell by cell.
    Writes ``summary.csv`` and an aligned ``summary.txt``.
    """
    paths = [Path(p) for p in paths]
    if not paths:
        raise ConfigurationError("no result files to compare")
    tables = [read_sweep(p) for p in paths]
    axes = [sorted({r["sweep_value"] for r in t}, key=float) for t in tables]
    for p, ax in zip(paths[1:], axes[1:]):
        if ax != axes[0]:
            raise ConfigurationError(f"sweep axis of {p} ({ax}) differs from {paths[0]} ({axes[0]})")

    out_rows = []
    for p, rows in zip(paths, tables):
        d = _by_key(rows)
        groups = {}
        for value, scheme, strategy in d:
            groups.setdefault((value, scheme), []).append(strategy)
        for (value, scheme), strategies in sorted(groups.items(), key=lambda kv: (float(kv[0][0]), kv[0][1])):
            for i, a in enumerate(strategies):
                for b in strategies[i + 1:]:
                    out_rows.append(_gap_row(p.name, value, scheme, a, b, d[(value, scheme, a)], d[(value, scheme, b)]))
    first = _by_key(tables[0])
    for p, rows in zip(paths[1:], tables[1:]):
        d = _by_key(rows)
        for key in sorted(set(d) & set(first), key=lambda k: (float(k[0]), k[1], k[2])):
            value, scheme, strategy = key
            out_rows.append(_gap_row(f"{p.name} vs {paths[0].name}", value, scheme, strategy, strategy, d[key], first[key]))

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "summary.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(SUMMARY_COLUMNS)
        w.writerows(out_rows)
    widths = [max(len(str(x)) for x in col) for col in zip(SUMMARY_COLUMNS, *out_rows)]
    lines = ["  ".join(str(x).ljust(w) for x, w in zip(row, widths)).rstrip() for row in [SUMMARY_COLUMNS, *out_rows]]
    (out / "summary.txt").write_text("\n".join(lines) + "\n")
    return out_rows


def with_overrides(config: ExperimentConfig, **changes) -> ExperimentConfig:
    return replace(config, **{k: v for k, v in changes.items() if v is not None}).validate()
