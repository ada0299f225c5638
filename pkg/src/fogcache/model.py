"""Synthetic Fog-RAN instances: base-station layout, user drop, Zipf demand.

Also holds the ``.fgi`` text format used to persist an instance together
with its demand model.
"""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

FGI_VERSION = 1

DEFAULT_CELL_RADIUS = 150.0
DEFAULT_BS_SPACING = 200.0
DEFAULT_FILE_BITS = 100e6
DEFAULT_BACKHAUL_DELAY = 40.0

GEOMETRIES = ("line", "grid")


class InstanceFormatError(ValueError):
    """Raised when an instance file cannot be parsed."""


class VersionMismatchError(InstanceFormatError):
    def __init__(self, found, expected):
        self.found = found
        self.expected = expected
        super().__init__(f"instance file has version {found}, reader expects version {expected}")


@dataclass(frozen=True)
class ChannelParams:
    """Physical-layer constants shared by every rate computation.

    ``edge_snr_linear`` is the mean received SNR of a user sitting exactly on
    the cell edge; transmit power, noise density and interference are folded
    into it.
    """

    bandwidth_hz: float = 5e6
    slot_seconds: float = 0.02
    pathloss_exponent: float = 3.5
    edge_snr_linear: float = 1.0
    mc_samples: int = 10_000
    mc_seed: int = 0

    def __post_init__(self):
        if not self.bandwidth_hz > 0:
            raise ValueError("bandwidth_hz must be positive")
        if not self.slot_seconds > 0:
            raise ValueError("slot_seconds must be positive")
        if not self.pathloss_exponent > 2:
            raise ValueError("pathloss_exponent must exceed 2")
        if not self.edge_snr_linear > 0:
            raise ValueError("edge_snr_linear must be positive")
        if self.mc_samples < 1:
            raise ValueError("mc_samples must be at least 1")


@dataclass(frozen=True, eq=False)
class NetworkInstance:
    bs_positions: np.ndarray
    user_positions: np.ndarray
    cell_radius: float
    bs_spacing: float
    connectivity: np.ndarray
    seed: int | None = None
    geometry: str = "line"

    def __post_init__(self):
        conn = np.asarray(self.connectivity, dtype=bool).reshape(self.K, self.M)
        object.__setattr__(self, "connectivity", conn)

    @property
    def M(self) -> int:
        return int(np.shape(self.bs_positions)[0])

    @property
    def K(self) -> int:
        return int(np.shape(self.user_positions)[0])

    @property
    def coverage_sets(self) -> tuple[tuple[int, ...], ...]:
        """Users inside each BS's cell (``U_m``), 0-based."""
        return tuple(tuple(int(k) for k in np.flatnonzero(self.connectivity[:, m])) for m in range(self.M))

    @property
    def serving_sets(self) -> tuple[tuple[int, ...], ...]:
        """BSs able to serve each user (``A_k``), ascending, 0-based."""
        return tuple(tuple(int(m) for m in np.flatnonzero(self.connectivity[k])) for k in range(self.K))

    def distances(self) -> np.ndarray:
        """K x M user-to-BS distances in meters."""
        diff = self.user_positions[:, None, :] - self.bs_positions[None, :, :]
        return np.hypot(diff[..., 0], diff[..., 1])


@dataclass(frozen=True, eq=False)
class DemandModel:
    """Per-user file preferences plus the file/backhaul constants.

    ``permutations[k, n]`` is the popularity rank (1-based) that user ``k``
    assigns to file ``n``; ``backhaul_delay_s`` is either a scalar or a
    K x N matrix.
    """

    preferences: np.ndarray
    file_bits: float = DEFAULT_FILE_BITS
    backhaul_delay_s: float | np.ndarray = DEFAULT_BACKHAUL_DELAY
    gammas: np.ndarray | None = None
    permutations: np.ndarray | None = None
    seed: int | None = None

    def __post_init__(self):
        p = np.asarray(self.preferences, dtype=float)
        if p.ndim != 2:
            raise ValueError("preferences must be a K x N matrix")
        if np.any(p < 0):
            raise ValueError("preferences must be non-negative")
        if p.shape[0] and not np.allclose(p.sum(axis=1), 1.0, rtol=0, atol=1e-9):
            raise ValueError("each preference row must sum to 1")
        if not self.file_bits > 0:
            raise ValueError("file_bits must be positive")
        d = np.asarray(self.backhaul_delay_s, dtype=float)
        if d.ndim not in (0, 2) or (d.ndim == 2 and d.shape != p.shape):
            raise ValueError("backhaul_delay_s must be a scalar or a K x N matrix")
        if np.any(d <= 0):
            raise ValueError("backhaul delays must be positive")
        object.__setattr__(self, "preferences", p)

    @property
    def K(self) -> int:
        return self.preferences.shape[0]

    @property
    def N(self) -> int:
        return self.preferences.shape[1]

    def backhaul_matrix(self) -> np.ndarray:
        return np.broadcast_to(np.asarray(self.backhaul_delay_s, dtype=float), self.preferences.shape)

    @property
    def support_sets(self) -> tuple[tuple[int, ...], ...]:
        """Files each user may request (``F_k``)."""
        return tuple(tuple(int(n) for n in np.flatnonzero(row > 0)) for row in self.preferences)

    @property
    def pairs(self) -> list[tuple[int, int]]:
        """All (n, k) with p_nk > 0, ordered by user then file."""
        ks, ns = np.nonzero(self.preferences > 0)
        return [(int(n), int(k)) for k, n in zip(ks, ns)]

    def support_index(self, n: int, k: int) -> int:
        """Position of file ``n`` inside ``F_k`` (0-based)."""
        row = self.preferences[k]
        if row[n] <= 0:
            raise KeyError(f"file {n} is not requested by user {k}")
        return int(np.count_nonzero(row[:n] > 0))

    def with_preferences(self, preferences: np.ndarray) -> "DemandModel":
        return DemandModel(
            preferences=preferences,
            file_bits=self.file_bits,
            backhaul_delay_s=self.backhaul_delay_s,
            gammas=self.gammas,
            permutations=self.permutations,
            seed=self.seed,
        )


@dataclass(frozen=True, eq=False)
class PopularityAggregates:
    global_: np.ndarray
    local: np.ndarray
    empty_cells: tuple[int, ...] = field(default=())


def _bs_layout(M: int, spacing: float, geometry: str) -> np.ndarray:
    if geometry == "line":
        return np.column_stack([np.arange(M) * spacing, np.zeros(M)])
    if geometry == "grid":
        cols = math.ceil(math.sqrt(M))
        idx = np.arange(M)
        return np.column_stack([(idx % cols) * spacing, (idx // cols) * spacing])
    raise ValueError(f"unknown geometry {geometry!r}; expected one of {GEOMETRIES}")


def connectivity_matrix(user_positions, bs_positions, cell_radius) -> np.ndarray:
    diff = np.asarray(user_positions)[:, None, :] - np.asarray(bs_positions)[None, :, :]
    return np.hypot(diff[..., 0], diff[..., 1]) <= cell_radius


def instance_from_positions(bs_positions, user_positions, cell_radius: float = 150.0,
                            bs_spacing: float = 200.0, seed: int | None = None) -> NetworkInstance:
    """Instance with hand-placed BSs and users; coverage from the cell radius."""
    bs = np.asarray(bs_positions, dtype=float).reshape(-1, 2)
    users = np.asarray(user_positions, dtype=float).reshape(-1, 2)
    return NetworkInstance(
        bs_positions=bs,
        user_positions=users,
        cell_radius=cell_radius,
        bs_spacing=bs_spacing,
        connectivity=connectivity_matrix(users, bs, cell_radius),
        seed=seed,
        geometry="custom",
    )


def build_grid_topology(
    M: int,
    K: int,
    cell_radius: float = DEFAULT_CELL_RADIUS,
    bs_spacing: float = DEFAULT_BS_SPACING,
    seed: int = 0,
    geometry: str = "line",
    max_batches: int = 10_000,
) -> NetworkInstance:
    """Place ``M`` BSs and drop ``K`` users uniformly over the union of cells.

    Users are drawn from the bounding box and rejected until they land in
    at least one cell, so every accepted user has a serving BS.
    """
    if M < 1 or K < 1:
        raise ValueError("M and K must be at least 1")
    if not cell_radius > 0 or not bs_spacing > 0:
        raise ValueError("cell_radius and bs_spacing must be positive")
    if M > 1 and not cell_radius > bs_spacing / 2:
        raise ValueError("cell_radius must exceed half the BS spacing so neighbouring cells overlap")

    bs = _bs_layout(M, bs_spacing, geometry)
    lo = bs.min(axis=0) - cell_radius
    hi = bs.max(axis=0) + cell_radius
    rng = np.random.default_rng(seed)

    accepted = []
    count = 0
    batch = max(64, 2 * K)
    for _ in range(max_batches):
        cand = rng.uniform(lo, hi, size=(batch, 2))
        inside = connectivity_matrix(cand, bs, cell_radius).any(axis=1)
        accepted.append(cand[inside])
        count += int(inside.sum())
        if count >= K:
            break
    else:
        raise RuntimeError(f"user drop failed: only {count} of {K} users placed after {max_batches} batches")

    users = np.concatenate(accepted)[:K]
    conn = connectivity_matrix(users, bs, cell_radius)
    return NetworkInstance(
        bs_positions=bs,
        user_positions=users,
        cell_radius=float(cell_radius),
        bs_spacing=float(bs_spacing),
        connectivity=conn,
        seed=seed,
        geometry=geometry,
    )


def gamma_ramp(K: int, offset: float, slope: float) -> np.ndarray:
    """Per-user skew ``offset + slope * k / K`` for k = 1..K."""
    k = np.arange(1, K + 1)
    return offset + slope * k / K


def zipf_preferences(N: int, gammas, seed: int = 0) -> tuple[np.ndarray, np.ndarray]:
    """Zipf preferences over a private random ranking per user.

    Returns ``(preferences, ranks)`` where ``ranks[k, n]`` is the 1-based
    rank user ``k`` gives file ``n`` and
    ``preferences[k, n] = ranks[k, n] ** -gamma_k / sum_r r ** -gamma_k``.
    """
    if N < 1:
        raise ValueError("N must be at least 1")
    gammas = np.atleast_1d(np.asarray(gammas, dtype=float))
    if np.any(gammas < 0):
        raise ValueError("Zipf parameters must be non-negative")
    rng = np.random.default_rng(seed)
    K = gammas.size
    ranks = np.empty((K, N), dtype=np.int64)
    prefs = np.empty((K, N))
    r = np.arange(1, N + 1, dtype=float)
    for k in range(K):
        ranks[k] = rng.permutation(N) + 1
        w = r ** -gammas[k]
        prefs[k] = w[ranks[k] - 1] / w.sum()
    return prefs, ranks


def make_demand(
    K: int,
    N: int,
    gammas,
    seed: int = 0,
    file_bits: float = DEFAULT_FILE_BITS,
    backhaul_delay_s: float | np.ndarray = DEFAULT_BACKHAUL_DELAY,
) -> DemandModel:
    gammas = np.broadcast_to(np.asarray(gammas, dtype=float), (K,)).copy()
    prefs, ranks = zipf_preferences(N, gammas, seed)
    return DemandModel(
        preferences=prefs,
        file_bits=file_bits,
        backhaul_delay_s=backhaul_delay_s,
        gammas=gammas,
        permutations=ranks,
        seed=seed,
    )


def aggregate_popularity(demand: DemandModel, instance: NetworkInstance) -> PopularityAggregates:
    """Network-wide and per-cell average preferences.

    A cell without users gets a uniform local row; its index is reported in
    ``empty_cells`` and a warning is emitted.
    """
    p = demand.preferences
    N = demand.N
    glob = p.mean(axis=0) if demand.K else np.full(N, 1.0 / N)
    local = np.empty((instance.M, N))
    empty = []
    for m, users in enumerate(instance.coverage_sets):
        if users:
            local[m] = p[list(users)].mean(axis=0)
        else:
            local[m] = 1.0 / N
            empty.append(m)
    if empty:
        warnings.warn(f"cells without users get uniform local popularity: {empty}", stacklevel=2)
    return PopularityAggregates(global_=glob, local=local, empty_cells=tuple(empty))


def owner_bs(instance: NetworkInstance) -> np.ndarray:
    """Lowest-index serving BS of every user."""
    return np.array([s[0] for s in instance.serving_sets], dtype=int)


def cell_average_preferences(demand: DemandModel, instance: NetworkInstance) -> np.ndarray:
    """Replace each user's row by the average row of its owner BS's cell."""
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        agg = aggregate_popularity(demand, instance)
    return agg.local[owner_bs(instance)]


# --------------------------------------------------------------------------
# .fgi persistence
# --------------------------------------------------------------------------

def _fmt(x) -> str:
    return format(float(x), ".17g")


def _write_matrix(lines: list[str], name: str, arr: np.ndarray, integer=False):
    arr = np.asarray(arr)
    if arr.ndim == 1:
        arr = arr[None, :] if arr.size else arr.reshape(0, 0)
    rows, cols = arr.shape
    lines.append(f"[{name}] {rows} {cols}")
    for row in arr:
        lines.append(" ".join(str(int(v)) if integer else _fmt(v) for v in row))


def save_instance(path, instance: NetworkInstance, demand: DemandModel) -> None:
    """Write instance and demand to a versioned ``.fgi`` text file.

    Layout: ``FGI <version>`` magic line, ``key = value`` header lines, then
    ``[name] rows cols`` blocks of whitespace-separated values.
    """
    lines = [f"FGI {FGI_VERSION}"]
    header = {
        "M": instance.M,
        "K": instance.K,
        "N": demand.N,
        "cell_radius": _fmt(instance.cell_radius),
        "bs_spacing": _fmt(instance.bs_spacing),
        "geometry": instance.geometry,
        "instance_seed": "none" if instance.seed is None else int(instance.seed),
        "demand_seed": "none" if demand.seed is None else int(demand.seed),
        "file_bits": _fmt(demand.file_bits),
    }
    scalar_backhaul = np.ndim(demand.backhaul_delay_s) == 0
    header["backhaul"] = _fmt(demand.backhaul_delay_s) if scalar_backhaul else "matrix"
    lines += [f"{k} = {v}" for k, v in header.items()]
    _write_matrix(lines, "bs_positions", instance.bs_positions)
    _write_matrix(lines, "user_positions", instance.user_positions.reshape(instance.K, 2))
    _write_matrix(lines, "connectivity", instance.connectivity.astype(int), integer=True)
    _write_matrix(lines, "preferences", demand.preferences)
    if demand.gammas is not None:
        _write_matrix(lines, "gammas", np.asarray(demand.gammas)[None, :])
    if demand.permutations is not None:
        _write_matrix(lines, "permutations", demand.permutations, integer=True)
    if not scalar_backhaul:
        _write_matrix(lines, "backhaul_delay", demand.backhaul_delay_s)
    Path(path).write_text("\n".join(lines) + "\n")


def _parse_blocks(lines: list[str], start: int, path) -> dict[str, np.ndarray]:
    blocks = {}
    i = start
    while i < len(lines):
        line = lines[i].strip()
        i += 1
        if not line:
            continue
        if not line.startswith("["):
            raise InstanceFormatError(f"{path}: expected a block header, got {line!r}")
        try:
            name, dims = line[1:].split("]", 1)
            rows, cols = (int(t) for t in dims.split())
        except ValueError as exc:
            raise InstanceFormatError(f"{path}: bad block header {line!r}") from exc
        if i + rows > len(lines):
            raise InstanceFormatError(f"{path}: block [{name}] truncated ({len(lines) - i} of {rows} rows)")
        body = lines[i:i + rows]
        i += rows
        try:
            data = np.array([[float(t) for t in row.split()] for row in body], dtype=float).reshape(rows, cols)
        except ValueError as exc:
            raise InstanceFormatError(f"{path}: block [{name}] is malformed") from exc
        blocks[name] = data
    return blocks


def load_instance(path) -> tuple[NetworkInstance, DemandModel]:
    text = Path(path).read_text()
    lines = text.splitlines()
    if not lines or not lines[0].startswith("FGI"):
        raise InstanceFormatError(f"{path}: missing FGI header")
    try:
        version = int(lines[0].split()[1])
    except (IndexError, ValueError) as exc:
        raise InstanceFormatError(f"{path}: unreadable version in {lines[0]!r}") from exc
    if version != FGI_VERSION:
        raise VersionMismatchError(version, FGI_VERSION)

    header = {}
    i = 1
    while i < len(lines) and "=" in lines[i] and not lines[i].startswith("["):
        key, value = lines[i].split("=", 1)
        header[key.strip()] = value.strip()
        i += 1
    blocks = _parse_blocks(lines, i, path)

    required = ("M", "K", "N", "cell_radius", "bs_spacing", "geometry", "file_bits", "backhaul")
    missing = [k for k in required if k not in header]
    missing += [b for b in ("bs_positions", "user_positions", "connectivity", "preferences") if b not in blocks]
    if missing:
        raise InstanceFormatError(f"{path}: missing fields {missing}")

    def seed_of(key):
        v = header.get(key, "none")
        return None if v == "none" else int(v)

    M, K, N = int(header["M"]), int(header["K"]), int(header["N"])
    users = blocks["user_positions"].reshape(K, 2)
    instance = NetworkInstance(
        bs_positions=blocks["bs_positions"].reshape(M, 2),
        user_positions=users,
        cell_radius=float(header["cell_radius"]),
        bs_spacing=float(header["bs_spacing"]),
        connectivity=blocks["connectivity"].reshape(K, M).astype(bool),
        seed=seed_of("instance_seed"),
        geometry=header["geometry"],
    )
    if header["backhaul"] == "matrix":
        if "backhaul_delay" not in blocks:
            raise InstanceFormatError(f"{path}: backhaul declared as matrix but block missing")
        backhaul = blocks["backhaul_delay"]
    else:
        backhaul = float(header["backhaul"])
    demand = DemandModel(
        preferences=blocks["preferences"].reshape(K, N),
        file_bits=float(header["file_bits"]),
        backhaul_delay_s=backhaul,
        gammas=blocks["gammas"].reshape(-1) if "gammas" in blocks else None,
        permutations=blocks["permutations"].astype(np.int64) if "permutations" in blocks else None,
        seed=seed_of("demand_seed"),
    )
    return instance, demand
