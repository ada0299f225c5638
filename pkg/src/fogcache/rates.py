"""Expected wireless delivery rates per user and serving subset.

Every user ``k`` gets a lookup table indexed by a bitmask over its serving
set ``A_k`` (bit ``b`` set means the ``b``-th BS of ``A_k``, ascending,
holds the file). Rates are ergodic Shannon rates in bits/s averaged over
i.i.d. unit-mean exponential small-scale gains.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from enum import Enum
from pathlib import Path

import numpy as np

from .errors import ConfigurationError
from .model import ChannelParams, NetworkInstance

MAX_SERVING = 8
MIN_DISTANCE = 1.0
FRT_VERSION = 1

_EULER_GAMMA = 0.57721566490153286061


class Scheme(str, Enum):
    COOPERATIVE = "cotc"
    NON_COOPERATIVE = "noncotc"

    @classmethod
    def parse(cls, value) -> "Scheme":
        if isinstance(value, cls):
            return value
        aliases = {
            "cotc": cls.COOPERATIVE, "coop": cls.COOPERATIVE, "beamforming": cls.COOPERATIVE,
            "noncotc": cls.NON_COOPERATIVE, "non-cotc": cls.NON_COOPERATIVE,
            "noncoop": cls.NON_COOPERATIVE, "non-cooperative": cls.NON_COOPERATIVE,
        }
        try:
            return aliases[str(value).lower()]
        except KeyError:
            raise ValueError(f"unknown transmission scheme {value!r}") from None


def link_gain(distance, channel: ChannelParams, cell_radius: float = 150.0):
    """Mean received SNR at ``distance`` meters.

    Power law anchored so that the cell edge sees exactly
    ``channel.edge_snr_linear``. Distances below 1 m are clamped.
    """
    d = np.maximum(np.asarray(distance, dtype=float), MIN_DISTANCE)
    c = channel.edge_snr_linear * (d / cell_radius) ** (-channel.pathloss_exponent)
    return float(c) if np.ndim(c) == 0 else c


def link_gains(instance: NetworkInstance, channel: ChannelParams) -> np.ndarray:
    """K x M mean SNRs, zero where the user is outside the cell."""
    c = link_gain(instance.distances(), channel, instance.cell_radius)
    return np.where(instance.connectivity, c, 0.0)


def scaled_exp1(x: float) -> float:
    """Return ``exp(x) * E1(x)`` for ``x > 0``.

    Power series below 1, Lentz continued fraction above; the scaling keeps
    the continued-fraction branch free of overflow for huge ``x``.
    """
    if not x > 0:
        raise ValueError("x must be positive")
    eps = 1e-16
    if x <= 1.0:
        total = 0.0
        term = 1.0
        k = 1
        while True:
            term *= -x / k
            contrib = term / k
            total += contrib
            if abs(contrib) < eps * abs(total) or k > 200:
                break
            k += 1
        return math.exp(x) * (-_EULER_GAMMA - math.log(x) - total)
    tiny = 1e-300
    b = x + 1.0
    c = 1.0 / tiny
    d = 1.0 / b
    h = d
    for i in range(1, 500):
        an = -float(i * i)
        b += 2.0
        d = 1.0 / (an * d + b)
        c = b + an / c
        delta = c * d
        h *= delta
        if abs(delta - 1.0) < eps:
            break
    return h


def expected_rate_closed(gain: float, channel: ChannelParams) -> float:
    """Ergodic rate of one Rayleigh link with mean SNR ``gain`` (bits/s).

    Uses E{ln(1 + c g)} = exp(1/c) E1(1/c) for g ~ Exp(1).
    """
    if not gain > 0:
        raise ValueError("gain must be positive")
    return channel.bandwidth_hz * scaled_exp1(1.0 / gain) / math.log(2.0)


def expected_rate_mc(gains, channel: ChannelParams, samples: int | None = None, seed=None) -> float:
    """Monte-Carlo ergodic rate of coherent combining over ``gains``."""
    gains = np.asarray(gains, dtype=float).reshape(-1)
    if gains.size == 0:
        return 0.0
    if np.any(gains <= 0):
        raise ValueError("gains must be positive")
    samples = channel.mc_samples if samples is None else samples
    rng = np.random.default_rng(channel.mc_seed if seed is None else seed)
    g = rng.standard_exponential((samples, gains.size))
    snr = (g * gains).sum(axis=1)
    return float(channel.bandwidth_hz * np.mean(np.log2(1.0 + snr)))


def _bits(mask: int) -> list[int]:
    return [b for b in range(mask.bit_length()) if mask >> b & 1]


@dataclass(frozen=True, eq=False)
class ExpectedRateTable:
    """Expected rate for every user and every subset of its serving BSs.

    ``rates[k][mask]`` is in bits/s with ``rates[k][0] == 0``;
    ``fetch_masks[k]`` is the serving subset used to deliver a file that
    first had to be fetched over the backhaul.
    """

    scheme: Scheme
    serving: tuple[tuple[int, ...], ...]
    rates: tuple[np.ndarray, ...]
    fetch_masks: np.ndarray
    gains: np.ndarray
    mc_samples: int
    mc_seed: int
    channel: ChannelParams | None = None

    @property
    def K(self) -> int:
        return len(self.serving)

    def mask_of(self, k: int, subset) -> int:
        pos = {m: b for b, m in enumerate(self.serving[k])}
        mask = 0
        for m in subset:
            if m not in pos:
                raise KeyError(f"BS {m} does not serve user {k}")
            mask |= 1 << pos[m]
        return mask

    def subset_of(self, k: int, mask: int) -> tuple[int, ...]:
        return tuple(self.serving[k][b] for b in _bits(mask))

    def rate(self, k: int, subset) -> float:
        return float(self.rates[k][self.mask_of(k, subset)])

    def fetch_set(self, k: int) -> tuple[int, ...]:
        return self.subset_of(k, int(self.fetch_masks[k]))

    def fetch_rate(self, k: int) -> float:
        return float(self.rates[k][self.fetch_masks[k]])

    def best_singleton(self, k: int, mask: int) -> int:
        """Bit index of the highest-rate single BS within ``mask`` (-1 if empty)."""
        best, best_rate = -1, -1.0
        for b in _bits(mask):
            r = self.rates[k][1 << b]
            if r > best_rate:
                best, best_rate = b, r
        return best


def _user_subset_rates(c: np.ndarray, channel: ChannelParams, scheme: Scheme, rng) -> np.ndarray:
    d = c.size
    rates = np.zeros(1 << d)
    # one draw per (sample, BS) reused by every subset keeps the table monotone sample-wise
    weighted = rng.standard_exponential((channel.mc_samples, d)) * c
    B = channel.bandwidth_hz
    if scheme is Scheme.COOPERATIVE:
        for mask in range(1, 1 << d):
            cols = _bits(mask)
            snr = weighted[:, cols[0]].copy()
            for b in cols[1:]:
                snr += weighted[:, b]
            rates[mask] = B * np.mean(np.log2(1.0 + snr))
    else:
        for b in range(d):
            rates[1 << b] = B * np.mean(np.log2(1.0 + weighted[:, b]))
        for mask in range(1, 1 << d):
            rates[mask] = max(rates[1 << b] for b in _bits(mask))
    return rates


def build_rate_table(instance: NetworkInstance, channel: ChannelParams, scheme) -> ExpectedRateTable:
    """Tabulate expected rates for every user and serving subset.

    User ``k`` draws its fading samples from the substream seeded by
    ``(channel.mc_seed, k)``, so the table does not depend on evaluation
    order.
    """
    scheme = Scheme.parse(scheme)
    serving = instance.serving_sets
    too_many = [k for k, s in enumerate(serving) if len(s) > MAX_SERVING]
    if too_many:
        raise ConfigurationError(
            f"users {too_many[:5]} are covered by more than {MAX_SERVING} BSs; "
            "increase the BS spacing or shrink the cell radius"
        )
    gains = link_gains(instance, channel)
    rates = []
    fetch = np.zeros(instance.K, dtype=np.int64)
    for k, A in enumerate(serving):
        rng = np.random.default_rng([channel.mc_seed, k])
        r = _user_subset_rates(gains[k, list(A)], channel, scheme, rng)
        rates.append(r)
        full = (1 << len(A)) - 1
        if scheme is Scheme.COOPERATIVE:
            fetch[k] = full
        elif A:
            singles = [r[1 << b] for b in range(len(A))]
            fetch[k] = 1 << int(np.argmax(singles))
    return ExpectedRateTable(
        scheme=scheme,
        serving=serving,
        rates=tuple(rates),
        fetch_masks=fetch,
        gains=gains,
        mc_samples=channel.mc_samples,
        mc_seed=channel.mc_seed,
        channel=channel,
    )


# --------------------------------------------------------------------------
# .frt persistence
# --------------------------------------------------------------------------

def _channel_stamp(channel: ChannelParams) -> dict[str, str]:
    return {
        "bandwidth_hz": format(channel.bandwidth_hz, ".17g"),
        "pathloss_exponent": format(channel.pathloss_exponent, ".17g"),
        "edge_snr_linear": format(channel.edge_snr_linear, ".17g"),
        "mc_samples": str(channel.mc_samples),
        "mc_seed": str(channel.mc_seed),
    }


def save_rate_table(path, table: ExpectedRateTable) -> None:
    """Dump a table as text: ``FRT <version>``, stamped header, one line per user.

    User lines read ``k | serving BSs | fetch mask | rates by mask``.
    """
    if table.channel is None:
        raise ValueError("table has no channel stamp")
    lines = [f"FRT {FRT_VERSION}", f"scheme = {table.scheme.value}", f"K = {table.K}"]
    lines += [f"{k} = {v}" for k, v in _channel_stamp(table.channel).items()]
    for k, A in enumerate(table.serving):
        rates = " ".join(format(float(r), ".17g") for r in table.rates[k])
        lines.append(f"{k} | {' '.join(map(str, A))} | {int(table.fetch_masks[k])} | {rates}")
    Path(path).write_text("\n".join(lines) + "\n")


def load_rate_table(path, instance: NetworkInstance, channel: ChannelParams, scheme) -> ExpectedRateTable:
    """Load a dumped table, refusing one built from different parameters."""
    scheme = Scheme.parse(scheme)
    lines = Path(path).read_text().splitlines()
    if not lines or not lines[0].startswith("FRT"):
        raise ConfigurationError(f"{path}: not a rate table")
    version = int(lines[0].split()[1])
    if version != FRT_VERSION:
        raise ConfigurationError(f"{path}: rate table version {version}, reader expects {FRT_VERSION}")
    header = {}
    i = 1
    while i < len(lines) and "|" not in lines[i]:
        key, value = lines[i].split("=", 1)
        header[key.strip()] = value.strip()
        i += 1
    expected = _channel_stamp(channel)
    expected["scheme"] = scheme.value
    expected["K"] = str(instance.K)
    diff = {k: (header.get(k), v) for k, v in expected.items() if header.get(k) != v}
    if diff:
        raise ConfigurationError(f"{path}: table was built with different parameters {diff}")
    serving, rates = [], []
    fetch = np.zeros(instance.K, dtype=np.int64)
    for line in lines[i:]:
        k_s, a_s, f_s, r_s = (part.strip() for part in line.split("|"))
        k = int(k_s)
        serving.append(tuple(int(t) for t in a_s.split()))
        fetch[k] = int(f_s)
        rates.append(np.array([float(t) for t in r_s.split()]))
    if tuple(serving) != instance.serving_sets:
        raise ConfigurationError(f"{path}: serving sets do not match the instance")
    return ExpectedRateTable(
        scheme=scheme,
        serving=tuple(serving),
        rates=tuple(rates),
        fetch_masks=fetch,
        gains=link_gains(instance, channel),
        mc_samples=channel.mc_samples,
        mc_seed=channel.mc_seed,
        channel=channel,
    )
