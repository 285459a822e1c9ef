"""Scenario construction: synthetic ergodic systems and packet-log driven traces.

Units: DTJ traffic is measured in Mbit; one Mbit of DSJ traffic needs one
capacity unit (configurable via ``dsj_capacity_per_unit``).
"""
from __future__ import annotations

import csv
import gzip
import io
import logging
import math
import os
from dataclasses import asdict, dataclass, field
from importlib import resources

import numpy as np

from .controllers import StateDistribution
from .model import DomainError, IdcSpec, JobClass, PowerModel, SystemState, Topology
from .sim import Scenario, substream

log = logging.getLogger(__name__)

LOAD_RATIOS = (0.5, 1.0, 1.5, 2.0, 2.5, 3.0, 3.5)
THRESHOLDS_MB = (10.0, 50.0, 100.0, 150.0)
BITS_PER_BYTE = 8
MBIT = 1e6


class TraceError(ValueError):
    """Malformed or incomplete input file."""


def _check_range(name, rng):
    lo, hi = rng
    if not (0 <= lo <= hi) or not math.isfinite(hi):
        raise DomainError(f"{name} must be an ordered nonnegative range, got {rng}")


def _draw_topology(rng, n_idcs, n_jobs, rate_range):
    """Random serving sets (each IDC with probability 1/2, never empty), origins and rates.

    The origin is drawn uniformly from the serving set: with link bandwidth
    far below the mean rates, a job whose origin could not serve it would be
    unstabilizable by construction.
    """
    jobs, rates = [], {}
    for j in range(n_jobs):
        gamma = []
        while not gamma:
            gamma = [i for i in range(n_idcs) if rng.random() < 0.5]
        origin = int(gamma[rng.integers(len(gamma))])
        jobs.append((origin, tuple(gamma)))
        for i in gamma:
            rates[(i, j)] = float(rng.uniform(*rate_range))
    return jobs, rates


def _build_topology(jobs, rates, lam, bound, k_max):
    return Topology([IdcSpec(i, float(k)) for i, k in enumerate(k_max)],
                    [JobClass(j, o, g, float(lam[j]), float(bound[j])) for j, (o, g) in enumerate(jobs)],
                    rates)


# ---------------------------------------------------------------------------
# synthetic ergodic scenarios


@dataclass(frozen=True)
class SyntheticConfig:
    n_idcs: int = 5
    n_jobs: int = 10
    n_states: int = 100
    capacity_range: tuple[float, float] = (10000.0, 15000.0)
    bandwidth_range: tuple[float, float] = (3000.0, 4000.0)
    price_range: tuple[float, float] = (1.0, 10.0)
    dsj_fraction_range: tuple[float, float] = (0.0, 0.4)
    load_ratio: float = 1.0
    idle_power: float = 0.5
    rate_range: tuple[float, float] = (5.0, 10.0)
    seed: int = 0

    def __post_init__(self):
        for name in ("capacity_range", "bandwidth_range", "price_range", "dsj_fraction_range", "rate_range"):
            object.__setattr__(self, name, tuple(float(v) for v in getattr(self, name)))
            _check_range(name, getattr(self, name))
        if self.dsj_fraction_range[1] > 1:
            raise DomainError("DSJ fraction cannot exceed 1")
        if self.rate_range[0] <= 0:
            raise DomainError("unit service rates must be positive")
        if min(self.n_idcs, self.n_jobs, self.n_states) < 1:
            raise DomainError("need at least one IDC, job and state")
        if self.load_ratio < 0:
            raise DomainError("load ratio must be nonnegative")
        if not 0 <= self.idle_power < 1:
            raise DomainError("idle power must lie in [0, 1)")

    def to_dict(self) -> dict:
        return {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(self).items()}


def gen_synthetic(cfg: SyntheticConfig, horizon: int = 100_000, seed: int | None = None) -> Scenario:
    """Ergodic scenario: uniform distribution over ``n_states`` random states.

    Mean rates are equal across jobs in capacity terms and scaled so total DTJ
    capacity demand / expected total DSJ demand = ``load_ratio``; arrivals are
    uniform on [0, 2 lambda_j].
    """
    rng = substream(cfg.seed, "scenario")
    n = cfg.n_idcs
    states = []
    for _ in range(cfg.n_states):
        k = np.round(rng.uniform(*cfg.capacity_range, size=n))
        price = rng.uniform(*cfg.price_range, size=n)
        s0 = k * rng.uniform(*cfg.dsj_fraction_range, size=n)
        bw = rng.uniform(*cfg.bandwidth_range, size=(n, n))
        np.fill_diagonal(bw, 0.0)
        states.append(SystemState(k, price, s0, bw))
    jobs, rates = _draw_topology(rng, n, cfg.n_jobs, cfg.rate_range)

    dsj = float(np.mean([st.dsj_capacity.sum() for st in states]))
    resid = float(np.mean([st.residual.sum() for st in states]))
    per_job = cfg.load_ratio * dsj / cfg.n_jobs          # capacity units per job
    mean_r = np.array([np.mean([rates[(i, j)] for i in g]) for j, (_, g) in enumerate(jobs)])
    lam = per_job * mean_r
    if cfg.load_ratio * dsj > resid:
        log.warning("DTJ demand %.0f exceeds mean residual capacity %.0f; expect instability",
                    cfg.load_ratio * dsj, resid)
    topo = _build_topology(jobs, rates, lam, 2.0 * lam, np.full(n, cfg.capacity_range[1]))
    return Scenario(topo, horizon, cfg.seed if seed is None else seed,
                    PowerModel(1.0 - cfg.idle_power), StateDistribution.uniform(states), lam=lam,
                    name=f"synthetic-ratio{cfg.load_ratio:g}")


# ---------------------------------------------------------------------------
# packet logs and prices


@dataclass(frozen=True)
class PacketLogConfig:
    slot_length: float = 20.0               # seconds
    size_threshold: float = 10.0            # Mbit; larger packets are DTJ traffic
    dsj_capacity_per_unit: float = 1.0      # capacity units per Mbit of DSJ traffic
    rate_mean: float = 7.5                  # mean DTJ unit rate r_ij
    threshold_is_dsj: bool = True           # packets exactly at the threshold count as DSJ
    origin: float = 0.0                     # time of slot 0's left edge (seconds)

    def __post_init__(self):
        if not self.slot_length > 0:
            raise DomainError("slot length must be positive")
        if not self.size_threshold > 0:
            raise DomainError("size threshold must be positive")
        if not self.dsj_capacity_per_unit > 0 or not self.rate_mean > 0:
            raise DomainError("unit conversions must be positive")


@dataclass
class PacketSeries:
    dsj: np.ndarray   # capacity units per slot
    dtj: np.ndarray   # Mbit per slot
    raw: np.ndarray   # Mbit per slot, all packets

    @property
    def n_slots(self) -> int:
        return self.dsj.shape[0]


def _open_text(source):
    if hasattr(source, "read"):
        return source, False
    path = os.fspath(source)
    if path.endswith(".gz"):
        return io.TextIOWrapper(gzip.open(path, "rb"), encoding="utf-8", newline=""), True
    return open(path, encoding="utf-8", newline=""), True


def read_packets(source) -> tuple[np.ndarray, np.ndarray]:
    """(timestamps in s, sizes in bytes) from a ``timestamp_s,size_bytes`` CSV (header optional)."""
    fh, close = _open_text(source)
    ts, sizes = [], []
    try:
        for lineno, row in enumerate(csv.reader(fh), start=1):
            if not row or (len(row) == 1 and not row[0].strip()):
                continue
            if lineno == 1 and row[0].strip().lower() == "timestamp_s":
                continue
            if len(row) != 2:
                raise TraceError(f"line {lineno}: expected 2 fields, got {len(row)}")
            try:
                t = float(row[0])
                b = int(row[1])
            except ValueError:
                raise TraceError(f"line {lineno}: cannot parse {row!r}") from None
            if not math.isfinite(t) or t < 0 or b < 0:
                raise TraceError(f"line {lineno}: timestamp and size must be finite and nonnegative")
            ts.append(t)
            sizes.append(b)
    finally:
        if close:
            fh.close()
    if not ts:
        raise TraceError("packet log is empty")
    return np.array(ts), np.array(sizes, dtype=np.int64)


def ingest_packet_log(source, cfg: PacketLogConfig = PacketLogConfig()) -> PacketSeries:
    """Bucket packets into slots and split them into DSJ demand and DTJ arrivals.

    Slot k covers [origin + k L, origin + (k+1) L); the series runs from slot 0
    to the slot of the latest packet.
    """
    ts, size_b = read_packets(source)
    if np.any(ts < cfg.origin):
        raise TraceError("packet timestamps precede the configured origin")
    order = np.argsort(ts, kind="stable")
    ts, size_b = ts[order], size_b[order]
    slot = np.floor((ts - cfg.origin) / cfg.slot_length).astype(np.int64)
    n = int(slot.max()) + 1
    mbit = size_b * BITS_PER_BYTE / MBIT
    small = mbit <= cfg.size_threshold if cfg.threshold_is_dsj else mbit < cfg.size_threshold
    dsj = np.bincount(slot[small], weights=mbit[small], minlength=n)
    dtj = np.bincount(slot[~small], weights=mbit[~small], minlength=n)
    raw = np.bincount(slot, weights=mbit, minlength=n)
    return PacketSeries(dsj * cfg.dsj_capacity_per_unit, dtj, raw)


def load_prices(source, mapping, n_slots: int, slot_length: float = 20.0, hour_offset: int = 0) -> np.ndarray:
    """Per-IDC per-slot prices from a ``region,hour,price`` CSV, held constant within each hour.

    ``mapping[i]`` names the region feeding IDC i. Returns an (N, n_slots) array.
    """
    fh, close = _open_text(source)
    table: dict[str, dict[int, float]] = {}
    try:
        for lineno, row in enumerate(csv.reader(fh), start=1):
            if not row:
                continue
            if lineno == 1 and row[0].strip().lower() == "region":
                continue
            if len(row) != 3:
                raise TraceError(f"line {lineno}: expected 3 fields, got {len(row)}")
            try:
                region, hour, price = row[0].strip(), int(row[1]), float(row[2])
            except ValueError:
                raise TraceError(f"line {lineno}: cannot parse {row!r}") from None
            if hour < 0 or not math.isfinite(price) or price < 0:
                raise TraceError(f"line {lineno}: hour and price must be nonnegative")
            table.setdefault(region, {})[hour] = price
    finally:
        if close:
            fh.close()
    per_hour = 3600.0 / slot_length
    hours = (hour_offset + np.floor(np.arange(n_slots) / per_hour)).astype(int)
    out = np.zeros((len(mapping), n_slots))
    for i, region in enumerate(mapping):
        if region not in table:
            raise TraceError(f"unknown region {region!r}")
        missing = sorted(set(hours.tolist()) - set(table[region]))
        if missing:
            raise TraceError(f"region {region!r} has no price for hours {missing[:5]}")
        out[i] = [table[region][h] for h in hours]
    return out


# ---------------------------------------------------------------------------
# trace scenarios


REGIONS = ("CAISO", "ERCOT", "MISO", "NYISO", "PJM")


@dataclass(frozen=True)
class TraceConfig:
    packet: PacketLogConfig = field(default_factory=PacketLogConfig)
    n_idcs: int = 5
    n_jobs: int = 10
    capacity_range: tuple[float, float] = (1000.0, 1200.0)
    bandwidth_range: tuple[float, float] = (1000.0, 1500.0)
    rate_range: tuple[float, float] = (5.0, 10.0)
    regions: tuple[str, ...] = REGIONS
    job_blocks: tuple[int, ...] | None = None   # large-packet block feeding each job
    dsj_blocks: tuple[int, ...] | None = None   # small-packet block feeding each IDC
    hour_offset: int = 0
    idle_power: float = 0.5
    seed: int = 0

    def __post_init__(self):
        for name in ("capacity_range", "bandwidth_range", "rate_range"):
            object.__setattr__(self, name, tuple(float(v) for v in getattr(self, name)))
            _check_range(name, getattr(self, name))
        object.__setattr__(self, "regions", tuple(self.regions))
        if len(self.regions) != self.n_idcs:
            raise DomainError("one price region per IDC is required")
        for name, count in (("job_blocks", self.n_jobs), ("dsj_blocks", self.n_idcs)):
            v = getattr(self, name)
            if v is not None:
                v = tuple(int(b) for b in v)
                if len(v) != count or min(v) < 0:
                    raise DomainError(f"{name} needs {count} nonnegative block indices")
                object.__setattr__(self, name, v)

    @property
    def n_blocks(self) -> int:
        used = list(self.job_blocks or range(self.n_jobs)) + list(self.dsj_blocks or range(self.n_idcs))
        return max(used) + 1


def build_trace_scenario(packets: PacketSeries, prices_source, cfg: TraceConfig = TraceConfig(),
                         horizon: int | None = None) -> Scenario:
    """Multi-IDC scenario from one packet log.

    The log is cut into equal contiguous blocks; large-packet blocks become the
    DTJ arrival series and small-packet blocks the per-IDC DSJ demand.
    """
    nb = cfg.n_blocks
    length = packets.n_slots // nb
    if length < 1:
        raise TraceError(f"packet log has {packets.n_slots} slots, fewer than {nb} blocks")
    T = length if horizon is None else int(horizon)
    if T > length:
        raise DomainError(f"horizon {T} exceeds the block length {length}")
    jb = cfg.job_blocks or tuple(range(cfg.n_jobs))
    db = cfg.dsj_blocks or tuple(range(cfg.n_idcs))
    block = lambda series, b: series[b * length:b * length + T]
    arrivals = np.stack([block(packets.dtj, b) for b in jb], axis=1)
    dsj = np.stack([block(packets.dsj, b) for b in db], axis=0)

    rng = substream(cfg.seed, "scenario")
    n = cfg.n_idcs
    k = np.round(rng.uniform(*cfg.capacity_range, size=n))
    bw = rng.uniform(*cfg.bandwidth_range, size=(n, n))
    np.fill_diagonal(bw, 0.0)
    jobs, rates = _draw_topology(rng, n, cfg.n_jobs, cfg.rate_range)
    price = load_prices(prices_source, cfg.regions, T, cfg.packet.slot_length, cfg.hour_offset)

    over = dsj > k[:, None]
    if np.any(over):
        log.warning("DSJ demand above active servers in %d IDC-slots; clipped", int(over.sum()))
    s0 = np.minimum(dsj, k[:, None])
    series = [SystemState(k, price[:, t], s0[:, t], bw) for t in range(T)]
    lam = arrivals.mean(axis=0)
    topo = _build_topology(jobs, rates, lam, arrivals.max(axis=0), k)
    return Scenario(topo, T, cfg.seed, PowerModel(1.0 - cfg.idle_power), state_series=series,
                    arrivals=arrivals, lam=lam, name=f"trace-threshold{cfg.packet.size_threshold:g}")


# ---------------------------------------------------------------------------
# bundled example data


def data_path(name: str) -> str:
    return str(resources.files("troughfill") / "data" / name)


# Volume shares of packet-size bands (Mbit): the DTJ share of traffic is about
# 90%, 70%, 50% and 10% at thresholds 10, 50, 100 and 150 Mbit.
_BANDS = ((0.0, 10.0, 0.10), (10.0, 50.0, 0.20), (50.0, 100.0, 0.20), (100.0, 150.0, 0.40),
          (150.0, 200.0, 0.10))


def synth_packet_log(n_slots: int = 3600, slot_length: float = 20.0, mbit_per_slot: float = 1000.0,
                     burst_sigma: float = 0.5, burst_corr: float = 0.98,
                     seed: int = 2024) -> list[tuple[float, int]]:
    """Deterministic synthetic packet log (timestamp_s, size_bytes).

    Volume follows a daily cycle times a slowly varying lognormal factor
    (AR(1) in log space, unit mean), so busy periods load single IDCs close
    to their capacity.
    """
    rng = np.random.default_rng(seed)
    mids = np.array([(lo + hi) / 2 for lo, hi, _ in _BANDS])
    counts = np.array([share for _, _, share in _BANDS]) / mids
    probs = counts / counts.sum()
    mean_size = float(probs @ mids)
    day = 86400.0 / slot_length
    x = 0.0
    rows = []
    for t in range(n_slots):
        x = burst_corr * x + math.sqrt(1.0 - burst_corr ** 2) * rng.normal()
        level = (mbit_per_slot * (1.0 + 0.5 * math.sin(2 * math.pi * t / day))
                 * math.exp(burst_sigma * x - burst_sigma ** 2 / 2))
        n = rng.poisson(level / mean_size)
        band = rng.choice(len(_BANDS), size=n, p=probs)
        lo = np.array([_BANDS[b][0] for b in band])
        hi = np.array([_BANDS[b][1] for b in band])
        mb = rng.uniform(lo, hi)
        stamps = np.sort(t * slot_length + rng.uniform(0, slot_length, size=n))
        for s, m in zip(stamps, mb):
            rows.append((round(float(s), 3), max(1, int(round(m * MBIT / BITS_PER_BYTE)))))
    rows.sort(key=lambda r: r[0])
    return rows


def synth_prices(hours: int = 24, seed: int = 7) -> list[tuple[str, int, float]]:
    """Deterministic hourly prices for the five regions (daily cycle plus noise)."""
    rng = np.random.default_rng(seed)
    out = []
    for k, region in enumerate(REGIONS):
        base = 3.0 + 1.5 * k
        for h in range(hours):
            p = base * (1.0 + 0.4 * math.sin(2 * math.pi * (h - 6 - k) / 24)) + rng.uniform(0, 1)
            out.append((region, h, round(max(p, 0.1), 4)))
    return out


def write_bundled_data(directory: str) -> None:
    """Regenerate the bundled packet log and price file (byte-identical across runs)."""
    os.makedirs(directory, exist_ok=True)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["timestamp_s", "size_bytes"])
    for ts, b in synth_packet_log():
        w.writerow([f"{ts:.3f}", b])
    with open(os.path.join(directory, "packets.csv.gz"), "wb") as fh:
        # fixed mtime keeps the archive byte-identical
        with gzip.GzipFile(fileobj=fh, mode="wb", mtime=0, filename="") as gz:
            gz.write(buf.getvalue().encode())
    with open(os.path.join(directory, "prices.csv"), "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["region", "hour", "price"])
        for region, h, p in synth_prices():
            w.writerow([region, h, repr(p)])
