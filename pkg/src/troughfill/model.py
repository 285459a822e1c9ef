"""Domain types and the cost / queue formulas every controller is scored against.

Units: capacity in server-speed units (one server at full speed = 1), traffic in
job units per slot, prices in cost per power unit per slot.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from functools import cached_property
from typing import Mapping, Sequence

import numpy as np

log = logging.getLogger(__name__)


class DomainError(ValueError):
    """An argument lies outside the domain of a formula."""


class InfeasibleAllocation(ValueError):
    """An allocation violates capacity, bandwidth or serving-set constraints."""

    def __init__(self, violations: Sequence[str]):
        self.violations = list(violations)
        super().__init__("infeasible allocation: " + "; ".join(self.violations))


def _frozen(a, dtype=float) -> np.ndarray:
    arr = np.array(a, dtype=dtype, copy=True)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class PowerModel:
    rho: float = 0.5
    nu: float = 2.0

    def __post_init__(self):
        if not 0.0 < self.rho <= 1.0:
            raise DomainError(f"rho must lie in (0, 1], got {self.rho}")
        if self.nu < 1.0:
            raise DomainError(f"nu must be >= 1, got {self.nu}")

    @property
    def idle(self) -> float:
        return 1.0 - self.rho


@dataclass(frozen=True)
class IdcSpec:
    id: int
    k_max: float

    def __post_init__(self):
        if not self.k_max > 0:
            raise DomainError(f"IDC {self.id}: k_max must be positive")


@dataclass(frozen=True)
class JobClass:
    id: int
    origin: int
    serving_set: tuple[int, ...]
    mean_rate: float
    arrival_bound: float

    def __post_init__(self):
        object.__setattr__(self, "serving_set", tuple(sorted(set(int(i) for i in self.serving_set))))
        if not self.serving_set:
            raise DomainError(f"job {self.id}: empty serving set")
        if not 0.0 <= self.mean_rate <= self.arrival_bound:
            raise DomainError(
                f"job {self.id}: need 0 <= mean_rate <= arrival_bound, "
                f"got {self.mean_rate}, {self.arrival_bound}")


def _default_segments() -> tuple[tuple[float, float], ...]:
    slopes = (1.0, 3.0, 10.0, 70.0, 500.0, 5000.0)
    breaks = (1.0 / 3.0, 2.0 / 3.0, 0.9, 1.0, 1.1)
    segs = [(slopes[0], 0.0)]
    for a, u in zip(slopes[1:], breaks):
        a_prev, b_prev = segs[-1]
        segs.append((a, b_prev + (a_prev - a) * u))
    return tuple(segs)


@dataclass(frozen=True)
class ShiftCostModel:
    """Convex piecewise-linear link cost, the max of affine pieces a*u + b in utilization u."""

    segments: tuple[tuple[float, float], ...] = field(default_factory=_default_segments)

    def __post_init__(self):
        segs = tuple((float(a), float(b)) for a, b in self.segments)
        if not segs:
            raise DomainError("shift cost needs at least one segment")
        slopes = [a for a, _ in segs]
        if any(s2 < s1 for s1, s2 in zip(slopes, slopes[1:])):
            raise DomainError("shift cost slopes must be nondecreasing")
        object.__setattr__(self, "segments", segs)

    @classmethod
    def default(cls) -> "ShiftCostModel":
        return cls()

    @cached_property
    def slopes(self) -> np.ndarray:
        return _frozen([a for a, _ in self.segments])

    @cached_property
    def intercepts(self) -> np.ndarray:
        return _frozen([b for _, b in self.segments])

    @property
    def at_zero(self) -> float:
        return float(self.intercepts.max())

    def __call__(self, u):
        u = np.asarray(u, dtype=float)
        if np.any(u < 0):
            raise DomainError("utilization must be nonnegative")
        vals = np.multiply.outer(u, self.slopes) + self.intercepts
        out = vals.max(axis=-1)
        return float(out) if out.ndim == 0 else out

    def envelope(self, u_max: float = 1.0) -> list[int]:
        """Indices of segments that attain the max somewhere on [0, u_max)."""
        a, b = self.slopes, self.intercepts
        u = 0.0
        # just right of 0 the steepest of the highest intercepts is on top
        cur = max(range(len(a)), key=lambda k: (b[k], a[k]))
        keep = [cur]
        while True:
            best, best_u = None, np.inf
            for k in range(len(a)):
                if a[k] > a[cur]:
                    uk = (b[cur] - b[k]) / (a[k] - a[cur])
                    if uk >= u and (uk < best_u or (uk == best_u and a[k] > a[best])):
                        best, best_u = k, uk
            if best is None or best_u >= u_max:
                break
            keep.append(best)
            cur, u = best, best_u
        return keep


def shift_cost(utilization, model: ShiftCostModel | None = None):
    return (model or ShiftCostModel.default())(utilization)


@dataclass(frozen=True)
class Topology:
    """Static structure: IDCs, job classes, unit service rates and link cost models.

    ``rates`` maps (idc, job) to r_ij and must cover exactly the pairs with
    idc in the job's serving set. Links are ordered (origin, server) pairs that
    some job would use when served away from its origin.
    """

    idcs: tuple[IdcSpec, ...]
    jobs: tuple[JobClass, ...]
    rates: Mapping[tuple[int, int], float]
    shift_costs: Mapping[tuple[int, int], ShiftCostModel] = field(default_factory=dict)

    def __post_init__(self):
        object.__setattr__(self, "idcs", tuple(self.idcs))
        object.__setattr__(self, "jobs", tuple(self.jobs))
        n = len(self.idcs)
        for k, idc in enumerate(self.idcs):
            if idc.id != k:
                raise DomainError("IDC ids must be 0..N-1 in order")
        for k, job in enumerate(self.jobs):
            if job.id != k:
                raise DomainError("job ids must be 0..M-1 in order")
            if not 0 <= job.origin < n or any(not 0 <= i < n for i in job.serving_set):
                raise DomainError(f"job {k}: IDC index out of range")
        rates = {(int(i), int(j)): float(r) for (i, j), r in self.rates.items()}
        expected = {(i, job.id) for job in self.jobs for i in job.serving_set}
        if set(rates) != expected:
            raise DomainError("rates must be defined exactly on serving-set pairs")
        if any(r <= 0 for r in rates.values()):
            raise DomainError("unit service rates must be positive")
        object.__setattr__(self, "rates", rates)
        object.__setattr__(self, "shift_costs", dict(self.shift_costs))

    @property
    def n_idcs(self) -> int:
        return len(self.idcs)

    @property
    def n_jobs(self) -> int:
        return len(self.jobs)

    @cached_property
    def pairs(self) -> tuple[tuple[int, int], ...]:
        """Allocation coordinates (idc, job), ordered by job then idc."""
        return tuple((i, job.id) for job in self.jobs for i in job.serving_set)

    @cached_property
    def pair_idc(self) -> np.ndarray:
        return _frozen([i for i, _ in self.pairs], int)

    @cached_property
    def pair_job(self) -> np.ndarray:
        return _frozen([j for _, j in self.pairs], int)

    @cached_property
    def pair_rate(self) -> np.ndarray:
        return _frozen([self.rates[p] for p in self.pairs])

    @cached_property
    def links(self) -> tuple[tuple[int, int], ...]:
        used = {(self.jobs[j].origin, i) for i, j in self.pairs if self.jobs[j].origin != i}
        return tuple(sorted(used))

    @cached_property
    def pair_link(self) -> np.ndarray:
        """Link index carrying each pair's traffic, -1 when served at the origin."""
        index = {l: k for k, l in enumerate(self.links)}
        return _frozen([index.get((self.jobs[j].origin, i), -1) for i, j in self.pairs], int)

    def serves(self, i: int) -> list[int]:
        """Jobs that IDC i may serve."""
        return [j for (ii, j) in self.pairs if ii == i]

    def shifted_jobs(self, i: int, i2: int) -> list[int]:
        """Jobs originating at i that i2 may serve (empty for i == i2)."""
        if i == i2:
            return []
        return [j for (ii, j) in self.pairs if ii == i2 and self.jobs[j].origin == i]

    def link_cost(self, link: tuple[int, int]) -> ShiftCostModel:
        return self.shift_costs.get(link) or ShiftCostModel.default()

    @cached_property
    def link_segments(self) -> tuple[np.ndarray, np.ndarray]:
        """(slopes, intercepts) per link, padded to a common width with -inf intercepts."""
        models = [self.link_cost(l) for l in self.links]
        width = max((len(m.segments) for m in models), default=1)
        a = np.zeros((len(models), width))
        b = np.full((len(models), width), -np.inf)
        for k, m in enumerate(models):
            a[k, :len(m.segments)] = m.slopes
            b[k, :len(m.segments)] = m.intercepts
        a.setflags(write=False)
        b.setflags(write=False)
        return a, b

    def link_costs(self, traffic: np.ndarray, bandwidth: np.ndarray) -> np.ndarray:
        """Cost of every link at the given traffic; idle links (no traffic) cost 0."""
        a, b = self.link_segments
        busy = traffic > 0
        u = np.where(busy, traffic / np.where(bandwidth > 0, bandwidth, 1.0), 0.0)
        vals = (a * u[:, None] + b).max(axis=1) if len(u) else np.zeros(0)
        return np.where(busy, vals, 0.0)

    @cached_property
    def link_ends(self) -> tuple[np.ndarray, np.ndarray]:
        src = _frozen([i for i, _ in self.links], int)
        dst = _frozen([i2 for _, i2 in self.links], int)
        return src, dst

    def link_bandwidth(self, state: "SystemState") -> np.ndarray:
        src, dst = self.link_ends
        return state.bandwidth[src, dst]

    @property
    def mean_rates(self) -> np.ndarray:
        return np.array([job.mean_rate for job in self.jobs])


@dataclass(frozen=True)
class SystemState:
    """Exogenous world in one slot: active servers, prices, DSJ load, link bandwidth."""

    active_servers: np.ndarray
    price: np.ndarray
    dsj_capacity: np.ndarray
    bandwidth: np.ndarray  # (N, N), entry [i, i2] is i -> i2

    def __post_init__(self):
        k = _frozen(self.active_servers)
        a = _frozen(self.price)
        s0 = _frozen(self.dsj_capacity)
        bw = _frozen(self.bandwidth)
        n = k.shape[0]
        if a.shape != (n,) or s0.shape != (n,) or bw.shape != (n, n):
            raise DomainError("state arrays have inconsistent shapes")
        for name, arr in (("active_servers", k), ("price", a), ("dsj_capacity", s0), ("bandwidth", bw)):
            if not np.all(np.isfinite(arr)) or np.any(arr < 0):
                raise DomainError(f"{name} must be finite and nonnegative")
        if np.any(s0 > k):
            raise DomainError("DSJ capacity exceeds active servers")
        object.__setattr__(self, "active_servers", k)
        object.__setattr__(self, "price", a)
        object.__setattr__(self, "dsj_capacity", s0)
        object.__setattr__(self, "bandwidth", bw)

    @classmethod
    def clipped(cls, active_servers, price, dsj_capacity, bandwidth) -> "SystemState":
        """Build a state, clipping DSJ demand to the active servers (noisy traces)."""
        k = np.asarray(active_servers, dtype=float)
        s0 = np.asarray(dsj_capacity, dtype=float)
        over = s0 > k
        if np.any(over):
            log.warning("DSJ demand above active servers at IDCs %s; clipped", np.flatnonzero(over).tolist())
            s0 = np.minimum(s0, k)
        return cls(k, price, s0, bandwidth)

    @property
    def n_idcs(self) -> int:
        return self.active_servers.shape[0]

    @property
    def residual(self) -> np.ndarray:
        return self.active_servers - self.dsj_capacity

    def check(self, topo: Topology) -> None:
        if self.n_idcs != topo.n_idcs:
            raise DomainError("state and topology disagree on the number of IDCs")
        kmax = np.array([idc.k_max for idc in topo.idcs])
        if np.any(self.active_servers > kmax * (1 + 1e-12)):
            raise DomainError("active servers exceed k_max")


@dataclass(frozen=True)
class Allocation:
    """Capacity S_ij per (idc, job) pair, aligned with ``Topology.pairs``."""

    s: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "s", _frozen(self.s))

    @classmethod
    def zeros(cls, topo: Topology) -> "Allocation":
        return cls(np.zeros(len(topo.pairs)))

    @classmethod
    def from_matrix(cls, topo: Topology, mat) -> "Allocation":
        mat = np.asarray(mat, dtype=float)
        off = mat.copy()
        off[topo.pair_idc, topo.pair_job] = 0.0
        if np.any(off != 0):
            raise InfeasibleAllocation(["capacity assigned outside a serving set"])
        return cls(mat[topo.pair_idc, topo.pair_job])

    def matrix(self, topo: Topology) -> np.ndarray:
        out = np.zeros((topo.n_idcs, topo.n_jobs))
        out[topo.pair_idc, topo.pair_job] = self.s
        return out

    def idc_load(self, topo: Topology) -> np.ndarray:
        return np.bincount(topo.pair_idc, weights=self.s, minlength=topo.n_idcs)

    def service(self, topo: Topology) -> np.ndarray:
        """Service rate per job, sum over serving IDCs of r_ij * S_ij."""
        return np.bincount(topo.pair_job, weights=topo.pair_rate * self.s, minlength=topo.n_jobs)

    def shifted(self, topo: Topology) -> np.ndarray:
        """Traffic per link in ``topo.links`` order (D_jii' = r_i'j S_i'j summed over jobs)."""
        mask = topo.pair_link >= 0
        return np.bincount(topo.pair_link[mask], weights=(topo.pair_rate * self.s)[mask],
                           minlength=len(topo.links))


@dataclass(frozen=True)
class QueueVector:
    q: np.ndarray

    def __post_init__(self):
        q = _frozen(self.q)
        if not np.all(np.isfinite(q)) or np.any(q < 0):
            raise DomainError("queue backlogs must be finite and nonnegative")
        object.__setattr__(self, "q", q)

    @classmethod
    def zeros(cls, m: int) -> "QueueVector":
        return cls(np.zeros(m))


@dataclass(frozen=True)
class CostBreakdown:
    energy_per_idc: np.ndarray
    shift_per_link: np.ndarray  # aligned with Topology.links
    energy_total: float
    shift_total: float
    grand_total: float


def server_power(speed: float, model: PowerModel) -> float:
    if not 0.0 <= speed <= 1.0:
        raise DomainError(f"speed must lie in [0, 1], got {speed}")
    return model.rho * speed ** model.nu + 1.0 - model.rho


def idc_power(active_servers: float, total_demand: float, model: PowerModel) -> float:
    """Power of an IDC whose servers evenly share ``total_demand``."""
    k, s = float(active_servers), float(total_demand)
    if s < 0 or k < 0:
        raise DomainError("demand and server count must be nonnegative")
    if k == 0:
        if s > 0:
            raise InfeasibleAllocation([f"demand {s} with no active servers"])
        return 0.0
    if s > k * (1 + 1e-12):
        raise InfeasibleAllocation([f"demand {s} exceeds {k} active servers"])
    if model.nu == 2.0:
        return model.idle * k + model.rho * s * s / k
    return model.idle * k + model.rho * s ** model.nu / k ** (model.nu - 1.0)


def _idc_power_vec(k: np.ndarray, s: np.ndarray, model: PowerModel) -> np.ndarray:
    safe_k = np.where(k > 0, k, 1.0)
    if model.nu == 2.0:
        dyn = model.rho * s * s / safe_k
    else:
        dyn = model.rho * s ** model.nu / safe_k ** (model.nu - 1.0)
    return np.where(k > 0, model.idle * k + dyn, 0.0)


def feasibility_violations(state: SystemState, topo: Topology, alloc: Allocation,
                           tol: float = 1e-8) -> list[str]:
    """Human-readable list of violated constraints (absolute tolerance ``tol``)."""
    out = []
    s = alloc.s
    if s.shape != (len(topo.pairs),):
        return [f"allocation has shape {s.shape}, expected ({len(topo.pairs)},)"]
    if not np.all(np.isfinite(s)):
        out.append("non-finite entries")
    neg = np.flatnonzero(s < -tol)
    out += [f"S[{topo.pairs[k]}] = {s[k]:.6g} < 0" for k in neg]
    load = alloc.idc_load(topo)
    resid = np.maximum(state.residual, 0.0)
    for i in np.flatnonzero(load > resid + tol):
        out.append(f"IDC {i}: load {load[i]:.12g} > residual capacity {resid[i]:.12g}")
    traffic = alloc.shifted(topo)
    for l, (i, i2) in enumerate(topo.links):
        if traffic[l] > state.bandwidth[i, i2] + tol:
            out.append(f"link {i}->{i2}: traffic {traffic[l]:.12g} > bandwidth {state.bandwidth[i, i2]:.12g}")
    return out


def slot_cost(state: SystemState, topo: Topology, alloc: Allocation, model: PowerModel,
              check: bool = True) -> CostBreakdown:
    """Energy plus shifting cost of one slot under ``alloc``.

    Links that carry no DTJ traffic cost nothing, whatever their intercepts.
    """
    if check:
        bad = feasibility_violations(state, topo, alloc)
        if bad:
            raise InfeasibleAllocation(bad)
    load = state.dsj_capacity + alloc.idc_load(topo)
    load = np.minimum(load, state.active_servers)  # absorb round-off within tolerance
    energy = state.price * _idc_power_vec(state.active_servers, load, model)
    shift = topo.link_costs(alloc.shifted(topo), topo.link_bandwidth(state))
    e_tot = float(energy.sum())
    s_tot = float(shift.sum())
    return CostBreakdown(energy, shift, e_tot, s_tot, e_tot + s_tot)


def serve_rate(topo: Topology, alloc: Allocation, j: int) -> float:
    sel = topo.pair_job == j
    return float(np.dot(topo.pair_rate[sel], alloc.s[sel]))


def queue_step(q, service, arrivals) -> np.ndarray:
    """One slot of backlog dynamics: serve first, then add the slot's arrivals."""
    q = np.asarray(q.q if isinstance(q, QueueVector) else q, dtype=float)
    service = np.asarray(service, dtype=float)
    arrivals = np.asarray(arrivals, dtype=float)
    if np.any(q < 0) or np.any(service < 0) or np.any(arrivals < 0):
        raise DomainError("queue, service and arrivals must be nonnegative")
    return np.maximum(q - service, 0.0) + arrivals
