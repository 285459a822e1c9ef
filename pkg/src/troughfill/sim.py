"""Discrete-time simulation engine and metrics.

Each slot: observe the state and backlog, ask the controller for an
allocation, validate it (never repair), record the cost, then serve and add
the slot's arrivals (arrivals cannot be served in the slot they arrive).
"""
from __future__ import annotations

import csv
import io
import json
import logging
import math
import zlib
from dataclasses import dataclass, field

import numpy as np

from .controllers import Controller, StateDistribution
from .model import DomainError, PowerModel, SystemState, Topology, feasibility_violations, slot_cost

log = logging.getLogger(__name__)


def substream(seed: int, name: str) -> np.random.Generator:
    """Independent generator for a named purpose, derived from the top-level seed."""
    return np.random.default_rng(np.random.SeedSequence(int(seed), spawn_key=(zlib.crc32(name.encode()),)))


class ControllerFailure(RuntimeError):
    """A controller returned an infeasible allocation or its solver failed."""

    def __init__(self, slot: int, msg: str, diagnostics=None):
        super().__init__(f"slot {slot}: {msg}")
        self.slot = slot
        self.diagnostics = diagnostics or []


@dataclass
class Scenario:
    """Everything a run needs besides the controller.

    Exactly one of ``states`` (ergodic: i.i.d. draws from a distribution) and
    ``state_series`` (trace: one state per slot) is set. ``arrivals`` is an
    explicit (T, M) series; without it arrivals are drawn i.i.d. uniform on
    [0, 2 lambda_j], so D_j^m = 2 lambda_j.
    """

    topo: Topology
    horizon: int
    seed: int = 0
    power: PowerModel = field(default_factory=PowerModel)
    states: StateDistribution | None = None
    state_series: list[SystemState] | None = None
    arrivals: np.ndarray | None = None
    lam: np.ndarray | None = None
    name: str = "scenario"

    def __post_init__(self):
        if self.horizon <= 0:
            raise DomainError("horizon must be positive")
        if (self.states is None) == (self.state_series is None):
            raise DomainError("give either a state distribution or a state series")
        if self.state_series is not None and len(self.state_series) < self.horizon:
            raise DomainError("state series shorter than the horizon")
        m = self.topo.n_jobs
        if self.arrivals is not None:
            a = np.asarray(self.arrivals, dtype=float)
            if a.ndim != 2 or a.shape[0] < self.horizon or a.shape[1] != m or np.any(a < 0):
                raise DomainError("arrival series must be (T, M), nonnegative, covering the horizon")
            self.arrivals = a
        if self.lam is None:
            self.lam = (self.arrivals[:self.horizon].mean(axis=0) if self.arrivals is not None
                        else self.topo.mean_rates)
        self.lam = np.asarray(self.lam, dtype=float)

    @property
    def ergodic(self) -> bool:
        return self.states is not None

    def realize(self):
        """(state indices or None, arrivals) for the whole horizon; same for every controller."""
        T = self.horizon
        idx = None
        if self.ergodic:
            rng = substream(self.seed, "state-sampling")
            idx = rng.choice(len(self.states.states), size=T, p=self.states.probs)
        if self.arrivals is not None:
            arr = self.arrivals[:T]
        else:
            rng = substream(self.seed, "arrivals")
            arr = rng.uniform(0.0, 1.0, size=(T, self.topo.n_jobs)) * (2.0 * self.lam)
        return idx, arr


def sample_state(dist: StateDistribution, rng: np.random.Generator) -> SystemState:
    return dist.states[int(rng.choice(len(dist.states), p=dist.probs))]


@dataclass
class MetricsSeries:
    """Per-slot records; every aggregate is recomputed from them on demand."""

    cost: np.ndarray          # (T,) grand total per slot
    energy: np.ndarray        # (T,)
    shift: np.ndarray         # (T,)
    queues: np.ndarray        # (T, M) backlog at the start of each slot
    served: np.ndarray        # (T, M) service rate offered
    drained: np.ndarray       # (T, M) min(backlog, service rate)
    arrivals: np.ndarray      # (T, M)
    shifted: np.ndarray       # (T,) total traffic moved across links
    final_queues: np.ndarray  # (M,) backlog after the last slot
    lam: np.ndarray
    controller: str = ""

    @property
    def horizon(self) -> int:
        return self.cost.shape[0]

    @property
    def avg_cost(self) -> float:
        return float(self.cost.mean())

    @property
    def avg_queue(self) -> np.ndarray:
        return self.queues.mean(axis=0)

    @property
    def delay(self) -> np.ndarray:
        """Little's-law delay per job in slots (nan for jobs without arrivals)."""
        arr = self.arrivals.mean(axis=0)
        with np.errstate(divide="ignore", invalid="ignore"):
            return np.where(arr > 0, self.avg_queue / np.where(arr > 0, arr, 1.0), np.nan)

    @property
    def overall_delay(self) -> float:
        arr = float(self.arrivals.sum(axis=1).mean())
        return float(self.queues.sum(axis=1).mean() / arr) if arr > 0 else float("nan")

    def unstable(self, threshold: float = 0.01) -> bool:
        """Slope of total backlog over the last half above ``threshold`` x mean arrivals per slot."""
        tail = self.queues.sum(axis=1)[self.horizon // 2:]
        if tail.size < 2:
            return False
        slope = np.polyfit(np.arange(tail.size, dtype=float), tail, 1)[0]
        return bool(slope > threshold * float(self.arrivals.sum(axis=1).mean()))

    def replay_error(self) -> float:
        """Largest mismatch between recorded backlogs and queue dynamics replayed from the records."""
        nxt = np.maximum(self.queues - self.served, 0.0) + self.arrivals
        later = np.vstack([self.queues[1:], self.final_queues[None, :]])
        return float(np.abs(nxt - later).max(initial=0.0))

    def conservation_error(self) -> float:
        """|arrivals - drained - (final - initial backlog)|, summed over jobs and slots."""
        err = 0.0
        for j in range(self.queues.shape[1]):
            lhs = math.fsum(self.arrivals[:, j])
            rhs = math.fsum(self.drained[:, j]) + self.final_queues[j] - self.queues[0, j]
            err += abs(lhs - rhs)
        return float(err)

    def summary(self) -> dict:
        return {
            "controller": self.controller,
            "horizon": self.horizon,
            "avg_cost": self.avg_cost,
            "avg_energy": float(self.energy.mean()),
            "avg_shift": float(self.shift.mean()),
            "avg_queue": [float(v) for v in self.avg_queue],
            "delay": [None if np.isnan(v) else float(v) for v in self.delay],
            "overall_delay": self.overall_delay,
            "unstable": self.unstable(),
        }

    # -- serialization -----------------------------------------------------

    def csv_header(self) -> list[str]:
        m = self.queues.shape[1]
        return (["t", "cost_total", "energy", "shift"] + [f"Q_{j + 1}" for j in range(m)]
                + [f"served_{j + 1}" for j in range(m)])

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(self.csv_header())
        for t in range(self.horizon):
            w.writerow([t + 1, repr(float(self.cost[t])), repr(float(self.energy[t])),
                        repr(float(self.shift[t]))]
                       + [repr(float(v)) for v in self.queues[t]]
                       + [repr(float(v)) for v in self.served[t]])
        return buf.getvalue()


def run(scenario: Scenario, controller: Controller, realization=None, q0=None) -> MetricsSeries:
    """Simulate ``controller`` over the scenario horizon."""
    topo = scenario.topo
    T, M = scenario.horizon, topo.n_jobs
    idx, arr = realization if realization is not None else scenario.realize()
    q = np.zeros(M) if q0 is None else np.array(q0, dtype=float)

    cost = np.zeros(T)
    energy = np.zeros(T)
    shift = np.zeros(T)
    shifted = np.zeros(T)
    queues = np.zeros((T, M))
    served = np.zeros((T, M))
    drained = np.zeros((T, M))
    for t in range(T):
        if idx is not None:
            w = int(idx[t])
            state = scenario.states.states[w]
        else:
            w = None
            state = scenario.state_series[t]
        queues[t] = q
        try:
            alloc = controller.step(t, state, w, q.copy())
        except Exception as exc:
            raise ControllerFailure(t, f"{type(exc).__name__}: {exc}") from exc
        bad = feasibility_violations(state, topo, alloc, tol=1e-8)
        if bad:
            raise ControllerFailure(t, "infeasible allocation", bad)
        c = slot_cost(state, topo, alloc, scenario.power, check=False)
        cost[t], energy[t], shift[t] = c.grand_total, c.energy_total, c.shift_total
        mv = alloc.shifted(topo)
        shifted[t] = mv.sum()
        rate = alloc.service(topo)
        served[t] = rate
        drained[t] = np.minimum(q, rate)
        q = np.maximum(q - rate, 0.0) + arr[t]
    return MetricsSeries(cost, energy, shift, queues, served, drained, np.array(arr, dtype=float),
                         shifted, q, scenario.lam.copy(), controller.name)


@dataclass
class CompareRow:
    controller: str
    metrics: MetricsSeries | None
    error: str | None = None
    extra: dict = field(default_factory=dict)


def compare(scenario: Scenario, controllers: dict) -> list[CompareRow]:
    """Run every controller on the same realization; one failing run does not stop the rest.

    ``controllers`` maps a label to a zero-argument factory returning a fresh controller.
    """
    realization = scenario.realize()
    rows = []
    for label, factory in controllers.items():
        try:
            ctrl = factory()
            m = run(scenario, ctrl, realization)
            m.controller = label
            rows.append(CompareRow(label, m))
        except Exception as exc:  # isolated per run
            log.error("controller %s failed: %s", label, exc)
            rows.append(CompareRow(label, None, f"{type(exc).__name__}: {exc}"))
    return rows


def windowed_rates(served: np.ndarray, lam: np.ndarray, window: int) -> np.ndarray:
    """Per-job service normalized by lambda and averaged over consecutive windows.

    A trailing partial window is dropped.
    """
    T = served.shape[0]
    if window < 1 or window > T:
        raise DomainError(f"window must lie in [1, {T}]")
    n = T // window
    blocks = served[:n * window].reshape(n, window, -1).mean(axis=1)
    with np.errstate(divide="ignore", invalid="ignore"):
        return np.where(lam > 0, blocks / np.where(lam > 0, lam, 1.0), np.nan)


def to_json(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True, allow_nan=False) + "\n"
