"""Scheduling policies for delay-tolerant jobs.

* SSTF: multipliers mu_j priced against the known mean rates, updated by a
  stochastic subgradient step after every slot.
* QTF: queue-weighted drift-plus-penalty; service never exceeds backlog.
* BES: best effort at the origin IDC, equal capacity shares, no shifting.
* OSSI: offline optimum of the ergodic program given the state distribution.

Controller objects wrap the step functions, keep per-state active-set hints
for the slot solver, and expose a common ``step(t, state, state_index, q)``.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
import scipy.optimize
import scipy.sparse

from .model import (Allocation, DomainError, PowerModel, QueueVector, SystemState, Topology,
                    slot_cost)
from .qp import QPError, solve_qp
from .solver import (SlotProblem, SolverError, _raw_block, _repair, _scale, layout_for,
                     solve_slot)

log = logging.getLogger(__name__)

GAP_TOL = 1e-6   # accepted duality gap of the ergodic program, relative to its cost


class InfeasibleRates(ValueError):
    """The mean rates cannot be served on average; carries the largest feasible scaling."""

    def __init__(self, msg, theta_max):
        super().__init__(msg)
        self.theta_max = theta_max


# ---------------------------------------------------------------------------
# SSTF


@dataclass(frozen=True)
class SstfState:
    mu: np.ndarray
    lam: np.ndarray
    step_index: int = 1

    def __post_init__(self):
        mu = np.array(self.mu, dtype=float)
        lam = np.array(self.lam, dtype=float)
        if mu.shape != lam.shape or np.any(mu < 0) or np.any(lam < 0):
            raise DomainError("mu and lambda must be nonnegative vectors of equal length")
        if self.step_index < 1:
            raise DomainError("step index starts at 1")
        mu.setflags(write=False)
        lam.setflags(write=False)
        object.__setattr__(self, "mu", mu)
        object.__setattr__(self, "lam", lam)

    @classmethod
    def start(cls, lam) -> "SstfState":
        lam = np.asarray(lam, dtype=float)
        return cls(np.zeros_like(lam), lam, 1)


def sstf_update(sstf: SstfState, served, beta0: float = 1.0) -> SstfState:
    """mu <- max(mu + (beta0 / n) * (lambda - served), 0); n <- n + 1."""
    sigma = sstf.lam - np.asarray(served, dtype=float)
    mu = np.maximum(sstf.mu + beta0 / sstf.step_index * sigma, 0.0)
    return SstfState(mu, sstf.lam, sstf.step_index + 1)


def sstf_step(state: SystemState, topo: Topology, sstf: SstfState, beta0: float = 1.0,
              power: PowerModel | None = None, hint=None, tol: float = 1e-6):
    """One SSTF slot. Returns (allocation, updated state, solve report)."""
    problem = SlotProblem(state, topo, sstf.mu, 1.0, None, power or PowerModel())
    rep = solve_slot(problem, tol=tol, hint=hint)
    return rep.allocation, sstf_update(sstf, rep.allocation.service(topo), beta0), rep


def suggest_beta0(states, topo: Topology, lam, power: PowerModel | None = None) -> float:
    """Step scale putting the first multiplier update near the marginal cost.

    The multipliers settle near the marginal energy cost per traffic unit at
    the load that serves ``lam``; a first step of that size avoids the long
    bang-bang transient of beta0 = 1 when rates are in the thousands.
    """
    power = power or PowerModel()
    lam = np.asarray(lam, dtype=float)
    if not np.any(lam > 0):
        return 1.0
    r_bar = float(np.mean(topo.pair_rate))
    marg = []
    for st in states:
        k = st.active_servers
        on = k > 0
        if not np.any(on):
            continue
        load = st.dsj_capacity[on] + lam.sum() / r_bar / on.sum()
        marg.append(np.mean(2.0 * power.rho * st.price[on] * np.minimum(load, k[on]) / k[on]) / r_bar)
    mu_scale = float(np.mean(marg)) if marg else 1.0
    return mu_scale / float(lam.max())


# ---------------------------------------------------------------------------
# QTF


@dataclass(frozen=True)
class QtfConfig:
    v: float = 1.0

    def __post_init__(self):
        if not self.v > 0:
            raise DomainError("V must be positive")


def qtf_step(state: SystemState, topo: Topology, q, cfg: QtfConfig, power: PowerModel | None = None,
             hint=None, tol: float = 1e-6):
    """One QTF slot; returns (allocation, solve report)."""
    qv = np.asarray(q.q if isinstance(q, QueueVector) else q, dtype=float)
    if np.any(qv < 0):
        raise DomainError("queues must be nonnegative")
    problem = SlotProblem(state, topo, qv, cfg.v, qv, power or PowerModel())
    rep = solve_slot(problem, tol=tol, hint=hint)
    return rep.allocation, rep


# ---------------------------------------------------------------------------
# BES


def water_fill(available: float, demands) -> np.ndarray:
    """Equal shares of ``available``; surplus of small demands goes to the rest."""
    d = np.asarray(demands, dtype=float)
    if d.sum() <= available:
        return d.copy()
    out = np.zeros_like(d)
    left = float(available)
    order = np.argsort(d, kind="stable")
    for rank, k in enumerate(order):
        share = left / (len(d) - rank)
        out[k] = min(d[k], share)
        left -= out[k]
    return out


def bes_step(state: SystemState, topo: Topology, q) -> Allocation:
    """Serve each job at its origin only, sharing capacity equally with water-filling."""
    qv = np.asarray(q.q if isinstance(q, QueueVector) else q, dtype=float)
    if np.any(qv < 0):
        raise DomainError("queues must be nonnegative")
    s = np.zeros(len(topo.pairs))
    index = {p: k for k, p in enumerate(topo.pairs)}
    avail = np.maximum(state.residual, 0.0)
    for i in range(topo.n_idcs):
        ks = [index[(i, job.id)] for job in topo.jobs if job.origin == i and (i, job.id) in index]
        if not ks:
            continue
        ks = np.array(ks)
        demand = qv[topo.pair_job[ks]] / topo.pair_rate[ks]
        alloc = water_fill(avail[i], demand)
        total = alloc.sum()
        if total > avail[i]:          # round-off in the running remainder
            alloc *= avail[i] / total
        s[ks] = alloc
    return Allocation(s)


# ---------------------------------------------------------------------------
# OSSI


@dataclass(frozen=True)
class StateDistribution:
    states: tuple[SystemState, ...]
    probs: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "states", tuple(self.states))
        p = np.array(self.probs, dtype=float)
        if p.shape != (len(self.states),) or len(self.states) == 0:
            raise DomainError("one probability per state is required")
        if np.any(p < 0) or abs(p.sum() - 1.0) > 1e-12:
            raise DomainError("probabilities must be nonnegative and sum to 1")
        p.setflags(write=False)
        object.__setattr__(self, "probs", p)

    @classmethod
    def uniform(cls, states) -> "StateDistribution":
        states = tuple(states)
        return cls(states, np.full(len(states), 1.0 / len(states)))


@dataclass
class OssiPolicy:
    allocations: list[Allocation]
    optimal_cost: float
    mu_star: np.ndarray
    duality_gap: float = 0.0
    expected_service: np.ndarray = field(default_factory=lambda: np.zeros(0))


def max_rate_scaling(dist: StateDistribution, topo: Topology, lam) -> float:
    """Largest theta such that theta * lam can be served on average (LP)."""
    lam = np.asarray(lam, dtype=float)
    if not np.any(lam > 0):
        return np.inf
    npair = len(topo.pairs)
    ns = len(dist.states)
    nv = ns * npair + 1
    rows, cols, vals, rhs = [], [], [], []
    row = 0
    links = topo.links
    for w, st in enumerate(dist.states):
        base = w * npair
        resid = np.maximum(st.residual, 0.0)
        for i in range(topo.n_idcs):
            ks = np.flatnonzero(topo.pair_idc == i)
            rows += [row] * len(ks)
            cols += list(base + ks)
            vals += [1.0] * len(ks)
            rhs.append(resid[i])
            row += 1
        for l, (i, i2) in enumerate(links):
            ks = np.flatnonzero(topo.pair_link == l)
            rows += [row] * len(ks)
            cols += list(base + ks)
            vals += list(topo.pair_rate[ks])
            rhs.append(st.bandwidth[i, i2])
            row += 1
    for j in np.flatnonzero(lam > 0):
        ks = np.flatnonzero(topo.pair_job == j)
        for w, pw in enumerate(dist.probs):
            rows += [row] * len(ks)
            cols += list(w * npair + ks)
            vals += list(-pw * topo.pair_rate[ks])
        rows.append(row)
        cols.append(nv - 1)
        vals.append(lam[j])
        rhs.append(0.0)
        row += 1
    A = scipy.sparse.csr_matrix((vals, (rows, cols)), shape=(row, nv))
    c = np.zeros(nv)
    c[-1] = -1.0
    res = scipy.optimize.linprog(c, A_ub=A, b_ub=np.array(rhs), bounds=(0, None), method="highs")
    if res.status == 3:
        return np.inf
    if res.status != 0:
        raise RuntimeError(f"rate-scaling LP failed: {res.message}")
    return float(res.x[-1])


def _zero_demand_policy(dist, topo, power):
    allocs = [Allocation.zeros(topo) for _ in dist.states]
    cost = sum(p * slot_cost(st, topo, a, power).grand_total
               for p, st, a in zip(dist.probs, dist.states, allocs))
    return OssiPolicy(allocs, float(cost), np.zeros(topo.n_jobs), 0.0, np.zeros(topo.n_jobs))


def ossi_solve(dist: StateDistribution, topo: Topology, lam, tol: float = 1e-9,
               power: PowerModel | None = None, method: str = "qp", **kw) -> OssiPolicy:
    """Offline optimum of the ergodic program.

    minimize   sum_w pi_w * cost_w(S^w)
    subject to sum_w pi_w * R_j(S^w) >= lambda_j,  S^w feasible in state w.

    ``method="qp"`` solves the whole program as one block-structured QP (one
    block per state, coupled by the rate rows). ``method="dual"`` runs dual
    ascent with the exact expected subgradient and primal averaging.
    """
    power = power or PowerModel()
    lam = np.asarray(lam, dtype=float)
    if lam.shape != (topo.n_jobs,) or np.any(lam < 0):
        raise DomainError("lambda must be a nonnegative vector, one entry per job")
    for st in dist.states:
        st.check(topo)
    if not np.any(lam > 0):
        return _zero_demand_policy(dist, topo, power)
    theta = max_rate_scaling(dist, topo, lam)
    if theta < 1.0 + 1e-9:
        raise InfeasibleRates(f"mean rates are not sustainable; at most {theta:.6g} x lambda can be served",
                              theta)
    if method == "qp":
        return _ossi_qp(dist, topo, lam, tol, power, **kw)
    if method == "dual":
        return _ossi_dual(dist, topo, lam, tol, power, **kw)
    raise DomainError(f"unknown OSSI method {method!r}")


def _ossi_qp(dist, topo, lam, tol, power, max_iter=200):
    layout = layout_for(topo, False)
    live = np.flatnonzero(dist.probs > 0)
    blocks = [_raw_block(layout, dist.states[w], np.zeros(topo.n_jobs), float(dist.probs[w]),
                         None, power, reward=False) for w in live]
    jobs = np.flatnonzero(lam > 0)
    C = []
    for w in live:
        Cw = np.zeros((len(jobs), layout.n))
        Cw[:, :layout.npair] = -dist.probs[w] * layout.a_job[jobs]
        C.append(Cw)
    P, q, G, h, rs, sx, sf, frees, Cs, ds, cs = _scale(layout, blocks, np.stack(C), -lam[jobs])
    try:
        res = solve_qp(P, q, G, h, Cs, ds, tol=tol, max_iter=max_iter)
    except QPError as exc:
        # Near optimum the barrier systems lose accuracy; the best iterate is
        # accepted when the gap is negligible against the full expected cost.
        res = exc.result
        if res is None or max(res.primal_res, res.dual_res) > 1e-6:
            raise SolverError(f"ergodic program: {exc}") from exc
        stalled = exc
    else:
        stalled = None

    allocs = [Allocation.zeros(topo) for _ in dist.states]
    for b, w in enumerate(live):
        s = np.where(frees[b], res.x[b, :layout.npair] * sx, 0.0)
        allocs[w] = Allocation(_repair(dist.states[w], topo, s, None))
    mu = np.zeros(topo.n_jobs)
    mu[jobs] = sf * res.zc / cs
    pol = _finish(dist, topo, power, allocs, mu, sf * res.gap)
    if stalled is not None:
        rel = pol.duality_gap / max(abs(pol.optimal_cost), 1e-300)
        if rel > GAP_TOL:
            raise SolverError(f"ergodic program: relative duality gap {rel:.1e} ({stalled})")
        log.info("ergodic program stopped at relative gap %.1e", rel)
    return pol


def _finish(dist, topo, power, allocs, mu, gap):
    cost = 0.0
    served = np.zeros(topo.n_jobs)
    for p, st, a in zip(dist.probs, dist.states, allocs):
        cost += p * slot_cost(st, topo, a, power).grand_total
        served += p * a.service(topo)
    return OssiPolicy(allocs, float(cost), mu, float(gap), served)


def _ossi_dual(dist, topo, lam, tol, power, step0=None, max_iter=2000, patience=50):
    """Projected dual ascent, step step0 / k, with running primal averages."""
    if step0 is None:
        step0 = suggest_beta0(dist.states, topo, lam, power)
    mu = np.zeros(topo.n_jobs)
    hints = [None] * len(dist.states)
    avg = [np.zeros(len(topo.pairs)) for _ in dist.states]
    best_dual, since = -np.inf, 0
    for k in range(1, max_iter + 1):
        served = np.zeros(topo.n_jobs)
        dual = float(mu @ lam)
        for w, (p, st) in enumerate(zip(dist.probs, dist.states)):
            if p == 0:
                continue
            rep = solve_slot(SlotProblem(st, topo, mu, 1.0, None, power), hint=hints[w])
            hints[w] = rep.active_set
            avg[w] += (rep.allocation.s - avg[w]) / k
            served += p * rep.allocation.service(topo)
            dual += p * (rep.objective + rep.constant)
        if dual > best_dual + tol * max(1.0, abs(dual)):
            best_dual, since = dual, 0
        else:
            since += 1
            if since >= patience:
                break
        mu = np.maximum(mu + step0 / k * (lam - served), 0.0)
    allocs = [Allocation(a) for a in avg]
    pol = _finish(dist, topo, power, allocs, mu, 0.0)
    pol.duality_gap = max(pol.optimal_cost - best_dual, 0.0)
    return pol


# ---------------------------------------------------------------------------
# Proposition 1 constants


@dataclass(frozen=True)
class BoundReport:
    b_const: float
    epsilon: float
    queue_bound: float
    cost_bound: float


def drift_constant(topo: Topology) -> float:
    """B = sum_i r_i^2 (K_i^max)^2 + sum_j (D_j^m)^2, r_i the largest rate at IDC i."""
    b = 0.0
    for i, idc in enumerate(topo.idcs):
        rates = topo.pair_rate[topo.pair_idc == i]
        if rates.size:
            b += float(rates.max()) ** 2 * idc.k_max ** 2
    b += sum(job.arrival_bound ** 2 for job in topo.jobs)
    return b


def drift_bound_constants(topo: Topology, v: float, epsilon: float, g_e_star_eps: float,
                          g_e_star: float | None = None) -> BoundReport:
    """Queue bound (B + V g*(eps)) / eps and cost bound g* + B / V.

    Without ``g_e_star`` the cost bound uses g*(eps), which is never smaller
    than g*, so the bound stays valid (only looser).
    """
    if not epsilon > 0:
        raise DomainError("epsilon must be positive")
    if not v > 0:
        raise DomainError("V must be positive")
    b = drift_constant(topo)
    g = g_e_star_eps if g_e_star is None else g_e_star
    return BoundReport(b, float(epsilon), (b + v * g_e_star_eps) / epsilon, g + b / v)


def bound_report(dist: StateDistribution, topo: Topology, lam, v: float, epsilon: float | None = None,
                 power: PowerModel | None = None) -> BoundReport:
    """Bound report with g* and g*(eps) computed by ``ossi_solve``; eps defaults to 5% of min lambda."""
    lam = np.asarray(lam, dtype=float)
    if epsilon is None:
        pos = lam[lam > 0]
        epsilon = 0.05 * float(pos.min()) if pos.size else 1.0
    g = ossi_solve(dist, topo, lam, power=power).optimal_cost
    g_eps = ossi_solve(dist, topo, lam + epsilon, power=power).optimal_cost
    return drift_bound_constants(topo, v, epsilon, g_eps, g)


# ---------------------------------------------------------------------------
# controller objects used by the simulator


class Controller:
    """Per-run controller; ``step`` is called once per slot, in order."""

    name = "controller"

    def step(self, t: int, state: SystemState, state_index: int | None, q: np.ndarray) -> Allocation:
        raise NotImplementedError


class SstfController(Controller):
    name = "sstf"

    def __init__(self, topo: Topology, lam, beta0: float = 1.0, power: PowerModel | None = None):
        self.topo = topo
        self.beta0 = float(beta0)
        self.power = power or PowerModel()
        self.state = SstfState.start(lam)

    def step(self, t, state, state_index, q):
        alloc, self.state, _ = sstf_step(state, self.topo, self.state, self.beta0, self.power)
        return alloc


class QtfController(Controller):
    name = "qtf"

    def __init__(self, topo: Topology, v: float, power: PowerModel | None = None):
        self.topo = topo
        self.cfg = QtfConfig(v)
        self.power = power or PowerModel()

    def step(self, t, state, state_index, q):
        # no per-state hints: the backlog caps move the active set from slot to slot
        alloc, _ = qtf_step(state, self.topo, q, self.cfg, self.power)
        return alloc


class BesController(Controller):
    name = "bes"

    def __init__(self, topo: Topology):
        self.topo = topo

    def step(self, t, state, state_index, q):
        return bes_step(state, self.topo, q)


class OssiController(Controller):
    """Plays the offline per-state allocations; needs the state index."""

    name = "ossi"

    def __init__(self, policy: OssiPolicy):
        self.policy = policy

    def step(self, t, state, state_index, q):
        if state_index is None:
            raise DomainError("OSSI needs an ergodic scenario (state index per slot)")
        return self.policy.allocations[state_index]
