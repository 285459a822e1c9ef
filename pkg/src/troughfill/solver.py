"""Per-slot joint capacity allocation and load shifting.

Both controllers reduce each slot to the same convex program in the capacity
matrix S:

    min  V' * [ sum_i alpha_i rho (S_i0 + sum_j S_ij)^2 / K_i
                + sum_links (phi_l(traffic_l / B_l) - phi_l(0)) ]
         - sum_j w_j sum_i r_ij S_ij
    s.t. per-IDC residual capacity, per-link bandwidth, S >= 0,
         and optionally sum_i r_ij S_ij <= c_j.

Each max-affine link cost gets an epigraph variable, giving a QP that is solved
with the interior-point method in :mod:`troughfill.qp` and then polished on the
identified active set. A previously optimal active set can be passed as a hint;
when the hint certifies (primal and dual feasible) no interior-point run is needed.
"""
from __future__ import annotations

import logging
import os
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg
import scipy.optimize

from .model import (Allocation, DomainError, PowerModel, SystemState, Topology)
from .qp import QPError, solve_active_set, solve_qp

log = logging.getLogger(__name__)

MASKED_COST = 1.0   # scaled objective coefficient pinning a removed variable at 0
VERIFY_TOL = 1e-9
IPM_TOL = 1e-9


class SolverError(RuntimeError):
    """The slot program could not be solved to tolerance."""

    def __init__(self, msg, best=None, residuals=None):
        super().__init__(msg)
        self.best = best
        self.residuals = residuals


@dataclass(frozen=True)
class SlotProblem:
    state: SystemState
    topo: Topology
    weights: np.ndarray
    cost_scale: float = 1.0
    service_caps: np.ndarray | None = None
    power: PowerModel = field(default_factory=PowerModel)

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=float)
        if w.shape != (self.topo.n_jobs,) or not np.all(np.isfinite(w)) or np.any(w < 0):
            raise DomainError("weights must be finite, nonnegative, one per job")
        object.__setattr__(self, "weights", w)
        if not self.cost_scale > 0:
            raise DomainError("cost_scale must be positive")
        if self.service_caps is not None:
            c = np.asarray(self.service_caps, dtype=float)
            if c.shape != (self.topo.n_jobs,) or np.any(c < 0) or not np.all(np.isfinite(c)):
                raise DomainError("service caps must be finite, nonnegative, one per job")
            object.__setattr__(self, "service_caps", c)
        if self.power.nu != 2.0:
            raise DomainError("the slot program is quadratic; only nu = 2 is supported")


@dataclass
class SolveReport:
    allocation: Allocation
    objective: float
    kkt_residual: float
    iterations: int
    constant: float = 0.0      # cost_scale * (idle energy + intercepts of used links)
    active_set: np.ndarray | None = None
    method: str = "ipm"


# ---------------------------------------------------------------------------
# formulation


class Layout:
    """Row/column structure of the slot QP for one topology (state independent)."""

    def __init__(self, topo: Topology, capped: bool):
        self.topo = topo
        self.capped = capped
        self.npair = len(topo.pairs)
        self.nlink = len(topo.links)
        self.n = self.npair + self.nlink
        N, M = topo.n_idcs, topo.n_jobs
        r = topo.pair_rate

        self.a_idc = np.zeros((N, self.npair))
        self.a_idc[topo.pair_idc, np.arange(self.npair)] = 1.0
        self.a_link = np.zeros((self.nlink, self.npair))
        on_link = topo.pair_link >= 0
        self.a_link[topo.pair_link[on_link], np.flatnonzero(on_link)] = r[on_link]
        self.a_job = np.zeros((M, self.npair))
        self.a_job[topo.pair_job, np.arange(self.npair)] = r

        epi_link, epi_a, epi_b = [], [], []
        self.phi0 = np.zeros(self.nlink)
        for l, link in enumerate(topo.links):
            model = topo.link_cost(link)
            self.phi0[l] = model.at_zero
            for k in model.envelope(1.0):
                epi_link.append(l)
                epi_a.append(model.slopes[k])
                epi_b.append(model.intercepts[k] - model.at_zero)
        self.epi_link = np.array(epi_link, dtype=int)
        self.epi_a = np.array(epi_a)
        self.epi_b = np.array(epi_b)
        self.nepi = len(epi_link)

        self.r_cap = self.npair
        self.r_bw = self.r_cap + N
        self.r_epi = self.r_bw + self.nlink
        self.r_caps = self.r_epi + self.nepi
        self.m = self.r_caps + (M if capped else 0)


def layout_for(topo: Topology, capped: bool) -> Layout:
    cache = topo.__dict__.setdefault("_slot_layouts", {})
    if capped not in cache:
        cache[capped] = Layout(topo, capped)
    return cache[capped]


@dataclass
class ScaledQP:
    P: np.ndarray
    q: np.ndarray
    G: np.ndarray
    h: np.ndarray
    sx: float
    sf: float
    row_scale: np.ndarray
    free: np.ndarray         # unmasked allocation coordinates
    layout: Layout


def _raw_block(layout: Layout, state: SystemState, weights, cost_scale, caps, power, reward=True):
    """Unscaled (P, q, G, h, free-mask) for one state; G/h rows follow ``layout``."""
    topo = layout.topo
    npair, n = layout.npair, layout.n
    K = state.active_servers
    resid = np.maximum(state.residual, 0.0)
    alpha = state.price
    c = np.where(K > 0, cost_scale * alpha * power.rho / np.where(K > 0, K, 1.0), 0.0)

    bw = topo.link_bandwidth(state)

    free = resid[topo.pair_idc] > 1e-12 * np.maximum(K[topo.pair_idc], 1.0)
    on_link = topo.pair_link >= 0
    free[on_link] &= bw[topo.pair_link[on_link]] > 0
    if caps is not None:
        free &= caps[topo.pair_job] > 0

    ci = c[topo.pair_idc]
    P = np.zeros((n, n))
    P[:npair, :npair] = 2.0 * ci[:, None] * (topo.pair_idc[:, None] == topo.pair_idc[None, :])
    q = np.zeros(n)
    q[:npair] = 2.0 * ci * state.dsj_capacity[topo.pair_idc]
    if reward:
        q[:npair] -= weights[topo.pair_job] * topo.pair_rate
    q[npair:] = 1.0

    G = np.zeros((layout.m, n))
    h = np.zeros(layout.m)
    G[np.arange(npair), np.arange(npair)] = -1.0
    G[layout.r_cap:layout.r_bw, :npair] = layout.a_idc
    h[layout.r_cap:layout.r_bw] = resid
    G[layout.r_bw:layout.r_epi, :npair] = layout.a_link
    h[layout.r_bw:layout.r_epi] = bw
    if layout.nepi:
        safe_bw = np.where(bw > 0, bw, 1.0)
        coef = cost_scale * layout.epi_a / safe_bw[layout.epi_link]
        G[layout.r_epi:layout.r_caps, :npair] = coef[:, None] * layout.a_link[layout.epi_link]
        G[layout.r_epi + np.arange(layout.nepi), npair + layout.epi_link] = -1.0
        h[layout.r_epi:layout.r_caps] = -cost_scale * layout.epi_b
    if caps is not None:
        G[layout.r_caps:, :npair] = layout.a_job
        h[layout.r_caps:] = caps
    return P, q, G, h, free


def _scale(layout: Layout, blocks, C=None, d=None):
    """Scale a list of raw blocks jointly; returns scaled arrays and factors."""
    npair = layout.npair
    frees = [b[4] for b in blocks]
    ub = []
    for (P, q, G, h, free) in blocks:
        if np.any(free):
            caprows = h[layout.r_cap:layout.r_bw]
            ub.append(caprows[layout.topo.pair_idc[free]].max())
    sx = max(ub) if ub else 1.0
    sx = sx if sx > 0 else 1.0

    col = np.ones(layout.n)
    col[:npair] = sx
    mags = [1e-300]
    for (P, q, G, h, free) in blocks:
        fx = np.flatnonzero(free)
        if fx.size:
            mags.append(np.abs(P[np.ix_(fx, fx)]).max() * sx * sx)
            mags.append(np.abs(q[fx]).max() * sx)
            if layout.nepi:
                mags.append(np.abs(G[layout.r_epi:layout.r_caps][:, fx]).max() * sx)
    sf = max(mags)
    col[npair:] = sf

    out_P, out_q, out_G, out_h, out_rs = [], [], [], [], []
    for (P, q, G, h, free) in blocks:
        Ps = P * np.outer(col, col) / sf
        qs = q * col / sf
        Gs = G * col[None, :]
        hs = h.copy()
        masked = np.flatnonzero(~free)
        if masked.size:
            Ps[masked, :] = 0.0
            Ps[:, masked] = 0.0
            qs[masked] = MASKED_COST
            keep_bound = Gs[masked, masked].copy()
            Gs[:, masked] = 0.0
            Gs[masked, masked] = keep_bound
        rs = np.abs(Gs).max(axis=1)
        zero = rs == 0
        rs[zero] = 1.0
        Gs = Gs / rs[:, None]
        hs = hs / rs
        hs[zero] = 1.0
        out_P.append(Ps)
        out_q.append(qs)
        out_G.append(Gs)
        out_h.append(hs)
        out_rs.append(rs)
    Cs = ds = cs = None
    if C is not None:
        Cs = np.stack([Ci * col[None, :] for Ci in C])
        for b, free in enumerate(frees):
            Cs[b][:, ~np.concatenate([free, np.ones(layout.nlink, bool)])] = 0.0
        cs = np.abs(Cs).max(axis=(0, 2))
        cs[cs == 0] = 1.0
        Cs = Cs / cs[None, :, None]
        ds = np.asarray(d) / cs
    return (np.stack(out_P), np.stack(out_q), np.stack(out_G), np.stack(out_h),
            np.stack(out_rs), sx, sf, np.stack(frees), Cs, ds, cs)


def build_qp(problem: SlotProblem) -> ScaledQP:
    layout = layout_for(problem.topo, problem.service_caps is not None)
    raw = _raw_block(layout, problem.state, problem.weights, problem.cost_scale,
                     problem.service_caps, problem.power)
    P, q, G, h, rs, sx, sf, free, _, _, _ = _scale(layout, [raw])
    return ScaledQP(P[0], q[0], G[0], h[0], sx, sf, rs[0], free[0], layout)


def _tight_tau(layout: Layout, state: SystemState, s, cost_scale):
    """Smallest epigraph values for allocation ``s`` (cost_scale-weighted link cost above phi(0))."""
    tau = np.zeros(layout.nlink)
    if layout.nepi:
        traffic = layout.a_link @ s
        bw = layout.topo.link_bandwidth(state)
        u = np.where(bw > 0, traffic / np.where(bw > 0, bw, 1.0), 0.0)
        vals = cost_scale * (layout.epi_a * u[layout.epi_link] + layout.epi_b)
        np.maximum.at(tau, layout.epi_link, vals)
    return tau


def _to_scaled(qp: ScaledQP, state, s, cost_scale):
    tau = _tight_tau(qp.layout, state, s, cost_scale)
    return np.concatenate([s / qp.sx, tau / qp.sf])


def _residuals(qp: ScaledQP, xs, z):
    grad = qp.P @ xs + qp.q
    stat = grad + qp.G.T @ z
    slack = qp.h - qp.G @ xs
    norm = max(1.0, np.abs(grad).max(initial=0.0))
    return {
        "stationarity": float(np.abs(stat).max(initial=0.0) / norm),
        "primal": float(max(0.0, -slack.min(initial=0.0))),
        "dual": float(max(0.0, -z.min(initial=0.0))),
        "complementarity": float(np.abs(z * np.maximum(slack, 0.0)).max(initial=0.0) / norm),
    }


def _multipliers(qp: ScaledQP, xs, rows):
    """Nonnegative multipliers on ``rows`` best matching stationarity at ``xs``."""
    grad = qp.P @ xs + qp.q
    z = np.zeros(qp.h.shape[0])
    rows = np.flatnonzero(rows)
    if rows.size:
        z[rows], _ = scipy.optimize.nnls(qp.G[rows].T, -grad)
    return z


def _independent(G, rows, weight=None):
    """Subset of ``rows`` whose constraint normals are linearly independent.

    Rows with larger ``weight`` (multiplier estimates) are preferred.
    """
    idx = np.flatnonzero(rows)
    if idx.size == 0:
        return rows
    A = G[idx].T
    if weight is not None:
        A = A * (1.0 + weight[idx] / (weight[idx].max() + 1e-300))[None, :]
    _, R, piv = scipy.linalg.qr(A, mode="economic", pivoting=True)
    d = np.abs(np.diag(R))
    rank = int(np.sum(d > 1e-9 * max(d[0], 1e-300))) if d.size else 0
    keep = np.zeros_like(rows)
    keep[idx[piv[:rank]]] = True
    return keep


def _only(mask, values):
    """Mask keeping just the entry of ``mask`` with the most negative value."""
    out = np.zeros_like(mask)
    k = np.flatnonzero(mask)
    out[k[np.argmin(values[k])]] = True
    return out


def _polish(qp: ScaledQP, active, x0=None, z0=None, rounds=8):
    """Solve from a guessed active set; certify with recovered multipliers.

    Primal-dual active-set iteration: re-solve with the active rows tight,
    add violated rows, drop rows whose multiplier came out negative, repeat.
    Degenerate vertices often have more tight rows than unknowns, so every
    equality solve uses an independent subset of the active rows.
    """
    active = np.array(active, dtype=bool)
    npair = qp.layout.npair
    weight = None if z0 is None else np.maximum(z0, 0.0)
    seen = set()
    single = False
    for _ in range(rounds):
        basis = _independent(qp.G, active, weight)
        xs, zb, res = solve_active_set(qp.P, qp.q, qp.G, qp.h, basis, x0=x0,
                                       z0=None if weight is None else weight[basis])
        xs[:npair][active[:npair]] = 0.0   # tight lower bounds are exact zeros
        z = np.zeros(qp.h.shape[0])
        z[basis] = zb
        slack = qp.h - qp.G @ xs
        bad = slack < -VERIFY_TOL
        neg = z < -VERIFY_TOL
        if res > VERIFY_TOL:
            # singular system: the regularized solve runs along a ray of the
            # current face; the first row it crosses belongs in the active set
            if not np.any(bad):
                return xs, None, False
            neg[:] = False
            bad = _only(bad, slack)
        elif not np.any(bad) and not np.any(neg):
            break
        elif single:
            # after a repeated set, move one row at a time
            bad, neg = (_only(bad, slack), np.zeros_like(neg)) if np.any(bad) else (bad, _only(neg, z))
        seen.add(active.tobytes())
        active = (active & ~neg) | bad
        if active.tobytes() in seen:
            if single:
                return xs, None, False
            single = True
        weight = np.maximum(z, 0.0)
        x0 = xs
    else:
        return xs, None, False
    if slack[basis].max(initial=0.0) <= VERIFY_TOL:
        z = np.maximum(z, 0.0)
        resid = _residuals(qp, xs, z)
        if max(resid["stationarity"], resid["complementarity"]) <= VERIFY_TOL:
            return xs, z, True
    z = _multipliers(qp, xs, slack <= VERIFY_TOL)
    resid = _residuals(qp, xs, z)
    return xs, z, max(resid["stationarity"], resid["complementarity"]) <= VERIFY_TOL


def _repair(state: SystemState, topo: Topology, s: np.ndarray, caps) -> np.ndarray:
    """Remove round-off infeasibility by clipping and proportional scale-down.

    All constraint rows have nonnegative coefficients, so shrinking the
    variables of one row never breaks another.
    """
    s = np.maximum(s, 0.0)
    resid = np.maximum(state.residual, 0.0)
    for _ in range(2):
        load = np.bincount(topo.pair_idc, weights=s, minlength=topo.n_idcs)
        over = load > resid
        if np.any(over):
            f = np.where(over, resid / np.where(load > 0, load, 1.0), 1.0)
            s = s * f[topo.pair_idc]
        if topo.links:
            on = topo.pair_link >= 0
            traffic = np.bincount(topo.pair_link[on], weights=(topo.pair_rate * s)[on],
                                  minlength=len(topo.links))
            bw = topo.link_bandwidth(state)
            f = np.where(traffic > bw, bw / np.where(traffic > 0, traffic, 1.0), 1.0)
            s[on] = s[on] * f[topo.pair_link[on]]
        if caps is not None:
            serv = np.bincount(topo.pair_job, weights=topo.pair_rate * s, minlength=topo.n_jobs)
            f = np.where(serv > caps, caps / np.where(serv > 0, serv, 1.0), 1.0)
            s = s * f[topo.pair_job]
    return s


def objective_terms(problem: SlotProblem, alloc: Allocation) -> tuple[float, float]:
    """(optimized objective, dropped constant) for ``alloc``; their sum equals
    cost_scale * slot cost - sum_j w_j * service_j."""
    st, topo, pw, v = problem.state, problem.topo, problem.power, problem.cost_scale
    K = st.active_servers
    y = st.dsj_capacity + alloc.idc_load(topo)
    safe = np.where(K > 0, K, 1.0)
    quad = np.where(K > 0, st.price * pw.rho * y * y / safe, 0.0).sum()
    idle = (st.price * pw.idle * K).sum()
    traffic = alloc.shifted(topo)
    busy = traffic > 0
    at_zero = layout_for(topo, False).phi0
    excess = float((topo.link_costs(traffic, topo.link_bandwidth(st)) - at_zero)[busy].sum())
    intercept = float(at_zero[busy].sum())
    reward = float(problem.weights @ alloc.service(topo))
    return float(v * (quad + excess) - reward), float(v * (idle + intercept))


def format_problem(problem: SlotProblem) -> str:
    """Plain-text dump of a slot program's coefficients for offline inspection."""
    qp = build_qp(problem)
    lines = [f"# slot QP n={qp.P.shape[0]} m={qp.G.shape[0]} sx={qp.sx!r} sf={qp.sf!r}",
             "pairs " + " ".join(f"{i}:{j}" for i, j in problem.topo.pairs),
             "links " + " ".join(f"{i}->{k}" for i, k in problem.topo.links),
             "free " + " ".join(str(int(b)) for b in qp.free)]
    for name, arr in (("P", qp.P), ("q", qp.q), ("G", qp.G), ("h", qp.h)):
        a = np.atleast_2d(arr)
        lines.append(f"{name} {a.shape[0]}x{a.shape[1]}")
        lines += [" ".join(repr(float(v)) for v in row) for row in a]
    return "\n".join(lines) + "\n"


def solve_slot(problem: SlotProblem, tol: float = 1e-6, hint: np.ndarray | None = None,
               max_iter: int = 100, dump_dir: str | None = None) -> SolveReport:
    """Solve one slot program; see the module docstring for the objective."""
    topo, state = problem.topo, problem.state
    state.check(topo)
    dump_dir = dump_dir or os.environ.get("TROUGHFILL_DUMP_DIR")
    if dump_dir:
        os.makedirs(dump_dir, exist_ok=True)
        n_old = len(os.listdir(dump_dir))
        with open(os.path.join(dump_dir, f"slot_{n_old:06d}.txt"), "w") as fh:
            fh.write(format_problem(problem))

    qp = build_qp(problem)
    caps = problem.service_caps
    if not np.any(qp.free):
        alloc = Allocation.zeros(topo)
        obj, const = objective_terms(problem, alloc)
        return SolveReport(alloc, obj, 0.0, 0, const, None, "empty")

    xs = z = None
    method, iters, active = "hint", 0, None
    if hint is not None and hint.shape == qp.h.shape:
        try:
            xs, z, ok = _polish(qp, hint)
        except (np.linalg.LinAlgError, ValueError):
            ok = False
        if ok:
            active = hint
        else:
            xs = z = None

    if xs is None:
        stalled = None
        try:
            res = solve_qp(qp.P[None], qp.q[None], qp.G[None], qp.h[None], tol=IPM_TOL, max_iter=max_iter)
        except QPError as exc:
            res, stalled = exc.result, exc
            if res is None:
                raise SolverError(str(exc)) from exc
        x_ipm, s_ipm, z_ipm = res.x[0], res.s[0], res.z[0]
        iters = res.iterations
        method = "ipm"
        xs, z = x_ipm, z_ipm
        for cand in (z_ipm > s_ipm, s_ipm <= 1e-8 * (1.0 + np.abs(qp.h))):
            try:
                px, pz, ok = _polish(qp, cand, x0=x_ipm, z0=z_ipm)
            except (np.linalg.LinAlgError, ValueError):
                ok = False
            if ok:
                xs, z, active, method = px, pz, cand, "ipm+polish"
                break
        if active is None:
            if stalled is not None and max(res.primal_res, res.dual_res) > tol:
                raise SolverError(str(stalled), best=x_ipm[:qp.layout.npair] * qp.sx,
                                  residuals={"primal": res.primal_res, "dual": res.dual_res,
                                             "gap": res.gap}) from stalled
            active = z_ipm > s_ipm

    s = np.where(qp.free, xs[:qp.layout.npair] * qp.sx, 0.0)
    s = _repair(state, topo, s, caps)
    alloc = Allocation(s)
    xs_final = _to_scaled(qp, state, s, problem.cost_scale)
    resid = _residuals(qp, xs_final, np.maximum(z, 0.0))
    kkt = max(resid.values())
    obj, const = objective_terms(problem, alloc)
    if kkt > tol:
        raise SolverError(f"KKT residual {kkt:.2e} above tolerance {tol:.1e}", best=alloc, residuals=resid)
    return SolveReport(alloc, obj, kkt, iters, const, active, method)


# ---------------------------------------------------------------------------
# certification


@dataclass
class KktReport:
    stationarity: float
    primal: float
    complementarity: float
    multipliers: np.ndarray

    @property
    def worst(self) -> float:
        return max(self.stationarity, self.primal, self.complementarity)

    def ok(self, tol: float) -> bool:
        return self.worst <= tol


def check_kkt(problem: SlotProblem, alloc: Allocation, active_tol: float | None = None) -> KktReport:
    """Certify ``alloc`` independently of how it was produced.

    Multipliers for the nearly-tight rows are recovered by nonnegative least
    squares on the stationarity equation; link terms use the convex hull of
    the maximizing segments' slopes as their subdifferential. Residuals are
    dimensionless (rows equilibrated, objective normalized). Unless
    ``active_tol`` is given, several activity thresholds are tried and the
    best certificate is reported.
    """
    qp = build_qp(problem)
    s = np.asarray(alloc.s, dtype=float)
    if s.shape != (qp.layout.npair,):
        raise DomainError("allocation shape does not match the topology")
    xs = _to_scaled(qp, problem.state, s, problem.cost_scale)
    slack = qp.h - qp.G @ xs
    primal = float(max(0.0, -slack.min(initial=0.0)))
    grad = qp.P @ xs + qp.q
    norm = max(1.0, np.abs(grad).max(initial=0.0))
    best = None
    for t in ([active_tol] if active_tol is not None else [1e-10, 1e-9, 1e-8, 1e-7, 1e-6]):
        z = _multipliers(qp, xs, slack <= t)
        stat = float(np.abs(grad + qp.G.T @ z).max(initial=0.0) / norm)
        comp = float(np.abs(z * np.maximum(slack, 0.0)).max(initial=0.0) / norm)
        rep = KktReport(stat, primal, comp, z)
        if best is None or rep.worst < best.worst:
            best = rep
    return best


# ---------------------------------------------------------------------------
# single-IDC closed form


def sqtf_closed_form(state: SystemState, queues, rates, v: float, power: PowerModel,
                     caps=None) -> Allocation:
    """Threshold policy for one IDC: serve only the job with the largest Q_j r_j.

    The served job gets the full residual capacity when Q r >= 2 V rho alpha,
    the level where marginal energy cost meets Q r when Q r lies between
    2 V rho alpha S_0 / K and that, and nothing below. With ``caps`` (service
    never above backlog) jobs are filled greedily in decreasing Q r order,
    which is the exact optimum of the capped program.
    """
    if state.n_idcs != 1:
        raise DomainError("closed form applies to a single IDC")
    q = np.asarray(getattr(queues, "q", queues), dtype=float)
    r = np.asarray(rates, dtype=float)
    K, s0, alpha = float(state.active_servers[0]), float(state.dsj_capacity[0]), float(state.price[0])
    out = np.zeros_like(q)
    value = q * r
    if K <= 0 or q.size == 0:
        return Allocation(out)
    kappa = 2.0 * v * power.rho * alpha
    resid = K - s0
    if caps is None:
        j = int(np.argmax(value))
        vj = value[j]
        if vj <= 0:
            return Allocation(out)
        if vj >= kappa:
            out[j] = resid
        elif vj >= kappa * s0 / K:
            out[j] = vj * K / kappa - s0
        return Allocation(out)

    caps = np.asarray(caps, dtype=float)
    level = 0.0
    for j in np.argsort(-value, kind="stable"):
        vj = value[j]
        if vj <= 0 or level >= resid:
            break
        target = resid if vj >= kappa else vj * K / kappa - s0
        amount = min(target - level, caps[j] / r[j], resid - level)
        if amount <= 0:
            break
        out[j] = amount
        level += amount
    return Allocation(out)
