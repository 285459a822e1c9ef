"""Dense primal-dual interior-point method for small, block-structured convex QPs.

Solves

    min  sum_b 1/2 x_b' P_b x_b + q_b' x_b
    s.t. G_b x_b <= h_b            for every block b
         sum_b C_b x_b <= d        (optional coupling rows)

with Mehrotra predictor-corrector steps. Blocks share a shape so the per-block
Newton systems are solved as one batched call; coupling rows enter through a
Woodbury update. Inputs are expected to be reasonably scaled.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.linalg

REFINE_STEPS = 2


class QPError(RuntimeError):
    """Interior-point iteration failed to converge; carries the last iterate."""

    def __init__(self, msg, result=None):
        super().__init__(msg)
        self.result = result


@dataclass
class QPResult:
    x: np.ndarray        # (B, n)
    s: np.ndarray        # (B, m)
    z: np.ndarray        # (B, m)
    sc: np.ndarray       # (k,)
    zc: np.ndarray       # (k,)
    iterations: int
    primal_res: float
    dual_res: float
    gap: float
    objective: float


def _max_step(v, dv):
    neg = dv < 0
    if not np.any(neg):
        return 1.0
    return float(min(1.0, np.min(-v[neg] / dv[neg])))


def solve_qp(P, q, G, h, C=None, d=None, tol=1e-10, max_iter=100, trace=None) -> QPResult:
    P = np.asarray(P, float)
    q = np.asarray(q, float)
    G = np.asarray(G, float)
    h = np.asarray(h, float)
    if q.shape[0] == 1 and (C is None or np.asarray(C).shape[1] == 0):
        return _solve_single(P[0], q[0], G[0], h[0], tol, max_iter, trace)
    nb, n = q.shape
    m = h.shape[1]
    coupled = C is not None and np.asarray(C).shape[1] > 0
    if coupled:
        C = np.asarray(C, float)
        d = np.asarray(d, float)
        k = d.shape[0]
    else:
        C = np.zeros((nb, 0, n))
        d = np.zeros(0)
        k = 0
    Gt = np.swapaxes(G, 1, 2)
    Ct = np.swapaxes(C, 1, 2)

    # least-squares start, slacks pushed into the interior
    H0 = P + Gt @ G + 1e-8 * np.eye(n)
    x = np.linalg.solve(H0, (-q + np.einsum("bmn,bm->bn", G, h))[..., None])[..., 0]
    s = h - np.einsum("bmn,bn->bm", G, x)
    sc = d - np.einsum("bkn,bn->k", C, x)
    s = np.maximum(s, 1.0)
    sc = np.maximum(sc, 1.0)
    z = np.ones_like(s)
    zc = np.ones_like(sc)
    n_cons = nb * m + k

    h_norm = 1.0 + max(np.abs(h).max(initial=0.0), np.abs(d).max(initial=0.0))
    q_norm = 1.0 + np.abs(q).max(initial=0.0)

    def residuals(x, s, z, sc, zc):
        rd = (np.einsum("bij,bj->bi", P, x) + q + np.einsum("bmn,bm->bn", G, z)
              + np.einsum("bkn,k->bn", C, zc))
        rp = np.einsum("bmn,bn->bm", G, x) + s - h
        rpc = np.einsum("bkn,bn->k", C, x) + sc - d
        return rd, rp, rpc

    result = best = None
    best_merit = np.inf
    for it in range(1, max_iter + 1):
        rd, rp, rpc = residuals(x, s, z, sc, zc)
        mu = (np.sum(s * z) + np.sum(sc * zc)) / n_cons
        obj = float(0.5 * np.einsum("bi,bij,bj->", x, P, x) + np.sum(q * x))
        pres = max(np.abs(rp).max(initial=0.0), np.abs(rpc).max(initial=0.0))
        dres = np.abs(rd).max(initial=0.0)
        result = QPResult(x, s, z, sc, zc, it - 1, pres, dres, mu * n_cons, obj)
        merit = max(pres / h_norm, dres / q_norm, mu * n_cons / (1.0 + abs(obj)))
        if merit <= tol:
            return result
        if merit < best_merit:
            best, best_merit = result, merit
        elif merit > 1e3 * best_merit and best_merit < 1e-4:
            # near the solution the Newton systems lose accuracy; keep the best iterate
            raise QPError(f"stalled at merit {best_merit:.2e}", best)

        W = z / s
        Wc = zc / sc
        H = P + Gt @ (W[..., None] * G)
        try:
            Hinv = np.linalg.inv(H)
        except np.linalg.LinAlgError as exc:
            raise QPError(f"singular Newton system at iteration {it}", best or result) from exc
        if coupled:
            Y = Hinv @ Ct                                    # A^-1 C'
            S = np.diag(1.0 / Wc) + np.einsum("bkn,bnl->kl", C, Y)
            S_lu = scipy.linalg.lu_factor(S)

        def reduced_solve(r):
            ar = np.einsum("bij,bj->bi", Hinv, r)
            if coupled:
                u = scipy.linalg.lu_solve(S_lu, np.einsum("bkn,bn->k", C, ar))
                ar = ar - np.einsum("bnk,k->bn", Y, u)
            return ar

        def reduced_apply(dx):
            out = np.einsum("bij,bj->bi", H, dx)
            if coupled:
                out += np.einsum("bkn,k->bn", C, Wc * np.einsum("bkn,bn->k", C, dx))
            return out

        def newton(rc, rcc):
            # rhs after eliminating ds, dz
            t = (z * rp - rc) / s
            tc = (zc * rpc - rcc) / sc
            r = -rd - np.einsum("bmn,bm->bn", G, t) - np.einsum("bkn,k->bn", C, tc)
            dx = reduced_solve(r)
            for _ in range(REFINE_STEPS):
                dx = dx + reduced_solve(r - reduced_apply(dx))
            Gdx = np.einsum("bmn,bn->bm", G, dx)
            Cdx = np.einsum("bkn,bn->k", C, dx)
            ds = -rp - Gdx
            dsc = -rpc - Cdx
            dz = t + W * Gdx
            dzc = tc + Wc * Cdx
            return dx, ds, dz, dsc, dzc

        try:
            dx, ds, dz, dsc, dzc = newton(s * z, sc * zc)
            a_aff = min(_max_step(s, ds), _max_step(z, dz), _max_step(sc, dsc), _max_step(zc, dzc))
            mu_aff = (np.sum((s + a_aff * ds) * (z + a_aff * dz))
                      + np.sum((sc + a_aff * dsc) * (zc + a_aff * dzc))) / n_cons
            sigma = (mu_aff / mu) ** 3
            dx, ds, dz, dsc, dzc = newton(s * z + ds * dz - sigma * mu, sc * zc + dsc * dzc - sigma * mu)
        except np.linalg.LinAlgError as exc:
            raise QPError(f"singular Newton system at iteration {it}", best or result) from exc
        a = min(1.0, 0.99 * min(_max_step(s, ds), _max_step(z, dz), _max_step(sc, dsc), _max_step(zc, dzc)))
        if trace is not None:
            trace.append((it, merit, pres, dres, mu * n_cons, a, sigma,
                          _max_step(s, ds), _max_step(z, dz), _max_step(sc, dsc), _max_step(zc, dzc)))
        x = x + a * dx
        s = s + a * ds
        z = z + a * dz
        sc = sc + a * dsc
        zc = zc + a * dzc
        if not (np.all(np.isfinite(x)) and np.all(np.isfinite(z))):
            raise QPError(f"non-finite iterate at iteration {it}", best or result)

    result = best or result
    raise QPError(f"no convergence in {max_iter} iterations "
                  f"(primal {result.primal_res:.2e}, dual {result.dual_res:.2e}, gap {result.gap:.2e})",
                  result)


def _solve_single(P, q, G, h, tol, max_iter, trace):
    """Unbatched, uncoupled variant of :func:`solve_qp` (same iteration, less overhead)."""
    n = q.shape[0]
    m = h.shape[0]
    Gt = G.T
    x = np.linalg.solve(P + Gt @ G + 1e-8 * np.eye(n), -q + Gt @ h)
    s = np.maximum(h - G @ x, 1.0)
    z = np.ones(m)
    h_norm = 1.0 + np.abs(h).max(initial=0.0)
    q_norm = 1.0 + np.abs(q).max(initial=0.0)
    empty = np.zeros(0)

    def pack(x, s, z, it, pres, dres, gap, obj):
        return QPResult(x[None], s[None], z[None], empty, empty, it, pres, dres, gap, obj)

    result = best = None
    best_merit = np.inf
    for it in range(1, max_iter + 1):
        Px = P @ x
        rd = Px + q + Gt @ z
        rp = G @ x + s - h
        gap = float(s @ z)
        mu = gap / m
        obj = float(0.5 * x @ Px + q @ x)
        pres = float(np.abs(rp).max(initial=0.0))
        dres = float(np.abs(rd).max(initial=0.0))
        result = pack(x, s, z, it - 1, pres, dres, gap, obj)
        merit = max(pres / h_norm, dres / q_norm, gap / (1.0 + abs(obj)))
        if merit <= tol:
            return result
        if merit < best_merit:
            best, best_merit = result, merit
        elif merit > 1e3 * best_merit and best_merit < 1e-4:
            raise QPError(f"stalled at merit {best_merit:.2e}", best)

        W = z / s
        H = P + (Gt * W) @ G
        try:
            cf = scipy.linalg.cho_factor(H, check_finite=False)
        except np.linalg.LinAlgError as exc:
            raise QPError(f"singular Newton system at iteration {it}", best or result) from exc

        def newton(rc):
            t = (z * rp - rc) / s
            r = -rd - Gt @ t
            dx = scipy.linalg.cho_solve(cf, r, check_finite=False)
            dx = dx + scipy.linalg.cho_solve(cf, r - H @ dx, check_finite=False)
            Gdx = G @ dx
            return dx, -rp - Gdx, t + W * Gdx

        dx, ds, dz = newton(s * z)
        a_aff = min(_max_step(s, ds), _max_step(z, dz))
        mu_aff = float((s + a_aff * ds) @ (z + a_aff * dz)) / m
        sigma = (mu_aff / mu) ** 3
        dx, ds, dz = newton(s * z + ds * dz - sigma * mu)
        a = min(1.0, 0.99 * min(_max_step(s, ds), _max_step(z, dz)))
        if trace is not None:
            trace.append((it, merit, pres, dres, gap, a, sigma))
        x = x + a * dx
        s = s + a * ds
        z = z + a * dz
        if not (np.all(np.isfinite(x)) and np.all(np.isfinite(z))):
            raise QPError(f"non-finite iterate at iteration {it}", best or result)
    result = best or result
    raise QPError(f"no convergence in {max_iter} iterations "
                  f"(primal {result.primal_res:.2e}, dual {result.dual_res:.2e}, gap {result.gap:.2e})",
                  result)


def solve_active_set(P, q, G, h, active, x0=None, z0=None, delta=1e-9, refine=4, tol=1e-12):
    """Solve the equality-constrained QP with rows ``active`` held tight.

    Uses a delta-regularized KKT factorization with iterative refinement, which
    copes with dependent active rows and with directions where P is singular.
    Returns (x, z_active, residual) for a single (unbatched) problem.
    """
    n = q.shape[0]
    Ga = G[active]
    na = Ga.shape[0]
    K = np.zeros((n + na, n + na))
    K[:n, :n] = P
    K[:n, n:] = Ga.T
    K[n:, :n] = Ga
    rhs = np.concatenate([-q, h[active]])
    Kreg = K.copy()
    Kreg[:n, :n] += delta * np.eye(n)
    Kreg[n:, n:] -= delta * np.eye(na)
    lu = scipy.linalg.lu_factor(Kreg, check_finite=False)
    sol = np.zeros(n + na)
    if x0 is not None:
        sol[:n] = x0
    if z0 is not None:
        sol[n:] = z0
    scale = 1.0 + np.abs(rhs).max(initial=0.0)
    res = rhs - K @ sol
    for _ in range(refine):
        sol = sol + scipy.linalg.lu_solve(lu, res, check_finite=False)
        res = rhs - K @ sol
        if np.abs(res).max(initial=0.0) <= tol * scale:
            break
    return sol[:n], sol[n:], float(np.abs(res).max(initial=0.0) / scale)
