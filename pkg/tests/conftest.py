"""Shared builders for small random instances."""
import numpy as np
import pytest

from troughfill.model import IdcSpec, JobClass, PowerModel, SystemState, Topology


def make_topology(n_idcs, jobs, rates, k_max=None, lam=None, bound=None):
    """``jobs`` is a list of (origin, serving set); ``rates`` maps (idc, job) -> r."""
    k_max = k_max if k_max is not None else [100.0] * n_idcs
    m = len(jobs)
    lam = lam if lam is not None else [0.0] * m
    bound = bound if bound is not None else [max(1.0, 2 * l) for l in lam]
    return Topology([IdcSpec(i, float(k)) for i, k in enumerate(k_max)],
                    [JobClass(j, o, g, float(lam[j]), float(bound[j])) for j, (o, g) in enumerate(jobs)],
                    rates)


def single_idc(rates, k=10.0, s0=0.0, price=1.0, lam=None):
    """One IDC serving every job at the given unit rates."""
    m = len(rates)
    topo = make_topology(1, [(0, (0,))] * m, {(0, j): float(r) for j, r in enumerate(rates)},
                         k_max=[k], lam=lam)
    state = SystemState([k], [price], [s0], [[0.0]])
    return topo, state


def random_instance(rng, max_idcs=2, max_jobs=2, k_range=(0.5, 2.0), bw_range=(0.0, 2.0)):
    """Small random (topology, state) pair; origins are not forced into the serving set."""
    n = int(rng.integers(1, max_idcs + 1))
    m = int(rng.integers(1, max_jobs + 1))
    jobs, rates = [], {}
    for j in range(m):
        gamma = tuple(i for i in range(n) if rng.random() < 0.6) or (int(rng.integers(n)),)
        jobs.append((int(rng.integers(n)), gamma))
        for i in gamma:
            rates[(i, j)] = float(rng.uniform(0.5, 3.0))
    k = np.round(rng.uniform(*k_range, size=n), 3)
    topo = make_topology(n, jobs, rates, k_max=k)
    s0 = k * rng.uniform(0.0, 0.6, size=n)
    bw = rng.uniform(*bw_range, size=(n, n))
    np.fill_diagonal(bw, 0.0)
    state = SystemState(k, rng.uniform(0.5, 3.0, size=n), s0, bw)
    return topo, state


@pytest.fixture
def power():
    return PowerModel(0.5)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
