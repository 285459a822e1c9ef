import numpy as np
import pytest

from troughfill.controllers import BesController, QtfController, SstfController, StateDistribution
from troughfill.model import Allocation, DomainError, PowerModel, SystemState
from troughfill.sim import (ControllerFailure, Scenario, compare, run, sample_state, substream,
                            windowed_rates)

from conftest import make_topology, single_idc


def two_state_scenario(horizon=500, seed=0, lam=(2.0, 1.0)):
    topo, a = single_idc([1.0, 1.5], k=10.0, s0=2.0, price=1.0, lam=list(lam))
    _, b = single_idc([1.0, 1.5], k=10.0, s0=4.0, price=3.0)
    return Scenario(topo, horizon, seed, PowerModel(0.5), states=StateDistribution.uniform([a, b]))


def test_sample_state_single_and_frequencies():
    _, a = single_idc([1.0], s0=1.0)
    _, b = single_idc([1.0], s0=2.0)
    rng = substream(0, "test")
    assert all(sample_state(StateDistribution.uniform([a]), rng) is a for _ in range(50))
    dist = StateDistribution.uniform([a, b])
    draws = [sample_state(dist, rng) is a for _ in range(100_000)]
    assert np.mean(draws) == pytest.approx(0.5, abs=0.01)


def test_sample_state_deterministic():
    _, a = single_idc([1.0], s0=1.0)
    _, b = single_idc([1.0], s0=2.0)
    dist = StateDistribution([a, b], [0.3, 0.7])
    r1, r2 = substream(5, "s"), substream(5, "s")
    assert [sample_state(dist, r1) is a for _ in range(200)] == [sample_state(dist, r2) is a for _ in range(200)]


def test_substreams_are_independent_of_each_other():
    a = substream(1, "arrivals").random(5)
    b = substream(1, "state-sampling").random(5)
    assert not np.allclose(a, b)
    np.testing.assert_array_equal(a, substream(1, "arrivals").random(5))


@pytest.mark.parametrize("factory", [
    lambda topo, lam, pw: QtfController(topo, 1.0, pw),
    lambda topo, lam, pw: SstfController(topo, lam, 0.05, pw),
    lambda topo, lam, pw: BesController(topo),
])
def test_replay_and_conservation(factory):
    sc = two_state_scenario()
    m = run(sc, factory(sc.topo, sc.lam, sc.power))
    assert m.replay_error() == 0.0
    assert m.conservation_error() <= 1e-9 * m.arrivals.sum()
    assert m.cost.shape == (500,) and m.queues.shape == (500, 2)
    np.testing.assert_allclose(m.cost, m.energy + m.shift)


def test_zero_arrivals_keep_queues_empty():
    topo, a = single_idc([1.0, 2.0], k=10.0, s0=2.0, price=2.0)
    sc = Scenario(topo, 50, 0, PowerModel(0.5), states=StateDistribution.uniform([a]),
                  arrivals=np.zeros((50, 2)))
    m = run(sc, QtfController(topo, 1.0, sc.power))
    assert np.all(m.queues == 0) and np.all(m.served == 0)
    np.testing.assert_allclose(m.cost, 2.0 * (5.0 + 0.5 * 4 / 10))


def test_small_v_delay_near_one():
    sc = two_state_scenario(horizon=2000)
    m = run(sc, QtfController(sc.topo, 1e-3, sc.power))
    assert m.overall_delay == pytest.approx(1.0, abs=0.05)


def test_run_deterministic():
    a = run(two_state_scenario(seed=4), QtfController(two_state_scenario().topo, 2.0, PowerModel(0.5)))
    b = run(two_state_scenario(seed=4), QtfController(two_state_scenario().topo, 2.0, PowerModel(0.5)))
    assert a.to_csv() == b.to_csv()
    c = run(two_state_scenario(seed=5), QtfController(two_state_scenario().topo, 2.0, PowerModel(0.5)))
    assert a.to_csv() != c.to_csv()


def test_trace_scenario_uses_state_series():
    topo, a = single_idc([1.0], k=10.0)
    series = [SystemState([10.0], [float(t % 3 + 1)], [1.0], [[0.0]]) for t in range(20)]
    sc = Scenario(topo, 20, state_series=series, arrivals=np.full((20, 1), 2.0), power=PowerModel(0.5))
    assert not sc.ergodic
    idx, arr = sc.realize()
    assert idx is None and arr.shape == (20, 1)
    m = run(sc, BesController(topo))
    assert m.replay_error() == 0.0
    assert sc.lam.tolist() == [2.0]


def test_scenario_validation():
    topo, a = single_idc([1.0])
    with pytest.raises(DomainError):
        Scenario(topo, 0, states=StateDistribution.uniform([a]))
    with pytest.raises(DomainError):
        Scenario(topo, 5)
    with pytest.raises(DomainError):
        Scenario(topo, 5, state_series=[a] * 3)
    with pytest.raises(DomainError):
        Scenario(topo, 5, states=StateDistribution.uniform([a]), arrivals=-np.ones((5, 1)))


class Greedy:
    name = "greedy"

    def step(self, t, state, w, q):
        return Allocation([100.0])


class Crashing:
    name = "crash"

    def step(self, t, state, w, q):
        raise RuntimeError("boom")


def test_infeasible_controller_aborts_with_slot():
    sc = two_state_scenario(horizon=10)
    topo = make_topology(1, [(0, (0,))], {(0, 0): 1.0}, k_max=[10.0], lam=[1.0])
    sc = Scenario(topo, 10, 0, PowerModel(0.5), states=sc.states)
    with pytest.raises(ControllerFailure) as err:
        run(sc, Greedy())
    assert err.value.slot == 0 and err.value.diagnostics


def test_compare_isolates_failures():
    topo = make_topology(1, [(0, (0,))], {(0, 0): 1.0}, k_max=[10.0], lam=[1.0])
    _, a = single_idc([1.0], k=10.0, s0=1.0)
    sc = Scenario(topo, 30, 0, PowerModel(0.5), states=StateDistribution.uniform([a]))
    rows = compare(sc, {"bad": Crashing, "bes": lambda: BesController(topo),
                        "qtf": lambda: QtfController(topo, 1.0, sc.power)})
    assert [r.controller for r in rows] == ["bad", "bes", "qtf"]
    assert rows[0].metrics is None and "boom" in rows[0].error
    assert rows[1].metrics is not None and rows[2].metrics is not None
    # both see the same arrivals
    np.testing.assert_array_equal(rows[1].metrics.arrivals, rows[2].metrics.arrivals)


def test_windowed_rates():
    served = np.arange(1.0, 13.0).reshape(6, 2)
    lam = np.array([2.0, 4.0])
    whole = windowed_rates(served, lam, 6)
    np.testing.assert_allclose(whole, [served.sum(axis=0) / (lam * 6)])
    np.testing.assert_allclose(windowed_rates(served, lam, 1), served / lam)
    # trailing partial window is dropped
    assert windowed_rates(served, lam, 4).shape == (1, 2)
    for bad in (0, 7):
        with pytest.raises(DomainError):
            windowed_rates(served, lam, bad)


def test_summary_and_csv_shape():
    m = run(two_state_scenario(horizon=20), BesController(two_state_scenario().topo))
    lines = m.to_csv().splitlines()
    assert lines[0] == "t,cost_total,energy,shift,Q_1,Q_2,served_1,served_2"
    assert len(lines) == 21
    s = m.summary()
    assert s["horizon"] == 20 and len(s["delay"]) == 2
