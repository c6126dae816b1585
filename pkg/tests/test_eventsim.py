import math

import numpy as np
import pytest

from wdmqnet.eventsim import (
    DetectorParams, GateConfig, LinkParams, SimulationConfigError, SourceMode, SourceParams,
    apply_dead_time, gate_click_rates, simulate, simulate_pulsed,
)
from wdmqnet.netplan import ChannelPair, Topology, allocate, conjugate_pairs, demo_channels
from wdmqnet.quantum import AnalyzerSetting, Basis, phi_plus, werner
from wdmqnet.timetags import DARK, TimeTagStream, UnsortedStreamError

PLAN2 = allocate(Topology.full(("A", "B")), [ChannelPair(30, 38)])
EDGE = PLAN2.edges()[0]


def _run2(rate=1000.0, det=DetectorParams(), links=LinkParams(), settings="HV", duration=1.0, seed=1, state=None):
    return simulate(PLAN2, {EDGE: state or phi_plus()}, SourceParams(rate), links,
                    {"A": det, "B": det}, {"A": settings, "B": settings}, duration, seed)


def test_dark_only_poisson():
    D, T = 1000.0, 100.0
    res = _run2(rate=0.0, det=DetectorParams(dark_rate=D), duration=T)
    for u in ("A", "B"):
        assert abs(len(res[u]) - D * T) < 3 * math.sqrt(D * T)
        assert (res[u].origin_link == DARK).all()


def test_ideal_link_streams_coincide():
    res = _run2(rate=5000.0, duration=2.0)
    a, b = res["A"], res["B"]
    assert len(a) == len(b) > 0
    np.testing.assert_array_equal(a.time, b.time)
    np.testing.assert_array_equal(a.outcome, b.outcome)  # phi+ in HV is perfectly correlated
    assert res.emitted_pairs["A-B"] == len(a)


def test_same_seed_is_reproducible_and_seed_matters():
    det = DetectorParams(efficiency=0.5, dark_rate=100, jitter_sigma=50e-12)
    r1, r2, r3 = (_run2(det=det, seed=s) for s in (3, 3, 4))
    assert r1["A"].equals(r2["A"]) and r1["B"].equals(r2["B"])
    assert not r1["A"].equals(r3["A"])


def test_adding_a_link_keeps_other_link_streams():
    topo_small = Topology(("A", "B", "C", "D"), [(0, 1)])
    topo_big = Topology(("A", "B", "C", "D"), [(0, 1), (2, 3)])
    pairs = conjugate_pairs(demo_channels())
    det = {u: DetectorParams(efficiency=0.5) for u in "ABCD"}
    out = []
    for topo in (topo_small, topo_big):
        plan = allocate(topo, pairs)
        states = {e: phi_plus() for e in plan.edges()}
        out.append(simulate(plan, states, SourceParams(2000), LinkParams(), det, {u: "HV" for u in "ABCD"}, 1.0, 9))
    assert out[0]["A"].equals(out[1]["A"])
    assert len(out[0]["C"]) == 0 < len(out[1]["C"])


def test_thinning_rates():
    R, eta, T = 20000.0, 0.3, 5.0
    res = _run2(rate=R, det=DetectorParams(efficiency=eta), duration=T)
    for u in ("A", "B"):
        mu = R * eta * T
        assert abs(len(res[u]) - mu) < 4 * math.sqrt(mu)


def test_outcome_statistics_follow_state():
    res = _run2(rate=50000.0, duration=1.0, state=werner(0.85))
    a, b = res["A"], res["B"]
    v = np.mean(np.where(a.outcome == b.outcome, 1.0, -1.0))
    assert v == pytest.approx(0.8, abs=4 * math.sqrt(1 / len(a)))


def test_single_port_analyzer_drops_other_output():
    res = _run2(rate=20000.0, duration=1.0, settings="H")
    assert (res["A"].outcome == 0).all()
    assert len(res["A"]) == pytest.approx(10000, abs=400)


def test_missing_state_is_config_error():
    with pytest.raises(SimulationConfigError):
        simulate(PLAN2, {}, SourceParams(1.0), LinkParams(), {"A": DetectorParams(), "B": DetectorParams()},
                 {"A": "HV", "B": "HV"}, 1.0, 0)


def test_zero_duration_gives_empty_streams():
    res = _run2(duration=0.0)
    assert len(res["A"]) == len(res["B"]) == 0


@pytest.mark.parametrize("kwargs", [{"efficiency": 1.5}, {"dark_rate": -1.0}, {"dead_time": -1e-9}])
def test_detector_validation(kwargs):
    with pytest.raises(SimulationConfigError):
        DetectorParams(**kwargs)


def test_dead_time_examples():
    assert len(apply_dead_time(TimeTagStream.from_times("A", []), 1e-6)) == 0
    s = TimeTagStream.from_times("A", [0, 500_000, 1_500_000])
    assert apply_dead_time(s, 1e-6).time.tolist() == [0, 1_500_000]
    with pytest.raises(UnsortedStreamError):
        apply_dead_time(TimeTagStream.from_times("A", [5, 1]), 1e-6)


def _dead_time_bruteforce(t, dead):
    kept, last = [], None
    for x in t:
        if last is None or x - last >= dead:
            kept.append(x)
            last = x
    return kept


@pytest.mark.parametrize("seed", range(5))
def test_dead_time_matches_sequential_oracle(seed):
    rng = np.random.default_rng(seed)
    t = np.sort(rng.integers(0, 10**7, 3000))
    got = apply_dead_time(TimeTagStream.from_times("A", t), 20e-9).time.tolist()
    assert got == _dead_time_bruteforce(t.tolist(), 20_000)


def test_dead_time_kept_rate():
    r, dead, T = 1e5, 1e-6, 100.0
    rng = np.random.default_rng(11)
    t = np.sort(rng.integers(0, int(T * 1e12), rng.poisson(r * T)))
    kept = len(apply_dead_time(TimeTagStream.from_times("A", t), dead)) / T
    expected = r / (1 + r * dead)  # 90909.09 Hz
    assert expected == pytest.approx(90909.09, abs=0.01)
    assert abs(kept - expected) < 3 * math.sqrt(expected / T)


def test_jitter_broadens_time_differences():
    det = DetectorParams(jitter_sigma=100e-12)
    res = _run2(rate=20000.0, det=det)
    d = (res["B"].time - res["A"].time).astype(float)
    assert np.std(d) == pytest.approx(100 * math.sqrt(2), rel=0.1)


def test_link_delay_applied():
    res = _run2(links=LinkParams(delay={38: 10e-9}))
    np.testing.assert_array_equal(res["B"].time - res["A"].time, 10_000)


# pulsed mode

def _pulsed_source(rate, period=100e-9):
    return SourceParams(rate, SourceMode.PULSED, period)


def test_pulsed_dark_thinning():
    D, T, period, width = 1e5, 10.0, 100e-9, 10e-9
    gates = GateConfig(period, width, {"A": (0.0,), "B": (0.0,)})
    det = DetectorParams(dark_rate=D)
    res = simulate_pulsed(PLAN2, {EDGE: phi_plus()}, _pulsed_source(0.0), LinkParams(), {"A": det, "B": det},
                          {"A": "HV", "B": "HV"}, T, 2, gates)
    mu = D * gates.duty_cycle * T
    for u in ("A", "B"):
        assert abs(len(res[u]) - mu) < 3 * math.sqrt(mu)
        assert (gates.gate_index(u, res[u].time) == 0).all()


def test_pulsed_mismatched_gates_drop_pairs():
    period, width = 100e-9, 2e-9
    gates = GateConfig(period, width, {"A": (0.0,), "B": (50e-9,)})
    res = simulate_pulsed(PLAN2, {EDGE: phi_plus()}, _pulsed_source(1e5), LinkParams(), {"A": DetectorParams(), "B": DetectorParams()},
                          {"A": "HV", "B": "HV"}, 0.1, 2, gates)
    assert len(res["A"]) > 0 and len(res["B"]) == 0


def test_pulsed_pair_probability():
    R, period, T = 1e6, 100e-9, 0.5
    gates = GateConfig(period, 5e-9, {"A": (0.0,), "B": (0.0,)})
    res = simulate_pulsed(PLAN2, {EDGE: phi_plus()}, _pulsed_source(R, period), LinkParams(),
                          {"A": DetectorParams(), "B": DetectorParams()}, {"A": "HV", "B": "HV"}, T, 5, gates)
    n_pulses = round(T / period)
    p = -math.expm1(-R * period)
    assert abs(len(res["A"]) - n_pulses * p) < 4 * math.sqrt(n_pulses * p)
    np.testing.assert_array_equal(res["A"].time % 100_000, 0)


def test_gate_validation():
    with pytest.raises(SimulationConfigError):
        GateConfig(100e-9, 10e-9, {"A": (0.0, 5e-9)})
    with pytest.raises(SimulationConfigError):
        GateConfig(100e-9, 0.0, {"A": (0.0,)})
    with pytest.raises(SimulationConfigError):
        SourceParams(1.0, SourceMode.PULSED, None)
    with pytest.raises(SimulationConfigError):
        simulate_pulsed(PLAN2, {EDGE: phi_plus()}, SourceParams(1.0), LinkParams(),
                        {"A": DetectorParams(), "B": DetectorParams()}, {"A": "HV", "B": "HV"}, 1.0, 0,
                        GateConfig(1e-7, 1e-8, {"A": (0.0,), "B": (0.0,)}))


def test_gate_geometry():
    g = GateConfig(100e-9, 1e-9, {"A": (0.0, 20e-9, 40e-9)})
    assert g.gates_per_pulse == 3
    assert g.duty_cycle == pytest.approx(0.03)
    idx = g.gate_index("A", np.array([0, 999, 1000, 20_500, 140_000, 199_999]))
    assert idx.tolist() == [0, 0, -1, 1, 2, -1]
    s = TimeTagStream.from_times("A", [10, 20_010, 20_020, 240_100])
    assert gate_click_rates(s, g, 1.0) == [1.0, 2.0, 1.0]


def test_aligned_gates_follow_delays():
    links = LinkParams(delay={30: 5e-9, 38: 12e-9})
    g = GateConfig.aligned(PLAN2, links, 100e-9, 2e-9)
    assert g.offsets["A"] == pytest.approx((4e-9,))
    assert g.offsets["B"] == pytest.approx((11e-9,))
