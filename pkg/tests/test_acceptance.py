"""Acceptance criteria 1-10, each printing one PASS/FAIL line."""
import math
import time

import numpy as np
import pytest

from oracles import correlate_bruteforce, greedy_bruteforce, plan_is_valid
from wdmqnet import experiment as exp
from wdmqnet.analytic import (
    ScalingParams, default_eta_grid, fidelity_curve, link_rates, loss_at_fidelity, max_users_at_loss, singles_rate,
)
from wdmqnet.coincidence import (
    AnalysisConfig, count_coincidences, cross_correlate, find_delay, link_filter, offset_accidentals,
    qber_from_fidelity, secure_key_rate, true_pair_mask,
)
from wdmqnet.eventsim import (
    DetectorParams, GateConfig, LinkParams, SourceMode, SourceParams, gate_click_rates, simulate, simulate_pulsed,
)
from wdmqnet.netplan import (
    DEFAULT_GRID, ChannelPair, Topology, allocate, channels_required, conjugate_pairs, demo_channels,
    itu_wavelength, validate_plan,
)
from wdmqnet.quantum import phi_plus
from wdmqnet.timetags import TimeTagStream

CURVE_P = 1.7e6
CURVE_D = 500.0
TAUS = (1e-9, 100e-12)


@pytest.fixture
def report(capsys):
    def _report(number, title, ok, detail=""):
        with capsys.disabled():
            print(f"\n[acceptance {number:>2}] {'PASS' if ok else 'FAIL'}  {title}  {detail}")
        assert ok, f"criterion {number} failed: {detail}"
    return _report


def test_01_table_wavelengths(report):
    worst = 0.0
    for (c1, c2), ((w1, w2), _) in exp.SOURCE_CHANNELS.items():
        worst = max(worst, abs(itu_wavelength(c1) - w1), abs(itu_wavelength(c2) - w2))
    report(1, "demonstration wavelengths", worst <= 0.01 and len(exp.SOURCE_CHANNELS) * 2 == 12,
           f"max |err| = {worst:.4f} nm over 12 channels")


def test_02_plan_correctness(report):
    t0 = time.perf_counter()
    plan = allocate(Topology.full(exp.USERS), conjugate_pairs(demo_channels()))
    ok = (
        len(plan.edges()) == 6
        and all(len(plan.user_mux[u]) == 3 for u in exp.USERS)
        and all(p.signal_channel + p.idler_channel == 68 for p in plan.edge_assignment.values())
        and validate_plan(plan, DEFAULT_GRID) == []
    )
    for n in range(2, 9):
        half = channels_required(n) // 2
        chans = list(range(34 - half, 34)) + list(range(35, 35 + half))
        p = allocate(Topology.full([f"u{k}" for k in range(n)]), conjugate_pairs(chans))
        ok = ok and plan_is_valid(p, n) and validate_plan(p, DEFAULT_GRID) == []
    dt = time.perf_counter() - t0
    report(2, "plan correctness", ok and dt < 1.0, f"6 edges / 3 channels each / sums 68; N=2..8 valid; {dt:.3f} s")


def test_03_analytic_formulas(report):
    s9 = singles_rate(ScalingParams(9, CURVE_P, 0.01, CURVE_D, 1e-9))
    c4, acc4, _ = link_rates(ScalingParams(4, CURVE_P, 0.01, CURVE_D, 1e-9))
    s4 = singles_rate(ScalingParams(4, CURVE_P, 0.01, CURVE_D, 1e-9))
    hand = {
        "S(N=9)": (s9, 500 + 8 * 8.5e5 * 0.01 - 7 * 8.5e5 * 1e-4),
        "C_true(N=4)": (c4, 8.5e5 * 1e-4),
        "S(N=4)": (s4, 500 + 3 * 8500 - 2 * 85),
        "Acc(N=4)": (acc4, 1e-9 * 25830.0**2),
    }
    ok = all(math.isclose(got, want, rel_tol=1e-10) for got, want in hand.values())
    ok = ok and math.isclose(s9, 67905.0, rel_tol=1e-10) and math.isclose(s4, 25830.0, rel_tol=1e-10)
    # N=2 reduction: D + (P/2) eta, no subtraction term
    for eta in np.linspace(0, 1, 41):
        for P in (0.0, 1e5, 1.7e6, 1e8):
            for D in (0.0, 500.0, 1e4):
                ok = ok and math.isclose(singles_rate(ScalingParams(2, P, eta, D, 1e-9)), D + P / 2 * eta,
                                         rel_tol=1e-12, abs_tol=1e-12)
    report(3, "analytic formulas", ok, ", ".join(f"{k}={v[0]:.6g}" for k, v in hand.items()))


def test_04_monte_carlo_vs_analytic(report):
    t0 = time.perf_counter()
    users = ("A", "B", "C", "D")
    plan = allocate(Topology.full(users), conjugate_pairs(demo_channels()))
    eta, D, tau_ps, T = 0.1, 500.0, 1000, 100.0
    det = {u: DetectorParams(efficiency=eta, dark_rate=D) for u in users}
    res = simulate(plan, {e: phi_plus() for e in plan.edges()}, SourceParams(5e4), LinkParams(), det,
                   {u: "HV" for u in users}, T, 20240)
    delays = {(a, b): 0 for i, a in enumerate(users) for b in users[i + 1:]}
    xa, xb = link_filter(res.streams, ("A", "B"), delays, tau_ps)
    c = count_coincidences(xa, xb, 0, tau_ps)
    n_true = int(true_pair_mask(xa, xb, c).sum())
    n_acc = c.count - n_true

    p = ScalingParams(4, 1e5, eta, D, tau_ps * 1e-12)
    S_th = singles_rate(p)
    C_th, A_th, _ = link_rates(p)
    checks = {
        "S_A": (len(xa), S_th * T),
        "S_B": (len(xb), S_th * T),
        "C_true": (n_true, C_th * T),
        "Acc": (n_acc, A_th * T),
    }
    ok = all(abs(got - want) <= 4 * math.sqrt(want) for got, want in checks.values())
    off = offset_accidentals(xa, xb, 0, tau_ps, [k * 10_000 for k in (-4, -3, -2, -1, 1, 2, 3, 4)])
    dt = time.perf_counter() - t0
    detail = ", ".join(f"{k} {g}/{w:.1f}" for k, (g, w) in checks.items())
    report(4, "Monte Carlo vs analytic", ok and dt < 60,
           f"{detail}; offset-window Acc {off:.1f}; {dt:.1f} s")


def test_05_fidelity_curves(report):
    t0 = time.perf_counter()
    etas = default_eta_grid(241, 0.0, 60.0)
    ok = True
    curves = {}
    for tau in TAUS:
        for n in range(2, 10):
            f = np.array([pt.fidelity for pt in fidelity_curve(n, tau, CURVE_P, CURVE_D, etas)])
            # ascending eta = descending loss: fidelity must rise with eta
            ok = ok and bool(np.all(np.diff(f) > 0))
            curves[(tau, n)] = f
        for n in range(2, 9):
            ok = ok and bool(np.all(curves[(tau, n + 1)][:-1] < curves[(tau, n)][:-1]))
    crossings = []
    for n in range(2, 10):
        l1 = loss_at_fidelity(n, 1e-9, CURVE_P, CURVE_D)
        l2 = loss_at_fidelity(n, 100e-12, CURVE_P, CURVE_D)
        crossings.append((n, l1, l2))
        ok = ok and l2 > l1
    dt = time.perf_counter() - t0
    worst = min(l2 - l1 for _, l1, l2 in crossings)
    report(5, "fidelity-vs-loss curves", ok and dt < 5,
           f"monotone, ordered in N; 100 ps gains >= {worst:.2f} dB at F=0.81; {dt:.2f} s")


def test_06_loss_budget(report):
    claims = [(30.0, 1e-9, 12), (43.0, 100e-12, 25)]
    ok = True
    parts = []
    for loss, tau, n_claim in claims:
        nominal = max_users_at_loss(loss, tau, CURVE_P, CURVE_D)
        relaxed = max_users_at_loss(loss - 3.0, tau, CURVE_P, CURVE_D)
        ok = ok and (nominal >= n_claim or relaxed >= n_claim)
        parts.append(f"{loss:.0f} dB/{tau * 1e12:.0f} ps: N_max={nominal} (at -3 dB: {relaxed}, claim {n_claim})")
    report(6, "loss-budget claims", ok, "; ".join(parts))


def test_07_experiment_scale(report):
    t0 = time.perf_counter()
    cal = exp.calibrate()
    plan = exp.demo_plan()
    res = simulate(plan, exp.source_states(plan), cal.source(), cal.link_params(exp.demo_delays(plan)),
                   exp.DETECTORS, {u: "H" for u in exp.USERS}, exp.MEASUREMENT_TIME_S, 7)
    cfg = AnalysisConfig()
    singles_ratio = {u: len(res[u]) / exp.SINGLES_HHHH[u] for u in exp.USERS}
    coinc_ratio = {}
    for (a, b), n in exp.COINCIDENCES_HHHH.items():
        d = find_delay(cross_correlate(res[a], res[b], cfg), cfg)
        coinc_ratio[(a, b)] = count_coincidences(res[a], res[b], d, cfg.coincidence_window_ps).count / n
    ok = all(abs(r - 1) <= 0.10 for r in singles_ratio.values())
    ok = ok and all(0.5 <= r <= 2.0 for r in coinc_ratio.values())
    dt = time.perf_counter() - t0
    s_txt = " ".join(f"{u[0]}:{r:.3f}" for u, r in singles_ratio.items())
    c_txt = " ".join(f"{a[0]}{b[0]}:{r:.2f}" for (a, b), r in coinc_ratio.items())
    report(7, "experiment-scale simulation", ok and dt < 120, f"singles/meas {s_txt}; coinc/meas {c_txt}; {dt:.1f} s")


def test_08_key_rate_bracket(report):
    rates = [secure_key_rate(raw, qber_from_fidelity(f))
             for raw in np.linspace(10, 34, 25) for f in np.linspace(0.85, 0.95, 21)]
    lo, hi = min(rates), max(rates)
    b_lo, b_hi = exp.SECURE_RATE_BRACKET_HZ
    ok = hi >= b_lo / 1.5 and lo <= b_hi * 1.5
    report(8, "key-rate bracket", ok, f"secure {lo:.2f}-{hi:.2f} Hz vs [{b_lo / 1.5:.1f}, {b_hi * 1.5:.1f}] Hz")


def test_09_oracle_equivalence(report):
    t0 = time.perf_counter()
    rng = np.random.default_rng(990)
    bad = 0
    for trial in range(1000):
        na, nb = rng.integers(0, 2001, 2)
        bw = int(rng.choice([1, 10, 100, 250]))
        nbins = int(rng.integers(1, 200))
        start = int(rng.integers(-100, 100)) * bw
        tau = int(rng.integers(1, 3000))
        delay = int(rng.integers(-5000, 5000))
        span = int(max(nb * tau, rng.integers(10_000, 10**7)))  # keeps windows sparse enough to matter
        ta = np.sort(rng.integers(0, span, na))
        tb = np.sort(rng.integers(0, span, nb))
        if trial % 7 == 0 and na and nb:
            tb = np.sort(np.concatenate([tb, ta[: nb // 2] + delay])).astype(np.int64)
        a, b = TimeTagStream.from_times("A", ta), TimeTagStream.from_times("B", tb)
        cfg = AnalysisConfig(delay_range_ps=(start, start + nbins * bw), bin_width_ps=bw)
        h = cross_correlate(a, b, cfg)
        ref = correlate_bruteforce(ta, tb, start, bw, nbins)
        c = count_coincidences(a, b, delay, tau)
        pairs = greedy_bruteforce(ta, tb, delay, tau)
        same = np.array_equal(h.counts, ref) and c.count == len(pairs) and \
            list(zip(c.index_a.tolist(), c.index_b.tolist())) == pairs
        bad += not same
    dt = time.perf_counter() - t0
    report(9, "oracle equivalence", bad == 0 and dt < 30, f"{1000 - bad}/1000 stream pairs identical; {dt:.1f} s")


def test_10_pulsed_scheme(report):
    t0 = time.perf_counter()
    plan = allocate(Topology.full(("A", "B")), [ChannelPair(30, 38)])
    states = {plan.edges()[0]: phi_plus()}
    period, width, tau_ps = 100e-9, 10e-9, 1000
    dark = 1e6
    det = {u: DetectorParams(efficiency=0.5, dark_rate=dark) for u in ("A", "B")}
    settings = {"A": "HV", "B": "HV"}

    def audited_accidental_rate(res, T):
        c = count_coincidences(res["A"], res["B"], 0, tau_ps)
        return (c.count - int(true_pair_mask(res["A"], res["B"], c).sum())) / T

    T_cw, T_p = 2.0, 20.0
    cw = simulate(plan, states, SourceParams(1e4), LinkParams(), det, settings, T_cw, 31)
    gates = GateConfig(period, width, {"A": (0.0,), "B": (0.0,)})
    src = SourceParams(1e4, SourceMode.PULSED, period, pulse_width=width)
    pulsed = simulate_pulsed(plan, states, src, LinkParams(), det, settings, T_p, 31, gates)
    r_cw = audited_accidental_rate(cw, T_cw)
    r_p = audited_accidental_rate(pulsed, T_p)
    ratio = r_p / r_cw
    d = gates.duty_cycle
    ok_ratio = abs(ratio / d - 1) <= 0.20

    users4 = ("A", "B", "C", "D")
    plan4 = allocate(Topology.full(users4), conjugate_pairs(demo_channels()))
    gates3 = GateConfig(period, 3e-9, {u: (0.0, 20e-9, 40e-9) for u in users4})
    det4 = {u: DetectorParams(dark_rate=1e7, dead_time=50e-9) for u in users4}
    src0 = SourceParams(0.0, SourceMode.PULSED, period)
    r3 = simulate_pulsed(plan4, {e: phi_plus() for e in plan4.edges()}, src0, LinkParams(), det4,
                         {u: "HV" for u in users4}, 0.2, 5, gates3)
    per_gate = [gate_click_rates(r3[u], gates3, 0.2) for u in users4]
    ok_dead = all(g[1] < g[0] and g[2] < g[0] for g in per_gate)
    dt = time.perf_counter() - t0
    g_txt = "/".join(f"{x / 1e3:.0f}" for x in per_gate[0])
    report(10, "pulsed scheme", ok_ratio and ok_dead and dt < 60,
           f"acc pulsed/CW = {ratio:.4f} vs duty {d:.2f} ({ratio / d:.3f}x); gate rates kHz {g_txt}; {dt:.1f} s")
