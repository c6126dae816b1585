"""From time-tag streams to per-link coincidence metrics."""
from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .netplan import Edge, MultiplexPlan
from .quantum import AnalyzerSetting, Basis
from .timetags import PS_PER_S, TimeTagStream, UnsortedStreamError

# minimum Bell-state fidelity for a positive key, as reported for the experiment
KEY_FIDELITY_THRESHOLD = 0.81

_CHUNK = 4_000_000


class NoLinkDetected(RuntimeError):
    pass


class CampaignError(ValueError):
    pass


@dataclass(frozen=True)
class AnalysisConfig:
    coincidence_window_ps: int = 1000
    bin_width_ps: int = 100
    delay_range_ps: tuple[int, int] = (-50_000, 50_000)
    peak_threshold_sigma: float = 6.0
    key_basis: Basis = Basis.HV
    sifting_factor: float = 0.5
    ec_efficiency: float = 1.0
    noise_filter: str = "none"  # none | multiuser | link

    def __post_init__(self):
        if self.coincidence_window_ps <= 0:
            raise ValueError("coincidence window must be positive")
        if self.bin_width_ps <= 0:
            raise ValueError("bin width must be positive")
        lo, hi = self.delay_range_ps
        if hi <= lo or (hi - lo) % self.bin_width_ps:
            raise ValueError("delay range must be a positive multiple of the bin width")
        if self.noise_filter not in ("none", "multiuser", "link"):
            raise ValueError(f"unknown noise filter {self.noise_filter!r}")

    @property
    def tau_s(self) -> float:
        return self.coincidence_window_ps / PS_PER_S


@dataclass(frozen=True)
class CorrelationHistogram:
    """Counts of t_b - t_a; bin k is centred on ``start_ps + k * bin_width_ps``."""

    start_ps: int
    bin_width_ps: int
    counts: np.ndarray

    @property
    def centers(self) -> np.ndarray:
        return self.start_ps + self.bin_width_ps * np.arange(len(self.counts), dtype=np.int64)

    def __add__(self, other: "CorrelationHistogram") -> "CorrelationHistogram":
        if (self.start_ps, self.bin_width_ps, len(self.counts)) != (other.start_ps, other.bin_width_ps, len(other.counts)):
            raise ValueError("histograms have different binning")
        return CorrelationHistogram(self.start_ps, self.bin_width_ps, self.counts + other.counts)

    def to_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["delay_ps", "counts"])
            for c, n in zip(self.centers.tolist(), self.counts.tolist()):
                w.writerow([c, n])


def _require_sorted(*streams: TimeTagStream) -> None:
    for s in streams:
        if not s.is_sorted():
            raise UnsortedStreamError(f"stream {s.detector!r} is not sorted")


def _expand_ranges(start: np.ndarray, n: np.ndarray) -> np.ndarray:
    total = int(n.sum())
    offs = np.repeat(np.cumsum(n) - n, n)
    return np.repeat(start, n) + (np.arange(total, dtype=np.int64) - offs)


def cross_correlate(a: TimeTagStream, b: TimeTagStream, cfg: AnalysisConfig) -> CorrelationHistogram:
    """Histogram of t_b - t_a over the configured delay range.

    For every tag of ``a`` the window of partner tags in ``b`` is located by
    binary search on the sorted stream (a sliding window), and only the
    pairs inside the window are expanded, chunk by chunk.
    """
    _require_sorted(a, b)
    lo, hi = cfg.delay_range_ps
    bw = cfg.bin_width_ps
    nbins = (hi - lo) // bw
    half = bw // 2
    counts = np.zeros(nbins, dtype=np.int64)
    ta, tb = a.time, b.time
    first = np.searchsorted(tb, ta + (lo - half), side="left")
    last = np.searchsorted(tb, ta + (lo - half + nbins * bw), side="left")
    n = last - first
    csum = np.cumsum(n)
    pos = 0
    while pos < len(ta):
        base = csum[pos - 1] if pos else 0
        end = int(np.searchsorted(csum, base + _CHUNK, side="right"))
        end = max(end, pos + 1)
        sl = slice(pos, end)
        idx = _expand_ranges(first[sl], n[sl])
        if len(idx):
            d = tb[idx] - np.repeat(ta[sl], n[sl])
            counts += np.bincount((d - (lo - half)) // bw, minlength=nbins)[:nbins]
        pos = end
    return CorrelationHistogram(lo, bw, counts)


def find_delay(hist: CorrelationHistogram, cfg: AnalysisConfig) -> int:
    """Centre of the highest bin, if it stands out of the accidental floor.

    The floor is the mean of all other bins; the peak must exceed it by
    ``peak_threshold_sigma`` Poisson standard deviations (at least one count
    of spread is assumed so that sparse histograms do not yield spurious
    links).
    """
    c = hist.counts
    if len(c) == 0:
        raise ValueError("empty histogram")
    k = int(np.argmax(c))
    peak = c[k]
    floor = (c.sum() - peak) / (len(c) - 1) if len(c) > 1 else 0.0
    if peak <= 0 or peak < floor + cfg.peak_threshold_sigma * math.sqrt(max(floor, 1.0)):
        raise NoLinkDetected(f"no significant correlation peak (max {peak}, floor {floor:.2f})")
    return int(hist.centers[k])


@dataclass(frozen=True)
class Coincidences:
    count: int
    index_a: np.ndarray
    index_b: np.ndarray


def count_coincidences(a: TimeTagStream, b: TimeTagStream, delay_ps: int, tau_ps: int) -> Coincidences:
    """Greedy earliest-match pairing with |t_b - t_a - delay| <= tau/2.

    Tags of ``a`` are visited in time order and each takes the earliest
    still-unused tag of ``b`` inside its window.
    """
    _require_sorted(a, b)
    A2 = 2 * a.time
    B2 = 2 * (b.time - np.int64(delay_ps))
    j0 = np.searchsorted(B2, A2 - tau_ps, side="left")
    j1 = np.searchsorted(B2, A2 + tau_ps, side="right")
    cand = np.flatnonzero(j1 > j0)
    j0, j1 = j0[cand], j1[cand]
    # The chosen partner of candidate k is max(j0[k], chosen[k-1] + 1) as long
    # as it stays inside the window; that recurrence is a running maximum.
    matched_a, matched_b = [], []
    last = -1
    pos = 0
    K = len(cand)
    while pos < K:
        i = np.arange(K - pos, dtype=np.int64)
        c = i + np.maximum.accumulate(np.maximum(j0[pos:] - i, last + 1))
        bad = np.flatnonzero(c >= j1[pos:])
        stop = int(bad[0]) if len(bad) else K - pos
        matched_a.append(cand[pos:pos + stop])
        matched_b.append(c[:stop])
        if stop:
            last = int(c[stop - 1])
        pos += stop + 1
    ia = np.concatenate(matched_a) if matched_a else np.zeros(0, np.int64)
    ib = np.concatenate(matched_b) if matched_b else np.zeros(0, np.int64)
    return Coincidences(len(ia), ia, ib)


def true_pair_mask(a: TimeTagStream, b: TimeTagStream, coinc: Coincidences) -> np.ndarray:
    """Ground-truth audit: matched tags that stem from the same emitted pair."""
    if not (a.labelled and b.labelled):
        raise ValueError("streams carry no origin labels")
    la = a.origin_link[coinc.index_a]
    lb = b.origin_link[coinc.index_b]
    names_a = np.array(a.link_labels + ("",), dtype=object)[la]
    names_b = np.array(b.link_labels + ("",), dtype=object)[lb]
    same = (la >= 0) & (lb >= 0) & (names_a == names_b)
    return same & (a.origin_serial[coinc.index_a] == b.origin_serial[coinc.index_b])


def estimate_accidentals(S_a: float, S_b: float, tau: float, T: float) -> float:
    """Expected accidental coincidences of two uncorrelated streams."""
    return tau * S_a * S_b * T


def offset_accidentals(a: TimeTagStream, b: TimeTagStream, delay_ps: int, tau_ps: int,
                       offsets_ps: Sequence[int]) -> float:
    """Mean coincidence count in windows displaced from the true delay."""
    if not offsets_ps:
        raise ValueError("need at least one offset")
    return float(np.mean([count_coincidences(a, b, delay_ps + o, tau_ps).count for o in offsets_ps]))


def multiuser_filter(streams: Mapping[str, TimeTagStream], tau_ps: int) -> dict[str, TimeTagStream]:
    """Drop every tag taking part in a multi-detector cluster.

    Tags of all detectors are merged in time and chained into clusters
    wherever consecutive tags are at most ``tau_ps`` apart. Clusters touching
    three or more detectors are removed entirely; two-fold events stay.
    """
    _require_sorted(*streams.values())
    names = list(streams)
    if not names:
        return {}
    t = np.concatenate([streams[n].time for n in names])
    det = np.concatenate([np.full(len(streams[n]), k, np.int32) for k, n in enumerate(names)])
    local = np.concatenate([np.arange(len(streams[n])) for n in names])
    if len(t) == 0:
        return dict(streams)
    order = np.argsort(t, kind="stable")
    t, det, local = t[order], det[order], local[order]
    cluster = np.concatenate(([0], np.cumsum(np.diff(t) > tau_ps)))
    # distinct detectors per cluster
    pair_key = np.unique(cluster.astype(np.int64) * len(names) + det)
    n_det = np.bincount(pair_key // len(names), minlength=cluster[-1] + 1)
    drop = n_det[cluster] >= 3
    out = {}
    for k, n in enumerate(names):
        keep = np.ones(len(streams[n]), dtype=bool)
        keep[local[(det == k) & drop]] = False
        out[n] = streams[n].select(keep)
    return out


def link_filter(streams: Mapping[str, TimeTagStream], link: tuple[str, str],
                delays_ps: Mapping[tuple[str, str], int], tau_ps: int) -> tuple[TimeTagStream, TimeTagStream]:
    """Endpoint streams of ``link`` without tags claimed by the users' other links.

    Every tag of either endpoint that forms a coincidence with a third user
    (at that pair's delay) belongs to another communication and is removed.
    ``delays_ps[(u, v)]`` is the delay of v relative to u.
    """
    a, b = link
    out = []
    for me, partner in ((a, b), (b, a)):
        s = streams[me]
        keep = np.ones(len(s), dtype=bool)
        for other in streams:
            if other in (me, partner):
                continue
            if (me, other) in delays_ps:
                c = count_coincidences(s, streams[other], delays_ps[(me, other)], tau_ps)
                keep[c.index_a] = False
            elif (other, me) in delays_ps:
                c = count_coincidences(streams[other], s, delays_ps[(other, me)], tau_ps)
                keep[c.index_b] = False
        out.append(s.select(keep))
    return out[0], out[1]


def fidelity_estimate(v_hv: float, v_da: float) -> float:
    """Two-basis lower bound on the Phi+ fidelity."""
    return (v_hv + v_da) / 2.0


def binary_entropy(q: float) -> float:
    if q <= 0.0 or q >= 1.0:
        return 0.0
    return -q * math.log2(q) - (1 - q) * math.log2(1 - q)


def secure_key_rate(raw_rate: float, qber: float, ec_efficiency: float = 1.0) -> float:
    """Asymptotic entanglement-based key rate raw * (1 - f*H2(Q) - H2(Q))."""
    if raw_rate < 0:
        raise ValueError("raw rate must be non-negative")
    if not 0.0 <= qber <= 0.5:
        raise ValueError(f"QBER {qber} outside [0, 0.5]")
    h = binary_entropy(qber)
    return raw_rate * max(0.0, 1.0 - ec_efficiency * h - h)


def qber_from_fidelity(f: float) -> float:
    """Isotropic-noise relation Q = 2(1 - F)/3."""
    return 2.0 * (1.0 - f) / 3.0


def is_key_capable(f: float) -> bool:
    return f > KEY_FIDELITY_THRESHOLD


@dataclass
class Run:
    """One measurement run: fixed analyzer settings, one stream per user."""

    settings: Mapping[str, AnalyzerSetting]
    streams: Mapping[str, TimeTagStream]
    duration: float

    def label(self, users: Sequence[str]) -> str:
        return "".join(self.settings[u].label() for u in users)


@dataclass
class LinkMetrics:
    edge: str
    delay_ps: int
    counts: dict[str, list[list[int]]]
    accidentals: dict[str, list[list[float]]]
    singles_a_hz: float
    singles_b_hz: float
    v_hv: float
    v_da: float
    v_hv_corrected: float
    v_da_corrected: float
    fidelity_raw: float
    fidelity_corrected: float
    qber: float
    raw_key_rate_hz: float
    secure_key_rate_hz: float
    key_capable: bool = field(default=False)

    @property
    def total_coincidences(self) -> int:
        return int(sum(sum(sum(r) for r in tbl) for tbl in self.counts.values()))

    @property
    def total_accidentals(self) -> float:
        return float(sum(sum(sum(r) for r in tbl) for tbl in self.accidentals.values()))

    def row(self) -> dict:
        return {
            "edge": self.edge,
            "delay_ps": self.delay_ps,
            "C": self.total_coincidences,
            "Acc": round(self.total_accidentals, 6),
            "V_HV": self.v_hv,
            "V_DA": self.v_da,
            "F_raw": self.fidelity_raw,
            "F_corrected": self.fidelity_corrected,
            "QBER": self.qber,
            "raw_Hz": self.raw_key_rate_hz,
            "secure_Hz": self.secure_key_rate_hz,
        }


METRIC_COLUMNS = ["edge", "delay_ps", "C", "Acc", "V_HV", "V_DA", "F_raw", "F_corrected", "QBER", "raw_Hz", "secure_Hz"]


def write_metrics(metrics: Mapping[str, LinkMetrics], json_path: str | Path, csv_path: str | Path) -> None:
    with open(json_path, "w") as fh:
        json.dump({k: asdict(m) for k, m in metrics.items()}, fh, indent=2)
    with open(csv_path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=METRIC_COLUMNS, lineterminator="\n")
        w.writeheader()
        for m in metrics.values():
            w.writerow(m.row())


def _visibility(tbl) -> float:
    same = tbl[0][0] + tbl[1][1]
    diff = tbl[0][1] + tbl[1][0]
    return (same - diff) / (same + diff) if same + diff > 0 else 0.0


def _outputs(setting: AnalyzerSetting, stream: TimeTagStream) -> list[int]:
    return [0, 1] if setting.output is None else [setting.output]


def _port_duty(setting: AnalyzerSetting) -> float:
    return 1.0 if setting.output is None else 0.5


def _select_outcome(stream: TimeTagStream, setting: AnalyzerSetting, o: int) -> TimeTagStream:
    if setting.output is not None:
        return stream
    return stream.select(stream.outcome == o)


def link_delays(runs: Sequence[Run], plan: MultiplexPlan, cfg: AnalysisConfig,
                pairs: Sequence[tuple[str, str]] | None = None) -> dict[tuple[str, str], int]:
    """Delay of every user pair from correlation histograms summed over all runs.

    Pairs without a significant peak are left out.
    """
    if pairs is None:
        pairs = [plan.endpoints(e) for e in plan.edges()]
    delays = {}
    for a, b in pairs:
        hist = None
        for r in runs:
            h = cross_correlate(r.streams[a], r.streams[b], cfg)
            hist = h if hist is None else hist + h
        if hist is None:
            continue
        try:
            delays[(a, b)] = find_delay(hist, cfg)
        except NoLinkDetected:
            pass
    return delays


def _filtered(run: Run, link: tuple[str, str], delays, cfg: AnalysisConfig):
    a, b = link
    if cfg.noise_filter == "multiuser":
        f = multiuser_filter(run.streams, cfg.coincidence_window_ps)
        return f[a], f[b]
    if cfg.noise_filter == "link":
        return link_filter(run.streams, link, delays, cfg.coincidence_window_ps)
    return run.streams[a], run.streams[b]


def campaign_metrics(runs: Sequence[Run], plan: MultiplexPlan, cfg: AnalysisConfig,
                     delays_ps: Mapping[tuple[str, str], int] | None = None) -> dict[str, LinkMetrics]:
    """Per-link visibilities, fidelities, QBER and key rates of a measurement campaign.

    Every link needs all four outcome combinations in both bases, either
    from two-port analyzers or from single-port runs such as the sixteen
    H/V (and D/A) settings of a four-user network.

    The raw key rate is ``sifting_factor`` times the key-basis coincidence
    rate a user pair would see under random output choice: cells measured
    with single-port analyzers are weighted by the fraction of time both
    ports would be selected.
    """
    if not runs:
        raise CampaignError("no runs given")
    durations = {r.duration for r in runs}
    if len(durations) != 1:
        raise CampaignError(f"runs have unequal durations {sorted(durations)}")
    users = plan.users
    tau = cfg.coincidence_window_ps
    if delays_ps is None:
        all_pairs = [(users[i], users[j]) for i in range(len(users)) for j in range(i + 1, len(users))]
        pairs = all_pairs if cfg.noise_filter == "link" else None
        delays_ps = link_delays(runs, plan, cfg, pairs)
    delays_ps = dict(delays_ps)

    missing = []
    results = {}
    for e in plan.edges():
        a, b = plan.endpoints(e)
        name = plan.topology.edge_name(e)
        if (a, b) not in delays_ps:
            raise NoLinkDetected(f"no correlation peak found for link {name}")
        d = delays_ps[(a, b)]
        C = {bs.value: [[0, 0], [0, 0]] for bs in Basis}
        Acc = {bs.value: [[0.0, 0.0], [0.0, 0.0]] for bs in Basis}
        T_cell = {bs.value: [[0.0, 0.0], [0.0, 0.0]] for bs in Basis}
        duty_time = {bs.value: [[0.0, 0.0], [0.0, 0.0]] for bs in Basis}
        s_a, s_b, n_s = 0.0, 0.0, 0
        for r in runs:
            sa, sb = r.settings[a], r.settings[b]
            if sa.basis != sb.basis:
                continue
            bs = sa.basis.value
            xa, xb = _filtered(r, (a, b), delays_ps, cfg)
            s_a += len(xa) / r.duration
            s_b += len(xb) / r.duration
            n_s += 1
            for oa in _outputs(sa, xa):
                for ob in _outputs(sb, xb):
                    ya, yb = _select_outcome(xa, sa, oa), _select_outcome(xb, sb, ob)
                    C[bs][oa][ob] += count_coincidences(ya, yb, d, tau).count
                    Acc[bs][oa][ob] += estimate_accidentals(
                        len(ya) / r.duration, len(yb) / r.duration, cfg.tau_s, r.duration)
                    T_cell[bs][oa][ob] += r.duration
                    duty_time[bs][oa][ob] += r.duration * _port_duty(sa) * _port_duty(sb)
        for bs in Basis:
            for oa in (0, 1):
                for ob in (0, 1):
                    if T_cell[bs.value][oa][ob] == 0:
                        missing.append(f"{name} {bs.value}:{AnalyzerSetting(bs, oa).label()}{AnalyzerSetting(bs, ob).label()}")
        if missing:
            continue
        corr = {k: [[max(0.0, C[k][i][j] - Acc[k][i][j]) for j in (0, 1)] for i in (0, 1)] for k in C}
        v_hv, v_da = _visibility(C["HV"]), _visibility(C["DA"])
        vc_hv, vc_da = _visibility(corr["HV"]), _visibility(corr["DA"])
        kb = cfg.key_basis.value
        key = C[kb]
        total = sum(key[i][j] for i in (0, 1) for j in (0, 1))
        qber = (key[0][1] + key[1][0]) / total if total else 0.5
        qber = min(qber, 0.5)
        # a single-port detector sits on each output only half of the time
        rate = sum(key[i][j] / T_cell[kb][i][j] * duty_time[kb][i][j] / T_cell[kb][i][j]
                   for i in (0, 1) for j in (0, 1))
        raw = cfg.sifting_factor * rate
        f_raw = fidelity_estimate(v_hv, v_da)
        results[name] = LinkMetrics(
            edge=name,
            delay_ps=d,
            counts=C,
            accidentals=Acc,
            singles_a_hz=s_a / n_s if n_s else 0.0,
            singles_b_hz=s_b / n_s if n_s else 0.0,
            v_hv=v_hv,
            v_da=v_da,
            v_hv_corrected=vc_hv,
            v_da_corrected=vc_da,
            fidelity_raw=f_raw,
            fidelity_corrected=fidelity_estimate(vc_hv, vc_da),
            qber=qber,
            raw_key_rate_hz=raw,
            secure_key_rate_hz=secure_key_rate(raw, qber, cfg.ec_efficiency),
            key_capable=is_key_capable(f_raw),
        )
    if missing:
        raise CampaignError("missing setting combinations: " + ", ".join(missing))
    return results


def campaign_settings(users: Sequence[str]) -> list[dict[str, AnalyzerSetting]]:
    """All single-port settings of a campaign: 2^N per basis."""
    out = []
    n = len(users)
    for bs in Basis:
        for code in range(2**n):
            out.append({u: AnalyzerSetting(bs, (code >> (n - 1 - k)) & 1) for k, u in enumerate(users)})
    return out
