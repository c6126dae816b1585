"""Monte Carlo generation of detector time-tag streams.

Pair emission on every link is a homogeneous Poisson process. Photon losses
are applied by Poisson thinning, so only pairs with at least one detected
photon are ever materialised: the "both detected", "only the first user" and
"only the second user" populations are independent Poisson processes with
rates R*pa*pb, R*pa*(1-pb) and R*(1-pa)*pb.

Randomness is derived from a single master seed. Every link and every
detector draws from its own sub-stream keyed by its name, so adding a link
leaves the randomness of the others untouched.
"""
from __future__ import annotations

import math
import zlib
from dataclasses import dataclass, field
from enum import Enum
from typing import Mapping

import numpy as np

from .netplan import Edge, MultiplexPlan
from .quantum import AnalyzerSetting, Basis, TwoQubitState, outcome_probs
from .timetags import DARK, PS_PER_S, TimeTagStream, UnsortedStreamError, merge_sorted, to_ps

_BASIS_CODE = {Basis.HV: 0, Basis.DA: 1}


class SimulationConfigError(ValueError):
    pass


class SourceMode(str, Enum):
    CW = "CW"
    PULSED = "pulsed"


@dataclass(frozen=True)
class SourceParams:
    pair_rate_per_channel_pair: float
    mode: SourceMode = SourceMode.CW
    pulse_period: float | None = None
    pulse_width: float = 0.0

    def __post_init__(self):
        if self.pair_rate_per_channel_pair < 0:
            raise SimulationConfigError("pair rate must be non-negative")
        if self.mode is SourceMode.PULSED:
            if self.pulse_period is None or self.pulse_period <= 0:
                raise SimulationConfigError("pulsed source needs a positive pulse_period")
            if not 0 <= self.pulse_width < self.pulse_period:
                raise SimulationConfigError("pulse_width must be smaller than pulse_period")


@dataclass(frozen=True)
class DetectorParams:
    efficiency: float = 1.0
    dark_rate: float = 0.0
    dead_time: float = 0.0
    jitter_sigma: float = 0.0

    def __post_init__(self):
        if not 0 <= self.efficiency <= 1:
            raise SimulationConfigError(f"efficiency {self.efficiency} outside [0, 1]")
        if min(self.dark_rate, self.dead_time, self.jitter_sigma) < 0:
            raise SimulationConfigError("dark_rate, dead_time and jitter_sigma must be >= 0")


@dataclass(frozen=True)
class LinkParams:
    """Per-channel transmittance and fiber delay (seconds), keyed by ITU channel."""

    transmittance: Mapping[int, float] = field(default_factory=dict)
    delay: Mapping[int, float] = field(default_factory=dict)
    default_transmittance: float = 1.0

    def __post_init__(self):
        for ch, t in self.transmittance.items():
            if not 0 <= t <= 1:
                raise SimulationConfigError(f"transmittance {t} of channel {ch} outside [0, 1]")

    def t(self, channel: int) -> float:
        return self.transmittance.get(channel, self.default_transmittance)

    def delay_ps(self, channel: int) -> int:
        return to_ps(self.delay.get(channel, 0.0))


@dataclass(frozen=True)
class GateConfig:
    """Detector gates of the pulsed scheme.

    ``offsets`` holds, per user, the opening times (seconds after each pump
    pulse) of its gates, one per link.
    """

    period: float
    width: float
    offsets: Mapping[str, tuple[float, ...]]

    def __post_init__(self):
        if self.width <= 0 or self.width > self.period:
            raise SimulationConfigError("gate width must lie in (0, period]")
        p, w = to_ps(self.period), to_ps(self.width)
        for user, offs in self.offsets.items():
            phases = sorted(to_ps(o) % p for o in offs)
            for k, ph in enumerate(phases):
                nxt = phases[(k + 1) % len(phases)] + (p if k == len(phases) - 1 else 0)
                if len(phases) > 1 and nxt - ph < w:
                    raise SimulationConfigError(f"gates of user {user!r} overlap")

    @property
    def gates_per_pulse(self) -> int:
        return max((len(o) for o in self.offsets.values()), default=0)

    @property
    def duty_cycle(self) -> float:
        return self.gates_per_pulse * self.width / self.period

    @classmethod
    def aligned(cls, plan: MultiplexPlan, links: LinkParams, period: float, width: float,
                shift: float = 0.0) -> "GateConfig":
        """One gate per link per user, centred on that link's photon arrival."""
        offsets = {}
        for u in plan.users:
            offs = []
            for e in plan.edges():
                if u in plan.endpoints(e):
                    offs.append(links.delay.get(plan.channel_of(e, u), 0.0) - width / 2 + shift)
            offsets[u] = tuple(offs)
        return cls(period, width, offsets)

    def gate_index(self, user: str, times_ps: np.ndarray) -> np.ndarray:
        """Index of the gate containing each time, -1 outside all gates."""
        p, w = to_ps(self.period), to_ps(self.width)
        idx = np.full(len(times_ps), -1, dtype=np.int64)
        phase = np.mod(times_ps, p)
        for g, off in enumerate(self.offsets.get(user, ())):
            inside = np.mod(phase - to_ps(off), p) < w
            idx[inside & (idx < 0)] = g
        return idx


@dataclass
class SimulationResult:
    streams: dict[str, TimeTagStream]
    emitted_pairs: dict[str, int]
    duration: float

    def __getitem__(self, user: str) -> TimeTagStream:
        return self.streams[user]


def _substream(seed: int, *key: str) -> np.random.Generator:
    tag = zlib.crc32("/".join(key).encode())
    return np.random.default_rng(np.random.SeedSequence(entropy=seed, spawn_key=(tag,)))


def apply_dead_time(stream: TimeTagStream, dead_time: float) -> TimeTagStream:
    """Non-paralyzable dead time: keep a tag iff it is at least ``dead_time``
    after the last kept tag."""
    stream.require_sorted()
    dead = to_ps(dead_time)
    if dead <= 0 or len(stream) < 2:
        return stream
    return stream.select(_dead_time_mask(stream.time, dead))


def _dead_time_mask(t: np.ndarray, dead: int) -> np.ndarray:
    # Segments are separated by gaps >= dead; a segment's first tag is always
    # kept, so all segments can be walked in parallel.
    n = len(t)
    keep = np.zeros(n, dtype=bool)
    starts = np.flatnonzero(np.concatenate(([True], np.diff(t) >= dead)))
    ends = np.append(starts[1:], n)
    ptr, end = starts, ends
    while len(ptr):
        keep[ptr] = True
        nxt = np.searchsorted(t, t[ptr] + dead, side="left")
        live = nxt < end
        ptr, end = nxt[live], end[live]
    return keep


def _settings(settings: Mapping[str, AnalyzerSetting | Basis | str], users) -> dict[str, AnalyzerSetting]:
    out = {}
    for u in users:
        if u not in settings:
            raise SimulationConfigError(f"no analyzer setting for user {u!r}")
        s = settings[u]
        if isinstance(s, AnalyzerSetting):
            out[u] = s
        elif isinstance(s, Basis):
            out[u] = AnalyzerSetting(s)
        else:
            out[u] = AnalyzerSetting.parse(s)
    return out


def _check_inputs(plan, link_states, detectors, duration):
    if duration < 0:
        raise SimulationConfigError("duration must be non-negative")
    for e in plan.edges():
        if e not in link_states:
            raise SimulationConfigError(f"no state given for link {plan.topology.edge_name(e)}")
    for u in plan.users:
        if u not in detectors:
            raise SimulationConfigError(f"no detector parameters for user {u!r}")


@dataclass
class _Photons:
    time: np.ndarray
    outcome: np.ndarray
    serial: np.ndarray


def _link_photons(rng, state: TwoQubitState, sa: AnalyzerSetting, sb: AnalyzerSetting,
                  emit_a: np.ndarray, emit_b: np.ndarray, both: int,
                  serial: np.ndarray, delay_a: int, delay_b: int,
                  jit_a: float, jit_b: float) -> tuple[_Photons, _Photons]:
    """Turn emission times into detected photons at both users.

    ``emit_a``/``emit_b`` are the emission times of pairs whose photon reached
    each user's detector; their first ``both`` entries are the shared pairs.
    """
    probs = outcome_probs(state, sa.basis, sb.basis)
    joint = rng.choice(4, size=both, p=probs.ravel())
    out_a = np.empty(len(emit_a), np.int8)
    out_b = np.empty(len(emit_b), np.int8)
    out_a[:both] = joint // 2
    out_b[:both] = joint % 2
    out_a[both:] = rng.random(len(emit_a) - both) >= probs.sum(axis=1)[0]
    out_b[both:] = rng.random(len(emit_b) - both) >= probs.sum(axis=0)[0]

    def detect(emit, outcome, setting, delay, jitter, ser):
        t = emit + delay
        if jitter > 0:
            t = t + np.rint(rng.normal(0.0, jitter * PS_PER_S, len(t))).astype(np.int64)
        keep = slice(None) if setting.output is None else outcome == setting.output
        return _Photons(t[keep], outcome[keep], ser[keep])

    ser_a = serial[: len(emit_a)]
    ser_b = np.concatenate([serial[:both], serial[len(emit_a):]])
    return (
        detect(emit_a, out_a, sa, delay_a, jit_a, ser_a),
        detect(emit_b, out_b, sb, delay_b, jit_b, ser_b),
    )


def _assemble(plan, settings, detectors, photons, dark_times, dark_rngs, link_labels, dead_time_fn):
    streams = {}
    for u in plan.users:
        s = settings[u]
        code = _BASIS_CODE[s.basis]
        parts = []
        for link_idx, ph in photons[u]:
            n = len(ph.time)
            parts.append(TimeTagStream(
                u, ph.time, np.full(n, code, np.int8), ph.outcome,
                np.full(n, link_idx, np.int32), ph.serial, link_labels,
            ))
        dt = dark_times[u]
        rng = dark_rngs[u]
        if s.output is None:
            dark_out = rng.integers(0, 2, len(dt)).astype(np.int8)
        else:
            dark_out = np.full(len(dt), s.output, np.int8)
        parts.append(TimeTagStream(
            u, dt, np.full(len(dt), code, np.int8), dark_out,
            np.full(len(dt), DARK, np.int32), np.full(len(dt), -1, np.int64), link_labels,
        ))
        merged = merge_sorted(u, parts, link_labels)
        streams[u] = dead_time_fn(u, merged)
    return streams


def simulate(plan: MultiplexPlan, link_states: Mapping[Edge, TwoQubitState], source: SourceParams,
             links: LinkParams, detectors: Mapping[str, DetectorParams],
             settings: Mapping[str, AnalyzerSetting | Basis | str], duration: float,
             seed: int) -> SimulationResult:
    """Continuous-wave network run producing one labelled stream per user."""
    _check_inputs(plan, link_states, detectors, duration)
    settings = _settings(settings, plan.users)
    T_ps = to_ps(duration)
    R = source.pair_rate_per_channel_pair
    labels = tuple(plan.topology.edge_name(e) for e in plan.edges())
    photons: dict[str, list] = {u: [] for u in plan.users}
    emitted = {}

    for k, e in enumerate(plan.edges()):
        a, b = plan.endpoints(e)
        ca, cb = plan.channel_of(e, a), plan.channel_of(e, b)
        pa = links.t(ca) * detectors[a].efficiency
        pb = links.t(cb) * detectors[b].efficiency
        rng = _substream(seed, "link", labels[k])
        lam = R * duration
        n_both = rng.poisson(lam * pa * pb)
        n_a = rng.poisson(lam * pa * (1 - pb))
        n_b = rng.poisson(lam * (1 - pa) * pb)
        n_none = rng.poisson(lam * (1 - pa) * (1 - pb))
        emitted[labels[k]] = int(n_both + n_a + n_b + n_none)
        t_emit = np.sort(rng.integers(0, max(T_ps, 1), n_both + n_a + n_b)) if T_ps > 0 \
            else np.zeros(0, np.int64)
        # categories are assigned to sorted emission times at random so that
        # serials follow emission order
        cat = rng.permutation(np.repeat(np.array([0, 1, 2], np.int8), [n_both, n_a, n_b]))
        serial = np.arange(len(t_emit), dtype=np.int64)
        order = np.concatenate([np.flatnonzero(cat == 0), np.flatnonzero(cat == 1), np.flatnonzero(cat == 2)])
        t_sorted, s_sorted = t_emit[order], serial[order]
        emit_a = t_sorted[: n_both + n_a]
        emit_b = np.concatenate([t_sorted[:n_both], t_sorted[n_both + n_a:]])
        ph_a, ph_b = _link_photons(
            rng, link_states[e], settings[a], settings[b], emit_a, emit_b, n_both, s_sorted,
            links.delay_ps(ca), links.delay_ps(cb), detectors[a].jitter_sigma, detectors[b].jitter_sigma,
        )
        photons[a].append((k, ph_a))
        photons[b].append((k, ph_b))

    dark_times, dark_rngs = {}, {}
    for u in plan.users:
        rng = _substream(seed, "detector", u)
        n = rng.poisson(detectors[u].dark_rate * duration)
        dark_times[u] = np.sort(rng.integers(0, max(T_ps, 1), n)) if T_ps > 0 else np.zeros(0, np.int64)
        dark_rngs[u] = rng

    def dead(u, stream):
        return apply_dead_time(stream, detectors[u].dead_time)

    streams = _assemble(plan, settings, detectors, photons, dark_times, dark_rngs, labels, dead)
    return SimulationResult(streams, emitted, duration)


def simulate_pulsed(plan: MultiplexPlan, link_states: Mapping[Edge, TwoQubitState], source: SourceParams,
                    links: LinkParams, detectors: Mapping[str, DetectorParams],
                    settings: Mapping[str, AnalyzerSetting | Basis | str], duration: float,
                    seed: int, gates: GateConfig) -> SimulationResult:
    """Pulsed-pump run with gated detectors.

    Each pulse carries a pair on a given link with probability
    1 - exp(-R * period). Detectors are armed only inside their gates, so
    dark counts are generated inside gates only and dead time acts across
    the gates of consecutive openings.
    """
    if source.mode is not SourceMode.PULSED:
        raise SimulationConfigError("simulate_pulsed needs a pulsed source")
    _check_inputs(plan, link_states, detectors, duration)
    settings = _settings(settings, plan.users)
    period_ps = to_ps(source.pulse_period)
    if to_ps(gates.period) != period_ps:
        raise SimulationConfigError("gate period differs from the pulse period")
    n_pulses = int(duration // source.pulse_period)
    width_ps = to_ps(source.pulse_width)
    p_pair = -math.expm1(-source.pair_rate_per_channel_pair * source.pulse_period)
    labels = tuple(plan.topology.edge_name(e) for e in plan.edges())
    photons: dict[str, list] = {u: [] for u in plan.users}
    emitted = {}

    for k, e in enumerate(plan.edges()):
        a, b = plan.endpoints(e)
        ca, cb = plan.channel_of(e, a), plan.channel_of(e, b)
        pa = links.t(ca) * detectors[a].efficiency
        pb = links.t(cb) * detectors[b].efficiency
        rng = _substream(seed, "link", labels[k])
        cats = rng.multinomial(n_pulses, [
            p_pair * pa * pb, p_pair * pa * (1 - pb), p_pair * (1 - pa) * pb,
            p_pair * (1 - pa) * (1 - pb), 1 - p_pair,
        ]) if n_pulses > 0 else np.zeros(5, np.int64)
        n_both, n_a, n_b, n_none = (int(x) for x in cats[:4])
        emitted[labels[k]] = n_both + n_a + n_b + n_none
        n_det = n_both + n_a + n_b
        pulses = np.sort(rng.choice(n_pulses, size=n_det, replace=False)) if n_det else np.zeros(0, np.int64)
        t_emit = pulses.astype(np.int64) * period_ps
        if width_ps > 0:
            t_emit = t_emit + rng.integers(0, width_ps, n_det)
        cat = rng.permutation(np.repeat(np.array([0, 1, 2], np.int8), [n_both, n_a, n_b]))
        serial = pulses.astype(np.int64)
        order = np.concatenate([np.flatnonzero(cat == 0), np.flatnonzero(cat == 1), np.flatnonzero(cat == 2)])
        t_sorted, s_sorted = t_emit[order], serial[order]
        emit_a = t_sorted[: n_both + n_a]
        emit_b = np.concatenate([t_sorted[:n_both], t_sorted[n_both + n_a:]])
        ph_a, ph_b = _link_photons(
            rng, link_states[e], settings[a], settings[b], emit_a, emit_b, n_both, s_sorted,
            links.delay_ps(ca), links.delay_ps(cb), detectors[a].jitter_sigma, detectors[b].jitter_sigma,
        )
        photons[a].append((k, ph_a))
        photons[b].append((k, ph_b))

    gate_w = to_ps(gates.width)
    dark_times, dark_rngs = {}, {}
    for u in plan.users:
        rng = _substream(seed, "detector", u)
        offs = np.array([to_ps(o) for o in gates.offsets.get(u, ())], dtype=np.int64)
        open_time = n_pulses * len(offs) * gates.width
        n = rng.poisson(detectors[u].dark_rate * open_time) if len(offs) else 0
        if n:
            t = (rng.integers(0, n_pulses, n).astype(np.int64) * period_ps
                 + offs[rng.integers(0, len(offs), n)] + rng.integers(0, gate_w, n))
            dark_times[u] = np.sort(t)
        else:
            dark_times[u] = np.zeros(0, np.int64)
        dark_rngs[u] = rng

    def gated_dead(u, stream):
        inside = gates.gate_index(u, stream.time) >= 0
        return apply_dead_time(stream.select(inside), detectors[u].dead_time)

    streams = _assemble(plan, settings, detectors, photons, dark_times, dark_rngs, labels, gated_dead)
    return SimulationResult(streams, emitted, duration)


def gate_click_rates(stream: TimeTagStream, gates: GateConfig, duration: float) -> list[float]:
    """Click rate (Hz) in each of a user's gates, gates ordered by opening phase."""
    offs = gates.offsets.get(stream.detector, ())
    idx = gates.gate_index(stream.detector, stream.time)
    order = np.argsort([to_ps(o) % to_ps(gates.period) for o in offs], kind="stable")
    counts = np.bincount(idx[idx >= 0], minlength=len(offs))
    return [counts[g] / duration for g in order]


__all__ = [
    "SimulationConfigError", "SourceMode", "SourceParams", "DetectorParams", "LinkParams",
    "GateConfig", "SimulationResult", "apply_dead_time", "simulate", "simulate_pulsed",
    "gate_click_rates", "UnsortedStreamError",
]
