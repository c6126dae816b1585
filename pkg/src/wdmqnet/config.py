"""Run configuration files.

INI-style text with one section per concern. Every physical quantity
carries its unit in the key name::

    [topology]
    users = Alice, Bob, Chloe, Dave
    edges = full

    [grid]
    channels = 27-32, 36-41

    [source]
    pair_rate_hz = 50000

    [detectors]
    efficiency = 0.1
    dark_rate_hz = 500

    [run]
    seed = 7
    duration_s = 10
"""
from __future__ import annotations

import configparser
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping

from .coincidence import AnalysisConfig, campaign_settings
from .eventsim import DetectorParams, GateConfig, LinkParams, SourceMode, SourceParams
from .netplan import MultiplexPlan, Topology, WavelengthGrid, allocate, conjugate_pairs
from .quantum import AnalyzerSetting, Basis, werner


class ConfigError(ValueError):
    pass


def parse_int_list(text: str) -> list[int]:
    """``"27-32, 36, 38-41"`` -> [27, ..., 32, 36, 38, ..., 41]."""
    out = []
    for part in text.replace(";", ",").split(","):
        part = part.strip()
        if not part:
            continue
        if "-" in part[1:]:
            k = part.index("-", 1)
            lo, hi = int(part[:k]), int(part[k + 1:])
            out.extend(range(lo, hi + 1))
        else:
            out.append(int(part))
    return out


def parse_float_list(text: str) -> list[float]:
    return [float(x) for x in text.replace(";", ",").split(",") if x.strip()]


def parse_channel_map(text: str) -> dict[int, float]:
    """``"27:0.1, 28:0.2"``."""
    out = {}
    for part in text.split(","):
        part = part.strip()
        if not part:
            continue
        ch, _, val = part.partition(":")
        if not val:
            raise ConfigError(f"expected channel:value, got {part!r}")
        out[int(ch)] = float(val)
    return out


@dataclass
class RunConfig:
    topology: Topology
    grid: WavelengthGrid
    channels: list[int]
    source: SourceParams
    links: LinkParams
    detectors: dict[str, DetectorParams]
    state_fidelity: dict[str, float]
    settings: list[dict[str, AnalyzerSetting]]
    analysis: AnalysisConfig
    seed: int | None
    duration: float
    output_dir: Path
    gate_width: float | None = None
    blind: bool = False
    curves: dict = field(default_factory=dict)
    keyrate: dict = field(default_factory=dict)

    def plan(self) -> MultiplexPlan:
        return allocate(self.topology, conjugate_pairs(self.channels, self.grid))

    def link_states(self, plan: MultiplexPlan) -> dict:
        states: dict = {}
        default = self.state_fidelity.get("default", 1.0)
        for e in plan.edges():
            f = self.state_fidelity.get(plan.topology.edge_name(e), default)
            states[e] = werner(f)
        return states

    def gates(self, plan: MultiplexPlan) -> GateConfig | None:
        if self.source.mode is not SourceMode.PULSED:
            return None
        if self.gate_width is None:
            raise ConfigError("pulsed source needs gate_width_ps in [source]")
        return GateConfig.aligned(plan, self.links, self.source.pulse_period, self.gate_width)


def _settings_from(section: Mapping[str, str], users: tuple[str, ...]) -> list[dict[str, AnalyzerSetting]]:
    campaign = section.get("campaign", "").strip().lower()
    if campaign:
        all_runs = campaign_settings(users)
        half = len(all_runs) // 2
        if campaign in ("both", "full", "true"):
            return all_runs
        if campaign == "hv":
            return all_runs[:half]
        if campaign == "da":
            return all_runs[half:]
        raise ConfigError(f"campaign must be HV, DA or both, got {campaign!r}")
    text = section.get("settings", "")
    runs = []
    for tok in text.split(","):
        tok = tok.strip()
        if not tok:
            continue
        if tok.upper() in ("HV", "DA"):
            runs.append({u: AnalyzerSetting(Basis(tok.upper())) for u in users})
            continue
        if len(tok) != len(users):
            raise ConfigError(f"setting {tok!r} must have one letter per user ({len(users)})")
        runs.append({u: AnalyzerSetting.parse(ch) for u, ch in zip(users, tok)})
    return runs or [{u: AnalyzerSetting(Basis.HV) for u in users}]


def load_config(path: str | Path) -> RunConfig:
    cp = configparser.ConfigParser(inline_comment_prefixes=("#", ";"))
    cp.optionxform = str
    try:
        with open(path) as fh:
            cp.read_file(fh)
    except (OSError, configparser.Error) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    try:
        return _build(cp, Path(path))
    except ConfigError:
        raise
    except (KeyError, ValueError, TypeError) as exc:
        raise ConfigError(f"{path}: {exc}") from None


def _sec(cp: configparser.ConfigParser, name: str) -> Mapping[str, str]:
    return cp[name] if cp.has_section(name) else {}


def _build(cp: configparser.ConfigParser, path: Path) -> RunConfig:
    topo_s = _sec(cp, "topology")
    if "users" not in topo_s:
        raise ConfigError("[topology] users is required")
    users = tuple(u.strip() for u in topo_s["users"].split(",") if u.strip())
    edges_text = topo_s.get("edges", "full").strip()
    if edges_text.lower() == "full":
        topology = Topology.full(users)
    else:
        idx = {u: k for k, u in enumerate(users)}
        edges = []
        for tok in edges_text.split(","):
            a, _, b = tok.strip().partition("-")
            if a not in idx or b not in idx:
                raise ConfigError(f"edge {tok.strip()!r} references an undefined user")
            edges.append((idx[a], idx[b]))
        topology = Topology(users, edges)

    g = _sec(cp, "grid")
    grid = WavelengthGrid(
        channel_spacing_GHz=float(g.get("channel_spacing_ghz", 100.0)),
        base_frequency_THz=float(g.get("base_frequency_thz", 190.0)),
        center_channel=int(g.get("center_channel", 34)),
        pump_wavelength_nm=float(g.get("pump_wavelength_nm", 775.075)),
    )
    if "channels" not in g:
        raise ConfigError("[grid] channels is required")
    channels = parse_int_list(g["channels"])

    s = _sec(cp, "source")
    mode = SourceMode.PULSED if s.get("mode", "cw").strip().lower() == "pulsed" else SourceMode.CW
    period = float(s["pulse_period_ns"]) * 1e-9 if "pulse_period_ns" in s else None
    source = SourceParams(
        float(s.get("pair_rate_hz", 0.0)), mode, period, float(s.get("pulse_width_ps", 0.0)) * 1e-12,
    )
    gate_width = float(s["gate_width_ps"]) * 1e-12 if "gate_width_ps" in s else None

    ln = _sec(cp, "links")
    links = LinkParams(
        parse_channel_map(ln.get("transmittance", "")),
        {c: v * 1e-9 for c, v in parse_channel_map(ln.get("delay_ns", "")).items()},
        float(ln.get("default_transmittance", 1.0)),
    )

    base = dict(_sec(cp, "detectors"))
    detectors = {}
    for u in users:
        d = dict(base)
        d.update(_sec(cp, f"detector.{u}"))
        detectors[u] = DetectorParams(
            efficiency=float(d.get("efficiency", 1.0)),
            dark_rate=float(d.get("dark_rate_hz", 0.0)),
            dead_time=float(d.get("dead_time_ns", 0.0)) * 1e-9,
            jitter_sigma=float(d.get("jitter_ps", 0.0)) * 1e-12,
        )
    for sec in cp.sections():
        if sec.startswith("detector.") and sec[len("detector."):] not in users:
            raise ConfigError(f"section [{sec}] names an undefined user")

    st = _sec(cp, "states")
    fid = {"default": float(st.get("fidelity", 1.0))}
    for k, v in st.items():
        if k != "fidelity":
            a, _, b = k.partition("-")
            if a not in users or b not in users:
                raise ConfigError(f"[states] {k} references an undefined user")
            fid[k] = float(v)

    run = _sec(cp, "run")
    seed = int(run["seed"]) if "seed" in run else None
    a = _sec(cp, "analysis")
    analysis = AnalysisConfig(
        coincidence_window_ps=int(a.get("coincidence_window_ps", 1000)),
        bin_width_ps=int(a.get("bin_width_ps", 100)),
        delay_range_ps=(int(a.get("delay_min_ps", -50_000)), int(a.get("delay_max_ps", 50_000))),
        peak_threshold_sigma=float(a.get("peak_threshold_sigma", 6.0)),
        key_basis=Basis(a.get("key_basis", "HV").strip().upper()),
        sifting_factor=float(a.get("sifting_factor", 0.5)),
        ec_efficiency=float(a.get("ec_efficiency", 1.0)),
        noise_filter=a.get("noise_filter", "none").strip().lower(),
    )
    out = Path(run.get("output_dir", "out"))
    if not out.is_absolute():
        out = path.parent / out
    return RunConfig(
        topology=topology,
        grid=grid,
        channels=channels,
        source=source,
        links=links,
        detectors=detectors,
        state_fidelity=fid,
        settings=_settings_from(run, users),
        analysis=analysis,
        seed=seed,
        duration=float(run.get("duration_s", 1.0)),
        output_dir=out,
        gate_width=gate_width,
        blind=run.get("blind", "false").strip().lower() in ("1", "true", "yes"),
        curves=dict(_sec(cp, "curves")),
        keyrate=dict(_sec(cp, "keyrate")),
    )


__all__ = ["ConfigError", "RunConfig", "load_config", "parse_int_list", "parse_channel_map"]
