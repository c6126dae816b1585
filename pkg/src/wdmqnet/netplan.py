"""Channel planning on the ITU DWDM grid.

A single broadband pair source emits photon pairs in channels that are
symmetric about the center channel. Each such conjugate pair is handed to
exactly one edge of the user graph; every user receives the channels of all
edges it participates in over one fiber (its multiplex set).
"""
from __future__ import annotations

import itertools
import json
from dataclasses import dataclass, field
from typing import Iterable, Mapping

SPEED_OF_LIGHT_NM_THZ = 299_792.458


class PlanError(ValueError):
    """Base class for channel planning failures."""


class OrphanChannelError(PlanError):
    def __init__(self, orphans: Iterable[int]):
        self.orphans = sorted(orphans)
        super().__init__(f"channels without conjugate partner: {self.orphans}")


class InsufficientChannelsError(PlanError):
    def __init__(self, required: int, available: int):
        self.required = required
        self.available = available
        super().__init__(f"need {required} pairs, have {available}")


@dataclass(frozen=True)
class WavelengthGrid:
    channel_spacing_GHz: float = 100.0
    base_frequency_THz: float = 190.0
    center_channel: int = 34
    pump_wavelength_nm: float = 775.075

    def frequency_THz(self, channel: int) -> float:
        return self.base_frequency_THz + channel * self.channel_spacing_GHz / 1000.0

    def conjugate(self, channel: int) -> int:
        return 2 * self.center_channel - channel

    def channel_of(self, wavelength_nm: float) -> int:
        f = SPEED_OF_LIGHT_NM_THZ / wavelength_nm
        return round((f - self.base_frequency_THz) * 1000.0 / self.channel_spacing_GHz)


DEFAULT_GRID = WavelengthGrid()


@dataclass(frozen=True, order=True)
class ChannelPair:
    signal_channel: int
    idler_channel: int

    def __post_init__(self):
        if self.signal_channel == self.idler_channel:
            raise PlanError(f"degenerate channel pair ({self.signal_channel}, {self.idler_channel})")

    def as_list(self) -> list[int]:
        return [self.signal_channel, self.idler_channel]


Edge = tuple[int, int]


@dataclass(frozen=True)
class Topology:
    user_names: tuple[str, ...]
    edges: frozenset[Edge]

    def __init__(self, user_names: Iterable[str], edges: Iterable[tuple[int, int]]):
        names = tuple(user_names)
        if len(names) < 2:
            raise PlanError("a topology needs at least 2 users")
        if len(set(names)) != len(names):
            raise PlanError(f"duplicate user names in {names}")
        canon: set[Edge] = set()
        for i, j in edges:
            if i == j:
                raise PlanError(f"self-loop on user {i}")
            if not (0 <= i < len(names) and 0 <= j < len(names)):
                raise PlanError(f"edge ({i}, {j}) references an unknown user")
            e = (min(i, j), max(i, j))
            if e in canon:
                raise PlanError(f"duplicate edge {e}")
            canon.add(e)
        object.__setattr__(self, "user_names", names)
        object.__setattr__(self, "edges", frozenset(canon))

    @classmethod
    def full(cls, user_names: Iterable[str]) -> "Topology":
        names = tuple(user_names)
        return cls(names, itertools.combinations(range(len(names)), 2))

    @property
    def n_users(self) -> int:
        return len(self.user_names)

    def sorted_edges(self) -> list[Edge]:
        return sorted(self.edges)

    def edge_name(self, edge: Edge) -> str:
        return f"{self.user_names[edge[0]]}-{self.user_names[edge[1]]}"


@dataclass(frozen=True)
class MultiplexPlan:
    topology: Topology
    edge_assignment: Mapping[Edge, ChannelPair]
    user_mux: Mapping[str, frozenset[int]]
    unused_pairs: tuple[ChannelPair, ...] = field(default=())

    @property
    def users(self) -> tuple[str, ...]:
        return self.topology.user_names

    def edges(self) -> list[Edge]:
        return sorted(self.edge_assignment)

    def endpoints(self, edge: Edge) -> tuple[str, str]:
        return self.topology.user_names[edge[0]], self.topology.user_names[edge[1]]

    def channel_of(self, edge: Edge, user: str) -> int:
        """Channel through which ``user`` receives its photon of ``edge``."""
        a, b = self.endpoints(edge)
        pair = self.edge_assignment[edge]
        if user == a:
            return pair.signal_channel
        if user == b:
            return pair.idler_channel
        raise KeyError(f"user {user!r} is not an endpoint of {self.topology.edge_name(edge)}")

    def edge_by_name(self, name: str) -> Edge:
        for e in self.edge_assignment:
            if self.topology.edge_name(e) == name:
                return e
        raise KeyError(name)

    def to_dict(self) -> dict:
        users = list(self.users)
        return {
            "users": users,
            "edges": [list(e) for e in self.edges()],
            "edge_assignment": {
                self.topology.edge_name(e): self.edge_assignment[e].as_list() for e in self.edges()
            },
            "user_mux": {u: sorted(self.user_mux[u]) for u in users},
            "unused_pairs": [p.as_list() for p in self.unused_pairs],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)

    @classmethod
    def from_dict(cls, d: Mapping) -> "MultiplexPlan":
        topo = Topology(d["users"], [tuple(e) for e in d["edges"]])
        assignment = {}
        for e in topo.sorted_edges():
            s, i = d["edge_assignment"][topo.edge_name(e)]
            assignment[e] = ChannelPair(int(s), int(i))
        mux = {u: frozenset(int(c) for c in d["user_mux"][u]) for u in topo.user_names}
        unused = tuple(ChannelPair(int(s), int(i)) for s, i in d.get("unused_pairs", []))
        return cls(topo, assignment, mux, unused)

    @classmethod
    def from_json(cls, text: str) -> "MultiplexPlan":
        return cls.from_dict(json.loads(text))

    def table(self, grid: WavelengthGrid = DEFAULT_GRID) -> str:
        lines = [f"{'link':<16}{'channels':>12}{'wavelengths (nm)':>24}"]
        for e in self.edges():
            p = self.edge_assignment[e]
            wl = f"{itu_wavelength(p.signal_channel, grid):.2f} / {itu_wavelength(p.idler_channel, grid):.2f}"
            lines.append(f"{self.topology.edge_name(e):<16}{p.signal_channel:>5} / {p.idler_channel:<4}{wl:>26}")
        lines.append("")
        lines.append(f"{'user':<16}multiplex set")
        for u in self.users:
            lines.append(f"{u:<16}{', '.join(str(c) for c in sorted(self.user_mux[u]))}")
        if self.unused_pairs:
            lines.append("")
            lines.append("unused pairs: " + ", ".join(f"{p.signal_channel}/{p.idler_channel}" for p in self.unused_pairs))
        return "\n".join(lines)


def itu_wavelength(channel: int, grid: WavelengthGrid = DEFAULT_GRID) -> float:
    """Vacuum wavelength in nm of an ITU channel index."""
    f = grid.frequency_THz(channel)
    if f <= 0:
        raise ValueError(f"channel {channel} has non-physical frequency {f} THz")
    return SPEED_OF_LIGHT_NM_THZ / f


def conjugate_pairs(channels: Iterable[int], grid: WavelengthGrid = DEFAULT_GRID) -> list[ChannelPair]:
    chans = set(channels)
    if not chans:
        raise PlanError("no channels given")
    orphans = [c for c in chans if grid.conjugate(c) not in chans or grid.conjugate(c) == c]
    if orphans:
        raise OrphanChannelError(orphans)
    return [ChannelPair(c, grid.conjugate(c)) for c in sorted(chans) if c < grid.conjugate(c)]


def channels_required(n_users: int) -> int:
    if n_users < 2:
        raise ValueError(f"need at least 2 users, got {n_users}")
    return n_users * (n_users - 1)


def allocate(topology: Topology, pairs: Iterable[ChannelPair]) -> MultiplexPlan:
    """Assign channel pairs to edges in canonical order.

    Edges are taken lexicographically by user index and pairs by ascending
    signal channel. The signal channel goes to the lower-indexed endpoint.
    Pairs left over after every edge is served are reported in
    ``unused_pairs``.
    """
    pairs = sorted(pairs, key=lambda p: (p.signal_channel, p.idler_channel))
    edges = topology.sorted_edges()
    if len(pairs) < len(edges):
        raise InsufficientChannelsError(len(edges), len(pairs))
    used = set()
    for p in pairs:
        if p.signal_channel in used or p.idler_channel in used:
            raise PlanError(f"channel reused across pairs: {p}")
        used.update(p.as_list())

    assignment = dict(zip(edges, pairs))
    mux: dict[str, set[int]] = {u: set() for u in topology.user_names}
    for (i, j), p in assignment.items():
        mux[topology.user_names[i]].add(p.signal_channel)
        mux[topology.user_names[j]].add(p.idler_channel)
    return MultiplexPlan(
        topology,
        assignment,
        {u: frozenset(c) for u, c in mux.items()},
        tuple(pairs[len(edges):]),
    )


def validate_plan(plan: MultiplexPlan, grid: WavelengthGrid | None = None) -> list[str]:
    """Re-derive every plan invariant from scratch; returns a list of violations."""
    problems = []
    names = plan.topology.user_names
    seen_pairs = {}
    for e, p in plan.edge_assignment.items():
        if e not in plan.topology.edges:
            problems.append(f"assigned edge {e} not in topology")
        if p in seen_pairs:
            problems.append(f"pair {p} used by {seen_pairs[p]} and {e}")
        seen_pairs[p] = e
        if p.signal_channel == p.idler_channel:
            problems.append(f"degenerate pair {p}")
        if grid is not None and p.signal_channel + p.idler_channel != 2 * grid.center_channel:
            problems.append(f"pair {p} not conjugate about channel {grid.center_channel}")
        a, b = names[e[0]], names[e[1]]
        for ch in p.as_list():
            holders = [u for u in names if ch in plan.user_mux[u]]
            if len(holders) != 1 or holders[0] not in (a, b):
                problems.append(f"channel {ch} of edge {e} held by {holders}")
        in_a = {ch for ch in p.as_list() if ch in plan.user_mux[a]}
        in_b = {ch for ch in p.as_list() if ch in plan.user_mux[b]}
        if len(in_a) != 1 or len(in_b) != 1 or in_a == in_b:
            problems.append(f"edge {e}: channels {p.as_list()} not split between {a} and {b}")
    for e in plan.topology.edges:
        if e not in plan.edge_assignment:
            problems.append(f"edge {e} has no channel pair")
    all_channels = [c for u in names for c in plan.user_mux[u]]
    if len(all_channels) != len(set(all_channels)):
        problems.append("a channel appears in more than one multiplex set")
    expected = {c for p in plan.edge_assignment.values() for c in p.as_list()}
    if set(all_channels) != expected:
        problems.append("multiplex sets do not match the assigned channels")
    for idx, u in enumerate(names):
        degree = sum(1 for e in plan.topology.edges if idx in e)
        if len(plan.user_mux[u]) != degree:
            problems.append(f"user {u} has {len(plan.user_mux[u])} channels but degree {degree}")
    return problems


def demo_channels() -> list[int]:
    """Channels 27-32 and 36-41 used by the four-user demonstration."""
    return list(range(27, 33)) + list(range(36, 42))
