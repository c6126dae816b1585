"""Closed-form singles, coincidence and accidental rates of the network.

Symbols follow the usual pair-source bookkeeping: ``P`` is the generated
pair rate such that each link receives ``P/2`` pairs per second, ``eta`` the
full per-photon detection probability, ``D`` the detector dark rate and
``tau`` the coincidence window. Accidentals are polarization-uncorrelated,
so half of them are errors.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .coincidence import KEY_FIDELITY_THRESHOLD, secure_key_rate
from .eventsim import GateConfig
from .netplan import channels_required


@dataclass(frozen=True)
class ScalingParams:
    n_users: int
    total_pair_rate: float
    system_efficiency: float
    dark_rate: float
    coincidence_window: float
    channels_per_detector_divisor: int | None = None

    def __post_init__(self):
        if self.n_users < 2:
            raise ValueError("need at least 2 users")
        if not 0.0 <= self.system_efficiency <= 1.0:
            raise ValueError("system efficiency must lie in [0, 1]")
        if min(self.total_pair_rate, self.dark_rate, self.coincidence_window) < 0:
            raise ValueError("rates and window must be non-negative")
        m = self.m
        if not 1 <= m <= self.n_users - 1:
            raise ValueError(f"detector split m={m} outside 1..{self.n_users - 1}")

    @property
    def m(self) -> int:
        return 1 if self.channels_per_detector_divisor is None else self.channels_per_detector_divisor

    @property
    def channel_load(self) -> float:
        """Links served by one detector; fractional when N-1 does not divide by m."""
        return (self.n_users - 1) / self.m

    @property
    def link_pair_rate(self) -> float:
        return self.total_pair_rate / 2.0


@dataclass(frozen=True)
class CurvePoint:
    n_users: int
    eta: float
    loss_db: float
    singles_hz: float
    ctrue_hz: float
    acc_hz: float
    qber: float
    fidelity: float


def singles_rate(p: ScalingParams) -> float:
    """Counts per detector after discarding those claimed by other links."""
    L = p.channel_load
    half = p.link_pair_rate
    eta = p.system_efficiency
    return p.dark_rate + L * half * eta - (L - 1) * half * eta**2


def link_rates(p: ScalingParams) -> tuple[float, float, float]:
    """(true coincidences, accidentals, total coincidences) per link, in Hz."""
    c_true = p.link_pair_rate * p.system_efficiency**2
    s = singles_rate(p)
    acc = p.coincidence_window * s**2
    return c_true, acc, c_true + acc


def qber_of(c_true: float, acc: float) -> float:
    if c_true + acc <= 0:
        return 0.5
    return 0.5 * acc / (c_true + acc)


def fidelity_of_qber(q: float) -> float:
    return 1.0 - 1.5 * q


def loss_db(eta: float) -> float:
    return math.inf if eta <= 0 else -10.0 * math.log10(eta)


def eta_of_loss(db: float) -> float:
    return 10.0 ** (-db / 10.0)


def curve_point(p: ScalingParams, acc_factor: float = 1.0) -> CurvePoint:
    c_true, acc, _ = link_rates(p)
    acc *= acc_factor
    q = qber_of(c_true, acc)
    return CurvePoint(
        p.n_users, p.system_efficiency, loss_db(p.system_efficiency),
        singles_rate(p), c_true, acc, q, fidelity_of_qber(q),
    )


def fidelity_curve(n_users: int, tau: float, P: float, D: float, eta_grid: Iterable[float],
                   m: int | None = None, acc_factor: float = 1.0) -> list[CurvePoint]:
    etas = list(eta_grid)
    if any(b < a for a, b in zip(etas, etas[1:])):
        raise ValueError("efficiency grid must be ascending")
    return [curve_point(ScalingParams(n_users, P, eta, D, tau, m), acc_factor) for eta in etas]


def max_users_at_loss(loss: float, tau: float, P: float, D: float, f_min: float = KEY_FIDELITY_THRESHOLD,
                      n_cap: int = 10_000, max_channels: int | None = None) -> int:
    """Largest N whose links still reach ``f_min`` at the given loss, else 0.

    Fidelity falls with N at fixed loss, so the first failing N ends the
    search. ``max_channels`` caps N to what the channel plan can serve.
    """
    if loss < 0:
        raise ValueError("loss must be non-negative")
    eta = eta_of_loss(loss)
    best = 0
    for n in range(2, n_cap + 1):
        if max_channels is not None and channels_required(n) > max_channels:
            break
        if curve_point(ScalingParams(n, P, eta, D, tau)).fidelity >= f_min:
            best = n
        else:
            break
    return best


def loss_at_fidelity(n_users: int, tau: float, P: float, D: float, f_min: float = KEY_FIDELITY_THRESHOLD,
                     max_loss: float = 200.0) -> float:
    """Highest loss (dB) at which an N-user link still reaches ``f_min``; bisection."""
    def ok(db):
        return curve_point(ScalingParams(n_users, P, eta_of_loss(db), D, tau)).fidelity >= f_min

    if not ok(0.0):
        return 0.0
    lo, hi = 0.0, max_loss
    if ok(hi):
        return hi
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        if ok(mid):
            lo = mid
        else:
            hi = mid
    return lo


def _link_secure(p: ScalingParams) -> tuple[float, float]:
    c_true, acc, c = link_rates(p)
    q = qber_of(c_true, acc)
    return secure_key_rate(c, min(q, 0.5)), q


def detector_split_gain(p: ScalingParams, m: int) -> tuple[float, float]:
    """Ratio of total secure key rate with ``m`` detectors per user vs one,
    and the per-link QBER with ``m`` detectors."""
    if not 1 <= m <= p.n_users - 1:
        raise ValueError(f"m={m} outside 1..{p.n_users - 1}")
    n_links = p.n_users * (p.n_users - 1) / 2
    base, _ = _link_secure(replace(p, channels_per_detector_divisor=1))
    split, q = _link_secure(replace(p, channels_per_detector_divisor=m))
    if base == 0:
        return (math.inf if split > 0 else 1.0), q
    return (n_links * split) / (n_links * base), q


def pulsed_accidental_factor(gate: GateConfig) -> float:
    """Duty cycle of the gating; multiplies the accidental rate."""
    return min(1.0, gate.duty_cycle)


CURVE_COLUMNS = ["N", "eta", "loss_db", "singles_hz", "ctrue_hz", "acc_hz", "qber", "fidelity"]


def write_curve_csv(points: Sequence[CurvePoint], path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(CURVE_COLUMNS)
        for pt in points:
            w.writerow([pt.n_users, repr(pt.eta), repr(pt.loss_db), repr(pt.singles_hz), repr(pt.ctrue_hz),
                        repr(pt.acc_hz), repr(pt.qber), repr(pt.fidelity)])


def default_eta_grid(n: int = 121, min_db: float = 0.0, max_db: float = 60.0) -> np.ndarray:
    """Efficiencies evenly spaced in dB, returned ascending."""
    return np.sort(eta_of_loss(np.linspace(min_db, max_db, n)))
