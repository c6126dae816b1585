"""Time-tag streams and their CSV file format.

Files carry one row per detection, sorted by time::

    time_ps,detector,basis,outcome,origin
    1234,Alice,HV,0,pair:Alice-Bob:17
    2210,Alice,HV,1,dark

The ``origin`` column is ground truth from the simulator and is left out in
blind mode.
"""
from __future__ import annotations

import csv
import io
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .quantum import Basis

PS_PER_S = 10**12
DARK = -1
_BASES = (Basis.HV, Basis.DA)
HEADER = ["time_ps", "detector", "basis", "outcome", "origin"]


class TagFileError(ValueError):
    def __init__(self, message: str, line: int | None = None, path: str | None = None):
        self.line = line
        self.path = path
        where = ""
        if path is not None:
            where += f"{path}"
        if line is not None:
            where += f":{line}" if where else f"line {line}"
        super().__init__(f"{where}: {message}" if where else message)


class UnsortedStreamError(ValueError):
    pass


def to_ps(seconds: float) -> int:
    return int(round(seconds * PS_PER_S))


@dataclass(frozen=True)
class TimeTagStream:
    """Detections of one detector, sorted by integer-picosecond time.

    ``origin_link`` indexes ``link_labels`` (``DARK`` for dark counts) and
    ``origin_serial`` numbers the pairs of each link.
    """

    detector: str
    time: np.ndarray
    basis: np.ndarray
    outcome: np.ndarray
    origin_link: np.ndarray | None = None
    origin_serial: np.ndarray | None = None
    link_labels: tuple[str, ...] = field(default=())

    def __post_init__(self):
        n = len(self.time)
        for name in ("basis", "outcome", "origin_link", "origin_serial"):
            arr = getattr(self, name)
            if arr is not None and len(arr) != n:
                raise ValueError(f"{name} has {len(arr)} entries, time has {n}")
        for name in ("time", "basis", "outcome", "origin_link", "origin_serial"):
            arr = getattr(self, name)
            if arr is not None:
                arr.setflags(write=False)

    @classmethod
    def empty(cls, detector: str, labelled: bool = True, link_labels: Sequence[str] = ()) -> "TimeTagStream":
        z = np.zeros(0, dtype=np.int64)
        i8 = np.zeros(0, dtype=np.int8)
        if labelled:
            return cls(detector, z, i8, i8.copy(), np.zeros(0, np.int32), z.copy(), tuple(link_labels))
        return cls(detector, z, i8, i8.copy())

    @classmethod
    def from_times(cls, detector: str, times: Iterable[int], basis: Basis = Basis.HV, outcome: int = 0) -> "TimeTagStream":
        t = np.asarray(list(times) if not isinstance(times, np.ndarray) else times, dtype=np.int64)
        return cls(
            detector,
            t,
            np.full(len(t), _BASES.index(Basis(basis)), np.int8),
            np.full(len(t), outcome, np.int8),
        )

    def __len__(self) -> int:
        return len(self.time)

    @property
    def labelled(self) -> bool:
        return self.origin_link is not None

    def is_sorted(self) -> bool:
        return bool(np.all(np.diff(self.time) >= 0))

    def require_sorted(self) -> None:
        if not self.is_sorted():
            bad = int(np.argmax(np.diff(self.time) < 0)) + 1
            raise UnsortedStreamError(f"stream {self.detector!r} not sorted at index {bad}")

    def select(self, mask_or_index: np.ndarray) -> "TimeTagStream":
        m = mask_or_index
        return TimeTagStream(
            self.detector,
            self.time[m],
            self.basis[m],
            self.outcome[m],
            None if self.origin_link is None else self.origin_link[m],
            None if self.origin_serial is None else self.origin_serial[m],
            self.link_labels,
        )

    def blind(self) -> "TimeTagStream":
        return TimeTagStream(self.detector, self.time, self.basis, self.outcome)

    def shifted(self, delta_ps: int) -> "TimeTagStream":
        return TimeTagStream(
            self.detector, self.time + np.int64(delta_ps), self.basis, self.outcome,
            self.origin_link, self.origin_serial, self.link_labels,
        )

    def rate(self, duration_s: float) -> float:
        return len(self) / duration_s if duration_s > 0 else 0.0

    def origin_strings(self) -> list[str]:
        if self.origin_link is None:
            return [""] * len(self)
        out = []
        for link, serial in zip(self.origin_link.tolist(), self.origin_serial.tolist()):
            out.append("dark" if link == DARK else f"pair:{self.link_labels[link]}:{serial}")
        return out

    def equals(self, other: "TimeTagStream") -> bool:
        def same(x, y):
            if x is None or y is None:
                return x is None and y is None
            return np.array_equal(x, y)

        return (
            self.detector == other.detector
            and same(self.time, other.time)
            and same(self.basis, other.basis)
            and same(self.outcome, other.outcome)
            and same(self.origin_link, other.origin_link)
            and same(self.origin_serial, other.origin_serial)
        )


def merge_sorted(detector: str, parts: Sequence[TimeTagStream], link_labels: Sequence[str] = ()) -> TimeTagStream:
    """Deterministic stable merge of several streams into one sorted stream."""
    parts = [p for p in parts if len(p)]
    if not parts:
        return TimeTagStream.empty(detector, labelled=True, link_labels=link_labels)
    t = np.concatenate([p.time for p in parts])
    order = np.argsort(t, kind="stable")
    labelled = all(p.labelled for p in parts)
    return TimeTagStream(
        detector,
        t[order],
        np.concatenate([p.basis for p in parts])[order],
        np.concatenate([p.outcome for p in parts])[order],
        np.concatenate([p.origin_link for p in parts])[order] if labelled else None,
        np.concatenate([p.origin_serial for p in parts])[order] if labelled else None,
        tuple(link_labels),
    )


def write_csv(streams: Sequence[TimeTagStream] | TimeTagStream, path: str | Path | io.TextIOBase, blind: bool = False) -> None:
    """Write one or more streams into a single time-sorted CSV file."""
    if isinstance(streams, TimeTagStream):
        streams = [streams]
    with_origin = not blind and all(s.labelled for s in streams)
    streams = list(streams)
    header = HEADER if with_origin else HEADER[:4]
    fields = []
    if streams:
        t = np.concatenate([s.time for s in streams])
        order = np.argsort(t, kind="stable")
        fields.append(t[order].astype(str))
        fields.append(np.concatenate([np.full(len(s), s.detector, dtype=object) for s in streams])[order].astype(str))
        fields.append(np.array([b.value for b in _BASES])[np.concatenate([s.basis for s in streams])[order]])
        fields.append(np.concatenate([s.outcome for s in streams])[order].astype(str))
        if with_origin:
            fields.append(np.concatenate([_origin_column(s) for s in streams])[order])
    body = "\n".join(map(",".join, zip(*(f.tolist() for f in fields)))) if fields and len(fields[0]) else ""
    text = ",".join(header) + "\n" + (body + "\n" if body else "")

    if isinstance(path, (str, Path)):
        with open(path, "w", newline="") as fh:
            fh.write(text)
    else:
        path.write(text)


def _origin_column(s: TimeTagStream) -> np.ndarray:
    if len(s) == 0:
        return np.zeros(0, dtype=str)
    prefix = np.array([f"pair:{name}:" for name in s.link_labels] + ["dark"])
    dark = s.origin_link == DARK
    serial = np.where(dark, "", s.origin_serial.astype(str))
    return np.char.add(prefix[s.origin_link], serial)


_FIELD_BYTES = 64


def read_csv(path: str | Path, link_labels: Sequence[str] | None = None) -> dict[str, TimeTagStream]:
    """Parse a tag file into one stream per detector.

    Rows must be sorted by ``time_ps``; violations raise ``TagFileError``
    carrying the offending line number. Clean files go through a columnar
    parser; anything unusual is re-read row by row so that the first bad
    line can be named.
    """
    path = Path(path)
    header = _read_header(path)
    streams = _read_columnar(path, len(header) == 5, link_labels)
    if streams is None:
        streams = _read_rows(path, header, link_labels)
    return streams


def _read_header(path: Path) -> list[str]:
    with open(path, newline="") as fh:
        try:
            header = next(csv.reader(fh))
        except StopIteration:
            raise TagFileError("empty file, missing header", 1, str(path)) from None
    header = [h.strip() for h in header]
    if header[:4] != HEADER[:4] or len(header) > 5 or (len(header) == 5 and header[4] != "origin"):
        raise TagFileError(f"bad header {header}, expected {','.join(HEADER)}", 1, str(path))
    return header


def _read_columnar(path: Path, has_origin: bool, link_labels) -> dict[str, TimeTagStream] | None:
    fields = [("t", "i8"), ("det", f"S{_FIELD_BYTES}"), ("basis", "S4"), ("out", "i8")]
    if has_origin:
        fields.append(("origin", f"S{_FIELD_BYTES}"))
    try:
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            data = np.loadtxt(path, delimiter=",", skiprows=1, dtype=fields, ndmin=1, encoding="utf-8")
    except ValueError:
        return None
    if len(data) == 0:
        return {}
    t = data["t"]
    det = np.strings.strip(data["det"])
    basis = np.strings.upper(np.strings.strip(data["basis"]))
    out = data["out"]
    if (np.strings.str_len(data["det"]).max() >= _FIELD_BYTES
            or np.any(np.diff(t) < 0) or np.any((out != 0) & (out != 1))):
        return None
    is_hv, is_da = basis == b"HV", basis == b"DA"
    if not np.all(is_hv | is_da):
        return None
    link = serial = None
    labels = list(link_labels) if link_labels is not None else []
    if has_origin:
        origin = np.strings.strip(data["origin"])
        if np.strings.str_len(data["origin"]).max() >= _FIELD_BYTES:
            return None
        link = np.full(len(origin), -2, dtype=np.int32)
        serial = np.full(len(origin), -1, dtype=np.int64)
        link[origin == b"dark"] = DARK
        k = 0
        while True:
            todo = np.flatnonzero(link == -2)
            if len(todo) == 0:
                break
            if k == len(labels):
                parts = origin[todo[0]].decode().split(":")
                if len(parts) != 3 or parts[0] != "pair" or not parts[1]:
                    return None
                labels.append(parts[1])
            prefix = f"pair:{labels[k]}:".encode()
            hit = todo[np.strings.startswith(origin[todo], prefix)]
            k += 1
            if len(hit) == 0:
                continue
            digits = np.strings.replace(origin[hit], prefix, b"")
            if not np.all(np.strings.isdigit(digits)):
                return None
            link[hit] = k - 1
            serial[hit] = digits.astype(np.int64)
    if np.all(det == det[0]):
        det_u, det_inv = det[:1], np.zeros(len(det), dtype=np.int64)
    else:
        det_u, det_inv = np.unique(det, return_inverse=True)
    code = np.where(is_hv, 0, 1).astype(np.int8)
    streams = {}
    for k, name in enumerate(det_u.tolist()):
        m = det_inv == k
        streams[name.decode()] = TimeTagStream(
            name.decode(), t[m], code[m], out[m].astype(np.int8),
            link[m] if has_origin else None, serial[m] if has_origin else None,
            tuple(labels) if has_origin else (),
        )
    return streams


def _read_rows(path: Path, header: list[str], link_labels) -> dict[str, TimeTagStream]:
    has_origin = len(header) == 5
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        next(reader)
        cols: dict[str, list] = {}
        labels = list(link_labels) if link_labels is not None else []
        label_idx = {name: i for i, name in enumerate(labels)}
        last_t = None
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(header):
                raise TagFileError(f"expected {len(header)} fields, got {len(row)}", lineno, str(path))
            try:
                t = int(row[0])
                det = row[1].strip()
                basis = _BASES.index(Basis(row[2].strip().upper()))
                out = int(row[3])
            except ValueError as exc:
                raise TagFileError(f"cannot parse row {row}: {exc}", lineno, str(path)) from None
            if out not in (0, 1):
                raise TagFileError(f"outcome must be 0 or 1, got {out}", lineno, str(path))
            if last_t is not None and t < last_t:
                raise TagFileError(f"rows not sorted by time_ps ({t} after {last_t})", lineno, str(path))
            last_t = t
            c = cols.setdefault(det, [[], [], [], [], []])
            c[0].append(t)
            c[1].append(basis)
            c[2].append(out)
            if has_origin:
                origin = row[4].strip()
                if origin == "dark":
                    c[3].append(DARK)
                    c[4].append(-1)
                    continue
                parts = origin.split(":")
                if len(parts) != 3 or parts[0] != "pair" or not parts[2].isdigit():
                    raise TagFileError(f"bad origin {origin!r}", lineno, str(path))
                if parts[1] not in label_idx:
                    label_idx[parts[1]] = len(labels)
                    labels.append(parts[1])
                c[3].append(label_idx[parts[1]])
                c[4].append(int(parts[2]))
    streams = {}
    for det, c in cols.items():
        streams[det] = TimeTagStream(
            det,
            np.array(c[0], np.int64),
            np.array(c[1], np.int8),
            np.array(c[2], np.int8),
            np.array(c[3], np.int32) if has_origin else None,
            np.array(c[4], np.int64) if has_origin else None,
            tuple(labels) if has_origin else (),
        )
    return streams
