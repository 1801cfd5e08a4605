"""Censored instrumental-variable samples: data model, CSV I/O and validation."""

from __future__ import annotations

import csv
import json
import re
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

HEAVY_CENSORING_FRACTION = 0.75


class DatasetError(ValueError):
    """Raised when input data cannot form a valid censored sample."""


@dataclass(frozen=True)
class Subject:
    log_time: float
    event: int
    exposure: float
    confounders: np.ndarray
    instruments: np.ndarray


def _frozen(a, ndim: int) -> np.ndarray:
    arr = np.array(a, dtype=float, copy=True)
    if ndim == 2 and arr.ndim == 1:
        arr = arr[:, None]
    if arr.ndim != ndim:
        raise DatasetError(f"expected a {ndim}-d array, got shape {arr.shape}")
    arr.setflags(write=False)
    return arr


class CensoredSample:
    """A validated, immutable collection of right-censored IV observations.

    Arrays are stored column-wise; ``subjects`` yields row views on demand.

    Parameters
    ----------
    log_time : array of shape (n,)
        Observed log follow-up time, ``min(Y, C)``.
    event : array of shape (n,)
        1 for an observed event, 0 for a censored observation.
    exposure : array of shape (n,)
        Endogenous exposure ``X``.
    confounders : array of shape (n, p)
        Observed confounders ``D``; ``p`` may be zero.
    instruments : array of shape (n, q)
        Instruments ``Z`` with ``q >= 1``.
    """

    def __init__(self, log_time, event, exposure, confounders=None, instruments=None):
        self.log_time = _frozen(log_time, 1)
        n = self.log_time.shape[0]
        ev = np.asarray(event)
        if ev.shape != (n,):
            raise DatasetError("event must have the same length as log_time")
        if not np.all((ev == 0) | (ev == 1)):
            bad = int(np.flatnonzero((ev != 0) & (ev != 1))[0])
            raise DatasetError(f"status outside {{0,1}} at row {bad + 1}")
        self.event = ev.astype(np.int8)
        self.event.setflags(write=False)
        self.exposure = _frozen(exposure, 1)
        if confounders is None:
            confounders = np.empty((n, 0))
        self.confounders = _frozen(confounders, 2)
        if instruments is None:
            raise DatasetError("at least one instrument is required")
        self.instruments = _frozen(instruments, 2)

        for name in ("exposure", "confounders", "instruments"):
            if getattr(self, name).shape[0] != n:
                raise DatasetError(f"{name} has {getattr(self, name).shape[0]} rows, expected {n}")
        for name in ("log_time", "exposure", "confounders", "instruments"):
            arr = getattr(self, name)
            if not np.all(np.isfinite(arr)):
                row = int(np.flatnonzero(~np.isfinite(arr).reshape(n, -1).all(axis=1))[0])
                raise DatasetError(f"non-finite {name} at row {row + 1}")
        if self.q < 1:
            raise DatasetError("at least one instrument is required")
        if n < self.min_size(self.p, self.q):
            raise DatasetError(
                f"n={n} is too small to identify both stages "
                f"(need at least {self.min_size(self.p, self.q)})"
            )
        if not np.any(self.event == 1):
            raise DatasetError("zero events")

    @staticmethod
    def min_size(p: int, q: int) -> int:
        return (1 + q + p) + (2 + p)

    @property
    def n(self) -> int:
        return self.log_time.shape[0]

    @property
    def p(self) -> int:
        return self.confounders.shape[1]

    @property
    def q(self) -> int:
        return self.instruments.shape[1]

    @property
    def censoring_fraction(self) -> float:
        return float(1.0 - self.event.mean())

    @property
    def subjects(self) -> Iterator[Subject]:
        for i in range(self.n):
            yield Subject(
                float(self.log_time[i]),
                int(self.event[i]),
                float(self.exposure[i]),
                self.confounders[i],
                self.instruments[i],
            )

    def __len__(self) -> int:
        return self.n

    def __repr__(self) -> str:
        return (
            f"CensoredSample(n={self.n}, p={self.p}, q={self.q}, "
            f"censored={self.censoring_fraction:.3f})"
        )

    @classmethod
    def from_subjects(cls, subjects: Sequence[Subject]) -> "CensoredSample":
        subjects = list(subjects)
        if not subjects:
            raise DatasetError("empty sample")
        return cls(
            [s.log_time for s in subjects],
            [s.event for s in subjects],
            [s.exposure for s in subjects],
            np.array([np.atleast_1d(np.asarray(s.confounders, dtype=float)) for s in subjects]),
            np.array([np.atleast_1d(np.asarray(s.instruments, dtype=float)) for s in subjects]),
        )


@dataclass(frozen=True)
class ColumnSpec:
    """Binds CSV header names to sample fields.

    ``confounders`` / ``instruments`` left as ``None`` are discovered from the
    header as ``d1..dp`` / ``z1..zq``.
    """

    time: str = "time"
    status: str = "status"
    exposure: str = "x"
    confounders: tuple[str, ...] | None = None
    instruments: tuple[str, ...] | None = None
    raw_time: bool = False

    @classmethod
    def from_json(cls, path: str | Path) -> "ColumnSpec":
        with open(path, encoding="utf-8") as fh:
            raw = json.load(fh)
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(raw) - known
        if unknown:
            raise DatasetError(f"unknown schema keys: {sorted(unknown)}")
        for key in ("confounders", "instruments"):
            if raw.get(key) is not None:
                raw[key] = tuple(raw[key])
        return cls(**raw)


def _numbered_columns(header: Sequence[str], prefix: str) -> tuple[str, ...]:
    pat = re.compile(rf"^{prefix}(\d+)$")
    found = sorted((int(m.group(1)), h) for h in header if (m := pat.match(h)))
    idx = [k for k, _ in found]
    if idx != list(range(1, len(idx) + 1)):
        raise DatasetError(f"columns {prefix}1..{prefix}k must be consecutive, found {[h for _, h in found]}")
    return tuple(h for _, h in found)


def load_csv(path: str | Path, schema: ColumnSpec | None = None) -> CensoredSample:
    """Read a censored IV sample from a header-bound CSV file."""
    schema = schema or ColumnSpec()
    path = Path(path)
    if not path.exists():
        raise DatasetError(f"file not found: {path}")
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise DatasetError("empty file") from None
        rows = [r for r in reader if r]

    conf = schema.confounders if schema.confounders is not None else _numbered_columns(header, "d")
    inst = schema.instruments if schema.instruments is not None else _numbered_columns(header, "z")
    if not inst:
        raise DatasetError("missing column(s): z1")
    wanted = [schema.time, schema.status, schema.exposure, *conf, *inst]
    missing = [c for c in wanted if c not in header]
    if missing:
        raise DatasetError(f"missing column(s): {', '.join(missing)}")
    pos = {h: i for i, h in enumerate(header)}

    values = np.empty((len(rows), len(wanted)))
    for r, row in enumerate(rows, start=1):
        if len(row) != len(header):
            raise DatasetError(f"row {r} has {len(row)} fields, expected {len(header)}")
        for c, name in enumerate(wanted):
            cell = row[pos[name]].strip()
            if cell == "":
                raise DatasetError(f"missing value at row {r}, column {name!r}")
            try:
                values[r - 1, c] = float(cell)
            except ValueError:
                raise DatasetError(f"non-numeric value {cell!r} at row {r}, column {name!r}") from None

    time = values[:, 0]
    status = values[:, 1]
    bad = np.flatnonzero((status != 0) & (status != 1))
    if bad.size:
        raise DatasetError(f"status outside {{0,1}} at row {bad[0] + 1}")
    if schema.raw_time:
        nonpos = np.flatnonzero(~(time > 0))
        if nonpos.size:
            raise DatasetError(f"non-positive raw time at row {nonpos[0] + 1}")
        time = np.log(time)
    if not np.any(status == 1):
        raise DatasetError("zero events")

    k = 3 + len(conf)
    return CensoredSample(time, status.astype(int), values[:, 2], values[:, 3:k], values[:, k:])


def write_csv(sample: CensoredSample, path: str | Path, raw_time: bool = False) -> None:
    """Write ``sample`` in the dataset schema with 17 significant digits.

    With ``raw_time`` the time column holds ``exp(log_time)``.
    """
    header = ["time", "status", "x"]
    header += [f"d{j + 1}" for j in range(sample.p)]
    header += [f"z{j + 1}" for j in range(sample.q)]
    time = np.exp(sample.log_time) if raw_time else sample.log_time
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for i in range(sample.n):
            w.writerow(
                [f"{time[i]:.17g}", str(int(sample.event[i])), f"{sample.exposure[i]:.17g}"]
                + [f"{v:.17g}" for v in sample.confounders[i]]
                + [f"{v:.17g}" for v in sample.instruments[i]]
            )


def validate(sample: CensoredSample) -> list[str]:
    """Return advisory warnings for a sample; never raises, never mutates."""
    warnings: list[str] = []
    t_max = sample.log_time.max()
    at_max = sample.event[sample.log_time == t_max]
    if np.all(at_max == 0):
        warnings.append(
            "improper censoring-distribution tail: the largest observation is censored"
        )
    frac = sample.censoring_fraction
    if frac > HEAVY_CENSORING_FRACTION:
        warnings.append(
            f"heavy censoring: {frac:.1%} of observations are censored; "
            "estimates and sandwich variances may be unstable"
        )
    design = np.column_stack([np.ones(sample.n), sample.instruments, sample.confounders])
    rank = np.linalg.matrix_rank(design)
    if rank < design.shape[1]:
        warnings.append(
            f"first-stage design is rank deficient (rank {rank} < {design.shape[1]} columns)"
        )
    return warnings
