"""Curve containers and CSV ingestion.

The on-disk format is a plain CSV with header ``curve_id,t,y``. Rows are
grouped by curve, sorted by t, and duplicate evaluation points are
either rejected or broken by a small seeded jitter (a tenth of the
smallest positive gap), mirroring the usual preprocessing for repeated
measurement times.
"""

import csv
from dataclasses import dataclass, field

import numpy as np

from .errors import DegeneracyError, ParseError

__all__ = ["Curve", "CurveSet", "ingest_csv"]


@dataclass
class Curve:
    curve_id: str
    t: np.ndarray
    y: np.ndarray

    def __post_init__(self):
        self.t = np.asarray(self.t, dtype=float)
        self.y = np.asarray(self.y, dtype=float)
        if self.t.shape != self.y.shape or self.t.ndim != 1:
            raise DegeneracyError(f"curve {self.curve_id!r}: points and values must be equal-length vectors")
        if self.t.size < 2:
            raise DegeneracyError(f"curve {self.curve_id!r}: need at least two observations")

    @property
    def n(self):
        return self.t.size


@dataclass
class CurveSet:
    """A collection of observed curves, each with its own evaluation points."""

    curves: list[Curve]
    shared_grid: bool = field(default=False)

    def __post_init__(self):
        if not self.curves:
            raise DegeneracyError("empty curve set")
        t0 = self.curves[0].t
        self.shared_grid = all(c.t.shape == t0.shape and np.array_equal(c.t, t0) for c in self.curves)

    @property
    def m(self):
        return len(self.curves)

    @property
    def n_total(self):
        return sum(c.n for c in self.curves)

    def domain(self):
        lo = min(c.t.min() for c in self.curves)
        hi = max(c.t.max() for c in self.curves)
        return float(lo), float(hi)


def _jitter_duplicates(t, rng):
    gaps = np.diff(np.sort(t))
    positive = gaps[gaps > 0]
    if positive.size == 0:
        raise DegeneracyError("all evaluation points coincide; jitter cannot separate them")
    delta = positive.min() / 10.0
    return t + rng.uniform(-delta / 2.0, delta / 2.0, size=t.size)


def ingest_csv(path, jitter_seed=None):
    """Read a ``curve_id,t,y`` CSV into a CurveSet.

    Rows are grouped by curve_id (first-appearance order) and sorted by
    t. When a curve contains duplicate t values and ``jitter_seed`` is
    given, all of that curve's points receive U(-delta/2, delta/2) noise
    with delta one tenth of its smallest positive gap; without a seed,
    duplicates raise DegeneracyError.
    """
    groups: dict[str, list[tuple[float, float]]] = {}
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ParseError(f"{path}: empty file") from None
        if [h.strip() for h in header] != ["curve_id", "t", "y"]:
            raise ParseError(f"{path}: line 1: expected header 'curve_id,t,y', got {','.join(header)!r}")
        for lineno, row in enumerate(reader, start=2):
            if not row or (len(row) == 1 and not row[0].strip()):
                continue
            if len(row) != 3:
                raise ParseError(f"{path}: line {lineno}: expected 3 fields, got {len(row)}")
            cid = row[0].strip()
            try:
                t_val = float(row[1])
                y_val = float(row[2])
            except ValueError:
                raise ParseError(f"{path}: line {lineno}: non-numeric t or y in {row!r}") from None
            if not (np.isfinite(t_val) and np.isfinite(y_val)):
                raise ParseError(f"{path}: line {lineno}: non-finite t or y")
            groups.setdefault(cid, []).append((t_val, y_val))

    if not groups:
        raise ParseError(f"{path}: no data rows")

    curves = []
    for idx, (cid, rows) in enumerate(groups.items()):
        t = np.array([r[0] for r in rows])
        y = np.array([r[1] for r in rows])
        if np.unique(t).size < t.size:
            if jitter_seed is None:
                raise DegeneracyError(
                    f"curve {cid!r} has duplicate evaluation points; pass a jitter seed to break ties"
                )
            rng = np.random.default_rng(np.random.SeedSequence(jitter_seed, spawn_key=(idx,)))
            t = _jitter_duplicates(t, rng)
            if np.unique(t).size < t.size:
                raise DegeneracyError(f"curve {cid!r}: duplicate points remain after jitter")
        order = np.argsort(t, kind="stable")
        curves.append(Curve(curve_id=cid, t=t[order], y=y[order]))
    return CurveSet(curves=curves)
