"""Points, directions and weighted line observations in 3D.

Every estimator in the package reduces to the residual between a candidate
center ``c`` and a line through ``anchor`` along a unit ``direction``::

    r = (I - n n^T) (c - a)

Points and directions are plain length-3 float arrays.
"""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

from .errors import DegenerateDirection, DimensionMismatch, ObservationFormatError

DIRECTION_EPS = 1e-12
CSV_HEADER = ("ax", "ay", "az", "nx", "ny", "nz", "w")


def as_point(p) -> np.ndarray:
    """Coerce ``p`` to a finite float array of shape (3,)."""
    arr = np.asarray(p, dtype=float).reshape(-1)
    if arr.shape != (3,):
        raise DimensionMismatch(f"expected a 3-vector, got shape {np.shape(p)}")
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"point has non-finite components: {arr}")
    return arr


def normalize_direction(v) -> np.ndarray:
    """Return ``v / |v|``; raise DegenerateDirection when ``|v| <= 1e-12``."""
    v = as_point(v)
    norm = float(np.linalg.norm(v))
    if norm <= DIRECTION_EPS:
        raise DegenerateDirection(f"cannot normalize near-zero vector {v}")
    return v / norm


@dataclass(frozen=True)
class LineObservation:
    """One bead: measured center of mass, principal axis and weight."""

    anchor: np.ndarray
    direction: np.ndarray
    weight: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "anchor", as_point(self.anchor))
        object.__setattr__(self, "direction", normalize_direction(self.direction))
        if not self.weight > 0:
            raise ValueError(f"weight must be positive, got {self.weight}")
        object.__setattr__(self, "weight", float(self.weight))


def point_line_residual(c, line: LineObservation) -> np.ndarray:
    r = as_point(c) - line.anchor
    n = line.direction
    return r - np.dot(r, n) * n


def point_line_distance(c, line: LineObservation) -> float:
    return float(np.linalg.norm(point_line_residual(c, line)))


class ObservationSet:
    """Ordered, immutable collection of line observations stored as arrays.

    ``anchors`` and ``directions`` have shape (N, 3), ``weights`` shape (N,).
    Row order is significant: the assembled systems stack blocks in it.

    Directions are renormalized unless ``normalize=False``; the raw form
    keeps noisy measured axes exactly as observed (Model 1 is sensitive to
    their norm, Model 2 is not).
    """

    def __init__(self, anchors, directions, weights=None, *, normalize: bool = True):
        anchors = np.array(anchors, dtype=float, copy=True).reshape(-1, 3)
        directions = np.array(directions, dtype=float, copy=True).reshape(-1, 3)
        if anchors.shape != directions.shape:
            raise DimensionMismatch(
                f"{len(anchors)} anchors but {len(directions)} directions")
        n = len(anchors)
        if weights is None:
            weights = np.ones(n)
        weights = np.array(weights, dtype=float, copy=True).reshape(-1)
        if weights.shape != (n,):
            raise DimensionMismatch(f"{n} observations but {weights.size} weights")
        if not (np.all(np.isfinite(anchors)) and np.all(np.isfinite(directions))):
            raise ValueError("observations contain non-finite values")
        if np.any(~(weights > 0)):
            raise ValueError("all weights must be positive")
        norms = np.linalg.norm(directions, axis=1)
        bad = np.flatnonzero(norms <= DIRECTION_EPS)
        if bad.size:
            raise DegenerateDirection(f"observation {bad[0]} has a near-zero direction")
        if normalize:
            directions /= norms[:, None]
        for arr in (anchors, directions, weights):
            arr.flags.writeable = False
        self.anchors = anchors
        self.directions = directions
        self.weights = weights
        self.normalized = normalize

    @classmethod
    def from_lines(cls, lines: Sequence[LineObservation]) -> "ObservationSet":
        if not lines:
            return cls.empty()
        return cls([l.anchor for l in lines], [l.direction for l in lines],
                   [l.weight for l in lines])

    @classmethod
    def empty(cls) -> "ObservationSet":
        return cls(np.zeros((0, 3)), np.zeros((0, 3)), np.zeros(0))

    def __len__(self) -> int:
        return len(self.anchors)

    @property
    def count(self) -> int:
        return len(self)

    def __getitem__(self, i) -> LineObservation:
        return LineObservation(self.anchors[i], self.directions[i], self.weights[i])

    def __iter__(self) -> Iterator[LineObservation]:
        for i in range(len(self)):
            yield self[i]

    def _reindexed(self, anchors, directions, weights) -> "ObservationSet":
        # directions are already in final form; skip renormalization so that
        # reordering and subsetting copy values bit for bit
        out = ObservationSet(anchors, directions, weights, normalize=False)
        out.normalized = self.normalized
        return out

    def permuted(self, order) -> "ObservationSet":
        order = np.asarray(order)
        return self._reindexed(self.anchors[order], self.directions[order], self.weights[order])

    def with_weights(self, weights) -> "ObservationSet":
        return self._reindexed(self.anchors, self.directions, weights)

    def subset(self, mask) -> "ObservationSet":
        mask = np.asarray(mask)
        return self._reindexed(self.anchors[mask], self.directions[mask], self.weights[mask])

    def residuals(self, c) -> np.ndarray:
        """Point-to-line residual of ``c`` against every line, shape (N, 3).

        Uses unit directions regardless of how the set was stored.
        """
        n = self.directions / np.linalg.norm(self.directions, axis=1)[:, None]
        r = as_point(c)[None, :] - self.anchors
        return r - np.sum(r * n, axis=1)[:, None] * n

    def distances(self, c) -> np.ndarray:
        return np.linalg.norm(self.residuals(c), axis=1)

    def __eq__(self, other):
        if not isinstance(other, ObservationSet):
            return NotImplemented
        return (np.array_equal(self.anchors, other.anchors)
                and np.array_equal(self.directions, other.directions)
                and np.array_equal(self.weights, other.weights))

    def __repr__(self):
        return f"ObservationSet(N={len(self)})"


def write_observations(obs: ObservationSet, path) -> None:
    """Write ``obs`` as CSV with header ``ax,ay,az,nx,ny,nz,w``.

    Floats are written with ``repr`` so a round trip is exact.
    """
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(CSV_HEADER)
    for a, n, w in zip(obs.anchors, obs.directions, obs.weights):
        writer.writerow([repr(float(v)) for v in (*a, *n, w)])
    Path(path).write_text(buf.getvalue())


def read_observations(path, *, normalize: bool = True) -> ObservationSet:
    """Parse an observation CSV; a zero-byte file is an empty set.

    Raises ``ObservationFormatError`` naming the 1-based line of the first
    bad row.
    """
    text = Path(path).read_text()
    rows = list(csv.reader(io.StringIO(text)))
    if not rows:
        return ObservationSet.empty()
    header = tuple(h.strip() for h in rows[0])
    if header != CSV_HEADER:
        raise ObservationFormatError(
            f"line 1: expected header {','.join(CSV_HEADER)}, got {','.join(header)}",
            line=1)
    values = []
    for lineno, row in enumerate(rows[1:], start=2):
        if not row or all(not f.strip() for f in row):
            continue
        if len(row) != 7:
            raise ObservationFormatError(
                f"line {lineno}: expected 7 fields, got {len(row)}", line=lineno)
        try:
            vals = [float(f) for f in row]
        except ValueError as exc:
            raise ObservationFormatError(f"line {lineno}: {exc}", line=lineno) from None
        if not all(np.isfinite(vals)) or vals[6] <= 0:
            raise ObservationFormatError(
                f"line {lineno}: non-finite value or non-positive weight", line=lineno)
        if np.linalg.norm(vals[3:6]) <= DIRECTION_EPS:
            raise ObservationFormatError(f"line {lineno}: zero direction", line=lineno)
        values.append(vals)
    if not values:
        return ObservationSet.empty()
    arr = np.array(values)
    return ObservationSet(arr[:, :3], arr[:, 3:6], arr[:, 6], normalize=normalize)
