"""Linear observation systems ``y = H x`` assembled from a line bundle.

Model 1 (unknown ``x = c``)::

    H_i = w_i (I - n_i n_i^T),   y_i = H_i a_i

Model 2 (unknown ``x = [c, d]``)::

    H = [C D],  C = stack of w_i I,  D[3i:3i+3, i] = w_i n_i,  y_i = w_i a_i

so that ``H x = y`` reads ``w_i (c + d_i n_i) = w_i a_i``, i.e.
``d_i = n_i . (a_i - c)``.

Model 1 is stored as dense (N, 3, 3) blocks.  Model 2 stores only the
weights and the (N, 3) columns of ``D``; the full matrix is materialised on
demand (sparse or dense).
"""
from __future__ import annotations

import enum
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
import scipy.io
import scipy.sparse as sp

from .errors import DimensionMismatch
from .geometry import ObservationSet


class Layout(enum.Enum):
    MODEL1 = 1
    MODEL2 = 2


@dataclass(frozen=True)
class LinearSystem:
    layout: Layout
    weights: np.ndarray
    y: np.ndarray
    blocks: Optional[np.ndarray] = None       # Model 1: (N, 3, 3)
    d_columns: Optional[np.ndarray] = None    # Model 2: (N, 3), w_i n_i

    @property
    def n_obs(self) -> int:
        return len(self.weights)

    @property
    def rows(self) -> int:
        return 3 * self.n_obs

    @property
    def cols(self) -> int:
        return 3 if self.layout is Layout.MODEL1 else 3 + self.n_obs

    @property
    def shape(self):
        return (self.rows, self.cols)

    @property
    def y_blocks(self) -> np.ndarray:
        return self.y.reshape(-1, 3)

    def matvec(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        if x.shape != (self.cols,):
            raise DimensionMismatch(f"x has shape {x.shape}, expected ({self.cols},)")
        if self.layout is Layout.MODEL1:
            return np.einsum("nij,j->ni", self.blocks, x).reshape(-1)
        c, d = x[:3], x[3:]
        out = self.weights[:, None] * c[None, :] + d[:, None] * self.d_columns
        return out.reshape(-1)

    def rmatvec(self, v) -> np.ndarray:
        v = np.asarray(v, dtype=float)
        if v.shape != (self.rows,):
            raise DimensionMismatch(f"v has shape {v.shape}, expected ({self.rows},)")
        vb = v.reshape(-1, 3)
        if self.layout is Layout.MODEL1:
            return np.einsum("nij,ni->j", self.blocks, vb)
        return np.concatenate([self.weights @ vb, np.sum(self.d_columns * vb, axis=1)])

    def sparse(self) -> sp.csr_matrix:
        n = self.n_obs
        if self.layout is Layout.MODEL1:
            return sp.csr_matrix(self.blocks.reshape(3 * n, 3))
        rows = np.arange(3 * n)
        c_part = sp.csr_matrix(
            (np.repeat(self.weights, 3), (rows, np.tile(np.arange(3), n))), shape=(3 * n, 3))
        d_part = sp.csr_matrix(
            (self.d_columns.reshape(-1), (rows, np.repeat(np.arange(n), 3))), shape=(3 * n, n))
        return sp.hstack([c_part, d_part], format="csr")

    def toarray(self) -> np.ndarray:
        if self.layout is Layout.MODEL1:
            return self.blocks.reshape(3 * self.n_obs, 3).copy()
        return self.sparse().toarray()

    @property
    def H(self):
        """Dense array for Model 1, CSR sparse matrix for Model 2."""
        if self.layout is Layout.MODEL1:
            return self.toarray()
        return self.sparse()


@dataclass
class Solution:
    center: np.ndarray
    aux_distances: Optional[np.ndarray] = None
    diagnostics: object = None
    x: Optional[np.ndarray] = field(default=None, repr=False)

    def to_dict(self) -> dict:
        out = {"center": [float(v) for v in self.center],
               "aux_distances": (None if self.aux_distances is None
                                 else [float(v) for v in self.aux_distances])}
        if self.diagnostics is not None:
            out["diagnostics"] = self.diagnostics.to_dict()
        return out


def _freeze(*arrays):
    for a in arrays:
        a.flags.writeable = False


def _require_nonempty(obs: ObservationSet):
    if len(obs) < 1:
        raise DimensionMismatch("at least one observation is required")


def build_model1(obs: ObservationSet) -> LinearSystem:
    _require_nonempty(obs)
    n = obs.directions
    w = obs.weights.copy()
    proj = np.eye(3)[None, :, :] - n[:, :, None] * n[:, None, :]
    blocks = w[:, None, None] * proj
    y = np.einsum("nij,nj->ni", blocks, obs.anchors).reshape(-1)
    _freeze(blocks, y, w)
    return LinearSystem(Layout.MODEL1, w, y, blocks=blocks)


def build_model2(obs: ObservationSet) -> LinearSystem:
    _require_nonempty(obs)
    w = obs.weights.copy()
    d_columns = w[:, None] * obs.directions
    y = (w[:, None] * obs.anchors).reshape(-1)
    _freeze(d_columns, y, w)
    return LinearSystem(Layout.MODEL2, w, y, d_columns=d_columns)


def build_system(obs: ObservationSet, model: int) -> LinearSystem:
    if int(model) == 1:
        return build_model1(obs)
    if int(model) == 2:
        return build_model2(obs)
    raise ValueError(f"unknown model {model!r}; expected 1 or 2")


def extract_solution(system: LinearSystem, x, diagnostics=None) -> Solution:
    x = np.asarray(x, dtype=float).reshape(-1)
    if x.shape != (system.cols,):
        raise DimensionMismatch(
            f"solution vector has length {x.size}, system expects {system.cols}")
    if system.layout is Layout.MODEL1:
        return Solution(center=x.copy(), diagnostics=diagnostics, x=x.copy())
    return Solution(center=x[:3].copy(), aux_distances=x[3:].copy(),
                    diagnostics=diagnostics, x=x.copy())


def dump_system(system: LinearSystem, stem) -> tuple[Path, Path]:
    """Write ``H`` and ``y`` as Matrix Market files ``<stem>.H.mtx`` / ``<stem>.y.mtx``."""
    stem = Path(stem)
    h_path = stem.with_name(stem.name + ".H.mtx")
    y_path = stem.with_name(stem.name + ".y.mtx")
    scipy.io.mmwrite(h_path, system.sparse(), comment=f"layout={system.layout.name}",
                     precision=17)
    scipy.io.mmwrite(y_path, system.y.reshape(-1, 1), precision=17)
    return h_path, y_path
