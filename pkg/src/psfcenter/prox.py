"""Proximity operators for the robust loss menu and the box constraint.

``prox_{g f}(x) = argmin_u 1/2 |u - x|^2 + g f(u)``.

All functions take and return float arrays; the norm-type operators map
``x = 0`` to ``0``.
"""
from __future__ import annotations

import enum
import re
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from .errors import DimensionMismatch

BLOCK = 3


def _check_positive(name, value):
    if not value > 0:
        raise ValueError(f"{name} must be positive, got {value}")


def huber(u, t: float):
    """Huber function: ``u^2/2`` for ``|u| <= t``, else ``t (|u| - t/2)``."""
    _check_positive("t", t)
    a = np.abs(u)
    return np.where(a <= t, 0.5 * a * a, t * (a - 0.5 * t))


def prox_abs(x, gamma: float) -> np.ndarray:
    """Componentwise soft threshold."""
    _check_positive("gamma", gamma)
    x = np.asarray(x, dtype=float)
    return np.sign(x) * np.maximum(np.abs(x) - gamma, 0.0)


def prox_norm(x, gamma: float) -> np.ndarray:
    """Prox of ``gamma * |x|_2``: shrink the whole vector toward zero."""
    _check_positive("gamma", gamma)
    x = np.asarray(x, dtype=float)
    norm = np.linalg.norm(x)
    if norm <= gamma:
        return np.zeros_like(x)
    return x * (1.0 - gamma / norm)


def prox_huber(x, t: float, gamma: float):
    """Prox of ``gamma * L_t``, elementwise.

    Closed form of the variational definition: ``x / (1 + gamma)`` inside
    ``|x| <= t (1 + gamma)``, otherwise ``x - gamma t sign(x)``.
    """
    _check_positive("t", t)
    _check_positive("gamma", gamma)
    x = np.asarray(x, dtype=float)
    inside = np.abs(x) <= t * (1.0 + gamma)
    return np.where(inside, x / (1.0 + gamma), x - gamma * t * np.sign(x))


def prox_huber_of_norm(x, t: float, gamma: float) -> np.ndarray:
    """Prox of ``gamma * L_t(|x|_2)`` by radial reduction to the scalar case."""
    _check_positive("t", t)
    _check_positive("gamma", gamma)
    x = np.asarray(x, dtype=float)
    norm = np.linalg.norm(x)
    if norm == 0.0:
        return np.zeros_like(x)
    return (prox_huber(norm, t, gamma) / norm) * x


def prox_squared_norm(x, gamma: float) -> np.ndarray:
    """Prox of ``gamma * |x|^2``."""
    _check_positive("gamma", gamma)
    return np.asarray(x, dtype=float) / (1.0 + 2.0 * gamma)


def project_ball(x, radius: float = 1.0) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    norm = np.linalg.norm(x)
    if norm <= radius:
        return x.copy()
    return x * (radius / norm)


def prox_separable(x, block_size: int, prox: Callable[[np.ndarray], np.ndarray]) -> np.ndarray:
    """Apply ``prox`` independently to consecutive blocks of ``x``."""
    x = np.asarray(x, dtype=float)
    if block_size < 1 or x.size % block_size:
        raise DimensionMismatch(
            f"length {x.size} is not divisible into blocks of {block_size}")
    blocks = x.reshape(-1, block_size)
    return np.concatenate([np.asarray(prox(b), dtype=float).reshape(-1) for b in blocks]) \
        if len(blocks) else x.copy()


# Vectorised block versions used by LossSpec; equal to prox_separable(...)
# with the single-block operator above.

def _block_norm_shrink(x, gamma):
    b = x.reshape(-1, BLOCK)
    norms = np.linalg.norm(b, axis=1)
    scale = np.where(norms > gamma, 1.0 - gamma / np.where(norms > 0, norms, 1.0), 0.0)
    return (b * scale[:, None]).reshape(-1)


def _block_huber_norm(x, t, gamma):
    b = x.reshape(-1, BLOCK)
    norms = np.linalg.norm(b, axis=1)
    shrunk = prox_huber(norms, t, gamma)
    scale = np.where(norms > 0, shrunk / np.where(norms > 0, norms, 1.0), 0.0)
    return (b * scale[:, None]).reshape(-1)


class LossKind(enum.Enum):
    ABS = "l1"
    GLOBAL_NORM = "l2"
    BLOCK_NORM = "block-l2"
    HUBER = "huber"
    HUBER_GLOBAL_NORM = "huber-norm"
    BLOCK_HUBER_NORM = "block-huber"
    SQUARED_BLOCKS = "sq"

    @property
    def is_huber(self) -> bool:
        return self in (LossKind.HUBER, LossKind.HUBER_GLOBAL_NORM, LossKind.BLOCK_HUBER_NORM)

    @property
    def code(self) -> int:
        """Integer tag understood by the compiled kernels."""
        return list(LossKind).index(self)


LOSS_GRAMMAR = "l1 | l2 | block-l2 | huber:t=<v|auto> | huber-norm:t=<v|auto> | block-huber:t=<v|auto> | sq"

_LOSS_RE = re.compile(r"^(?P<kind>[a-z0-9-]+)(?::t=(?P<t>[^:]+))?$")


@dataclass(frozen=True)
class LossSpec:
    """Error measure applied to the stacked residual ``H x - y``.

    For Huber kinds ``huber_threshold=None`` means "choose from data"
    (resolved by the solver from the warm-start residuals).
    """

    kind: LossKind
    huber_threshold: Optional[float] = None

    def __post_init__(self):
        if self.huber_threshold is not None:
            if not self.kind.is_huber:
                raise ValueError(f"{self.kind.value} takes no threshold")
            _check_positive("huber threshold t", self.huber_threshold)

    @classmethod
    def parse(cls, text: str) -> "LossSpec":
        m = _LOSS_RE.match(text.strip())
        kinds = {k.value: k for k in LossKind}
        if not m or m.group("kind") not in kinds:
            raise ValueError(f"invalid loss {text!r}; valid grammar: {LOSS_GRAMMAR}")
        kind = kinds[m.group("kind")]
        t = m.group("t")
        if t is not None and not kind.is_huber:
            raise ValueError(f"invalid loss {text!r}: {kind.value} takes no t; "
                             f"valid grammar: {LOSS_GRAMMAR}")
        if t is None or t == "auto":
            return cls(kind)
        try:
            value = float(t)
        except ValueError:
            raise ValueError(f"invalid loss {text!r}: bad threshold; "
                             f"valid grammar: {LOSS_GRAMMAR}") from None
        return cls(kind, value)

    def __str__(self):
        if self.kind.is_huber:
            t = "auto" if self.huber_threshold is None else repr(self.huber_threshold)
            return f"{self.kind.value}:t={t}"
        return self.kind.value

    def with_threshold(self, t: float) -> "LossSpec":
        return LossSpec(self.kind, float(t))

    def _t(self):
        if self.kind.is_huber and self.huber_threshold is None:
            raise ValueError("Huber threshold is unresolved (t=auto)")
        return self.huber_threshold

    def value(self, u) -> float:
        u = np.asarray(u, dtype=float).reshape(-1)
        k = self.kind
        if k is LossKind.ABS:
            return float(np.sum(np.abs(u)))
        if k is LossKind.GLOBAL_NORM:
            return float(np.linalg.norm(u))
        if k is LossKind.SQUARED_BLOCKS:
            return float(np.dot(u, u))
        t = self._t()
        if k is LossKind.HUBER:
            return float(np.sum(huber(u, t)))
        if k is LossKind.HUBER_GLOBAL_NORM:
            return float(huber(np.linalg.norm(u), t))
        block_norms = np.linalg.norm(u.reshape(-1, BLOCK), axis=1)
        if k is LossKind.BLOCK_NORM:
            return float(np.sum(block_norms))
        return float(np.sum(huber(block_norms, t)))

    def prox(self, u, gamma: float) -> np.ndarray:
        """``prox_{gamma * loss}(u)``."""
        u = np.asarray(u, dtype=float).reshape(-1)
        k = self.kind
        if k is LossKind.ABS:
            return prox_abs(u, gamma)
        if k is LossKind.GLOBAL_NORM:
            return prox_norm(u, gamma)
        if k is LossKind.SQUARED_BLOCKS:
            return prox_squared_norm(u, gamma)
        if k is LossKind.BLOCK_NORM:
            _check_positive("gamma", gamma)
            return _block_norm_shrink(u, gamma)
        t = self._t()
        if k is LossKind.HUBER:
            return prox_huber(u, t, gamma)
        if k is LossKind.HUBER_GLOBAL_NORM:
            return prox_huber_of_norm(u, t, gamma)
        _check_positive("gamma", gamma)
        return _block_huber_norm(u, t, gamma)


@dataclass(frozen=True)
class BoxConstraint:
    lower: np.ndarray
    upper: np.ndarray

    def __post_init__(self):
        lo = np.asarray(self.lower, dtype=float).reshape(-1)
        hi = np.asarray(self.upper, dtype=float).reshape(-1)
        if lo.shape != hi.shape:
            raise DimensionMismatch("lower and upper bounds differ in length")
        if np.any(np.isnan(lo)) or np.any(np.isnan(hi)) or np.any(lo > hi):
            raise ValueError("box requires lower <= upper componentwise")
        object.__setattr__(self, "lower", lo)
        object.__setattr__(self, "upper", hi)

    @classmethod
    def unbounded(cls, dim: int = 3) -> "BoxConstraint":
        return cls(np.full(dim, -np.inf), np.full(dim, np.inf))

    @classmethod
    def field_of_view(cls, width: float, height: float) -> "BoxConstraint":
        """``[0, W] x [0, H] x [0, inf)``: center above a W x H lateral field."""
        return cls([0.0, 0.0, 0.0], [width, height, np.inf])

    def expand(self, dim: int) -> "BoxConstraint":
        """Pad with unbounded coordinates up to ``dim`` (Model 2 appends d)."""
        extra = dim - self.lower.size
        if extra < 0:
            raise DimensionMismatch(f"box has {self.lower.size} coordinates, need {dim}")
        return BoxConstraint(np.r_[self.lower, np.full(extra, -np.inf)],
                             np.r_[self.upper, np.full(extra, np.inf)])

    @property
    def is_unbounded(self) -> bool:
        return bool(np.all(np.isneginf(self.lower)) and np.all(np.isposinf(self.upper)))


def project_box(x, box: BoxConstraint) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    if x.shape != box.lower.shape:
        raise DimensionMismatch(f"x has length {x.size}, box has {box.lower.size}")
    return np.clip(x, box.lower, box.upper)
