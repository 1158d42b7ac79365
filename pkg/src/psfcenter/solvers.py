"""Solvers for the line-bundle systems.

* ``solve_wls_closed_form``: weighted least squares on Model 1, a 3x3 solve.
* ``solve_primal_dual``: forward-backward-forward primal-dual splitting for
  ``min loss(Hx - y) + i_C(x) + sum_r psi_r(V_r x)``.
* ``solve_tls``: classical total least squares through the SVD of ``[H | y]``.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence, Union

import numpy as np

from . import kernels
from .errors import (DimensionMismatch, NongenericTLS, NonFiniteIterate, RankDeficient,
                     SingularNormalMatrix, StepSizeNotPositive)
from .formulations import Layout, LinearSystem, Solution, extract_solution
from .prox import BoxConstraint, LossKind, LossSpec

log = logging.getLogger(__name__)

COND_LIMIT = 1e12
HUBER_TUNING = 1.345
MAD_TO_SIGMA = 0.6745


@dataclass
class SolveDiagnostics:
    solver: str
    iterations: int = 0
    objective: float = float("nan")
    termination: str = "closed_form"
    residual_norm: float = float("nan")
    best_objective: Optional[float] = None
    trace: Optional[np.ndarray] = field(default=None, repr=False)
    gamma: Optional[float] = None
    huber_threshold: Optional[float] = None
    backend: Optional[str] = None

    def to_dict(self) -> dict:
        out = {k: getattr(self, k) for k in
               ("solver", "iterations", "objective", "termination", "residual_norm",
                "best_objective", "gamma", "huber_threshold", "backend")}
        if self.trace is not None:
            out["trace"] = [float(v) for v in self.trace]
        return out


@dataclass
class Regularizer:
    """A term ``psi(V x)``: dense matrix ``V``, ``prox(u, lam)`` of ``lam * psi``."""

    V: np.ndarray
    prox: Callable[[np.ndarray, float], np.ndarray]
    value: Callable[[np.ndarray], float] = lambda u: 0.0


@dataclass
class PrimalDualConfig:
    gamma: Union[float, str] = "auto"
    max_iterations: int = 20000
    relative_tolerance: float = 1e-8
    regularizers: Sequence[Regularizer] = ()
    constraint: Optional[BoxConstraint] = None
    keep_trace: bool = False
    backend: Optional[str] = None
    equilibrate: bool = True


# -- linear-map helpers -------------------------------------------------------

def _as_operator(m):
    """``(apply, apply_transpose, cols)`` acting on 1D or 2D (column block) input."""
    if isinstance(m, LinearSystem):
        m = m.sparse()
    elif hasattr(m, "matvec") and hasattr(m, "rmatvec"):
        def cols_of(f):
            return lambda x: (f(x) if x.ndim == 1 else
                              np.column_stack([f(x[:, j]) for j in range(x.shape[1])]))
        return cols_of(m.matvec), cols_of(m.rmatvec), m.shape[1]
    elif not hasattr(m, "tocsr"):
        m = np.asarray(m, dtype=float)
    return (lambda x: m @ x), (lambda v: m.T @ v), m.shape[1]


def estimate_operator_norm(maps, max_iterations: int = 100, tol: float = 1e-10,
                           block: int = 8) -> float:
    """Spectral norm of the vertical stack of ``maps``.

    Block power iteration on ``L^T L`` with a Rayleigh-Ritz step, so close
    top singular values do not stall convergence; exact when the input
    dimension is at most ``block``.
    """
    ops = [_as_operator(m) for m in (maps if isinstance(maps, (list, tuple)) else [maps])]
    if not ops:
        raise ValueError("at least one linear map is required")
    dim = ops[0][2]
    if any(o[2] != dim for o in ops):
        raise DimensionMismatch("stacked maps must share their input dimension")

    def gram(x):
        return sum(rmv(mv(x)) for mv, rmv, _ in ops)

    b = min(dim, block)
    q, _ = np.linalg.qr(np.random.default_rng(0).standard_normal((dim, b)) + 1.0)
    lam = 0.0
    for _ in range(max_iterations):
        z = np.asarray(gram(q))
        ritz = np.linalg.eigvalsh(0.5 * (q.T @ z + z.T @ q))
        lam_new = float(max(ritz[-1], 0.0))
        if lam_new == 0.0:
            return 0.0
        q, _ = np.linalg.qr(z)
        converged = abs(lam_new - lam) <= tol * lam_new
        lam = lam_new
        if converged or b == dim:
            break
    return float(np.sqrt(lam))


# -- closed form --------------------------------------------------------------

def _model1_blocks(system: LinearSystem):
    """Model-1 blocks and right-hand sides for either layout.

    For Model 2 the equivalent Model-1 system is rebuilt from the stored
    columns ``w_i n_i`` with unit directions.
    """
    if system.layout is Layout.MODEL1:
        return system.blocks, system.y_blocks
    w = system.weights
    n = system.d_columns / w[:, None]
    n = n / np.linalg.norm(n, axis=1)[:, None]
    blocks = w[:, None, None] * (np.eye(3)[None] - n[:, :, None] * n[:, None, :])
    anchors = system.y_blocks / w[:, None]
    return blocks, np.einsum("nij,nj->ni", blocks, anchors)


def _wls_center(blocks, yb):
    A = np.einsum("nji,njk->ik", blocks, blocks)
    b = np.einsum("nji,nj->i", blocks, yb)
    cond = np.linalg.cond(A)
    if not np.isfinite(cond) or cond > COND_LIMIT:
        raise SingularNormalMatrix(
            f"normal matrix is singular (condition number {cond:.3g}); "
            "lines are (nearly) parallel")
    return np.linalg.solve(A, b)


def solve_wls_closed_form(system: LinearSystem) -> Solution:
    if system.layout is not Layout.MODEL1:
        raise ValueError("closed-form WLS applies to Model 1 systems")
    c = _wls_center(system.blocks, system.y_blocks)
    r = system.matvec(c) - system.y
    diag = SolveDiagnostics("wls", iterations=1, objective=float(r @ r),
                            residual_norm=float(np.linalg.norm(r)))
    return extract_solution(system, c, diag)


# -- primal-dual --------------------------------------------------------------

def warm_start(system: LinearSystem) -> np.ndarray:
    """WLS center (or the anchor mean if singular), plus LS-optimal ``d`` for Model 2."""
    blocks, yb = _model1_blocks(system)
    try:
        c0 = _wls_center(blocks, yb)
    except SingularNormalMatrix:
        anchors = (system.y_blocks / system.weights[:, None] if system.layout is Layout.MODEL2
                   else yb)
        c0 = anchors.mean(axis=0)
    if system.layout is Layout.MODEL1:
        return c0
    m = system.d_columns
    resid = system.y_blocks - system.weights[:, None] * c0[None, :]
    d0 = np.sum(m * resid, axis=1) / np.sum(m * m, axis=1)
    return np.concatenate([c0, d0])


def resolve_huber_threshold(system: LinearSystem, x0) -> float:
    """Robust scale of the warm-start residuals: 1.345 * MAD-sigma."""
    r = np.abs(system.matvec(x0) - system.y)
    t = HUBER_TUNING * float(np.median(r)) / MAD_TO_SIGMA
    return t if t > 0 else 1.0


def _objective(system, loss, regs, x):
    val = loss.value(system.matvec(x) - system.y)
    return val + sum(r.value(r.V @ x) for r in regs)


def _pd_generic(system, loss, regs, gamma, lower, upper, x0, max_iter, rtol):
    """Reference loop with regularizers; identical to the kernels when ``regs`` is empty."""
    H, Ht = system.matvec, system.rmatvec
    y = system.y
    inv_g = 1.0 / gamma
    x = np.array(x0, dtype=float, copy=True)
    v0 = np.zeros(system.rows)
    vs = [np.zeros(r.V.shape[0]) for r in regs]
    trace = []
    converged, finite, it = False, True, 0
    for k in range(max_iter):
        y1 = x - gamma * (Ht(v0) + sum(r.V.T @ v for r, v in zip(regs, vs)))
        p1 = np.clip(y1, lower, upper)
        y20 = v0 + gamma * H(x)
        p20 = y20 - gamma * (loss.prox(inv_g * y20 - y, inv_g) + y)
        v_new = v0 - y20 + (p20 + gamma * H(p1))
        dv = np.linalg.norm(v_new - v0)
        nv = np.linalg.norm(v0)
        v0 = v_new
        p2s = []
        for j, (r, v) in enumerate(zip(regs, vs)):
            y2r = v + gamma * (r.V @ x)
            p2r = y2r - gamma * r.prox(inv_g * y2r, inv_g)
            vs[j] = v - y2r + (p2r + gamma * (r.V @ p1))
            p2s.append(p2r)
        q1 = p1 - gamma * (Ht(p20) + sum(r.V.T @ p for r, p in zip(regs, p2s)))
        xn = x - y1 + q1
        dx = np.linalg.norm(xn - x)
        nx = np.linalg.norm(x)
        x = xn
        it = k + 1
        if not np.all(np.isfinite(x)):
            finite = False
            break
        trace.append(_objective(system, loss, regs, x))
        if dx / max(nx, 1.0) < rtol and dv / max(nv, 1.0) < rtol:
            converged = True
            break
    return x, it, converged, np.array(trace), finite


def solve_primal_dual(system: LinearSystem, loss: LossSpec,
                      config: Optional[PrimalDualConfig] = None, x0=None) -> Solution:
    config = config or PrimalDualConfig()
    regs = list(config.regularizers)
    if config.max_iterations < 1:
        raise ValueError("max_iterations must be positive")

    x0 = warm_start(system) if x0 is None else np.asarray(x0, dtype=float)
    if x0.shape != (system.cols,):
        raise DimensionMismatch(f"x0 has shape {x0.shape}, expected ({system.cols},)")
    box = (config.constraint or BoxConstraint.unbounded(3)).expand(system.cols)
    x0 = np.clip(x0, box.lower, box.upper)
    if loss.kind.is_huber and loss.huber_threshold is None:
        loss = loss.with_threshold(resolve_huber_threshold(system, x0))
    t = loss.huber_threshold if loss.kind.is_huber else 0.0

    # Model 2: substitute d = s d' so the D columns match the C columns in
    # norm; same minimiser in c, far better conditioned for a scalar step.
    scale = np.ones(system.cols)
    work = system
    if config.equilibrate and system.layout is Layout.MODEL2:
        s = float(np.sqrt(np.sum(system.weights ** 2)))
        scale[3:] = s
        work = LinearSystem(Layout.MODEL2, system.weights, system.y,
                            d_columns=system.d_columns * s)
        regs = [Regularizer(r.V * scale[None, :], r.prox, r.value) for r in regs]
    x0 = x0 / scale

    if config.gamma == "auto":
        gamma = 0.9 / estimate_operator_norm([work] + [r.V for r in regs])
    else:
        gamma = float(config.gamma)
        if not gamma > 0:
            raise StepSizeNotPositive(f"step size must be positive, got {config.gamma}")

    lower, upper = box.lower / scale, box.upper / scale

    if regs:
        backend = "generic"
        x, it, converged, trace, finite = _pd_generic(
            work, loss, regs, gamma, lower, upper, x0,
            config.max_iterations, config.relative_tolerance)
    else:
        impl = kernels.get_backend(config.backend)
        backend = "cython" if impl is not kernels._pykernels else "python"
        blocks = work.blocks if work.layout is Layout.MODEL1 else np.zeros((0, 3, 3))
        dcols = work.d_columns if work.layout is Layout.MODEL2 else np.zeros((0, 3))
        x, it, converged, trace, finite = impl.pd_loop(
            work.layout.value, blocks, work.weights, dcols, work.y,
            loss.kind.code, float(t), float(gamma), lower, upper, x0,
            int(config.max_iterations), float(config.relative_tolerance))
    # the iterate approaches C only in the limit; return a feasible point
    x = np.clip(x, lower, upper) * scale
    regs = list(config.regularizers)

    diag = SolveDiagnostics(
        "pd", iterations=int(it),
        termination="converged" if converged else "max_iterations",
        gamma=float(gamma), huber_threshold=loss.huber_threshold, backend=backend)
    if not finite:
        diag.termination = "non_finite"
        raise NonFiniteIterate(f"primal-dual iterate became non-finite at iteration {it}",
                               diagnostics=diag)
    diag.objective = _objective(system, loss, regs, x)
    diag.best_objective = float(np.min(trace)) if len(trace) else diag.objective
    diag.residual_norm = float(np.linalg.norm(system.matvec(x) - system.y))
    if config.keep_trace:
        diag.trace = trace
    if not converged:
        log.debug("primal-dual stopped at max_iterations=%d", it)
    return extract_solution(system, x, diag)


# -- total least squares ------------------------------------------------------

TIE_RTOL = 1e-10
VLAST_EPS = 1e-12
RANK_RTOL = 1e-12


def solve_tls(system: LinearSystem) -> Solution:
    H = system.toarray()
    if system.rows <= system.cols:
        raise DimensionMismatch(
            f"TLS needs more rows than columns, got {system.rows}x{system.cols}")
    sv_h = np.linalg.svd(H, compute_uv=False)
    if sv_h[-1] <= RANK_RTOL * sv_h[0]:
        raise RankDeficient(f"H is rank deficient (singular values {sv_h[0]:.3g} .. "
                            f"{sv_h[-1]:.3g})")
    M = np.column_stack([H, system.y])
    _, s, vt = np.linalg.svd(M, full_matrices=False)
    v = vt[-1]
    tied = np.flatnonzero(s - s[-1] < TIE_RTOL * s[0])
    if tied.size > 1:
        v = vt[tied[np.argmax(np.abs(vt[tied, -1]))]]
    if abs(v[-1]) < VLAST_EPS:
        raise NongenericTLS("smallest right singular vector has no y component")
    x = -v[:-1] / v[-1]
    r = system.matvec(x) - system.y
    diag = SolveDiagnostics("tls", iterations=1, objective=float(s[-1] ** 2),
                            residual_norm=float(np.linalg.norm(r)))
    return extract_solution(system, x, diag)


SOLVERS = ("wls", "pd", "tls")


def solve(system: LinearSystem, solver: str, loss: Optional[LossSpec] = None,
          config: Optional[PrimalDualConfig] = None) -> Solution:
    if solver == "wls":
        return solve_wls_closed_form(system)
    if solver == "tls":
        return solve_tls(system)
    if solver == "pd":
        return solve_primal_dual(system, loss or LossSpec(LossKind.SQUARED_BLOCKS), config)
    raise ValueError(f"unknown solver {solver!r}; expected one of {SOLVERS}")
