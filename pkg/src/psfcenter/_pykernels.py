"""Pure-numpy twin of the compiled kernels in ``_ckernels.pyx``.

Selected automatically when the extension is not built, or forced with
``PSFCENTER_PURE_PYTHON=1``.
"""
import numpy as np

from .prox import LossKind, LossSpec

_KINDS = list(LossKind)


def _ops(layout, blocks, weights, dcols):
    if layout == 1:
        def matvec(x):
            return np.einsum("nij,j->ni", blocks, x).reshape(-1)

        def rmatvec(v):
            return np.einsum("nij,ni->j", blocks, v.reshape(-1, 3))
    else:
        def matvec(x):
            return (weights[:, None] * x[None, :3] + x[3:, None] * dcols).reshape(-1)

        def rmatvec(v):
            vb = v.reshape(-1, 3)
            return np.concatenate([weights @ vb, np.einsum("ij,ij->i", dcols, vb)])
    return matvec, rmatvec


def pd_loop(layout, blocks, weights, dcols, y, loss, t, gamma, lower, upper, x0,
            max_iter, rtol):
    """Primal-dual iteration for ``min loss(Hx - y) + i_C(x)`` with R = 0.

    ``loss`` is a ``LossKind.code``; ``t`` is ignored for non-Huber kinds.
    Stops when both the primal and the dual relative changes fall below
    ``rtol``.  Returns ``(x, iterations, converged, objective_trace, finite)``
    where the trace holds ``loss(H x_k - y)`` after every completed iteration.
    """
    kind = _KINDS[loss]
    spec = LossSpec(kind, t if kind.is_huber else None)
    weights = np.asarray(weights, dtype=float)
    matvec, rmatvec = _ops(layout, np.asarray(blocks, dtype=float), weights,
                           np.asarray(dcols, dtype=float))
    y = np.asarray(y, dtype=float)
    lower = np.asarray(lower, dtype=float)
    upper = np.asarray(upper, dtype=float)
    x = np.array(x0, dtype=float, copy=True)
    v0 = np.zeros(y.size)
    inv_g = 1.0 / gamma
    hx = matvec(x)
    trace = []
    converged = False
    finite = True
    it = 0
    for k in range(max_iter):
        y1 = x - gamma * rmatvec(v0)
        p1 = np.clip(y1, lower, upper)
        y2 = v0 + gamma * hx
        p2 = y2 - gamma * (spec.prox(inv_g * y2 - y, inv_g) + y)
        v_new = v0 - y2 + (p2 + gamma * matvec(p1))
        dv = np.linalg.norm(v_new - v0)
        nv = np.linalg.norm(v0)
        v0 = v_new
        q1 = p1 - gamma * rmatvec(p2)
        xn = x - y1 + q1
        dx = np.linalg.norm(xn - x)
        nx = np.linalg.norm(x)
        x = xn
        it = k + 1
        if not np.all(np.isfinite(x)):
            finite = False
            break
        hx = matvec(x)
        trace.append(spec.value(hx - y))
        if dx / max(nx, 1.0) < rtol and dv / max(nv, 1.0) < rtol:
            converged = True
            break
    return x, it, converged, np.array(trace), finite
