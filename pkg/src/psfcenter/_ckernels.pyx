# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled primal-dual loop for the block-structured line-bundle systems.

Mirrors ``_pykernels.pd_loop`` operation for operation.
"""
import numpy as np
cimport numpy as cnp
from libc.math cimport sqrt, fabs, fmax, copysign, isfinite

cnp.import_array()

# loss codes follow LossKind declaration order
DEF ABS = 0
DEF GLOBAL_NORM = 1
DEF BLOCK_NORM = 2
DEF HUBER = 3
DEF HUBER_GLOBAL_NORM = 4
DEF BLOCK_HUBER_NORM = 5
DEF SQUARED_BLOCKS = 6


cdef inline double _huber(double a, double t) nogil:
    a = fabs(a)
    if a <= t:
        return 0.5 * a * a
    return t * (a - 0.5 * t)


cdef inline double _prox_huber(double v, double t, double lam) nogil:
    # the quadratic-zone value dominates exactly when |v| <= t (1 + lam)
    cdef double a = fabs(v)
    return copysign(fmax(a / (1.0 + lam), a - lam * t), v)


cdef void _matvec(int layout, int n, const double[:, :, ::1] blocks,
                  const double[::1] w, const double[:, ::1] dcols,
                  const double[::1] x, double[::1] out) noexcept nogil:
    cdef int i, j
    if layout == 1:
        for i in range(n):
            for j in range(3):
                out[3 * i + j] = (blocks[i, j, 0] * x[0] + blocks[i, j, 1] * x[1]
                                  + blocks[i, j, 2] * x[2])
    else:
        for i in range(n):
            for j in range(3):
                out[3 * i + j] = w[i] * x[j] + x[3 + i] * dcols[i, j]


cdef void _rmatvec(int layout, int n, const double[:, :, ::1] blocks,
                   const double[::1] w, const double[:, ::1] dcols,
                   const double[::1] v, double[::1] out) noexcept nogil:
    cdef int i, j
    cdef double s0 = 0.0, s1 = 0.0, s2 = 0.0
    if layout == 1:
        for i in range(n):
            for j in range(3):
                s0 += blocks[i, j, 0] * v[3 * i + j]
                s1 += blocks[i, j, 1] * v[3 * i + j]
                s2 += blocks[i, j, 2] * v[3 * i + j]
    else:
        for i in range(n):
            s0 += w[i] * v[3 * i]
            s1 += w[i] * v[3 * i + 1]
            s2 += w[i] * v[3 * i + 2]
            out[3 + i] = (dcols[i, 0] * v[3 * i] + dcols[i, 1] * v[3 * i + 1]
                          + dcols[i, 2] * v[3 * i + 2])
    out[0] = s0
    out[1] = s1
    out[2] = s2


cdef void _prox_loss(int kind, double t, double lam, double[::1] u, int m) noexcept nogil:
    """In-place prox of lam * loss on u (length m = 3N)."""
    cdef int i, b
    cdef double nrm, scale, a
    if kind == ABS:
        for i in range(m):
            u[i] = copysign(fmax(fabs(u[i]) - lam, 0.0), u[i])
    elif kind == SQUARED_BLOCKS:
        for i in range(m):
            u[i] = u[i] / (1.0 + 2.0 * lam)
    elif kind == HUBER:
        for i in range(m):
            u[i] = _prox_huber(u[i], t, lam)
    elif kind == GLOBAL_NORM or kind == HUBER_GLOBAL_NORM:
        nrm = 0.0
        for i in range(m):
            nrm += u[i] * u[i]
        nrm = sqrt(nrm)
        if kind == GLOBAL_NORM:
            scale = 1.0 - lam / nrm if nrm > lam else 0.0
        else:
            scale = _prox_huber(nrm, t, lam) / nrm if nrm > 0 else 0.0
        for i in range(m):
            u[i] = u[i] * scale
    else:
        for b in range(m // 3):
            nrm = sqrt(u[3 * b] * u[3 * b] + u[3 * b + 1] * u[3 * b + 1]
                       + u[3 * b + 2] * u[3 * b + 2])
            if kind == BLOCK_NORM:
                scale = 1.0 - lam / nrm if nrm > lam else 0.0
            else:
                scale = _prox_huber(nrm, t, lam) / nrm if nrm > 0 else 0.0
            u[3 * b] *= scale
            u[3 * b + 1] *= scale
            u[3 * b + 2] *= scale


cdef double _loss_value(int kind, double t, const double[::1] u, int m) noexcept nogil:
    cdef int i, b
    cdef double s = 0.0, nrm
    if kind == ABS:
        for i in range(m):
            s += fabs(u[i])
    elif kind == SQUARED_BLOCKS:
        for i in range(m):
            s += u[i] * u[i]
    elif kind == HUBER:
        for i in range(m):
            s += _huber(u[i], t)
    elif kind == GLOBAL_NORM or kind == HUBER_GLOBAL_NORM:
        for i in range(m):
            s += u[i] * u[i]
        s = sqrt(s)
        if kind == HUBER_GLOBAL_NORM:
            s = _huber(s, t)
    else:
        for b in range(m // 3):
            nrm = sqrt(u[3 * b] * u[3 * b] + u[3 * b + 1] * u[3 * b + 1]
                       + u[3 * b + 2] * u[3 * b + 2])
            s += nrm if kind == BLOCK_NORM else _huber(nrm, t)
    return s


def pd_loop(int layout, blocks, weights, dcols, y, int loss, double t, double gamma,
            lower, upper, x0, int max_iter, double rtol):
    """Run the primal-dual iteration; see ``_pykernels.pd_loop`` for the contract."""
    cdef const double[:, :, ::1] B = np.ascontiguousarray(blocks, dtype=np.float64)
    cdef const double[::1] W = np.ascontiguousarray(weights, dtype=np.float64)
    cdef const double[:, ::1] D = np.ascontiguousarray(dcols, dtype=np.float64)
    cdef const double[::1] Y = np.ascontiguousarray(y, dtype=np.float64)
    cdef const double[::1] LO = np.ascontiguousarray(lower, dtype=np.float64)
    cdef const double[::1] HI = np.ascontiguousarray(upper, dtype=np.float64)
    cdef int n = W.shape[0]
    cdef int m = 3 * n
    cdef int p = x0.shape[0]

    xa = np.array(x0, dtype=np.float64, copy=True)
    cdef double[::1] x = xa
    cdef double[::1] xn = np.empty(p)
    cdef double[::1] y1 = np.empty(p)
    cdef double[::1] p1 = np.empty(p)
    cdef double[::1] q1 = np.empty(p)
    cdef double[::1] g = np.empty(p)
    cdef double[::1] v0 = np.zeros(m)
    cdef double[::1] y2 = np.empty(m)
    cdef double[::1] p2 = np.empty(m)
    cdef double[::1] hx = np.empty(m)
    cdef double[::1] hp = np.empty(m)
    cdef double[::1] tmp = np.empty(m)
    trace_a = np.empty(max_iter)
    cdef double[::1] trace = trace_a

    cdef double inv_g = 1.0 / gamma
    cdef int k, i, it = 0
    cdef bint converged = False, finite = True
    cdef double dx, nx, dv, nv, val

    with nogil:
        _matvec(layout, n, B, W, D, x, hx)
        for k in range(max_iter):
            # primal forward step and projection onto C
            _rmatvec(layout, n, B, W, D, v0, g)
            for i in range(p):
                y1[i] = x[i] - gamma * g[i]
                val = y1[i]
                if val < LO[i]:
                    val = LO[i]
                elif val > HI[i]:
                    val = HI[i]
                p1[i] = val
            # dual step on the data term through the conjugate prox
            for i in range(m):
                y2[i] = v0[i] + gamma * hx[i]
                tmp[i] = inv_g * y2[i] - Y[i]
            _prox_loss(loss, t, inv_g, tmp, m)
            for i in range(m):
                p2[i] = y2[i] - gamma * (tmp[i] + Y[i])
            # correction
            _matvec(layout, n, B, W, D, p1, hp)
            dv = 0.0
            nv = 0.0
            for i in range(m):
                val = p2[i] + gamma * hp[i] - y2[i]
                dv += val * val
                nv += v0[i] * v0[i]
                v0[i] = v0[i] + val
            _rmatvec(layout, n, B, W, D, p2, g)
            dx = 0.0
            nx = 0.0
            for i in range(p):
                q1[i] = p1[i] - gamma * g[i]
                xn[i] = x[i] - y1[i] + q1[i]
                dx += (xn[i] - x[i]) * (xn[i] - x[i])
                nx += x[i] * x[i]
                if not isfinite(xn[i]):
                    finite = False
            for i in range(p):
                x[i] = xn[i]
            it = k + 1
            if not finite:
                break
            _matvec(layout, n, B, W, D, x, hx)
            for i in range(m):
                tmp[i] = hx[i] - Y[i]
            trace[k] = _loss_value(loss, t, tmp, m)
            if (sqrt(dx) / (sqrt(nx) if nx > 1.0 else 1.0) < rtol
                    and sqrt(dv) / (sqrt(nv) if nv > 1.0 else 1.0) < rtol):
                converged = True
                break

    cdef int kept = it if finite else it - 1
    return xa, it, converged, trace_a[:kept].copy(), bool(finite)
