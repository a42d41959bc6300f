# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled tree max-product kernels; same contract as ``mpem._mp_py``."""
from libc.math cimport exp, log1p, fabs, NAN


cdef inline double _max(double a, double b) noexcept nogil:
    return a if a >= b else b


cdef inline void _normalize(double m0, double m1, double *out) noexcept nogil:
    cdef double lse = _max(m0, m1) + log1p(exp(-fabs(m0 - m1)))
    out[0] = m0 - lse
    out[1] = m1 - lse


def upward(const double[:, ::1] lphi, const long[::1] sizes, const double[::1] consts,
           double[:, ::1] up, double[:, ::1] eta):
    cdef Py_ssize_t n_levels = sizes.shape[0]
    cdef Py_ssize_t lev, k, c, start, nxt, base
    cdef double a0, a1, e0, e1
    cdef double lpl0 = consts[0], lpl1 = consts[1], lph0 = consts[2], lph1 = consts[3]
    cdef double out[2]
    cdef Py_ssize_t[64] off
    off[0] = 0
    for lev in range(n_levels):
        off[lev + 1] = off[lev] + sizes[lev]
    with nogil:
        for lev in range(n_levels - 1, -1, -1):
            start = off[lev]
            nxt = off[lev + 1]
            for k in range(sizes[lev]):
                e0 = 0.0
                e1 = 0.0
                if lev < n_levels - 1:
                    base = nxt + 4 * k
                    for c in range(4):
                        e0 = e0 + up[base + c, 0]
                        e1 = e1 + up[base + c, 1]
                eta[start + k, 0] = e0
                eta[start + k, 1] = e1
                if lev == 0:
                    continue
                a0 = lphi[start + k, 0] + e0
                a1 = lphi[start + k, 1] + e1
                _normalize(_max(lpl0 + a0, lpl1 + a1), _max(lph0 + a0, lph1 + a1), out)
                up[start + k, 0] = out[0]
                up[start + k, 1] = out[1]


def downward(const double[:, ::1] lphi, const long[::1] sizes, const double[::1] consts,
             const double[:, ::1] up, double[:, ::1] down):
    cdef Py_ssize_t n_levels = sizes.shape[0]
    cdef Py_ssize_t lev, k, c, o, j, base
    cdef double s0, s1, b0, b1, ed0, ed1
    cdef double lpl0 = consts[0], lpl1 = consts[1], lph0 = consts[2], lph1 = consts[3]
    cdef double lpr0 = consts[4], lpr1 = consts[5]
    cdef double out[2]
    cdef Py_ssize_t[64] off
    off[0] = 0
    for lev in range(n_levels):
        off[lev + 1] = off[lev] + sizes[lev]
    with nogil:
        for k in range(sizes[0]):
            down[k, 0] = NAN
            down[k, 1] = NAN
        for lev in range(1, n_levels):
            for k in range(sizes[lev - 1]):
                j = off[lev - 1] + k
                if lev == 1:
                    ed0 = lpr0
                    ed1 = lpr1
                else:
                    ed0 = down[j, 0]
                    ed1 = down[j, 1]
                base = off[lev] + 4 * k
                for c in range(4):
                    s0 = 0.0
                    s1 = 0.0
                    for o in range(4):
                        if o != c:
                            s0 = s0 + up[base + o, 0]
                            s1 = s1 + up[base + o, 1]
                    b0 = lphi[j, 0] + ed0 + s0
                    b1 = lphi[j, 1] + ed1 + s1
                    _normalize(_max(lpl0 + b0, lph0 + b1), _max(lpl1 + b0, lph1 + b1), out)
                    down[base + c, 0] = out[0]
                    down[base + c, 1] = out[1]


def beliefs(const double[:, ::1] lphi, const long[::1] sizes, const double[::1] consts,
            const double[:, ::1] eta, const double[:, ::1] down,
            double[:, ::1] belief, signed char[::1] q):
    cdef Py_ssize_t n = lphi.shape[0]
    cdef Py_ssize_t n_roots = sizes[0]
    cdef Py_ssize_t i
    cdef double r0, r1
    cdef double lpr0 = consts[4], lpr1 = consts[5]
    cdef double out[2]
    with nogil:
        for i in range(n):
            r0 = lphi[i, 0] + eta[i, 0]
            r1 = lphi[i, 1] + eta[i, 1]
            if i < n_roots:
                r0 = r0 + lpr0
                r1 = r1 + lpr1
            else:
                r0 = r0 + down[i, 0]
                r1 = r1 + down[i, 1]
            q[i] = 1 if r1 >= r0 else 0
            _normalize(r0, r1, out)
            belief[i, 0] = out[0]
            belief[i, 1] = out[1]
