# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled scene-loss kernel (see ``oor._kernels_py`` for the reference contract).

Chordal rotation means use Horn's quaternion form (dominant eigenvector of a
4x4 symmetric matrix, cyclic Jacobi), which maximises tr(R^T M) over SO(3)
exactly like the SVD projection of the fallback.
"""
import numpy as np
cimport numpy as cnp
from libc.math cimport sqrt, fabs

cnp.import_array()


cdef inline void _gram_schmidt(const double* a, double* r) noexcept nogil:
    cdef double x0 = a[0], x1 = a[1], x2 = a[2]
    cdef double n = sqrt(x0 * x0 + x1 * x1 + x2 * x2)
    x0 /= n; x1 /= n; x2 /= n
    cdef double d = x0 * a[3] + x1 * a[4] + x2 * a[5]
    cdef double y0 = a[3] - d * x0, y1 = a[4] - d * x1, y2 = a[5] - d * x2
    n = sqrt(y0 * y0 + y1 * y1 + y2 * y2)
    y0 /= n; y1 /= n; y2 /= n
    r[0] = x0; r[3] = x1; r[6] = x2
    r[1] = y0; r[4] = y1; r[7] = y2
    r[2] = x1 * y2 - x2 * y1
    r[5] = x2 * y0 - x0 * y2
    r[8] = x0 * y1 - x1 * y0


cdef inline void _matmul3(const double* a, const double* b, double* out) noexcept nogil:
    cdef int i, j
    for i in range(3):
        for j in range(3):
            out[3 * i + j] = a[3 * i] * b[j] + a[3 * i + 1] * b[3 + j] + a[3 * i + 2] * b[6 + j]


cdef inline void _matvec3(const double* a, const double* v, double* out) noexcept nogil:
    cdef int i
    for i in range(3):
        out[i] = a[3 * i] * v[0] + a[3 * i + 1] * v[1] + a[3 * i + 2] * v[2]


cdef void _jacobi4(double* a, double* v) noexcept nogil:
    """Eigen-decompose symmetric 4x4 ``a`` in place; eigenvectors in columns of ``v``."""
    cdef int i, p, q, r, sweep
    cdef double off, theta, t, c, s, tau, apq, arp, arq, vrp, vrq, app, aqq
    for i in range(16):
        v[i] = 0.0
    for i in range(4):
        v[5 * i] = 1.0
    for sweep in range(60):
        off = 0.0
        for p in range(4):
            for q in range(p + 1, 4):
                off += fabs(a[4 * p + q])
        if off < 1e-300:
            return
        for p in range(4):
            for q in range(p + 1, 4):
                apq = a[4 * p + q]
                if fabs(apq) < 1e-300:
                    continue
                app = a[5 * p]
                aqq = a[5 * q]
                theta = 0.5 * (aqq - app) / apq
                t = 1.0 / (fabs(theta) + sqrt(theta * theta + 1.0))
                if theta < 0:
                    t = -t
                c = 1.0 / sqrt(t * t + 1.0)
                s = t * c
                for r in range(4):
                    arp = a[4 * r + p]
                    arq = a[4 * r + q]
                    a[4 * r + p] = c * arp - s * arq
                    a[4 * r + q] = s * arp + c * arq
                for r in range(4):
                    arp = a[4 * p + r]
                    arq = a[4 * q + r]
                    a[4 * p + r] = c * arp - s * arq
                    a[4 * q + r] = s * arp + c * arq
                a[4 * p + q] = 0.0
                a[4 * q + p] = 0.0
                for r in range(4):
                    vrp = v[4 * r + p]
                    vrq = v[4 * r + q]
                    v[4 * r + p] = c * vrp - s * vrq
                    v[4 * r + q] = s * vrp + c * vrq


cdef void _project_so3(const double* m, double* out) noexcept nogil:
    cdef double k[16]
    cdef double vec[16]
    cdef int i, best = 0
    k[0] = m[0] + m[4] + m[8]
    k[5] = m[0] - m[4] - m[8]
    k[10] = -m[0] + m[4] - m[8]
    k[15] = -m[0] - m[4] + m[8]
    k[1] = m[7] - m[5]; k[4] = k[1]
    k[2] = m[2] - m[6]; k[8] = k[2]
    k[3] = m[3] - m[1]; k[12] = k[3]
    k[6] = m[1] + m[3]; k[9] = k[6]
    k[7] = m[2] + m[6]; k[13] = k[7]
    k[11] = m[5] + m[7]; k[14] = k[11]
    _jacobi4(k, vec)
    for i in range(1, 4):
        if k[5 * i] > k[5 * best]:
            best = i
    cdef double w = vec[best], x = vec[4 + best], y = vec[8 + best], z = vec[12 + best]
    cdef double n = sqrt(w * w + x * x + y * y + z * z)
    w /= n; x /= n; y /= n; z /= n
    out[0] = w * w + x * x - y * y - z * z
    out[1] = 2.0 * (x * y - w * z)
    out[2] = 2.0 * (x * z + w * y)
    out[3] = 2.0 * (x * y + w * z)
    out[4] = w * w - x * x + y * y - z * z
    out[5] = 2.0 * (y * z - w * x)
    out[6] = 2.0 * (x * z - w * y)
    out[7] = 2.0 * (y * z + w * x)
    out[8] = w * w - x * x - y * y + z * z


def scene_losses(states, edge_base, in_ptr, in_edges, pair_i, pair_j, root_out, p3_edges,
                 root_scale, bint root_scale_fixed):
    cdef double[:, :, ::1] st = np.ascontiguousarray(states, dtype=np.float64)
    cdef long[::1] eb = np.ascontiguousarray(edge_base, dtype=np.int64)
    cdef long[::1] iptr = np.ascontiguousarray(in_ptr, dtype=np.int64)
    cdef long[::1] ied = np.ascontiguousarray(in_edges, dtype=np.int64)
    cdef long[::1] pi = np.ascontiguousarray(pair_i, dtype=np.int64)
    cdef long[::1] pj = np.ascontiguousarray(pair_j, dtype=np.int64)
    cdef long[::1] ro = np.ascontiguousarray(root_out, dtype=np.int64)
    cdef long[::1] p3e = np.ascontiguousarray(p3_edges, dtype=np.int64)
    cdef double[::1] rs = np.ascontiguousarray(root_scale, dtype=np.float64)

    cdef Py_ssize_t nb = st.shape[0], ne = st.shape[1]
    cdef Py_ssize_t nn = iptr.shape[0] - 1
    cdef Py_ssize_t maxdeg = 1, k
    for k in range(nn):
        if iptr[k + 1] - iptr[k] > maxdeg:
            maxdeg = iptr[k + 1] - iptr[k]

    coll_out = np.zeros(nb)
    inc_out = np.zeros(nb)
    cdef double[::1] coll = coll_out
    cdef double[::1] inc = inc_out
    cdef double[:, ::1] rot_e = np.zeros((ne, 9))
    cdef double[:, ::1] nrot = np.zeros((nn, 9))
    cdef double[:, ::1] ntr = np.zeros((nn, 3))
    cdef double[:, ::1] nsc = np.zeros((nn, 3))
    cdef double[:, ::1] cand = np.zeros((maxdeg, 12))
    cdef double[:, ::1] crot = np.zeros((maxdeg, 9))

    cdef Py_ssize_t b, e, i, j, c, p, deg, q
    cdef double ratio, mean, var, acc, p1, p2, p3, lo, hi, ov, vol, hx
    cdef double tmp[3]
    cdef double msum[9]
    cdef double half_a[3]
    cdef double half_b[3]
    cdef Py_ssize_t nro = ro.shape[0], np3 = p3e.shape[0], npairs = pi.shape[0]

    with nogil:
        for b in range(nb):
            for e in range(ne):
                _gram_schmidt(&st[b, e, 0], &rot_e[e, 0])
            for i in range(9):
                nrot[0, i] = 0.0
            nrot[0, 0] = 1.0; nrot[0, 4] = 1.0; nrot[0, 8] = 1.0
            for c in range(3):
                ntr[0, c] = 0.0
                if root_scale_fixed:
                    nsc[0, c] = rs[c]
                elif nro > 0:
                    acc = 0.0
                    for i in range(nro):
                        acc += st[b, ro[i], 12 + c]
                    nsc[0, c] = acc / nro
                else:
                    nsc[0, c] = 1.0

            p1 = 0.0
            if nro > 1:
                for c in range(3):
                    mean = 0.0
                    for i in range(nro):
                        mean += st[b, ro[i], 12 + c]
                    mean /= nro
                    var = 0.0
                    for i in range(nro):
                        hx = st[b, ro[i], 12 + c] - mean
                        var += hx * hx
                    p1 += var / nro

            p2 = 0.0
            for k in range(1, nn):
                deg = iptr[k + 1] - iptr[k]
                for q in range(deg):
                    e = ied[iptr[k] + q]
                    p = eb[e]
                    ratio = (nsc[p, 0] / st[b, e, 12] + nsc[p, 1] / st[b, e, 13]
                             + nsc[p, 2] / st[b, e, 14]) / 3.0
                    _matmul3(&nrot[p, 0], &rot_e[e, 0], &crot[q, 0])
                    for c in range(3):
                        tmp[c] = ratio * st[b, e, 6 + c]
                    _matvec3(&nrot[p, 0], tmp, &cand[q, 6])
                    for c in range(3):
                        cand[q, 6 + c] += ntr[p, c]
                        cand[q, 9 + c] = ratio * st[b, e, 9 + c]
                        cand[q, c] = crot[q, 3 * c]
                        cand[q, 3 + c] = crot[q, 3 * c + 1]
                if deg == 1:
                    for i in range(9):
                        nrot[k, i] = crot[0, i]
                    for c in range(3):
                        ntr[k, c] = cand[0, 6 + c]
                        nsc[k, c] = cand[0, 9 + c]
                else:
                    for j in range(12):
                        mean = 0.0
                        for q in range(deg):
                            mean += cand[q, j]
                        mean /= deg
                        var = 0.0
                        for q in range(deg):
                            hx = cand[q, j] - mean
                            var += hx * hx
                        p2 += var / deg
                        if 6 <= j < 9:
                            ntr[k, j - 6] = mean
                        elif j >= 9:
                            nsc[k, j - 9] = mean
                    for i in range(9):
                        msum[i] = 0.0
                        for q in range(deg):
                            msum[i] += crot[q, i]
                        msum[i] /= deg
                    _project_so3(msum, &nrot[k, 0])

            p3 = 0.0
            for i in range(np3):
                e = p3e[i]
                p = eb[e]
                for c in range(3):
                    tmp[c] = nsc[p, c] / st[b, e, 12 + c]
                mean = (tmp[0] + tmp[1] + tmp[2]) / 3.0
                p3 += ((tmp[0] - mean) * (tmp[0] - mean) + (tmp[1] - mean) * (tmp[1] - mean)
                       + (tmp[2] - mean) * (tmp[2] - mean)) / 3.0
            inc[b] = (p1 + p2 + p3) / 3.0

            acc = 0.0
            for q in range(npairs):
                i = pi[q]
                j = pj[q]
                for c in range(3):
                    half_a[c] = 0.5 * (fabs(nrot[i, 3 * c]) * nsc[i, 0] + fabs(nrot[i, 3 * c + 1]) * nsc[i, 1]
                                       + fabs(nrot[i, 3 * c + 2]) * nsc[i, 2])
                    half_b[c] = 0.5 * (fabs(nrot[j, 3 * c]) * nsc[j, 0] + fabs(nrot[j, 3 * c + 1]) * nsc[j, 1]
                                       + fabs(nrot[j, 3 * c + 2]) * nsc[j, 2])
                vol = 1.0
                for c in range(3):
                    hi = ntr[i, c] + half_a[c]
                    if ntr[j, c] + half_b[c] < hi:
                        hi = ntr[j, c] + half_b[c]
                    lo = ntr[i, c] - half_a[c]
                    if ntr[j, c] - half_b[c] > lo:
                        lo = ntr[j, c] - half_b[c]
                    ov = hi - lo
                    if ov <= 0.0:
                        vol = 0.0
                        break
                    vol *= ov
                acc += vol
            coll[b] = acc
    return coll_out, inc_out
