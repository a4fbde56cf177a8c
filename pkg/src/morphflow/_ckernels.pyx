# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled hot kernels; same signatures and semantics as ``_pykernels``."""
import numpy as np

from libc.math cimport exp, log, log1p, floor, sqrt, fabs
from libc.stdlib cimport malloc, free

BACKEND = "cython"


cdef inline double _softplus(double x) noexcept nogil:
    if x > 30.0:
        return x
    if x < -30.0:
        return exp(x)
    return log1p(exp(x))


cdef inline double _sigmoid(double x) noexcept nogil:
    cdef double e
    if x >= 0:
        return 1.0 / (1.0 + exp(-x))
    e = exp(x)
    return e / (1.0 + e)


cdef inline void _locate(double px, double py, double pz,
                         double bx, double by, double bz,
                         double ix, double iy, double iz,
                         Py_ssize_t nx, Py_ssize_t ny, Py_ssize_t nz,
                         Py_ssize_t* c0, double* f) noexcept nogil:
    cdef double g[3]
    cdef Py_ssize_t n[3]
    cdef int a
    cdef Py_ssize_t i
    g[0] = (px - bx) * ix
    g[1] = (py - by) * iy
    g[2] = (pz - bz) * iz
    n[0] = nx
    n[1] = ny
    n[2] = nz
    for a in range(3):
        if g[a] < 0.0:
            g[a] = 0.0
        elif g[a] > n[a] - 1.0:
            g[a] = n[a] - 1.0
        i = <Py_ssize_t>floor(g[a])
        if i > n[a] - 2:
            i = n[a] - 2
        c0[a] = i
        f[a] = g[a] - i


cdef inline void _weights(double* f, double* w) noexcept nogil:
    cdef double gx = 1.0 - f[0], gy = 1.0 - f[1], gz = 1.0 - f[2]
    w[0] = gx * gy * gz
    w[1] = gx * gy * f[2]
    w[2] = gx * f[1] * gz
    w[3] = gx * f[1] * f[2]
    w[4] = f[0] * gy * gz
    w[5] = f[0] * gy * f[2]
    w[6] = f[0] * f[1] * gz
    w[7] = f[0] * f[1] * f[2]


cdef inline void _offsets(Py_ssize_t ny, Py_ssize_t nz, Py_ssize_t* off) noexcept nogil:
    off[0] = 0
    off[1] = 1
    off[2] = nz
    off[3] = nz + 1
    off[4] = ny * nz
    off[5] = ny * nz + 1
    off[6] = ny * nz + nz
    off[7] = ny * nz + nz + 1


def render_forward(double[:, :, ::1] density, double[:, :, :, ::1] color,
                   double[::1] bbox_min, double[::1] inv_voxel,
                   double[:, ::1] origins, double[:, ::1] dirs,
                   double[::1] t_start, long[::1] n_samples,
                   double step, double stop_transmittance):
    cdef Py_ssize_t nrays = origins.shape[0]
    cdef Py_ssize_t nx = density.shape[0], ny = density.shape[1], nz = density.shape[2]
    out_arr = np.zeros((nrays, 3))
    cdef double[:, ::1] out = out_arr
    cdef double* dptr = &density[0, 0, 0]
    cdef double* cptr = &color[0, 0, 0, 0]
    cdef Py_ssize_t off[8]
    cdef Py_ssize_t c0[3]
    cdef double f[3]
    cdef double w[8]
    cdef Py_ssize_t r, k, q, base, node
    cdef double t, T, raw, cr, cg, cb, alpha, wt, px, py, pz
    _offsets(ny, nz, off)
    with nogil:
        for r in range(nrays):
            T = 1.0
            for k in range(n_samples[r]):
                if T < stop_transmittance:
                    break
                t = t_start[r] + k * step
                px = origins[r, 0] + t * dirs[r, 0]
                py = origins[r, 1] + t * dirs[r, 1]
                pz = origins[r, 2] + t * dirs[r, 2]
                _locate(px, py, pz, bbox_min[0], bbox_min[1], bbox_min[2],
                        inv_voxel[0], inv_voxel[1], inv_voxel[2], nx, ny, nz, c0, f)
                _weights(f, w)
                base = (c0[0] * ny + c0[1]) * nz + c0[2]
                raw = 0.0
                for q in range(8):
                    raw = raw + w[q] * dptr[base + off[q]]
                alpha = 1.0 - exp(-_softplus(raw) * step)
                if alpha <= 0.0:
                    continue
                cr = 0.0
                cg = 0.0
                cb = 0.0
                for q in range(8):
                    node = 3 * (base + off[q])
                    cr = cr + w[q] * cptr[node]
                    cg = cg + w[q] * cptr[node + 1]
                    cb = cb + w[q] * cptr[node + 2]
                wt = T * alpha
                out[r, 0] += wt * _sigmoid(cr)
                out[r, 1] += wt * _sigmoid(cg)
                out[r, 2] += wt * _sigmoid(cb)
                T = T * (1.0 - alpha)
    return out_arr


def render_backward(double[:, :, ::1] density, double[:, :, :, ::1] color,
                    double[::1] bbox_min, double[::1] inv_voxel,
                    double[:, ::1] origins, double[:, ::1] dirs,
                    double[::1] t_start, long[::1] n_samples,
                    double step, double stop_transmittance,
                    double[:, ::1] target, double scale,
                    double[:, :, ::1] grad_density, double[:, :, :, ::1] grad_color):
    cdef Py_ssize_t nrays = origins.shape[0]
    cdef Py_ssize_t nx = density.shape[0], ny = density.shape[1], nz = density.shape[2]
    rgb_arr = np.zeros((nrays, 3))
    cdef double[:, ::1] rgb = rgb_arr
    cdef double* dptr = &density[0, 0, 0]
    cdef double* cptr = &color[0, 0, 0, 0]
    cdef double* gdp = &grad_density[0, 0, 0]
    cdef double* gcp = &grad_color[0, 0, 0, 0]
    cdef Py_ssize_t off[8]
    cdef Py_ssize_t c0[3]
    cdef double f[3]
    cdef double w[8]
    cdef Py_ssize_t r, k, q, base, node, used, smax = 0
    cdef double t, T, raw, alpha, wt, sq = 0.0
    cdef double gr, gg, gb, sr, sg, sb, col_r, col_g, col_b, d_alpha, d_raw
    cdef double* buf
    cdef double* b
    cdef Py_ssize_t* nodes
    cdef double* wts
    for r in range(nrays):
        if n_samples[r] > smax:
            smax = n_samples[r]
    # per sample: T, alpha, sigmoid(raw density), col rgb
    buf = <double*>malloc(max(smax, 1) * 6 * sizeof(double))
    nodes = <Py_ssize_t*>malloc(max(smax, 1) * sizeof(Py_ssize_t))
    wts = <double*>malloc(max(smax, 1) * 8 * sizeof(double))
    if buf == NULL or nodes == NULL or wts == NULL:
        free(buf)
        free(nodes)
        free(wts)
        raise MemoryError()
    _offsets(ny, nz, off)
    try:
        with nogil:
            for r in range(nrays):
                T = 1.0
                used = 0
                for k in range(n_samples[r]):
                    if T < stop_transmittance:
                        break
                    t = t_start[r] + k * step
                    _locate(origins[r, 0] + t * dirs[r, 0],
                            origins[r, 1] + t * dirs[r, 1],
                            origins[r, 2] + t * dirs[r, 2],
                            bbox_min[0], bbox_min[1], bbox_min[2],
                            inv_voxel[0], inv_voxel[1], inv_voxel[2], nx, ny, nz, c0, f)
                    _weights(f, &wts[8 * used])
                    base = (c0[0] * ny + c0[1]) * nz + c0[2]
                    nodes[used] = base
                    raw = 0.0
                    col_r = 0.0
                    col_g = 0.0
                    col_b = 0.0
                    for q in range(8):
                        wt = wts[8 * used + q]
                        node = base + off[q]
                        raw = raw + wt * dptr[node]
                        col_r = col_r + wt * cptr[3 * node]
                        col_g = col_g + wt * cptr[3 * node + 1]
                        col_b = col_b + wt * cptr[3 * node + 2]
                    alpha = 1.0 - exp(-_softplus(raw) * step)
                    b = &buf[6 * used]
                    b[0] = T
                    b[1] = alpha
                    b[2] = _sigmoid(raw)
                    b[3] = _sigmoid(col_r)
                    b[4] = _sigmoid(col_g)
                    b[5] = _sigmoid(col_b)
                    wt = T * alpha
                    rgb[r, 0] += wt * b[3]
                    rgb[r, 1] += wt * b[4]
                    rgb[r, 2] += wt * b[5]
                    T = T * (1.0 - alpha)
                    used = used + 1
                gr = rgb[r, 0] - target[r, 0]
                gg = rgb[r, 1] - target[r, 1]
                gb = rgb[r, 2] - target[r, 2]
                sq += gr * gr + gg * gg + gb * gb
                gr = 2.0 * scale * gr
                gg = 2.0 * scale * gg
                gb = 2.0 * scale * gb
                sr = 0.0
                sg = 0.0
                sb = 0.0
                for k in range(used - 1, -1, -1):
                    b = &buf[6 * k]
                    T = b[0]
                    alpha = b[1]
                    d_alpha = T * (gr * (b[3] - sr) + gg * (b[4] - sg) + gb * (b[5] - sb))
                    d_raw = d_alpha * step * (1.0 - alpha) * b[2]
                    wt = T * alpha
                    col_r = wt * gr * b[3] * (1.0 - b[3])
                    col_g = wt * gg * b[4] * (1.0 - b[4])
                    col_b = wt * gb * b[5] * (1.0 - b[5])
                    base = nodes[k]
                    for q in range(8):
                        node = base + off[q]
                        gdp[node] += wts[8 * k + q] * d_raw
                        gcp[3 * node] += wts[8 * k + q] * col_r
                        gcp[3 * node + 1] += wts[8 * k + q] * col_g
                        gcp[3 * node + 2] += wts[8 * k + q] * col_b
                    sr = alpha * b[3] + (1.0 - alpha) * sr
                    sg = alpha * b[4] + (1.0 - alpha) * sg
                    sb = alpha * b[5] + (1.0 - alpha) * sb
    finally:
        free(buf)
        free(nodes)
        free(wts)
    return rgb_arr, sq


def splat_scalar(double[:, ::1] points, double[::1] weights,
                 double[::1] bbox_min, double[::1] inv_voxel, double[:, :, ::1] out):
    cdef Py_ssize_t n = points.shape[0], i, q, base
    cdef Py_ssize_t nx = out.shape[0], ny = out.shape[1], nz = out.shape[2]
    cdef double* optr = &out[0, 0, 0]
    cdef Py_ssize_t off[8]
    cdef Py_ssize_t c0[3]
    cdef double f[3]
    cdef double w[8]
    _offsets(ny, nz, off)
    with nogil:
        for i in range(n):
            _locate(points[i, 0], points[i, 1], points[i, 2],
                    bbox_min[0], bbox_min[1], bbox_min[2],
                    inv_voxel[0], inv_voxel[1], inv_voxel[2], nx, ny, nz, c0, f)
            _weights(f, w)
            base = (c0[0] * ny + c0[1]) * nz + c0[2]
            for q in range(8):
                optr[base + off[q]] += w[q] * weights[i]


def splat_vector(double[:, ::1] points, double[::1] weights, double[:, ::1] values,
                 double[::1] bbox_min, double[::1] inv_voxel,
                 double[:, :, ::1] out_mass, double[:, :, :, ::1] out_values):
    cdef Py_ssize_t n = points.shape[0], nc = values.shape[1], i, q, c, base, node
    cdef Py_ssize_t nx = out_mass.shape[0], ny = out_mass.shape[1], nz = out_mass.shape[2]
    cdef double* mptr = &out_mass[0, 0, 0]
    cdef double* vptr = &out_values[0, 0, 0, 0]
    cdef Py_ssize_t off[8]
    cdef Py_ssize_t c0[3]
    cdef double f[3]
    cdef double w[8]
    cdef double wq
    _offsets(ny, nz, off)
    with nogil:
        for i in range(n):
            _locate(points[i, 0], points[i, 1], points[i, 2],
                    bbox_min[0], bbox_min[1], bbox_min[2],
                    inv_voxel[0], inv_voxel[1], inv_voxel[2], nx, ny, nz, c0, f)
            _weights(f, w)
            base = (c0[0] * ny + c0[1]) * nz + c0[2]
            for q in range(8):
                node = base + off[q]
                wq = w[q] * weights[i]
                mptr[node] += wq
                for c in range(nc):
                    vptr[node * nc + c] += wq * values[i, c]


def softmin(double[:, ::1] x, double[:, ::1] y, double[::1] h, double eps,
            double[::1] out, double[:, ::1] grad=None):
    cdef Py_ssize_t n = x.shape[0], m = y.shape[0], i, j
    cdef bint want_grad = grad is not None
    cdef double inv2e = 0.5 / eps
    cdef double zmax, tot, e, dx, dy, dz, sx, sy, sz, xi0, xi1, xi2
    # structure-of-arrays copy so the inner loops vectorize
    yt_arr = np.ascontiguousarray(np.asarray(y).T)
    cdef double[:, ::1] yt = yt_arr
    cdef double* y0 = &yt[0, 0]
    cdef double* y1 = &yt[1, 0]
    cdef double* y2 = &yt[2, 0]
    cdef double* hp = &h[0]
    cdef double* z = <double*>malloc(max(m, 1) * sizeof(double))
    if z == NULL:
        raise MemoryError()
    try:
        with nogil:
            for i in range(n):
                xi0 = x[i, 0]
                xi1 = x[i, 1]
                xi2 = x[i, 2]
                for j in range(m):
                    dx = xi0 - y0[j]
                    dy = xi1 - y1[j]
                    dz = xi2 - y2[j]
                    z[j] = hp[j] - (dx * dx + dy * dy + dz * dz) * inv2e
                zmax = z[0]
                for j in range(1, m):
                    if z[j] > zmax:
                        zmax = z[j]
                tot = 0.0
                if want_grad:
                    sx = 0.0
                    sy = 0.0
                    sz = 0.0
                    for j in range(m):
                        e = exp(z[j] - zmax)
                        tot = tot + e
                        sx = sx + e * y0[j]
                        sy = sy + e * y1[j]
                        sz = sz + e * y2[j]
                    grad[i, 0] = xi0 - sx / tot
                    grad[i, 1] = xi1 - sy / tot
                    grad[i, 2] = xi2 - sz / tot
                else:
                    for j in range(m):
                        tot = tot + exp(z[j] - zmax)
                out[i] = -eps * (log(tot) + zmax)
    finally:
        free(z)


def adam_step(double[::1] param, double[::1] grad, double[::1] m, double[::1] v,
              double lr, double beta1, double beta2, double eps,
              double bias1, double bias2):
    cdef Py_ssize_t n = param.shape[0], i
    cdef double g
    with nogil:
        for i in range(n):
            g = grad[i]
            m[i] = beta1 * m[i] + (1.0 - beta1) * g
            v[i] = beta2 * v[i] + (1.0 - beta2) * g * g
            param[i] -= lr * (m[i] / bias1) / (sqrt(v[i] / bias2) + eps)
