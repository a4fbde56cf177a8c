"""Pure numpy implementations of the hot kernels.

Every function here mirrors a function of the same name in ``_ckernels.pyx``
and must agree with it to round-off. Grids are C-contiguous float64 arrays of
shape ``(Nx, Ny, Nz)`` (density) or ``(Nx, Ny, Nz, 3)`` (color).
"""
import numpy as np

BACKEND = "python"

_SOFTMIN_CHUNK = 1 << 22  # pairwise entries per block


def _softplus(x):
    return np.logaddexp(0.0, x)


def _sigmoid(x):
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def _corners(pts, bbox_min, inv_voxel, shape):
    """Lower-corner indices and fractional offsets, clamped into the lattice."""
    g = (pts - bbox_min) * inv_voxel
    res = np.asarray(shape[:3])
    g = np.clip(g, 0.0, res - 1.0)
    i0 = np.minimum(np.floor(g).astype(np.int64), res - 2)
    return i0, g - i0


def _corner_weights(frac):
    fx, fy, fz = frac[:, 0], frac[:, 1], frac[:, 2]
    gx, gy, gz = 1.0 - fx, 1.0 - fy, 1.0 - fz
    # order: (dx, dy, dz) with dz fastest
    return np.stack([gx * gy * gz, gx * gy * fz, gx * fy * gz, gx * fy * fz,
                     fx * gy * gz, fx * gy * fz, fx * fy * gz, fx * fy * fz], axis=1)


def _corner_flat(i0, shape):
    ny, nz = shape[1], shape[2]
    base = (i0[:, 0] * ny + i0[:, 1]) * nz + i0[:, 2]
    offs = np.array([(dx * ny + dy) * nz + dz
                     for dx in (0, 1) for dy in (0, 1) for dz in (0, 1)])
    return base[:, None] + offs[None, :]


def _gather(density, color, pts, bbox_min, inv_voxel):
    i0, frac = _corners(pts, bbox_min, inv_voxel, density.shape)
    idx = _corner_flat(i0, density.shape)
    w = _corner_weights(frac)
    d = (density.reshape(-1)[idx] * w).sum(axis=1)
    c = (color.reshape(-1, 3)[idx] * w[:, :, None]).sum(axis=1)
    return d, c, idx, w


def _sample_table(origins, dirs, t_start, n_samples, step):
    smax = int(n_samples.max()) if len(n_samples) else 0
    k = np.arange(smax)
    valid = k[None, :] < n_samples[:, None]
    t = t_start[:, None] + k[None, :] * step
    return smax, valid, t


def render_forward(density, color, bbox_min, inv_voxel, origins, dirs,
                   t_start, n_samples, step, stop_transmittance):
    nrays = origins.shape[0]
    rgb = np.zeros((nrays, 3))
    trans = np.ones(nrays)
    smax, valid, t = _sample_table(origins, dirs, t_start, n_samples, step)
    for k in range(smax):
        live = valid[:, k] & (trans >= stop_transmittance)
        if not live.any():
            if not valid[:, k:].any():
                break
            continue
        rays = np.nonzero(live)[0]
        pts = origins[rays] + t[rays, k, None] * dirs[rays]
        d, c, _, _ = _gather(density, color, pts, bbox_min, inv_voxel)
        alpha = 1.0 - np.exp(-_softplus(d) * step)
        rgb[rays] += (trans[rays] * alpha)[:, None] * _sigmoid(c)
        trans[rays] *= 1.0 - alpha
    return rgb


def render_backward(density, color, bbox_min, inv_voxel, origins, dirs,
                    t_start, n_samples, step, stop_transmittance,
                    target, scale, grad_density, grad_color):
    """Accumulate ``scale * d(sum ||C - target||^2)`` into the grad buffers.

    Returns the rendered colors and the summed squared error.
    """
    nrays = origins.shape[0]
    smax, valid, t = _sample_table(origins, dirs, t_start, n_samples, step)
    trans = np.ones(nrays)
    rgb = np.zeros((nrays, 3))
    used = np.zeros((nrays, smax), dtype=bool)
    rec = []
    for k in range(smax):
        live = valid[:, k] & (trans >= stop_transmittance)
        used[:, k] = live
        rays = np.nonzero(live)[0]
        if len(rays) == 0:
            rec.append(None)
            continue
        pts = origins[rays] + t[rays, k, None] * dirs[rays]
        d, c, idx, w = _gather(density, color, pts, bbox_min, inv_voxel)
        alpha = 1.0 - np.exp(-_softplus(d) * step)
        col = _sigmoid(c)
        rec.append((rays, trans[rays].copy(), alpha, col, _sigmoid(d), idx, w))
        rgb[rays] += (trans[rays] * alpha)[:, None] * col
        trans[rays] *= 1.0 - alpha

    resid = rgb - target
    sq = float((resid ** 2).sum())
    g = 2.0 * scale * resid
    suffix = np.zeros((nrays, 3))
    gd = np.zeros(grad_density.size)
    gc = np.zeros(grad_color.size)
    for k in range(smax - 1, -1, -1):
        if rec[k] is None:
            continue
        rays, tk, alpha, col, dsig, idx, w = rec[k]
        gr = g[rays]
        s = suffix[rays]
        d_alpha = tk * (gr * (col - s)).sum(axis=1)
        d_raw = d_alpha * step * (1.0 - alpha) * dsig
        d_col = (tk * alpha)[:, None] * gr * col * (1.0 - col)
        gd += np.bincount(idx.ravel(), weights=(w * d_raw[:, None]).ravel(),
                          minlength=gd.size)
        cidx = (idx[:, :, None] * 3 + np.arange(3)).reshape(-1)
        gc += np.bincount(cidx, weights=(w[:, :, None] * d_col[:, None, :]).ravel(),
                          minlength=gc.size)
        suffix[rays] = alpha[:, None] * col + (1.0 - alpha)[:, None] * s
    grad_density += gd.reshape(grad_density.shape)
    grad_color += gc.reshape(grad_color.shape)
    return rgb, sq


def splat_scalar(points, weights, bbox_min, inv_voxel, out):
    i0, frac = _corners(points, bbox_min, inv_voxel, out.shape)
    idx = _corner_flat(i0, out.shape)
    w = _corner_weights(frac) * weights[:, None]
    out += np.bincount(idx.ravel(), weights=w.ravel(), minlength=out.size).reshape(out.shape)


def splat_vector(points, weights, values, bbox_min, inv_voxel, out_mass, out_values):
    i0, frac = _corners(points, bbox_min, inv_voxel, out_mass.shape)
    idx = _corner_flat(i0, out_mass.shape)
    w = _corner_weights(frac) * weights[:, None]
    out_mass += np.bincount(idx.ravel(), weights=w.ravel(),
                            minlength=out_mass.size).reshape(out_mass.shape)
    nc = values.shape[1]
    cidx = (idx[:, :, None] * nc + np.arange(nc)).reshape(-1)
    contrib = (w[:, :, None] * values[:, None, :]).ravel()
    out_values += np.bincount(cidx, weights=contrib,
                              minlength=out_values.size).reshape(out_values.shape)


def softmin(x, y, h, eps, out, grad=None):
    """out_i = -eps * log sum_j exp(h_j - |x_i - y_j|^2 / (2 eps)).

    If ``grad`` is given it receives the x-gradient ``x_i - sum_j p_ij y_j``.
    """
    n, m = x.shape[0], y.shape[0]
    rows = max(1, _SOFTMIN_CHUNK // max(m, 1))
    for s in range(0, n, rows):
        xs = x[s:s + rows]
        d2 = ((xs[:, None, :] - y[None, :, :]) ** 2).sum(axis=2)
        z = h[None, :] - d2 / (2.0 * eps)
        zmax = z.max(axis=1, keepdims=True)
        e = np.exp(z - zmax)
        tot = e.sum(axis=1)
        out[s:s + rows] = -eps * (np.log(tot) + zmax[:, 0])
        if grad is not None:
            grad[s:s + rows] = xs - (e @ y) / tot[:, None]


def adam_step(param, grad, m, v, lr, beta1, beta2, eps, bias1, bias2):
    """In-place Adam update on flat float64 arrays."""
    m *= beta1
    m += (1.0 - beta1) * grad
    v *= beta2
    v += (1.0 - beta2) * grad * grad
    param -= lr * (m / bias1) / (np.sqrt(v / bias2) + eps)
