"""Pure-numpy kernels.  Reference behaviour for the compiled versions in ``_ckernels``."""

import numpy as np


def composite_forward(sigma, delta):
    """Per-sample weights and transmittance.

    Args:
        sigma, delta: (R, N) densities and interval lengths.

    Returns:
        weights (R, N) and transmittance (R, N + 1); ``trans[:, 0] == 1`` and
        ``trans[:, N]`` is what is left after the last sample.
    """
    tau = sigma * delta
    attenuation = np.exp(-tau)
    trans = np.ones((tau.shape[0], tau.shape[1] + 1), dtype=tau.dtype)
    np.cumprod(attenuation, axis=1, out=trans[:, 1:])
    weights = trans[:, :-1] * -np.expm1(-tau)
    return weights, trans


def composite_backward(grad_weights, grad_final_trans, weights, trans, delta):
    """Gradient w.r.t. sigma given gradients on the weights and on ``trans[:, N]``.

    d w_i / d tau_k is ``trans[k+1]`` for i == k, ``-w_i`` for i > k, 0 otherwise;
    d trans[N] / d tau_k is ``-trans[N]``.
    """
    gw = grad_weights * weights
    # sum_{i > k} w_i g_i
    tail = np.cumsum(gw[:, ::-1], axis=1)[:, ::-1]
    later = np.zeros_like(tail)
    later[:, :-1] = tail[:, 1:]
    grad_tau = trans[:, 1:] * grad_weights - later - (trans[:, -1] * grad_final_trans)[:, None]
    return grad_tau * delta


def scatter(u, v, z, values, height, width, band, min_weight):
    """Bilinear forward splatting into a two-layer depth buffer.

    Point ``p`` lands at continuous pixel coordinates (u, v) where pixel
    (row i, col j) is centred at (j + 0.5, i + 0.5).  Each of its four integer
    neighbours receives the bilinear coefficient as weight; coefficients below
    ``min_weight`` are dropped.  Per target pixel the smallest depth ``zmin``
    defines the front layer, holding every contribution with
    ``z <= zmin * (1 + band)``.  The back layer is built the same way from the
    nearest depth behind the front layer; anything further back is discarded.

    Returns:
        front (H, W, C) and back (H, W, C) weighted value sums, their weights
        (H, W), the total kept weight (H, W) and the front depth (H, W).
    """
    x = np.asarray(u, dtype=np.float64) - 0.5
    y = np.asarray(v, dtype=np.float64) - 0.5
    z = np.asarray(z, dtype=np.float64)
    values = np.asarray(values, dtype=np.float64)
    x0 = np.floor(x)
    y0 = np.floor(y)
    fx = x - x0
    fy = y - y0
    x0 = x0.astype(np.int64)
    y0 = y0.astype(np.int64)

    idx_parts, w_parts, src_parts, k_parts = [], [], [], []
    src = np.arange(x.shape[0])
    for k, (dy, dx, w) in enumerate((
        (0, 0, (1 - fx) * (1 - fy)),
        (0, 1, fx * (1 - fy)),
        (1, 0, (1 - fx) * fy),
        (1, 1, fx * fy),
    )):
        xi = x0 + dx
        yi = y0 + dy
        keep = (w >= min_weight) & (xi >= 0) & (xi < width) & (yi >= 0) & (yi < height)
        idx_parts.append(yi[keep] * width + xi[keep])
        w_parts.append(w[keep])
        src_parts.append(src[keep])
        k_parts.append(np.full(int(keep.sum()), k))
    # source-major ordering keeps the reduction order identical to the compiled loop
    idx = np.concatenate(idx_parts)
    w = np.concatenate(w_parts)
    s = np.concatenate(src_parts)
    order = np.lexsort((np.concatenate(k_parts), s))
    idx, w, s = idx[order], w[order], s[order]
    zs = z[s]

    npix = height * width
    zmin = np.full(npix, np.inf)
    np.minimum.at(zmin, idx, zs)
    in_front = zs <= zmin[idx] * (1 + band)
    zback = np.full(npix, np.inf)
    np.minimum.at(zback, idx[~in_front], zs[~in_front])
    in_back = ~in_front & (zs <= zback[idx] * (1 + band))

    def layer(sel):
        acc = np.stack(
            [np.bincount(idx[sel], weights=w[sel] * values[s[sel], c], minlength=npix) for c in range(values.shape[1])],
            axis=-1,
        )
        return acc.reshape(height, width, -1), np.bincount(idx[sel], weights=w[sel], minlength=npix).reshape(height, width)

    front, front_w = layer(in_front)
    back, back_w = layer(in_back)
    total = np.bincount(idx, weights=w, minlength=npix)
    return front, front_w, back, back_w, total.reshape(height, width), zmin.reshape(height, width)
