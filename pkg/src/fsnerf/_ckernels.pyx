# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled versions of the kernels in ``_kernels_py``; same signatures and outputs."""

import numpy as np
cimport numpy as cnp
from libc.math cimport exp, expm1, floor

cnp.import_array()

ctypedef fused real:
    float
    double


def composite_forward(real[:, ::1] sigma, real[:, ::1] delta):
    cdef Py_ssize_t R = sigma.shape[0], N = sigma.shape[1], r, i
    dtype = np.float32 if real is float else np.float64
    weights_arr = np.empty((R, N), dtype=dtype)
    trans_arr = np.empty((R, N + 1), dtype=dtype)
    cdef real[:, ::1] weights = weights_arr
    cdef real[:, ::1] trans = trans_arr
    cdef real t, tau
    with nogil:
        for r in range(R):
            t = 1
            trans[r, 0] = 1
            for i in range(N):
                tau = sigma[r, i] * delta[r, i]
                weights[r, i] = t * <real>(-expm1(-tau))
                t = t * <real>exp(-tau)
                trans[r, i + 1] = t
    return weights_arr, trans_arr


def composite_backward(real[:, ::1] grad_weights, real[:] grad_final_trans, real[:, ::1] weights,
                       real[:, ::1] trans, real[:, ::1] delta):
    cdef Py_ssize_t R = weights.shape[0], N = weights.shape[1], r, i
    dtype = np.float32 if real is float else np.float64
    out_arr = np.empty((R, N), dtype=dtype)
    cdef real[:, ::1] out = out_arr
    cdef real later, final_term
    with nogil:
        for r in range(R):
            later = 0
            final_term = trans[r, N] * grad_final_trans[r]
            for i in range(N - 1, -1, -1):
                out[r, i] = (trans[r, i + 1] * grad_weights[r, i] - later - final_term) * delta[r, i]
                later = later + weights[r, i] * grad_weights[r, i]
    return out_arr


def scatter(double[:] u, double[:] v, double[:] z, double[:, :] values, Py_ssize_t height,
            Py_ssize_t width, double band, double min_weight):
    cdef Py_ssize_t P = u.shape[0], C = values.shape[1], p, k, c, pix
    cdef Py_ssize_t npix = height * width
    zmin_arr = np.full(npix, np.inf)
    zback_arr = np.full(npix, np.inf)
    total_arr = np.zeros(npix)
    front_w_arr = np.zeros(npix)
    back_w_arr = np.zeros(npix)
    front_arr = np.zeros((npix, C))
    back_arr = np.zeros((npix, C))
    cdef double[:] zmin = zmin_arr
    cdef double[:] zback = zback_arr
    cdef double[:] total = total_arr
    cdef double[:] front_w = front_w_arr
    cdef double[:] back_w = back_w_arr
    cdef double[:, :] front = front_arr
    cdef double[:, :] back = back_arr
    cdef double w, zp, zf, zb
    cdef double ws[4]
    cdef Py_ssize_t idx[4]
    cdef int valid[4]

    with nogil:
        for p in range(P):
            _neighbours(u[p], v[p], height, width, min_weight, ws, idx, valid)
            for k in range(4):
                if valid[k] and z[p] < zmin[idx[k]]:
                    zmin[idx[k]] = z[p]
        for p in range(P):
            _neighbours(u[p], v[p], height, width, min_weight, ws, idx, valid)
            zp = z[p]
            for k in range(4):
                if valid[k] and zp > zmin[idx[k]] * (1 + band) and zp < zback[idx[k]]:
                    zback[idx[k]] = zp
        for p in range(P):
            _neighbours(u[p], v[p], height, width, min_weight, ws, idx, valid)
            zp = z[p]
            for k in range(4):
                if not valid[k]:
                    continue
                pix = idx[k]
                w = ws[k]
                total[pix] += w
                zf = zmin[pix]
                zb = zback[pix]
                if zp <= zf * (1 + band):
                    front_w[pix] += w
                    for c in range(C):
                        front[pix, c] += w * values[p, c]
                elif zp <= zb * (1 + band):
                    back_w[pix] += w
                    for c in range(C):
                        back[pix, c] += w * values[p, c]
    return (
        front_arr.reshape(height, width, C),
        front_w_arr.reshape(height, width),
        back_arr.reshape(height, width, C),
        back_w_arr.reshape(height, width),
        total_arr.reshape(height, width),
        zmin_arr.reshape(height, width),
    )


cdef inline void _neighbours(double u, double v, Py_ssize_t height, Py_ssize_t width, double min_weight,
                             double* ws, Py_ssize_t* idx, int* valid) noexcept nogil:
    cdef double x = u - 0.5, y = v - 0.5
    cdef double xf = floor(x), yf = floor(y)
    cdef double fx = x - xf, fy = y - yf
    cdef Py_ssize_t x0 = <Py_ssize_t>xf, y0 = <Py_ssize_t>yf
    cdef Py_ssize_t k, xi, yi
    ws[0] = (1 - fx) * (1 - fy)
    ws[1] = fx * (1 - fy)
    ws[2] = (1 - fx) * fy
    ws[3] = fx * fy
    for k in range(4):
        xi = x0 + (k & 1)
        yi = y0 + (k >> 1)
        valid[k] = ws[k] >= min_weight and xi >= 0 and xi < width and yi >= 0 and yi < height
        idx[k] = yi * width + xi
