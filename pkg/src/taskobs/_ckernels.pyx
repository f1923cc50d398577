# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled per-pixel kernels; bit-identical to ``taskobs._pykernels``."""

import numpy as np
cimport numpy as cnp
from libc.math cimport floor

cnp.import_array()


cdef inline unsigned char _quantize(double x) noexcept nogil:
    return <unsigned char>floor(255.0 * x + 0.5)


def normalize_depth(const double[:, :] depth, mask, double eps):
    cdef const unsigned char[:, :] m = np.ascontiguousarray(mask, dtype=np.uint8)
    cdef Py_ssize_t h = depth.shape[0], w = depth.shape[1], i, j
    out = np.zeros((h, w), dtype=np.float64)
    cdef double[:, :] o = out
    cdef double d_min = 0.0, d_max = 0.0, v, scale
    cdef bint seen = False
    with nogil:
        for i in range(h):
            for j in range(w):
                if m[i, j]:
                    v = depth[i, j]
                    if not seen:
                        d_min = v
                        d_max = v
                        seen = True
                    elif v < d_min:
                        d_min = v
                    elif v > d_max:
                        d_max = v
        if seen:
            scale = d_max - d_min + eps
            for i in range(h):
                for j in range(w):
                    if m[i, j]:
                        o[i, j] = (depth[i, j] - d_min) / scale
    return out, not seen


def repaint(robot, obj, const unsigned char[:, :] palette):
    cdef const unsigned char[:, :] r = np.ascontiguousarray(robot, dtype=np.uint8)
    cdef const unsigned char[:, :] ob = np.ascontiguousarray(obj, dtype=np.uint8)
    cdef Py_ssize_t h = r.shape[0], w = r.shape[1], i, j, k
    out = np.empty((h, w, 3), dtype=np.uint8)
    cdef unsigned char[:, :, :] o = out
    cdef int layer
    with nogil:
        for i in range(h):
            for j in range(w):
                layer = 0
                if ob[i, j]:
                    layer = 2
                elif r[i, j]:
                    layer = 1
                for k in range(3):
                    o[i, j, k] = palette[layer, k]
    return out


def fuse(const unsigned char[:, :, :] l0, obj, const double[:, :] depth_norm):
    cdef const unsigned char[:, :] ob = np.ascontiguousarray(obj, dtype=np.uint8)
    cdef Py_ssize_t h = l0.shape[0], w = l0.shape[1], i, j, k
    out = np.empty((h, w, 3), dtype=np.uint8)
    cdef unsigned char[:, :, :] o = out
    cdef unsigned char q
    with nogil:
        for i in range(h):
            for j in range(w):
                if ob[i, j]:
                    q = _quantize(depth_norm[i, j])
                    o[i, j, 0] = q
                    o[i, j, 1] = q
                    o[i, j, 2] = q
                else:
                    for k in range(3):
                        o[i, j, k] = l0[i, j, k]
    return out


def canonicalize(robot, obj, depth, const unsigned char[:, :] palette, double eps):
    img = repaint(robot, obj, palette)
    if depth is None:
        return img, False
    norm, empty = normalize_depth(np.ascontiguousarray(depth, dtype=np.float64), obj, eps)
    return fuse(img, obj, norm), empty


def patch_pool_u8(const unsigned char[:, :, :] img, Py_ssize_t grid):
    cdef Py_ssize_t h = img.shape[0], w = img.shape[1], c = img.shape[2]
    cdef Py_ssize_t ch = h // grid, cw = w // grid, i, j, k
    sums = np.zeros((grid, grid, c), dtype=np.int64)
    cdef cnp.int64_t[:, :, :] s = sums
    with nogil:
        for i in range(h):
            for j in range(w):
                for k in range(c):
                    s[i // ch, j // cw, k] += img[i, j, k]
    return sums.astype(np.float64) / float(ch * cw * 255)
