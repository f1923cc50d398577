"""Vectorized numpy implementations of the per-pixel kernels.

This module is the fallback for ``taskobs._ckernels`` and must stay
bit-identical to it. Arguments are assumed validated by the caller.
"""

import numpy as np


def normalize_depth(depth, mask, eps):
    inside = mask.astype(bool)
    out = np.zeros(depth.shape, dtype=np.float64)
    if not inside.any():
        return out, True
    vals = depth[inside]
    d_min = vals.min()
    d_max = vals.max()
    out[inside] = (vals - d_min) / (d_max - d_min + eps)
    return out, False


def repaint(robot, obj, palette):
    h, w = robot.shape
    out = np.empty((h, w, 3), dtype=np.uint8)
    out[...] = palette[0]
    out[robot.astype(bool)] = palette[1]
    out[obj.astype(bool)] = palette[2]
    return out


def quantize_unit(x):
    # round half away from zero; x is nonnegative here
    return np.floor(255.0 * x + 0.5).astype(np.uint8)


def fuse(l0, obj, depth_norm):
    out = l0.copy()
    inside = obj.astype(bool)
    out[inside] = quantize_unit(depth_norm[inside])[:, None]
    return out


def canonicalize(robot, obj, depth, palette, eps):
    img = repaint(robot, obj, palette)
    if depth is None:
        return img, False
    norm, empty = normalize_depth(depth, obj, eps)
    return fuse(img, obj, norm), empty


def patch_pool_u8(img, grid):
    h, w, c = img.shape
    ch, cw = h // grid, w // grid
    sums = img.reshape(grid, ch, grid, cw, c).astype(np.int64).sum(axis=(1, 3))
    return sums.astype(np.float64) / float(ch * cw * 255)
