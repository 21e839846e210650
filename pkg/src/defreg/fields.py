"""Displacement-field algebra: sampling, composition, warping, Jacobians.

A displacement field is a (n, *spatial) array/Tensor in voxel units; the
deformation it represents maps voxel x to x + d(x).  Composition follows
(d1 o d2)(x) = d2(x) + d1(x + d2(x)), i.e. d2 acts first.
"""

from __future__ import annotations

import functools

import numpy as np

from . import tensor as T
from .errors import ShapeError, ValidationError
from .tensor import Tensor, sample_linear


@functools.lru_cache(maxsize=32)
def _identity_cached(shape, dtype_str):
    grids = np.meshgrid(*[np.arange(s, dtype=dtype_str) for s in shape], indexing="ij")
    return np.ascontiguousarray(np.stack(grids, axis=0))


def identity_grid(shape, dtype=np.float32):
    """Voxel-index coordinate grid of shape (n, *shape)."""
    return _identity_cached(tuple(int(s) for s in shape), np.dtype(dtype).str)


def identity_deformation(shape, dtype=np.float32):
    """Zero displacement field of shape (n, *shape)."""
    return np.zeros((len(shape),) + tuple(shape), dtype=dtype)


def _field_shape_check(op, d):
    data = d.data if isinstance(d, Tensor) else d
    if data.ndim - 1 != data.shape[0]:
        raise ShapeError("%s: field shape %s is not (n, *spatial) with matching n"
                         % (op, data.shape))
    return data


def interp_field(d, coords):
    """Raw (non-tape) multilinear interpolation of array d (C, *S) at coords (n, *Q)."""
    out, _, _, _ = T._interp_core(np.asarray(d), np.asarray(coords))
    return out.reshape((d.shape[0],) + coords.shape[1:])


def compose(d1, d2):
    """Displacement of the composed deformation (d1 o d2); d2 applied first.

    Both fields must live on the same grid; the result is resampled onto
    that grid (d1 is evaluated at x + d2(x) by linear interpolation).
    """
    d1t = d1 if isinstance(d1, Tensor) else Tensor(np.asarray(d1))
    d2t = d2 if isinstance(d2, Tensor) else Tensor(np.asarray(d2))
    a = _field_shape_check("compose", d1t)
    b = _field_shape_check("compose", d2t)
    if a.shape != b.shape:
        raise ShapeError("compose: field shapes differ: %s vs %s" % (a.shape, b.shape))
    ident = identity_grid(a.shape[1:], a.dtype)
    coords = T.add(d2t, Tensor(ident))
    return T.add(d2t, sample_linear(d1t, coords))


def warp_image(vol, d):
    """Sample vol (C, *S) at x + d(x); the warped image lives on d's grid."""
    vt = vol if isinstance(vol, Tensor) else Tensor(np.asarray(vol))
    dt = d if isinstance(d, Tensor) else Tensor(np.asarray(d))
    dd = _field_shape_check("warp_image", dt)
    if vt.data.shape[1:] != dd.shape[1:]:
        raise ShapeError("warp_image: volume spatial %s vs field spatial %s"
                         % (vt.data.shape[1:], dd.shape[1:]))
    ident = identity_grid(dd.shape[1:], dd.dtype)
    return sample_linear(vt, T.add(dt, Tensor(ident)))


def warp_labels(labels, d):
    """Nearest-neighbour label warp; labels is an integer array (*S)."""
    labels = np.asarray(labels)
    dd = np.asarray(d.data if isinstance(d, Tensor) else d)
    if labels.shape != dd.shape[1:]:
        raise ShapeError("warp_labels: labels %s vs field spatial %s"
                         % (labels.shape, dd.shape[1:]))
    coords = identity_grid(labels.shape, dd.dtype) + dd
    out_idx = []
    for ax, s in enumerate(labels.shape):
        out_idx.append(np.clip(np.rint(coords[ax]), 0, s - 1).astype(np.int64))
    return labels[tuple(out_idx)]


def jacobian_stats(d, num_samples, eps=1e-7, seed=0, margin=2.0):
    """Monte-Carlo local-Jacobian statistics of the deformation x + d(x).

    Samples continuous interior points, estimates the Jacobian by forward
    differences of step eps, and returns (folding_fraction, det_std) where
    folding_fraction is the fraction of sampled determinants <= 0.
    """
    dd = np.asarray(d.data if isinstance(d, Tensor) else d, dtype=np.float64)
    _field_shape_check("jacobian_stats", dd)
    n = dd.shape[0]
    S = dd.shape[1:]
    rng = np.random.default_rng(seed)
    pts = np.stack([
        rng.uniform(margin, S[ax] - 1 - margin - 2 * eps, size=num_samples)
        for ax in range(n)], axis=0)
    dets = jacobian_determinants(dd, pts, eps=eps)
    return float(np.mean(dets <= 0.0)), float(np.std(dets))


def jacobian_determinants(d, pts, eps=1e-7):
    """Determinants of I + grad(d) at continuous points pts (n, P), forward diffs."""
    dd = np.asarray(d.data if isinstance(d, Tensor) else d, dtype=np.float64)
    n = dd.shape[0]
    base = interp_field(dd, pts)
    cols = []
    for j in range(n):
        shifted = pts.copy()
        shifted[j] += eps
        col = (interp_field(dd, shifted) - base) / eps
        col[j] += 1.0
        cols.append(col)
    jac = np.stack(cols, axis=1)  # (i, j, P)
    return _dets(jac)


def _dets(jac):
    n = jac.shape[0]
    if n == 1:
        return jac[0, 0]
    if n == 2:
        return jac[0, 0] * jac[1, 1] - jac[0, 1] * jac[1, 0]
    if n == 3:
        return (jac[0, 0] * (jac[1, 1] * jac[2, 2] - jac[1, 2] * jac[2, 1])
                - jac[0, 1] * (jac[1, 0] * jac[2, 2] - jac[1, 2] * jac[2, 0])
                + jac[0, 2] * (jac[1, 0] * jac[2, 1] - jac[1, 1] * jac[2, 0]))
    raise ValidationError("determinants: only 1-3 dims supported")


def resize_volume(vol, factor):
    """Resample a volume by an integer factor: average-pool down, linear up.

    factor > 1 upsamples, factor < 1 (as 1/int) downsamples.  Differentiable.
    """
    vt = vol if isinstance(vol, Tensor) else Tensor(np.asarray(vol))
    if factor == 1:
        return vt
    if factor > 1:
        f = int(factor)
        if f != factor:
            raise ValidationError("resize_volume: factor must be integer or 1/integer")
        fine_shape = tuple(s * f for s in vt.data.shape[1:])
        coords = _upsample_coords(fine_shape, f, vt.dtype)
        return sample_linear(vt, Tensor(coords))
    inv = round(1.0 / factor)
    if abs(1.0 / factor - inv) > 1e-9:
        raise ValidationError("resize_volume: factor must be integer or 1/integer")
    return T.block_mean(vt, inv)


def resize_field(d, factor):
    """Resample a displacement field and rescale its values by factor.

    Values stay in the voxel units of the target grid: halving the
    resolution of a constant displacement t gives constant t/2.
    """
    dt = d if isinstance(d, Tensor) else Tensor(np.asarray(d))
    _field_shape_check("resize_field", dt)
    if factor == 1:
        return dt
    return T.scale(resize_volume(dt, factor), float(factor))


@functools.lru_cache(maxsize=32)
def _upsample_coords_cached(fine_shape, f, dtype_str):
    grids = np.meshgrid(*[(np.arange(s, dtype=dtype_str) + 0.5) / f - 0.5
                          for s in fine_shape], indexing="ij")
    return np.ascontiguousarray(np.stack(grids, axis=0))


def _upsample_coords(fine_shape, f, dtype):
    return _upsample_coords_cached(tuple(fine_shape), int(f), np.dtype(dtype).str)
