"""Overlap and distance metrics, Jacobian summaries, significance testing.

Everything here is inference-side plain numpy.  The Hausdorff routine has a
brute-force all-pairs path for small volumes and an exact separable distance
transform for larger ones; both see surfaces defined by face connectivity
(a labeled voxel with at least one differently-labeled or out-of-volume face
neighbour).
"""

import itertools
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .errors import ValidationError
from .fields import jacobian_stats, warp_labels
from .pipeline import consistency_errors, register

_BRUTE_FORCE_MAX_VOXELS = 32 ** 3


def dice(a, b):
    """Per-label and mean Dice overlap of two integer label maps.

    Returns (per_label dict, mean).  Label 0 is treated as background and
    excluded from the mean; labels absent from both maps are skipped
    entirely.
    """
    a, b = np.asarray(a), np.asarray(b)
    if a.shape != b.shape:
        raise ValidationError("dice: shapes differ: %s vs %s" % (a.shape, b.shape))
    labels = np.union1d(np.unique(a), np.unique(b))
    per_label = {}
    for lab in labels:
        if lab == 0:
            continue
        na = int(np.count_nonzero(a == lab))
        nb = int(np.count_nonzero(b == lab))
        if na + nb == 0:
            continue
        inter = int(np.count_nonzero((a == lab) & (b == lab)))
        per_label[int(lab)] = 2.0 * inter / (na + nb)
    mean = float(np.mean(list(per_label.values()))) if per_label else 0.0
    return per_label, mean


def _surface(mask):
    """Boundary voxels of a binary mask under face connectivity."""
    surf = np.zeros_like(mask)
    if not mask.any():
        return surf
    interior = mask.copy()
    for ax in range(mask.ndim):
        lo = np.ones_like(mask)
        hi = np.ones_like(mask)
        sl_lo = [slice(None)] * mask.ndim
        sl_hi = [slice(None)] * mask.ndim
        sl_lo[ax] = slice(1, None)
        sl_hi[ax] = slice(None, -1)
        lo[tuple(sl_lo)] = mask[tuple(sl_hi)]
        hi[tuple(sl_hi)] = mask[tuple(sl_lo)]
        interior &= lo & hi
    surf = mask & ~interior
    return surf


def _edt(mask_points_grid):
    """Exact Euclidean distance (not squared) to the True voxels, per voxel.

    Separable lower-envelope squared-distance transform, one axis at a time.
    """
    INF = 1e18
    f = np.where(mask_points_grid, 0.0, INF)
    for ax in range(f.ndim):
        f = np.moveaxis(f, ax, -1)
        shape = f.shape
        flat = f.reshape(-1, shape[-1])
        out = np.empty_like(flat)
        m = shape[-1]
        q = np.arange(m, dtype=np.float64)
        for row in range(flat.shape[0]):
            out[row] = _dt_1d(flat[row], q)
        f = np.moveaxis(out.reshape(shape), -1, ax)
    return np.sqrt(f)


def _dt_1d(f, q):
    """1-d squared-distance lower envelope (parabola sweep)."""
    m = f.shape[0]
    d = np.empty(m, dtype=np.float64)
    v = np.empty(m, dtype=np.int64)
    z = np.empty(m + 1, dtype=np.float64)
    k = 0
    v[0] = 0
    z[0], z[1] = -np.inf, np.inf
    for i in range(1, m):
        s = ((f[i] + i * i) - (f[v[k]] + v[k] * v[k])) / (2.0 * i - 2.0 * v[k])
        while s <= z[k]:
            k -= 1
            s = ((f[i] + i * i) - (f[v[k]] + v[k] * v[k])) / (2.0 * i - 2.0 * v[k])
        k += 1
        v[k] = i
        z[k] = s
        z[k + 1] = np.inf
    k = 0
    for i in range(m):
        while z[k + 1] < i:
            k += 1
        d[i] = (i - v[k]) ** 2 + f[v[k]]
    return d


def hd95(a, b, label):
    """95th percentile of pooled symmetric surface distances for one label."""
    a, b = np.asarray(a), np.asarray(b)
    if a.shape != b.shape:
        raise ValidationError("hd95: shapes differ: %s vs %s" % (a.shape, b.shape))
    mask_a, mask_b = a == label, b == label
    if not mask_a.any() or not mask_b.any():
        raise ValidationError("hd95: label %r missing from an input" % (label,))
    surf_a, surf_b = _surface(mask_a), _surface(mask_b)
    if a.size <= _BRUTE_FORCE_MAX_VOXELS:
        pa = np.argwhere(surf_a).astype(np.float64)
        pb = np.argwhere(surf_b).astype(np.float64)
        d_ab, d_ba = _min_dists(pa, pb)
    else:
        d_ab = _edt(surf_b)[surf_a]
        d_ba = _edt(surf_a)[surf_b]
    pooled = np.concatenate([d_ab, d_ba])
    return float(np.percentile(pooled, 95))


def _min_dists(pa, pb):
    """All-pairs nearest distances in both directions, chunked for memory."""
    mins_a = np.full(len(pa), np.inf)
    mins_b = np.full(len(pb), np.inf)
    chunk = max(1, 4 * 10 ** 6 // max(1, len(pb)))
    for i in range(0, len(pa), chunk):
        d2 = np.sum((pa[i:i + chunk, None, :] - pb[None, :, :]) ** 2, axis=-1)
        mins_a[i:i + chunk] = d2.min(axis=1)
        np.minimum(mins_b, d2.min(axis=0), out=mins_b)
    return np.sqrt(mins_a), np.sqrt(mins_b)


def permutation_test(sample_a, sample_b, n_perm=10000, seed=0):
    """Two-sided paired sign-flip permutation p-value for the mean difference.

    Enumerates every sign pattern when 2^n <= n_perm; otherwise draws
    n_perm random patterns and applies the standard add-one correction.
    """
    a = np.asarray(sample_a, dtype=np.float64)
    b = np.asarray(sample_b, dtype=np.float64)
    if a.ndim != 1 or a.shape != b.shape or a.size == 0:
        raise ValidationError("permutation_test: need equal-length non-empty 1-d samples")
    d = a - b
    n = d.size
    observed = abs(d.mean())
    tol = 1e-12 * max(1.0, float(np.max(np.abs(d))) if n else 1.0)
    if 2 ** n <= n_perm:
        count, total = 0, 2 ** n
        for signs in itertools.product((1.0, -1.0), repeat=n):
            if abs(np.dot(signs, d) / n) >= observed - tol:
                count += 1
        return count / total
    rng = np.random.default_rng(seed)
    signs = rng.choice((1.0, -1.0), size=(n_perm, n))
    stats = np.abs(signs @ d) / n
    count = int(np.count_nonzero(stats >= observed - tol))
    return (1 + count) / (n_perm + 1)


@dataclass
class PairMetrics:
    dice_mean: float
    dice_baseline: float
    dice_per_label: dict
    hd95_mean: float
    folding: float
    det_std: float
    inverse_err: float
    cycle_err: float
    iterations: list


@dataclass
class MetricReport:
    rows: list = field(default_factory=list)

    def aggregate(self):
        """Mean and std of each scalar metric over the rows."""
        keys = ("dice_mean", "dice_baseline", "hd95_mean", "folding",
                "det_std", "inverse_err", "cycle_err")
        agg = {}
        for key in keys:
            vals = np.asarray([getattr(r, key) for r in self.rows], dtype=np.float64)
            agg[key] = {"mean": float(vals.mean()), "std": float(vals.std())}
        return agg


def evaluate(weights, pairs, mode="sym", config=None):
    """Full metric suite over a list of SyntheticPair-like objects."""
    report = MetricReport()
    for pair in pairs:
        with T.no_grad():
            result = register(weights,
                              pair.x_a.astype(weights.dtype),
                              pair.x_b.astype(weights.dtype),
                              mode=mode, config=config)
        f12 = result.f12.data
        warped = warp_labels(pair.labels_a, f12)
        dice_labels, dice_mean = dice(warped, pair.labels_b)
        _, dice_base = dice(pair.labels_a, pair.labels_b)
        both = [lab for lab in np.unique(pair.labels_a) if lab != 0
                and (pair.labels_b == lab).any() and (warped == lab).any()]
        hd_vals = [hd95(warped, pair.labels_b, lab) for lab in both]
        hd_mean = float(np.mean(hd_vals)) if hd_vals else 0.0
        num_samples = int(min(10 ** 6, 20 * f12[0].size))
        folding, det_std = jacobian_stats(f12, num_samples)
        inverse_err, cycle_err = consistency_errors(
            weights, pair.x_a.astype(weights.dtype),
            pair.x_b.astype(weights.dtype), mode=mode, config=config)
        report.rows.append(PairMetrics(
            dice_mean=dice_mean,
            dice_baseline=dice_base,
            dice_per_label=dice_labels,
            hd95_mean=hd_mean,
            folding=folding,
            det_std=det_std,
            inverse_err=inverse_err,
            cycle_err=cycle_err,
            iterations=list(result.iterations),
        ))
    return report
