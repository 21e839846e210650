"""Symmetric multi-resolution registration recursion and inference variants.

Both input images are mapped toward a shared half-way space, one update per
resolution level, coarse to fine.  At each level the two feature volumes are
warped by the current half-way deformations, a control grid is predicted for
each argument order, and the level's update is built so that swapping the
input images swaps the two output deformations exactly:

    delta     = u(z1, z2) o inverse(u(z2, z1))
    delta_inv = u(z2, z1) o inverse(u(z1, z2))

The half-way deformations and their inverses are maintained incrementally as
dense displacement fields at full image resolution; predicted control grids
are upsampled to that grid before any composition.  Keeping the state at one
fixed resolution costs some memory at coarse levels but means the clamp
bound of the splines module applies to the dense fields exactly as computed,
with no extra resampling between a grid's prediction and its use.

Two inference variants exist: the standard one returns the dense fields
accumulated during the recursion (each composition resamples, so tiny
folding can appear), while the complete one re-evaluates every stored
control grid at continuous points, inverting pointwise to solver precision,
and therefore cannot fold at all.
"""

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .errors import ShapeError, ValidationError
from .fields import (_dets, compose, identity_deformation,
                     resize_field, warp_image)
from .inversion import FixedPointConfig, _anderson_solve, invert_field
from .networks import extract_features, predict_control_grid
from .splines import evaluate_spline, upsample_control_grid
from .tensor import Tensor, _as_tensor

MODES = ("sym", "non_sym")


@dataclass
class LevelState:
    """Half-way deformations after the update at `level` (full resolution).

    d1 maps half-way points into image 1, d2 into image 2; inv1 and inv2 are
    their maintained inverses.
    """

    level: int
    d1: Tensor
    d2: Tensor
    inv1: Tensor
    inv2: Tensor


@dataclass
class RegistrationResult:
    """Outputs of `register`.

    f12 warps image 1 onto image 2's grid (and f21 the reverse).  `updates`
    keeps each level's pair of predicted control grids, coarsest first, so
    the complete inference variant can re-evaluate the exact composition
    later.  `iterations` collects the evaluation counts of every dense field
    inversion run during the recursion (empty in non_sym mode).
    """

    f12: Tensor
    f21: Tensor
    state: LevelState
    updates: list
    iterations: list
    mode: str


def _dense_update_field(grid, full_shape):
    """Control grid -> dense displacement on the full-resolution grid, voxel units."""
    up = upsample_control_grid(grid, full_shape)
    return T.scale(up, float(2 ** grid.level)) if grid.level > 0 else up


def _level_update(weights, k, state, feat_a, feat_b, mode, cfg, counters):
    full_shape = state.d1.data.shape[1:]
    factor = 2.0 ** -k if k > 0 else 1
    z1 = warp_image(feat_a, resize_field(state.d1, factor))
    z2 = warp_image(feat_b, resize_field(state.d2, factor))
    g1 = predict_control_grid(weights, k, z1, z2)
    g2 = predict_control_grid(weights, k, z2, z1)
    u1 = _dense_update_field(g1, full_shape)
    u2 = _dense_update_field(g2, full_shape)
    if mode == "sym":
        delta = compose(u1, invert_field(u2, cfg, counters))
        delta_inv = compose(u2, invert_field(u1, cfg, counters))
    else:
        delta = compose(u1, u1)
        delta_inv = compose(u2, u2)
    return LevelState(
        level=k,
        d1=compose(state.d1, delta),
        d2=compose(state.d2, delta_inv),
        inv1=compose(delta_inv, state.inv1),
        inv2=compose(delta, state.inv2),
    ), (g1, g2)


def register(weights, x_a, x_b, mode="sym", config=None):
    """Register two images of shape (C, *S); returns a RegistrationResult.

    Feature extraction runs once per image and the recursion consumes the
    two pyramids in both argument orders, which makes the outputs of
    register(a, b) and register(b, a) exact mirrors of each other.
    """
    if mode not in MODES:
        raise ValidationError("register: mode must be one of %s" % (MODES,))
    cfg = config if config is not None else FixedPointConfig()
    xa, xb = _as_tensor(x_a), _as_tensor(x_b)
    if xa.data.shape != xb.data.shape:
        raise ShapeError("register: image shapes differ: %s vs %s"
                         % (xa.data.shape, xb.data.shape))
    K = weights.config.num_levels
    feats_a = extract_features(weights, xa)
    feats_b = extract_features(weights, xb)
    shape = xa.data.shape[1:]
    zero = identity_deformation(shape, xa.dtype)
    state = LevelState(K, Tensor(zero), Tensor(zero), Tensor(zero), Tensor(zero))
    updates, counters = [], []
    for k in range(K - 1, -1, -1):
        state, grids = _level_update(weights, k, state, feats_a[k], feats_b[k],
                                     mode, cfg, counters)
        updates.append(grids)
    return RegistrationResult(
        f12=compose(state.d1, state.inv2),
        f21=compose(state.d2, state.inv1),
        state=state,
        updates=updates,
        iterations=counters,
        mode=mode,
    )


def infer_standard(result):
    """The dense output fields accumulated during the recursion."""
    return result.f12, result.f21


# ---------------------------------------------------------------------------
# complete inference: exact re-evaluation of the update chain

def _grid_displacement(grid, pts):
    """Voxel-unit displacement of a control grid at continuous points (n, P)."""
    k = grid.level
    lattice = (pts + 0.5) / 2 ** k - 0.5
    return evaluate_spline(grid, lattice) * float(2 ** k)


def _invert_pointwise(grid, pts, tol=1e-11, max_iter=500):
    """Points mapped through the exact inverse of the grid's deformation."""

    def step(z):
        return -_grid_displacement(grid, pts + z)

    z, _, res = _anderson_solve(step, step(np.zeros_like(pts)), tol, max_iter,
                                memory=8)
    if res > tol:
        raise ValidationError(
            "pointwise inversion residual %.3g above %.3g; field should be "
            "contractive by construction" % (res, tol))
    return pts + z


def _apply_update(grids, pts, forward, mode):
    """Map points through delta (forward=True) or its inverse (False)."""
    g1, g2 = grids
    lead, trail = (g1, g2) if forward else (g2, g1)
    if mode == "sym":
        q = _invert_pointwise(trail, pts)
    else:
        q = pts + _grid_displacement(lead, pts)
    return q + _grid_displacement(lead, q)


def infer_complete(result, eval_points, direction="12"):
    """Displacements of the exact update-chain composition at eval_points.

    eval_points is (n, P) in voxel coordinates of the full-resolution grid.
    No intermediate dense resampling happens; each level's update is applied
    by evaluating its control grids (and pointwise-inverting one of them)
    directly at the running continuous positions, so the result is a true
    composition of invertible maps.
    """
    if direction not in ("12", "21"):
        raise ValidationError("infer_complete: direction must be '12' or '21'")
    pts = np.asarray(eval_points, dtype=np.float64)
    forward = direction == "12"
    x = pts
    for grids in result.updates:
        x = _apply_update(grids, x, forward, result.mode)
    for grids in reversed(result.updates):
        x = _apply_update(grids, x, forward, result.mode)
    return x - pts


def complete_jacobian_stats(result, num_samples, direction="12", eps=1e-7,
                            seed=0, margin=2.0):
    """Monte-Carlo Jacobian statistics of the complete-variant deformation.

    Mirrors fields.jacobian_stats but evaluates the exact update chain at
    the sampled points instead of interpolating a dense field.  Returns
    (folding_fraction, det_std).
    """
    shape = result.f12.data.shape[1:]
    n = len(shape)
    rng = np.random.default_rng(seed)
    pts = np.stack([
        rng.uniform(margin, shape[ax] - 1 - margin - 2 * eps, size=num_samples)
        for ax in range(n)], axis=0)
    batch = [pts]
    for j in range(n):
        shifted = pts.copy()
        shifted[j] += eps
        batch.append(shifted)
    disp = infer_complete(result, np.concatenate(batch, axis=1), direction)
    chunks = np.split(disp + np.concatenate(batch, axis=1), n + 1, axis=1)
    base = chunks[0]
    cols = []
    for j in range(n):
        cols.append((chunks[1 + j] - base) / eps)
    dets = _dets(np.stack(cols, axis=1))
    return float(np.mean(dets <= 0.0)), float(np.std(dets))


def consistency_errors(weights, x_a, x_b, mode="sym", config=None):
    """(inverse_err, cycle_err) in squared voxels, averaged over the grid.

    inverse_err composes the two outputs of one registration; cycle_err
    composes the forward outputs of the two argument orders.  For sym mode
    the two numbers are identical because register(b, a) returns bitwise
    mirrors of register(a, b).
    """
    with T.no_grad():
        r_ab = register(weights, x_a, x_b, mode, config)
        r_ba = register(weights, x_b, x_a, mode, config)
        inv_comp = compose(r_ab.f12, r_ab.f21)
        cyc_comp = compose(r_ab.f12, r_ba.f12)
    inverse_err = float(np.mean(np.sum(inv_comp.data.astype(np.float64) ** 2,
                                       axis=0)))
    cycle_err = float(np.mean(np.sum(cyc_comp.data.astype(np.float64) ** 2,
                                     axis=0)))
    return inverse_err, cycle_err
