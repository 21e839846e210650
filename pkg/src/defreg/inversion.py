"""Fixed-point inversion of displacement fields, with an implicit backward pass.

A displacement field d whose continuous interpolant is a contraction has a
well-defined inverse displacement z satisfying

    z(x) = -d(x + z(x))

which we solve by Anderson-accelerated fixed-point iteration starting from
z0 = -d.  The residual of the iteration, max |z(x) + d(x + z(x))|, is exactly
the composition error of the candidate inverse, so the stopping tolerance is
directly the quantity callers care about.

The differentiable wrapper `invert_field` does not backpropagate through the
iterates.  Instead the backward pass solves the adjoint fixed-point equation

    u = g + (d step/dz at z*)^T u

with the same accelerated solver and pushes u through the single remaining
sampling operation.  Only the converged solution z* is retained between the
passes; no iteration history is stored on the tape.
"""

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import ConvergenceError
from .fields import _field_shape_check, identity_grid, interp_field
from .tensor import Tensor, _as_tensor, _make


@dataclass
class FixedPointConfig:
    """Knobs for the forward and adjoint fixed-point solves.

    tol is an absolute bound on the forward composition error in voxel units.
    backward_tol is relative to the max-norm of the incoming cotangent, so
    gradients keep a uniform number of correct digits regardless of scale.
    """

    tol: float = 0.01
    max_iter: int = 50
    anderson_memory: int = 4
    anderson_reg: float = 1e-8
    backward_tol: float = 1e-4
    backward_max_iter: int = 50


def _anderson_solve(step, z0, tol, max_iter, memory=4, reg=1e-8):
    """Accelerated fixed-point iteration z <- step(z).

    Type-II Anderson mixing over a short residual history; falls back to the
    plain update whenever the least-squares mix is degenerate.  Returns
    (z_best, evaluations, residual_best) where residual is max|step(z) - z|
    measured at z_best.  The caller decides whether residual_best <= tol is
    good enough; this routine just stops early once it is.
    """
    z = z0.astype(np.float64, copy=True)
    shape = z.shape
    hist_g, hist_r = [], []
    best_z, best_res = z, np.inf
    for it in range(1, max_iter + 1):
        g = np.asarray(step(z.reshape(shape)), dtype=np.float64)
        r = g - z
        res = float(np.max(np.abs(r)))
        if res < best_res:
            best_z, best_res = z, res
        if res <= tol:
            return best_z.reshape(shape), it, best_res
        hist_g.append(g.ravel())
        hist_r.append(r.ravel())
        if len(hist_g) > memory:
            hist_g.pop(0)
            hist_r.pop(0)
        z_next = g
        p = len(hist_r)
        if p >= 2:
            R = np.stack(hist_r, axis=1)
            G = R.T @ R
            lam = reg * max(float(np.max(np.diag(G))), 1e-30)
            try:
                beta = np.linalg.solve(G + lam * np.eye(p), np.ones(p))
                s = float(beta.sum())
                if np.isfinite(s) and abs(s) > 1e-30:
                    alpha = beta / s
                    cand = np.stack(hist_g, axis=1) @ alpha
                    if np.all(np.isfinite(cand)):
                        z_next = cand.reshape(z.shape)
            except np.linalg.LinAlgError:
                pass
        z = z_next
    # one last residual measurement so max_iter evaluations are honest
    g = np.asarray(step(z.reshape(shape)), dtype=np.float64)
    res = float(np.max(np.abs(g - z)))
    if res < best_res:
        best_z, best_res = z, res
    return best_z.reshape(shape), max_iter, best_res


def fixed_point_invert(d, config=None):
    """Inverse displacement of array d (n, *S) on its own grid.

    Returns (inverse, evaluations).  Raises ConvergenceError if the iteration
    cannot push the composition error below config.tol; the best iterate is
    attached to the exception for diagnosis.
    """
    cfg = config if config is not None else FixedPointConfig()
    d = np.asarray(d)
    _field_shape_check("fixed_point_invert", d)
    ident = identity_grid(d.shape[1:], np.float64)

    def step(z):
        return -interp_field(d, ident + z)

    z, evals, res = _anderson_solve(
        step, -d.astype(np.float64), cfg.tol, cfg.max_iter,
        cfg.anderson_memory, cfg.anderson_reg)
    if res > cfg.tol:
        raise ConvergenceError(
            "field inversion stalled: composition error %.3g > %.3g after %d evaluations"
            % (res, cfg.tol, evals),
            residual=res, iterations=evals, best=z.astype(d.dtype))
    return z.astype(d.dtype), evals


def invert_field(d, config=None, counter=None):
    """Differentiable inverse displacement of d (Tensor or array, (n, *S)).

    Forward: fixed-point solve as in `fixed_point_invert`.  Backward: adjoint
    fixed-point solve at the converged point; the tape keeps the solution
    only, never the iterates.  When counter is a list, the number of forward
    solver evaluations is appended to it.
    """
    cfg = config if config is not None else FixedPointConfig()
    dt = _as_tensor(d)
    z, evals = fixed_point_invert(dt.data, cfg)
    if counter is not None:
        counter.append(evals)
    z = z.astype(dt.data.dtype)
    ident = identity_grid(dt.data.shape[1:], np.float64)
    coords = ident + z

    def vjp(g):
        ref = float(np.max(np.abs(g)))
        if ref == 0.0 or not np.isfinite(ref):
            u = np.asarray(g, dtype=np.float64)
        else:
            tol = cfg.backward_tol * ref
            g64 = np.asarray(g, dtype=np.float64)

            def bstep(u):
                return g64 - T._interp_vjp_coords(dt.data, coords, u)

            u, evals, res = _anderson_solve(
                bstep, g64, tol, cfg.backward_max_iter,
                cfg.anderson_memory, cfg.anderson_reg)
            if res > tol:
                raise ConvergenceError(
                    "adjoint inversion stalled: residual %.3g > %.3g after %d evaluations"
                    % (res, tol, evals),
                    residual=res, iterations=evals, best=u)
        ga = -T._interp_vjp_vol(dt.data.shape, dt.dtype, coords, u)
        return (ga,)

    return _make("invert_field", (dt,), z, vjp, saved=(z,))
