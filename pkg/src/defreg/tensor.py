"""Dense n-d tensors with a minimal reverse-mode tape.

The engine records a Wengert list of TapeNodes as ops execute.  Only the
operator set needed by the registration pipeline is implemented, each with a
hand-written adjoint.  Arrays are plain numpy; float32 is the working
precision for training and inference, float64 for gradient checking.

Conventions: volumes are channels-first ``(C, *spatial)``, displacement
fields are ``(n, *spatial)`` in voxel units, coordinates are voxel-index
coordinates (no physical spacing).
"""

from __future__ import annotations

import itertools

import numpy as np

from .errors import ShapeError, ValidationError

_CHECK_FINITE = False
_GRAD_ENABLED = True


def set_finite_checks(enabled):
    """Toggle per-op NaN/Inf detection (slow; used by the test suite)."""
    global _CHECK_FINITE
    _CHECK_FINITE = bool(enabled)


class no_grad:
    """Context manager suppressing tape recording (inference paths)."""

    def __enter__(self):
        global _GRAD_ENABLED
        self.prev = _GRAD_ENABLED
        _GRAD_ENABLED = False
        return self

    def __exit__(self, *exc):
        global _GRAD_ENABLED
        _GRAD_ENABLED = self.prev
        return False


class TapeNode:
    """One recorded op: identifier, parent refs, saved forward buffers, adjoint."""

    __slots__ = ("op", "parents", "saved", "vjp", "consumed")

    def __init__(self, op, parents, saved, vjp):
        self.op = op
        self.parents = parents
        self.saved = saved
        self.vjp = vjp
        self.consumed = False


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "node")

    def __init__(self, data, requires_grad=False, node=None):
        if not isinstance(data, np.ndarray):
            data = np.asarray(data)
        self.data = data
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self.node = node

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self):
        return self.data.ndim

    def detach(self):
        return Tensor(self.data, requires_grad=False)

    def astype(self, dtype):
        return astype(self, dtype)

    def item(self):
        return float(self.data)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        return "Tensor(shape=%s, dtype=%s, grad=%s)" % (
            self.data.shape, self.data.dtype, self.requires_grad)

    def __add__(self, other):
        if isinstance(other, Tensor):
            return add(self, other)
        return shift(self, float(other))

    __radd__ = __add__

    def __sub__(self, other):
        if isinstance(other, Tensor):
            return sub(self, other)
        return shift(self, -float(other))

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other)
        return scale(self, float(other))

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            return div(self, other)
        return scale(self, 1.0 / float(other))

    def __neg__(self):
        return scale(self, -1.0)

    def __getitem__(self, key):
        return slice_(self, key)


class Parameter(Tensor):
    """Leaf tensor tracked by optimizers; gradients accumulate across backward calls."""

    def __init__(self, data, name=""):
        super().__init__(np.asarray(data), requires_grad=True)
        self.name = name

    __slots__ = ("name",)


def tensor(data, requires_grad=False, dtype=None):
    arr = np.asarray(data)
    if dtype is not None:
        arr = arr.astype(dtype)
    return Tensor(arr, requires_grad=requires_grad)


def _as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x))


def _make(op, parents, out_data, vjp, saved=()):
    if _CHECK_FINITE and not np.all(np.isfinite(out_data)):
        raise FloatingPointError("non-finite values produced by op %r" % op)
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        return Tensor(out_data, True, TapeNode(op, tuple(parents), tuple(saved), vjp))
    return Tensor(out_data, False)


def _same_shape(op, a, b):
    if a.data.shape != b.data.shape:
        raise ShapeError("%s: shape mismatch %s vs %s" % (op, a.data.shape, b.data.shape))


# ---------------------------------------------------------------------------
# elementwise / reduction ops

def add(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    _same_shape("add", a, b)
    return _make("add", (a, b), a.data + b.data, lambda g: (g, g))


def sub(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    _same_shape("sub", a, b)
    return _make("sub", (a, b), a.data - b.data, lambda g: (g, -g))


def mul(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    _same_shape("mul", a, b)
    return _make("mul", (a, b), a.data * b.data,
                 lambda g: (g * b.data, g * a.data))


def div(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    _same_shape("div", a, b)
    out = a.data / b.data

    def vjp(g):
        return g / b.data, -g * out / b.data

    return _make("div", (a, b), out, vjp)


def scale(a, c):
    a = _as_tensor(a)
    c = float(c)
    return _make("scale", (a,), a.data * np.asarray(c, dtype=a.dtype),
                 lambda g: (g * np.asarray(c, dtype=a.dtype),))


def shift(a, c):
    a = _as_tensor(a)
    return _make("shift", (a,), a.data + np.asarray(c, dtype=a.dtype),
                 lambda g: (g,))


def square(a):
    return mul(a, a)


def sum_all(a):
    a = _as_tensor(a)
    return _make("sum", (a,), np.asarray(a.data.sum(), dtype=a.dtype),
                 lambda g: (np.broadcast_to(g, a.data.shape).astype(a.dtype, copy=False),))


def mean_all(a):
    a = _as_tensor(a)
    inv = 1.0 / a.data.size
    return _make("mean", (a,), np.asarray(a.data.mean(), dtype=a.dtype),
                 lambda g: ((np.broadcast_to(g, a.data.shape) * np.asarray(inv, a.dtype)).astype(a.dtype, copy=False),))


def tanh(a):
    a = _as_tensor(a)
    t = np.tanh(a.data)
    return _make("tanh", (a,), t, lambda g: (g * (1.0 - t * t),), saved=(t,))


def leaky_relu(a, slope=0.2):
    a = _as_tensor(a)
    mask = a.data > 0
    out = np.where(mask, a.data, a.data * np.asarray(slope, a.dtype))

    def vjp(g):
        return (np.where(mask, g, g * np.asarray(slope, a.dtype)),)

    return _make("leaky_relu", (a,), out, vjp)


def maximum_scalar(a, c):
    """Elementwise max(a, c); gradient passes only where a > c."""
    a = _as_tensor(a)
    mask = a.data > c
    out = np.where(mask, a.data, np.asarray(c, a.dtype))
    return _make("maximum_scalar", (a,), out,
                 lambda g: (np.where(mask, g, np.zeros((), a.dtype)),))


def tanh_clamp(a, gamma):
    """gamma * tanh(a), nudged so |out| stays strictly below gamma.

    In saturated regions tanh rounds to exactly 1 in floating point, so the
    raw product would touch the bound.  The output is capped a few ulps
    inside; the gradient there is already ~0, so the cap changes nothing
    that matters to training.
    """
    a = _as_tensor(a)
    gamma = float(gamma)
    if gamma <= 0:
        raise ValidationError("tanh_clamp: gamma must be positive, got %r" % gamma)
    cap = 1.0 - (1e-6 if a.dtype == np.float32 else 1e-12)
    t = np.tanh(a.data)
    tc = np.clip(t, -cap, cap)
    out = np.asarray(gamma, a.dtype) * tc

    def vjp(g):
        inner = np.abs(t) < cap
        return (np.where(inner, g * np.asarray(gamma, a.dtype) * (1.0 - t * t),
                         np.zeros((), a.dtype)),)

    return _make("tanh_clamp", (a,), out, vjp, saved=(t,))


def astype(a, dtype):
    a = _as_tensor(a)
    src = a.dtype
    return _make("astype", (a,), a.data.astype(dtype),
                 lambda g: (g.astype(src),))


# ---------------------------------------------------------------------------
# shape ops

def concat(a, b, axis=0):
    a, b = _as_tensor(a), _as_tensor(b)
    na = a.data.shape[axis]
    out = np.concatenate([a.data, b.data], axis=axis)

    def vjp(g):
        ga = np.take(g, range(na), axis=axis)
        gb = np.take(g, range(na, g.shape[axis]), axis=axis)
        return ga, gb

    return _make("concat", (a, b), out, vjp)


def slice_(a, key):
    a = _as_tensor(a)
    out = a.data[key]
    if out.base is not None:
        out = out.copy()

    def vjp(g):
        full = np.zeros_like(a.data)
        full[key] = g
        return (full,)

    return _make("slice", (a,), out, vjp)


def pad(a, widths, mode="zero"):
    """Pad spatial layout ``widths = ((lo, hi), ...)`` over every dim of a.

    mode 'zero' pads with zeros, 'replicate' repeats edge values.  The
    adjoint of replicate folds pad-region cotangents back onto the edges.
    """
    a = _as_tensor(a)
    widths = tuple((int(lo), int(hi)) for lo, hi in widths)
    if len(widths) != a.ndim:
        raise ShapeError("pad: need one (lo, hi) pair per dim")
    if mode == "zero":
        out = np.pad(a.data, widths)

        def vjp(g):
            key = tuple(slice(lo, g.shape[d] - hi) for d, (lo, hi) in enumerate(widths))
            return (g[key],)

    elif mode == "replicate":
        out = np.pad(a.data, widths, mode="edge")

        def vjp(g):
            g = g.copy()
            for d, (lo, hi) in enumerate(widths):
                if lo:
                    edge = [slice(None)] * g.ndim
                    head = [slice(None)] * g.ndim
                    edge[d] = slice(lo, lo + 1)
                    head[d] = slice(0, lo)
                    g[tuple(edge)] += g[tuple(head)].sum(axis=d, keepdims=True)
                if hi:
                    edge = [slice(None)] * g.ndim
                    tail = [slice(None)] * g.ndim
                    edge[d] = slice(g.shape[d] - hi - 1, g.shape[d] - hi)
                    tail[d] = slice(g.shape[d] - hi, None)
                    g[tuple(edge)] += g[tuple(tail)].sum(axis=d, keepdims=True)
                core = [slice(None)] * g.ndim
                core[d] = slice(lo, g.shape[d] - hi)
                g = g[tuple(core)]
            return (g,)

    else:
        raise ValidationError("pad: unknown mode %r" % mode)
    return _make("pad_" + mode, (a,), out, vjp)


# ---------------------------------------------------------------------------
# convolution

def _tuple_per_dim(v, nd, name):
    if np.isscalar(v):
        v = (int(v),) * nd
    v = tuple(int(x) for x in v)
    if len(v) != nd:
        raise ShapeError("conv_nd: %s needs %d entries, got %d" % (name, nd, len(v)))
    return v


def conv_nd(x, w, b=None, stride=1, padding=0):
    """n-d correlation, channels-first, zero padding.

    x: (C_in, *S), w: (C_out, C_in, *K), b: (C_out,) or None.
    Output spatial size per dim: (S + 2p - K) // stride + 1.
    """
    x, w = _as_tensor(x), _as_tensor(w)
    nd = x.ndim - 1
    if w.ndim != nd + 2:
        raise ShapeError("conv_nd: weight rank %d incompatible with input rank %d"
                         % (w.ndim, x.ndim))
    if w.data.shape[1] != x.data.shape[0]:
        raise ShapeError("conv_nd: in-channels %d vs weight %d"
                         % (x.data.shape[0], w.data.shape[1]))
    stride = _tuple_per_dim(stride, nd, "stride")
    padding = _tuple_per_dim(padding, nd, "padding")
    ksp = w.data.shape[2:]
    for d in range(nd):
        if x.data.shape[1 + d] + 2 * padding[d] < ksp[d]:
            raise ShapeError(
                "conv_nd: spatial dim %d (%d, pad %d) smaller than kernel %d"
                % (d, x.data.shape[1 + d], padding[d], ksp[d]))
    cout = w.data.shape[0]
    has_b = b is not None
    if has_b:
        b = _as_tensor(b)
        if b.data.shape != (cout,):
            raise ShapeError("conv_nd: bias shape %s, want (%d,)" % (b.data.shape, cout))

    def _forward(xd, wd, bd):
        xp = np.pad(xd, ((0, 0),) + tuple((p, p) for p in padding))
        win = np.lib.stride_tricks.sliding_window_view(xp, ksp, axis=tuple(range(1, nd + 1)))
        sl = (slice(None),) + tuple(slice(None, None, s) for s in stride)
        win = win[sl]  # (C_in, *O, *K)
        osp = win.shape[1:1 + nd]
        perm = tuple(range(1, nd + 1)) + (0,) + tuple(range(nd + 1, 2 * nd + 1))
        vm = win.transpose(perm).reshape(int(np.prod(osp)), -1)
        out = vm @ wd.reshape(cout, -1).T
        out = out.T.reshape((cout,) + osp)
        if bd is not None:
            out = out + bd.reshape((cout,) + (1,) * nd)
        return out, vm, osp

    out, vm, osp = _forward(x.data, w.data, b.data if has_b else None)

    def vjp(g):
        gm = g.reshape(cout, -1)
        gw = (gm @ vm).reshape(w.data.shape)
        gb = g.sum(axis=tuple(range(1, nd + 1))) if has_b else None
        xp_shape = (x.data.shape[0],) + tuple(
            x.data.shape[1 + d] + 2 * padding[d] for d in range(nd))
        gx_p = np.zeros(xp_shape, dtype=x.dtype)
        for kidx in itertools.product(*(range(k) for k in ksp)):
            # contribution of kernel offset kidx to each strided input position
            contrib = np.tensordot(g, w.data[(slice(None), slice(None)) + kidx], axes=([0], [0]))
            contrib = np.moveaxis(contrib, -1, 0)  # (C_in, *O)
            sl = tuple(slice(kidx[d], kidx[d] + stride[d] * osp[d], stride[d]) for d in range(nd))
            gx_p[(slice(None),) + sl] += contrib
        key = tuple(slice(p, gx_p.shape[1 + d] - p) for d, p in enumerate(padding))
        gx = gx_p[(slice(None),) + key]
        if has_b:
            return gx, gw, gb
        return gx, gw

    parents = (x, w, b) if has_b else (x, w)
    return _make("conv_nd", parents, out, vjp)


def transposed_conv_1d_axis(x, taps, axis, stride, crop_left=None):
    """1-d transposed convolution along one axis, output length = stride * input length.

    out_full[m] = sum_j x[j] * taps[m - stride*j]; the full result is then
    cropped by crop_left (default (len(taps) - stride) // 2) so the output
    aligns with the upsampling sample positions used throughout the package.
    """
    x = _as_tensor(x)
    taps = np.asarray(taps, dtype=x.dtype)
    if taps.ndim != 1:
        raise ShapeError("transposed_conv_1d_axis: taps must be 1-d")
    stride = int(stride)
    if stride < 1:
        raise ValidationError("transposed_conv_1d_axis: stride must be >= 1")
    axis = int(axis)
    if axis < 0:
        axis += x.ndim
    T = taps.shape[0]
    if crop_left is None:
        crop_left = (T - stride) // 2
    crop_left = int(crop_left)

    xd = np.moveaxis(x.data, axis, -1)
    L = xd.shape[-1]
    out_len = stride * L
    out = np.zeros(xd.shape[:-1] + (out_len,), dtype=x.dtype)
    for r in range(T):
        off = r - crop_left
        # positions m = stride*j + off must satisfy 0 <= m < out_len
        j_lo = max(0, (-off + stride - 1) // stride)
        j_hi = min(L, (out_len - 1 - off) // stride + 1)
        if j_lo >= j_hi:
            continue
        m_lo = stride * j_lo + off
        out[..., m_lo: m_lo + stride * (j_hi - j_lo): stride] += taps[r] * xd[..., j_lo:j_hi]
    out = np.moveaxis(out, -1, axis)

    def vjp(g):
        gm = np.moveaxis(g, axis, -1)
        gx = np.zeros(xd.shape, dtype=x.dtype)
        for r in range(T):
            off = r - crop_left
            j_lo = max(0, (-off + stride - 1) // stride)
            j_hi = min(L, (out_len - 1 - off) // stride + 1)
            if j_lo >= j_hi:
                continue
            m_lo = stride * j_lo + off
            gx[..., j_lo:j_hi] += taps[r] * gm[..., m_lo: m_lo + stride * (j_hi - j_lo): stride]
        return (np.moveaxis(gx, -1, axis),)

    return _make("transposed_conv_1d", (x,), out, vjp)


def block_mean(x, factor):
    """Non-overlapping mean pooling of the spatial dims of (C, *S) by factor."""
    x = _as_tensor(x)
    factor = int(factor)
    if factor == 1:
        return x
    nd = x.ndim - 1
    S = x.data.shape[1:]
    for s in S:
        if s % factor:
            raise ShapeError("block_mean: spatial %s not divisible by %d" % (S, factor))
    shp = [x.data.shape[0]]
    for s in S:
        shp += [s // factor, factor]
    xr = x.data.reshape(shp)
    axes = tuple(2 + 2 * d for d in range(nd))
    out = xr.mean(axis=axes)
    inv = 1.0 / factor ** nd

    def vjp(g):
        ge = g * np.asarray(inv, x.dtype)
        for d in range(nd):
            ge = np.repeat(ge, factor, axis=1 + d)
        return (ge,)

    return _make("block_mean", (x,), out, vjp)


# ---------------------------------------------------------------------------
# linear interpolation (gather) with adjoints to both volume and coordinates

def _interp_core(vol, coords):
    """Shared gather kernel: vol (C, *S), coords (n, *Q) in voxel units.

    Returns (out, i0 list, frac list).  Out-of-domain coordinates use border
    clamp.
    """
    n = coords.shape[0]
    S = vol.shape[1:]
    if len(S) != n:
        raise ShapeError("sample_linear: %d coord channels for %d-d volume" % (n, len(S)))
    if any(s < 2 for s in S):
        raise ShapeError("sample_linear: spatial dims must be >= 2, got %s" % (S,))
    i0, frac = [], []
    for d in range(n):
        c = np.clip(coords[d], 0.0, S[d] - 1.0)
        idx = np.floor(c)
        idx = np.minimum(idx, S[d] - 2).astype(np.int64) if S[d] > 1 else np.zeros_like(c, np.int64)
        i0.append(idx)
        frac.append((c - idx).astype(vol.dtype))
    strides = np.ones(n, dtype=np.int64)
    for d in range(n - 2, -1, -1):
        strides[d] = strides[d + 1] * S[d + 1]
    flat = vol.reshape(vol.shape[0], -1)
    out = None
    for corner in itertools.product((0, 1), repeat=n):
        w = None
        idx = None
        for d, bit in enumerate(corner):
            wd = frac[d] if bit else (1.0 - frac[d])
            w = wd if w is None else w * wd
            t = (i0[d] + bit) * strides[d]
            idx = t if idx is None else idx + t
        vals = flat[:, idx]
        out = w * vals if out is None else out + w * vals
    return out, i0, frac, strides


def _interp_vjp_vol(vol_shape, dtype, coords, g):
    n = coords.shape[0]
    S = vol_shape[1:]
    C = vol_shape[0]
    NS = int(np.prod(S))
    i0, frac = [], []
    for d in range(n):
        c = np.clip(coords[d], 0.0, S[d] - 1.0)
        idx = np.minimum(np.floor(c), S[d] - 2).astype(np.int64)
        i0.append(idx)
        frac.append(c - idx)
    strides = np.ones(n, dtype=np.int64)
    for d in range(n - 2, -1, -1):
        strides[d] = strides[d + 1] * S[d + 1]
    acc = np.zeros(C * NS, dtype=np.float64)
    goff = (np.arange(C, dtype=np.int64) * NS)[:, None]
    gm = g.reshape(C, -1)
    for corner in itertools.product((0, 1), repeat=n):
        w = None
        idx = None
        for d, bit in enumerate(corner):
            wd = frac[d] if bit else (1.0 - frac[d])
            w = wd if w is None else w * wd
            t = (i0[d] + bit) * strides[d]
            idx = t if idx is None else idx + t
        flat_idx = (goff + idx.reshape(1, -1)).ravel()
        weights = (w.reshape(1, -1) * gm).ravel()
        acc += np.bincount(flat_idx, weights=weights, minlength=C * NS)
    return acc.reshape(vol_shape).astype(dtype)


def _interp_vjp_coords(vol, coords, g):
    n = coords.shape[0]
    S = vol.shape[1:]
    i0, frac = [], []
    inside = []
    for d in range(n):
        c = np.clip(coords[d], 0.0, S[d] - 1.0)
        idx = np.minimum(np.floor(c), S[d] - 2).astype(np.int64)
        i0.append(idx)
        frac.append(c - idx)
        inside.append((coords[d] > 0.0) & (coords[d] < S[d] - 1.0))
    strides = np.ones(n, dtype=np.int64)
    for d in range(n - 2, -1, -1):
        strides[d] = strides[d + 1] * S[d + 1]
    flat = vol.reshape(vol.shape[0], -1)
    out = np.zeros((n,) + coords.shape[1:], dtype=vol.dtype)
    for corner in itertools.product((0, 1), repeat=n):
        idx = None
        for d, bit in enumerate(corner):
            t = (i0[d] + bit) * strides[d]
            idx = t if idx is None else idx + t
        gv = np.einsum("c...,c...->...", g, flat[:, idx])
        for d in range(n):
            w = None
            for e, bit in enumerate(corner):
                if e == d:
                    continue
                we = frac[e] if bit else (1.0 - frac[e])
                w = we if w is None else w * we
            sgn = 1.0 if corner[d] else -1.0
            contrib = sgn * gv if w is None else sgn * w * gv
            out[d] += contrib
    for d in range(n):
        out[d] *= inside[d]
    return out


def sample_linear(vol, coords):
    """Multilinear interpolation of vol (C, *S) at coords (n, *Q), border clamp.

    Differentiable in both the volume values and the coordinates.
    """
    vol = _as_tensor(vol)
    coords = _as_tensor(coords)
    out, _, _, _ = _interp_core(vol.data, coords.data)
    out = out.reshape((vol.data.shape[0],) + coords.data.shape[1:])

    def vjp(g):
        gv = _interp_vjp_vol(vol.data.shape, vol.dtype, coords.data, g) \
            if vol.requires_grad else None
        gc = _interp_vjp_coords(vol.data, coords.data, g) \
            if coords.requires_grad else None
        return gv, gc

    return _make("sample_linear", (vol, coords), out, vjp)


# ---------------------------------------------------------------------------
# losses

def _box_filter(t, window):
    """Sum over a centered window per axis, replicate-padded (single channel)."""
    nd = t.ndim - 1
    half = window // 2
    widths = ((0, 0),) + ((half, half),) * nd
    out = pad(t, widths, mode="replicate")
    for d in range(nd):
        kshape = [1, 1] + [1] * nd
        kshape[2 + d] = window
        ones = np.ones(kshape, dtype=t.dtype)
        out = conv_nd(out, Tensor(ones), stride=1, padding=0)
    return out


def lncc_loss(a, b, window=7, eps=1e-5):
    """Negative mean of squared local normalized cross-correlation.

    a, b: single-channel volumes (1, *S).  Windows are ``window`` wide per
    axis with replicate padding; variances are floored at ``eps`` so constant
    windows contribute zero correlation.
    """
    a, b = _as_tensor(a), _as_tensor(b)
    _same_shape("lncc_loss", a, b)
    if a.data.shape[0] != 1:
        raise ShapeError("lncc_loss: expects single-channel volumes, got %d channels"
                         % a.data.shape[0])
    if window % 2 != 1 or window < 1:
        raise ValidationError("lncc_loss: window must be odd and positive")
    nw = float(window ** (a.ndim - 1))
    mean_a = scale(_box_filter(a, window), 1.0 / nw)
    mean_b = scale(_box_filter(b, window), 1.0 / nw)
    mean_aa = scale(_box_filter(mul(a, a), window), 1.0 / nw)
    mean_bb = scale(_box_filter(mul(b, b), window), 1.0 / nw)
    mean_ab = scale(_box_filter(mul(a, b), window), 1.0 / nw)
    cross = sub(mean_ab, mul(mean_a, mean_b))
    var_a = maximum_scalar(sub(mean_aa, mul(mean_a, mean_a)), eps)
    var_b = maximum_scalar(sub(mean_bb, mul(mean_b, mean_b)), eps)
    cc2 = div(mul(cross, cross), mul(var_a, var_b))
    return scale(mean_all(cc2), -1.0)


def grad_l2_penalty(d):
    """Forward-difference smoothness penalty on a displacement field (n, *S).

    Sum over channels and axes of the mean squared spatial forward
    difference; a linear ramp of slope ``a`` along one axis in one channel
    scores a**2.
    """
    d = _as_tensor(d)
    nd = d.ndim - 1
    nch = d.data.shape[0]
    total = None
    for ax in range(nd):
        hi = [slice(None)] * d.ndim
        lo = [slice(None)] * d.ndim
        hi[1 + ax] = slice(1, None)
        lo[1 + ax] = slice(None, -1)
        diff = sub(slice_(d, tuple(hi)), slice_(d, tuple(lo)))
        term = scale(mean_all(mul(diff, diff)), float(nch))
        total = term if total is None else add(total, term)
    return total


# ---------------------------------------------------------------------------
# backward pass and gradient checking

def backward(loss):
    """Reverse sweep from a scalar loss; leaf .grad accumulates, tape is consumed."""
    if not isinstance(loss, Tensor):
        raise ValidationError("backward: expected a Tensor")
    if loss.data.size != 1:
        raise ValidationError("backward: loss must be scalar, got shape %s"
                              % (loss.data.shape,))
    if loss.node is not None and loss.node.consumed:
        raise ValidationError("backward: tape already consumed")

    topo = []
    seen = set()
    stack = [(loss, False)]
    while stack:
        t, expanded = stack.pop()
        if expanded:
            topo.append(t)
            continue
        if id(t) in seen:
            continue
        seen.add(id(t))
        stack.append((t, True))
        if t.node is not None:
            for p in t.node.parents:
                if id(p) not in seen and p.requires_grad:
                    stack.append((p, False))

    grads = {id(loss): np.ones_like(loss.data)}
    for t in reversed(topo):
        g = grads.pop(id(t), None)
        if g is None:
            continue
        if t.node is not None:
            partials = t.node.vjp(g)
            for p, pg in zip(t.node.parents, partials):
                if pg is None or not p.requires_grad:
                    continue
                if id(p) in grads:
                    grads[id(p)] = grads[id(p)] + pg
                else:
                    grads[id(p)] = pg
            t.node.consumed = True
            t.node.parents = ()
            t.node.saved = ()
            t.node.vjp = None
        elif t.requires_grad:
            if t.grad is None:
                t.grad = np.zeros_like(t.data)
            t.grad = t.grad + g


def finite_diff_check(fn, point, eps=1e-5, coords=None):
    """Compare reverse-mode and central-difference gradients of scalar fn.

    Returns the max relative error over checked coordinates,
    |g_ad - g_fd| / (|g_ad| + |g_fd| + 1e-12); coordinates where both
    gradients are negligible relative to the overall gradient scale are
    skipped.  ``coords`` restricts the check to a list of flat indices.
    """
    base = np.asarray(point.data if isinstance(point, Tensor) else point, dtype=np.float64)
    leaf = Tensor(base.copy(), requires_grad=True)
    out = fn(leaf)
    backward(out)
    g_ad = leaf.grad.reshape(-1).copy()

    flat = base.reshape(-1)
    if coords is None:
        coords = range(flat.size)
    g_fd = {}
    for i in coords:
        saved = flat[i]
        flat[i] = saved + eps
        hi = float(fn(Tensor(base.copy())).data)
        flat[i] = saved - eps
        lo = float(fn(Tensor(base.copy())).data)
        flat[i] = saved
        g_fd[i] = (hi - lo) / (2.0 * eps)

    fd_arr = np.array([g_fd[i] for i in g_fd])
    ad_arr = np.array([g_ad[i] for i in g_fd])
    scale_ref = max(np.abs(fd_arr).max(initial=0.0), np.abs(ad_arr).max(initial=0.0), 1e-12)
    err = 0.0
    for a, f in zip(ad_arr, fd_arr):
        if abs(a) < 1e-9 * scale_ref and abs(f) < 1e-9 * scale_ref:
            continue
        err = max(err, abs(a - f) / (abs(a) + abs(f) + 1e-12))
    return err
