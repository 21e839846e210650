"""Feature encoder and per-level control-grid predictors.

The encoder extracts a pyramid of feature volumes, one per resolution level,
each level computed from the previous one by a strided convolution.  Because
feature extraction is a pure function of (weights, image), running it once
per image and reusing the results for both registration directions is what
makes the registration pipeline exactly symmetric in its arguments.

Each level k also owns a small predictor network that maps a pair of warped
feature volumes to a control grid of spline displacement values.  The final
activation is a scaled tanh clamp, so every predicted grid satisfies the
invertibility bound of the splines module by construction, no matter what
the weights are.
"""

import json
import os
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import ShapeError, ValidationError
from .splines import BoundTable, ControlGrid
from .tensor import Parameter, _as_tensor


@dataclass(frozen=True)
class EncoderConfig:
    """Architecture constants for the encoder and predictors.

    channels[k] is the feature width at level k and must be non-decreasing.
    The defaults are a desk-scale configuration chosen to train in minutes
    on a CPU, not a claim about any particular published network.
    """

    num_levels: int = 3
    channels: tuple = (8, 16, 32)
    kernel_size: int = 3
    res_blocks: int = 1

    def __post_init__(self):
        if self.num_levels < 2:
            raise ValidationError("EncoderConfig: num_levels must be >= 2")
        if len(self.channels) != self.num_levels:
            raise ValidationError("EncoderConfig: need one channel count per level")
        if any(b > a for a, b in zip(self.channels[1:], self.channels[:-1])):
            raise ValidationError("EncoderConfig: channels must be non-decreasing")
        if self.kernel_size % 2 != 1:
            raise ValidationError("EncoderConfig: kernel size must be odd")
        if self.res_blocks < 0:
            raise ValidationError("EncoderConfig: res_blocks must be >= 0")


def _init_conv(rng, name, c_in, c_out, ks, n, dtype, zero=False):
    shape = (c_out, c_in) + (ks,) * n
    if zero:
        w = np.zeros(shape, dtype=np.float64)
    else:
        fan_in = c_in * ks ** n
        limit = 1.0 / np.sqrt(fan_in)
        w = rng.uniform(-limit, limit, size=shape)
    return (Parameter(w.astype(dtype), name + ".w"),
            Parameter(np.zeros(c_out, dtype=dtype), name + ".b"))


class ModelWeights:
    """Flat named parameter store for the encoder and all predictors.

    Also carries the clamp-bound table for the model's dimensionality and
    level count.  Parameters are held in insertion order, which fixes the
    checkpoint blob layout.
    """

    def __init__(self, config=None, n=2, in_channels=1, seed=0, dtype=np.float32):
        self.config = config if config is not None else EncoderConfig()
        self.n = int(n)
        self.in_channels = int(in_channels)
        self.dtype = np.dtype(dtype)
        if self.n not in (1, 2, 3):
            raise ValidationError("ModelWeights: n must be 1, 2 or 3")
        self.bounds = BoundTable(self.n, self.config.num_levels - 1)
        self.params = {}
        rng = np.random.default_rng(seed)
        ks = self.config.kernel_size
        prev = self.in_channels
        for k in range(self.config.num_levels):
            ch = self.config.channels[k]
            self._add(rng, "enc%d.in" % k, prev, ch, ks, dtype)
            for r in range(self.config.res_blocks):
                self._add(rng, "enc%d.res%da" % (k, r), ch, ch, ks, dtype)
                self._add(rng, "enc%d.res%db" % (k, r), ch, ch, ks, dtype)
            prev = ch
        for k in range(self.config.num_levels):
            ch = self.config.channels[k]
            self._add(rng, "pred%d.mix" % k, 2 * ch, ch, ks, dtype)
            self._add(rng, "pred%d.out" % k, ch, self.n, ks, dtype, zero=True)

    def _add(self, rng, name, c_in, c_out, ks, dtype, zero=False):
        w, b = _init_conv(rng, name, c_in, c_out, ks, self.n, dtype, zero)
        self.params[w.name] = w
        self.params[b.name] = b

    def parameters(self):
        return list(self.params.values())

    def zero_like(self):
        """Copy with every parameter set to zero (identity-output model)."""
        other = ModelWeights(self.config, self.n, self.in_channels, 0, self.dtype)
        for p in other.params.values():
            p.data = np.zeros_like(p.data)
        return other

    def conv(self, name):
        return self.params[name + ".w"], self.params[name + ".b"]


def extract_features(weights, x):
    """Feature pyramid h^(0..K-1)(x) for image x of shape (C, *S).

    Level k output has spatial extent S / 2^k; the spatial dims of x must be
    divisible by 2^(K-1).
    """
    xt = _as_tensor(x)
    cfg = weights.config
    K = cfg.num_levels
    spatial = xt.data.shape[1:]
    if len(spatial) != weights.n:
        raise ShapeError("extract_features: expected %d-d image, got shape %s"
                         % (weights.n, xt.data.shape))
    if xt.data.shape[0] != weights.in_channels:
        raise ShapeError("extract_features: expected %d input channels"
                         % weights.in_channels)
    div = 2 ** (K - 1)
    for s in spatial:
        if s % div != 0:
            raise ShapeError("extract_features: spatial dims %s not divisible by %d"
                             % (spatial, div))
    pad = (cfg.kernel_size - 1) // 2
    feats = []
    y = xt
    for k in range(K):
        w, b = weights.conv("enc%d.in" % k)
        y = T.leaky_relu(T.conv_nd(y, w, b, stride=1 if k == 0 else 2, padding=pad))
        for r in range(cfg.res_blocks):
            wa, ba = weights.conv("enc%d.res%da" % (k, r))
            wb, bb = weights.conv("enc%d.res%db" % (k, r))
            t = T.conv_nd(T.leaky_relu(T.conv_nd(y, wa, ba, padding=pad)),
                          wb, bb, padding=pad)
            y = T.leaky_relu(T.add(y, t))
        feats.append(y)
    return feats


def predict_control_grid(weights, k, z1, z2):
    """Control grid of the level-k update from two warped feature volumes.

    The features are recombined as (z1 - z2, z1 + z2) before the convolutions
    so the network sees an order-aware and an order-invariant channel group;
    the output is clamped to the level's invertibility bound.  Note the
    predictor itself has no antisymmetry in its arguments; the registration
    recursion creates the symmetry, not this function.
    """
    z1t, z2t = _as_tensor(z1), _as_tensor(z2)
    if z1t.data.shape != z2t.data.shape:
        raise ShapeError("predict_control_grid: feature shapes differ: %s vs %s"
                         % (z1t.data.shape, z2t.data.shape))
    cfg = weights.config
    if z1t.data.shape[0] != cfg.channels[k]:
        raise ShapeError("predict_control_grid: expected %d channels at level %d"
                         % (cfg.channels[k], k))
    pad = (cfg.kernel_size - 1) // 2
    inp = T.concat(T.sub(z1t, z2t), T.add(z1t, z2t), axis=0)
    wm, bm = weights.conv("pred%d.mix" % k)
    wo, bo = weights.conv("pred%d.out" % k)
    y = T.conv_nd(T.leaky_relu(T.conv_nd(inp, wm, bm, padding=pad)), wo, bo,
                  padding=pad)
    vals = T.tanh_clamp(y, weights.bounds.gamma[k])
    return ControlGrid(level=k, values=vals, origin=(0,) * weights.n)


# ---------------------------------------------------------------------------
# checkpoints: <base>.json manifest + <base>.bin little-endian f32 blob

_CKPT_FORMAT = "defreg-weights-1"


def _base_path(path):
    for suffix in (".json", ".bin"):
        if path.endswith(suffix):
            return path[:-len(suffix)]
    return path


def save_weights(weights, path):
    """Write <path>.json (manifest) and <path>.bin (f32 parameter blob)."""
    base = _base_path(path)
    manifest = {
        "format": _CKPT_FORMAT,
        "n": weights.n,
        "in_channels": weights.in_channels,
        "config": {
            "num_levels": weights.config.num_levels,
            "channels": list(weights.config.channels),
            "kernel_size": weights.config.kernel_size,
            "res_blocks": weights.config.res_blocks,
        },
        "tensors": [{"name": p.name, "shape": list(p.data.shape)}
                    for p in weights.parameters()],
    }
    with open(base + ".json", "w") as f:
        json.dump(manifest, f, indent=1)
    with open(base + ".bin", "wb") as f:
        for p in weights.parameters():
            f.write(np.ascontiguousarray(p.data, dtype="<f4").tobytes())


def load_weights(path, dtype=np.float32):
    """Rebuild ModelWeights from a checkpoint written by save_weights."""
    base = _base_path(path)
    with open(base + ".json") as f:
        manifest = json.load(f)
    if manifest.get("format") != _CKPT_FORMAT:
        raise ValidationError("unrecognized checkpoint format in %s.json" % base)
    cfg = EncoderConfig(
        num_levels=manifest["config"]["num_levels"],
        channels=tuple(manifest["config"]["channels"]),
        kernel_size=manifest["config"]["kernel_size"],
        res_blocks=manifest["config"]["res_blocks"],
    )
    weights = ModelWeights(cfg, manifest["n"], manifest["in_channels"],
                           seed=0, dtype=dtype)
    names = [p.name for p in weights.parameters()]
    listed = [t["name"] for t in manifest["tensors"]]
    if names != listed:
        raise ValidationError("checkpoint tensor list does not match the "
                              "declared architecture")
    blob_size = os.path.getsize(base + ".bin")
    expect = sum(int(np.prod(t["shape"])) for t in manifest["tensors"]) * 4
    if blob_size != expect:
        raise ValidationError("checkpoint blob is %d bytes, manifest implies %d"
                              % (blob_size, expect))
    with open(base + ".bin", "rb") as f:
        for p, t in zip(weights.parameters(), manifest["tensors"]):
            shape = tuple(t["shape"])
            if shape != p.data.shape:
                raise ValidationError("checkpoint shape %s for %s, expected %s"
                                      % (shape, p.name, p.data.shape))
            count = int(np.prod(shape))
            raw = np.frombuffer(f.read(count * 4), dtype="<f4", count=count)
            p.data = raw.reshape(shape).astype(dtype)
    return weights
