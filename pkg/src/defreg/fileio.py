"""Flat-file volume, field, and table IO.

A stored volume is a pair of files: <name>.json with the header and
<name>.bin with the raw little-endian row-major voxel data.  The header is
{"shape": [...], "channels": C, "dtype": "f32"|"u16", "spacing": [...]};
data in the blob is laid out channels-first.  Fields are volumes whose
channel count equals their dimensionality.  This keeps every artifact
readable with a couple of lines in any language; no imaging formats.
"""

import json
import os

import numpy as np

from .errors import ValidationError

_DTYPES = {"f32": "<f4", "f64": "<f8", "u16": "<u2"}
_NAMES = {np.dtype(np.float32): "f32", np.dtype(np.float64): "f64",
          np.dtype(np.uint16): "u16"}


def _base(path):
    for suffix in (".json", ".bin"):
        if path.endswith(suffix):
            return path[:-len(suffix)]
    return path


def write_volume(path, data, spacing=None):
    """Write (C, *S) data as <path>.json + <path>.bin."""
    data = np.asarray(data)
    if data.ndim < 2:
        raise ValidationError("write_volume: data must be (C, *spatial)")
    dtype = np.dtype(data.dtype)
    if dtype not in _NAMES:
        raise ValidationError("write_volume: unsupported dtype %s" % dtype)
    name = _NAMES[dtype]
    base = _base(path)
    header = {
        "shape": list(data.shape[1:]),
        "channels": int(data.shape[0]),
        "dtype": name,
        "spacing": list(spacing) if spacing is not None
                   else [1.0] * (data.ndim - 1),
    }
    with open(base + ".json", "w") as f:
        json.dump(header, f)
    with open(base + ".bin", "wb") as f:
        f.write(np.ascontiguousarray(data).astype(_DTYPES[name]).tobytes())


def read_volume(path):
    """Read a volume written by write_volume; returns (data, header)."""
    base = _base(path)
    try:
        with open(base + ".json") as f:
            header = json.load(f)
    except (OSError, json.JSONDecodeError) as exc:
        raise ValidationError("read_volume: cannot parse %s.json (%s)"
                              % (base, exc)) from exc
    for key in ("shape", "channels", "dtype"):
        if key not in header:
            raise ValidationError("read_volume: header missing %r" % key)
    if header["dtype"] not in _DTYPES:
        raise ValidationError("read_volume: unknown dtype %r" % header["dtype"])
    shape = tuple(int(s) for s in header["shape"])
    channels = int(header["channels"])
    dt = np.dtype(_DTYPES[header["dtype"]])
    expect = channels * int(np.prod(shape)) * dt.itemsize
    actual = os.path.getsize(base + ".bin")
    if actual != expect:
        raise ValidationError(
            "read_volume: %s.bin is %d bytes, header implies %d"
            % (base, actual, expect))
    with open(base + ".bin", "rb") as f:
        data = np.frombuffer(f.read(), dtype=dt).reshape((channels,) + shape)
    return np.ascontiguousarray(data), header


def write_field(path, d, spacing=None):
    """Write a displacement field (n, *S); channel count must equal rank."""
    d = np.asarray(d)
    if d.ndim - 1 != d.shape[0]:
        raise ValidationError("write_field: field must be (n, *spatial), got %s"
                              % (d.shape,))
    write_volume(path, d, spacing)


def read_field(path):
    """Read a displacement field; validates channels == rank."""
    data, header = read_volume(path)
    if data.ndim - 1 != data.shape[0]:
        raise ValidationError("read_field: channels %d do not match rank %d"
                              % (data.shape[0], data.ndim - 1))
    return data, header


def write_labels(path, labels, spacing=None):
    """Write an integer label map (*S) as a one-channel u16 volume."""
    labels = np.asarray(labels)
    if labels.min() < 0 or labels.max() > np.iinfo(np.uint16).max:
        raise ValidationError("write_labels: labels out of u16 range")
    write_volume(path, labels[None].astype(np.uint16), spacing)


def read_labels(path):
    data, header = read_volume(path)
    if header["dtype"] != "u16" or data.shape[0] != 1:
        raise ValidationError("read_labels: expected one-channel u16 volume")
    return data[0], header


def write_slice_pgm(path, image):
    """8-bit PGM dump of a 2-d array (or the middle slice of a 3-d one)."""
    img = np.asarray(image, dtype=np.float64)
    if img.ndim == 3:
        img = img[img.shape[0] // 2]
    if img.ndim != 2:
        raise ValidationError("write_slice_pgm: need a 2-d or 3-d array")
    lo, hi = float(img.min()), float(img.max())
    scale = 255.0 / (hi - lo) if hi > lo else 0.0
    quant = np.clip((img - lo) * scale, 0, 255).astype(np.uint8)
    with open(path, "wb") as f:
        f.write(b"P5\n%d %d\n255\n" % (img.shape[1], img.shape[0]))
        f.write(quant.tobytes())


def write_csv(path, header, rows):
    """Plain comma-separated table; header is a list of column names."""
    with open(path, "w") as f:
        f.write(",".join(str(h) for h in header) + "\n")
        for row in rows:
            f.write(",".join(repr(v) if isinstance(v, float) else str(v)
                             for v in row) + "\n")
