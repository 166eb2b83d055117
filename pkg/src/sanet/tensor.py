"""Rank-4 feature maps (N, C, H, W) and the few structural ops built on them.

Feature maps are plain ``numpy`` arrays. Model code runs in float32; the
verification paths pass float64 arrays through the same functions, so every
op here keeps the dtype of its input.
"""

import numpy as np

IGNORE = 255


class ShapeError(ValueError):
    pass


def check_tensor4(x, name="x"):
    x = np.asarray(x)
    if x.ndim != 4 or min(x.shape) < 1:
        raise ShapeError(f"{name} must be a non-empty N x C x H x W array, got shape {x.shape}")
    if x.dtype.kind != "f":
        raise ShapeError(f"{name} must hold floats, got {x.dtype}")
    return x


def tensor4(data, dtype=np.float32):
    """Coerce ``data`` into a contiguous 4-D float array."""
    return check_tensor4(np.ascontiguousarray(data, dtype=dtype))


_BINARY = {"add": np.add, "sub": np.subtract, "mul": np.multiply}
_SCALAR = {"scalar_add": np.add, "scalar_mul": np.multiply}


def elementwise(kind, a, b):
    a = check_tensor4(a, "a")
    if kind in _BINARY:
        b = check_tensor4(b, "b")
        if a.shape != b.shape:
            raise ShapeError(f"{kind}: shape mismatch {a.shape} vs {b.shape}")
        return _BINARY[kind](a, b)
    if kind in _SCALAR:
        if np.ndim(b) != 0:
            raise ShapeError(f"{kind} expects a scalar operand")
        return _SCALAR[kind](a, a.dtype.type(b))
    raise ValueError(f"unknown elementwise kind {kind!r}")


def concat_channels(parts):
    if not parts:
        raise ShapeError("concat_channels needs at least one tensor")
    parts = [check_tensor4(p, f"parts[{i}]") for i, p in enumerate(parts)]
    n, _, h, w = parts[0].shape
    for i, p in enumerate(parts[1:], 1):
        if (p.shape[0], p.shape[2], p.shape[3]) != (n, h, w):
            raise ShapeError(f"concat_channels: part {i} has shape {p.shape}, expected (n, h, w) = {(n, h, w)}")
    return np.concatenate(parts, axis=1)


def softmax_channels(x):
    x = check_tensor4(x)
    z = x - x.max(axis=1, keepdims=True)
    np.exp(z, out=z)
    z /= z.sum(axis=1, keepdims=True)
    return z


def argmax_channels(x):
    """Per-pixel winning channel as an (H, W) int32 class map.

    ``np.argmax`` returns the first maximum, so ties go to the lowest channel.
    """
    x = check_tensor4(x)
    if x.shape[0] != 1:
        raise ShapeError(f"argmax_channels expects batch size 1, got {x.shape[0]}")
    return np.argmax(x[0], axis=0).astype(np.int32)


def check_class_map(labels, num_classes=None, ignore=IGNORE, name="labels"):
    labels = np.asarray(labels)
    if labels.ndim != 2 or labels.dtype.kind not in "iu":
        raise ShapeError(f"{name} must be a 2-D integer grid, got {labels.dtype} {labels.shape}")
    if (labels < 0).any():
        raise ValueError(f"{name} contains negative entries")
    if num_classes is not None:
        bad = (labels >= num_classes) & (labels != ignore)
        if bad.any():
            raise ValueError(f"{name} has class {int(labels[bad].max())} >= num_classes={num_classes}")
    return labels
