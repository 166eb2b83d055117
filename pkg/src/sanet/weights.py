"""Weight stores, the STF container format, and deterministic initialisation.

A weight store is a plain ``dict`` mapping dotted tensor names
(``"l4.block0.conv1.w"``) to float32 arrays.

STF layout, all integers little-endian::

    b"STNS"  u32 version (=1)  u32 tensor_count
    per tensor, in lexicographic name order:
        u16 name_len  name (UTF-8)  u8 dtype (0 = f32)  u8 ndim  u32 dims[ndim]
        payload: prod(dims) little-endian f32 values
"""

import struct

import numpy as np

MAGIC = b"STNS"
VERSION = 1
DTYPE_F32 = 0


class StfError(ValueError):
    pass


class TruncatedFileError(StfError):
    pass


class BadMagicError(StfError):
    pass


class UnsupportedVersionError(StfError):
    pass


class UnsupportedDtypeError(StfError):
    pass


class DuplicateNameError(StfError):
    pass


class LengthMismatchError(StfError):
    pass


def validate_store(store):
    for name, arr in store.items():
        if not isinstance(name, str) or not name:
            raise StfError(f"tensor names must be non-empty strings, got {name!r}")
        arr = np.asarray(arr)
        if arr.dtype != np.float32:
            raise UnsupportedDtypeError(f"tensor {name!r} has dtype {arr.dtype}; only float32 is stored")
        if arr.ndim > 255 or len(name.encode("utf-8")) > 0xFFFF:
            raise StfError(f"tensor {name!r} cannot be encoded (rank {arr.ndim})")


def encode_stf(store) -> bytes:
    validate_store(store)
    chunks = [MAGIC, struct.pack("<II", VERSION, len(store))]
    for name in sorted(store):
        arr = np.asarray(store[name])
        raw = name.encode("utf-8")
        chunks.append(struct.pack("<H", len(raw)) + raw)
        chunks.append(struct.pack(f"<BB{arr.ndim}I", DTYPE_F32, arr.ndim, *arr.shape))
        chunks.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    return b"".join(chunks)


def decode_stf(data: bytes):
    view = memoryview(data)
    pos = 0

    def take(n, what):
        nonlocal pos
        if pos + n > len(view):
            raise TruncatedFileError(f"file ends inside {what} (need {n} bytes at offset {pos}, have {len(view) - pos})")
        chunk = view[pos:pos + n]
        pos += n
        return chunk

    if bytes(take(4, "magic")) != MAGIC:
        raise BadMagicError(f"bad magic {bytes(view[:4])!r}, expected {MAGIC!r}")
    version, count = struct.unpack("<II", take(8, "header"))
    if version != VERSION:
        raise UnsupportedVersionError(f"unsupported STF version {version}")
    store = {}
    for _ in range(count):
        (name_len,) = struct.unpack("<H", take(2, "name length"))
        try:
            name = bytes(take(name_len, "name")).decode("utf-8")
        except UnicodeDecodeError as exc:
            raise StfError(f"tensor name at offset {pos - name_len} is not UTF-8") from exc
        if not name:
            raise StfError("empty tensor name")
        dtype, ndim = struct.unpack("<BB", take(2, "tensor header"))
        if dtype != DTYPE_F32:
            raise UnsupportedDtypeError(f"tensor {name!r} has unknown dtype code {dtype}")
        dims = struct.unpack(f"<{ndim}I", take(4 * ndim, "dims"))
        if name in store:
            raise DuplicateNameError(f"tensor {name!r} appears twice")
        size = int(np.prod(dims, dtype=np.int64))
        payload = take(4 * size, f"payload of {name!r}")
        store[name] = np.frombuffer(payload, dtype="<f4").astype(np.float32).reshape(dims)
    if pos != len(view):
        raise LengthMismatchError(f"{len(view) - pos} trailing bytes after the last tensor")
    return store


def write_stf(store, path):
    data = encode_stf(store)
    with open(path, "wb") as fh:
        fh.write(data)


def read_stf(path):
    with open(path, "rb") as fh:
        return decode_stf(fh.read())


def count_params(store, prefix=""):
    return sum(int(np.asarray(v).size) for k, v in store.items() if k.startswith(prefix))


# --------------------------------------------------------------------------
# deterministic initialisation

MASK64 = (1 << 64) - 1
GOLDEN_GAMMA = 0x9E3779B97F4A7C15
FNV_OFFSET = 0xCBF29CE484222325
FNV_PRIME = 0x100000001B3


def fnv1a64(text: str) -> int:
    h = FNV_OFFSET
    for byte in text.encode("utf-8"):
        h = ((h ^ byte) * FNV_PRIME) & MASK64
    return h


def _finalise(z):
    # works for python ints (masked) and uint64 arrays (wrapping)
    if isinstance(z, np.ndarray):
        z = (z ^ (z >> np.uint64(30))) * np.uint64(0xBF58476D1CE4E5B9)
        z = (z ^ (z >> np.uint64(27))) * np.uint64(0x94D049BB133111EB)
        return z ^ (z >> np.uint64(31))
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & MASK64
    return z ^ (z >> 31)


def splitmix64_mix(x: int) -> int:
    """First output of a SplitMix64 generator seeded with ``x``."""
    return _finalise((x + GOLDEN_GAMMA) & MASK64)


def splitmix64_stream(seed: int, n: int) -> np.ndarray:
    """The first ``n`` outputs of SplitMix64 seeded with ``seed``, as uint64."""
    k = np.arange(1, n + 1, dtype=np.uint64)
    with np.errstate(over="ignore"):
        return _finalise(k * np.uint64(GOLDEN_GAMMA) + np.uint64(seed & MASK64))


def uniform_stream(seed: int, n: int) -> np.ndarray:
    """Doubles in [0, 1) built from the top 53 bits of each SplitMix64 output."""
    return (splitmix64_stream(seed, n) >> np.uint64(11)).astype(np.float64) * 2.0 ** -53


def tensor_seed(seed: int, name: str) -> int:
    return splitmix64_mix((seed & MASK64) ^ fnv1a64(name))


def kaiming_bound(shape):
    fan_in = shape[1] * shape[2] * shape[3]
    return float(np.sqrt(6.0 / fan_in))


def init_tensor(name, shape, seed):
    kind = name.rsplit(".", 1)[-1]
    if name.endswith(".w") and len(shape) == 4:
        bound = kaiming_bound(shape)
        u = uniform_stream(tensor_seed(seed, name), int(np.prod(shape)))
        return (bound * (2.0 * u - 1.0)).astype(np.float32).reshape(shape)
    if kind in ("gamma", "var"):
        return np.ones(shape, np.float32)
    if kind in ("b", "beta", "mean"):
        return np.zeros(shape, np.float32)
    raise ValueError(f"no initialisation rule for tensor {name!r}")


def init_weights(cfg, seed=0):
    """Deterministic weights for every tensor ``cfg`` requires."""
    from .model import param_shapes

    return {name: init_tensor(name, shape, seed) for name, shape in param_shapes(cfg).items()}
