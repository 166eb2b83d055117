"""Binary netpbm I/O (P5/P6, 8-bit), palettes, normalisation and colouring."""

import numpy as np

from .tensor import IGNORE, ShapeError, check_class_map, check_tensor4

IMAGENET_MEAN = (0.485, 0.456, 0.406)
IMAGENET_STD = (0.229, 0.224, 0.225)

# Cityscapes train-id colours; classes past 19 get generated colours
CITYSCAPES_PALETTE = [
    (128, 64, 128), (244, 35, 232), (70, 70, 70), (102, 102, 156), (190, 153, 153),
    (153, 153, 153), (250, 170, 30), (220, 220, 0), (107, 142, 35), (152, 251, 152),
    (70, 130, 180), (220, 20, 60), (255, 0, 0), (0, 0, 142), (0, 0, 70),
    (0, 60, 100), (0, 80, 100), (0, 0, 230), (119, 11, 32),
]


class ImageFormatError(ValueError):
    pass


def _parse_header(data):
    """Return (magic, width, height, maxval, payload offset)."""
    fields, pos = [], 0
    while len(fields) < 4:
        while pos < len(data) and data[pos:pos + 1].isspace():
            pos += 1
        if pos < len(data) and data[pos:pos + 1] == b"#":
            while pos < len(data) and data[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos:pos + 1].isspace() and data[pos:pos + 1] != b"#":
            pos += 1
        if start == pos:
            raise ImageFormatError("truncated netpbm header")
        fields.append(data[start:pos])
    if pos >= len(data) or not data[pos:pos + 1].isspace():
        raise ImageFormatError("netpbm header must end with one whitespace byte")
    magic = fields[0]
    if magic not in (b"P5", b"P6"):
        raise ImageFormatError(f"unsupported netpbm magic {magic!r} (only binary P5/P6)")
    try:
        width, height, maxval = (int(f) for f in fields[1:])
    except ValueError as exc:
        raise ImageFormatError(f"malformed netpbm header fields {fields[1:]}") from exc
    if width < 1 or height < 1:
        raise ImageFormatError(f"bad image size {width}x{height}")
    if maxval != 255:
        raise ImageFormatError(f"only 8-bit images (maxval 255) are supported, got maxval {maxval}")
    return magic, width, height, maxval, pos + 1


def read_netpbm(path):
    """Raw uint8 pixels, (H, W, 3) for P6 and (H, W) for P5."""
    with open(path, "rb") as fh:
        data = fh.read()
    magic, width, height, _, offset = _parse_header(data)
    channels = 3 if magic == b"P6" else 1
    need = width * height * channels
    payload = np.frombuffer(data, np.uint8, count=min(need, len(data) - offset), offset=offset)
    if payload.size != need:
        raise ImageFormatError(f"{path}: expected {need} pixel bytes, found {payload.size}")
    return payload.reshape((height, width, 3) if channels == 3 else (height, width)).copy()


def write_netpbm(pixels, path):
    pixels = np.asarray(pixels)
    if pixels.dtype != np.uint8:
        raise ImageFormatError(f"netpbm pixels must be uint8, got {pixels.dtype}")
    if pixels.ndim == 3 and pixels.shape[2] == 3:
        magic = b"P6"
    elif pixels.ndim == 2:
        magic = b"P5"
    else:
        raise ImageFormatError(f"cannot write pixel array of shape {pixels.shape}")
    h, w = pixels.shape[:2]
    with open(path, "wb") as fh:
        fh.write(b"%s\n%d %d\n255\n" % (magic, w, h))
        fh.write(np.ascontiguousarray(pixels).tobytes())


def read_image(path):
    """1 x C x H x W float32 in [0, 1]; C is 3 for P6 and 1 for P5."""
    px = read_netpbm(path)
    if px.ndim == 2:
        px = px[:, :, None]
    return (px.transpose(2, 0, 1)[None].astype(np.float32) / np.float32(255)).copy()


def to_uint8(img):
    img = check_tensor4(img, "img")
    if img.shape[0] != 1 or img.shape[1] not in (1, 3):
        raise ShapeError(f"image must be 1 x 1|3 x H x W, got {img.shape}")
    px = np.clip(np.rint(img[0].astype(np.float64) * 255), 0, 255).astype(np.uint8)
    return px[0] if px.shape[0] == 1 else px.transpose(1, 2, 0)


def write_image(img, path):
    write_netpbm(to_uint8(img), path)


def read_class_map(path):
    px = read_netpbm(path)
    if px.ndim != 2:
        raise ImageFormatError(f"{path}: class maps are stored as P5 (greyscale)")
    return px.astype(np.int32)


def write_class_map(labels, path):
    labels = check_class_map(labels)
    if labels.max(initial=0) > 255:
        raise ImageFormatError("class ids above 255 do not fit an 8-bit map")
    write_netpbm(labels.astype(np.uint8), path)


def preprocess(img, mean=IMAGENET_MEAN, std=IMAGENET_STD):
    img = check_tensor4(img, "img")
    mean = np.asarray(mean, img.dtype)
    std = np.asarray(std, img.dtype)
    if mean.shape != (img.shape[1],) or std.shape != (img.shape[1],):
        raise ShapeError(f"mean/std need {img.shape[1]} entries")
    return (img - mean[:, None, None]) / std[:, None, None]


def read_palette(path):
    """Parse ``class_id R G B`` lines; blank lines and ``#`` comments are skipped."""
    palette = {}
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            parts = line.split()
            try:
                cid, r, g, b = (int(p) for p in parts)
            except ValueError as exc:
                raise ImageFormatError(f"{path}:{lineno}: expected 'class_id R G B', got {line!r}") from exc
            if not all(0 <= v <= 255 for v in (r, g, b)) or cid < 0:
                raise ImageFormatError(f"{path}:{lineno}: values out of range")
            palette[cid] = (r, g, b)
    return palette


def write_palette(palette, path):
    with open(path, "w") as fh:
        for cid in sorted(palette):
            fh.write("%d %d %d %d\n" % ((cid,) + tuple(palette[cid])))


def default_palette(num_classes):
    palette = dict(enumerate(CITYSCAPES_PALETTE[:num_classes]))
    rng = np.random.default_rng(0)
    for cid in range(len(palette), num_classes):
        palette[cid] = tuple(int(v) for v in rng.integers(0, 256, 3))
    return palette


def colorize(labels, palette, ignore=IGNORE):
    """Map a class grid to a 1 x 3 x H x W image in [0, 1]; ignore is black."""
    labels = check_class_map(labels)
    present = set(np.unique(labels).tolist()) - {ignore}
    missing = sorted(present - set(palette))
    if missing:
        raise KeyError(f"palette has no colour for classes {missing}")
    table = np.zeros((max(present | {ignore, 0}) + 1, 3), np.uint8)
    for cid, rgb in palette.items():
        if cid < len(table) and cid != ignore:
            table[cid] = rgb
    table[ignore] = 0
    rgb = table[labels]
    return (rgb.transpose(2, 0, 1)[None].astype(np.float32) / np.float32(255)).copy()
