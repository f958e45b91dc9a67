"""
Netpbm rasters: 16-bit greyscale images, 8-bit label masks and RGB overlays.

Images are binary PGM (P5) with maxval 65535. Netpbm fixes the sample byte
order of 16-bit PGM as most-significant byte first, so that is what is
written and read. Masks are binary PGM with maxval 255 holding the label
values 0..3 verbatim. Overlays are binary PPM (P6), 8 bits per channel.
"""

import numpy as np

from .errors import FormatError


def _read_tokens(raw: bytes, count: int):
    tokens, pos = [], 0
    while len(tokens) < count:
        while pos < len(raw) and raw[pos:pos + 1].isspace():
            pos += 1
        if raw[pos:pos + 1] == b"#":
            while pos < len(raw) and raw[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(raw) and not raw[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise FormatError("truncated Netpbm header")
        tokens.append(raw[start:pos])
    # exactly one whitespace byte separates the header from the raster
    return tokens, pos + 1


def decode_netpbm(raw: bytes) -> np.ndarray:
    """Decode a P5 or P6 file into uint8/uint16 rows x cols (x 3)."""
    try:
        tokens, offset = _read_tokens(raw, 4)
        magic = tokens[0]
        width, height, maxval = (int(t) for t in tokens[1:])
    except (ValueError, IndexError) as exc:
        raise FormatError("malformed Netpbm header") from exc
    if magic not in (b"P5", b"P6"):
        raise FormatError(f"unsupported Netpbm type {magic!r}")
    if not (0 < maxval < 65536) or width <= 0 or height <= 0:
        raise FormatError("invalid Netpbm dimensions or maxval")
    channels = 3 if magic == b"P6" else 1
    dtype = np.dtype(">u2") if maxval > 255 else np.dtype("u1")
    count = width * height * channels
    body = raw[offset:]
    if len(body) != count * dtype.itemsize:
        raise FormatError(f"expected {count * dtype.itemsize} raster bytes, found {len(body)}")
    data = np.frombuffer(body, dtype=dtype).astype(np.uint16 if maxval > 255 else np.uint8)
    if data.size and data.max() > maxval:
        raise FormatError("sample exceeds maxval")
    shape = (height, width, 3) if channels == 3 else (height, width)
    return data.reshape(shape)


def encode_netpbm(array: np.ndarray, maxval: int | None = None) -> bytes:
    array = np.asarray(array)
    if array.ndim == 3 and array.shape[2] == 3:
        magic = b"P6"
    elif array.ndim == 2:
        magic = b"P5"
    else:
        raise FormatError(f"cannot encode array of shape {array.shape}")
    if maxval is None:
        maxval = 65535 if array.dtype == np.uint16 else 255
    if array.size and (array.min() < 0 or array.max() > maxval):
        raise FormatError("values outside 0..maxval")
    dtype = ">u2" if maxval > 255 else "u1"
    h, w = array.shape[:2]
    header = b"%s\n%d %d\n%d\n" % (magic, w, h, maxval)
    return header + np.ascontiguousarray(array).astype(dtype).tobytes()


def read_image(path) -> np.ndarray:
    with open(path, "rb") as f:
        img = decode_netpbm(f.read())
    if img.ndim != 2:
        raise FormatError(f"{path}: expected a single-channel image")
    return img.astype(np.uint16)


def write_image(path, image) -> None:
    image = np.asarray(image)
    if image.dtype != np.uint16:
        raise FormatError("images are stored as 16-bit unsigned integers")
    with open(path, "wb") as f:
        f.write(encode_netpbm(image, 65535))


def read_mask(path) -> np.ndarray:
    with open(path, "rb") as f:
        mask = decode_netpbm(f.read())
    if mask.ndim != 2 or mask.dtype != np.uint8:
        raise FormatError(f"{path}: masks must be 8-bit single-channel")
    if mask.size and mask.max() > 3:
        raise FormatError(f"{path}: label {int(mask.max())} outside 0..3")
    return mask


def write_mask(path, mask) -> None:
    mask = np.asarray(mask)
    if mask.size and (mask.min() < 0 or mask.max() > 3):
        raise FormatError("mask labels must lie in 0..3")
    with open(path, "wb") as f:
        f.write(encode_netpbm(mask.astype(np.uint8), 255))


def write_rgb(path, rgb) -> None:
    with open(path, "wb") as f:
        f.write(encode_netpbm(np.asarray(rgb, dtype=np.uint8), 255))


def read_rgb(path) -> np.ndarray:
    with open(path, "rb") as f:
        img = decode_netpbm(f.read())
    if img.ndim != 3:
        raise FormatError(f"{path}: expected an RGB raster")
    return img
