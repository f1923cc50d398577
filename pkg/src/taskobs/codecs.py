"""Binary netpbm codecs for images, masks and 16-bit depth.

* images: P6, maxval 255
* masks: P5, maxval 255, written as 0/255 and read back with a >=128 threshold
* depth: P5, maxval 65535 (big-endian samples). The stored sample ``s`` is the
  min-max stretched depth, so ``s / 65535`` is the relative depth. A text
  sidecar next to the raster keeps the pre-quantization min/max so the raw
  values can be recovered to within half a quantization step.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np

from taskobs.errors import CodecError

DEPTH_MAX = 65535


def _parse_header(buf: bytes, magic: bytes):
    if buf[:2] != magic:
        raise CodecError(f"expected {magic!r} header, got {buf[:2]!r}")
    fields = []
    pos = 2
    n = len(buf)
    while len(fields) < 3:
        while pos < n and buf[pos] in b" \t\r\n":
            pos += 1
        if pos < n and buf[pos] == ord("#"):
            while pos < n and buf[pos] not in b"\r\n":
                pos += 1
            continue
        start = pos
        while pos < n and buf[pos:pos + 1].isdigit():
            pos += 1
        if start == pos:
            raise CodecError("truncated or malformed netpbm header")
        fields.append(int(buf[start:pos]))
    if pos >= n or buf[pos] not in b" \t\r\n":
        raise CodecError("missing whitespace after netpbm header")
    width, height, maxval = fields
    if width < 1 or height < 1 or not 0 < maxval <= 65535:
        raise CodecError(f"invalid netpbm dimensions/maxval {fields}")
    return width, height, maxval, pos + 1


def _payload(buf, offset, count, dtype):
    nbytes = count * np.dtype(dtype).itemsize
    data = buf[offset:offset + nbytes]
    if len(data) != nbytes:
        raise CodecError(f"netpbm payload truncated: {len(data)} of {nbytes} bytes")
    return np.frombuffer(data, dtype=dtype)


def encode_ppm(image: np.ndarray) -> bytes:
    img = np.asarray(image)
    if img.ndim != 3 or img.shape[2] != 3 or img.dtype != np.uint8:
        raise CodecError(f"PPM needs (H, W, 3) uint8, got {img.shape} {img.dtype}")
    h, w = img.shape[:2]
    return b"P6\n%d %d\n255\n" % (w, h) + np.ascontiguousarray(img).tobytes()


def decode_ppm(buf: bytes) -> np.ndarray:
    w, h, maxval, off = _parse_header(buf, b"P6")
    if maxval != 255:
        raise CodecError(f"only maxval 255 PPM is supported, got {maxval}")
    return _payload(buf, off, w * h * 3, np.uint8).reshape(h, w, 3).copy()


def encode_pgm(plane: np.ndarray, maxval: int = 255) -> bytes:
    p = np.asarray(plane)
    if p.ndim != 2:
        raise CodecError(f"PGM needs a 2-D plane, got {p.shape}")
    h, w = p.shape
    header = b"P5\n%d %d\n%d\n" % (w, h, maxval)
    if maxval <= 255:
        return header + np.ascontiguousarray(p, dtype=np.uint8).tobytes()
    return header + np.ascontiguousarray(p, dtype=">u2").tobytes()


def decode_pgm(buf: bytes):
    """Return ``(plane, maxval)`` with plane as uint8 or uint16."""
    w, h, maxval, off = _parse_header(buf, b"P5")
    if maxval <= 255:
        plane = _payload(buf, off, w * h, np.uint8)
    else:
        plane = _payload(buf, off, w * h, ">u2").astype(np.uint16)
    return plane.reshape(h, w).copy(), maxval


def encode_mask(mask: np.ndarray) -> bytes:
    m = np.asarray(mask).astype(bool)
    return encode_pgm(np.where(m, 255, 0).astype(np.uint8), 255)


def decode_mask(buf: bytes) -> np.ndarray:
    plane, maxval = decode_pgm(buf)
    if maxval != 255:
        raise CodecError(f"mask PGM must have maxval 255, got {maxval}")
    return plane >= 128


def quantize_depth(depth: np.ndarray):
    """Return ``(samples, lo, hi)`` for the 16-bit depth encoding."""
    d = np.asarray(depth, dtype=np.float64)
    if d.ndim != 2 or not np.isfinite(d).all():
        raise CodecError("depth must be a finite 2-D array")
    lo = float(d.min())
    hi = float(d.max())
    if hi > lo:
        samples = np.floor((d - lo) / (hi - lo) * DEPTH_MAX + 0.5)
    else:
        samples = np.zeros_like(d)
    return samples.astype(np.uint16), lo, hi


def samples_to_relative(samples: np.ndarray) -> np.ndarray:
    return np.asarray(samples, dtype=np.float64) / DEPTH_MAX


def sidecar_path(path) -> Path:
    path = Path(path)
    return path.with_name(path.stem + ".range.txt")


def format_sidecar(lo: float, hi: float) -> str:
    return f"min {lo!r}\nmax {hi!r}\n"


def parse_sidecar(text: str):
    vals = {}
    for line in text.splitlines():
        parts = line.split()
        if len(parts) == 2:
            vals[parts[0]] = parts[1]
    try:
        return float(vals["min"]), float(vals["max"])
    except (KeyError, ValueError):
        raise CodecError(f"malformed depth sidecar: {text!r}") from None


def write_image(path, image):
    Path(path).write_bytes(encode_ppm(image))


def read_image(path) -> np.ndarray:
    return decode_ppm(Path(path).read_bytes())


def write_mask(path, mask):
    Path(path).write_bytes(encode_mask(mask))


def read_mask(path) -> np.ndarray:
    return decode_mask(Path(path).read_bytes())


def write_depth(path, depth):
    samples, lo, hi = quantize_depth(depth)
    Path(path).write_bytes(encode_pgm(samples, DEPTH_MAX))
    sidecar_path(path).write_text(format_sidecar(lo, hi))


def read_depth_samples(path) -> np.ndarray:
    plane, maxval = decode_pgm(Path(path).read_bytes())
    if maxval != DEPTH_MAX:
        raise CodecError(f"depth PGM must have maxval {DEPTH_MAX}, got {maxval}")
    return plane


def read_depth(path) -> np.ndarray:
    """Relative depth ``s / 65535`` in [0, 1]."""
    return samples_to_relative(read_depth_samples(path))


def read_depth_raw(path) -> np.ndarray:
    """Depth rescaled to the range recorded in the sidecar."""
    samples = read_depth_samples(path)
    lo, hi = parse_sidecar(sidecar_path(path).read_text())
    return lo + samples_to_relative(samples) * (hi - lo)
