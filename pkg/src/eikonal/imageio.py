"""Float image IO (PFM), 8-bit previews (binary PPM) and PSNR/SSIM metrics.

Images are numpy arrays of shape (H, W, C) with C in {1, 3}, row-major with
the origin at the top-left. PFM stores rows bottom-to-top, which is handled
on read and write.
"""
from __future__ import annotations

import math
from pathlib import Path

import numpy as np
from scipy import ndimage

# Reported in place of +inf so reports stay valid JSON.
PSNR_INF = 999.0


class PfmError(ValueError):
    pass


class MalformedHeader(PfmError):
    pass


class TruncatedPayload(PfmError):
    pass


class UnsupportedEndianness(PfmError):
    pass


def _as_hwc(image):
    a = np.asarray(image)
    if a.ndim == 2:
        a = a[:, :, None]
    if a.ndim != 3 or a.shape[2] not in (1, 3):
        raise ValueError(f"expected (H, W, 1|3) image, got shape {a.shape}")
    if a.shape[0] < 1 or a.shape[1] < 1:
        raise ValueError("image dimensions must be positive")
    return a


def encode_pfm(image) -> bytes:
    a = _as_hwc(image).astype("<f4", copy=False)
    h, w, c = a.shape
    header = f"{'PF' if c == 3 else 'Pf'}\n{w} {h}\n-1.0\n".encode("ascii")
    return header + np.ascontiguousarray(a[::-1]).tobytes()


def write_pfm(path, image) -> None:
    Path(path).write_bytes(encode_pfm(image))


def _read_token_line(buf: bytes, pos: int) -> tuple[str, int]:
    end = buf.find(b"\n", pos)
    if end < 0:
        raise MalformedHeader("header line not terminated")
    return buf[pos:end].decode("ascii", errors="replace").strip(), end + 1


def decode_pfm(buf: bytes, source: str = "<bytes>") -> np.ndarray:
    magic, pos = _read_token_line(buf, 0)
    if magic not in ("PF", "Pf"):
        raise MalformedHeader(f"{source}: bad magic {magic!r}")
    channels = 3 if magic == "PF" else 1
    dims, pos = _read_token_line(buf, pos)
    parts = dims.split()
    if len(parts) != 2 or not all(p.isdigit() for p in parts):
        raise MalformedHeader(f"{source}: bad dimensions line {dims!r}")
    w, h = int(parts[0]), int(parts[1])
    if w <= 0 or h <= 0:
        raise MalformedHeader(f"{source}: non-positive dimensions {w}x{h}")
    scale_line, pos = _read_token_line(buf, pos)
    try:
        scale = float(scale_line)
    except ValueError:
        raise MalformedHeader(f"{source}: bad scale line {scale_line!r}") from None
    if scale > 0:
        raise UnsupportedEndianness(f"{source}: big-endian PFM (scale {scale}) is not supported")
    if scale == 0:
        raise MalformedHeader(f"{source}: zero scale")
    need = w * h * channels * 4
    payload = buf[pos:]
    if len(payload) != need:
        raise TruncatedPayload(
            f"{source}: payload has {len(payload)} bytes, expected {need} for {w}x{h}x{channels}"
        )
    a = np.frombuffer(payload, dtype="<f4").reshape(h, w, channels)
    return a[::-1].astype(np.float32)


def read_pfm(path) -> np.ndarray:
    path = Path(path)
    return decode_pfm(path.read_bytes(), str(path))


def to_preview_bytes(image, gamma: float = 2.2) -> np.ndarray:
    a = _as_hwc(image).astype(np.float64)
    if a.shape[2] == 1:
        a = np.repeat(a, 3, axis=2)
    a = np.clip(a, 0.0, 1.0) ** (1.0 / gamma)
    return np.rint(a * 255.0).astype(np.uint8)


def write_ppm_preview(path, image, gamma: float = 2.2) -> None:
    q = to_preview_bytes(image, gamma)
    h, w, _ = q.shape
    Path(path).write_bytes(f"P6\n{w} {h}\n255\n".encode("ascii") + q.tobytes())


def write_mask_ppm(path, mask) -> None:
    """8-bit mask written as P6 with 0/255 in all channels."""
    m = np.where(np.asarray(mask, dtype=bool), 255, 0).astype(np.uint8)
    h, w = m.shape
    rgb = np.repeat(m[:, :, None], 3, axis=2)
    Path(path).write_bytes(f"P6\n{w} {h}\n255\n".encode("ascii") + rgb.tobytes())


def read_ppm(path) -> np.ndarray:
    path = Path(path)
    buf = path.read_bytes()
    tokens = []
    pos = 0
    while len(tokens) < 4:
        while pos < len(buf) and buf[pos:pos + 1].isspace():
            pos += 1
        if buf[pos:pos + 1] == b"#":
            pos = buf.index(b"\n", pos) + 1
            continue
        start = pos
        while pos < len(buf) and not buf[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise ValueError(f"{path}: truncated PPM header")
        tokens.append(buf[start:pos].decode("ascii"))
    pos += 1
    if tokens[0] != "P6" or tokens[3] != "255":
        raise ValueError(f"{path}: only 8-bit binary P6 is supported")
    w, h = int(tokens[1]), int(tokens[2])
    data = buf[pos:]
    if len(data) != w * h * 3:
        raise ValueError(f"{path}: PPM payload size mismatch")
    return np.frombuffer(data, dtype=np.uint8).reshape(h, w, 3).copy()


def read_mask_ppm(path) -> np.ndarray:
    return read_ppm(path)[:, :, 0] >= 128


def _check_pair(a, b):
    a = _as_hwc(a).astype(np.float64)
    b = _as_hwc(b).astype(np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    return a, b


def psnr(a, b, peak: float = 1.0) -> float:
    """PSNR in dB; identical images give the PSNR_INF sentinel."""
    a, b = _check_pair(a, b)
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return PSNR_INF
    return 10.0 * math.log10(peak * peak / mse)


def gaussian_window(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    x = np.arange(size, dtype=np.float64) - (size - 1) / 2.0
    g = np.exp(-(x * x) / (2.0 * sigma * sigma))
    g /= g.sum()
    return np.outer(g, g)


def ssim(a, b, peak: float = 1.0, size: int = 11, sigma: float = 1.5,
         k1: float = 0.01, k2: float = 0.03) -> float:
    """Mean SSIM over valid windows, computed per channel and averaged."""
    a, b = _check_pair(a, b)
    if np.array_equal(a, b):
        return 1.0
    h, w, _ = a.shape
    if h < size or w < size:
        raise ValueError(f"image {h}x{w} smaller than the {size}x{size} SSIM window")
    win = gaussian_window(size, sigma)
    c1 = (k1 * peak) ** 2
    c2 = (k2 * peak) ** 2
    r = size // 2
    crop = (slice(r, h - r), slice(r, w - r))

    def filt(x):
        return ndimage.correlate(x, win, mode="constant")[crop]

    vals = []
    for c in range(a.shape[2]):
        x, y = a[:, :, c], b[:, :, c]
        mx, my = filt(x), filt(y)
        sxx = filt(x * x) - mx * mx
        syy = filt(y * y) - my * my
        sxy = filt(x * y) - mx * my
        num = (2 * mx * my + c1) * (2 * sxy + c2)
        den = (mx * mx + my * my + c1) * (sxx + syy + c2)
        vals.append(np.mean(num / den))
    return float(np.mean(vals))
