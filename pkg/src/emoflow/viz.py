"""Image outputs: optical-flow color coding, PPM/PGM writers, wheel legend.

Flow is rendered with the standard color wheel: hue encodes direction,
saturation encodes magnitude (max-normalized), full brightness.  Zero flow is
white; masked-out pixels render white as well.  Formats are binary PPM (P6,
8-bit) and PGM (P5, 16-bit big-endian per the netpbm convention).
"""

from __future__ import annotations

import numpy as np


def write_ppm(path, rgb: np.ndarray) -> None:
    rgb = np.asarray(rgb)
    if rgb.dtype != np.uint8 or rgb.ndim != 3 or rgb.shape[2] != 3:
        raise ValueError("rgb must be uint8 (H, W, 3)")
    h, w = rgb.shape[:2]
    with open(path, "wb") as f:
        f.write(f"P6\n{w} {h}\n255\n".encode())
        f.write(rgb.tobytes())


def read_ppm(path) -> np.ndarray:
    with open(path, "rb") as f:
        data = f.read()
    fields = []
    pos = 0
    while len(fields) < 4:
        while pos < len(data) and data[pos:pos + 1].isspace():
            pos += 1
        if data[pos:pos + 1] == b"#":
            while pos < len(data) and data[pos] != 0x0A:
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos:pos + 1].isspace():
            pos += 1
        fields.append(data[start:pos])
    pos += 1  # single whitespace after maxval
    if fields[0] != b"P6":
        raise ValueError(f"{path}: not a binary PPM")
    w, h, maxval = int(fields[1]), int(fields[2]), int(fields[3])
    if maxval != 255:
        raise ValueError(f"{path}: unsupported maxval {maxval}")
    return np.frombuffer(data[pos:pos + 3 * w * h], dtype=np.uint8).reshape(h, w, 3)


def write_pgm16(path, image: np.ndarray, max_normalize: bool = True) -> None:
    """16-bit PGM; values max-normalized to the full range by default."""
    img = np.asarray(image, dtype=np.float64)
    if img.ndim != 2:
        raise ValueError("image must be 2-D")
    peak = img.max() if max_normalize else 1.0
    scale = 65535.0 / peak if peak > 0 else 0.0
    q = np.clip(np.round(img * scale), 0, 65535).astype(">u2")
    h, w = img.shape
    with open(path, "wb") as f:
        f.write(f"P5\n{w} {h}\n65535\n".encode())
        f.write(q.tobytes())


def _hsv_to_rgb(h: np.ndarray, s: np.ndarray, v: np.ndarray) -> np.ndarray:
    h6 = (h % 1.0) * 6.0
    i = np.floor(h6).astype(int) % 6
    f = h6 - np.floor(h6)
    p = v * (1.0 - s)
    q = v * (1.0 - s * f)
    t = v * (1.0 - s * (1.0 - f))
    r = np.choose(i, [v, q, p, p, t, v])
    g = np.choose(i, [t, v, v, q, p, p])
    b = np.choose(i, [p, p, t, v, v, q])
    return np.stack([r, g, b], axis=-1)


def flow_to_rgb(values: np.ndarray, mask: np.ndarray | None = None,
                max_mag: float | None = None) -> np.ndarray:
    """Color-wheel rendering of a (H, W, 2) flow field as uint8 RGB."""
    values = np.asarray(values, dtype=np.float64)
    u, v = values[..., 0], values[..., 1]
    mag = np.hypot(u, v)
    if max_mag is None:
        max_mag = float(mag.max())
    sat = np.clip(mag / max_mag, 0.0, 1.0) if max_mag > 0 else np.zeros_like(mag)
    hue = (np.arctan2(-v, -u) / np.pi + 1.0) / 2.0
    rgb = _hsv_to_rgb(hue, sat, np.ones_like(sat))
    if mask is not None:
        rgb[~np.asarray(mask, dtype=bool)] = 1.0
    return np.clip(np.round(rgb * 255.0), 0, 255).astype(np.uint8)


def color_wheel_legend(size: int = 128) -> np.ndarray:
    """The wheel itself: direction = hue, radius = saturation, white outside."""
    c = (size - 1) / 2.0
    ys, xs = np.mgrid[0:size, 0:size]
    u = (xs - c) / c
    v = (ys - c) / c
    inside = u * u + v * v <= 1.0
    rgb = flow_to_rgb(np.stack([u, v], axis=-1), mask=inside, max_mag=1.0)
    return rgb
