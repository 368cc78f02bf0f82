"""Image plumbing: binary PPM/PGM files, bilinear resampling, affine warps.

Images are float32 arrays shaped (3, H, W) with values in [0, 1];
grayscale maps are (H, W).
"""

from __future__ import annotations

import numpy as np


def write_ppm(path, image: np.ndarray):
    """Binary P6, 8-bit; input (3,H,W) in [0,1]."""
    c, h, w = image.shape
    if c != 3:
        raise ValueError(f"expected 3 channels, got shape {image.shape}")
    data = np.clip(np.rint(image * 255.0), 0, 255).astype(np.uint8)
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode())
        fh.write(data.transpose(1, 2, 0).tobytes())


def read_ppm(path) -> np.ndarray:
    with open(path, "rb") as fh:
        blob = fh.read()
    magic, rest = blob.split(None, 1)
    if magic != b"P6":
        raise ValueError(f"{path}: not a binary PPM (P6) file")
    fields = []
    pos = 0
    while len(fields) < 3:
        while pos < len(rest) and rest[pos:pos + 1].isspace():
            pos += 1
        if rest[pos:pos + 1] == b"#":
            pos = rest.index(b"\n", pos) + 1
            continue
        end = pos
        while end < len(rest) and not rest[end:end + 1].isspace():
            end += 1
        fields.append(int(rest[pos:end]))
        pos = end
    pos += 1  # single whitespace after maxval
    w, h, maxval = fields
    raw = np.frombuffer(rest, dtype=np.uint8, count=h * w * 3, offset=pos)
    return (raw.reshape(h, w, 3).transpose(2, 0, 1) / np.float32(maxval)).astype(np.float32)


def write_pgm(path, gray: np.ndarray):
    """Binary P5, 8-bit; input (H,W) already in [0,255] uint8 or [0,1] float."""
    if gray.dtype != np.uint8:
        gray = np.clip(np.rint(gray * 255.0), 0, 255).astype(np.uint8)
    h, w = gray.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode())
        fh.write(gray.tobytes())


def read_pgm_header(path):
    """(width, height, maxval) without decoding the payload."""
    with open(path, "rb") as fh:
        blob = fh.read(128)
    parts = blob.split()
    if parts[0] != b"P5":
        raise ValueError(f"{path}: not a binary PGM (P5) file")
    return int(parts[1]), int(parts[2]), int(parts[3])


def _sample_bilinear(image: np.ndarray, ys: np.ndarray, xs: np.ndarray,
                     fill: np.ndarray) -> np.ndarray:
    """Sample (C,H,W) at fractional coordinates; outside falls to fill."""
    c, h, w = image.shape
    y0 = np.floor(ys).astype(np.int64)
    x0 = np.floor(xs).astype(np.int64)
    fy = (ys - y0).astype(image.dtype)
    fx = (xs - x0).astype(image.dtype)

    def grab(yy, xx):
        inside = (yy >= 0) & (yy < h) & (xx >= 0) & (xx < w)
        yc = np.clip(yy, 0, h - 1)
        xc = np.clip(xx, 0, w - 1)
        vals = image[:, yc, xc]
        return np.where(inside[None], vals, fill[:, None, None])

    top = grab(y0, x0) * (1 - fx) + grab(y0, x0 + 1) * fx
    bot = grab(y0 + 1, x0) * (1 - fx) + grab(y0 + 1, x0 + 1) * fx
    return (top * (1 - fy) + bot * fy).astype(image.dtype)


def resize_bilinear(image: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    c, h, w = image.shape
    ys = (np.arange(out_h, dtype=np.float64) + 0.5) * (h / out_h) - 0.5
    xs = (np.arange(out_w, dtype=np.float64) + 0.5) * (w / out_w) - 0.5
    yg, xg = np.meshgrid(ys, xs, indexing="ij")
    return _sample_bilinear(image, yg, xg, np.zeros(c, dtype=image.dtype))


def affine_warp(image: np.ndarray, matrix: np.ndarray, fill: np.ndarray) -> np.ndarray:
    """Warp (C,H,W) by a 2x3 output<-input inverse map around the center."""
    c, h, w = image.shape
    yg, xg = np.meshgrid(np.arange(h, dtype=np.float64),
                         np.arange(w, dtype=np.float64), indexing="ij")
    cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
    xr = xg - cx
    yr = yg - cy
    xs = matrix[0, 0] * xr + matrix[0, 1] * yr + matrix[0, 2] + cx
    ys = matrix[1, 0] * xr + matrix[1, 1] * yr + matrix[1, 2] + cy
    return _sample_bilinear(image, ys, xs, fill)


def affine_matrix(angle_deg=0.0, scale=1.0, shear=0.0, tx=0.0, ty=0.0) -> np.ndarray:
    """Inverse (sampling) matrix for the given forward viewpoint transform."""
    a = np.deg2rad(angle_deg)
    fwd = np.array([[np.cos(a), -np.sin(a)], [np.sin(a), np.cos(a)]])
    fwd = fwd @ np.array([[1.0, shear], [0.0, 1.0]]) * scale
    inv = np.linalg.inv(fwd)
    offs = -inv @ np.array([tx, ty])
    return np.array([[inv[0, 0], inv[0, 1], offs[0]],
                     [inv[1, 0], inv[1, 1], offs[1]]])
