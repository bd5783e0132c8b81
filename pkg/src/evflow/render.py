"""Static flow-field rendering to binary PPM (P6).

Flow direction maps to hue, magnitude to saturation (normalized by the
per-image maximum), and pixels without predictions stay black. The
normalization constant is recorded in a sidecar text file so images remain
comparable.
"""

from __future__ import annotations

import numpy as np

from .events import CameraGeometry


def _hsv_to_rgb(h: np.ndarray, s: np.ndarray, v: np.ndarray) -> np.ndarray:
    """Vectorized HSV -> RGB, h in [0, 1), outputs float in [0, 1]."""
    i = np.floor(h * 6.0).astype(np.int64) % 6
    f = h * 6.0 - np.floor(h * 6.0)
    p = v * (1.0 - s)
    q = v * (1.0 - f * s)
    t = v * (1.0 - (1.0 - f) * s)
    rgb = np.zeros(h.shape + (3,))
    for idx, (r, g, b) in enumerate(
        [(v, t, p), (q, v, p), (p, v, t), (p, q, v), (t, p, v), (v, p, q)]
    ):
        mask = i == idx
        rgb[mask, 0] = r[mask]
        rgb[mask, 1] = g[mask]
        rgb[mask, 2] = b[mask]
    return rgb


def flow_field_image(
    pred_x: np.ndarray,
    pred_y: np.ndarray,
    flows: np.ndarray,
    geometry: CameraGeometry,
) -> tuple[np.ndarray, float]:
    """Rasterize predictions into an (H, W, 3) uint8 image.

    Multiple predictions at one pixel are averaged before coloring.
    Returns the image and the max magnitude used for normalization.
    """
    W, H = geometry.width, geometry.height
    acc = np.zeros((W, H, 2), dtype=np.float64)
    hits = np.zeros((W, H), dtype=np.int64)
    if len(pred_x):
        np.add.at(acc, (pred_x, pred_y), np.asarray(flows, dtype=np.float64))
        np.add.at(hits, (pred_x, pred_y), 1)
    mean = np.zeros_like(acc)
    covered = hits > 0
    mean[covered] = acc[covered] / hits[covered, None]

    mag = np.hypot(mean[:, :, 0], mean[:, :, 1])
    max_mag = float(mag.max()) if covered.any() else 0.0
    hue = (np.arctan2(mean[:, :, 1], mean[:, :, 0]) / (2.0 * np.pi)) % 1.0
    sat = mag / max_mag if max_mag > 0 else np.zeros_like(mag)
    val = covered.astype(np.float64)
    rgb = _hsv_to_rgb(hue, sat, val)
    img = np.clip(np.round(rgb * 255.0), 0, 255).astype(np.uint8)
    # (W, H, 3) -> image rows are y
    return img.transpose(1, 0, 2), max_mag


def write_ppm(img: np.ndarray, path: str) -> None:
    height, width, channels = img.shape
    if channels != 3 or img.dtype != np.uint8:
        raise ValueError("expected (H, W, 3) uint8 image")
    with open(path, "wb") as fh:
        fh.write(f"P6\n{width} {height}\n255\n".encode("ascii"))
        fh.write(img.tobytes())


def read_ppm(path: str) -> np.ndarray:
    with open(path, "rb") as fh:
        data = fh.read()
    parts = data.split(b"\n", 3)
    if parts[0] != b"P6":
        raise ValueError(f"{path}: not a binary PPM")
    width, height = map(int, parts[1].split())
    return np.frombuffer(parts[3], dtype=np.uint8, count=width * height * 3).reshape(
        height, width, 3
    )
