"""Colour encodings for flow, depth, masks and benchmark-style error maps."""
from __future__ import annotations

import numpy as np
from matplotlib import colormaps

# steps between the six primary hues of the Middlebury colour wheel
_WHEEL_STEPS = (("RY", 15), ("YG", 6), ("GC", 4), ("CB", 11), ("BM", 13), ("MR", 6))

# (lower, upper] bins over the normalised error min(e / 3, 20 e / |gt|);
# scores above 1 are outliers (e > 3 px and e > 5% of |gt|)
ERROR_BINS = (
    (0.0, 0.0625, (49, 54, 149)),
    (0.0625, 0.125, (69, 117, 180)),
    (0.125, 0.25, (116, 173, 209)),
    (0.25, 0.5, (171, 217, 233)),
    (0.5, 1.0, (224, 243, 248)),
    (1.0, 2.0, (254, 224, 144)),
    (2.0, 4.0, (253, 174, 97)),
    (4.0, 8.0, (244, 109, 67)),
    (8.0, 16.0, (215, 48, 39)),
    (16.0, np.inf, (165, 0, 38)),
)
OUTLIER_COLORS = tuple(rgb for lo, _, rgb in ERROR_BINS if lo >= 1.0)


def color_wheel():
    """(55, 3) RGB wheel in [0, 1]."""
    ry, yg, gc, cb, bm, mr = (n for _, n in _WHEEL_STEPS)
    segs = [
        np.stack([np.ones(ry), np.arange(ry) / ry, np.zeros(ry)], 1),
        np.stack([1 - np.arange(yg) / yg, np.ones(yg), np.zeros(yg)], 1),
        np.stack([np.zeros(gc), np.ones(gc), np.arange(gc) / gc], 1),
        np.stack([np.zeros(cb), 1 - np.arange(cb) / cb, np.ones(cb)], 1),
        np.stack([np.arange(bm) / bm, np.zeros(bm), np.ones(bm)], 1),
        np.stack([np.ones(mr), np.zeros(mr), 1 - np.arange(mr) / mr], 1),
    ]
    return np.concatenate(segs)


def flow_to_color(flow, valid=None, max_flow=None):
    """Middlebury colour coding; hue is direction, saturation is magnitude.

    Zero flow maps to white and invalid pixels to black.
    """
    flow = np.asarray(flow, dtype=float)
    u, v = flow[..., 0], flow[..., 1]
    valid = np.isfinite(u) & np.isfinite(v) if valid is None else np.asarray(valid, bool)
    u = np.where(valid, u, 0.0)
    v = np.where(valid, v, 0.0)
    rad = np.hypot(u, v)
    if max_flow is None:
        max_flow = rad.max() if rad.size else 0.0
    max_flow = max(float(max_flow), 1e-9)
    u, v, rad = u / max_flow, v / max_flow, rad / max_flow
    wheel = color_wheel()
    ncols = len(wheel)
    a = np.arctan2(-v, -u) / np.pi
    fk = (a + 1) / 2 * (ncols - 1)
    k0 = np.floor(fk).astype(int)
    k1 = (k0 + 1) % ncols
    f = (fk - k0)[..., None]
    col = (1 - f) * wheel[k0] + f * wheel[k1]
    r = rad[..., None]
    col = np.where(r <= 1, 1 - r * (1 - col), col * 0.75)
    out = np.floor(255 * col + 0.5).astype(np.uint8)
    out[~valid] = 0
    return out


def depth_to_color(depth, valid=None, cmap="magma"):
    """Inverse depth through a perceptual colour map; invalid pixels are black."""
    depth = np.asarray(depth, dtype=float)
    valid = np.isfinite(depth) & (depth > 0) if valid is None else np.asarray(valid, bool) & (depth > 0)
    inv = np.zeros_like(depth)
    inv[valid] = 1.0 / depth[valid]
    if valid.any():
        lo, hi = inv[valid].min(), inv[valid].max()
        inv = (inv - lo) / (hi - lo) if hi > lo else np.where(valid, 1.0, 0.0)
    rgb = colormaps[cmap](np.clip(inv, 0, 1))[..., :3]
    out = np.floor(255 * rgb + 0.5).astype(np.uint8)
    out[~valid] = 0
    return out


def mask_to_color(mask):
    """Soft or binary mask in [0, 1] as grey levels."""
    m = np.clip(np.asarray(mask, dtype=float), 0.0, 1.0)
    g = np.floor(255 * m + 0.5).astype(np.uint8)
    return np.repeat(g[..., None], 3, axis=-1)


def error_to_color(pred, gt, valid=None):
    """Benchmark-style error map for flow (H, W, 2) or disparity (H, W) grids."""
    pred = np.asarray(pred, dtype=float)
    gt = np.asarray(gt, dtype=float)
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch: {pred.shape} vs {gt.shape}")
    if gt.ndim == 3:
        err = np.linalg.norm(pred - gt, axis=-1)
        mag = np.linalg.norm(gt, axis=-1)
    else:
        err = np.abs(pred - gt)
        mag = np.abs(gt)
    valid = np.ones(err.shape, bool) if valid is None else np.asarray(valid, bool)
    with np.errstate(divide="ignore", invalid="ignore"):
        score = np.minimum(err / 3.0, np.where(mag > 0, 20.0 * err / mag, np.inf))
    out = np.zeros(err.shape + (3,), np.uint8)
    for lo, hi, rgb in ERROR_BINS:
        sel = valid & ((score > lo) | (lo == 0.0)) & (score <= hi)
        out[sel] = rgb
    return out


def count_outlier_pixels(image):
    """Number of pixels painted with an outlier colour by :func:`error_to_color`."""
    image = np.asarray(image)
    hit = np.zeros(image.shape[:2], bool)
    for rgb in OUTLIER_COLORS:
        hit |= np.all(image == np.array(rgb, np.uint8), axis=-1)
    return int(hit.sum())
