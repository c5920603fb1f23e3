"""View synthesis, SSIM, photometric error and the occlusion/outlier masks."""
from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
from scipy.ndimage import uniform_filter

SSIM_C1 = 0.01**2
SSIM_C2 = 0.03**2
FB_ALPHA1 = 0.01
FB_ALPHA2 = 0.5
MIN_OUTLIER_PIXELS = 16


class FewPixelsWarning(UserWarning):
    pass


@dataclass(frozen=True)
class CropWindow:
    x0: int
    y0: int
    width: int
    height: int

    def check_inside(self, full_height, full_width):
        if self.x0 < 0 or self.y0 < 0 or self.x0 + self.width > full_width or self.y0 + self.height > full_height:
            raise ValueError(f"crop window {self} does not fit inside a {full_width}x{full_height} image")

    def crop(self, grid):
        return grid[self.y0:self.y0 + self.height, self.x0:self.x0 + self.width]

    @classmethod
    def centered(cls, full_width, full_height, fraction=0.1):
        """Window left after trimming ``fraction`` of the size from every side."""
        x0 = int(round(full_width * fraction))
        y0 = int(round(full_height * fraction))
        return cls(x0, y0, full_width - 2 * x0, full_height - 2 * y0)


def warp_bilinear(source, flow, window=None, source_valid=None):
    """Sample ``source`` at ``x + flow(x)`` (offset by the window origin).

    Returns ``(warped, valid)``. A sample is valid when it lies inside the
    source grid (pixel-centre extent) and, if ``source_valid`` is given, all
    four bilinear taps are valid. Invalid samples are 0.
    """
    source = np.asarray(source, dtype=float)
    flow = np.asarray(flow, dtype=float)
    H, W = flow.shape[:2]
    h, w = source.shape[:2]
    ys, xs = np.mgrid[0:H, 0:W].astype(float)
    sx = xs + flow[..., 0]
    sy = ys + flow[..., 1]
    if window is not None:
        window.check_inside(h, w)
        sx = sx + window.x0
        sy = sy + window.y0
    valid = np.isfinite(sx) & np.isfinite(sy) & (sx >= 0) & (sx <= w - 1) & (sy >= 0) & (sy <= h - 1)
    sx = np.where(valid, sx, 0.0)
    sy = np.where(valid, sy, 0.0)
    x0 = np.clip(np.floor(sx), 0, max(w - 2, 0)).astype(int)
    y0 = np.clip(np.floor(sy), 0, max(h - 2, 0)).astype(int)
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    fx = sx - x0
    fy = sy - y0

    src = source
    if source_valid is not None:
        source_valid = np.asarray(source_valid, bool)
        valid &= source_valid[y0, x0] & source_valid[y0, x1] & source_valid[y1, x0] & source_valid[y1, x1]
        src = np.where(source_valid.reshape(source_valid.shape + (1,) * (source.ndim - 2)), source, 0.0)

    if source.ndim == 3:
        fx = fx[..., None]
        fy = fy[..., None]
    top = src[y0, x0] * (1.0 - fx) + src[y0, x1] * fx
    bot = src[y1, x0] * (1.0 - fx) + src[y1, x1] * fx
    out = top * (1.0 - fy) + bot * fy
    mask = valid if source.ndim == 2 else valid[..., None]
    return np.where(mask, out, 0.0), valid


def ssim(img_a, img_b):
    """Per-pixel SSIM with a 3x3 box window, replicate padding, channel mean."""
    a = np.asarray(img_a, dtype=float)
    b = np.asarray(img_b, dtype=float)
    if a.shape != b.shape:
        raise ValueError(f"image shapes differ: {a.shape} vs {b.shape}")
    if a.ndim == 2:
        a = a[..., None]
        b = b[..., None]
    size = (3, 3, 1)
    mu_a = uniform_filter(a, size, mode="nearest")
    mu_b = uniform_filter(b, size, mode="nearest")
    var_a = uniform_filter(a * a, size, mode="nearest") - mu_a * mu_a
    var_b = uniform_filter(b * b, size, mode="nearest") - mu_b * mu_b
    cov = uniform_filter(a * b, size, mode="nearest") - mu_a * mu_b
    num = (2 * mu_a * mu_b + SSIM_C1) * (2 * cov + SSIM_C2)
    den = (mu_a * mu_a + mu_b * mu_b + SSIM_C1) * (var_a + var_b + SSIM_C2)
    return (num / den).mean(axis=-1)


def photometric_error(img_a, img_b, alpha=0.15):
    """``alpha/2 * (1 - SSIM) + (1 - alpha) * |a - b|`` with channel-mean L1."""
    if not 0.0 <= alpha <= 1.0:
        raise ValueError(f"alpha must lie in [0, 1], got {alpha}")
    a = np.asarray(img_a, dtype=float)
    b = np.asarray(img_b, dtype=float)
    l1 = np.abs(a - b)
    if l1.ndim == 3:
        l1 = l1.mean(axis=-1)
    if alpha == 0.0:
        return (1.0 - alpha) * l1
    return 0.5 * alpha * (1.0 - ssim(a, b)) + (1.0 - alpha) * l1


def occlusion_mask(flow_fw, flow_bw, alpha1=FB_ALPHA1, alpha2=FB_ALPHA2):
    """Forward-backward consistency check; True marks non-occluded pixels."""
    flow_fw = np.asarray(flow_fw, dtype=float)
    bw_warped, inside = warp_bilinear(flow_bw, flow_fw)
    diff = np.sum((flow_fw + bw_warped) ** 2, axis=-1)
    bound = alpha1 * (np.sum(flow_fw**2, axis=-1) + np.sum(bw_warped**2, axis=-1)) + alpha2
    return inside & (diff < bound)


def outlier_mask(pe_map, valid=None, p_lo=0.05, p_hi=0.80):
    """Keep pixels whose error lies between the ``p_lo`` and ``p_hi`` quantiles.

    Quantiles use the ``higher`` order statistic and both bounds are
    inclusive. With fewer than 16 valid pixels every pixel is kept and a
    :class:`FewPixelsWarning` is emitted.
    """
    pe_map = np.asarray(pe_map, dtype=float)
    if not 0.0 <= p_lo <= p_hi <= 1.0:
        raise ValueError(f"need 0 <= p_lo <= p_hi <= 1, got {p_lo}, {p_hi}")
    valid = np.ones(pe_map.shape, bool) if valid is None else np.asarray(valid, bool)
    values = pe_map[valid]
    if values.size < MIN_OUTLIER_PIXELS:
        warnings.warn(
            f"outlier mask needs {MIN_OUTLIER_PIXELS} valid pixels, got {values.size}; keeping all",
            FewPixelsWarning,
            stacklevel=2,
        )
        return np.ones(pe_map.shape, bool)
    lo, hi = np.quantile(values, [p_lo, p_hi], method="higher")
    return valid & (pe_map >= lo) & (pe_map <= hi)
