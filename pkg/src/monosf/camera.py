"""Pinhole camera model and scene-flow synthesis from depth + SE3 motion.

Pixel centres sit at integer coordinates; ``(0, 0)`` is the centre of the
top-left pixel. Grids are indexed ``[row, col]`` = ``[y, x]``.
"""
from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .lie import _matvec
from .motion_field import field_from_constant

Z_EPS = 1e-6


class BehindCameraError(ValueError):
    pass


@dataclass(frozen=True)
class PinholeCamera:
    fx: float
    fy: float
    cx: float
    cy: float
    baseline: float = 0.54

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError(f"focal lengths must be positive, got fx={self.fx}, fy={self.fy}")
        if not np.all(np.isfinite([self.fx, self.fy, self.cx, self.cy, self.baseline])):
            raise ValueError("camera parameters must be finite")

    def cropped(self, x0, y0):
        """Camera seen through a crop window whose origin is ``(x0, y0)``."""
        return replace(self, cx=self.cx - x0, cy=self.cy - y0)

    def matrix(self):
        return np.array([[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]])


@dataclass
class SceneFlowUVD:
    u: np.ndarray
    v: np.ndarray
    delta_d: np.ndarray
    valid: np.ndarray

    @property
    def flow(self):
        return np.stack([self.u, self.v], axis=-1)


def pixel_grid(height, width):
    """Return ``(xs, ys)`` float grids of pixel-centre coordinates."""
    ys, xs = np.mgrid[0:height, 0:width].astype(float)
    return xs, ys


def project(cam, p):
    p = np.asarray(p, dtype=float)
    z = p[..., 2]
    if np.any(z <= Z_EPS):
        raise BehindCameraError("point at or behind the camera plane")
    return np.stack([cam.fx * p[..., 0] / z + cam.cx, cam.fy * p[..., 1] / z + cam.cy], axis=-1)


def backproject(cam, pixel, depth):
    pixel = np.asarray(pixel, dtype=float)
    depth = np.asarray(depth, dtype=float)
    if np.any(depth <= 0):
        raise ValueError("depth must be positive")
    x = (pixel[..., 0] - cam.cx) / cam.fx * depth
    y = (pixel[..., 1] - cam.cy) / cam.fy * depth
    return np.stack([x, y, depth * np.ones_like(x)], axis=-1)


def depth_validity(depth, valid=None):
    depth = np.asarray(depth, dtype=float)
    ok = np.isfinite(depth) & (depth > 0)
    if valid is not None:
        ok &= np.asarray(valid, dtype=bool)
    return ok


def depth_from_disparity(cam, disp):
    disp = np.asarray(disp, dtype=float)
    if np.any(~(disp > 0)):
        raise ValueError("disparity must be positive")
    return cam.fx * cam.baseline / disp


def disparity_from_depth(cam, depth):
    depth = np.asarray(depth, dtype=float)
    if np.any(~(depth > 0)):
        raise ValueError("depth must be positive")
    return cam.fx * cam.baseline / depth


def backproject_grid(cam, depth, valid=None):
    """Per-pixel 3D points for a depth grid; invalid pixels get depth 1."""
    ok = depth_validity(depth, valid)
    d = np.where(ok, depth, 1.0)
    xs, ys = pixel_grid(*d.shape)
    pts = np.stack([(xs - cam.cx) / cam.fx * d, (ys - cam.cy) / cam.fy * d, d], axis=-1)
    return pts, ok


def _transform_grid(field, pts):
    return _matvec(field.rotations, pts) + field.translations


def synthesize_scene_flow(depth1, field, cam, valid=None):
    """Convert depth + SE3 field into the ``(u, v, delta_d)`` representation.

    Pixels with invalid depth, an invalid field entry, or whose transformed
    point lands behind the camera are marked invalid and carry zeros.
    """
    depth1 = np.asarray(depth1, dtype=float)
    if depth1.shape != field.shape:
        raise ValueError(f"depth shape {depth1.shape} does not match field shape {field.shape}")
    pts, ok = backproject_grid(cam, depth1, valid)
    moved = _transform_grid(field, pts)
    z = moved[..., 2]
    ok = ok & field.valid & (z > Z_EPS)
    zs = np.where(ok, z, 1.0)
    xs, ys = pixel_grid(*depth1.shape)
    u = np.where(ok, cam.fx * moved[..., 0] / zs + cam.cx - xs, 0.0)
    v = np.where(ok, cam.fy * moved[..., 1] / zs + cam.cy - ys, 0.0)
    dd = np.where(ok, z - pts[..., 2], 0.0)
    return SceneFlowUVD(u, v, dd, ok)


def scene_flow_3d(depth1, field, cam, valid=None):
    """Per-pixel 3D displacement ``T_x p - p`` and its validity."""
    pts, ok = backproject_grid(cam, depth1, valid)
    moved = _transform_grid(field, pts)
    ok = ok & field.valid & (moved[..., 2] > Z_EPS)
    return np.where(ok[..., None], moved - pts, 0.0), ok


def rigid_flow(depth1, transform, cam, valid=None):
    """Optical flow induced by a single rigid motion applied to every pixel."""
    field = field_from_constant(transform, *np.shape(depth1))
    sf = synthesize_scene_flow(depth1, field, cam, valid)
    return sf.flow, sf.valid
