"""Input checks shared by the estimator wrappers."""
from __future__ import annotations

import numpy as np

from .losses import SceneFrame
from .motion_field import SE3Field


def check_twists(X):
    """Accept an :class:`SE3Field` or an (H, W, 6) array; return an SE3Field."""
    if isinstance(X, SE3Field):
        return X
    arr = np.asarray(X, dtype=float)
    if arr.ndim != 3 or arr.shape[-1] != 6:
        raise ValueError(f"expected twists of shape (H, W, 6), got {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValueError("twists must be finite")
    return SE3Field(arr)


def check_mask(mask, shape, name="mask"):
    """Float mask in [0, 1] matching ``shape``; ``None`` means all ones."""
    if mask is None:
        return np.ones(shape)
    m = np.asarray(mask, dtype=float)
    if m.shape != tuple(shape):
        raise ValueError(f"{name} has shape {m.shape}, expected {tuple(shape)}")
    if not np.all(np.isfinite(m)) or m.min() < 0 or m.max() > 1:
        raise ValueError(f"{name} values must lie in [0, 1]")
    return m


def check_frame(frame):
    if not isinstance(frame, SceneFrame):
        raise TypeError(f"expected a SceneFrame, got {type(frame).__name__}")
    return frame


def check_poses(X, name="poses"):
    """(n, 4, 4) pose stack or (n, 3) positions, returned as a float array."""
    arr = np.asarray(getattr(X, "poses", X), dtype=float)
    ok = (arr.ndim == 3 and arr.shape[1:] == (4, 4)) or (arr.ndim == 2 and arr.shape[1] == 3)
    if not ok:
        raise ValueError(f"{name} must be (n, 4, 4) poses or (n, 3) positions, got {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} must be finite")
    return arr


def positions(arr):
    return arr[:, :3, 3] if arr.ndim == 3 else arr
