"""Self-supervision losses for dense SE3 scene flow and their weighted total.

Every masked mean divides by the full pixel count ``H * W`` rather than the
mask population; pixels whose warp is invalid contribute zero.
"""
from __future__ import annotations

from dataclasses import dataclass, fields, replace
from functools import cached_property

import numpy as np

from . import camera as cg
from .camera import PinholeCamera
from .motion_field import SE3Field, aggregate_twist
from . import lie
from .warp import CropWindow, outlier_mask, photometric_error, warp_bilinear


@dataclass(frozen=True)
class LossWeights:
    alpha: float = 0.15
    beta: float = 10.0
    gamma: float = 1.0
    zeta: float = 0.9
    lambda_g: float = 0.1
    lambda_s: float = 0.1
    lambda_c: float = 0.1
    lambda_m: float = 0.1
    lambda_st: float = 0.001
    lambda_sd: float = 1.0
    lambda_sf: float = 1.0
    n_iters: int = 12
    normalize_depth_smoothness: bool = True
    outlier_lo: float = 0.05
    outlier_hi: float = 0.80

    def __post_init__(self):
        if not 0.0 < self.zeta <= 1.0:
            raise ValueError(f"zeta must lie in (0, 1], got {self.zeta}")
        if not self.gamma > 0:
            raise ValueError(f"gamma must be positive, got {self.gamma}")
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError(f"alpha must lie in [0, 1], got {self.alpha}")
        for name in ("lambda_g", "lambda_s", "lambda_c", "lambda_m", "lambda_st", "lambda_sd", "lambda_sf"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")
        if int(self.n_iters) < 1:
            raise ValueError("n_iters must be at least 1")

    def iteration_weights(self, n=None):
        n = self.n_iters if n is None else n
        return np.array([self.zeta ** (n - i) for i in range(1, n + 1)])

    def to_dict(self):
        return {f.name: getattr(self, f.name) for f in fields(self)}


@dataclass
class SceneFrame:
    """Inputs shared by every loss: crop-size images and depths plus camera.

    ``I2_full``/``D2_full`` are the uncropped second-frame image and depth;
    together with ``window`` they enable full-image view synthesis.
    ``stereo_right`` is the right view of frame 1 for the spatial loss.
    """

    I1: np.ndarray
    I2: np.ndarray
    D1: np.ndarray
    D2: np.ndarray
    camera: PinholeCamera
    I2_full: np.ndarray | None = None
    D2_full: np.ndarray | None = None
    window: CropWindow | None = None
    stereo_right: np.ndarray | None = None
    stereo_right_full: np.ndarray | None = None

    def __post_init__(self):
        shape = np.shape(self.I1)[:2]
        for name in ("I2", "D1", "D2", "stereo_right"):
            arr = getattr(self, name)
            if arr is not None and np.shape(arr)[:2] != shape:
                raise ValueError(f"{name} has shape {np.shape(arr)[:2]}, expected {shape}")
        if self.window is not None:
            if (self.window.height, self.window.width) != shape:
                raise ValueError(f"crop window {self.window} does not match frame size {shape}")
            for name in ("I2_full", "D2_full", "stereo_right_full"):
                arr = getattr(self, name)
                if arr is not None:
                    self.window.check_inside(*np.shape(arr)[:2])

    @property
    def shape(self):
        return np.shape(self.I1)[:2]

    def with_depth_scale(self, log_scale):
        if log_scale == 0.0:
            return self
        s = float(np.exp(log_scale))
        return replace(
            self,
            D1=self.D1 * s,
            D2=self.D2 * s,
            D2_full=None if self.D2_full is None else self.D2_full * s,
        )

    def second_image(self, full_image=True):
        if full_image and self.I2_full is not None and self.window is not None:
            return self.I2_full, self.window
        return self.I2, None

    def second_depth(self, full_image=True):
        if full_image and self.D2_full is not None and self.window is not None:
            return self.D2_full, self.window
        return self.D2, None


@dataclass
class MotionEstimate:
    """One iteration's motion output and the quantities derived from it."""

    field: SE3Field
    mask: np.ndarray
    depth: np.ndarray
    camera: PinholeCamera

    @classmethod
    def from_frame(cls, frame, field, mask):
        return cls(field, np.asarray(mask, dtype=float), frame.D1, frame.camera)

    @cached_property
    def scene_flow(self):
        return cg.synthesize_scene_flow(self.depth, self.field, self.camera)

    @property
    def flow(self):
        return self.scene_flow.flow

    @cached_property
    def ego_twist(self):
        return aggregate_twist(self.field, self.mask)

    @cached_property
    def ego_motion(self):
        return lie.exp(self.ego_twist)

    @cached_property
    def _ego(self):
        return cg.rigid_flow(self.depth, self.ego_motion, self.camera)

    @property
    def ego_flow(self):
        return self._ego[0]

    @property
    def ego_flow_valid(self):
        return self._ego[1]


@dataclass
class LossBreakdown:
    total: float
    L_d: float
    contributions: dict
    iterations: list
    iteration_weights: list

    def to_dict(self):
        return {
            "total": self.total,
            "L_d": self.L_d,
            "contributions": dict(self.contributions),
            "iterations": [dict(it) for it in self.iterations],
            "iteration_weights": list(self.iteration_weights),
        }


TERMS = ("L_p", "L_p_ego", "L_g", "L_s", "L_c", "L_m")


def _ones(shape):
    return np.ones(shape, dtype=float)


# ---------------------------------------------------------------------------
# per-pixel contribution maps (sum of a map == the loss value)
# ---------------------------------------------------------------------------


def photometric_map(frame, flow, flow_valid, mask, alpha, full_image=True):
    H, W = frame.shape
    src, window = frame.second_image(full_image)
    warped, ok = warp_bilinear(src, flow, window)
    ok = ok & flow_valid
    pe = photometric_error(frame.I1, warped, alpha)
    return np.where(ok, mask * pe, 0.0) / (H * W)


def geometric_error(depth_a, depth_b):
    depth_a = np.asarray(depth_a, dtype=float)
    depth_b = np.asarray(depth_b, dtype=float)
    return np.abs(depth_a - depth_b) / (depth_a + depth_b)


def geometric_map(frame, est, mask, full_image=True):
    sf = est.scene_flow
    return geometric_map_from_flow(frame, sf.flow, sf.delta_d, sf.valid, mask, full_image)


def geometric_map_from_flow(frame, flow, delta_d, flow_valid, mask, full_image=True):
    """Geometric-consistency map for an explicit ``(flow, delta_d)`` pair."""
    H, W = frame.shape
    d1_bar = frame.D1 + delta_d
    src, window = frame.second_depth(full_image)
    src_valid = cg.depth_validity(src)
    warped, ok = warp_bilinear(src, flow, window, source_valid=src_valid)
    ok = ok & flow_valid
    if np.any(d1_bar[ok] <= 0):
        raise ValueError("transformed depth is non-positive inside the valid region")
    ge = geometric_error(np.where(ok, d1_bar, 1.0), np.where(ok, warped, 1.0))
    return np.where(ok, mask * ge, 0.0) / (H * W)


def _image_edge_weights(image, beta):
    image = np.asarray(image, dtype=float)
    if image.ndim == 2:
        image = image[..., None]
    gx = np.abs(np.diff(image, axis=1)).mean(axis=-1)
    gy = np.abs(np.diff(image, axis=0)).mean(axis=-1)
    return np.exp(-beta * gx), np.exp(-beta * gy)


def _as_channels(O):
    O = np.asarray(O, dtype=float)
    return O[..., None] if O.ndim == 2 else O


def smoothness_map(O, image, k, beta):
    """Per-pixel contributions of the k-th order edge-aware smoothness.

    Each direction is averaged over its own difference grid, so a ramp of
    slope ``s`` under ``k=1`` yields ``s * mean(edge weight)``.
    """
    if k not in (1, 2):
        raise ValueError(f"smoothness order must be 1 or 2, got {k}")
    O = _as_channels(O)
    H, W, C = O.shape
    wx, wy = _image_edge_weights(image, beta)
    dx = np.abs(np.diff(O, n=k, axis=1))
    dy = np.abs(np.diff(O, n=k, axis=0))
    out = np.zeros((H, W))
    if W > k:
        out[:, : W - k] += (dx * wx[:, : W - k, None]).sum(axis=-1) / (H * (W - k) * C)
    if H > k:
        out[: H - k, :] += (dy * wy[: H - k, :, None]).sum(axis=-1) / ((H - k) * W * C)
    return out


def smoothness_grad(O, image, k, beta):
    """Subgradient of :func:`loss_smoothness` with respect to ``O``."""
    if k not in (1, 2):
        raise ValueError(f"smoothness order must be 1 or 2, got {k}")
    squeeze = np.ndim(O) == 2
    O = _as_channels(O)
    H, W, C = O.shape
    wx, wy = _image_edge_weights(image, beta)
    grad = np.zeros_like(O)
    stencil = np.array([-1.0, 1.0]) if k == 1 else np.array([1.0, -2.0, 1.0])
    if W > k:
        g = np.sign(np.diff(O, n=k, axis=1)) * wx[:, : W - k, None] / (H * (W - k) * C)
        for off, c in enumerate(stencil):
            grad[:, off: off + W - k] += c * g
    if H > k:
        g = np.sign(np.diff(O, n=k, axis=0)) * wy[: H - k, :, None] / ((H - k) * W * C)
        for off, c in enumerate(stencil):
            grad[off: off + H - k, :] += c * g
    return grad[..., 0] if squeeze else grad


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------


def loss_temporal_photometric(frame, est, m_noc=None, alpha=0.15, full_image=True):
    m = _ones(frame.shape) if m_noc is None else np.asarray(m_noc, dtype=float)
    sf = est.scene_flow
    return float(photometric_map(frame, sf.flow, sf.valid, m, alpha, full_image).sum())


def ego_photometric_error(frame, est, alpha=0.15, full_image=True):
    """Per-pixel pe of the ego-flow reconstruction and its validity."""
    src, window = frame.second_image(full_image)
    warped, ok = warp_bilinear(src, est.ego_flow, window)
    return photometric_error(frame.I1, warped, alpha), ok & est.ego_flow_valid


def loss_ego_photometric(frame, est, m_noc=None, m_ol=None, alpha=0.15, full_image=True):
    m = _ones(frame.shape) if m_noc is None else np.asarray(m_noc, dtype=float)
    if m_ol is not None:
        m = m * np.asarray(m_ol, dtype=float)
    return float(photometric_map(frame, est.ego_flow, est.ego_flow_valid, m, alpha, full_image).sum())


def loss_geometric(frame, est, m_noc=None, full_image=True):
    m = _ones(frame.shape) if m_noc is None else np.asarray(m_noc, dtype=float)
    return float(geometric_map(frame, est, m, full_image).sum())


def loss_smoothness(O, image, k, beta):
    return float(smoothness_map(O, image, k, beta).sum())


def smoothness_parts(est, image, weights):
    """Unweighted ``(L_st, L_sd, L_sf)``."""
    depth = np.asarray(est.depth, dtype=float)
    if weights.normalize_depth_smoothness:
        depth = depth / depth.mean()
    l_st = loss_smoothness(est.field.twists, image, 1, weights.beta)
    l_sd = loss_smoothness(depth, image, 1, weights.beta)
    l_sf = loss_smoothness(est.flow, image, 2, weights.beta)
    return l_st, l_sd, l_sf


def loss_smoothness_total(est, image, weights):
    l_st, l_sd, l_sf = smoothness_parts(est, image, weights)
    return weights.lambda_st * l_st + weights.lambda_sd * l_sd + weights.lambda_sf * l_sf


def loss_motion_consistency(est):
    H, W = est.field.shape
    mask = np.where(est.field.valid, est.mask, 0.0)
    resid = np.abs(est.field.twists - est.ego_twist).sum(axis=-1)
    return float((mask * resid).sum() / (H * W))


def loss_mask_regularization(mask, gamma=1.0):
    if not gamma > 0:
        raise ValueError("gamma must be positive")
    mask = np.asarray(mask, dtype=float)
    return float(np.mean((1.0 - mask) / (gamma + mask)))


def stereo_flow(frame):
    disp = cg.disparity_from_depth(frame.camera, frame.D1)
    return np.stack([-disp, np.zeros_like(disp)], axis=-1)


def loss_spatial_photometric(frame, alpha=0.15, full_image=True):
    """Left view reconstructed from the right view by depth-derived disparity.

    Averaged over pixels whose sample stays inside the right image.
    """
    if frame.stereo_right is None:
        raise ValueError("spatial photometric loss needs a right stereo image")
    if full_image and frame.stereo_right_full is not None and frame.window is not None:
        src, window = frame.stereo_right_full, frame.window
    else:
        src, window = frame.stereo_right, None
    warped, ok = warp_bilinear(src, stereo_flow(frame), window)
    if not np.any(ok):
        return 0.0
    pe = photometric_error(frame.I1, warped, alpha)
    return float(pe[ok].mean())


def iteration_terms(frame, est, weights, m_noc=None, m_ol=None, full_image=True):
    """Raw (unweighted) loss terms for one motion estimate.

    When ``m_ol`` is None it is recomputed from this estimate's ego-flow
    photometric error.
    """
    shape = frame.shape
    m_noc_arr = _ones(shape) if m_noc is None else np.asarray(m_noc, dtype=float)
    if m_ol is None:
        pe_ego, ok = ego_photometric_error(frame, est, weights.alpha, full_image)
        m_ol = outlier_mask(pe_ego, ok & (m_noc_arr > 0), weights.outlier_lo, weights.outlier_hi)
    return {
        "L_p": loss_temporal_photometric(frame, est, m_noc_arr, weights.alpha, full_image),
        "L_p_ego": loss_ego_photometric(frame, est, m_noc_arr, m_ol, weights.alpha, full_image),
        "L_g": loss_geometric(frame, est, m_noc_arr, full_image),
        "L_s": loss_smoothness_total(est, frame.I1, weights),
        "L_c": loss_motion_consistency(est),
        "L_m": loss_mask_regularization(est.mask, weights.gamma),
    }


def weighted_iteration_sum(terms, weights):
    return (
        terms["L_p"]
        + terms["L_p_ego"]
        + weights.lambda_g * terms["L_g"]
        + weights.lambda_s * terms["L_s"]
        + weights.lambda_c * terms["L_c"]
        + weights.lambda_m * terms["L_m"]
    )


def term_lambdas(weights):
    return {
        "L_p": 1.0,
        "L_p_ego": 1.0,
        "L_g": weights.lambda_g,
        "L_s": weights.lambda_s,
        "L_c": weights.lambda_c,
        "L_m": weights.lambda_m,
    }


def combine_iterations(per_iteration, L_d, weights, iteration_weights=None):
    n = len(per_iteration)
    if n < 1:
        raise ValueError("need at least one motion estimate")
    iw = weights.iteration_weights(n) if iteration_weights is None else np.asarray(iteration_weights, float)
    if len(iw) != n:
        raise ValueError(f"got {len(iw)} iteration weights for {n} estimates")
    lam = term_lambdas(weights)
    contributions = {name: sum(w * lam[name] * t[name] for w, t in zip(iw, per_iteration)) for name in TERMS}
    contributions["L_d"] = L_d
    total = L_d + sum(w * weighted_iteration_sum(t, weights) for w, t in zip(iw, per_iteration))
    return LossBreakdown(float(total), float(L_d), contributions, per_iteration, [float(w) for w in iw])


def loss_total(frame, estimates, weights=None, masks=(None, None), full_image=True, iteration_weights=None):
    """Weighted sum over iterations plus the spatial term.

    ``L_d + sum_i zeta^(N-i) (L_p + L_p_ego + lg L_g + ls L_s + lc L_c + lm L_m)``.
    ``L_d`` is 0 when the frame has no right stereo view.
    """
    weights = LossWeights() if weights is None else weights
    m_noc, m_ol = masks
    per_iteration = [iteration_terms(frame, est, weights, m_noc, m_ol, full_image) for est in estimates]
    L_d = loss_spatial_photometric(frame, weights.alpha, full_image) if frame.stereo_right is not None else 0.0
    return combine_iterations(per_iteration, L_d, weights, iteration_weights)
