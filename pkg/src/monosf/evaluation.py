"""KITTI-style scene-flow, depth and odometry metrics."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from typing import NamedTuple

import numpy as np

from .lie import RigidTransform

ABS_THRESH = 3.0
REL_THRESH = 0.05
MIN_DEPTH = 1e-3
MAX_DEPTH = 80.0
DEFAULT_LENGTHS = (100, 200, 300, 400, 500, 600, 700, 800)


class MetricError(ValueError):
    pass


def _valid(shape, valid):
    if valid is None:
        return np.ones(shape, bool)
    valid = np.asarray(valid, bool)
    if valid.shape != shape:
        raise MetricError(f"valid mask shape {valid.shape} does not match {shape}")
    return valid


def _rate(mask, valid):
    n = int(valid.sum())
    if n == 0:
        raise MetricError("no valid pixels")
    return 100.0 * float((mask & valid).sum()) / n


def disparity_outlier_mask(pred, gt, valid=None, abs_thresh=ABS_THRESH, rel_thresh=REL_THRESH):
    """Outlier iff the error exceeds 3 px and 5% of the ground truth (by default)."""
    pred = np.asarray(pred, dtype=float)
    gt = np.asarray(gt, dtype=float)
    if pred.shape != gt.shape:
        raise MetricError(f"shape mismatch: {pred.shape} vs {gt.shape}")
    valid = _valid(gt.shape, valid)
    err = np.abs(pred - gt)
    with np.errstate(divide="ignore", invalid="ignore"):
        out = (err > abs_thresh) & (err > rel_thresh * np.abs(gt))
    return out & valid


def disparity_outliers(pred, gt, valid=None, **thresholds):
    """D1-all / D2-all rate in percent over valid pixels."""
    valid = _valid(np.shape(gt), valid)
    return _rate(disparity_outlier_mask(pred, gt, valid, **thresholds), valid)


def _check_flow(pred, gt):
    pred = np.asarray(pred, dtype=float)
    gt = np.asarray(gt, dtype=float)
    if pred.shape != gt.shape or gt.shape[-1] != 2:
        raise MetricError(f"flow shapes must match and end in 2: {pred.shape} vs {gt.shape}")
    return pred, gt


def flow_outlier_mask(pred, gt, valid=None, abs_thresh=ABS_THRESH, rel_thresh=REL_THRESH):
    pred, gt = _check_flow(pred, gt)
    valid = _valid(gt.shape[:-1], valid)
    err = np.linalg.norm(pred - gt, axis=-1)
    mag = np.linalg.norm(gt, axis=-1)
    return (err > abs_thresh) & (err > rel_thresh * mag) & valid


def flow_outliers(pred, gt, valid=None, **thresholds):
    """F1-all rate in percent."""
    valid = _valid(np.shape(gt)[:-1], valid)
    return _rate(flow_outlier_mask(pred, gt, valid, **thresholds), valid)


def epe(pred, gt, mask=None):
    """Mean end-point error over ``mask``."""
    pred, gt = _check_flow(pred, gt)
    mask = _valid(gt.shape[:-1], mask)
    if not mask.any():
        raise MetricError("no valid pixels")
    return float(np.linalg.norm(pred - gt, axis=-1)[mask].mean())


def sceneflow_outliers(d1_out, d2_out, f1_out, valid=None):
    """SF-all: a pixel counts if it is an outlier in any of the three maps."""
    d1_out = np.asarray(d1_out, bool)
    d2_out = np.asarray(d2_out, bool)
    f1_out = np.asarray(f1_out, bool)
    if not d1_out.shape == d2_out.shape == f1_out.shape:
        raise MetricError("outlier masks are not aligned")
    valid = _valid(d1_out.shape, valid)
    return _rate(d1_out | d2_out | f1_out, valid)


class DepthMetrics(NamedTuple):
    abs_rel: float
    sq_rel: float
    rmse: float
    rmse_log: float
    a1: float
    a2: float
    a3: float


def depth_metrics(pred, gt, valid=None, min_depth=MIN_DEPTH, cap=MAX_DEPTH, median_scaling=False):
    """Standard depth errors over pixels whose ground truth lies in ``(min_depth, cap)``.

    Predictions are clamped to the same range. Median scaling is off by
    default since stereo training yields metric depth.
    """
    pred = np.asarray(pred, dtype=float)
    gt = np.asarray(gt, dtype=float)
    if pred.shape != gt.shape:
        raise MetricError(f"shape mismatch: {pred.shape} vs {gt.shape}")
    valid = _valid(gt.shape, valid) & np.isfinite(gt) & (gt > min_depth) & (gt < cap)
    if not valid.any():
        raise MetricError("no valid pixels")
    p = pred[valid]
    g = gt[valid]
    if median_scaling:
        p = p * np.median(g) / np.median(p)
    p = np.clip(p, min_depth, cap)
    thresh = np.maximum(p / g, g / p)
    return DepthMetrics(
        abs_rel=float(np.mean(np.abs(p - g) / g)),
        sq_rel=float(np.mean((p - g) ** 2 / g)),
        rmse=float(np.sqrt(np.mean((p - g) ** 2))),
        rmse_log=float(np.sqrt(np.mean((np.log(p) - np.log(g)) ** 2))),
        a1=float(np.mean(thresh < 1.25)),
        a2=float(np.mean(thresh < 1.25**2)),
        a3=float(np.mean(thresh < 1.25**3)),
    )


# ---------------------------------------------------------------------------
# trajectories
# ---------------------------------------------------------------------------


@dataclass
class Trajectory:
    """Camera-to-world poses as (n, 4, 4) matrices with frame indices."""

    poses: np.ndarray
    indices: np.ndarray = None

    def __post_init__(self):
        self.poses = np.asarray(self.poses, dtype=float)
        if self.poses.ndim != 3 or self.poses.shape[1:] != (4, 4):
            raise ValueError(f"poses must be (n, 4, 4), got {self.poses.shape}")
        if not np.all(np.isfinite(self.poses)):
            raise ValueError("poses must be finite")
        n = len(self.poses)
        self.indices = np.arange(n) if self.indices is None else np.asarray(self.indices, dtype=int)
        if self.indices.shape != (n,) or np.any(np.diff(self.indices) <= 0):
            raise ValueError("frame indices must be strictly increasing, one per pose")

    @classmethod
    def from_transforms(cls, transforms, indices=None):
        return cls(np.stack([T.matrix() for T in transforms]), indices)

    def __len__(self):
        return len(self.poses)

    @property
    def positions(self):
        return self.poses[:, :3, 3]

    def transform(self, i):
        return RigidTransform.from_matrix(self.poses[i])

    def path_distances(self):
        steps = np.linalg.norm(np.diff(self.positions, axis=0), axis=1)
        return np.concatenate([[0.0], np.cumsum(steps)])

    def aligned(self, scale, T):
        """Trajectory with positions mapped by ``x -> s R x + t`` and rotations by ``R``."""
        M = T.matrix()
        out = self.poses.copy()
        out[:, :3, :3] = M[:3, :3] @ self.poses[:, :3, :3]
        out[:, :3, 3] = scale * self.positions @ M[:3, :3].T + M[:3, 3]
        return Trajectory(out, self.indices.copy())


def _points(traj):
    if isinstance(traj, Trajectory):
        return traj.positions
    pts = np.asarray(traj, dtype=float)
    if pts.ndim != 2 or pts.shape[1] != 3:
        raise ValueError(f"expected (n, 3) positions, got {pts.shape}")
    return pts


def umeyama_align(pred, gt, with_scale=True):
    """Least-squares similarity ``gt ~ s R pred + t``; returns ``(s, RigidTransform(R, t))``."""
    src = _points(pred)
    dst = _points(gt)
    if src.shape != dst.shape:
        raise MetricError(f"trajectory lengths differ: {len(src)} vs {len(dst)}")
    n = len(src)
    if n < 3:
        raise MetricError("need at least 3 poses to align")
    mu_s = src.mean(axis=0)
    mu_d = dst.mean(axis=0)
    xs = src - mu_s
    xd = dst - mu_d
    sv = np.linalg.svd(xs, compute_uv=False)
    if sv[0] < 1e-12 or sv[1] < 1e-9 * sv[0]:
        raise MetricError("degenerate point set (coincident or collinear)")
    cov = xd.T @ xs / n
    U, D, Vt = np.linalg.svd(cov)
    S = np.eye(3)
    if np.linalg.det(U) * np.linalg.det(Vt) < 0:
        S[2, 2] = -1.0
    R = U @ S @ Vt
    var_s = np.sum(xs**2) / n
    scale = float(np.trace(np.diag(D) @ S) / var_s) if with_scale else 1.0
    t = mu_d - scale * R @ mu_s
    return scale, RigidTransform.from_rt(R, t)


def _rotation_angle(R):
    # atan2 form: same angle as acos((tr R - 1) / 2) without its loss of precision near 0
    c = 0.5 * (np.trace(R) - 1.0)
    s = 0.5 * np.linalg.norm([R[2, 1] - R[1, 2], R[0, 2] - R[2, 0], R[1, 0] - R[0, 1]])
    return float(np.arctan2(s, c))


def odometry_errors(pred, gt, lengths=DEFAULT_LENGTHS, step=1):
    """Average relative translation (%) and rotation (deg / 100 m) errors.

    For every start frame (every ``step``-th) and length ``L`` the end frame is
    the first one whose ground-truth path distance from the start reaches
    ``L``. Errors of the relative pose ``inv(pred_rel) @ gt_rel`` are divided
    by ``L``.
    """
    if len(pred) != len(gt):
        raise MetricError(f"trajectory lengths differ: {len(pred)} vs {len(gt)}")
    P = pred.poses
    G = gt.poses
    dist = gt.path_distances()
    t_errs, r_errs = [], []
    for first in range(0, len(gt), step):
        for L in lengths:
            ahead = np.nonzero(dist[first:] - dist[first] >= L)[0]
            if ahead.size == 0:
                continue
            last = first + int(ahead[0])
            gt_rel = np.linalg.inv(G[first]) @ G[last]
            pred_rel = np.linalg.inv(P[first]) @ P[last]
            E = np.linalg.inv(pred_rel) @ gt_rel
            t_errs.append(np.linalg.norm(E[:3, 3]) / L)
            r_errs.append(_rotation_angle(E[:3, :3]) / L)
    if not t_errs:
        raise MetricError(f"no subsequence of the requested lengths {tuple(lengths)} exists")
    return 100.0 * float(np.mean(t_errs)), float(np.degrees(np.mean(r_errs)) * 100.0)


# ---------------------------------------------------------------------------
# reports
# ---------------------------------------------------------------------------


@dataclass
class MetricReport:
    d1_all: float | None = None
    d2_all: float | None = None
    f1_all: float | None = None
    sf_all: float | None = None
    epe_all: float | None = None
    epe_noc: float | None = None
    epe_occ: float | None = None
    abs_rel: float | None = None
    sq_rel: float | None = None
    rmse: float | None = None
    rmse_log: float | None = None
    a1: float | None = None
    a2: float | None = None
    a3: float | None = None
    t_err: float | None = None
    r_err: float | None = None
    extra: dict = field(default_factory=dict)

    def to_dict(self, drop_empty=True):
        d = asdict(self)
        if drop_empty:
            d = {k: v for k, v in d.items() if v is not None and v != {}}
        return d

    def to_json(self, **kw):
        return json.dumps(self.to_dict(), indent=kw.pop("indent", 2), **kw)

    def to_table(self):
        rows = [(k, v) for k, v in self.to_dict().items() if k != "extra"]
        width = max((len(k) for k, _ in rows), default=0)
        return "\n".join(f"{k:<{width}}  {v:>12.6f}" for k, v in rows)


def evaluate_sceneflow(pred_d1, pred_d2, pred_flow, gt_d1, gt_d2, gt_flow, valid=None, occluded=None, **thresholds):
    """D1/D2/F1/SF-all rates and EPE splits for one frame pair.

    ``pred_d2``/``gt_d2`` are second-frame disparities registered to frame 1.
    ``occluded`` splits EPE into noc/occ parts when given.
    """
    valid = _valid(np.shape(gt_d1), valid)
    d1 = disparity_outlier_mask(pred_d1, gt_d1, valid, **thresholds)
    d2 = disparity_outlier_mask(pred_d2, gt_d2, valid, **thresholds)
    f1 = flow_outlier_mask(pred_flow, gt_flow, valid, **thresholds)
    rep = MetricReport(
        d1_all=_rate(d1, valid),
        d2_all=_rate(d2, valid),
        f1_all=_rate(f1, valid),
        sf_all=_rate(d1 | d2 | f1, valid),
        epe_all=epe(pred_flow, gt_flow, valid),
    )
    if occluded is not None:
        occ = np.asarray(occluded, bool)
        if (valid & ~occ).any():
            rep.epe_noc = epe(pred_flow, gt_flow, valid & ~occ)
        if (valid & occ).any():
            rep.epe_occ = epe(pred_flow, gt_flow, valid & occ)
    return rep


def evaluate_depth(pred, gt, valid=None, **kw):
    return MetricReport(**depth_metrics(pred, gt, valid, **kw)._asdict())


def evaluate_odometry(pred, gt, lengths=DEFAULT_LENGTHS, align=True, with_scale=True):
    """Odometry errors, optionally after a similarity alignment of ``pred`` onto ``gt``."""
    extra = {}
    if align:
        scale, T = umeyama_align(pred, gt, with_scale)
        pred = pred.aligned(scale, T)
        extra["scale"] = scale
    t_err, r_err = odometry_errors(pred, gt, lengths)
    return MetricReport(t_err=t_err, r_err=r_err, extra=extra)
