"""Estimator-style wrappers (fit / transform / predict) over the functional core.

The functional modules stay the source of truth; these classes only hold
hyperparameters, validate inputs and keep fitted state in trailing-underscore
attributes so they behave with ``get_params``/``set_params``/``clone``.
"""
from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from . import lie
from ._validation import check_frame, check_mask, check_poses, check_twists, positions
from .evaluation import DEFAULT_LENGTHS, Trajectory, odometry_errors, umeyama_align
from .losses import LossWeights
from .motion_field import EPS_MASS, aggregate_twist
from .refine import BlockParams, OptimizerConfig, refine, upsample_params


class EgoMotionAggregator(TransformerMixin, BaseEstimator):
    """Mask-weighted twist mean of a dense motion field.

    ``fit(X, mask)`` stores ``twist_`` (6,) and ``ego_motion_``;
    ``transform`` returns the per-pixel residual twists ``X - twist_``;
    ``predict`` returns the ego-motion as a 4x4 matrix.
    """

    def __init__(self, eps_mass=EPS_MASS):
        self.eps_mass = eps_mass

    def fit(self, X, y=None, mask=None):
        field = check_twists(X)
        m = check_mask(mask, field.shape)
        self.twist_ = aggregate_twist(field, m, self.eps_mass)
        self.ego_motion_ = lie.exp(self.twist_)
        self.n_support_ = int(np.count_nonzero(m * field.valid))
        return self

    def transform(self, X):
        check_is_fitted(self, "twist_")
        field = check_twists(X)
        return field.twists - self.twist_

    def predict(self, X=None):
        check_is_fitted(self, "twist_")
        return self.ego_motion_.matrix()


class SceneFlowRefiner(BaseEstimator):
    """Block-parameterised loss minimisation on one frame pair.

    ``fit(frame)`` runs the optimizer; ``predict`` returns the dense scene
    flow ``(H, W, 3)`` as (du, dv, d_depth) and ``transform`` the rigidity
    mask. ``weights`` and ``optimizer`` default to the library defaults.
    """

    def __init__(self, block_size=8, weights=None, optimizer=None):
        self.block_size = block_size
        self.weights = weights
        self.optimizer = optimizer

    def fit(self, X, y=None, noc_mask=None, outlier_mask=None, init=None):
        frame = check_frame(X)
        if int(self.block_size) != self.block_size or self.block_size < 1:
            raise ValueError(f"block_size must be a positive integer, got {self.block_size}")
        H, W = frame.shape
        masks = (
            None if noc_mask is None else check_mask(noc_mask, (H, W), "noc_mask"),
            None if outlier_mask is None else check_mask(outlier_mask, (H, W), "outlier_mask"),
        )
        if init is None:
            init = BlockParams.identity(H, W, self.block_size)
        elif not isinstance(init, BlockParams):
            field = check_twists(init[0])
            init = BlockParams.from_field(field, check_mask(init[1], field.shape), self.block_size)
        weights = LossWeights() if self.weights is None else self.weights
        cfg = OptimizerConfig() if self.optimizer is None else self.optimizer
        self.result_ = refine(frame, init, masks, weights, cfg)
        self.params_ = self.result_.params
        self.field_, self.mask_ = upsample_params(self.params_, H, W)
        self.history_ = self.result_.history
        self.status_ = self.result_.status
        return self

    def predict(self, X=None):
        check_is_fitted(self, "result_")
        sf = self.result_.estimate.scene_flow
        return np.stack([sf.u, sf.v, sf.delta_d], axis=-1)

    def transform(self, X=None):
        check_is_fitted(self, "result_")
        return self.mask_

    def fit_transform(self, X, y=None, **fit_params):
        return self.fit(X, y, **fit_params).transform(X)


class TrajectoryAligner(TransformerMixin, BaseEstimator):
    """Least-squares similarity (or rigid) alignment of a trajectory onto a reference."""

    def __init__(self, with_scale=True, lengths=DEFAULT_LENGTHS):
        self.with_scale = with_scale
        self.lengths = lengths

    def fit(self, X, y):
        src = check_poses(X, "X")
        dst = check_poses(y, "y")
        self.scale_, self.transform_ = umeyama_align(positions(src), positions(dst), self.with_scale)
        return self

    def transform(self, X):
        check_is_fitted(self, "transform_")
        arr = check_poses(X, "X")
        if arr.ndim == 2:
            M = self.transform_.matrix()
            return self.scale_ * arr @ M[:3, :3].T + M[:3, 3]
        return Trajectory(arr).aligned(self.scale_, self.transform_).poses

    def score(self, X, y):
        """Negative translational drift (percent) of the aligned trajectory."""
        aligned = self.transform(X)
        t_err, _ = odometry_errors(Trajectory(aligned), Trajectory(check_poses(y, "y")), self.lengths)
        return -t_err
