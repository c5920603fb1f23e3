"""Dense SE3 motion fields and mask-weighted ego-motion aggregation."""
from __future__ import annotations

import logging
import math

import numpy as np

from . import lie

logger = logging.getLogger(__name__)

EPS_MASS = 1e-6


class EmptySupportError(ValueError):
    """Rigidity mask carries no mass; ego-motion is undefined."""


class SE3Field:
    """A rigid transform per pixel, stored in log coordinates.

    ``twists`` is ``(H, W, 6)``; rotation matrices and translations are
    derived lazily. Entries flagged invalid (rotation angle near pi when the
    field was built from transforms) carry a zero twist and are excluded from
    aggregation.
    """

    def __init__(self, twists, valid=None, rotations=None, translations=None):
        twists = np.asarray(twists, dtype=float)
        if twists.ndim != 3 or twists.shape[-1] != 6:
            raise ValueError(f"twist grid must be (H, W, 6), got {twists.shape}")
        self.twists = twists
        self.valid = np.ones(twists.shape[:2], bool) if valid is None else np.asarray(valid, bool)
        self._rotations = rotations
        self._translations = translations

    @classmethod
    def from_transforms(cls, quats, translations):
        quats = np.asarray(quats, dtype=float)
        translations = np.asarray(translations, dtype=float)
        bad = lie.near_pi(quats)
        twists = lie.log_map(quats, translations, check=False)
        twists[bad] = 0.0
        if np.any(bad):
            logger.debug("%d field entries near angle pi marked invalid", int(bad.sum()))
        return cls(twists, ~bad, lie.quat_to_matrix(quats), translations.copy())

    @property
    def shape(self):
        return self.twists.shape[:2]

    @property
    def n_invalid(self):
        return int(np.count_nonzero(~self.valid))

    def _materialize(self):
        q, t = lie.exp_map(self.twists)
        self._rotations = lie.quat_to_matrix(q)
        self._translations = t

    @property
    def rotations(self):
        if self._rotations is None:
            self._materialize()
        return self._rotations

    @property
    def translations(self):
        if self._translations is None:
            self._materialize()
        return self._translations

    def transform_at(self, row, col):
        return lie.RigidTransform.from_rt(self.rotations[row, col], self.translations[row, col])


def field_exp(twists):
    return SE3Field(np.array(twists, dtype=float))


def field_log(field):
    return field.twists.copy()


def field_from_constant(T, height, width):
    """Constant field; rotations/translations are T's own, not a log/exp round trip."""
    xi = lie.log(T)
    twists = np.broadcast_to(xi, (height, width, 6)).copy()
    R = np.broadcast_to(T.rotation_matrix, (height, width, 3, 3)).copy()
    t = np.broadcast_to(T.translation, (height, width, 3)).copy()
    return SE3Field(twists, None, R, t)


def _check_mask(field, mask):
    mask = np.asarray(mask, dtype=float)
    if mask.shape != field.shape:
        raise ValueError(f"mask shape {mask.shape} does not match field shape {field.shape}")
    if np.any(~np.isfinite(mask)) or np.any(mask < 0) or np.any(mask > 1):
        raise ValueError("mask values must lie in [0, 1]")
    return np.where(field.valid, mask, 0.0)


def _fsum_columns(values):
    return np.array([math.fsum(col) for col in values.T.tolist()])


def _weighted_mean(field, mask, eps_mass):
    w = _check_mask(field, mask).reshape(-1)
    mass = math.fsum(w.tolist())
    if mass <= eps_mass:
        raise EmptySupportError(f"rigidity mask mass {mass:.3g} is below {eps_mass:g}")
    xi = field.twists.reshape(-1, 6)
    return _fsum_columns(xi * w[:, None]) / mass, w, mass


def aggregate_twist(field, mask, eps_mass=EPS_MASS):
    """Mask-weighted mean of per-pixel log coordinates."""
    return _weighted_mean(field, mask, eps_mass)[0]


def aggregate_ego_motion(field, mask, eps_mass=EPS_MASS):
    """Ego-motion as ``Exp(sum(M * Log T) / sum(M))``."""
    return lie.exp(aggregate_twist(field, mask, eps_mass))


def aggregate_gradients(field, mask, upstream, eps_mass=EPS_MASS):
    """Back-propagate ``dL/dxi_bar`` to the mask and the per-pixel twists.

    Returns ``(d_mask (H, W), d_twists (H, W, 6))``. Invalid field entries
    receive zero gradient.
    """
    upstream = np.asarray(upstream, dtype=float).reshape(6)
    xi_bar, w, mass = _weighted_mean(field, mask, eps_mass)
    xi = field.twists.reshape(-1, 6)
    d_mask = ((xi - xi_bar) @ upstream) / mass
    d_mask = np.where(field.valid.reshape(-1), d_mask, 0.0)
    d_twists = (w / mass)[:, None] * upstream[None, :]
    H, W = field.shape
    return d_mask.reshape(H, W), d_twists.reshape(H, W, 6)
