"""Direct minimisation of the weighted multi-iteration loss over a block field.

Parameters are a coarse grid of twists and rigidity-mask logits (bilinearly
upsampled to pixels) plus one global depth log-scale. Gradients combine

* closed forms for the motion-consistency, mask and twist-smoothness terms,
* the analytic Jacobian of the mask-weighted aggregation for everything that
  depends on the ego-motion,
* central finite differences for warp-dependent terms, taken per pixel on
  the flow and depth change (pixels on a stride-3 lattice are probed
  together) and chained through the per-pixel Jacobian of the synthesis.

The objective keeps a ring buffer of the last ``N`` accepted iterates; each
one contributes its loss weighted by ``zeta^(N-i)``, evaluated at the current
depth scale. With ``detach_depth`` the depth scale only receives gradient
from the newest iterate and the spatial term.
"""
from __future__ import annotations

import csv
import logging
from collections import deque
from dataclasses import dataclass, field, fields

import numpy as np

from . import lie
from . import camera as cg
from .camera import rigid_flow
from .losses import (
    TERMS,
    LossWeights,
    MotionEstimate,
    combine_iterations,
    ego_photometric_error,
    geometric_map_from_flow,
    iteration_terms,
    loss_spatial_photometric,
    photometric_map,
    smoothness_grad,
)
from .motion_field import SE3Field, aggregate_gradients
from .warp import outlier_mask

logger = logging.getLogger(__name__)

class RefineError(RuntimeError):
    pass


@dataclass
class BlockParams:
    block_size: int
    twists: np.ndarray
    logits: np.ndarray
    depth_log_scale: float = 0.0

    def __post_init__(self):
        if self.block_size < 1:
            raise ValueError("block size must be at least 1")
        self.twists = np.asarray(self.twists, dtype=float)
        self.logits = np.asarray(self.logits, dtype=float)
        if self.twists.shape[:2] != self.logits.shape or self.twists.shape[-1] != 6:
            raise ValueError("twist grid must be (Hb, Wb, 6) matching the logit grid (Hb, Wb)")

    @staticmethod
    def grid_shape(height, width, block_size):
        return -(-height // block_size), -(-width // block_size)

    @classmethod
    def identity(cls, height, width, block_size=8, logit=0.0):
        hb, wb = cls.grid_shape(height, width, block_size)
        return cls(block_size, np.zeros((hb, wb, 6)), np.full((hb, wb), float(logit)))

    @classmethod
    def from_field(cls, field, mask, block_size=8, depth_log_scale=0.0, clip=1e-3):
        """Block averages of a per-pixel field and mask (mask clipped away from 0/1)."""
        H, W = field.shape
        hb, wb = cls.grid_shape(H, W, block_size)
        tw = np.zeros((hb, wb, 6))
        lg = np.zeros((hb, wb))
        m = np.clip(np.asarray(mask, dtype=float), clip, 1.0 - clip)
        for i in range(hb):
            for j in range(wb):
                sl = (slice(i * block_size, (i + 1) * block_size), slice(j * block_size, (j + 1) * block_size))
                tw[i, j] = field.twists[sl].reshape(-1, 6).mean(axis=0)
                p = m[sl].mean()
                lg[i, j] = np.log(p / (1.0 - p))
        return cls(block_size, tw, lg, depth_log_scale)

    @property
    def n_motion(self):
        return self.twists.size + self.logits.size

    def to_vector(self):
        return np.concatenate([self.twists.ravel(), self.logits.ravel(), [self.depth_log_scale]])

    def from_vector(self, vec):
        nt, nl = self.twists.size, self.logits.size
        return BlockParams(
            self.block_size,
            vec[:nt].reshape(self.twists.shape),
            vec[nt:nt + nl].reshape(self.logits.shape),
            float(vec[nt + nl]),
        )

    def copy(self):
        return BlockParams(self.block_size, self.twists.copy(), self.logits.copy(), self.depth_log_scale)


@dataclass(frozen=True)
class OptimizerConfig:
    max_steps: int = 300
    step_size: float = 1.0
    backtrack: float = 0.5
    max_backtracks: int = 25
    tol: float = 1e-7
    n_iters: int | None = None
    detach_depth: bool = True
    fd_step: float = 1e-4
    optimize_depth: bool = True
    armijo: float = 1e-4
    memory: int = 8
    full_image: bool = True
    snapshot_weights: tuple | None = None
    scales: tuple = (1.0, 0.125, 30.0, 1.0)

    def __post_init__(self):
        if not self.step_size > 0:
            raise ValueError("step size must be positive")
        if not self.tol > 0:
            raise ValueError("tolerance must be positive")
        if not 0 < self.backtrack < 1:
            raise ValueError("backtracking factor must lie in (0, 1)")
        if not self.fd_step > 0:
            raise ValueError("finite-difference step must be positive")
        if len(self.scales) != 4 or not all(v > 0 for v in self.scales):
            raise ValueError("scales must be four positive numbers (translation, rotation, logit, depth)")

    def to_dict(self):
        return {f.name: getattr(self, f.name) for f in fields(self)}


@dataclass
class RefineResult:
    params: BlockParams
    history: list
    estimate: MotionEstimate
    status: str
    accepted_steps: int

    @property
    def converged(self):
        return self.status in ("converged", "max_steps")

    def write_csv(self, path):
        write_history_csv(path, self.history)


CSV_COLUMNS = ("step", "total", "L_p", "L_p_ego", "L_g", "L_s", "L_c", "L_m", "L_d", "step_size")


def write_history_csv(path, history):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(CSV_COLUMNS)
        for row in history:
            writer.writerow([row["step"]] + [repr(float(row[c])) for c in CSV_COLUMNS[1:]])


def upsample_matrix(n_pixels, n_blocks, block_size):
    """Bilinear interpolation weights from block centres to pixel centres."""
    U = np.zeros((n_pixels, n_blocks))
    pos = (np.arange(n_pixels) + 0.5) / block_size - 0.5
    pos = np.clip(pos, 0.0, n_blocks - 1)
    i0 = np.floor(pos).astype(int)
    i0 = np.minimum(i0, max(n_blocks - 2, 0))
    frac = pos - i0
    rows = np.arange(n_pixels)
    U[rows, i0] += 1.0 - frac
    if n_blocks > 1:
        U[rows, i0 + 1] += frac
    return U


def _upsample(Uy, Ux, grid):
    if grid.ndim == 2:
        return Uy @ grid @ Ux.T
    tmp = np.tensordot(Uy, grid, axes=(1, 0))
    return np.moveaxis(np.tensordot(tmp, Ux, axes=(1, 1)), -1, 1)


def _downsample(Uy, Ux, pixel_grad):
    if pixel_grad.ndim == 2:
        return Uy.T @ pixel_grad @ Ux
    tmp = np.tensordot(Uy, pixel_grad, axes=(0, 0))
    return np.moveaxis(np.tensordot(tmp, Ux, axes=(1, 0)), -1, 1)


def sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * np.asarray(x, dtype=float)))


def upsample_params(params, height, width):
    """Per-pixel SE3 field and soft mask from block parameters."""
    hb, wb = params.logits.shape
    Uy = upsample_matrix(height, hb, params.block_size)
    Ux = upsample_matrix(width, wb, params.block_size)
    field = SE3Field(_upsample(Uy, Ux, params.twists))
    return field, sigmoid(_upsample(Uy, Ux, params.logits))


def finite_diff_gradient(loss_fn, x, h=1e-6):
    """Central differences of a scalar function of a vector."""
    x = np.asarray(x, dtype=float)
    if not h > 0:
        raise ValueError("finite-difference step must be positive")
    g = np.zeros_like(x)
    flat = x.reshape(-1)
    gf = g.reshape(-1)
    for k in range(flat.size):
        xp = flat.copy()
        xm = flat.copy()
        xp[k] += h
        xm[k] -= h
        fp = loss_fn(xp.reshape(x.shape))
        fm = loss_fn(xm.reshape(x.shape))
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise FloatingPointError(f"non-finite loss while probing coordinate {k}")
        gf[k] = (fp - fm) / (2.0 * h)
    return g


@dataclass
class _Snapshot:
    field: SE3Field
    mask: np.ndarray
    cache: dict = field(default_factory=dict)


class _Objective:
    def __init__(self, frame, weights, cfg, m_noc, m_ol, block_size, grid_shape):
        self.frame = frame
        self.weights = weights
        self.cfg = cfg
        H, W = frame.shape
        self.H, self.W = H, W
        self.m_noc = np.ones((H, W)) if m_noc is None else np.asarray(m_noc, dtype=float)
        # None: recomputed for every iterate from its ego-flow error, held fixed in the gradient
        self.m_ol = None if m_ol is None else np.asarray(m_ol, dtype=float)
        hb, wb = grid_shape
        self.Uy = upsample_matrix(H, hb, block_size)
        self.Ux = upsample_matrix(W, wb, block_size)
        self.n_iters = cfg.n_iters or weights.n_iters
        if cfg.snapshot_weights is not None:
            if len(cfg.snapshot_weights) != self.n_iters:
                raise ValueError("snapshot_weights length must equal the iteration count")
            self.iter_weights = np.asarray(cfg.snapshot_weights, dtype=float)
        else:
            self.iter_weights = weights.iteration_weights(self.n_iters)
        self._ld_cache = {}

    # -- building blocks -------------------------------------------------

    def snapshot(self, params):
        f = SE3Field(_upsample(self.Uy, self.Ux, params.twists))
        return _Snapshot(f, sigmoid(_upsample(self.Uy, self.Ux, params.logits)))

    def scaled_frame(self, log_scale):
        return self.frame.with_depth_scale(log_scale)

    def L_d(self, log_scale):
        if self.frame.stereo_right is None:
            return 0.0
        if log_scale not in self._ld_cache:
            self._ld_cache[log_scale] = loss_spatial_photometric(
                self.scaled_frame(log_scale), self.weights.alpha, self.cfg.full_image
            )
        return self._ld_cache[log_scale]

    def terms(self, snap, log_scale):
        if log_scale not in snap.cache:
            frame = self.scaled_frame(log_scale)
            est = MotionEstimate.from_frame(frame, snap.field, snap.mask)
            snap.cache[log_scale] = iteration_terms(
                frame, est, self.weights, self.m_noc, self.m_ol, self.cfg.full_image
            )
        return snap.cache[log_scale]

    def breakdown(self, snaps, log_scale):
        per_iter = [self.terms(s, log_scale) for s in snaps]
        return combine_iterations(per_iter, self.L_d(log_scale), self.weights, self.iter_weights)

    # -- gradient ----------------------------------------------------------

    def outlier_mask(self, est, frame):
        if self.m_ol is not None:
            return self.m_ol
        w = self.weights
        pe, ok = ego_photometric_error(frame, est, w.alpha, self.cfg.full_image)
        return outlier_mask(pe, ok & (self.m_noc > 0), w.outlier_lo, w.outlier_hi).astype(float)

    def ego_loss(self, xi, frame, m_ol):
        w = self.weights
        flow, ok = rigid_flow(frame.D1, lie.exp(xi), frame.camera)
        return float(photometric_map(frame, flow, ok, self.m_noc * m_ol, w.alpha, self.cfg.full_image).sum())

    def flow_jacobian(self, twists_px, frame):
        """Per-pixel d(u, v, delta_d)/d(twist), shape (H, W, 3, 6), by central differences."""
        h = self.cfg.fd_step
        J = np.zeros((self.H, self.W, 3, 6))
        for c in range(6):
            e = np.zeros(6)
            e[c] = h
            sp = cg.synthesize_scene_flow(frame.D1, SE3Field(twists_px + e), frame.camera)
            sm = cg.synthesize_scene_flow(frame.D1, SE3Field(twists_px - e), frame.camera)
            J[..., 0, c] = (sp.u - sm.u) / (2.0 * h)
            J[..., 1, c] = (sp.v - sm.v) / (2.0 * h)
            J[..., 2, c] = (sp.delta_d - sm.delta_d) / (2.0 * h)
        return J

    def warp_gradient(self, sf, frame):
        """Per-pixel gradient of the warp-dependent terms w.r.t. (u, v, delta_d).

        The photometric map at a pixel depends on the flow of its 3x3
        neighbourhood (SSIM window), so pixels on a stride-3 lattice are probed
        together and each reads the difference inside its own 3x3 block. The
        geometric term is pointwise and is probed on all pixels at once.
        """
        w = self.weights
        h = self.cfg.fd_step
        H, W = self.H, self.W
        flow = sf.flow
        full = self.cfg.full_image
        g = np.zeros((H, W, 3))
        pad = ((1, 1), (1, 1))
        for a in range(3):
            for b in range(3):
                sel = np.zeros((H, W), bool)
                sel[a::3, b::3] = True
                for c in range(2):
                    d = np.zeros((H, W, 2))
                    d[..., c] = np.where(sel, h, 0.0)
                    diff = photometric_map(frame, flow + d, sf.valid, self.m_noc, w.alpha, full)
                    diff = diff - photometric_map(frame, flow - d, sf.valid, self.m_noc, w.alpha, full)
                    # sum each probed pixel's 3x3 neighbourhood via a padded block view
                    P = np.pad(diff, pad)
                    rows = np.arange(a, H, 3)
                    cols = np.arange(b, W, 3)
                    acc = np.zeros((rows.size, cols.size))
                    for dy in range(3):
                        for dx in range(3):
                            acc += P[rows[:, None] + dy, cols[None, :] + dx]
                    g[a::3, b::3, c] += acc / (2.0 * h)
        if w.lambda_g:
            for c in range(3):
                d = np.zeros((H, W, 3))
                d[..., c] = h
                mp = geometric_map_from_flow(frame, flow + d[..., :2], sf.delta_d + d[..., 2], sf.valid, self.m_noc, full)
                mm = geometric_map_from_flow(frame, flow - d[..., :2], sf.delta_d - d[..., 2], sf.valid, self.m_noc, full)
                g[..., c] += w.lambda_g * (mp - mm) / (2.0 * h)
        if w.lambda_s * w.lambda_sf:
            g[..., :2] += w.lambda_s * w.lambda_sf * smoothness_grad(flow, frame.I1, 2, w.beta)
        return np.where(sf.valid[..., None], g, 0.0)

    def gradient(self, params, snap, history_snaps):
        """Gradient (detached as configured) of the objective at ``params``."""
        w = self.weights
        h = self.cfg.fd_step
        frame = self.scaled_frame(params.depth_log_scale)
        wN = self.iter_weights[-1]
        H, W = self.H, self.W
        base_twists = snap.field.twists
        mask = snap.mask
        est = MotionEstimate.from_frame(frame, snap.field, mask)

        g_flow = self.warp_gradient(est.scene_flow, frame)
        J = self.flow_jacobian(base_twists, frame)
        d_twist_px = np.einsum("yxk,yxkc->yxc", g_flow, J)
        d_mask_px = np.zeros((H, W))

        # ego-photometric term through the aggregation
        xi_bar = est.ego_twist
        m_ol = self.outlier_mask(est, frame)
        g_ego = np.zeros(6)
        for c in range(6):
            e = np.zeros(6)
            e[c] = h
            g_ego[c] = (self.ego_loss(xi_bar + e, frame, m_ol) - self.ego_loss(xi_bar - e, frame, m_ol)) / (2.0 * h)

        # motion consistency, closed form
        resid = base_twists - xi_bar
        sgn = np.sign(resid)
        n = H * W
        d_mask_px += w.lambda_c * np.abs(resid).sum(axis=-1) / n
        d_twist_px += w.lambda_c * mask[..., None] * sgn / n
        g_ego = g_ego - w.lambda_c * (mask[..., None] * sgn).reshape(-1, 6).sum(axis=0) / n

        dm, dt = aggregate_gradients(snap.field, mask, g_ego)
        d_mask_px += dm
        d_twist_px += dt

        # mask regularisation and twist smoothness
        d_mask_px += -w.lambda_m * (1.0 + w.gamma) / (w.gamma + mask) ** 2 / n
        if w.lambda_s * w.lambda_st:
            d_twist_px += w.lambda_s * w.lambda_st * smoothness_grad(base_twists, frame.I1, 1, w.beta)

        grad = params.copy()
        grad.twists = wN * _downsample(self.Uy, self.Ux, d_twist_px)
        grad.logits = wN * _downsample(self.Uy, self.Ux, d_mask_px * mask * (1.0 - mask))
        grad.depth_log_scale = self.depth_gradient(params, snap, history_snaps) if self.cfg.optimize_depth else 0.0
        return grad.to_vector()

    def depth_gradient(self, params, snap, history_snaps):
        h = self.cfg.fd_step
        s = params.depth_log_scale
        iw = self.iter_weights

        def partial(scale):
            val = self.L_d(scale)
            t = self.terms(snap, scale)
            val += iw[-1] * _weighted(t, self.weights)
            if not self.cfg.detach_depth:
                for wi, hs in zip(iw[:-1], history_snaps):
                    val += wi * _weighted(self.terms(hs, scale), self.weights)
            return val

        return (partial(s + h) - partial(s - h)) / (2.0 * h)


def _weighted(terms, weights):
    from .losses import weighted_iteration_sum

    return weighted_iteration_sum(terms, weights)


def _lbfgs_direction(grad, s_hist, y_hist):
    q = grad.copy()
    alphas = []
    for s, y in reversed(list(zip(s_hist, y_hist))):
        rho = 1.0 / (y @ s)
        a = rho * (s @ q)
        alphas.append((rho, a))
        q -= a * y
    if s_hist:
        s, y = s_hist[-1], y_hist[-1]
        q *= (s @ y) / (y @ y)
    for (s, y), (rho, a) in zip(zip(s_hist, y_hist), reversed(alphas)):
        b = rho * (y @ q)
        q += (a - b) * s
    return -q


def refine(frame, init, masks=(None, None), weights=None, cfg=None, callback=None):
    """Minimise the weighted multi-iteration loss from ``init``.

    Returns a :class:`RefineResult`. Accepted steps strictly decrease the
    recorded total; the status is ``converged`` (decrease below ``tol``),
    ``max_steps`` or ``line_search_failed``.
    """
    weights = LossWeights() if weights is None else weights
    cfg = OptimizerConfig() if cfg is None else cfg
    H, W = frame.shape
    grid_shape = BlockParams.grid_shape(H, W, init.block_size)
    if init.logits.shape != grid_shape:
        raise ValueError(f"block grid {init.logits.shape} does not match image {H}x{W} at B={init.block_size}")
    m_noc, m_ol = masks
    obj = _Objective(frame, weights, cfg, m_noc, m_ol, init.block_size, grid_shape)

    params = init.copy()
    snap = obj.snapshot(params)
    buffer = deque([snap] * obj.n_iters, maxlen=obj.n_iters)
    current = obj.breakdown(list(buffer), params.depth_log_scale)
    if not np.isfinite(current.total):
        raise RefineError("loss is not finite at the initial parameters")

    history = [_history_row(0, current, 0.0)]
    s_hist, y_hist = [], []
    coords = _SearchCoords(params, cfg.scales)
    x = coords.initial()
    grad = coords.pull(obj.gradient(params, snap, list(buffer)[1:]))
    if not cfg.optimize_depth:
        grad[-1] = 0.0
    status = "max_steps"
    step_size = cfg.step_size
    accepted = 0

    for step in range(1, cfg.max_steps + 1):
        direction = _lbfgs_direction(grad, s_hist, y_hist)
        slope = grad @ direction
        if not slope < 0:
            direction = -grad
            slope = grad @ direction
            s_hist.clear()
            y_hist.clear()
        t = step_size if s_hist else min(step_size, 1.0 / max(np.abs(grad).max(), 1e-12) * 1e-3)
        t = max(t, 1e-12)
        found = False
        for _ in range(cfg.max_backtracks):
            cand = params.from_vector(coords.push(x + t * direction))
            cand_snap = obj.snapshot(cand)
            cand_buffer = list(buffer)[1:] + [cand_snap]
            trial = obj.breakdown(cand_buffer, cand.depth_log_scale)
            if np.isfinite(trial.total) and trial.total < current.total + cfg.armijo * t * slope:
                found = True
                break
            t *= cfg.backtrack
        if not found:
            if s_hist:
                # stale curvature pairs; retry from a steepest-descent step
                s_hist.clear()
                y_hist.clear()
                step_size = cfg.step_size
                continue
            # the shortest probe barely moved the loss: numerically stationary
            stalled = np.isfinite(trial.total) and abs(trial.total - current.total) < cfg.tol
            status = "converged" if stalled else "line_search_failed"
            break
        if current.total - trial.total < cfg.tol:
            if s_hist:
                s_hist.clear()
                y_hist.clear()
                step_size = cfg.step_size
                continue
            status = "converged"
            break
        x_new = x + t * direction
        params, snap, current = cand, cand_snap, trial
        buffer.append(cand_snap)
        accepted += 1
        history.append(_history_row(step, current, t))
        if callback is not None:
            callback(step, params, current)
        g_new = coords.pull(obj.gradient(params, snap, list(buffer)[1:]))
        if not cfg.optimize_depth:
            g_new[-1] = 0.0
        sv, yv = x_new - x, g_new - grad
        if sv @ yv > 1e-12 * np.linalg.norm(sv) * np.linalg.norm(yv):
            s_hist.append(sv)
            y_hist.append(yv)
            if len(s_hist) > cfg.memory:
                s_hist.pop(0)
                y_hist.pop(0)
        x, grad = x_new, g_new
        step_size = 1.0

    final_frame = obj.scaled_frame(params.depth_log_scale)
    estimate = MotionEstimate.from_frame(final_frame, snap.field, snap.mask)
    logger.info("refine finished: %s after %d accepted steps, total %.6g", status, accepted, current.total)
    return RefineResult(params, history, estimate, status, accepted)


class _SearchCoords:
    """Linear change of variables in which the line search runs.

    Every block value is a shared component plus a per-block residual, each
    measured in per-quantity units (translation, rotation, logit, depth).
    The shared component collects gradient from all blocks, which lets
    coherent moves of the whole field make progress when per-block signals
    are dominated by L1 sign noise. The map is redundant but linear, so
    descent in these coordinates is descent in the parameters.
    """

    def __init__(self, params, scales):
        v_scale, w_scale, logit_scale, depth_scale = scales
        self.tw_shape = params.twists.shape
        self.lg_shape = params.logits.shape
        unit = np.empty(6)
        unit[:3] = v_scale
        unit[3:] = w_scale
        self.tw_unit = unit
        self.lg_unit = logit_scale
        self.depth_unit = depth_scale
        self.n_tw = params.twists.size
        self.n_lg = params.logits.size
        self.base = params.to_vector()
        self.shared_logit = 0.0

    def initial(self):
        return np.zeros(6 + 1 + self.n_tw + self.n_lg + 1)

    def _split(self, y):
        g_tw, g_lg = y[:6], y[6]
        r = y[7:]
        return g_tw, g_lg, r[: self.n_tw].reshape(self.tw_shape), r[self.n_tw: self.n_tw + self.n_lg], r[-1]

    def push(self, y):
        """Parameter vector for search coordinates ``y`` (offset from the start)."""
        g_tw, g_lg, r_tw, r_lg, d = self._split(y)
        tw = (r_tw + g_tw) * self.tw_unit
        lg = (r_lg + self.shared_logit * g_lg) * self.lg_unit
        return self.base + np.concatenate([tw.ravel(), lg.ravel(), [d * self.depth_unit]])

    def pull(self, grad):
        """Gradient in search coordinates from a parameter-space gradient."""
        tw = grad[: self.n_tw].reshape(self.tw_shape) * self.tw_unit
        lg = grad[self.n_tw: self.n_tw + self.n_lg] * self.lg_unit
        g_tw = tw.reshape(-1, 6).sum(axis=0)
        return np.concatenate([g_tw, [lg.sum() * self.shared_logit], tw.ravel(), lg, [grad[-1] * self.depth_unit]])


def _history_row(step, breakdown, step_size):
    row = {"step": step, "total": breakdown.total, "step_size": step_size}
    for name in TERMS + ("L_d",):
        row[name] = float(breakdown.contributions[name])
    return row
