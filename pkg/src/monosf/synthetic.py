"""Procedural ray-cast scenes with analytic ground truth.

A scene is a set of textured planes (static) and boxes (each with its own
rigid motion) seen by a moving stereo camera. Frame 1's left camera defines
world coordinates. Flows, depths, SE3 fields and visibility all come from
the geometry, never from image differencing.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from . import lie
from .camera import Z_EPS, PinholeCamera, pixel_grid
from .lie import RigidTransform
from .losses import MotionEstimate, SceneFrame
from .motion_field import SE3Field
from .warp import CropWindow

VISIBILITY_RTOL = 1e-6


class SceneError(ValueError):
    pass


def _reject_unknown(cls, data, where):
    allowed = {f.name for f in fields(cls)}
    unknown = set(data) - allowed
    if unknown:
        raise SceneError(f"unknown keys in {where}: {sorted(unknown)}")


@dataclass
class Texture:
    """Band-limited noise: a few random 3D sinusoids per colour channel."""

    min_wavelength: float = 2.5
    max_wavelength: float = 5.0
    components: int = 6
    amplitude: float = 0.4

    def sampler(self, seed):
        rng = np.random.default_rng(seed)
        n = self.components
        dirs = rng.normal(size=(3, n, 3))
        dirs /= np.linalg.norm(dirs, axis=-1, keepdims=True)
        freqs = 1.0 / rng.uniform(self.min_wavelength, self.max_wavelength, size=(3, n))
        kvec = 2.0 * np.pi * dirs * freqs[..., None]
        phase = rng.uniform(0.0, 2.0 * np.pi, size=(3, n))
        amp = rng.uniform(0.5, 1.0, size=(3, n))
        amp *= self.amplitude / amp.sum(axis=1, keepdims=True)
        base = rng.uniform(0.45, 0.55, size=3)

        def sample(points):
            arg = np.einsum("...d,cnd->...cn", points, kvec) + phase
            return base + np.einsum("...cn,cn->...c", np.sin(arg), amp)

        return sample


@dataclass
class Plane:
    """Static plane ``normal . p = offset`` in frame-1 camera coordinates."""

    normal: list = field(default_factory=lambda: [0.0, -0.25, -1.0])
    offset: float = -8.0
    texture: Texture = field(default_factory=Texture)


@dataclass
class Box:
    """Axis-aligned box in its own frame.

    The box moves between frames by rotating ``motion_rotation`` (axis-angle)
    about its centre and then translating by ``motion_translation``.
    """

    center: list = field(default_factory=lambda: [0.0, 0.0, 6.0])
    size: list = field(default_factory=lambda: [1.5, 1.5, 1.0])
    orientation: list = field(default_factory=lambda: [0.0, 0.0, 0.0])
    motion_translation: list = field(default_factory=lambda: [0.0, 0.0, 0.0])
    motion_rotation: list = field(default_factory=lambda: [0.0, 0.0, 0.0])
    texture: Texture = field(default_factory=lambda: Texture(1.0, 2.0))

    def pose(self):
        return RigidTransform(lie.quat_from_rotvec(self.orientation), self.center)

    def motion(self):
        rot = RigidTransform(lie.quat_from_rotvec(self.motion_rotation), np.zeros(3))
        c = np.asarray(self.center, dtype=float)
        about_center = RigidTransform.from_translation(c) @ rot @ RigidTransform.from_translation(-c)
        return RigidTransform.from_translation(self.motion_translation) @ about_center


@dataclass
class SceneSpec:
    full_width: int = 80
    full_height: int = 60
    crop_fraction: float = 0.1
    fx: float = 60.0
    fy: float = 60.0
    baseline: float = 0.54
    planes: list = field(default_factory=lambda: [Plane()])
    boxes: list = field(default_factory=list)
    ego_translation: list = field(default_factory=lambda: [0.1, 0.0, 0.3])
    ego_rotation: list = field(default_factory=lambda: [0.0, 0.01, 0.0])
    seed: int = 0

    @property
    def full_camera(self):
        return PinholeCamera(self.fx, self.fy, (self.full_width - 1) / 2.0, (self.full_height - 1) / 2.0, self.baseline)

    @property
    def window(self):
        return CropWindow.centered(self.full_width, self.full_height, self.crop_fraction)

    @property
    def camera(self):
        w = self.window
        return self.full_camera.cropped(w.x0, w.y0)

    def ego_motion(self):
        return RigidTransform(lie.quat_from_rotvec(self.ego_rotation), self.ego_translation)

    def to_dict(self):
        return asdict(self)

    def to_json(self, path):
        Path(path).write_text(json.dumps(self.to_dict(), indent=2))

    @classmethod
    def from_dict(cls, data):
        data = dict(data)
        _reject_unknown(cls, data, "scene spec")
        planes = []
        for p in data.pop("planes", [asdict(Plane())]):
            p = dict(p)
            _reject_unknown(Plane, p, "plane")
            tex = p.pop("texture", None)
            if tex is not None:
                _reject_unknown(Texture, tex, "texture")
            planes.append(Plane(**p, **({"texture": Texture(**tex)} if tex is not None else {})))
        boxes = []
        for b in data.pop("boxes", []):
            b = dict(b)
            _reject_unknown(Box, b, "box")
            tex = b.pop("texture", None)
            if tex is not None:
                _reject_unknown(Texture, tex, "texture")
            boxes.append(Box(**b, **({"texture": Texture(**tex)} if tex is not None else {})))
        spec = cls(planes=planes, boxes=boxes, **data)
        spec.validate()
        return spec

    @classmethod
    def from_json(cls, path):
        return cls.from_dict(json.loads(Path(path).read_text()))

    def validate(self):
        if self.full_width < 4 or self.full_height < 4:
            raise SceneError("image must be at least 4x4")
        if not 0 <= self.crop_fraction < 0.5:
            raise SceneError("crop_fraction must lie in [0, 0.5)")
        if not self.planes:
            raise SceneError("scene needs at least one background plane")
        for p in self.planes:
            n = np.asarray(p.normal, dtype=float)
            if n.shape != (3,) or not np.linalg.norm(n) > 0:
                raise SceneError(f"plane normal must be a non-zero 3-vector, got {p.normal}")
        for b in self.boxes:
            c = np.asarray(b.center, dtype=float)
            half = 0.5 * np.asarray(b.size, dtype=float)
            if np.any(half <= 0):
                raise SceneError("box sizes must be positive")
            reach = np.linalg.norm(half)
            if c[2] - reach <= Z_EPS:
                raise SceneError(f"box at {b.center} reaches behind the camera")
            moved = b.motion().act(c)
            if moved[2] - reach <= Z_EPS:
                raise SceneError(f"box at {b.center} moves behind the camera")


@dataclass
class GroundTruth:
    """Everything the losses and metrics need, for the crop and the full image.

    Masks are boolean. ``occlusion`` is True where a frame-1 point is hidden
    in frame 2 or leaves the full frame-2 image. ``rigidity`` is True on
    static pixels.
    """

    spec: SceneSpec
    camera: PinholeCamera
    full_camera: PinholeCamera
    window: CropWindow
    ego_motion: RigidTransform
    I1_full: np.ndarray
    I2_full: np.ndarray
    right_full: np.ndarray
    D1_full: np.ndarray
    D2_full: np.ndarray
    field_full: SE3Field
    flow12_full: np.ndarray
    flow12_valid_full: np.ndarray
    delta_d_full: np.ndarray
    flow21_full: np.ndarray
    flow21_valid_full: np.ndarray
    occlusion_full: np.ndarray
    rigidity_full: np.ndarray
    surface_id_full: np.ndarray

    def _crop(self, arr):
        return self.window.crop(arr)

    def __getattr__(self, name):
        # crop-size views: gt.I1, gt.D1, gt.flow12, gt.occlusion, ...
        if name.endswith("_full") or name.startswith("_"):
            raise AttributeError(name)
        full = self.__dict__.get(name + "_full")
        if full is None:
            raise AttributeError(name)
        if isinstance(full, SE3Field):
            w = self.window
            sl = (slice(w.y0, w.y0 + w.height), slice(w.x0, w.x0 + w.width))
            return SE3Field(full.twists[sl], full.valid[sl], full.rotations[sl], full.translations[sl])
        return self._crop(full)

    @property
    def right(self):
        return self._crop(self.right_full)

    def frame(self, stereo=True, full=True):
        return SceneFrame(
            I1=self.I1,
            I2=self.I2,
            D1=self.D1,
            D2=self.D2,
            camera=self.camera,
            I2_full=self.I2_full if full else None,
            D2_full=self.D2_full if full else None,
            window=self.window if full else None,
            stereo_right=self.right if stereo else None,
            stereo_right_full=self.right_full if (stereo and full) else None,
        )

    def estimate(self, frame=None):
        frame = self.frame() if frame is None else frame
        return MotionEstimate.from_frame(frame, self.field, self.rigidity.astype(float))

    @property
    def m_noc(self):
        return ~self.occlusion


def _rays(cam, height, width):
    xs, ys = pixel_grid(height, width)
    return np.stack([(xs - cam.cx) / cam.fx, (ys - cam.cy) / cam.fy, np.ones_like(xs)], axis=-1)


class _Surface:
    def __init__(self, kind, geom, pose, sampler, moving):
        self.kind = kind
        self.geom = geom
        self.pose = pose  # local -> world at frame 1
        self.sampler = sampler
        self.moving = moving  # world(frame 1) -> world(frame 2)


def _build_surfaces(spec):
    surfaces = []
    ident = RigidTransform.identity()
    for i, p in enumerate(spec.planes):
        n = np.asarray(p.normal, dtype=float)
        scale = np.linalg.norm(n)
        geom = (n / scale, float(p.offset) / scale)
        surfaces.append(_Surface("plane", geom, ident, p.texture.sampler((spec.seed, 0, i)), ident))
    for j, b in enumerate(spec.boxes):
        geom = 0.5 * np.asarray(b.size, dtype=float)
        surfaces.append(_Surface("box", geom, b.pose(), b.texture.sampler((spec.seed, 1, j)), b.motion()))
    return surfaces


def _intersect(surface, world_pose, origin, dirs):
    """Ray parameter of the first hit (inf on miss) and local hit points.

    ``world_pose`` maps surface-local coordinates to the ray's frame.
    """
    inv = world_pose.inverse()
    R = inv.rotation_matrix
    o = R @ origin + inv.translation
    d = dirs @ R.T
    with np.errstate(divide="ignore", invalid="ignore"):
        if surface.kind == "plane":
            n, off = surface.geom
            denom = d @ n
            t = (off - o @ n) / denom
            t = np.where((np.abs(denom) > 1e-12) & (t > Z_EPS), t, np.inf)
        else:
            half = surface.geom
            t1 = (-half - o) / d
            t2 = (half - o) / d
            tmin = np.nanmax(np.minimum(t1, t2), axis=-1)
            tmax = np.nanmin(np.maximum(t1, t2), axis=-1)
            t = np.where((tmax >= tmin) & (tmin > Z_EPS), tmin, np.inf)
    local = o + np.where(np.isfinite(t), t, 0.0)[..., None] * d
    return t, local


def _cast(surfaces, view, cam, height, width, frame_index):
    """Ray-cast one view. ``view`` maps world(frame k) to camera coordinates.

    Returns depth, colour, surface id and world hit points (frame k).
    """
    dirs_cam = _rays(cam, height, width)
    to_world = view.inverse()
    origin = to_world.translation
    dirs = dirs_cam @ to_world.rotation_matrix.T
    best = np.full((height, width), np.inf)
    sid = np.full((height, width), -1)
    color = np.zeros((height, width, 3))
    for k, s in enumerate(surfaces):
        pose = s.moving @ s.pose if frame_index == 2 else s.pose
        t, local = _intersect(s, pose, origin, dirs)
        closer = t < best
        best = np.where(closer, t, best)
        sid = np.where(closer, k, sid)
        color = np.where(closer[..., None], s.sampler(local), color)
    if np.any(sid < 0):
        raise SceneError("some rays hit no surface; add a background plane that fills the view")
    # camera rays have unit z, so the ray parameter equals the camera depth
    world = origin + best[..., None] * dirs
    return best, np.clip(color, 0.0, 1.0), sid, world


def render(spec: SceneSpec) -> GroundTruth:
    spec.validate()
    H, W = spec.full_height, spec.full_width
    cam = spec.full_camera
    surfaces = _build_surfaces(spec)
    ego = spec.ego_motion()
    right_shift = RigidTransform.from_translation([-spec.baseline, 0.0, 0.0])

    D1, I1, sid1, P1 = _cast(surfaces, RigidTransform.identity(), cam, H, W, 1)
    D2, I2, sid2, P2 = _cast(surfaces, ego, cam, H, W, 2)
    _, IR, _, _ = _cast(surfaces, right_shift, cam, H, W, 1)

    # per-pixel motion T_x = ego o object motion (identity for static surfaces)
    motions = [ego @ s.moving for s in surfaces]
    quats = np.stack([m.rotation for m in motions])[sid1]
    trans = np.stack([m.translation for m in motions])[sid1]
    field_full = SE3Field.from_transforms(quats, trans)

    moved = np.einsum("...ij,...j->...i", lie.quat_to_matrix(quats), P1) + trans
    z2 = moved[..., 2]
    valid12 = z2 > Z_EPS
    zs = np.where(valid12, z2, 1.0)
    xs, ys = pixel_grid(H, W)
    tx = cam.fx * moved[..., 0] / zs + cam.cx
    ty = cam.fy * moved[..., 1] / zs + cam.cy
    flow12 = np.where(valid12[..., None], np.stack([tx - xs, ty - ys], axis=-1), 0.0)
    delta_d = np.where(valid12, z2 - D1, 0.0)

    # backward flow: frame-2 hit points carried back to frame 1
    back = [s.moving.inverse() for s in surfaces]
    bq = np.stack([m.rotation for m in back])[sid2]
    bt = np.stack([m.translation for m in back])[sid2]
    P2_at_1 = np.einsum("...ij,...j->...i", lie.quat_to_matrix(bq), P2) + bt
    zb = P2_at_1[..., 2]
    valid21 = zb > Z_EPS
    zbs = np.where(valid21, zb, 1.0)
    bx = cam.fx * P2_at_1[..., 0] / zbs + cam.cx
    by = cam.fy * P2_at_1[..., 1] / zbs + cam.cy
    flow21 = np.where(valid21[..., None], np.stack([bx - xs, by - ys], axis=-1), 0.0)

    occlusion = _visibility_occlusion(surfaces, ego, cam, tx, ty, z2, valid12, W, H)

    return GroundTruth(
        spec=spec,
        camera=spec.camera,
        full_camera=cam,
        window=spec.window,
        ego_motion=ego,
        I1_full=I1,
        I2_full=I2,
        right_full=IR,
        D1_full=D1,
        D2_full=D2,
        field_full=field_full,
        flow12_full=flow12,
        flow12_valid_full=valid12,
        delta_d_full=delta_d,
        flow21_full=flow21,
        flow21_valid_full=valid21,
        occlusion_full=occlusion,
        rigidity_full=~np.array([s.kind == "box" for s in surfaces])[sid1],
        surface_id_full=sid1,
    )


def _visibility_occlusion(surfaces, ego, cam, tx, ty, z2, valid, W, H):
    """Cast frame-2 rays through each forward target and compare depths."""
    inside = valid & (tx >= 0) & (tx <= W - 1) & (ty >= 0) & (ty <= H - 1)
    dirs_cam = np.stack([(tx - cam.cx) / cam.fx, (ty - cam.cy) / cam.fy, np.ones_like(tx)], axis=-1)
    to_world = ego.inverse()
    dirs = dirs_cam @ to_world.rotation_matrix.T
    best = np.full(tx.shape, np.inf)
    for s in surfaces:
        t, _ = _intersect(s, s.moving @ s.pose, to_world.translation, dirs)
        best = np.minimum(best, t)
    hidden = best < z2 * (1.0 - VISIBILITY_RTOL)
    return ~inside | hidden


@dataclass
class PerturbedInputs:
    field: SE3Field
    mask: np.ndarray
    D1: np.ndarray

    def estimate(self, frame):
        return MotionEstimate(self.field, self.mask, self.D1, frame.camera)


PERTURBATIONS = ("twist_noise", "mask_flip", "depth_scale")


def perturb(gt, kind, magnitude, seed=0):
    """Deterministic, controlled corruption of the ground-truth estimate.

    ``twist_noise`` adds ``magnitude`` times a fixed standard-normal draw to
    every twist; ``mask_flip`` flips a ``magnitude`` fraction of rigidity
    pixels; ``depth_scale`` multiplies D1 by ``1 + magnitude``.
    """
    if magnitude < 0:
        raise ValueError("perturbation magnitude must be non-negative")
    if kind not in PERTURBATIONS:
        raise ValueError(f"unknown perturbation {kind!r}; expected one of {PERTURBATIONS}")
    field0 = gt.field
    mask = gt.rigidity.astype(float)
    D1 = np.array(gt.D1, dtype=float)
    rng = np.random.default_rng(seed)
    if kind == "twist_noise":
        noise = rng.standard_normal(field0.twists.shape)
        if magnitude == 0:
            return PerturbedInputs(field0, mask, D1)
        return PerturbedInputs(SE3Field(field0.twists + magnitude * noise, field0.valid), mask, D1)
    if kind == "mask_flip":
        flip = rng.random(mask.shape) < magnitude
        return PerturbedInputs(field0, np.where(flip, 1.0 - mask, mask), D1)
    return PerturbedInputs(field0, mask, D1 * (1.0 + magnitude))
