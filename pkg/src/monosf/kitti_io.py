"""Readers and writers for the benchmark-style files the CLI exchanges.

Byte-level formats
------------------
flow PNG
    16-bit, 3 channels stored in (R, G, B) = (u, v, valid) order.
    ``raw = round(64 * f) + 2**15``; ``valid`` is 0 or 1.
disparity PNG
    16-bit single channel, ``raw = round(256 * d)``; 0 marks invalid pixels.
mask PNG
    8-bit single channel, written as 0/255, read as ``raw != 0``.
image PNG
    16-bit RGB, ``raw = round(65535 * x)`` for ``x`` in [0, 1].
PFM
    ``Pf`` (1 channel) or ``PF`` (3 channels), then ``width height``, then the
    scale (negative = little-endian), each line ending in ``\\n``; float32
    rows stored bottom-to-top. Files are always written little-endian.
pose file
    one line per frame with 12 floats, the row-major 3x4 camera-to-world
    matrix.
intrinsics / key-value text
    one ``key value`` pair per line (``key: value`` and ``key=value`` are
    accepted); ``#`` starts a comment.
"""
from __future__ import annotations

import re
import struct
import warnings
from pathlib import Path

import cv2
import numpy as np

from .camera import PinholeCamera
from .warp import CropWindow

PNG_SIGNATURE = b"\x89PNG\r\n\x1a\n"
FLOW_SCALE = 64.0
FLOW_OFFSET = 2**15
DISP_SCALE = 256.0
ORTHO_TOL = 1e-6
INTRINSIC_KEYS = ("fx", "fy", "cx", "cy", "baseline")


class ParseError(ValueError):
    """Malformed input file; the message names the file and byte offset."""

    def __init__(self, path, offset, message):
        self.path = str(path)
        self.offset = offset
        super().__init__(f"{path}: byte {offset}: {message}")


class RenormalizedPoseWarning(UserWarning):
    pass


# ---------------------------------------------------------------------------
# PNG helpers
# ---------------------------------------------------------------------------


def _png_header(path):
    """Return ``(width, height, bit_depth, color_type)`` from the IHDR chunk."""
    data = Path(path).read_bytes()[:33]
    if len(data) < 8 or data[:8] != PNG_SIGNATURE:
        raise ParseError(path, 0, "not a PNG file (bad signature)")
    if len(data) < 33 or data[12:16] != b"IHDR":
        raise ParseError(path, 12, "missing IHDR chunk")
    width, height = struct.unpack(">II", data[16:24])
    return width, height, data[24], data[25]


def _read_png(path, bit_depth, channels):
    _, _, depth, color = _png_header(path)
    if depth != bit_depth:
        raise ParseError(path, 24, f"expected {bit_depth}-bit PNG, got {depth}-bit")
    expected_color = {1: 0, 3: 2}[channels]
    if color != expected_color:
        raise ParseError(path, 25, f"expected {channels}-channel PNG (color type {expected_color}), got color type {color}")
    img = cv2.imread(str(path), cv2.IMREAD_UNCHANGED)
    if img is None:
        raise ParseError(path, 33, "PNG data could not be decoded")
    if channels == 3:
        img = img[..., ::-1]
    return img


def _write_png(path, img):
    if img.ndim == 3:
        img = np.ascontiguousarray(img[..., ::-1])
    if not cv2.imwrite(str(path), img, [cv2.IMWRITE_PNG_COMPRESSION, 6]):
        raise OSError(f"could not write {path}")


# ---------------------------------------------------------------------------
# flow / disparity / mask / image
# ---------------------------------------------------------------------------


def encode_flow(flow, valid=None):
    """Raw uint16 (H, W, 3) array for a flow field; out-of-range values raise."""
    flow = np.asarray(flow, dtype=float)
    if flow.ndim != 3 or flow.shape[-1] != 2:
        raise ValueError(f"flow must be (H, W, 2), got {flow.shape}")
    valid = np.isfinite(flow).all(axis=-1) if valid is None else np.asarray(valid, bool)
    f = np.where(valid[..., None], flow, 0.0)
    raw = np.round(FLOW_SCALE * f) + FLOW_OFFSET
    if np.any(raw < 0) or np.any(raw > 65535):
        worst = float(np.abs(f).max())
        raise ValueError(f"flow magnitude {worst:.3f} px does not fit the 16-bit encoding (+-512 px)")
    out = np.empty(flow.shape[:2] + (3,), np.uint16)
    out[..., :2] = raw.astype(np.uint16)
    out[..., 2] = valid
    return out


def decode_flow(raw):
    raw = np.asarray(raw)
    flow = (raw[..., :2].astype(float) - FLOW_OFFSET) / FLOW_SCALE
    return flow, raw[..., 2] > 0


def write_flow_png(path, flow, valid=None):
    _write_png(path, encode_flow(flow, valid))


def read_flow_png(path):
    """Return ``(flow (H, W, 2), valid (H, W))``."""
    raw = _read_png(path, 16, 3)
    if np.any(raw[..., 2] > 1):
        raise ParseError(path, 33, "valid channel holds values other than 0/1")
    return decode_flow(raw)


def encode_disparity(disp, valid=None):
    disp = np.asarray(disp, dtype=float)
    valid = (np.isfinite(disp) & (disp > 0)) if valid is None else np.asarray(valid, bool)
    d = np.where(valid, disp, 0.0)
    raw = np.round(DISP_SCALE * d)
    if np.any(raw < 0) or np.any(raw > 65535):
        raise ValueError("disparity outside the 16-bit range [0, 255.996]")
    if np.any(valid & (raw == 0)):
        raise ValueError("valid disparity rounds to 0, which marks invalid pixels")
    return raw.astype(np.uint16)


def decode_disparity(raw):
    raw = np.asarray(raw)
    return raw.astype(float) / DISP_SCALE, raw > 0


def write_disparity_png(path, disp, valid=None):
    _write_png(path, encode_disparity(disp, valid))


def read_disparity_png(path):
    """Return ``(disparity, valid)``; invalid pixels read as 0."""
    return decode_disparity(_read_png(path, 16, 1))


def write_mask_png(path, mask):
    _write_png(path, np.where(np.asarray(mask, bool), 255, 0).astype(np.uint8))


def read_mask_png(path):
    return _read_png(path, 8, 1) != 0


def write_image_png(path, image):
    image = np.asarray(image, dtype=float)
    if image.ndim != 3 or image.shape[-1] != 3:
        raise ValueError(f"image must be (H, W, 3), got {image.shape}")
    if np.any(~np.isfinite(image)) or image.min() < 0 or image.max() > 1:
        raise ValueError("image values must lie in [0, 1]")
    _write_png(path, np.round(image * 65535.0).astype(np.uint16))


def read_image_png(path):
    return _read_png(path, 16, 3).astype(float) / 65535.0


def write_color_png(path, rgb):
    """8-bit RGB image (visualisations)."""
    rgb = np.asarray(rgb)
    if rgb.dtype != np.uint8 or rgb.ndim != 3 or rgb.shape[-1] != 3:
        raise ValueError("expected an (H, W, 3) uint8 array")
    _write_png(path, rgb)


def read_color_png(path):
    return _read_png(path, 8, 3)


# ---------------------------------------------------------------------------
# PFM
# ---------------------------------------------------------------------------


def write_pfm(path, data):
    data = np.asarray(data, dtype=np.float32)
    if data.ndim == 2:
        kind = b"Pf"
    elif data.ndim == 3 and data.shape[-1] == 3:
        kind = b"PF"
    else:
        raise ValueError(f"PFM holds (H, W) or (H, W, 3) arrays, got {data.shape}")
    h, w = data.shape[:2]
    with open(path, "wb") as fh:
        fh.write(kind + b"\n" + f"{w} {h}\n".encode() + b"-1.0\n")
        fh.write(np.flipud(data).astype("<f4").tobytes())


def read_pfm(path):
    blob = Path(path).read_bytes()
    pos = 0
    lines = []
    for _ in range(3):
        end = blob.find(b"\n", pos)
        if end < 0:
            raise ParseError(path, pos, "truncated PFM header")
        lines.append((pos, blob[pos:end].strip()))
        pos = end + 1
    (o0, kind), (o1, dims), (o2, scale_txt) = lines
    if kind not in (b"Pf", b"PF"):
        raise ParseError(path, o0, f"unknown PFM type {kind!r}")
    channels = 1 if kind == b"Pf" else 3
    m = re.fullmatch(rb"(\d+)\s+(\d+)", dims)
    if m is None:
        raise ParseError(path, o1, f"malformed dimensions {dims!r}")
    w, h = int(m.group(1)), int(m.group(2))
    try:
        scale = float(scale_txt)
    except ValueError:
        raise ParseError(path, o2, f"malformed scale {scale_txt!r}") from None
    if scale == 0:
        raise ParseError(path, o2, "scale must be non-zero")
    dtype = "<f4" if scale < 0 else ">f4"
    n = w * h * channels
    if len(blob) - pos != 4 * n:
        raise ParseError(path, pos, f"expected {4 * n} data bytes, found {len(blob) - pos}")
    data = np.frombuffer(blob, dtype=dtype, count=n, offset=pos)
    shape = (h, w) if channels == 1 else (h, w, 3)
    return np.flipud(data.reshape(shape)).astype(np.float64)


# ---------------------------------------------------------------------------
# text formats
# ---------------------------------------------------------------------------


def _text_lines(path):
    """Yield ``(byte_offset, stripped_line)`` for non-empty, non-comment lines."""
    blob = Path(path).read_bytes()
    try:
        text = blob.decode("ascii")
    except UnicodeDecodeError as exc:
        raise ParseError(path, exc.start, "non-ASCII byte") from None
    offset = 0
    for line in text.splitlines(keepends=True):
        body = line.split("#", 1)[0].strip()
        if body:
            yield offset, body
        offset += len(line)


def write_poses(path, poses):
    poses = np.asarray(poses, dtype=float)
    with open(path, "w") as fh:
        for P in poses:
            fh.write(" ".join(f"{v:.17g}" for v in P[:3, :4].ravel()) + "\n")


def read_poses(path):
    """Return (n, 4, 4) camera-to-world matrices.

    Rotations more than 1e-6 from orthonormal are projected back onto SO(3)
    with a warning.
    """
    out = []
    for offset, line in _text_lines(path):
        parts = line.split()
        if len(parts) != 12:
            raise ParseError(path, offset, f"expected 12 numbers per pose line, found {len(parts)}")
        try:
            vals = np.array([float(p) for p in parts])
        except ValueError:
            raise ParseError(path, offset, "non-numeric value in pose line") from None
        if not np.all(np.isfinite(vals)):
            raise ParseError(path, offset, "non-finite value in pose line")
        P = np.eye(4)
        P[:3, :4] = vals.reshape(3, 4)
        R = P[:3, :3]
        if np.abs(R.T @ R - np.eye(3)).max() > ORTHO_TOL or np.linalg.det(R) <= 0:
            U, _, Vt = np.linalg.svd(R)
            fixed = U @ Vt
            if np.linalg.det(fixed) < 0:
                raise ParseError(path, offset, "rotation block is a reflection")
            warnings.warn(f"{path}: pose at byte {offset} renormalized", RenormalizedPoseWarning, stacklevel=2)
            P[:3, :3] = fixed
        out.append(P)
    if not out:
        raise ParseError(path, 0, "no poses found")
    return np.stack(out)


def read_key_values(path, required=(), optional=()):
    allowed = set(required) | set(optional)
    values = {}
    for offset, line in _text_lines(path):
        m = re.fullmatch(r"([A-Za-z_][A-Za-z0-9_]*)\s*[:=]?\s*(\S+)", line)
        if m is None:
            raise ParseError(path, offset, f"expected 'key value', got {line!r}")
        key, raw = m.groups()
        if key not in allowed:
            raise ParseError(path, offset, f"unknown key {key!r}")
        if key in values:
            raise ParseError(path, offset, f"duplicate key {key!r}")
        try:
            values[key] = float(raw)
        except ValueError:
            raise ParseError(path, offset, f"value for {key!r} is not a number") from None
    missing = [k for k in required if k not in values]
    if missing:
        raise ParseError(path, 0, f"missing keys: {', '.join(missing)}")
    return values


def write_key_values(path, values):
    with open(path, "w") as fh:
        for k, v in values.items():
            fh.write(f"{k} {v!r}\n")


def read_intrinsics(path):
    return PinholeCamera(**read_key_values(path, INTRINSIC_KEYS))


def write_intrinsics(path, cam):
    write_key_values(path, {k: float(getattr(cam, k)) for k in INTRINSIC_KEYS})


def read_crop(path):
    v = read_key_values(path, ("x0", "y0", "width", "height"))
    if any(float(x) != int(x) for x in v.values()):
        raise ParseError(path, 0, "crop window values must be integers")
    return CropWindow(int(v["x0"]), int(v["y0"]), int(v["width"]), int(v["height"]))


def write_crop(path, window):
    write_key_values(path, {"x0": window.x0, "y0": window.y0, "width": window.width, "height": window.height})


# ---------------------------------------------------------------------------
# directory layouts used by the CLI
# ---------------------------------------------------------------------------

FRAME_FILES = ("calib.txt", "crop.txt", "image_1.png", "image_2.png", "depth_1.pfm", "depth_2.pfm")
ESTIMATE_FILES = ("twist_v.pfm", "twist_w.pfm", "rigidity.pfm")


def write_frame_dir(path, full_camera, window, I1, I2, D1, D2, right=None):
    """Store full-resolution inputs plus the calibration and crop window."""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    write_intrinsics(path / "calib.txt", full_camera)
    write_crop(path / "crop.txt", window)
    write_image_png(path / "image_1.png", I1)
    write_image_png(path / "image_2.png", I2)
    write_pfm(path / "depth_1.pfm", D1)
    write_pfm(path / "depth_2.pfm", D2)
    if right is not None:
        write_image_png(path / "right_1.png", right)


def read_frame_dir(path, stereo=True, full_image=True):
    """Build a cropped :class:`SceneFrame` from a frame directory."""
    from .losses import SceneFrame

    path = Path(path)
    missing = [f for f in FRAME_FILES if not (path / f).is_file()]
    if missing:
        raise FileNotFoundError(f"{path}: missing {', '.join(missing)}")
    cam = read_intrinsics(path / "calib.txt")
    win = read_crop(path / "crop.txt")
    I1 = read_image_png(path / "image_1.png")
    I2 = read_image_png(path / "image_2.png")
    D1 = read_pfm(path / "depth_1.pfm")
    D2 = read_pfm(path / "depth_2.pfm")
    for name, arr in (("image_2", I2), ("depth_1", D1), ("depth_2", D2)):
        if arr.shape[:2] != I1.shape[:2]:
            raise ValueError(f"{path}: {name} is {arr.shape[:2]}, image_1 is {I1.shape[:2]}")
    win.check_inside(*I1.shape[:2])
    right = None
    if stereo and (path / "right_1.png").is_file():
        right = read_image_png(path / "right_1.png")
        if right.shape != I1.shape:
            raise ValueError(f"{path}: right_1 is {right.shape[:2]}, image_1 is {I1.shape[:2]}")
    return SceneFrame(
        I1=win.crop(I1),
        I2=win.crop(I2),
        D1=win.crop(D1),
        D2=win.crop(D2),
        camera=cam.cropped(win.x0, win.y0),
        I2_full=I2 if full_image else None,
        D2_full=D2 if full_image else None,
        window=win if full_image else None,
        stereo_right=None if right is None else win.crop(right),
        stereo_right_full=right if (right is not None and full_image) else None,
    )


def write_estimate_dir(path, field, mask):
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    tw = np.where(field.valid[..., None], field.twists, 0.0)
    write_pfm(path / "twist_v.pfm", tw[..., :3])
    write_pfm(path / "twist_w.pfm", tw[..., 3:])
    write_pfm(path / "rigidity.pfm", np.asarray(mask, dtype=float))


def read_estimate_dir(path):
    """Return ``(SE3Field, mask)`` from an estimate directory."""
    from .motion_field import SE3Field

    path = Path(path)
    missing = [f for f in ESTIMATE_FILES if not (path / f).is_file()]
    if missing:
        raise FileNotFoundError(f"{path}: missing {', '.join(missing)}")
    v = read_pfm(path / "twist_v.pfm")
    w = read_pfm(path / "twist_w.pfm")
    mask = read_pfm(path / "rigidity.pfm")
    if v.shape != w.shape or v.ndim != 3 or mask.shape != v.shape[:2]:
        raise ValueError(f"{path}: twist and rigidity grids disagree in shape")
    return SE3Field(np.concatenate([v, w], axis=-1)), mask


def write_sceneflow_dir(path, cam, D1, sf):
    """Benchmark-style prediction files: flow, first and registered second disparity."""
    from .camera import disparity_from_depth

    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    write_flow_png(path / "flow.png", sf.flow, sf.valid)
    ok1 = np.isfinite(D1) & (D1 > 0)
    write_disparity_png(path / "disp_1.png", np.where(ok1, disparity_from_depth(cam, np.where(ok1, D1, 1.0)), 0.0), ok1)
    D2r = D1 + sf.delta_d
    ok2 = sf.valid & (D2r > 0)
    write_disparity_png(path / "disp_2.png", np.where(ok2, disparity_from_depth(cam, np.where(ok2, D2r, 1.0)), 0.0), ok2)
    write_pfm(path / "depth_1.pfm", D1)


def read_sceneflow_dir(path):
    """Return ``(disp_1, valid_1, disp_2, valid_2, flow, flow_valid)``."""
    path = Path(path)
    d1, v1 = read_disparity_png(path / "disp_1.png")
    d2, v2 = read_disparity_png(path / "disp_2.png")
    flow, fv = read_flow_png(path / "flow.png")
    return d1, v1, d2, v2, flow, fv
