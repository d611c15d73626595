"""Camera geometry, a synthetic textured-room scene, and dataset IO.

Conventions: camera looks along +z, pixel u grows with x, v with y. Poses are
camera-to-world. Depth images hold millimeters (0 = invalid); rendered frames
keep the unquantized float depth, disk round-trips quantize to whole mm.
"""

import os
from dataclasses import dataclass, field

import numpy as np
from PIL import Image

from .errors import (
    CameraOutsideScene,
    ConfigInvalid,
    DimensionMismatch,
    InvalidDepth,
    MalformedPoseMatrix,
    MissingFile,
)

# rotations this far from orthonormal are re-projected; beyond MAX they are
# rejected as corrupt
_POSE_ACCEPT_TOL = 1e-9
_POSE_REPAIR_TOL = 1e-3


@dataclass(frozen=True)
class CameraIntrinsics:
    focal_x: float
    focal_y: float
    center_x: float
    center_y: float
    width: int
    height: int

    def __post_init__(self):
        if self.focal_x <= 0 or self.focal_y <= 0:
            raise ConfigInvalid("focal lengths must be positive")
        if not (0 < self.center_x < self.width and 0 < self.center_y < self.height):
            raise ConfigInvalid("principal point must lie inside the image")

    def to_text(self):
        lines = []
        for name in ("focal_x", "focal_y", "center_x", "center_y"):
            lines.append(f"{name} {getattr(self, name):.17g}")
        lines.append(f"width {self.width}")
        lines.append(f"height {self.height}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text):
        vals = {}
        for line in text.splitlines():
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            key, _, val = line.partition(" ")
            vals[key] = val
        try:
            return cls(
                focal_x=float(vals["focal_x"]),
                focal_y=float(vals["focal_y"]),
                center_x=float(vals["center_x"]),
                center_y=float(vals["center_y"]),
                width=int(vals["width"]),
                height=int(vals["height"]),
            )
        except KeyError as e:
            raise ConfigInvalid(f"intrinsics file missing field {e.args[0]!r}") from None


class CameraPose:
    """Camera-to-world rigid transform: world point = rotation @ x + translation."""

    __slots__ = ("rotation", "translation")

    def __init__(self, rotation, translation):
        r = np.asarray(rotation, dtype=np.float64)
        t = np.asarray(translation, dtype=np.float64).reshape(3)
        if r.shape != (3, 3):
            raise MalformedPoseMatrix(f"rotation must be 3x3, got {r.shape}")
        err = np.abs(r.T @ r - np.eye(3)).max()
        if err > _POSE_REPAIR_TOL or np.linalg.det(r) < 0:
            raise MalformedPoseMatrix(
                f"rotation deviates from orthonormal by {err:.3g}"
            )
        if err > _POSE_ACCEPT_TOL:
            u, _, vt = np.linalg.svd(r)
            d = np.sign(np.linalg.det(u @ vt))
            r = u @ np.diag([1.0, 1.0, d]) @ vt
        self.rotation = r
        self.translation = t

    @classmethod
    def from_matrix(cls, m):
        m = np.asarray(m, dtype=np.float64)
        if m.shape != (4, 4):
            raise MalformedPoseMatrix(f"pose matrix must be 4x4, got {m.shape}")
        if np.abs(m[3] - np.array([0.0, 0.0, 0.0, 1.0])).max() > _POSE_ACCEPT_TOL:
            raise MalformedPoseMatrix("bottom row of pose matrix must be [0 0 0 1]")
        return cls(m[:3, :3], m[:3, 3])

    @property
    def matrix(self):
        m = np.eye(4)
        m[:3, :3] = self.rotation
        m[:3, 3] = self.translation
        return m

    def apply(self, x):
        """Map camera-frame points (..., 3) to world coordinates."""
        x = np.asarray(x, dtype=np.float64)
        return x @ self.rotation.T + self.translation

    def apply_inverse(self, m):
        """Map world points (..., 3) into the camera frame."""
        m = np.asarray(m, dtype=np.float64)
        return (m - self.translation) @ self.rotation

    def inverse(self):
        return CameraPose(self.rotation.T, -self.rotation.T @ self.translation)

    def compose(self, other):
        """self then... no: returns the pose equal to applying other, then self."""
        return CameraPose(
            self.rotation @ other.rotation,
            self.rotation @ other.translation + self.translation,
        )


def back_project(px, py, depth_m, intrinsics):
    """Pixel + metric depth -> camera-frame point; depth is the z coordinate."""
    depth_m = np.asarray(depth_m, dtype=np.float64)
    if np.any(depth_m <= 0):
        raise InvalidDepth("back-projection needs strictly positive depth")
    x = (np.asarray(px, dtype=np.float64) - intrinsics.center_x) / intrinsics.focal_x * depth_m
    y = (np.asarray(py, dtype=np.float64) - intrinsics.center_y) / intrinsics.focal_y * depth_m
    return np.stack(np.broadcast_arrays(x, y, depth_m), axis=-1)


def project(x_cam, intrinsics):
    """Camera-frame points (..., 3) -> pixel coordinates (u, v)."""
    x_cam = np.asarray(x_cam, dtype=np.float64)
    z = x_cam[..., 2]
    if np.any(z <= 0):
        raise InvalidDepth("projection needs points in front of the camera")
    u = intrinsics.focal_x * x_cam[..., 0] / z + intrinsics.center_x
    v = intrinsics.focal_y * x_cam[..., 1] / z + intrinsics.center_y
    return u, v


def scene_coordinate(px, py, depth_m, intrinsics, pose):
    """World coordinate of a pixel: pose applied to its back-projection."""
    return pose.apply(back_project(px, py, depth_m, intrinsics))


@dataclass
class Frame:
    """One RGB-D view. depth is in millimeters, 0 marks invalid pixels;
    scene_coords/valid are filled by compute_scene_coords or the renderer."""

    rgb: np.ndarray
    depth: np.ndarray
    pose: CameraPose
    scene_coords: np.ndarray = None
    valid: np.ndarray = None

    def __post_init__(self):
        if self.rgb.shape[:2] != self.depth.shape:
            raise DimensionMismatch(
                f"rgb {self.rgb.shape[:2]} and depth {self.depth.shape} disagree"
            )

    @property
    def depth_m(self):
        return np.asarray(self.depth, dtype=np.float64) / 1000.0


def compute_scene_coords(frame, intrinsics):
    """Fill frame.scene_coords (NaN where invalid) and frame.valid from depth."""
    h, w = frame.depth.shape
    valid = np.asarray(frame.depth) > 0
    coords = np.full((h, w, 3), np.nan)
    if valid.any():
        vy, vx = np.nonzero(valid)
        coords[vy, vx] = scene_coordinate(
            vx, vy, frame.depth_m[vy, vx], intrinsics, frame.pose
        )
    frame.scene_coords = coords
    frame.valid = valid
    return frame


# ---------------------------------------------------------------------------
# synthetic scene
# ---------------------------------------------------------------------------

_N_CHIRPS = 3
_SINE_WEIGHT = 0.6


@dataclass
class SyntheticScene:
    """Axis-aligned room [0, extent]^3 whose six inner walls carry a smooth
    procedural RGB texture, deterministic in rng_seed.

    Each channel sums oriented frequency-swept sinusoids (chirps) plus one
    plain sinusoid. The sweep gives every spot on a wall a distinct local
    stripe frequency and orientation, so small texture patches identify
    where on the wall they came from; a bank of pixel-difference features
    can therefore regress position from local appearance."""

    extent: float = 2.0
    rng_seed: int = 0
    # per (face, channel, chirp) parameters
    _cdir: np.ndarray = field(init=False, repr=False)
    _csweep: np.ndarray = field(init=False, repr=False)
    _cctr: np.ndarray = field(init=False, repr=False)
    _cphase: np.ndarray = field(init=False, repr=False)
    # per (face, channel) plain sinusoid
    _sdir: np.ndarray = field(init=False, repr=False)
    _sfreq: np.ndarray = field(init=False, repr=False)
    _sphase: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        if self.extent <= 0:
            raise ConfigInvalid("scene extent must be positive")
        rng = np.random.default_rng(self.rng_seed)
        shape = (6, 3, _N_CHIRPS)
        self._cdir = rng.uniform(0.0, 2.0 * np.pi, shape)
        # sweep rates scale with 1/extent so the frequency range a wall
        # covers is size-independent; signs randomized so sweeps run both ways
        self._csweep = (
            rng.uniform(4.0, 8.0, shape)
            * rng.choice([-1.0, 1.0], shape)
            * (2.0 / self.extent)
        )
        self._cctr = rng.uniform(0.0, self.extent, (6, 3, _N_CHIRPS, 2))
        self._cphase = rng.uniform(0.0, 2.0 * np.pi, shape)
        self._sdir = rng.uniform(0.0, 2.0 * np.pi, (6, 3))
        self._sfreq = 2.0 * np.pi / np.exp(rng.uniform(np.log(0.25), np.log(0.6), (6, 3)))
        self._sphase = rng.uniform(0.0, 2.0 * np.pi, (6, 3))

    def wall_color(self, face, a, b):
        """uint8 RGB texture of wall `face` (0..5) at in-face coords a, b."""
        a = np.asarray(a, dtype=np.float64)
        b = np.asarray(b, dtype=np.float64)
        out = np.empty(a.shape + (3,), dtype=np.uint8)
        for c in range(3):
            s = np.zeros(a.shape)
            for i in range(_N_CHIRPS):
                th = self._cdir[face, c, i]
                oa, ob = self._cctr[face, c, i]
                u = (a - oa) * np.cos(th) + (b - ob) * np.sin(th)
                s = s + np.sin(self._csweep[face, c, i] * u * u + self._cphase[face, c, i])
            coord = a * np.cos(self._sdir[face, c]) + b * np.sin(self._sdir[face, c])
            s = s + _SINE_WEIGHT * np.sin(self._sfreq[face, c] * coord + self._sphase[face, c])
            v = 0.5 + 0.5 * s / (_N_CHIRPS + _SINE_WEIGHT)
            out[..., c] = np.round(255.0 * np.clip(v, 0.0, 1.0)).astype(np.uint8)
        return out


# the two in-plane axes for a wall normal to axis k
_FACE_AXES = {0: (1, 2), 1: (0, 2), 2: (0, 1)}


def render_synthetic(scene, pose, intrinsics):
    """Ray-cast the room walls from an interior camera; returns a Frame with
    float millimeter depth and scene_coords set to the exact hit points."""
    c = pose.translation
    if np.any(c <= 0) or np.any(c >= scene.extent):
        raise CameraOutsideScene(
            f"camera at {c} is outside the open room (0, {scene.extent})^3"
        )
    h, w = intrinsics.height, intrinsics.width
    u, v = np.meshgrid(np.arange(w, dtype=np.float64), np.arange(h, dtype=np.float64))
    dirs_cam = np.stack(
        [
            (u - intrinsics.center_x) / intrinsics.focal_x,
            (v - intrinsics.center_y) / intrinsics.focal_y,
            np.ones_like(u),
        ],
        axis=-1,
    )
    dirs = dirs_cam @ pose.rotation.T  # (h, w, 3) world directions

    # distance along the ray to each axis plane it is heading toward
    s_axis = np.full((h, w, 3), np.inf)
    for k in range(3):
        d = dirs[..., k]
        with np.errstate(divide="ignore"):
            s_axis[..., k] = np.where(
                d > 0, (scene.extent - c[k]) / d, np.where(d < 0, -c[k] / d, np.inf)
            )
    s = s_axis.min(axis=-1)
    axis = s_axis.argmin(axis=-1)

    hits = c + s[..., None] * dirs
    # land exactly on the wall plane, then guard the tangent axes against ulps
    hit_side = np.take_along_axis(dirs, axis[..., None], axis=-1)[..., 0] > 0
    np.put_along_axis(
        hits, axis[..., None], np.where(hit_side, scene.extent, 0.0)[..., None], axis=-1
    )
    hits = np.clip(hits, 0.0, scene.extent)

    rgb = np.empty((h, w, 3), dtype=np.uint8)
    for k in range(3):
        ia, ib = _FACE_AXES[k]
        for side in (False, True):
            mask = (axis == k) & (hit_side == side)
            if not mask.any():
                continue
            face = 2 * k + int(side)
            rgb[mask] = scene.wall_color(face, hits[mask][:, ia], hits[mask][:, ib])

    frame = Frame(rgb=rgb, depth=s * 1000.0, pose=pose)
    frame.scene_coords = hits
    frame.valid = np.ones((h, w), dtype=bool)
    return frame


def look_at(eye, target, up=(0.0, 0.0, 1.0)):
    """Camera-to-world pose at eye with +z toward target."""
    eye = np.asarray(eye, dtype=np.float64)
    z = np.asarray(target, dtype=np.float64) - eye
    nz = np.linalg.norm(z)
    if nz < 1e-12:
        raise ConfigInvalid("look_at target coincides with eye")
    z = z / nz
    x = np.cross(np.asarray(up, dtype=np.float64), z)
    nx = np.linalg.norm(x)
    if nx < 1e-9:
        x = np.cross(np.array([1.0, 0.0, 0.0]), z)
        nx = np.linalg.norm(x)
    x = x / nx
    y = np.cross(z, x)
    return CameraPose(np.stack([x, y, z], axis=1), eye)


def room_trajectory(scene, n_train, n_test, rng_seed=0):
    """Camera poses on a jittered ring inside the room, all looking near the
    room center; test poses interleave between neighboring train poses."""
    rng = np.random.default_rng(rng_seed)
    e = scene.extent
    center = np.full(3, 0.5 * e)

    def ring_pose(angle):
        radius = e * rng.uniform(0.24, 0.32)
        eye = center + np.array(
            [
                radius * np.cos(angle),
                radius * np.sin(angle),
                e * rng.uniform(-0.12, 0.12),
            ]
        )
        target = center + rng.uniform(-0.06 * e, 0.06 * e, 3)
        return look_at(eye, target)

    train = [ring_pose(2.0 * np.pi * i / n_train) for i in range(n_train)]
    test = [
        ring_pose(2.0 * np.pi * (i + 0.5) * (n_train / n_test) / n_train)
        for i in range(n_test)
    ]
    return train, test


# ---------------------------------------------------------------------------
# dataset IO (7-Scenes layout)
# ---------------------------------------------------------------------------


def _frame_paths(seq_dir, idx):
    stem = os.path.join(seq_dir, f"frame-{idx:06d}")
    return stem + ".color.png", stem + ".depth.png", stem + ".pose.txt"


def save_sequence(seq_dir, frames):
    """Write frames as frame-NNNNNN.{color.png,depth.png,pose.txt}; depth is
    quantized to whole millimeters (uint16)."""
    os.makedirs(seq_dir, exist_ok=True)
    for i, fr in enumerate(frames):
        cpath, dpath, ppath = _frame_paths(seq_dir, i)
        Image.fromarray(np.ascontiguousarray(fr.rgb)).save(cpath)
        dep = np.clip(np.round(np.asarray(fr.depth, dtype=np.float64)), 0, 65535)
        Image.fromarray(dep.astype(np.uint16)).save(dpath)
        rows = [" ".join(f"{x:.17g}" for x in row) for row in fr.pose.matrix]
        with open(ppath, "w") as f:
            f.write("\n".join(rows) + "\n")


def load_sequence(seq_dir, intrinsics):
    """Load frame-NNNNNN.* files (consecutive from 0) with ground-truth scene
    coordinates precomputed for valid-depth pixels."""
    if not os.path.isdir(seq_dir):
        raise MissingFile(f"sequence directory {seq_dir} does not exist")
    frames = []
    idx = 0
    while True:
        cpath, dpath, ppath = _frame_paths(seq_dir, idx)
        if not os.path.exists(cpath):
            if idx == 0:
                raise MissingFile(f"no frame-000000.color.png under {seq_dir}")
            break
        for p in (dpath, ppath):
            if not os.path.exists(p):
                raise MissingFile(f"frame {idx} is missing {os.path.basename(p)}")
        rgb = np.asarray(Image.open(cpath), dtype=np.uint8)
        if rgb.ndim != 3 or rgb.shape[2] != 3:
            raise DimensionMismatch(f"{cpath} is not an RGB image")
        depth = np.asarray(Image.open(dpath)).astype(np.float64)
        try:
            mat = np.loadtxt(ppath, dtype=np.float64)
        except ValueError as exc:
            raise MalformedPoseMatrix(f"{ppath}: {exc}") from None
        frame = Frame(rgb=rgb, depth=depth, pose=CameraPose.from_matrix(mat))
        compute_scene_coords(frame, intrinsics)
        frames.append(frame)
        idx += 1
    return frames


def save_dataset(root, intrinsics, splits):
    """splits: mapping split name -> frames. Writes intrinsics.txt at root."""
    os.makedirs(root, exist_ok=True)
    with open(os.path.join(root, "intrinsics.txt"), "w") as f:
        f.write(intrinsics.to_text())
    for name, frames in splits.items():
        save_sequence(os.path.join(root, name), frames)


def load_intrinsics(root):
    path = os.path.join(root, "intrinsics.txt")
    if not os.path.exists(path):
        raise MissingFile(f"{path} not found")
    with open(path) as f:
        return CameraIntrinsics.from_text(f.read())


def load_dataset(root, splits=("train", "test")):
    """Load intrinsics.txt plus the given split sequences from root."""
    intr = load_intrinsics(root)
    return intr, {name: load_sequence(os.path.join(root, name), intr) for name in splits}
