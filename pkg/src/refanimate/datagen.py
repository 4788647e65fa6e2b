"""Procedural sprite characters, pose sequences and OpenPose-style skeletons.

Everything here is a pure function of its arguments: a clip can be
regenerated file-by-file from its manifest.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from PIL import Image

from .errors import DataIOError, InvalidArgument

JOINTS = (
    "pelvis", "neck", "head",
    "l_shoulder", "l_elbow", "l_wrist",
    "r_shoulder", "r_elbow", "r_wrist",
    "l_hip", "l_knee", "r_hip", "r_knee",
)
NUM_JOINTS = len(JOINTS)
ROOT = 0

# (parent, child) joint indices; the list order is the bone index used by
# CharacterSpec.limb_colors / proportions and by the skeleton palette.
BONES = (
    (0, 1),    # torso
    (1, 2),    # neck -> head
    (1, 3), (3, 4), (4, 5),     # left arm
    (1, 6), (6, 7), (7, 8),     # right arm
    (0, 9), (9, 10),            # left leg
    (0, 11), (11, 12),          # right leg
)
NUM_BONES = len(BONES)
TORSO = 0

_HALF_PI = math.pi / 2
# absolute rest direction of every bone, radians, image coordinates (y down)
_REST_ANGLE = (
    -_HALF_PI, -_HALF_PI,
    math.pi, _HALF_PI + 0.35, _HALF_PI + 0.2,
    0.0, _HALF_PI - 0.35, _HALF_PI - 0.2,
    math.pi, _HALF_PI + 0.1,
    0.0, _HALF_PI - 0.1,
)
# how strongly each bone swings relative to the sequence's angular amplitude
_SWING_WEIGHT = (0.3, 0.5, 0.0, 1.0, 1.0, 0.0, 1.0, 1.0, 0.0, 0.6, 0.0, 0.6)
_PROPORTION_RANGE = (
    (1.0, 1.0), (0.35, 0.45),
    (0.35, 0.5), (0.6, 0.8), (0.55, 0.75),
    (0.35, 0.5), (0.6, 0.8), (0.55, 0.75),
    (0.2, 0.3), (0.8, 1.0),
    (0.2, 0.3), (0.8, 1.0),
)
DEFAULT_PROPORTIONS = tuple(0.5 * (lo + hi) for lo, hi in _PROPORTION_RANGE)
TORSO_LENGTH = 0.22
ROOT_POSITION = (0.5, 0.55)
MAX_SWING = 1.2
# angular frequencies are drawn from [2*pi/32, 2*pi/16] rad/frame
_OMEGA_MIN = 2 * math.pi / 32
_OMEGA_MAX = 2 * math.pi / 16

BACKGROUND = (24, 24, 32)
_TORSO_WIDTH = 0.09
_LIMB_WIDTH = 0.045

# OpenPose body palette (RGB), as used by its reference renderer
OPENPOSE_COLORS = (
    (255, 0, 0), (255, 85, 0), (255, 170, 0), (255, 255, 0), (170, 255, 0),
    (85, 255, 0), (0, 255, 0), (0, 255, 85), (0, 255, 170), (0, 255, 255),
    (0, 170, 255), (0, 85, 255), (0, 0, 255), (85, 0, 255), (170, 0, 255),
    (255, 0, 255), (255, 0, 170), (255, 0, 85),
)
SKELETON_LIMB_WIDTH = 0.03
SKELETON_JOINT_RADIUS = 0.022
SKELETON_LIMB_ALPHA = 0.6


@dataclass(frozen=True)
class CharacterSpec:
    seed: int
    limb_colors: tuple[tuple[int, int, int], ...]
    proportions: tuple[float, ...]
    head_radius: float

    def to_json(self) -> dict:
        return {
            "seed": self.seed,
            "limb_colors": [list(c) for c in self.limb_colors],
            "proportions": list(self.proportions),
            "head_radius": self.head_radius,
        }

    @classmethod
    def from_json(cls, d: dict) -> "CharacterSpec":
        return cls(
            seed=int(d["seed"]),
            limb_colors=tuple(tuple(int(v) for v in c) for c in d["limb_colors"]),
            proportions=tuple(float(p) for p in d["proportions"]),
            head_radius=float(d["head_radius"]),
        )


@dataclass(frozen=True)
class PoseFrame:
    joints: tuple[tuple[float, float], ...]

    def __post_init__(self):
        if len(self.joints) != NUM_JOINTS:
            raise InvalidArgument(f"pose needs {NUM_JOINTS} joints, got {len(self.joints)}")
        if not all(math.isfinite(v) for xy in self.joints for v in xy):
            raise InvalidArgument("pose joints must be finite")

    @classmethod
    def from_array(cls, arr) -> "PoseFrame":
        arr = np.asarray(arr, dtype=np.float64)
        return cls(tuple((float(x), float(y)) for x, y in arr))

    def as_array(self) -> np.ndarray:
        return np.asarray(self.joints, dtype=np.float64)


@dataclass(frozen=True)
class PoseSequence:
    frames: tuple[PoseFrame, ...]
    fps: float = 8.0

    def __post_init__(self):
        if len(self.frames) < 1:
            raise InvalidArgument("pose sequence must contain at least one frame")

    def __len__(self):
        return len(self.frames)

    def __getitem__(self, i):
        return self.frames[i]

    def as_array(self) -> np.ndarray:
        """Joint positions as an array of shape (frames, joints, 2)."""
        return np.stack([f.as_array() for f in self.frames])

    @classmethod
    def from_array(cls, arr, fps: float = 8.0) -> "PoseSequence":
        return cls(tuple(PoseFrame.from_array(a) for a in np.asarray(arr)), fps=fps)


@dataclass(frozen=True)
class ClipRecord:
    character: CharacterSpec
    poses: PoseSequence
    frame_paths: tuple[Path, ...]
    skeleton_paths: tuple[Path, ...]
    reference_index: int
    seed: int = 0
    resolution: int = 64
    root: Path = field(default=Path("."))

    def __post_init__(self):
        n = len(self.poses)
        if len(self.frame_paths) != n or len(self.skeleton_paths) != n:
            raise InvalidArgument("frame, skeleton and pose counts differ")
        if not 0 <= self.reference_index < n:
            raise InvalidArgument(f"reference_index {self.reference_index} outside [0, {n})")

    @property
    def reference_path(self) -> Path:
        return self.root / "ref.png"


def gen_character(seed: int) -> CharacterSpec:
    rng = np.random.default_rng([seed, 0xC4A2])
    colors = tuple(tuple(int(v) for v in rng.integers(40, 256, size=3)) for _ in range(NUM_BONES))
    proportions = tuple(float(rng.uniform(lo, hi)) if hi > lo else float(lo)
                        for lo, hi in _PROPORTION_RANGE)
    head_radius = float(rng.uniform(0.05, 0.07))
    return CharacterSpec(seed=int(seed), limb_colors=colors,
                         proportions=proportions, head_radius=head_radius)


def _bone_paths() -> list[list[int]]:
    """For every joint, the bone indices on the path from the root."""
    paths: list[list[int]] = [[] for _ in range(NUM_JOINTS)]
    for b, (parent, child) in enumerate(BONES):
        paths[child] = paths[parent] + [b]
    return paths


_PATHS = _bone_paths()


def forward_kinematics(offsets: np.ndarray, proportions: Sequence[float],
                       root=ROOT_POSITION) -> np.ndarray:
    """Joint positions (..., joints, 2) from per-bone angle offsets (..., bones).

    A bone's absolute direction is its rest angle plus the summed offsets of
    itself and all its ancestors.
    """
    offsets = np.asarray(offsets, dtype=np.float64)
    lengths = TORSO_LENGTH * np.asarray(proportions, dtype=np.float64)
    joints = np.zeros(offsets.shape[:-1] + (NUM_JOINTS, 2))
    joints[..., ROOT, 0] = root[0]
    joints[..., ROOT, 1] = root[1]
    cum = np.zeros_like(offsets)
    for b, (parent, child) in enumerate(BONES):
        parent_bone = _PATHS[parent][-1] if _PATHS[parent] else None
        cum[..., b] = offsets[..., b] + (cum[..., parent_bone] if parent_bone is not None else 0.0)
        angle = _REST_ANGLE[b] + cum[..., b]
        joints[..., child, 0] = joints[..., parent, 0] + lengths[b] * np.cos(angle)
        joints[..., child, 1] = joints[..., parent, 1] + lengths[b] * np.sin(angle)
    return joints


def displacement_bound_constant(proportions: Sequence[float]) -> float:
    """Max over joints of sum_b L_b * (summed swing weights up to b).

    A per-frame change of at most d radians in every unit-weight offset moves
    no joint by more than this constant times d.
    """
    lengths = TORSO_LENGTH * np.asarray(proportions, dtype=np.float64)
    worst = 0.0
    for path in _PATHS:
        total, acc = 0.0, 0.0
        for b in path:
            acc += _SWING_WEIGHT[b]
            total += lengths[b] * acc
        worst = max(worst, total)
    return worst


def gen_pose_sequence(seed: int, length: int, motion_amplitude: float,
                      proportions: Sequence[float] | None = None,
                      fps: float = 8.0) -> PoseSequence:
    """Sinusoidal joint-angle motion, posed by forward kinematics.

    ``motion_amplitude`` bounds the per-frame displacement of every joint in
    normalized image units.
    """
    if length < 1:
        raise InvalidArgument(f"length must be >= 1, got {length}")
    if motion_amplitude < 0:
        raise InvalidArgument(f"motion_amplitude must be >= 0, got {motion_amplitude}")
    proportions = DEFAULT_PROPORTIONS if proportions is None else tuple(proportions)
    rng = np.random.default_rng([seed, 0x9E55])
    omega = rng.uniform(_OMEGA_MIN, _OMEGA_MAX, size=NUM_BONES)
    phase = rng.uniform(0.0, 2 * math.pi, size=NUM_BONES)
    # |sin(a + w) - sin(a)| <= w, so each frame moves offset b by at most
    # swing * weight_b * OMEGA_MAX
    swing = motion_amplitude / (displacement_bound_constant(proportions) * _OMEGA_MAX)
    swing = min(MAX_SWING, swing)
    k = np.arange(length, dtype=np.float64)[:, None]
    offsets = swing * np.asarray(_SWING_WEIGHT) * np.sin(omega * k + phase)
    joints = forward_kinematics(offsets, proportions)
    return PoseSequence.from_array(joints, fps=fps)


# --- rasterization -----------------------------------------------------------

def _pixel_grid(resolution: int):
    c = (np.arange(resolution, dtype=np.float64) + 0.5)
    return c[None, :], c[:, None]   # x, y in pixel units


def _capsule_coverage(p0, p1, radius_px: float, resolution: int) -> np.ndarray:
    """Anti-aliased coverage in [0, 1] of a thick segment (pixel units)."""
    x, y = _pixel_grid(resolution)
    ax, ay = p0[0] * resolution, p0[1] * resolution
    bx, by = p1[0] * resolution, p1[1] * resolution
    dx, dy = bx - ax, by - ay
    denom = dx * dx + dy * dy
    if denom > 0:
        h = np.clip(((x - ax) * dx + (y - ay) * dy) / denom, 0.0, 1.0)
    else:
        h = np.zeros_like(x + y)
    dist = np.hypot(x - ax - h * dx, y - ay - h * dy)
    return np.clip(radius_px - dist + 0.5, 0.0, 1.0)


def _disc_coverage(center, radius_px: float, resolution: int) -> np.ndarray:
    return _capsule_coverage(center, center, radius_px, resolution)


def _composite(canvas: np.ndarray, coverage: np.ndarray, color, alpha: float = 1.0):
    a = (alpha * coverage)[..., None]
    canvas *= 1.0 - a
    canvas += a * np.asarray(color, dtype=np.float64)


def _check_resolution(resolution: int):
    if resolution < 16:
        raise InvalidArgument(f"resolution must be >= 16, got {resolution}")


# torso first so every other limb overlaps it
_DRAW_ORDER = (0, 8, 9, 10, 11, 2, 3, 4, 5, 6, 7, 1)


def render_frame(char: CharacterSpec, pose: PoseFrame, resolution: int = 64) -> np.ndarray:
    """Draw the character as coloured capsules; returns uint8 (res, res, 3)."""
    _check_resolution(resolution)
    joints = pose.as_array()
    canvas = np.empty((resolution, resolution, 3), dtype=np.float64)
    canvas[:] = BACKGROUND
    for b in _DRAW_ORDER:
        parent, child = BONES[b]
        width = _TORSO_WIDTH if b == TORSO else _LIMB_WIDTH
        cov = _capsule_coverage(joints[parent], joints[child], 0.5 * width * resolution, resolution)
        _composite(canvas, cov, char.limb_colors[b])
    head = _disc_coverage(joints[2], char.head_radius * resolution, resolution)
    _composite(canvas, head, char.limb_colors[1])
    return np.round(canvas).astype(np.uint8)


def torso_region(char: CharacterSpec, pose: PoseFrame, resolution: int) -> np.ndarray:
    """Boolean mask of the pixels the torso capsule can touch."""
    joints = pose.as_array()
    cov = _capsule_coverage(joints[0], joints[1], 0.5 * _TORSO_WIDTH * resolution + 1.0, resolution)
    return cov > 0


def render_skeleton(pose: PoseFrame, resolution: int = 64) -> np.ndarray:
    """OpenPose-style skeleton on black: translucent coloured limbs, then joints."""
    _check_resolution(resolution)
    joints = pose.as_array()
    canvas = np.zeros((resolution, resolution, 3), dtype=np.float64)
    for b, (parent, child) in enumerate(BONES):
        cov = _capsule_coverage(joints[parent], joints[child],
                                0.5 * SKELETON_LIMB_WIDTH * resolution, resolution)
        _composite(canvas, cov, OPENPOSE_COLORS[b], alpha=SKELETON_LIMB_ALPHA)
    for j in range(NUM_JOINTS):
        cov = _disc_coverage(joints[j], SKELETON_JOINT_RADIUS * resolution, resolution)
        _composite(canvas, cov, OPENPOSE_COLORS[j])
    return np.round(canvas).astype(np.uint8)


# --- clip files --------------------------------------------------------------

def save_png(path: Path, image: np.ndarray):
    try:
        Image.fromarray(np.asarray(image, dtype=np.uint8)).save(path, format="PNG")
    except OSError as exc:
        raise DataIOError(path, f"cannot write image ({exc.strerror or exc})") from exc


def load_png(path) -> np.ndarray:
    try:
        with Image.open(path) as im:
            return np.asarray(im.convert("RGB"), dtype=np.uint8)
    except (OSError, ValueError) as exc:
        raise DataIOError(path, "cannot read image") from exc


def emit_clip(char: CharacterSpec, poses: PoseSequence, out_dir, reference_index: int = 0,
              resolution: int = 64, seed: int = 0) -> ClipRecord:
    out_dir = Path(out_dir)
    n = len(poses)
    if not 0 <= reference_index < n:
        raise InvalidArgument(f"reference_index {reference_index} outside [0, {n})")
    try:
        (out_dir / "frames").mkdir(parents=True, exist_ok=True)
        (out_dir / "skeletons").mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise DataIOError(out_dir, "cannot create clip directory") from exc
    frame_paths, skeleton_paths = [], []
    for i, pose in enumerate(poses.frames):
        fp = out_dir / "frames" / f"{i:05d}.png"
        sp = out_dir / "skeletons" / f"{i:05d}.png"
        frame = render_frame(char, pose, resolution)
        save_png(fp, frame)
        save_png(sp, render_skeleton(pose, resolution))
        if i == reference_index:
            save_png(out_dir / "ref.png", frame)
        frame_paths.append(fp)
        skeleton_paths.append(sp)
    manifest = {
        "seed": int(seed),
        "length": n,
        "fps": poses.fps,
        "resolution": resolution,
        "reference_index": reference_index,
        "joint_names": list(JOINTS),
        "joints": [[list(xy) for xy in f.joints] for f in poses.frames],
        "character": char.to_json(),
    }
    _write_json(out_dir / "clip.json", manifest)
    return ClipRecord(char, poses, tuple(frame_paths), tuple(skeleton_paths),
                      reference_index, seed=int(seed), resolution=resolution, root=out_dir)


def _write_json(path: Path, obj):
    try:
        path.write_text(json.dumps(obj, indent=1))
    except OSError as exc:
        raise DataIOError(path, "cannot write manifest") from exc


def load_clip(clip_dir) -> ClipRecord:
    clip_dir = Path(clip_dir)
    path = clip_dir / "clip.json"
    try:
        m = json.loads(path.read_text())
    except OSError as exc:
        raise DataIOError(path, "cannot read clip manifest") from exc
    n = int(m["length"])
    poses = PoseSequence.from_array(m["joints"], fps=float(m["fps"]))
    if len(poses) != n:
        raise InvalidArgument(f"{path}: length {n} but {len(poses)} joint frames")
    return ClipRecord(
        character=CharacterSpec.from_json(m["character"]),
        poses=poses,
        frame_paths=tuple(clip_dir / "frames" / f"{i:05d}.png" for i in range(n)),
        skeleton_paths=tuple(clip_dir / "skeletons" / f"{i:05d}.png" for i in range(n)),
        reference_index=int(m["reference_index"]),
        seed=int(m["seed"]),
        resolution=int(m.get("resolution", 64)),
        root=clip_dir,
    )


def gen_dataset(root, n_clips: int, frames: int, seed: int, resolution: int = 64,
                motion_amplitude: float = 0.04, fps: float = 8.0) -> list[ClipRecord]:
    """Write ``n_clips`` clips under ``root/clips/<id>/``."""
    if n_clips < 1:
        raise InvalidArgument(f"n_clips must be >= 1, got {n_clips}")
    rng = np.random.default_rng([seed, 0xDA7A])
    records = []
    for i in range(n_clips):
        char_seed, pose_seed = (int(s) for s in rng.integers(0, 2**31 - 1, size=2))
        ref = int(rng.integers(0, frames))
        char = gen_character(char_seed)
        poses = gen_pose_sequence(pose_seed, frames, motion_amplitude, char.proportions, fps=fps)
        records.append(emit_clip(char, poses, Path(root) / "clips" / f"{i:05d}", ref,
                                 resolution=resolution, seed=pose_seed))
    return records


def load_dataset(root) -> list[ClipRecord]:
    clips = Path(root) / "clips"
    if not clips.is_dir():
        raise DataIOError(clips, "dataset has no clips directory")
    return [load_clip(d) for d in sorted(clips.iterdir()) if (d / "clip.json").exists()]


def skeleton_length(pose: PoseFrame) -> float:
    """Summed bone length of a pose (normalized units)."""
    j = pose.as_array()
    return float(sum(np.hypot(*(j[c] - j[p])) for p, c in BONES))
