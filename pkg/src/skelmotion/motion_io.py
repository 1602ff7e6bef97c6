"""Per-joint motion features, the binary motion file format, a procedural
caption-paired corpus and reconstruction metrics.

Per-joint block layout (channels within one joint's block):

* root (7):       height, horizontal velocity (x, z), yaw rate, 3-D velocity (x, y, z)
* joint (12):     root-space position (3), velocity (3), 6-D local rotation
* foot/toe (13):  as joint, plus a trailing foot-contact label

Velocities are per-frame forward differences (``v[t] = p[t+1] - p[t]``, the
last frame repeats the previous difference), expressed in the root frame.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .skeleton import SkeletonTopology, load_skeleton
from .text import DEFAULT_MAX_TOKENS, tokenize

MAGIC = b"SALM"
FORMAT_VERSION = 1
DEFAULT_FPS = 20.0
_HEADER = struct.Struct("<4sHIfH")


class MotionFormatError(ValueError):
    pass


# -- channel bookkeeping ------------------------------------------------------

def _channels(topology: SkeletonTopology, root_slice: slice | None, joint_slice: slice | None) -> np.ndarray:
    idx = []
    for j, off in enumerate(topology.feature_offsets):
        sl = root_slice if topology.parent[j] < 0 else joint_slice
        if sl is not None:
            idx.extend(range(off + sl.start, off + sl.stop))
    return np.asarray(idx, dtype=np.int64)


def position_channels(topology: SkeletonTopology) -> np.ndarray:
    """Flat indices of the root-space position channels (non-root joints, 3 each)."""
    return _channels(topology, None, slice(0, 3))


def velocity_channels(topology: SkeletonTopology) -> np.ndarray:
    """Flat indices of the 3-D velocity channels (root's 3-D velocity included)."""
    return _channels(topology, slice(4, 7), slice(3, 6))


def contact_channels(topology: SkeletonTopology) -> np.ndarray:
    return np.asarray(
        [off + 12 for j, off in enumerate(topology.feature_offsets) if topology.feature_dim[j] == 13],
        dtype=np.int64,
    )


def decompose_pose(flat: np.ndarray, topology: SkeletonTopology) -> list[np.ndarray]:
    """Split ``(..., sum D_j)`` pose vectors into per-joint blocks ``(..., D_j)``."""
    flat = np.asarray(flat)
    if flat.shape[-1] != topology.total_width:
        raise MotionFormatError(
            f"pose width {flat.shape[-1]} does not match skeleton width {topology.total_width}"
        )
    return [flat[..., off: off + d] for off, d in zip(topology.feature_offsets, topology.feature_dim)]


def compose_pose(blocks: Sequence[np.ndarray], topology: SkeletonTopology) -> np.ndarray:
    if len(blocks) != topology.n_joints:
        raise MotionFormatError(f"{len(blocks)} blocks for {topology.n_joints} joints")
    for j, b in enumerate(blocks):
        if b.shape[-1] != topology.feature_dim[j]:
            raise MotionFormatError(f"block {j} has width {b.shape[-1]}, expected {topology.feature_dim[j]}")
    return np.concatenate(blocks, axis=-1)


# -- containers -----------------------------------------------------------------

@dataclass
class MotionSequence:
    data: np.ndarray  # (N, sum D_j) float32, frames outer
    topology: SkeletonTopology
    fps: float = DEFAULT_FPS

    def __post_init__(self):
        self.data = np.ascontiguousarray(self.data, dtype=np.float32)
        if self.data.ndim != 2 or self.data.shape[1] != self.topology.total_width:
            raise MotionFormatError(
                f"motion array shape {self.data.shape} does not match width {self.topology.total_width}"
            )

    @property
    def n_frames(self) -> int:
        return self.data.shape[0]

    @property
    def blocks(self) -> list[np.ndarray]:
        return decompose_pose(self.data, self.topology)

    def positions(self) -> np.ndarray:
        """Root-space joint positions, ``(N, J-1, 3)`` (the root carries none)."""
        return self.data[:, position_channels(self.topology)].reshape(self.n_frames, -1, 3)

    @classmethod
    def from_blocks(cls, blocks: Sequence[np.ndarray], topology: SkeletonTopology, fps: float = DEFAULT_FPS):
        return cls(compose_pose(blocks, topology), topology, fps)


@dataclass
class CaptionedClip:
    motion: MotionSequence
    caption: tuple[str, ...]
    caption_text: str


def mpjpe(a: MotionSequence, b: MotionSequence) -> float:
    """Mean per-joint position error over frames and position-bearing joints."""
    if a.topology.feature_dim != b.topology.feature_dim or a.n_frames != b.n_frames:
        raise MotionFormatError("mpjpe needs motions with the same skeleton and frame count")
    diff = a.positions().astype(np.float64) - b.positions().astype(np.float64)
    return float(np.linalg.norm(diff, axis=-1).mean())


def fit_window(data: np.ndarray, n_frames: int, start: int = 0) -> np.ndarray:
    """Crop ``(N, W)`` to ``n_frames`` from ``start`` or loop-pad a shorter clip."""
    if n_frames % 4:
        raise MotionFormatError(f"window length {n_frames} is not divisible by 4")
    n = data.shape[0]
    if n >= n_frames:
        start = min(start, n - n_frames)
        return data[start: start + n_frames]
    reps = -(-n_frames // n)
    return np.concatenate([data] * reps, axis=0)[:n_frames]


# -- binary motion file ---------------------------------------------------------

def write_motion_file(path: str | Path, motion: MotionSequence) -> None:
    """Little-endian: magic, version u16, N u32, fps f32, J u16, D_j u16 x J, f32 payload."""
    dims = motion.topology.feature_dim
    header = _HEADER.pack(MAGIC, FORMAT_VERSION, motion.n_frames, motion.fps, len(dims))
    header += struct.pack(f"<{len(dims)}H", *dims)
    Path(path).write_bytes(header + motion.data.astype("<f4").tobytes())


def read_motion_file(path: str | Path, topology: SkeletonTopology | None = None) -> MotionSequence:
    """Read a motion file; ``topology`` defaults to the bundled 22-joint skeleton."""
    if topology is None:
        topology = load_skeleton()[0]
    raw = Path(path).read_bytes()
    if len(raw) < _HEADER.size:
        raise MotionFormatError(f"{path}: file too short for header")
    magic, version, n, fps, n_joints = _HEADER.unpack_from(raw)
    if magic != MAGIC:
        raise MotionFormatError(f"{path}: bad magic {magic!r}")
    if version != FORMAT_VERSION:
        raise MotionFormatError(f"{path}: unsupported version {version}")
    dims_end = _HEADER.size + 2 * n_joints
    if len(raw) < dims_end:
        raise MotionFormatError(f"{path}: truncated joint width list")
    dims = struct.unpack_from(f"<{n_joints}H", raw, _HEADER.size)
    if 0 in dims:
        raise MotionFormatError(f"{path}: zero joint width in header")
    if tuple(dims) != topology.feature_dim:
        raise MotionFormatError(f"{path}: joint widths {dims} do not match skeleton {topology.feature_dim}")
    width = sum(dims)
    expected = n * width * 4
    payload = raw[dims_end:]
    if len(payload) < expected:
        raise MotionFormatError(
            f"{path}: truncated payload ({len(payload) // (4 * width)} of {n} frames)"
        )
    if len(payload) > expected:
        raise MotionFormatError(f"{path}: {len(payload) - expected} trailing bytes after payload")
    data = np.frombuffer(payload, dtype="<f4").reshape(n, width).astype(np.float32)
    return MotionSequence(data, topology, float(fps))


def write_corpus(out_dir: str | Path, clips: Sequence[CaptionedClip]) -> list[Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = []
    for i, clip in enumerate(clips):
        p = out / f"clip_{i:04d}.salm"
        write_motion_file(p, clip.motion)
        paths.append(p)
    (out / "captions.txt").write_text("".join(c.caption_text + "\n" for c in clips), encoding="utf-8")
    return paths


def read_corpus(corpus_dir: str | Path, topology: SkeletonTopology) -> list[CaptionedClip]:
    root = Path(corpus_dir)
    captions = (root / "captions.txt").read_text(encoding="utf-8").splitlines()
    files = sorted(root.glob("clip_*.salm"))
    if len(files) != len(captions):
        raise MotionFormatError(f"{root}: {len(files)} motion files but {len(captions)} captions")
    return [
        CaptionedClip(read_motion_file(f, topology), tuple(tokenize(c)), c)
        for f, c in zip(files, captions)
    ]


# -- procedural corpus ----------------------------------------------------------

def _rot_x(a):
    c, s = np.cos(a), np.sin(a)
    z, o = np.zeros_like(a), np.ones_like(a)
    return np.stack([np.stack([o, z, z], -1), np.stack([z, c, -s], -1), np.stack([z, s, c], -1)], -2)


def _rot_y(a):
    c, s = np.cos(a), np.sin(a)
    z, o = np.zeros_like(a), np.ones_like(a)
    return np.stack([np.stack([c, z, s], -1), np.stack([z, o, z], -1), np.stack([-s, z, c], -1)], -2)


def _rot_z(a):
    c, s = np.cos(a), np.sin(a)
    z, o = np.zeros_like(a), np.ones_like(a)
    return np.stack([np.stack([c, -s, z], -1), np.stack([s, c, z], -1), np.stack([z, z, o], -1)], -2)


def _forward_diff(x: np.ndarray) -> np.ndarray:
    if x.shape[0] < 2:
        return np.zeros_like(x)
    d = np.diff(x, axis=0)
    return np.concatenate([d, d[-1:]], axis=0)


def _joint(topology: SkeletonTopology, name: str) -> int | None:
    return topology.joint_names.index(name) if name in topology.joint_names else None


class _Pose:
    """Per-frame local rotations and root trajectory for one procedural clip."""

    def __init__(self, topology: SkeletonTopology, n: int):
        self.topology = topology
        self.n = n
        self.angles = {}  # joint -> list of (axis, angle array)
        self.root_pos = np.zeros((n, 3))
        self.heading = np.zeros(n)
        # arms hang down instead of the T-pose rest
        for side, sign in (("left", -1.0), ("right", 1.0)):
            self.add(f"{side}_shoulder", "z", np.full(n, sign * 1.25))

    def add(self, name: str, axis: str, angle: np.ndarray) -> None:
        j = _joint(self.topology, name)
        if j is not None:
            self.angles.setdefault(j, []).append((axis, angle))

    def local_rotations(self) -> np.ndarray:
        rots = np.tile(np.eye(3), (self.n, self.topology.n_joints, 1, 1))
        for j, terms in self.angles.items():
            r = np.tile(np.eye(3), (self.n, 1, 1))
            # later terms act in the parent frame, after earlier ones
            for axis, a in terms:
                r = {"x": _rot_x, "y": _rot_y, "z": _rot_z}[axis](a) @ r
            rots[:, j] = r
        return rots


def _topo_order(topology: SkeletonTopology) -> list[int]:
    order, seen = [], set()

    def visit(j):
        if j in seen:
            return
        if topology.parent[j] >= 0:
            visit(topology.parent[j])
        seen.add(j)
        order.append(j)

    for j in range(topology.n_joints):
        visit(j)
    return order


def _features(pose: _Pose) -> np.ndarray:
    topo = pose.topology
    if topo.offsets is None:
        raise MotionFormatError("synthetic corpus needs rest offsets in the skeleton file")
    n, jn = pose.n, topo.n_joints
    offsets = np.asarray(topo.offsets)
    local = pose.local_rotations()
    glob_rot = np.zeros_like(local)
    glob_pos = np.zeros((n, jn, 3))
    root = topo.root
    yaw = _rot_y(pose.heading)
    for j in _topo_order(topo):
        p = topo.parent[j]
        if p < 0:
            glob_rot[:, j] = yaw @ local[:, j]
            glob_pos[:, j] = pose.root_pos
        else:
            glob_rot[:, j] = glob_rot[:, p] @ local[:, j]
            glob_pos[:, j] = glob_pos[:, p] + np.einsum("nab,b->na", glob_rot[:, p], offsets[j])

    inv_yaw = np.transpose(yaw, (0, 2, 1))
    floor_root = pose.root_pos * np.array([1.0, 0.0, 1.0])
    local_pos = np.einsum("nab,njb->nja", inv_yaw, glob_pos - floor_root[:, None])
    local_vel = _forward_diff(local_pos)

    root_vel = np.einsum("nab,nb->na", inv_yaw, _forward_diff(pose.root_pos))
    yaw_rate = _forward_diff(pose.heading[:, None])[:, 0]

    glob_speed = np.linalg.norm(_forward_diff(glob_pos)[..., [0, 2]], axis=-1)
    rest_height = np.zeros(jn)
    for j in _topo_order(topo):
        p = topo.parent[j]
        rest_height[j] = offsets[j][1] + (rest_height[p] if p >= 0 else 0.0)

    blocks = []
    for j in range(jn):
        if topo.parent[j] < 0:
            blocks.append(np.column_stack([pose.root_pos[:, 1], root_vel[:, [0, 2]], yaw_rate, root_vel]))
            continue
        rot6 = local[:, j][:, :, :2].transpose(0, 2, 1).reshape(n, 6)
        cols = [local_pos[:, j], local_vel[:, j], rot6]
        if topo.foot[j]:
            on_floor = glob_pos[:, j, 1] < max(rest_height[j], 0.0) + 0.04
            still = glob_speed[:, j] < 0.02
            cols.append((on_floor & still).astype(np.float64)[:, None])
        blocks.append(np.column_stack(cols))
    return np.concatenate(blocks, axis=1)


def _walk(pose: _Pose, rng, t, fps):
    direction = rng.choice(["forward", "backward", "in a circle to the left", "in a circle to the right"])
    speed = rng.uniform(0.8, 1.3) * (-0.6 if direction == "backward" else 1.0)
    freq = rng.uniform(0.8, 1.1)
    amp = rng.uniform(0.3, 0.5)
    phase = 2 * np.pi * freq * t + rng.uniform(0, 2 * np.pi)
    turn = {"in a circle to the left": 0.6, "in a circle to the right": -0.6}.get(direction, 0.0)
    pose.heading = pose.heading + turn * t
    for side, sgn in (("left", 1.0), ("right", -1.0)):
        swing = sgn * amp * np.sin(phase)
        pose.add(f"{side}_hip", "x", -swing)
        pose.add(f"{side}_knee", "x", 0.5 * amp * (1 + np.sin(phase * sgn + np.pi / 2)))
        pose.add(f"{side}_shoulder", "x", swing * 0.8)
        pose.add(f"{side}_elbow", "x", np.full_like(t, -0.3))
    pose.root_pos[:, 0] = np.cumsum(np.sin(pose.heading) * speed / fps)
    pose.root_pos[:, 2] = np.cumsum(np.cos(pose.heading) * speed / fps)
    pose.root_pos[:, 1] = 0.93 + 0.02 * np.abs(np.sin(phase))
    return f"a person walks {direction}"


def _jump(pose: _Pose, rng, t, fps):
    forward = rng.random() < 0.5
    dur = t[-1] + 1.0 / fps
    start, air = 0.3 * dur, rng.uniform(0.35, 0.5) * dur
    s = np.clip((t - start) / air, 0.0, 1.0)
    airborne = (s > 0) & (s < 1)
    height = rng.uniform(0.25, 0.45) * 4 * s * (1 - s)
    crouch = np.exp(-(((t - start) / (0.12 * dur)) ** 2)) + np.exp(-(((t - start - air) / (0.12 * dur)) ** 2))
    pose.root_pos[:, 1] = 0.93 + height - 0.15 * crouch
    if forward:
        dist = rng.uniform(0.6, 1.0) * s
        pose.root_pos[:, 0] = dist * np.sin(pose.heading)
        pose.root_pos[:, 2] = dist * np.cos(pose.heading)
    for side, sgn in (("left", -1.0), ("right", 1.0)):
        pose.add(f"{side}_hip", "x", -0.8 * crouch - 0.3 * airborne)
        pose.add(f"{side}_knee", "x", 1.4 * crouch + 0.4 * airborne)
        pose.add(f"{side}_shoulder", "z", sgn * -1.0 * airborne)
    return "a person jumps forward" if forward else "a person jumps up"


def _wave(pose: _Pose, rng, t, fps):
    which = rng.choice(["left", "right", "both"])
    freq = rng.uniform(1.0, 2.0)
    ramp = np.clip(t / 0.5, 0.0, 1.0)
    osc = np.sin(2 * np.pi * freq * t)
    for side, sgn in (("left", 1.0), ("right", -1.0)):
        if which in (side, "both"):
            pose.add(f"{side}_shoulder", "z", sgn * 2.4 * ramp)
            pose.add(f"{side}_elbow", "z", sgn * (0.6 + 0.5 * osc) * ramp)
    arm = "both hands" if which == "both" else f"their {which} hand"
    return f"a person waves {arm}"


def _kick(pose: _Pose, rng, t, fps):
    side = rng.choice(["left", "right"])
    dur = t[-1] + 1.0 / fps
    centre = rng.uniform(0.4, 0.6) * dur
    bump = np.exp(-(((t - centre) / (0.1 * dur)) ** 2))
    pose.add(f"{side}_hip", "x", -rng.uniform(1.0, 1.4) * bump)
    pose.add(f"{side}_knee", "x", 0.8 * np.exp(-(((t - centre + 0.1 * dur) / (0.08 * dur)) ** 2)))
    pose.root_pos[:, 1] = 0.93
    return f"a person kicks with their {side} leg"


def _squat(pose: _Pose, rng, t, fps):
    depth = rng.uniform(0.6, 1.1)
    freq = rng.uniform(0.4, 0.7)
    bend = depth * 0.5 * (1 - np.cos(2 * np.pi * freq * t))
    for side, sgn in (("left", 1.0), ("right", -1.0)):
        pose.add(f"{side}_hip", "x", -bend)
        pose.add(f"{side}_knee", "x", 2 * bend)
        pose.add(f"{side}_ankle", "x", -bend)
        pose.add(f"{side}_shoulder", "x", -0.8 * bend)
    pose.root_pos[:, 1] = 0.93 - 0.47 * (1 - np.cos(bend))
    return "a person squats down and stands up"


def _raise(pose: _Pose, rng, t, fps):
    which = rng.choice(["left", "right", "both"])
    dur = t[-1] + 1.0 / fps
    up = np.clip((t - 0.2 * dur) / (0.3 * dur), 0.0, 1.0)
    for side, sgn in (("left", 1.0), ("right", -1.0)):
        if which in (side, "both"):
            pose.add(f"{side}_shoulder", "x", -2.6 * up)
    arm = "both arms" if which == "both" else f"their {which} arm"
    return f"a person raises {arm} forward"


_ACTIONS = (_walk, _jump, _wave, _kick, _squat, _raise)
_FRAME_CHOICES = (48, 56, 64, 72, 80)


def synthesize_clip(
    rng: np.random.Generator, topology: SkeletonTopology, n_frames: int | None = None, fps: float = DEFAULT_FPS
) -> CaptionedClip:
    n = int(n_frames or rng.choice(_FRAME_CHOICES))
    n = max(4, n - n % 4)
    action = _ACTIONS[rng.integers(len(_ACTIONS))]
    pose = _Pose(topology, n)
    pose.root_pos[:, 1] = 0.93
    t = np.arange(n) / fps
    pose.heading = np.full(n, rng.uniform(-np.pi, np.pi))
    caption = action(pose, rng, t, fps)
    # spine and head sway shared by every action
    pose.add("spine2", "x", 0.05 * np.sin(2 * np.pi * 0.5 * t + rng.uniform(0, 2 * np.pi)))
    pose.add("neck", "y", 0.1 * np.sin(2 * np.pi * 0.3 * t + rng.uniform(0, 2 * np.pi)))
    data = _features(pose)
    toks = tokenize(caption)
    if len(toks) > DEFAULT_MAX_TOKENS:
        toks = toks[:DEFAULT_MAX_TOKENS]
    return CaptionedClip(MotionSequence(data.astype(np.float32), topology, fps), tuple(toks), caption)


def generate_synthetic_corpus(
    seed: int, n_clips: int, topology: SkeletonTopology, n_frames: int | None = None, fps: float = DEFAULT_FPS
) -> list[CaptionedClip]:
    """Procedural clips (gaits, jumps, waves, kicks, squats, arm raises) with
    templated captions. Deterministic per ``seed``; each clip draws from its
    own child stream so clip ``i`` does not depend on ``n_clips``."""
    n_clips = max(1, int(n_clips))
    streams = np.random.SeedSequence(seed).spawn(n_clips)
    return [synthesize_clip(np.random.default_rng(s), topology, n_frames, fps) for s in streams]
