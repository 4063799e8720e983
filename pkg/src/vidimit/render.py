"""Rasterize simulator states to 64x64 grayscale frames; demo-video file IO.

The camera tracks the torso horizontally and keeps a fixed vertical window,
so a hopper drifting in x stays centered while jumps read as vertical
motion. Frames are deterministic functions of (state, camera), which the
demo file format relies on for bit-exact round trips.
"""

from __future__ import annotations

import math
import os
import struct
import zlib
from dataclasses import dataclass

import numpy as np

from .hopper import STATE_DIM, ACTION_DIM, EnvState

FRAME_SIZE = 64
FEATURE_DIM = 1024  # 32*32 after 2x2 mean pooling

# Painted intensities, back to front.
_BG = 0
_GROUND = 128
_LEG = 200
_TORSO = 255
_MARKER = 60

_TORSO_HALF_W = 0.22
_TORSO_HALF_H = 0.12
_LEG_THICKNESS = 0.03
_GROUND_DEPTH = 0.08


@dataclass(frozen=True)
class Camera:
    """Viewport spec: world window of `width` meters, bottom edge at y_min."""

    width: float = 3.2
    y_min: float = -0.6

    def window(self, torso_x: float):
        half = 0.5 * self.width
        return torso_x - half, self.y_min, torso_x + half, self.y_min + self.width


def _validate_frame(frame: np.ndarray) -> None:
    if not (isinstance(frame, np.ndarray) and frame.shape == (FRAME_SIZE, FRAME_SIZE) and frame.dtype == np.uint8):
        raise ValueError(f"frame must be a {FRAME_SIZE}x{FRAME_SIZE} uint8 array")


def rasterize(state: EnvState, camera: Camera | None = None) -> np.ndarray:
    """Draw ground line, leg segment, and oriented torso with a corner marker."""
    if not state.is_finite():
        raise ValueError("non-finite state passed to rasterize")
    cam = camera or Camera()
    x0, y0, _, _ = cam.window(state.x)
    scale = cam.width / FRAME_SIZE

    # pixel-center world coordinates; row 0 is the top of the image
    cols = x0 + (np.arange(FRAME_SIZE) + 0.5) * scale
    rows = y0 + cam.width - (np.arange(FRAME_SIZE) + 0.5) * scale
    wx, wy = np.meshgrid(cols, rows)

    img = np.full((FRAME_SIZE, FRAME_SIZE), _BG, dtype=np.uint8)
    img[(wy <= 0.0) & (wy > -_GROUND_DEPTH)] = _GROUND

    st, ct = math.sin(state.theta), math.cos(state.theta)

    # leg: distance from pixel to the torso-center -> foot segment
    fx = state.x + state.leg * st
    fy = state.y - state.leg * ct
    dx, dy = fx - state.x, fy - state.y
    seg_len2 = dx * dx + dy * dy
    if seg_len2 > 0:
        tproj = np.clip(((wx - state.x) * dx + (wy - state.y) * dy) / seg_len2, 0.0, 1.0)
        dist2 = (wx - (state.x + tproj * dx)) ** 2 + (wy - (state.y + tproj * dy)) ** 2
        img[dist2 <= _LEG_THICKNESS**2] = _LEG

    # torso rectangle in body coordinates
    u = (wx - state.x) * ct + (wy - state.y) * st
    v = -(wx - state.x) * st + (wy - state.y) * ct
    body = (np.abs(u) <= _TORSO_HALF_W) & (np.abs(v) <= _TORSO_HALF_H)
    img[body] = _TORSO
    # asymmetric marker so theta and theta+pi render differently
    marker = (np.abs(u - 0.10) <= 0.06) & (np.abs(v - 0.05) <= 0.045)
    img[body & marker] = _MARKER
    return img


def frame_features(frame: np.ndarray) -> np.ndarray:
    """2x2 mean-pool to 32x32, flatten, scale to [0, 1]."""
    _validate_frame(frame)
    pooled = frame.astype(np.float64).reshape(32, 2, 32, 2).mean(axis=(1, 3))
    return (pooled / 255.0).reshape(FEATURE_DIM)


@dataclass
class DemoVideo:
    """Frame sequence with optional aligned ground-truth states/actions.

    states/actions are float32 (the serialized precision) so that a loaded
    video compares bit-equal to the one written.
    """

    frames: np.ndarray  # (n, 64, 64) uint8
    fps: int = 30
    states: np.ndarray | None = None  # (n, STATE_DIM) float32
    actions: np.ndarray | None = None  # (n, ACTION_DIM) float32

    def __post_init__(self):
        if self.frames.ndim != 3 or self.frames.shape[1:] != (FRAME_SIZE, FRAME_SIZE):
            raise ValueError("frames must have shape (n, 64, 64)")
        if self.fps <= 0:
            raise ValueError("fps must be positive")
        if (self.states is None) != (self.actions is None):
            raise ValueError("states and actions must be both present or both absent")
        if self.states is not None:
            n = len(self.frames)
            if len(self.states) != n or len(self.actions) != n:
                raise ValueError("states/actions count must equal frame count")
            self.states = np.asarray(self.states, dtype=np.float32)
            self.actions = np.asarray(self.actions, dtype=np.float32)

    @property
    def has_states(self) -> bool:
        return self.states is not None

    @property
    def n_frames(self) -> int:
        return len(self.frames)

    def state_at(self, i: int) -> EnvState:
        if not self.has_states:
            raise ValueError("demo video has no ground-truth states")
        return EnvState.from_array(self.states[i].astype(np.float64))


def make_demo_video(states, actions, fps: int = 30, camera: Camera | None = None) -> DemoVideo:
    """Render a state/action sequence into a DemoVideo with ground truth."""
    frames = np.stack([rasterize(s, camera) for s in states])
    state_arr = np.stack([s.to_array() for s in states]).astype(np.float32)
    action_arr = np.stack([a.to_array() for a in actions]).astype(np.float32)
    return DemoVideo(frames=frames, fps=fps, states=state_arr, actions=action_arr)


def demo_from_trajectory(traj, fps: int = 30, camera: Camera | None = None) -> DemoVideo:
    """Render an episode into a DemoVideo carrying its ground-truth states."""
    return make_demo_video(
        [s for s, _ in traj.steps], [a for _, a in traj.steps], fps=fps, camera=camera
    )


_MAGIC = b"VDM1"
_HEADER = struct.Struct("<7I")  # n_frames, height, width, state_dim, action_dim, fps, flags


def write_demo(video: DemoVideo, path: str) -> None:
    """Serialize to the `.vdm` format; the write is atomic (temp + rename)."""
    n = video.n_frames
    state_dim = STATE_DIM if video.has_states else 0
    action_dim = ACTION_DIM if video.has_states else 0
    flags = 1 if video.has_states else 0
    blob = bytearray()
    blob += _MAGIC
    blob += _HEADER.pack(n, FRAME_SIZE, FRAME_SIZE, state_dim, action_dim, video.fps, flags)
    blob += video.frames.astype(np.uint8).tobytes()
    if video.has_states:
        blob += video.states.astype("<f4").tobytes()
        blob += video.actions.astype("<f4").tobytes()
    tmp = path + ".tmp"
    with open(tmp, "wb") as fh:
        fh.write(bytes(blob))
    os.replace(tmp, path)


class DemoFormatError(ValueError):
    pass


def read_demo(path: str) -> DemoVideo:
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:4] != _MAGIC:
        raise DemoFormatError("bad magic: not a VDM1 file")
    if len(data) < 4 + _HEADER.size:
        raise DemoFormatError("truncated header")
    n, height, width, state_dim, action_dim, fps, flags = _HEADER.unpack_from(data, 4)
    if height != FRAME_SIZE or width != FRAME_SIZE:
        raise DemoFormatError(f"unsupported frame size {width}x{height}")
    has_states = bool(flags & 1)
    if has_states and (state_dim == 0 or action_dim == 0):
        raise DemoFormatError("has_states flag set but state/action dims are zero")
    if not has_states and (state_dim != 0 or action_dim != 0):
        raise DemoFormatError("has_states flag clear but dims are nonzero")

    off = 4 + _HEADER.size
    n_pix = n * height * width
    if len(data) < off + n_pix:
        raise DemoFormatError("truncated pixel section")
    frames = np.frombuffer(data, dtype=np.uint8, count=n_pix, offset=off).reshape(n, height, width).copy()
    off += n_pix

    states = actions = None
    if has_states:
        n_state = n * state_dim
        n_action = n * action_dim
        if len(data) < off + 4 * (n_state + n_action):
            raise DemoFormatError("truncated state/action section")
        states = np.frombuffer(data, dtype="<f4", count=n_state, offset=off).reshape(n, state_dim).copy()
        off += 4 * n_state
        actions = np.frombuffer(data, dtype="<f4", count=n_action, offset=off).reshape(n, action_dim).copy()
        off += 4 * n_action
    if len(data) != off:
        raise DemoFormatError("trailing bytes after declared sections")
    return DemoVideo(frames=frames, fps=fps, states=states, actions=actions)


def encode_png(frame: np.ndarray) -> bytes:
    """Lossless 8-bit grayscale PNG; deterministic bytes for fixed input."""
    _validate_frame(frame)

    def chunk(tag: bytes, payload: bytes) -> bytes:
        body = tag + payload
        return struct.pack(">I", len(payload)) + body + struct.pack(">I", zlib.crc32(body) & 0xFFFFFFFF)

    ihdr = struct.pack(">IIBBBBB", FRAME_SIZE, FRAME_SIZE, 8, 0, 0, 0, 0)
    raw = b"".join(b"\x00" + frame[row].tobytes() for row in range(FRAME_SIZE))
    return (
        b"\x89PNG\r\n\x1a\n"
        + chunk(b"IHDR", ihdr)
        + chunk(b"IDAT", zlib.compress(raw, 9))
        + chunk(b"IEND", b"")
    )
