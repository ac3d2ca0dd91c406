"""Procedurally generated camera-controllable 2D world.

An infinite analytic texture (seeded sinusoidal plaids plus cell-hashed
landmark blobs) sampled under a pan/zoom/rotate camera. Because the texture
is a pure function of (seed, world coordinate), every control sequence has
an exact ground-truth render - the oracle behind all drift metrics.

Camera deltas are world-space and compose additively, so each frame's
control encodes only the change from the previous frame; embeddings never
grow with trajectory length.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

EPISODE_MAGIC = b"AAPTEP1\x00"
CONTROL_DIM = 4
NUM_SCENE_CLASSES = 4


class FormatError(Exception):
    pass


class OutlierRejection(Exception):
    """Raised when a normalized control exceeds the outlier threshold."""


@dataclass
class CameraPose:
    x: float = 0.0
    y: float = 0.0
    zoom: float = 0.0  # log units, clamped to [-1, 1]
    rot: float = 0.0  # radians


@dataclass
class WorldState:
    seed: int
    camera: CameraPose = field(default_factory=CameraPose)


@dataclass
class ControlSignal:
    dx: float = 0.0
    dy: float = 0.0
    dzoom: float = 0.0
    drot: float = 0.0

    def as_array(self) -> np.ndarray:
        return np.array([self.dx, self.dy, self.dzoom, self.drot], dtype=np.float32)


@dataclass
class Trajectory:
    initial: WorldState
    controls: list[ControlSignal]

    def __len__(self):
        return len(self.controls)

    def control_array(self) -> np.ndarray:
        if not self.controls:
            return np.zeros((0, CONTROL_DIM), dtype=np.float32)
        return np.stack([c.as_array() for c in self.controls])


@dataclass
class MotionProfile:
    name: str
    trans_std: float
    zoom_std: float
    rot_std: float
    momentum: float = 0.8

    @property
    def bounds(self) -> np.ndarray:
        # clip at 3 sigma so the stationary std stays within ~10% of target
        return np.array(
            [3 * self.trans_std, 3 * self.trans_std, 3 * self.zoom_std, 3 * self.rot_std],
            dtype=np.float64,
        )

    @property
    def stds(self) -> np.ndarray:
        return np.array([self.trans_std, self.trans_std, self.zoom_std, self.rot_std], dtype=np.float64)


MOTION_PROFILES = {
    "static": MotionProfile("static", 0.0, 0.0, 0.0),
    "gentle": MotionProfile("gentle", 0.5, 0.008, 0.008),
    "roam": MotionProfile("roam", 1.0, 0.015, 0.015),
    "brisk": MotionProfile("brisk", 1.6, 0.02, 0.02),
}
# ids are frozen: manifests regenerate trajectories from (seed, profile id)
_PROFILE_IDS = {"static": 0, "gentle": 1, "roam": 2, "brisk": 3}


def scene_class(seed: int) -> int:
    return int(seed) % NUM_SCENE_CLASSES


# -- texture ------------------------------------------------------------------


def _splitmix64(x: np.ndarray) -> np.ndarray:
    x = x.astype(np.uint64)
    x = (x + np.uint64(0x9E3779B97F4A7C15)) & np.uint64(0xFFFFFFFFFFFFFFFF)
    z = x
    z = (z ^ (z >> np.uint64(30))) * np.uint64(0xBF58476D1CE4E5B9)
    z = (z ^ (z >> np.uint64(27))) * np.uint64(0x94D049BB133111EB)
    return z ^ (z >> np.uint64(31))


def _hash01(*ints: np.ndarray) -> np.ndarray:
    """Deterministic uniform [0,1) floats from integer coordinates."""
    h = np.zeros(np.broadcast(*ints).shape, dtype=np.uint64)
    for v in ints:
        h = _splitmix64(h ^ np.asarray(v, dtype=np.int64).astype(np.uint64))
    return (h >> np.uint64(11)).astype(np.float64) / float(1 << 53)


class _Texture:
    """Per-seed plaid components and landmark-blob settings."""

    CELL = 24.0

    def __init__(self, seed: int):
        self.seed = int(seed)
        fam = scene_class(seed)
        rng = np.random.default_rng([self.seed & 0xFFFFFFFF, 0xA11CE])
        n_waves = [5, 6, 4, 7][fam]
        self.freq = (1.0 / rng.uniform(9.0, 28.0, n_waves)).astype(np.float64)
        theta = rng.uniform(0, np.pi, n_waves)
        if fam == 2:  # stripe-leaning family; spread keeps both axes observable
            theta = theta * 0.55 + rng.uniform(0, np.pi)
        self.dirs = np.stack([np.cos(theta), np.sin(theta)], axis=1)
        self.phase = rng.uniform(0, 2 * np.pi, n_waves)
        amps = rng.uniform(0.05, 0.16, (n_waves, 3))
        self.amps = amps / amps.sum(axis=0, keepdims=True) * 0.55
        self.base = rng.uniform(0.35, 0.65, 3)
        self.blob_density = [0.0, 0.8, 0.5, 0.35][fam]

    def sample(self, pts: np.ndarray) -> np.ndarray:
        """pts [..., 2] world coords -> RGB [..., 3] in [0, 1]."""
        proj = pts @ self.dirs.T  # [..., n_waves]
        waves = np.sin(2 * np.pi * self.freq * proj + self.phase)
        rgb = self.base + waves @ self.amps
        if self.blob_density > 0:
            rgb = rgb + self._blobs(pts)
        return np.clip(rgb, 0.0, 1.0).astype(np.float32)

    def _blobs(self, pts: np.ndarray) -> np.ndarray:
        cell = np.floor(pts / self.CELL).astype(np.int64)
        out = np.zeros(pts.shape[:-1] + (3,), dtype=np.float64)
        for di in (-1, 0, 1):
            for dj in (-1, 0, 1):
                ci = cell[..., 0] + di
                cj = cell[..., 1] + dj
                present = _hash01(ci, cj, np.int64(self.seed), np.int64(1)) < self.blob_density
                bx = (ci + _hash01(ci, cj, np.int64(self.seed), np.int64(2))) * self.CELL
                by = (cj + _hash01(ci, cj, np.int64(self.seed), np.int64(3))) * self.CELL
                r = 5.0 + 5.0 * _hash01(ci, cj, np.int64(self.seed), np.int64(4))
                d2 = (pts[..., 0] - bx) ** 2 + (pts[..., 1] - by) ** 2
                g = np.exp(-d2 / (2 * r * r)) * present
                for ch in range(3):
                    tone = _hash01(ci, cj, np.int64(self.seed), np.int64(5 + ch)) - 0.5
                    out[..., ch] += g * tone * 0.45
        return out


def _apply_control(pose: CameraPose, c: ControlSignal) -> CameraPose:
    return CameraPose(
        x=pose.x + c.dx,
        y=pose.y + c.dy,
        zoom=float(np.clip(pose.zoom + c.dzoom, -1.0, 1.0)),
        rot=pose.rot + c.drot,
    )


def render_frame(texture: _Texture, pose: CameraPose, H: int, W: int) -> np.ndarray:
    sx = np.arange(W, dtype=np.float64) - (W - 1) / 2.0
    sy = np.arange(H, dtype=np.float64) - (H - 1) / 2.0
    gx, gy = np.meshgrid(sx, sy)
    scale = np.exp(-pose.zoom)  # positive zoom magnifies
    cr, sr = np.cos(pose.rot), np.sin(pose.rot)
    wx = pose.x + scale * (cr * gx - sr * gy)
    wy = pose.y + scale * (sr * gx + cr * gy)
    pts = np.stack([wx, wy], axis=-1)
    return texture.sample(pts).transpose(2, 0, 1)  # [3, H, W]


def render_world(seed: int, trajectory: Trajectory, frames: int, H: int, W: int) -> np.ndarray:
    """Exact render of `frames` pixel frames [T, 3, H, W] under the trajectory."""
    if len(trajectory) != frames - 1:
        raise ValueError(f"trajectory has {len(trajectory)} controls for {frames} frames")
    tex = _Texture(seed)
    pose = trajectory.initial.camera
    out = np.empty((frames, 3, H, W), dtype=np.float32)
    out[0] = render_frame(tex, pose, H, W)
    for t, c in enumerate(trajectory.controls):
        pose = _apply_control(pose, c)
        out[t + 1] = render_frame(tex, pose, H, W)
    return out


# -- control encoding ----------------------------------------------------------


@dataclass
class ScaleStats:
    """Per-channel stds of chunk-aggregated controls over the training corpus."""

    std: np.ndarray  # [4]
    outlier_threshold: float = 6.0

    def to_dict(self):
        return {"std": self.std.tolist(), "outlier_threshold": self.outlier_threshold}

    @staticmethod
    def from_dict(d):
        return ScaleStats(np.asarray(d["std"], dtype=np.float32), float(d["outlier_threshold"]))


def chunk_controls(traj: Trajectory, temporal_factor: int) -> np.ndarray:
    """Aggregate per-pixel-frame deltas into per-latent-step deltas [K, 4].

    Chunk p covers pixel deltas [p*tf, (p+1)*tf): the camera change between
    consecutive latent frames. World-space deltas compose additively, so the
    sum is the exact relative pose change.
    """
    arr = traj.control_array()
    if arr.shape[0] % temporal_factor != 0:
        raise ValueError(f"{arr.shape[0]} controls not divisible by temporal factor {temporal_factor}")
    k = arr.shape[0] // temporal_factor
    return arr.reshape(k, temporal_factor, CONTROL_DIM).sum(axis=1)


def compute_scale_stats(trajs: list[Trajectory], temporal_factor: int, outlier_threshold: float = 6.0) -> ScaleStats:
    chunks = np.concatenate([chunk_controls(t, temporal_factor) for t in trajs], axis=0)
    std = chunks.std(axis=0)
    std = np.where(std < 1e-6, 1.0, std).astype(np.float32)  # degenerate channels pass through
    return ScaleStats(std=std, outlier_threshold=outlier_threshold)


def encode_camera(traj: Trajectory, stats: ScaleStats, temporal_factor: int) -> np.ndarray:
    """Normalized per-latent-step control vectors [K, 4], unit-ish std.

    Raises OutlierRejection when any normalized component exceeds the
    threshold; such samples are dropped from training.
    """
    normed = chunk_controls(traj, temporal_factor) / stats.std
    if normed.size and np.abs(normed).max() > stats.outlier_threshold:
        raise OutlierRejection(f"max |control| {np.abs(normed).max():.1f} exceeds {stats.outlier_threshold}")
    return normed.astype(np.float32)


def sample_trajectory(rng: np.random.Generator, length: int, profile: MotionProfile, seed: int = 0) -> Trajectory:
    """Smooth bounded random walk: OU-style momentum on per-step deltas."""
    if length < 1:
        raise ValueError("length must be >= 1")
    stds = profile.stds
    bounds = profile.bounds
    noise_std = stds * np.sqrt(max(1.0 - profile.momentum**2, 1e-9))
    v = np.zeros(CONTROL_DIM)
    controls = []
    for _ in range(length):
        v = profile.momentum * v + rng.standard_normal(CONTROL_DIM) * noise_std
        v = np.clip(v, -bounds, bounds)
        controls.append(ControlSignal(*v.astype(np.float32).tolist()))
    return Trajectory(initial=WorldState(seed=seed), controls=controls)


def trajectory_for_episode(seed: int, frames: int, profile_name: str) -> Trajectory:
    """Deterministic trajectory from (seed, profile): lets a manifest of seeds
    regenerate identical episodes with no stored pixels."""
    profile = MOTION_PROFILES[profile_name]
    if frames == 1:
        return Trajectory(initial=WorldState(seed=seed), controls=[])
    rng = np.random.default_rng([int(seed) & 0xFFFFFFFF, _PROFILE_IDS[profile_name], 0xEB15])
    return sample_trajectory(rng, frames - 1, profile, seed=seed)


# -- episodes ------------------------------------------------------------------


@dataclass
class TrainingClip:
    """One training sample: pixels + controls + scene class, latents attached
    once a codec is available."""

    seed: int
    pixels: np.ndarray  # [T, 3, H, W] float32 in [0,1]
    trajectory: Trajectory
    prompt_id: int
    latents: np.ndarray | None = None  # [1 + (T-1)/tf, C, h, w]


def quantize_pixels(pixels: np.ndarray) -> np.ndarray:
    """Snap to the u8 grid the episode files store, so write/read round-trips
    are exact."""
    u8 = np.round(pixels.clip(0, 1) * 255).astype(np.uint8)
    return u8.astype(np.float32) / 255.0


def make_episode(seed: int, frames: int, profile_name: str, H: int, W: int) -> TrainingClip:
    traj = trajectory_for_episode(seed, frames, profile_name)
    pixels = quantize_pixels(render_world(seed, traj, frames, H, W))
    return TrainingClip(seed=seed, pixels=pixels, trajectory=traj, prompt_id=scene_class(seed))


def write_episode(path, clip: TrainingClip, include_pixels: bool = True) -> None:
    T_, _, H, W = clip.pixels.shape
    controls = clip.trajectory.control_array()
    with open(path, "wb") as f:
        f.write(EPISODE_MAGIC)
        f.write(struct.pack("<IIII", T_, H, W, CONTROL_DIM))
        f.write(struct.pack("<Q", clip.seed))
        f.write(controls.astype("<f4").tobytes())
        f.write(struct.pack("<B", 1 if include_pixels else 0))
        if include_pixels:
            u8 = np.round(clip.pixels.clip(0, 1) * 255).astype(np.uint8)
            f.write(u8.tobytes())


def read_episode(path) -> TrainingClip:
    with open(path, "rb") as f:
        raw = f.read()
    if raw[: len(EPISODE_MAGIC)] != EPISODE_MAGIC:
        raise FormatError(f"bad episode magic in {path}")
    off = len(EPISODE_MAGIC)
    try:
        T_, H, W, cdim = struct.unpack_from("<IIII", raw, off)
        off += 16
        (seed,) = struct.unpack_from("<Q", raw, off)
        off += 8
        n = (T_ - 1) * cdim
        if len(raw) - off < 4 * n + 1:
            raise FormatError(f"truncated episode file {path}")
        controls = np.frombuffer(raw, dtype="<f4", count=n, offset=off).reshape(T_ - 1, cdim)
        off += 4 * n
        (has_pixels,) = struct.unpack_from("<B", raw, off)
        off += 1
    except struct.error as e:
        raise FormatError(f"truncated episode file {path}") from e
    traj = Trajectory(
        initial=WorldState(seed=int(seed)),
        controls=[ControlSignal(*row.tolist()) for row in controls],
    )
    if has_pixels:
        count = T_ * 3 * H * W
        if len(raw) - off < count:
            raise FormatError(f"truncated pixel payload in {path}")
        u8 = np.frombuffer(raw, dtype=np.uint8, count=count, offset=off)
        pixels = (u8.reshape(T_, 3, H, W).astype(np.float32)) / 255.0
    else:
        pixels = quantize_pixels(render_world(int(seed), traj, T_, H, W))
    return TrainingClip(seed=int(seed), pixels=pixels, trajectory=traj, prompt_id=scene_class(int(seed)))


def write_manifest(path, entries: list[tuple[int, int, str]]) -> None:
    with open(path, "w") as f:
        for seed, frames, profile in entries:
            f.write(f"{seed},{frames},{profile}\n")


def read_manifest(path) -> list[tuple[int, int, str]]:
    out = []
    with open(path) as f:
        for line in f:
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            seed, frames, profile = line.split(",")
            out.append((int(seed), int(frames), profile))
    return out


def clips_from_manifest(path, H: int, W: int) -> list[TrainingClip]:
    return [make_episode(seed, frames, profile, H, W) for seed, frames, profile in read_manifest(path)]
