"""Keypoint-sequence ingestion, synthetic data generation, and clip windowing.

Datasets are JSON-lines files with a versioned header line; every numeric
array is stored as a flat row-major list plus its shape, which round-trips
float64 values exactly. A forward-kinematics generator produces seed-exact
synthetic sequences so training and evaluation are self-contained.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError, ParseError, ValidationError
from .scan_orders import Skeleton, h36m17_skeleton, mirror_sequence

__all__ = [
    "SequenceRecord",
    "CameraConfig",
    "SyntheticConfig",
    "Clip",
    "save_dataset",
    "load_dataset",
    "synth_generate",
    "flip_augment",
    "make_clips",
    "DATASET_FORMAT",
    "DATASET_VERSION",
]

DATASET_FORMAT = "ssmlift.dataset"
DATASET_VERSION = 1

_BOUND_TOL = 1e-9
_ROOT_TOL = 1e-6


@dataclass
class SequenceRecord:
    """One motion sequence: normalized 2D keypoints plus optional 3D targets."""

    id: str
    keypoints_2d: np.ndarray           # [T, J, 2], normalized to [-1, 1]
    action: str | None = None
    fps: float = 50.0
    poses_3d: np.ndarray | None = None  # [T, J, 3] mm, root-relative
    confidence: np.ndarray | None = None  # [T, J]

    def __post_init__(self):
        self.keypoints_2d = np.asarray(self.keypoints_2d, dtype=np.float64)
        if self.poses_3d is not None:
            self.poses_3d = np.asarray(self.poses_3d, dtype=np.float64)
        if self.confidence is not None:
            self.confidence = np.asarray(self.confidence, dtype=np.float64)
        self.validate()

    @property
    def frames(self) -> int:
        return self.keypoints_2d.shape[0]

    @property
    def joints(self) -> int:
        return self.keypoints_2d.shape[1]

    def validate(self, where: str = "record") -> None:
        kp = self.keypoints_2d
        if kp.ndim != 3 or kp.shape[2] != 2:
            raise ValidationError(f"{where}: keypoints_2d must be [T, J, 2], got {kp.shape}")
        _require_finite(kp, f"{where}.keypoints_2d")
        if np.any(np.abs(kp) > 1.0 + _BOUND_TOL):
            idx = int(np.argmax(np.abs(kp)))
            raise ValidationError(
                f"{where}.keypoints_2d: value out of [-1, 1] at flat index {idx}"
            )
        if self.poses_3d is not None:
            p3 = self.poses_3d
            if p3.shape != (kp.shape[0], kp.shape[1], 3):
                raise ValidationError(f"{where}: poses_3d shape {p3.shape} mismatches 2D {kp.shape}")
            _require_finite(p3, f"{where}.poses_3d")
            root = np.abs(p3[:, 0, :]).max()
            if root > _ROOT_TOL:
                raise ValidationError(
                    f"{where}.poses_3d: root joint deviates from origin by {root:g} mm"
                )
        if self.confidence is not None:
            if self.confidence.shape != kp.shape[:2]:
                raise ValidationError(f"{where}: confidence shape {self.confidence.shape} mismatch")
            _require_finite(self.confidence, f"{where}.confidence")


def _require_finite(arr: np.ndarray, where: str) -> None:
    bad = ~np.isfinite(arr)
    if bad.any():
        idx = int(np.argmax(bad.reshape(-1)))
        raise ValidationError(f"{where}: non-finite value at flat index {idx}")


def _pack_array(arr: np.ndarray | None):
    if arr is None:
        return None
    return {"shape": list(arr.shape), "data": [float(v) for v in arr.reshape(-1)]}


def _unpack_array(obj, where: str) -> np.ndarray | None:
    if obj is None:
        return None
    try:
        arr = np.asarray(obj["data"], dtype=np.float64).reshape(obj["shape"])
    except (KeyError, TypeError, ValueError) as e:
        raise ParseError(f"{where}: malformed array field ({e})") from e
    return arr


def save_dataset(records: list[SequenceRecord], path: str | Path) -> None:
    """Write records as JSON lines behind a versioned header; values stay exact."""
    path = Path(path)
    lines = [json.dumps({"format": DATASET_FORMAT, "version": DATASET_VERSION})]
    for i, rec in enumerate(records):
        rec.validate(where=f"record {i} (id={rec.id})")
        lines.append(json.dumps({
            "id": rec.id,
            "action": rec.action,
            "fps": rec.fps,
            "keypoints_2d": _pack_array(rec.keypoints_2d),
            "poses_3d": _pack_array(rec.poses_3d),
            "confidence": _pack_array(rec.confidence),
        }))
    path.write_text("\n".join(lines) + "\n")


def load_dataset(path: str | Path) -> list[SequenceRecord]:
    """Read a dataset file, validating finiteness and bounds with locations."""
    path = Path(path)
    if not path.exists():
        raise ParseError(f"dataset file not found: {path}")
    with path.open() as fh:
        header_line = fh.readline()
        if not header_line.strip():
            raise ParseError(f"{path}: empty file, expected a header line")
        try:
            header = json.loads(header_line)
        except json.JSONDecodeError as e:
            raise ParseError(f"{path}: bad header line ({e})") from e
        if header.get("format") != DATASET_FORMAT:
            raise ParseError(f"{path}: unknown format {header.get('format')!r}")
        if header.get("version") != DATASET_VERSION:
            raise ParseError(f"{path}: unsupported version {header.get('version')!r}")
        records: list[SequenceRecord] = []
        for i, line in enumerate(fh):
            if not line.strip():
                continue
            where = f"record {i}"
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as e:
                raise ParseError(f"{path}: {where}: bad JSON ({e})") from e
            try:
                records.append(SequenceRecord(
                    id=str(obj["id"]),
                    action=obj.get("action"),
                    fps=float(obj.get("fps", 50.0)),
                    keypoints_2d=_unpack_array(obj["keypoints_2d"], where),
                    poses_3d=_unpack_array(obj.get("poses_3d"), where),
                    confidence=_unpack_array(obj.get("confidence"), where),
                ))
            except KeyError as e:
                raise ParseError(f"{path}: {where}: missing field {e}") from e
            except ValidationError as e:
                raise ValidationError(f"{path}: {where}: {e}") from e
    return records


@dataclass(frozen=True)
class CameraConfig:
    """Pinhole camera on the z axis; infinite distance means orthographic.

    For a finite distance the projection is focal * X / (distance + Z); in
    the orthographic limit it degenerates to focal * X, so pick focal
    around 2e-4 per mm there.
    """

    focal: float = 1.6
    distance_mm: float = 4000.0


# Bone length (mm) from each joint to its parent for the default skeleton.
_H36M17_BONES = (0.0, 130.0, 450.0, 440.0, 130.0, 450.0, 440.0,
                 230.0, 250.0, 120.0, 115.0, 150.0, 280.0, 250.0,
                 150.0, 280.0, 250.0)

# Rest direction (unit-ish) of each bone in the parent frame: y up, x lateral.
_H36M17_REST = (
    (0.0, 0.0, 0.0),
    (-1.0, 0.0, 0.0), (0.0, -1.0, 0.1), (0.0, -1.0, -0.1),
    (1.0, 0.0, 0.0), (0.0, -1.0, 0.1), (0.0, -1.0, -0.1),
    (0.0, 1.0, 0.05), (0.0, 1.0, 0.0), (0.0, 1.0, 0.1), (0.0, 1.0, 0.0),
    (1.0, 0.1, 0.0), (1.0, -0.6, 0.2), (0.3, -1.0, 0.2),
    (-1.0, 0.1, 0.0), (-1.0, -0.6, 0.2), (-0.3, -1.0, 0.2),
)


@dataclass
class SyntheticConfig:
    """Seed-deterministic forward-kinematics dataset recipe."""

    seed: int = 0
    sequence_count: int = 8
    frames: int = 27
    skeleton: Skeleton = field(default_factory=h36m17_skeleton)
    bone_lengths_mm: tuple[float, ...] | None = None
    motion_frequencies: tuple[float, ...] = (0.4, 0.7, 1.1, 1.6)
    camera: CameraConfig = field(default_factory=CameraConfig)
    noise_sigma_2d: float = 0.0
    fps: float = 50.0
    swing_amplitude: float = 0.35

    def resolved_bones(self) -> np.ndarray:
        j = self.skeleton.joint_count
        if self.bone_lengths_mm is None:
            if j == 17:
                return np.asarray(_H36M17_BONES)
            raise ConfigError("bone_lengths_mm required for non-default skeletons")
        bones = np.asarray(self.bone_lengths_mm, dtype=np.float64)
        if bones.shape != (j,):
            raise ConfigError(f"need {j} bone lengths, got {bones.shape}")
        if np.any(bones[1:] <= 0):
            raise ConfigError("bone lengths must be positive")
        return bones


def _rest_directions(skeleton: Skeleton, rng: np.random.Generator) -> np.ndarray:
    if skeleton.joint_count == 17:
        rest = np.asarray(_H36M17_REST, dtype=np.float64)
    else:
        rest = rng.normal(size=(skeleton.joint_count, 3))
        rest[0] = 0.0
    norms = np.linalg.norm(rest[1:], axis=1, keepdims=True)
    rest = rest.copy()
    rest[1:] = rest[1:] / norms
    return rest


def _project(points: np.ndarray, camera: CameraConfig) -> np.ndarray:
    if math.isinf(camera.distance_mm):
        return camera.focal * points[..., :2]
    depth = camera.distance_mm + points[..., 2:3]
    return camera.focal * points[..., :2] / depth


def synth_generate(cfg: SyntheticConfig) -> list[SequenceRecord]:
    """Generate smooth sinusoidal-joint-angle motions with projected 2D views."""
    skeleton = cfg.skeleton
    bones = cfg.resolved_bones()
    rng = np.random.default_rng(cfg.seed)
    rest = _rest_directions(skeleton, rng)
    j = skeleton.joint_count
    t_axis = np.arange(cfg.frames) / cfg.fps
    actions = ("sway", "swing", "bounce", "twist")
    records: list[SequenceRecord] = []
    for s in range(cfg.sequence_count):
        freqs = rng.choice(cfg.motion_frequencies, size=j)
        phases = rng.uniform(0.0, 2.0 * np.pi, size=(j, 3))
        amps = cfg.swing_amplitude * rng.uniform(0.5, 1.0, size=(j, 3))
        # Smooth per-joint perturbation of the rest direction, renormalized so
        # bone lengths stay exact in every frame.
        wobble = amps[None] * np.sin(
            2.0 * np.pi * freqs[None, :, None] * t_axis[:, None, None] + phases[None]
        )  # [T, J, 3]
        dirs = rest[None] + wobble
        dirs[:, 0] = 0.0
        norms = np.linalg.norm(dirs[:, 1:], axis=2, keepdims=True)
        dirs[:, 1:] /= norms
        poses = np.zeros((cfg.frames, j, 3))
        for joint in range(1, j):
            parent = skeleton.parents[joint]
            poses[:, joint] = poses[:, parent] + bones[joint] * dirs[:, joint]
        # Root stays at the origin, so sequences are root-relative by construction.
        kp = _project(poses, cfg.camera)
        if cfg.noise_sigma_2d > 0:
            kp = kp + rng.normal(0.0, cfg.noise_sigma_2d, size=kp.shape)
        kp = np.clip(kp, -1.0, 1.0)
        records.append(SequenceRecord(
            id=f"synth{s:04d}",
            action=actions[s % len(actions)],
            fps=cfg.fps,
            keypoints_2d=kp,
            poses_3d=poses,
        ))
    return records


def flip_augment(record: SequenceRecord, skeleton: Skeleton) -> SequenceRecord:
    """Horizontal mirror: negate x, swap left/right joints; an exact involution."""
    pairs = skeleton.left_right_pairs
    if not pairs:
        raise ConfigError("skeleton defines no left/right pairs")
    confidence = record.confidence
    if confidence is not None:
        confidence = confidence.copy()
        for left, right in pairs:
            confidence[:, [left, right]] = confidence[:, [right, left]]
    return SequenceRecord(
        id=record.id,
        action=record.action,
        fps=record.fps,
        keypoints_2d=mirror_sequence(record.keypoints_2d, pairs),
        poses_3d=None if record.poses_3d is None else mirror_sequence(record.poses_3d, pairs),
        confidence=confidence,
    )


@dataclass
class Clip:
    """A fixed-length training window; padded tail frames are masked out."""

    record_id: str
    action: str | None
    start: int
    valid_frames: int
    keypoints_2d: np.ndarray
    poses_3d: np.ndarray | None
    mask: np.ndarray  # [T] bool, True for real frames

    @property
    def frames(self) -> int:
        return self.keypoints_2d.shape[0]


def _window(arr: np.ndarray | None, start: int, t: int) -> np.ndarray | None:
    if arr is None:
        return None
    length = arr.shape[0]
    stop = min(start + t, length)
    chunk = arr[start:stop]
    if chunk.shape[0] < t:
        pad = np.repeat(chunk[-1:], t - chunk.shape[0], axis=0)
        chunk = np.concatenate([chunk, pad], axis=0)
    return chunk


def make_clips(records: list[SequenceRecord], t: int, stride: int) -> list[Clip]:
    """Sliding windows of length t; short tails are edge-padded and masked."""
    if t < 1 or stride < 1:
        raise ConfigError(f"window and stride must be positive, got t={t}, stride={stride}")
    clips: list[Clip] = []
    for rec in records:
        length = rec.frames
        for start in range(0, length, stride):
            valid = min(t, length - start)
            mask = np.arange(t) < valid
            clips.append(Clip(
                record_id=rec.id,
                action=rec.action,
                start=start,
                valid_frames=valid,
                keypoints_2d=_window(rec.keypoints_2d, start, t),
                poses_3d=_window(rec.poses_3d, start, t),
                mask=mask,
            ))
    return clips
