"""Deterministic synthetic video sequences with exact per-pixel labels.

Scenes are moving geometric shapes (axis-aligned rectangles and circles,
rasterized without anti-aliasing) over a static per-seed background. The
exact labels double as the oracle teacher for distortion-map distillation.
Pixel values are quantized to the 8-bit grid at generation time so that the
on-disk PNG representation round-trips bit-exactly.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from PIL import Image

MANIFEST_NAME = "manifest.json"
LABELS_NAME = "labels.npy"
FRAMES_DIR = "frames"
DATASET_FORMAT_VERSION = 1

_SHAPE_KINDS = ("rectangle", "circle")

# class base colors (RGB in [0,1]); class 0 is background
_CLASS_COLORS = np.array(
    [
        [0.15, 0.15, 0.15],
        [0.85, 0.25, 0.20],
        [0.20, 0.70, 0.30],
        [0.25, 0.35, 0.85],
        [0.85, 0.75, 0.20],
        [0.70, 0.25, 0.75],
        [0.20, 0.75, 0.75],
        [0.90, 0.55, 0.25],
    ],
    dtype=np.float64,
)


@dataclass(frozen=True)
class Frame:
    """One video frame: pixels are channels x height x width in [0, 1]."""

    pixels: np.ndarray
    index: int

    def __post_init__(self):
        if self.pixels.ndim != 3:
            raise ValueError(f"frame pixels must be CxHxW, got shape {self.pixels.shape}")
        if self.index < 0:
            raise ValueError("frame index must be nonnegative")

    @property
    def shape(self) -> tuple[int, int, int]:
        return tuple(self.pixels.shape)


@dataclass(frozen=True)
class LabelMap:
    """Dense per-pixel class ids, height x width."""

    classes: np.ndarray

    def __post_init__(self):
        if self.classes.ndim != 2:
            raise ValueError(f"label map must be HxW, got shape {self.classes.shape}")

    @property
    def shape(self) -> tuple[int, int]:
        return tuple(self.classes.shape)


@dataclass(frozen=True)
class ObjectSpec:
    """Motion parameters for a single rendered object.

    `center` and `velocity` are (row, col) in pixels; `half_size` is
    (half_height, half_width) for rectangles and (radius, radius) for circles.
    """

    kind: str
    class_id: int
    center: tuple[float, float]
    half_size: tuple[float, float]
    velocity: tuple[float, float]
    color: tuple[float, float, float]

    def __post_init__(self):
        if self.kind not in _SHAPE_KINDS:
            raise ValueError(f"unknown shape kind {self.kind!r}")
        if self.class_id < 1:
            raise ValueError("object class ids start at 1 (0 is background)")


@dataclass(frozen=True)
class MotionSpec:
    objects: tuple[ObjectSpec, ...]
    speed: float


@dataclass
class FrameSequence:
    """Ordered frames with one exact label map per frame."""

    frames: list[Frame]
    labels: list[LabelMap]
    seed: int
    motion_spec: MotionSpec
    num_classes: int

    def __post_init__(self):
        if len(self.frames) != len(self.labels):
            raise ValueError("frames and labels must have equal length")
        if self.num_classes < 2:
            raise ValueError("num_classes must be >= 2")

    def __len__(self) -> int:
        return len(self.frames)

    @property
    def frame_shape(self) -> tuple[int, int, int]:
        return self.frames[0].shape


def _bounce(x: float, lo: float, hi: float) -> float:
    """Reflect an unbounded coordinate into [lo, hi] (elastic wall bounce)."""
    if hi <= lo:
        return lo
    period = 2.0 * (hi - lo)
    y = (x - lo) % period
    return lo + min(y, period - y)


def object_center(obj: ObjectSpec, frame_index: int, height: int, width: int) -> tuple[float, float]:
    """Object center at `frame_index`: linear motion with wall bounces.

    Speed is preserved; the center reflects off a margin inside the canvas so
    objects stay in view indefinitely.
    """
    raw_r = obj.center[0] + obj.velocity[0] * frame_index
    raw_c = obj.center[1] + obj.velocity[1] * frame_index
    return (
        _bounce(raw_r, 0.1 * height, 0.9 * height),
        _bounce(raw_c, 0.1 * width, 0.9 * width),
    )


def _rasterize(obj: ObjectSpec, frame_index: int, height: int, width: int) -> np.ndarray:
    """Exact boolean coverage mask of `obj` at `frame_index` (no anti-aliasing)."""
    cr, cc = object_center(obj, frame_index, height, width)
    rows = np.arange(height, dtype=np.float64)[:, None]
    cols = np.arange(width, dtype=np.float64)[None, :]
    if obj.kind == "rectangle":
        hh, hw = obj.half_size
        return (np.abs(rows - cr) <= hh) & (np.abs(cols - cc) <= hw)
    r = obj.half_size[0]
    return (rows - cr) ** 2 + (cols - cc) ** 2 <= r * r


def _render(
    objects: Sequence[ObjectSpec],
    frame_index: int,
    background: np.ndarray,
    height: int,
    width: int,
) -> tuple[np.ndarray, np.ndarray]:
    """Render pixels (CxHxW float32 on the 8-bit grid) and labels for one frame."""
    image = background.copy()
    labels = np.zeros((height, width), dtype=np.int64)
    for obj in objects:  # later objects occlude earlier ones
        mask = _rasterize(obj, frame_index, height, width)
        labels[mask] = obj.class_id
        for c in range(image.shape[0]):
            image[c][mask] = obj.color[c % 3]
    quantized = np.rint(np.clip(image, 0.0, 1.0) * 255.0).astype(np.uint8)
    return quantized.astype(np.float32) / np.float32(255.0), labels


def _make_background(rng: np.random.Generator, channels: int, height: int, width: int) -> np.ndarray:
    base = rng.uniform(0.05, 0.35, size=channels)
    amp = rng.uniform(0.05, 0.25, size=channels)
    rows = np.arange(height, dtype=np.float64)[:, None] / max(height - 1, 1)
    cols = np.arange(width, dtype=np.float64)[None, :] / max(width - 1, 1)
    ramp = 0.5 * (rows + cols)
    return np.stack([base[c] + amp[c] * ramp for c in range(channels)], axis=0)


def _make_objects(
    rng: np.random.Generator,
    num_objects: int,
    speed: float,
    num_classes: int,
    height: int,
    width: int,
) -> tuple[ObjectSpec, ...]:
    objects = []
    for i in range(num_objects):
        kind = _SHAPE_KINDS[int(rng.integers(len(_SHAPE_KINDS)))]
        class_id = 1 + i % (num_classes - 1)
        min_dim = min(height, width)
        half = rng.uniform(0.12 * min_dim, 0.22 * min_dim)
        half_size = (half, half) if kind == "circle" else (half, rng.uniform(0.6, 1.4) * half)
        center = (
            rng.uniform(0.25 * height, 0.75 * height),
            rng.uniform(0.25 * width, 0.75 * width),
        )
        angle = rng.uniform(0.0, 2.0 * np.pi)
        velocity = (speed * np.sin(angle), speed * np.cos(angle))
        color = tuple(
            np.clip(_CLASS_COLORS[class_id % len(_CLASS_COLORS)] + rng.uniform(-0.08, 0.08, 3), 0.0, 1.0)
        )
        objects.append(
            ObjectSpec(
                kind=kind,
                class_id=class_id,
                center=center,
                half_size=tuple(float(h) for h in half_size),
                velocity=tuple(float(v) for v in velocity),
                color=tuple(float(c) for c in color),
            )
        )
    return tuple(objects)


def generate_sequence(
    seed: int,
    num_frames: int,
    num_objects: int,
    speed: float,
    *,
    height: int = 64,
    width: int = 64,
    num_classes: int = 4,
    channels: int = 3,
    motion_spec: MotionSpec | None = None,
) -> FrameSequence:
    """Generate a deterministic sequence of moving shapes with exact labels.

    The same arguments always produce bit-identical output. Objects translate
    by `speed` pixels per frame along per-object directions drawn from the
    seed; background is static and class 0. An explicit `motion_spec`
    overrides the drawn objects (used by the loader for exact round-trips).
    """
    if num_frames < 2:
        raise ValueError("num_frames must be >= 2")
    if num_objects < 0:
        raise ValueError("num_objects must be >= 0")
    if speed < 0:
        raise ValueError("speed must be >= 0")
    if height <= 0 or width <= 0 or channels <= 0:
        raise ValueError("frame dimensions must be positive")
    if num_classes < 2:
        raise ValueError("num_classes must be >= 2")

    rng = np.random.default_rng(seed)
    background = _make_background(rng, channels, height, width)
    if motion_spec is None:
        motion_spec = MotionSpec(
            objects=_make_objects(rng, num_objects, speed, num_classes, height, width),
            speed=float(speed),
        )

    frames: list[Frame] = []
    labels: list[LabelMap] = []
    for t in range(num_frames):
        pixels, label = _render(motion_spec.objects, t, background, height, width)
        frames.append(Frame(pixels=pixels, index=t))
        labels.append(LabelMap(classes=label))
    return FrameSequence(
        frames=frames, labels=labels, seed=seed, motion_spec=motion_spec, num_classes=num_classes
    )


def oracle_distortion_map(
    labels_prev: LabelMap | np.ndarray,
    labels_cur: LabelMap | np.ndarray,
    *,
    downsample: int | None = None,
) -> np.ndarray:
    """Exact binary distortion map: 1 where the class label changed.

    With `downsample=s` the full-resolution map is reduced by majority vote
    over s x s bins, ties resolved to 1 (bias toward recomputation). Shapes
    must be divisible by `s`.
    """
    prev = labels_prev.classes if isinstance(labels_prev, LabelMap) else labels_prev
    cur = labels_cur.classes if isinstance(labels_cur, LabelMap) else labels_cur
    if prev.shape != cur.shape:
        raise ValueError(f"label shapes differ: {prev.shape} vs {cur.shape}")
    diff = (prev != cur).astype(np.uint8)
    if downsample is None or downsample == 1:
        return diff
    s = int(downsample)
    h, w = diff.shape
    if s <= 0 or h % s or w % s:
        raise ValueError(f"shape {diff.shape} not divisible by downsample factor {s}")
    bins = diff.reshape(h // s, s, w // s, s).sum(axis=(1, 3), dtype=np.int64)
    return (2 * bins >= s * s).astype(np.uint8)


def save_sequence(seq: FrameSequence, out_dir: str | Path) -> Path:
    """Persist a sequence as lossless PNG frames + label array + JSON manifest."""
    out = Path(out_dir)
    (out / FRAMES_DIR).mkdir(parents=True, exist_ok=True)
    for frame in seq.frames:
        arr = np.rint(frame.pixels * 255.0).astype(np.uint8)  # pixels live on the 8-bit grid
        img = Image.fromarray(np.transpose(arr, (1, 2, 0)) if arr.shape[0] == 3 else arr[0])
        img.save(out / FRAMES_DIR / f"frame_{frame.index:05d}.png")
    np.save(out / LABELS_NAME, np.stack([lm.classes for lm in seq.labels]).astype(np.int32))
    c, h, w = seq.frame_shape
    manifest = {
        "format_version": DATASET_FORMAT_VERSION,
        "seed": seq.seed,
        "num_frames": len(seq),
        "height": h,
        "width": w,
        "channels": c,
        "num_classes": seq.num_classes,
        "speed": seq.motion_spec.speed,
        "objects": [
            {
                "kind": o.kind,
                "class_id": o.class_id,
                "center": list(o.center),
                "half_size": list(o.half_size),
                "velocity": list(o.velocity),
                "color": list(o.color),
            }
            for o in seq.motion_spec.objects
        ],
    }
    (out / MANIFEST_NAME).write_text(json.dumps(manifest, indent=2))
    return out


def load_sequence(dataset_dir: str | Path) -> FrameSequence:
    """Load a sequence saved by `save_sequence`, bit-exact."""
    root = Path(dataset_dir)
    manifest = json.loads((root / MANIFEST_NAME).read_text())
    if manifest.get("format_version") != DATASET_FORMAT_VERSION:
        raise ValueError(f"unsupported dataset format_version {manifest.get('format_version')}")
    labels_arr = np.load(root / LABELS_NAME)
    frames = []
    for t in range(manifest["num_frames"]):
        img = Image.open(root / FRAMES_DIR / f"frame_{t:05d}.png")
        arr = np.asarray(img, dtype=np.uint8)
        if arr.ndim == 2:
            arr = arr[None, :, :]
        else:
            arr = np.transpose(arr, (2, 0, 1))
        frames.append(Frame(pixels=arr.astype(np.float32) / np.float32(255.0), index=t))
    labels = [LabelMap(classes=labels_arr[t].astype(np.int64)) for t in range(manifest["num_frames"])]
    objects = tuple(
        ObjectSpec(
            kind=o["kind"],
            class_id=o["class_id"],
            center=tuple(o["center"]),
            half_size=tuple(o["half_size"]),
            velocity=tuple(o["velocity"]),
            color=tuple(o["color"]),
        )
        for o in manifest["objects"]
    )
    return FrameSequence(
        frames=frames,
        labels=labels,
        seed=manifest["seed"],
        motion_spec=MotionSpec(objects=objects, speed=manifest["speed"]),
        num_classes=manifest["num_classes"],
    )
