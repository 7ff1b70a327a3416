"""Probability maps, frame records, annotations and their on-disk formats.

A probability stack holds the per-pixel outputs of a detector with several
prediction branches. Arrays are stored as ``(K, T, H, W)``: branch, MC
sample, image row, image column.

The ``.alpm`` container is little-endian::

    magic   b"ALPM"
    version u32
    W, H, K, T  u32 each
    payload K*T float32 matrices, branch-major then sample-minor,
            each row-major with H rows of W values
"""

from __future__ import annotations

import json
import math
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

MAGIC = b"ALPM"
VERSION = 1
_HEADER = struct.Struct("<4sIIIII")
HEADER_SIZE = _HEADER.size

MANIFEST_VERSION = 1


class FormatError(ValueError):
    """Raised for malformed containers, manifests or out-of-range data."""


@dataclass
class ProbabilityStack:
    frame_id: str
    data: np.ndarray  # (K, T, H, W) float32

    def __post_init__(self):
        data = np.asarray(self.data)
        if data.ndim == 3:
            data = data[:, None]
        if data.ndim != 4:
            raise FormatError(f"stack data must have 3 or 4 dimensions, got {data.ndim}")
        k, t, h, w = data.shape
        if min(k, t, h, w) < 1:
            raise FormatError(f"empty stack dimensions {data.shape}")
        self.data = np.ascontiguousarray(data, dtype=np.float32)
        check_probabilities(self.data)

    @property
    def branches(self) -> int:
        return self.data.shape[0]

    @property
    def mc_samples(self) -> int:
        return self.data.shape[1]

    @property
    def height(self) -> int:
        return self.data.shape[2]

    @property
    def width(self) -> int:
        return self.data.shape[3]

    def __eq__(self, other):
        if not isinstance(other, ProbabilityStack):
            return NotImplemented
        return (
            self.frame_id == other.frame_id
            and self.data.shape == other.data.shape
            and self.data.tobytes() == other.data.tobytes()
        )


def check_probabilities(data: np.ndarray) -> None:
    """Reject any value outside [0, 1] (NaN included), naming the first offender."""
    bad = ~((data >= 0.0) & (data <= 1.0))
    if bad.any():
        k, t, i, j = np.unravel_index(int(np.argmax(bad)), data.shape)
        where = f"branch {k}, pixel ({i},{j})"
        if data.shape[1] > 1:
            where = f"branch {k}, sample {t}, pixel ({i},{j})"
        raise FormatError(f"probability {float(data[k, t, i, j])!r} outside [0,1] at {where}")


def encode_stack(stack: ProbabilityStack) -> bytes:
    k, t, h, w = stack.data.shape
    header = _HEADER.pack(MAGIC, VERSION, w, h, k, t)
    return header + stack.data.astype("<f4", copy=False).tobytes(order="C")


def decode_stack(buf: bytes, frame_id: str = "") -> ProbabilityStack:
    if len(buf) < HEADER_SIZE:
        raise FormatError(f"truncated header: {len(buf)} bytes, need {HEADER_SIZE}")
    magic, version, w, h, k, t = _HEADER.unpack_from(buf)
    if magic != MAGIC:
        raise FormatError(f"bad magic {magic!r}, expected {MAGIC!r}")
    if version != VERSION:
        raise FormatError(f"unsupported container version {version}")
    if min(w, h, k, t) < 1:
        raise FormatError(f"invalid dimensions W={w} H={h} K={k} T={t}")
    expected = k * t * h * w * 4
    got = len(buf) - HEADER_SIZE
    if got != expected:
        raise FormatError(
            f"payload is {got} bytes but W={w} H={h} K={k} T={t} needs {expected}; "
            "matrix dimensions do not match the header"
        )
    data = np.frombuffer(buf, dtype="<f4", offset=HEADER_SIZE).reshape(k, t, h, w)
    return ProbabilityStack(frame_id, data.astype(np.float32))


def write_probability_stack(stack: ProbabilityStack, path: str | os.PathLike) -> None:
    with open(path, "wb") as f:
        f.write(encode_stack(stack))


def read_probability_stack(path: str | os.PathLike, frame_id: str | None = None) -> ProbabilityStack:
    """Read an ``.alpm`` file. The frame id defaults to the file stem."""
    path = Path(path)
    with open(path, "rb") as f:
        head = f.read(4)
        if head != MAGIC:
            raise FormatError(f"{path}: not an ALPM container (magic {head!r})")
        buf = head + f.read()
    try:
        return decode_stack(buf, path.stem if frame_id is None else frame_id)
    except FormatError as e:
        raise FormatError(f"{path}: {e}") from None


@dataclass(frozen=True)
class BoundingBox:
    x: float
    y: float
    w: float
    h: float
    label: str = "person"

    def __post_init__(self):
        if not (self.w > 0 and self.h > 0):
            raise FormatError(f"box needs positive size, got w={self.w} h={self.h}")

    def within(self, width: int, height: int) -> bool:
        return self.x >= 0 and self.y >= 0 and self.x + self.w <= width and self.y + self.h <= height


@dataclass(frozen=True)
class BranchSpec:
    index: int
    box_height: float
    box_width: float


# Default-box sizes (height x width) of the five prediction heads, coarse to fine.
DEFAULT_BRANCHES = (
    BranchSpec(1, 270, 160),
    BranchSpec(2, 225, 130),
    BranchSpec(3, 145, 80),
    BranchSpec(4, 80, 50),
    BranchSpec(5, 55, 31),
)


def validate_branch_specs(specs: Sequence[BranchSpec]) -> None:
    idx = sorted(s.index for s in specs)
    if idx != list(range(1, len(specs) + 1)):
        raise FormatError(f"branch indices must be distinct and run 1..{len(specs)}, got {idx}")


def filter_annotations(
    boxes: Iterable[BoundingBox],
    min_height: float = 50,
    ratio_lo: float = 0.2,
    ratio_hi: float = 0.65,
) -> list[BoundingBox]:
    """Keep boxes at least ``min_height`` tall with width/height inside the ratio bounds."""
    if not ratio_lo < ratio_hi:
        raise ValueError(f"ratio_lo ({ratio_lo}) must be below ratio_hi ({ratio_hi})")
    return [b for b in boxes if b.h >= min_height and ratio_lo <= b.w / b.h <= ratio_hi]


def map_box_to_branch(box: BoundingBox, specs: Sequence[BranchSpec] = DEFAULT_BRANCHES) -> int:
    """Index of the branch whose default box is nearest in (height, width).

    Ties go to the smaller branch index.
    """
    if not specs:
        raise ValueError("no branch specs given")
    best = min(specs, key=lambda s: (math.hypot(s.box_height - box.h, s.box_width - box.w), s.index))
    return best.index


@dataclass
class FrameRecord:
    frame_id: str
    video_id: str | None = None
    temporal_index: int | None = None
    stack_path: str | None = None
    annotations: list[BoundingBox] | None = None
    score: float | None = None
    smoothed_score: float | None = None

    def __post_init__(self):
        if (self.video_id is None) != (self.temporal_index is None):
            raise FormatError(
                f"frame {self.frame_id!r}: video_id and temporal_index must be set together"
            )

    @property
    def is_video(self) -> bool:
        return self.video_id is not None


@dataclass
class Manifest:
    """Dataset listing. ``stack_path`` entries are resolved against ``root``."""

    frames: list[FrameRecord]
    branches: list[BranchSpec] = field(default_factory=list)
    root: Path = field(default_factory=Path)

    def __post_init__(self):
        seen: set[str] = set()
        stamps: set[tuple[str, int]] = set()
        for fr in self.frames:
            if fr.frame_id in seen:
                raise FormatError(f"duplicate frame_id {fr.frame_id!r}")
            seen.add(fr.frame_id)
            if fr.is_video:
                key = (fr.video_id, fr.temporal_index)
                if key in stamps:
                    raise FormatError(
                        f"video {fr.video_id!r} has temporal_index {fr.temporal_index} twice"
                    )
                stamps.add(key)
        if self.branches:
            validate_branch_specs(self.branches)

    def by_id(self) -> dict[str, FrameRecord]:
        return {fr.frame_id: fr for fr in self.frames}

    def stack_file(self, frame: FrameRecord) -> Path:
        if frame.stack_path is None:
            raise FormatError(f"frame {frame.frame_id!r} has no stack path")
        return self.root / frame.stack_path

    def load_stack(self, frame: FrameRecord) -> ProbabilityStack:
        return read_probability_stack(self.stack_file(frame), frame.frame_id)

    @property
    def has_video(self) -> bool:
        return any(fr.is_video for fr in self.frames)


def _box_to_json(b: BoundingBox) -> dict:
    return {"x": b.x, "y": b.y, "w": b.w, "h": b.h, "label": b.label}


def manifest_to_dict(manifest: Manifest) -> dict:
    frames = []
    for fr in manifest.frames:
        d: dict = {"frame_id": fr.frame_id}
        if fr.is_video:
            d["video_id"] = fr.video_id
            d["temporal_index"] = fr.temporal_index
        if fr.stack_path is not None:
            d["stack"] = fr.stack_path
        if fr.annotations is not None:
            d["annotations"] = [_box_to_json(b) for b in fr.annotations]
        frames.append(d)
    out: dict = {"version": MANIFEST_VERSION, "frames": frames}
    if manifest.branches:
        out["branches"] = [
            {"index": s.index, "box_height": s.box_height, "box_width": s.box_width}
            for s in manifest.branches
        ]
    return out


def manifest_from_dict(doc: dict, root: str | os.PathLike = ".") -> Manifest:
    if not isinstance(doc, dict) or "frames" not in doc:
        raise FormatError("manifest must be an object with a 'frames' list")
    if doc.get("version", MANIFEST_VERSION) != MANIFEST_VERSION:
        raise FormatError(f"unsupported manifest version {doc.get('version')}")
    frames = []
    for i, d in enumerate(doc["frames"]):
        try:
            boxes = d.get("annotations")
            frames.append(
                FrameRecord(
                    frame_id=str(d["frame_id"]),
                    video_id=d.get("video_id"),
                    temporal_index=d.get("temporal_index"),
                    stack_path=d.get("stack"),
                    annotations=None
                    if boxes is None
                    else [
                        BoundingBox(b["x"], b["y"], b["w"], b["h"], b.get("label", "person"))
                        for b in boxes
                    ],
                )
            )
        except (KeyError, TypeError) as e:
            raise FormatError(f"manifest frame #{i}: missing or invalid field {e}") from None
    branches = [
        BranchSpec(int(s["index"]), s["box_height"], s["box_width"]) for s in doc.get("branches", [])
    ]
    return Manifest(frames, branches, Path(root))


def read_manifest(path: str | os.PathLike) -> Manifest:
    path = Path(path)
    try:
        doc = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as e:
        raise FormatError(f"{path}:{e.lineno}: invalid JSON: {e.msg}") from None
    return manifest_from_dict(doc, path.parent)


def write_manifest(manifest: Manifest, path: str | os.PathLike) -> None:
    Path(path).write_text(json.dumps(manifest_to_dict(manifest), indent=1) + "\n", encoding="utf-8")
