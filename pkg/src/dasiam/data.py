"""Core value types shared across modules: boxes and in-memory sequence datasets."""

from __future__ import annotations

import copy
from dataclasses import dataclass, field
from typing import Any, Optional

import numpy as np

from .errors import IntegrityError


@dataclass(frozen=True)
class BBox:
    """Axis-aligned box in pixels, top-left origin."""

    x: float
    y: float
    w: float
    h: float

    def __post_init__(self):
        if not (self.w > 0 and self.h > 0):
            raise ValueError(f"degenerate box {self}")

    @property
    def cx(self) -> float:
        return self.x + self.w / 2

    @property
    def cy(self) -> float:
        return self.y + self.h / 2

    @classmethod
    def from_center(cls, cx: float, cy: float, w: float, h: float) -> "BBox":
        return cls(cx - w / 2, cy - h / 2, w, h)

    @classmethod
    def from_array(cls, arr) -> "BBox":
        x, y, w, h = (float(v) for v in arr)
        return cls(x, y, w, h)

    def as_tuple(self) -> tuple[float, float, float, float]:
        return (self.x, self.y, self.w, self.h)


@dataclass
class SequenceDataset:
    """One labelled video: frames (T,H,W,3 uint8), boxes (T,4 xywh), optional depth (T,H,W)."""

    name: str
    frames: np.ndarray
    boxes: np.ndarray
    depth: Optional[np.ndarray] = None
    meta: dict[str, Any] = field(default_factory=dict)

    def __post_init__(self):
        self.frames = np.asarray(self.frames, dtype=np.uint8)
        self.boxes = np.asarray(self.boxes, dtype=np.float64).reshape(-1, 4)
        if self.depth is not None:
            self.depth = np.asarray(self.depth, dtype=np.float32)
        self.validate()

    def validate(self) -> None:
        if self.frames.ndim != 4 or self.frames.shape[-1] != 3:
            raise IntegrityError(f"{self.name}: frames must be (T,H,W,3), got {self.frames.shape}")
        if len(self.frames) != len(self.boxes):
            raise IntegrityError(
                f"{self.name}: {len(self.frames)} frames but {len(self.boxes)} annotations"
            )
        if self.depth is not None and self.depth.shape != self.frames.shape[:3]:
            raise IntegrityError(f"{self.name}: depth shape {self.depth.shape} != frame shape {self.frames.shape[:3]}")

    def __len__(self) -> int:
        return len(self.frames)

    @property
    def frame_size(self) -> tuple[int, int]:
        return self.frames.shape[1], self.frames.shape[2]

    def box(self, i: int) -> BBox:
        return BBox.from_array(self.boxes[i])

    def replace(self, **changes) -> "SequenceDataset":
        fields = dict(name=self.name, frames=self.frames, boxes=self.boxes.copy(), depth=self.depth,
                      meta=copy.deepcopy(self.meta))
        fields.update(changes)
        return SequenceDataset(**fields)
