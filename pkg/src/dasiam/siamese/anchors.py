"""Anchor grid, box encoding/decoding and anchor labelling."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class AnchorGrid:
    """``k`` anchors per response cell, laid out around the search-crop centre.

    Anchor arrays have shape (k, size, size, 4) holding (cx, cy, w, h) in
    search-crop pixels. Channel ``a`` of the cls map's foreground half and
    channels ``[a, k+a, 2k+a, 3k+a]`` of the reg map belong to anchor ``a``.
    """

    size: int = 9
    stride: int = 8
    search_size: int = 128
    base: float = 32.0
    ratios: tuple[float, ...] = (1.0,)

    @property
    def k(self) -> int:
        return len(self.ratios)

    def anchors(self) -> np.ndarray:
        offsets = (np.arange(self.size) - self.size // 2) * self.stride + self.search_size / 2
        out = np.zeros((self.k, self.size, self.size, 4))
        for a, ratio in enumerate(self.ratios):
            # ratio = h / w, area preserved
            w = self.base / np.sqrt(ratio)
            h = self.base * np.sqrt(ratio)
            out[a, :, :, 0] = offsets[None, :]
            out[a, :, :, 1] = offsets[:, None]
            out[a, :, :, 2] = w
            out[a, :, :, 3] = h
        return out

    def flat(self) -> np.ndarray:
        """Anchors as (k*size*size, 4), ordered like ``cls[:, k:].reshape(-1)``."""
        return self.anchors().reshape(-1, 4)


def xywh_to_cxcywh(box) -> np.ndarray:
    b = np.asarray(box, dtype=np.float64)
    return np.stack([b[..., 0] + b[..., 2] / 2, b[..., 1] + b[..., 3] / 2, b[..., 2], b[..., 3]], axis=-1)


def cxcywh_to_xywh(box) -> np.ndarray:
    b = np.asarray(box, dtype=np.float64)
    return np.stack([b[..., 0] - b[..., 2] / 2, b[..., 1] - b[..., 3] / 2, b[..., 2], b[..., 3]], axis=-1)


# Faster R-CNN's cap (1000/16 times the anchor side), applied both ways
SIZE_DELTA_CLIP = math.log(1000.0 / 16.0)


def encode(boxes, anchors) -> np.ndarray:
    """Regression targets (dx, dy, dw, dh) of cxcywh ``boxes`` relative to ``anchors``."""
    g = np.asarray(boxes, dtype=np.float64)
    a = np.asarray(anchors, dtype=np.float64)
    return np.stack([
        (g[..., 0] - a[..., 0]) / a[..., 2],
        (g[..., 1] - a[..., 1]) / a[..., 3],
        np.log(g[..., 2] / a[..., 2]),
        np.log(g[..., 3] / a[..., 3]),
    ], axis=-1)


def decode(deltas, anchors) -> np.ndarray:
    """Inverse of :func:`encode`: offsets scale with anchor size, sizes are exponential.

    Log-size deltas are clipped to ``±SIZE_DELTA_CLIP`` so a wild regression cannot overflow or reach zero size.
    """
    d = np.asarray(deltas, dtype=np.float64)
    a = np.asarray(anchors, dtype=np.float64)
    dw = np.clip(d[..., 2], -SIZE_DELTA_CLIP, SIZE_DELTA_CLIP)
    dh = np.clip(d[..., 3], -SIZE_DELTA_CLIP, SIZE_DELTA_CLIP)
    return np.stack([
        a[..., 0] + d[..., 0] * a[..., 2],
        a[..., 1] + d[..., 1] * a[..., 3],
        a[..., 2] * np.exp(dw),
        a[..., 3] * np.exp(dh),
    ], axis=-1)


def iou_cxcywh(anchors, box) -> np.ndarray:
    """IoU of every anchor (…,4) with a single cxcywh box."""
    a = np.asarray(anchors, dtype=np.float64)
    ax1, ay1 = a[..., 0] - a[..., 2] / 2, a[..., 1] - a[..., 3] / 2
    ax2, ay2 = a[..., 0] + a[..., 2] / 2, a[..., 1] + a[..., 3] / 2
    bx1, by1 = box[0] - box[2] / 2, box[1] - box[3] / 2
    bx2, by2 = box[0] + box[2] / 2, box[1] + box[3] / 2
    iw = np.clip(np.minimum(ax2, bx2) - np.maximum(ax1, bx1), 0, None)
    ih = np.clip(np.minimum(ay2, by2) - np.maximum(ay1, by1), 0, None)
    inter = iw * ih
    return inter / (a[..., 2] * a[..., 3] + box[2] * box[3] - inter)


def label_anchors(grid: AnchorGrid, box_cxcywh, pos_thr: float = 0.6, neg_thr: float = 0.3):
    """Return (cls_label, reg_target) arrays shaped (k, size, size) and (k, size, size, 4).

    Labels: 1 positive, 0 negative, -1 ignored. If no anchor clears ``pos_thr``
    the best-overlapping anchor is promoted to positive, provided its IoU is
    above ``neg_thr``.
    """
    anchors = grid.anchors()
    ious = iou_cxcywh(anchors, box_cxcywh)
    labels = np.full(ious.shape, -1, dtype=np.int8)
    labels[ious <= neg_thr] = 0
    labels[ious >= pos_thr] = 1
    if not (labels == 1).any():
        best = np.unravel_index(np.argmax(ious), ious.shape)
        if ious[best] > neg_thr:
            labels[best] = 1
    targets = encode(np.broadcast_to(np.asarray(box_cxcywh, dtype=np.float64), anchors.shape), anchors)
    return labels, targets
