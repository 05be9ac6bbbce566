"""Template/search crop pairs with anchor supervision."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from ..data import SequenceDataset
from ..errors import ConfigurationError
from .anchors import AnchorGrid, label_anchors
from .crops import crop_and_resize, template_side
from .model import ModelConfig


@dataclass
class TrainingPair:
    template: np.ndarray  # (Z, Z, 3) float32 pixels
    search: np.ndarray  # (X, X, 3) float32 pixels
    cls_label: Optional[np.ndarray]  # (k, s, s) int8: 1 pos, 0 neg, -1 ignore
    reg_target: Optional[np.ndarray]  # (k, s, s, 4)
    box_in_search: np.ndarray  # cxcywh in search-crop pixels (label or pseudo-label)
    template_centre: tuple[float, float]  # frame coordinates the template was centred on
    source: str = "label"  # "label" or "pseudo"

    @property
    def has_labels(self) -> bool:
        return self.cls_label is not None


def crop_pair(template_frame: np.ndarray, template_box, search_frame: np.ndarray, search_box,
              config: ModelConfig = ModelConfig(), shift=(0.0, 0.0)):
    """Crop a template around ``template_box`` and a search region around ``search_box`` + ``shift``.

    ``shift`` is in search-crop pixels. Returns (template, search, box cxcywh in search-crop pixels).
    """
    tx, ty, tw, th = [float(v) for v in template_box]
    sz = template_side(tw, th)
    template = crop_and_resize(template_frame, tx + tw / 2, ty + th / 2, sz, config.template_size)

    sx, sy, sw, sh = [float(v) for v in search_box]
    s_sz = template_side(sw, sh)
    scale = config.template_size / s_sz
    side_x = s_sz * config.search_size / config.template_size
    ccx = sx + sw / 2 - shift[0] / scale
    ccy = sy + sh / 2 - shift[1] / scale
    search = crop_and_resize(search_frame, ccx, ccy, side_x, config.search_size)
    half = config.search_size / 2
    box = np.array([half + (sx + sw / 2 - ccx) * scale, half + (sy + sh / 2 - ccy) * scale,
                    sw * scale, sh * scale])
    return template, search, box, (tx + tw / 2, ty + th / 2)


def make_training_pair(dataset: SequenceDataset, template_index: int, search_index: int,
                       config: ModelConfig = ModelConfig(), rng: np.random.Generator | None = None,
                       max_shift: float = 16.0, boxes=None, pos_thr: float = 0.6,
                       neg_thr: float = 0.3) -> TrainingPair:
    """Build one pair from ground truth, or from ``boxes`` (pseudo-labels) when given.

    Pseudo-labelled pairs only fix crop centres; they carry no cls/reg supervision.
    """
    n = len(dataset)
    for i in (template_index, search_index):
        if not 0 <= i < n:
            raise ConfigurationError(f"{dataset.name}: frame index {i} outside [0, {n})")
    pseudo = boxes is not None
    src = np.asarray(boxes if pseudo else dataset.boxes, dtype=np.float64)
    shift = (0.0, 0.0) if rng is None or max_shift <= 0 else tuple(rng.uniform(-max_shift, max_shift, size=2))
    template, search, box, centre = crop_pair(dataset.frames[template_index], src[template_index],
                                              dataset.frames[search_index], src[search_index], config, shift)
    if pseudo:
        return TrainingPair(template, search, None, None, box, centre, "pseudo")
    labels, targets = label_anchors(config.anchor_grid(), box, pos_thr, neg_thr)
    return TrainingPair(template, search, labels, targets, box, centre, "label")


def sample_pair(dataset: SequenceDataset, rng: np.random.Generator, config: ModelConfig = ModelConfig(),
                max_gap: int = 20, max_shift: float = 16.0, boxes=None) -> TrainingPair:
    n = len(dataset)
    t = int(rng.integers(0, n))
    lo, hi = max(0, t - max_gap), min(n - 1, t + max_gap)
    s = int(rng.integers(lo, hi + 1))
    return make_training_pair(dataset, t, s, config, rng, max_shift, boxes)


def label_coverage(grid: AnchorGrid, boxes_cxcywh, pos_thr: float = 0.6, neg_thr: float = 0.3) -> dict:
    """Label statistics over a set of search-crop boxes (used to sanity-check the thresholds)."""
    counts = np.zeros(3)
    without_positive = 0
    for b in boxes_cxcywh:
        labels, _ = label_anchors(grid, b, pos_thr, neg_thr)
        counts += [(labels == 1).sum(), (labels == 0).sum(), (labels == -1).sum()]
        without_positive += not (labels == 1).any()
    total = counts.sum()
    return {"positive": counts[0] / total, "negative": counts[1] / total, "ignored": counts[2] / total,
            "pairs_without_positive": int(without_positive)}
