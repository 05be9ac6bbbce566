"""Frame-to-frame tracking with a fixed template."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from ..autodiff import Tensor
from ..data import BBox, SequenceDataset
from ..errors import InitializationError
from .anchors import cxcywh_to_xywh, decode
from .crops import crop_and_resize, template_side, to_input
from .model import SiameseRPN, fg_probability, reg_deltas


@dataclass(frozen=True)
class TrackerConfig:
    window_influence: float = 0.3
    penalty_k: float = 0.04
    lr: float = 0.3
    min_size: float = 4.0


@dataclass
class TrackState:
    template_features: list  # per-level numpy arrays, fixed after init
    centre: np.ndarray  # (cx, cy) frame pixels
    size: np.ndarray  # (w, h)
    score: float = 1.0


def _change(r):
    return np.maximum(r, 1.0 / r)


def _sz(w, h):
    pad = (w + h) * 0.5
    return np.sqrt((w + pad) * (h + pad))


class SiameseTracker:
    """Stateful single-target tracker around a :class:`SiameseRPN`."""

    def __init__(self, model: SiameseRPN, config: TrackerConfig = TrackerConfig()):
        self.model = model
        self.config = config
        mc = model.config
        grid = mc.anchor_grid()
        self.anchors = grid.flat()
        hann = np.hanning(mc.score_size)
        self.window = np.tile(np.outer(hann, hann).reshape(-1), grid.k)
        self.state: TrackState | None = None

    def init(self, frame: np.ndarray, box) -> None:
        x, y, w, h = [float(v) for v in box]
        if not (w > 0 and h > 0 and np.isfinite([x, y, w, h]).all()):
            raise InitializationError(f"degenerate initial box {(x, y, w, h)}")
        mc = self.model.config
        side = template_side(w, h)
        crop = crop_and_resize(frame, x + w / 2, y + h / 2, side, mc.template_size)
        zf = self.model.extract_features(Tensor(to_input(crop)))
        self.state = TrackState([f.data.copy() for f in zf], np.array([x + w / 2, y + h / 2]), np.array([w, h]))

    def update(self, frame: np.ndarray) -> tuple[np.ndarray, float]:
        """Locate the target in ``frame``; returns (box xywh, score)."""
        st = self.state
        if st is None:
            raise InitializationError("tracker used before init")
        mc, cfg = self.model.config, self.config
        w, h = st.size
        s_z = template_side(w, h)
        scale = mc.template_size / s_z
        side_x = s_z * mc.search_size / mc.template_size
        crop = crop_and_resize(frame, st.centre[0], st.centre[1], side_x, mc.search_size)
        xf = self.model.extract_features(Tensor(to_input(crop)))
        out = self.model.rpn_head([Tensor(z) for z in st.template_features], xf)
        k = mc.k
        score = fg_probability(out.cls.data.astype(np.float64), k)[0].reshape(-1)
        pred = decode(reg_deltas(out.reg.data.astype(np.float64), k)[0].reshape(-1, 4), self.anchors)

        s_c = _change(_sz(pred[:, 2], pred[:, 3]) / _sz(w * scale, h * scale))
        r_c = _change((w / h) / (pred[:, 2] / pred[:, 3]))
        penalty = np.exp(-(r_c * s_c - 1.0) * cfg.penalty_k)
        pscore = penalty * score * (1 - cfg.window_influence) + self.window * cfg.window_influence
        best = int(np.argmax(pscore))

        half = mc.search_size / 2
        dx, dy = (pred[best, 0] - half) / scale, (pred[best, 1] - half) / scale
        lr = penalty[best] * score[best] * cfg.lr
        new_w = w * (1 - lr) + pred[best, 2] / scale * lr
        new_h = h * (1 - lr) + pred[best, 3] / scale * lr
        fh, fw = frame.shape[:2]
        cx = float(np.clip(st.centre[0] + dx, 0, fw))
        cy = float(np.clip(st.centre[1] + dy, 0, fh))
        new_w = float(np.clip(new_w, cfg.min_size, fw))
        new_h = float(np.clip(new_h, cfg.min_size, fh))
        st.centre = np.array([cx, cy])
        st.size = np.array([new_w, new_h])
        st.score = float(score[best])
        return cxcywh_to_xywh(np.array([cx, cy, new_w, new_h])), st.score


def track_sequence(model: SiameseRPN, dataset: SequenceDataset,
                   config: TrackerConfig = TrackerConfig(), init_box=None) -> tuple[np.ndarray, np.ndarray]:
    """Run the tracker from frame 0's box; returns ((T, 4) xywh boxes, (T,) scores).

    Frame 0 reports the initial box with score 1.
    """
    box0 = dataset.boxes[0] if init_box is None else np.asarray(init_box, dtype=np.float64)
    tracker = SiameseTracker(model, config)
    tracker.init(dataset.frames[0], box0)
    boxes = np.zeros((len(dataset), 4))
    scores = np.zeros(len(dataset))
    boxes[0], scores[0] = box0, 1.0
    for t in range(1, len(dataset)):
        boxes[t], scores[t] = tracker.update(dataset.frames[t])
    return boxes, scores


def predictions_path(out_dir, name: str) -> Path:
    return Path(out_dir) / f"{name}_pred.txt"


def to_bboxes(boxes: np.ndarray) -> list[BBox]:
    return [BBox.from_array(b) for b in boxes]
