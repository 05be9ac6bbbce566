"""Tracking loss: balanced two-way cross-entropy on anchors plus smooth-L1 on positive offsets."""

from __future__ import annotations

import numpy as np

from ..autodiff import Tensor, ops
from ..errors import DimensionError
from .anchors import AnchorGrid, cxcywh_to_xywh, decode
from .model import fg_probability, reg_deltas

REG_WEIGHT = 1.0
# anchor deltas are mostly below 0.3; a beta of 1 would leave them in the weak quadratic zone
REG_BETA = 1.0 / 9.0


def tracking_loss(cls: Tensor, reg: Tensor, cls_label: np.ndarray, reg_target: np.ndarray,
                  reg_weight: float = REG_WEIGHT, reg_beta: float = REG_BETA) -> tuple[Tensor, Tensor, Tensor]:
    """Return (L_t, L_cls, L_reg).

    ``cls_label`` is (N, k, s, s) with 1/0/-1; positives and negatives each
    carry half of the classification weight. Regression is averaged over
    positive anchors.
    """
    n, c2, s, _ = cls.shape
    k = c2 // 2
    if cls_label.shape != (n, k, s, s) or reg_target.shape != (n, k, s, s, 4):
        raise DimensionError(f"labels {cls_label.shape}/{reg_target.shape} do not match maps {cls.shape}")
    dt = cls.data.dtype
    pos = cls_label == 1
    neg = cls_label == 0
    n_pos, n_neg = int(pos.sum()), int(neg.sum())
    w = np.zeros((n, 2, k, s, s), dtype=dt)
    if n_pos:
        w[:, 1] = pos * (0.5 / n_pos)
    if n_neg:
        w[:, 0] = neg * (0.5 / n_neg)
    if n_pos == 0 or n_neg == 0:
        w *= 2.0
    logp = ops.log_softmax(ops.reshape(cls, (n, 2, k, s, s)), axis=1)
    l_cls = -ops.sum(logp * w)

    r = ops.reshape(reg, (n, 4, k, s, s))
    tgt = np.ascontiguousarray(reg_target.transpose(0, 4, 1, 2, 3)).astype(dt)
    rw = np.broadcast_to((pos / max(n_pos, 1)).astype(dt)[:, None], r.shape)
    l_reg = ops.sum(ops.smooth_l1(r, tgt, beta=reg_beta, reduction="none") * rw)
    return l_cls + l_reg * reg_weight, l_cls, l_reg


def decode_boxes(cls: np.ndarray, reg: np.ndarray, grid: AnchorGrid) -> tuple[np.ndarray, np.ndarray]:
    """Decode one sample's maps into (boxes xywh in search-crop pixels, scores), one row per anchor.

    Rows follow ``grid.flat()`` order. Scores are the foreground softmax.
    """
    cls = np.asarray(cls)
    reg = np.asarray(reg)
    if cls.ndim == 3:
        cls, reg = cls[None], reg[None]
    if cls.shape[0] != 1:
        raise DimensionError("decode_boxes handles one sample at a time")
    scores = fg_probability(cls, grid.k)[0].reshape(-1)
    deltas = reg_deltas(reg, grid.k)[0].reshape(-1, 4)
    boxes = decode(deltas, grid.flat())
    return cxcywh_to_xywh(boxes), scores
