"""Square crop extraction with bilinear resampling and mean padding."""

from __future__ import annotations

import math

import numpy as np

CONTEXT_AMOUNT = 0.5


def template_side(w: float, h: float, context: float = CONTEXT_AMOUNT) -> float:
    """Side of the square exemplar region: sqrt((w + p)(h + p)) with p = context * (w + h)."""
    pad = context * (w + h)
    return math.sqrt((w + pad) * (h + pad))


def crop_and_resize(image: np.ndarray, cx: float, cy: float, side: float, out_size: int,
                    fill: np.ndarray | None = None) -> np.ndarray:
    """Resample the ``side``-pixel square centred on (cx, cy) to ``out_size``² pixels.

    Samples falling outside the frame take ``fill`` (per-channel frame mean
    by default). Returns float32 HxWx3 in the input's intensity units.
    """
    h, w, _ = image.shape
    img = image.astype(np.float32)
    if fill is None:
        fill = img.reshape(-1, 3).mean(axis=0)
    step = side / out_size
    coords = (np.arange(out_size) + 0.5 - out_size / 2) * step
    xs = cx + coords - 0.5  # pixel centres sit at integer + 0.5
    ys = cy + coords - 0.5
    x0 = np.floor(xs).astype(np.int64)
    y0 = np.floor(ys).astype(np.int64)
    fx = (xs - x0).astype(np.float32)[None, :, None]
    fy = (ys - y0).astype(np.float32)[:, None, None]

    def grab(yi, xi):
        valid = ((yi >= 0) & (yi < h))[:, None] & ((xi >= 0) & (xi < w))[None, :]
        vals = img[np.clip(yi, 0, h - 1)][:, np.clip(xi, 0, w - 1)]
        return np.where(valid[..., None], vals, fill)

    out = (grab(y0, x0) * (1 - fy) * (1 - fx) + grab(y0, x0 + 1) * (1 - fy) * fx
           + grab(y0 + 1, x0) * fy * (1 - fx) + grab(y0 + 1, x0 + 1) * fy * fx)
    return out.astype(np.float32)


def to_input(crops: np.ndarray) -> np.ndarray:
    """(N,H,W,3) pixel crops -> normalised NCHW network input."""
    arr = np.asarray(crops, dtype=np.float32)
    if arr.ndim == 3:
        arr = arr[None]
    return np.ascontiguousarray(arr.transpose(0, 3, 1, 2) / 255.0 - 0.5)
