"""Procedurally generated tracking sequences with exact boxes and analytic depth.

Scenes are a static value-noise background with a single moving target
(rectangle or ellipse). Depth is analytic: the target sits at a fixed
distance and the background recedes linearly from top to bottom.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from typing import Callable, Optional

import numpy as np

from .data import SequenceDataset
from .errors import SpecError

_BINOMIAL5 = np.array([1.0, 4.0, 6.0, 4.0, 1.0]) / 16.0


@dataclass(frozen=True)
class SceneSpec:
    frame_size: tuple[int, int] = (192, 192)  # (height, width)
    length: int = 40
    shape: str = "rectangle"
    base_size: tuple[float, float] = (24.0, 24.0)  # (w, h)
    color: tuple[int, int, int] = (220, 60, 40)
    start: Optional[tuple[float, float]] = None  # centre (x, y); frame centre when None
    velocity: tuple[float, float] = (0.0, 0.0)
    amplitude: tuple[float, float] = (0.0, 0.0)
    period: float = 30.0
    phase: float = 0.0
    scale_amplitude: float = 0.0
    scale_period: float = 40.0
    texture_seed: int = 0
    background_contrast: float = 1.0
    target_depth: float = 8.0
    background_depth: tuple[float, float] = (20.0, 80.0)  # top row, bottom row
    noise_std: float = 2.0

    def __post_init__(self):
        if self.length < 2:
            raise SpecError(f"sequence length must be >= 2, got {self.length}")
        if self.shape not in ("rectangle", "ellipse"):
            raise SpecError(f"unknown target shape {self.shape!r}")
        if min(self.base_size) <= 0 or min(self.frame_size) <= 0:
            raise SpecError("sizes must be positive")
        if self.target_depth < 0 or min(self.background_depth) < 0:
            raise SpecError("depths must be non-negative")

    def to_dict(self) -> dict:
        return json.loads(json.dumps(asdict(self)))

    @classmethod
    def from_dict(cls, d: dict) -> "SceneSpec":
        kw = dict(d)
        for key in ("frame_size", "base_size", "color", "start", "velocity", "amplitude", "background_depth"):
            if kw.get(key) is not None:
                kw[key] = tuple(kw[key])
        return cls(**kw)


def trajectory(spec: SceneSpec) -> np.ndarray:
    """Exact (x, y, w, h) per frame; raises SpecError if the box leaves the frame."""
    h_img, w_img = spec.frame_size
    cx0, cy0 = spec.start if spec.start is not None else (w_img / 2, h_img / 2)
    boxes = np.zeros((spec.length, 4))
    for t in range(spec.length):
        wave = math.sin(2 * math.pi * t / spec.period + spec.phase)
        cx = cx0 + spec.velocity[0] * t + spec.amplitude[0] * wave
        cy = cy0 + spec.velocity[1] * t + spec.amplitude[1] * math.cos(2 * math.pi * t / spec.period + spec.phase)
        s = 1.0 + spec.scale_amplitude * math.sin(2 * math.pi * t / spec.scale_period)
        w, h = spec.base_size[0] * s, spec.base_size[1] * s
        x, y = cx - w / 2, cy - h / 2
        if x < 0 or y < 0 or x + w > w_img or y + h > h_img or w <= 0 or h <= 0:
            raise SpecError(f"target box ({x:.1f},{y:.1f},{w:.1f},{h:.1f}) leaves the frame at t={t}")
        boxes[t] = (x, y, w, h)
    return boxes


def _blur(img: np.ndarray, passes: int = 1) -> np.ndarray:
    """Separable binomial blur along the first two axes, reflect padding."""
    out = img.astype(np.float64)
    for _ in range(passes):
        for axis in (0, 1):
            pad = [(0, 0)] * out.ndim
            pad[axis] = (2, 2)
            padded = np.pad(out, pad, mode="reflect")
            n = out.shape[axis]
            acc = np.zeros_like(out)
            for k, wgt in enumerate(_BINOMIAL5):
                acc += wgt * np.take(padded, np.arange(k, k + n), axis=axis)
            out = acc
    return out


def render_background(frame_size: tuple[int, int], texture_seed: int, contrast: float = 1.0) -> np.ndarray:
    """Value-noise texture (float HxWx3 in [0,255]) from a coarse random lattice, blurred."""
    h, w = frame_size
    rng = np.random.default_rng(texture_seed)
    base = rng.uniform(60, 190, size=3)
    img = np.zeros((h, w, 3))
    for cell, weight in ((24, 1.0), (8, 0.5)):
        gh, gw = h // cell + 2, w // cell + 2
        lattice = rng.uniform(-1, 1, size=(gh, gw, 3))
        ys = np.arange(h) / cell
        xs = np.arange(w) / cell
        y0, x0 = ys.astype(int), xs.astype(int)
        fy, fx = (ys - y0)[:, None, None], (xs - x0)[None, :, None]
        v = (lattice[y0][:, x0] * (1 - fy) * (1 - fx) + lattice[y0 + 1][:, x0] * fy * (1 - fx)
             + lattice[y0][:, x0 + 1] * (1 - fy) * fx + lattice[y0 + 1][:, x0 + 1] * fy * fx)
        img += weight * v
    img = _blur(img, passes=2)
    return np.clip(base + contrast * 45.0 * img, 0, 255)


def target_mask(box, shape: str, frame_size: tuple[int, int]) -> np.ndarray:
    """Pixels whose centres fall inside the target outline."""
    h, w = frame_size
    x, y, bw, bh = box
    cy = (np.arange(h) + 0.5)[:, None]
    cx = (np.arange(w) + 0.5)[None, :]
    if shape == "rectangle":
        return (cx >= x) & (cx < x + bw) & (cy >= y) & (cy < y + bh)
    rx, ry = bw / 2, bh / 2
    return ((cx - (x + rx)) / rx) ** 2 + ((cy - (y + ry)) / ry) ** 2 <= 1.0


def generate_sequence(spec: SceneSpec, seed: int, name: str | None = None) -> SequenceDataset:
    boxes = trajectory(spec)
    h, w = spec.frame_size
    rng = np.random.default_rng(seed)
    background = render_background(spec.frame_size, spec.texture_seed, spec.background_contrast)
    color = np.asarray(spec.color, dtype=np.float64)
    near, far = spec.background_depth
    bg_depth = np.repeat(np.linspace(near, far, h, dtype=np.float64)[:, None], w, axis=1)
    frames = np.empty((spec.length, h, w, 3), dtype=np.uint8)
    depth = np.empty((spec.length, h, w), dtype=np.float32)
    for t, box in enumerate(boxes):
        mask = target_mask(box, spec.shape, spec.frame_size)
        # darker vertical core stripe gives the target internal structure
        core = mask & target_mask((box[0] + box[2] * 0.3, box[1], box[2] * 0.4, box[3]), "rectangle", spec.frame_size)
        img = background.copy()
        img[mask] = color
        img[core] = color * 0.55
        if spec.noise_std > 0:
            img = img + rng.normal(0.0, spec.noise_std, size=img.shape)
        frames[t] = np.clip(np.floor(img + 0.5), 0, 255).astype(np.uint8)
        d = bg_depth.copy()
        d[mask] = spec.target_depth
        depth[t] = d
    meta = {"seed": int(seed), "spec": spec.to_dict(), "domain": "clean", "depth_unit": "m"}
    return SequenceDataset(name or f"seq_{seed:010d}", frames, boxes, depth, meta)


SpecSampler = Callable[[np.random.Generator], SceneSpec]


@dataclass
class DefaultSpecSampler:
    """Random scene parameters that keep the target inside the frame by construction."""

    frame_size: tuple[int, int] = (192, 192)
    length: int = 40
    size_range: tuple[float, float] = (20.0, 32.0)
    aspect_range: tuple[float, float] = (0.8, 1.25)
    max_speed: float = 1.0
    max_amplitude: float = 24.0
    target_depth_range: tuple[float, float] = (8.0, 8.0)
    extra: dict = field(default_factory=dict)

    def __call__(self, rng: np.random.Generator) -> SceneSpec:
        h, w = self.frame_size
        size = rng.uniform(*self.size_range)
        aspect = rng.uniform(*self.aspect_range)
        bw, bh = size * math.sqrt(aspect), size / math.sqrt(aspect)
        scale_amp = rng.uniform(0.0, 0.15)
        half_w, half_h = bw * (1 + scale_amp) / 2, bh * (1 + scale_amp) / 2
        ax, ay = rng.uniform(0, self.max_amplitude, size=2)
        vx, vy = rng.uniform(-self.max_speed, self.max_speed, size=2)
        drift_x, drift_y = vx * (self.length - 1), vy * (self.length - 1)
        # start so that drift + oscillation stays inside with a 2 px margin
        lo_x = half_w + ax + 2 + max(0.0, -drift_x)
        hi_x = w - half_w - ax - 2 - max(0.0, drift_x)
        lo_y = half_h + ay + 2 + max(0.0, -drift_y)
        hi_y = h - half_h - ay - 2 - max(0.0, drift_y)
        if lo_x >= hi_x:
            vx, ax = 0.0, 0.0
            lo_x, hi_x = half_w + 2, w - half_w - 2
        if lo_y >= hi_y:
            vy, ay = 0.0, 0.0
            lo_y, hi_y = half_h + 2, h - half_h - 2
        color = rng.integers(20, 236, size=3)
        params = dict(
            frame_size=self.frame_size,
            length=self.length,
            shape=str(rng.choice(["rectangle", "ellipse"])),
            base_size=(float(bw), float(bh)),
            color=tuple(int(c) for c in color),
            start=(float(rng.uniform(lo_x, hi_x)), float(rng.uniform(lo_y, hi_y))),
            velocity=(float(vx), float(vy)),
            amplitude=(float(ax), float(ay)),
            period=float(rng.uniform(20, 60)),
            phase=float(rng.uniform(0, 2 * math.pi)),
            scale_amplitude=float(scale_amp),
            scale_period=float(rng.uniform(20, 60)),
            texture_seed=int(rng.integers(0, 2**31 - 1)),
            target_depth=float(rng.uniform(*self.target_depth_range)),
        )
        params.update(self.extra)
        return SceneSpec(**params)


def derive_seeds(seed: int, n: int) -> list[int]:
    return [int(s) for s in np.random.SeedSequence(seed).generate_state(n)]


def generate_corpus(n_sequences: int, sampler: SpecSampler | None = None, seed: int = 0,
                    eval_fraction: float = 0.0, prefix: str = "seq") -> list[SequenceDataset]:
    """Independent sequences; the last ``eval_fraction`` of them are tagged ``split=eval``."""
    if n_sequences < 1:
        raise SpecError("n_sequences must be >= 1")
    sampler = sampler or DefaultSpecSampler()
    n_eval = int(round(n_sequences * eval_fraction))
    out = []
    for i, s in enumerate(derive_seeds(seed, n_sequences)):
        spec = sampler(np.random.default_rng(s))
        ds = generate_sequence(spec, s, name=f"{prefix}{i:04d}")
        ds.meta["split"] = "eval" if i >= n_sequences - n_eval else "train"
        ds.meta["corpus_seed"] = int(seed)
        out.append(ds)
    return out


def _luminance(frames: np.ndarray) -> np.ndarray:
    f = frames.astype(np.float64)
    return 0.299 * f[..., 0] + 0.587 * f[..., 1] + 0.114 * f[..., 2]


def pseudo_tir(dataset: SequenceDataset, band: float = 48.0) -> SequenceDataset:
    """Thermal-looking stand-in: luminance, inverted inside the target-intensity band, blurred.

    This is a synthetic modality shift, not real thermal imagery.
    """
    lum = _luminance(dataset.frames)
    out = np.empty_like(dataset.frames)
    for t in range(len(dataset)):
        x, y, w, h = dataset.boxes[t]
        y0, x0 = max(int(y), 0), max(int(x), 0)
        patch = lum[t, y0:int(math.ceil(y + h)), x0:int(math.ceil(x + w))]
        level = float(patch.mean()) if patch.size else float(lum[t].mean())
        img = lum[t].copy()
        in_band = np.abs(img - level) <= band
        img[in_band] = 255.0 - img[in_band]
        img = _blur(img[..., None], passes=1)[..., 0]
        gray = np.clip(np.floor(img + 0.5), 0, 255).astype(np.uint8)
        out[t] = gray[..., None]
    meta = dict(dataset.meta)
    meta["domain"] = "pseudo_tir"
    meta["note"] = "synthetic pseudo-TIR stand-in, not real thermal imagery"
    return dataset.replace(frames=out, meta=meta)
