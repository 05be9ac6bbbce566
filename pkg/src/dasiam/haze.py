"""Synthetic haze via the atmospheric scattering model.

A hazed pixel is ``t * E + (1 - t) * A`` with transmission ``t = exp(-d * beta)``,
``E`` the clean intensity, ``A`` the airlight and ``d`` the distance in metres.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import Callable, Sequence, Union

import numpy as np

from .data import SequenceDataset
from .errors import ConfigurationError, GenerationError, PairingError

log = logging.getLogger(__name__)

DEFAULT_AIRLIGHT = 240.0
TRAIN_BETA_RANGE = (0.015, 0.03)
EVAL_BETA_RANGE = (0.005, 0.012)
REFERENCE_DEPTH_M = 50.0


@dataclass(frozen=True)
class HazeParams:
    """Per-channel scattering coefficients (1/m) and airlight.

    ``depth_scale`` converts raw depth units to metres. ``None`` means
    "normalise so the 95th-percentile depth lands at 50 m".
    """

    beta: tuple[float, float, float]
    airlight: tuple[float, float, float] = (DEFAULT_AIRLIGHT,) * 3
    depth_scale: float | None = None
    depth_offset: float = 0.0

    def __post_init__(self):
        beta = _triple(self.beta)
        airlight = _triple(self.airlight)
        object.__setattr__(self, "beta", beta)
        object.__setattr__(self, "airlight", airlight)
        if any(b < 0 or not np.isfinite(b) for b in beta):
            raise ConfigurationError(f"beta must be finite and >= 0, got {beta}")
        if any(not 0 <= a <= 255 for a in airlight):
            raise ConfigurationError(f"airlight must lie in [0, 255], got {airlight}")
        if self.depth_scale is not None and not self.depth_scale > 0:
            raise ConfigurationError(f"depth_scale must be > 0, got {self.depth_scale}")
        if self.depth_offset < 0:
            raise ConfigurationError(f"depth_offset must be >= 0, got {self.depth_offset}")

    @classmethod
    def uniform(cls, beta: float, **kwargs) -> "HazeParams":
        return cls(beta=(beta, beta, beta), **kwargs)

    def resolved(self, depth: np.ndarray) -> "HazeParams":
        """Return a copy with ``depth_scale`` fixed from ``depth`` if it was left automatic."""
        if self.depth_scale is not None:
            return self
        return HazeParams(self.beta, self.airlight, auto_depth_scale(depth), self.depth_offset)

    def to_dict(self) -> dict:
        return {"beta": list(self.beta), "airlight": list(self.airlight),
                "depth_scale": self.depth_scale, "depth_offset": self.depth_offset}


def _triple(v) -> tuple[float, float, float]:
    if np.isscalar(v):
        return (float(v),) * 3
    vals = tuple(float(x) for x in v)
    if len(vals) != 3:
        raise ConfigurationError(f"expected 3 per-channel values, got {len(vals)}")
    return vals


def auto_depth_scale(depth: np.ndarray) -> float:
    p95 = float(np.percentile(np.asarray(depth, dtype=np.float64), 95))
    return REFERENCE_DEPTH_M / p95 if p95 > 0 else 1.0


def _check_depth(depth: np.ndarray) -> np.ndarray:
    depth = np.asarray(depth, dtype=np.float64)
    if depth.ndim != 2:
        raise PairingError(f"depth map must be 2-D, got shape {depth.shape}")
    if not np.all(np.isfinite(depth)) or np.any(depth < 0):
        raise ConfigurationError("depth values must be finite and non-negative")
    return depth


def _libm_exp(x: np.ndarray) -> np.ndarray:
    # numpy's vectorised exp can differ by 1 ulp between CPUs; libm per unique value keeps hashes stable
    uniq, inverse = np.unique(x, return_inverse=True)
    vals = np.fromiter((math.exp(v) for v in uniq.tolist()), dtype=np.float64, count=uniq.size)
    return vals[inverse].reshape(x.shape)


def transmission(depth: np.ndarray, params: HazeParams, channel: int) -> np.ndarray:
    """Per-pixel transmission map in (0, 1] for one colour channel."""
    depth = _check_depth(depth)
    params = params.resolved(depth)
    metres = depth * params.depth_scale + params.depth_offset
    return _libm_exp(-metres * params.beta[channel])


def apply_haze(frame: np.ndarray, depth: np.ndarray, params: HazeParams) -> np.ndarray:
    """Haze one HxWx3 uint8 frame. Rounds half-up, then clamps to [0, 255]."""
    frame = np.asarray(frame)
    depth = _check_depth(depth)
    if frame.ndim != 3 or frame.shape[2] != 3:
        raise PairingError(f"frame must be HxWx3, got {frame.shape}")
    if frame.shape[:2] != depth.shape:
        raise PairingError(f"frame {frame.shape[:2]} and depth {depth.shape} differ in size")
    params = params.resolved(depth)
    out = np.empty(frame.shape, dtype=np.uint8)
    for ch in range(3):
        t = transmission(depth, params, ch)
        value = t * frame[..., ch].astype(np.float64) + (1.0 - t) * params.airlight[ch]
        out[..., ch] = np.clip(np.floor(value + 0.5), 0, 255).astype(np.uint8)
    return out


@dataclass(frozen=True)
class BetaSampler:
    """Draw a uniform scalar beta (same on every channel) from ``[low, high]``."""

    low: float
    high: float
    airlight: tuple[float, float, float] = (DEFAULT_AIRLIGHT,) * 3
    depth_scale: float | None = None

    def __post_init__(self):
        if not 0 <= self.low <= self.high:
            raise ConfigurationError(f"invalid beta range [{self.low}, {self.high}]")

    def __call__(self, rng: np.random.Generator) -> HazeParams:
        beta = float(rng.uniform(self.low, self.high)) if self.high > self.low else float(self.low)
        return HazeParams.uniform(beta, airlight=self.airlight, depth_scale=self.depth_scale)


TRAIN_SAMPLER = BetaSampler(*TRAIN_BETA_RANGE)
EVAL_SAMPLER = BetaSampler(*EVAL_BETA_RANGE)

ParamSource = Union[HazeParams, Callable[[np.random.Generator], HazeParams]]


def haze_dataset(dataset: SequenceDataset, params: ParamSource, seed: int = 0) -> SequenceDataset:
    """Return a hazed copy of ``dataset``; annotations are copied untouched.

    ``params`` is either fixed HazeParams or a sampler called once per
    sequence with a generator seeded from ``seed``.
    """
    if dataset.depth is None:
        raise GenerationError(f"{dataset.name}: frame 0 has no depth map")
    bad = [i for i, d in enumerate(dataset.depth) if not np.all(np.isfinite(d))]
    if bad:
        raise GenerationError(f"{dataset.name}: frame {bad[0]} has an invalid depth map")
    if not isinstance(params, HazeParams):
        params = params(np.random.default_rng(seed))
    if params.depth_scale is None:
        params = HazeParams(params.beta, params.airlight, auto_depth_scale(dataset.depth), params.depth_offset)
    frames = np.stack([apply_haze(f, d, params) for f, d in zip(dataset.frames, dataset.depth)])
    meta = dict(dataset.meta)
    meta["haze"] = params.to_dict()
    meta["domain"] = "foggy"
    meta["haze_seed"] = int(seed)
    return dataset.replace(frames=frames, meta=meta)


def haze_corpus(datasets: Sequence[SequenceDataset], params: ParamSource, seed: int = 0) -> list[SequenceDataset]:
    """Haze each sequence with its own seed derived from ``seed``."""
    seeds = np.random.SeedSequence(seed).generate_state(len(datasets)) if datasets else []
    return [haze_dataset(ds, params, int(s)) for ds, s in zip(datasets, seeds)]
