"""Adversarial domain classifiers (pixel and semantic level), ROI Align and the A-distance probe."""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np

from .autodiff import Conv2d, Linear, Module, Parameter, Tensor, ops
from .errors import EstimationError, PoolingError

log = logging.getLogger(__name__)

SOURCE, TARGET = 0, 1
EPS = 1e-6
ROI_SIZE = 5


def _reverse(x: Tensor, lambda_grl: Optional[float]) -> Tensor:
    # None bypasses the reversal entirely (used to compare against the plain gradient)
    return x if lambda_grl is None else ops.grad_reverse(x, lambda_grl)


class PixelDomainClassifier(Module):
    """Per-pixel domain probability: 1x1 conv C->hidden, relu, 1x1 conv hidden->1, sigmoid."""

    def __init__(self, rng: np.random.Generator, in_ch: int, hidden: int = 64):
        self.conv1 = Conv2d(rng, in_ch, hidden, 1)
        self.conv2 = Conv2d(rng, hidden, 1, 1)

    def forward(self, feat: Tensor) -> Tensor:
        return ops.sigmoid(self.conv2(ops.relu(self.conv1(feat))))


class SemanticDomainClassifier(Module):
    """Domain probability of an ROI-pooled (C, 5, 5) feature: FC -> relu -> FC -> sigmoid."""

    def __init__(self, rng: np.random.Generator, in_ch: int, hidden: int = 64, pool: int = ROI_SIZE):
        self.in_ch = in_ch
        self.pool = pool
        self.fc1 = Linear(rng, in_ch * pool * pool, hidden)
        self.fc2 = Linear(rng, hidden, 1)

    def forward(self, rois: Tensor) -> Tensor:
        expected = (self.in_ch, self.pool, self.pool)
        if rois.ndim != 4 or rois.shape[1:] != expected:
            raise PoolingError(f"semantic classifier expects (R, {expected}), got {rois.shape}")
        flat = ops.reshape(rois, (rois.shape[0], -1))
        return ops.sigmoid(self.fc2(ops.relu(self.fc1(flat))))


def pda_loss(template_feat: Tensor, search_feat: Tensor, domain: int, classifier: PixelDomainClassifier,
             lambda_grl: Optional[float] = 1.0, eps: float = EPS) -> Tensor:
    """Pixel-level domain loss: per-pixel BCE averaged over each map, then over template and search."""
    losses = []
    for feat in (template_feat, search_feat):
        p = classifier(_reverse(feat, lambda_grl))
        losses.append(ops.binary_cross_entropy(p, float(domain), eps=eps))
    return (losses[0] + losses[1]) * 0.5


def roi_sample_points(box, stride: float, size: int = ROI_SIZE) -> tuple[np.ndarray, np.ndarray]:
    """Bin-centre sampling coordinates (ys, xs), each (size, size), in feature cells.

    Feature cell ``i`` is centred on image coordinate ``(i + 0.5) * stride``.
    """
    x, y, w, h = [float(v) for v in box]
    if not (w > 0 and h > 0 and np.isfinite([x, y, w, h]).all()):
        raise PoolingError(f"degenerate ROI {(x, y, w, h)}")
    x0, y0 = x / stride - 0.5, y / stride - 0.5
    bw, bh = w / stride / size, h / stride / size
    centres = np.arange(size) + 0.5
    ys = np.repeat((y0 + centres * bh)[:, None], size, axis=1)
    xs = np.repeat((x0 + centres * bw)[None, :], size, axis=0)
    return ys, xs


def roi_align(feature: Tensor, box, stride: float, size: int = ROI_SIZE) -> Tensor:
    """Pool the image-space box ``(x, y, w, h)`` from a CHW map into (C, size, size), one sample per bin."""
    ys, xs = roi_sample_points(box, stride, size)
    out = ops.bilinear_sample(feature, ys, xs)
    return ops.reshape(out, (feature.shape[0], size, size))


def roi_align_many(feature: Tensor, boxes: Sequence, stride: float, size: int = ROI_SIZE) -> Tensor:
    """Pool several boxes from one CHW map in a single sampling pass; returns (R, C, size, size)."""
    pts = [roi_sample_points(b, stride, size) for b in boxes]
    ys = np.concatenate([p[0].reshape(-1) for p in pts])
    xs = np.concatenate([p[1].reshape(-1) for p in pts])
    c = feature.shape[0]
    out = ops.reshape(ops.bilinear_sample(feature, ys, xs), (c, len(boxes), size, size))
    return ops.transpose(out, (1, 0, 2, 3))


def sda_loss(rois: Optional[Tensor], domain: int, classifier: SemanticDomainClassifier,
             lambda_grl: Optional[float] = 1.0, eps: float = EPS) -> Tensor:
    """Semantic-level domain loss: BCE summed over the pooled ROIs, divided by their count."""
    if rois is None or rois.shape[0] == 0:
        log.warning("sda_loss called with no ROIs; contributing zero")
        return Tensor(0.0)
    s = classifier(_reverse(rois, lambda_grl))
    return ops.binary_cross_entropy(s, float(domain), eps=eps, reduction="sum") * (1.0 / rois.shape[0])


def top_boxes(boxes: np.ndarray, scores: np.ndarray, n: int = 4) -> np.ndarray:
    """The ``n`` highest-scoring boxes (stable order on ties)."""
    order = np.argsort(-np.asarray(scores), kind="stable")[:n]
    return np.asarray(boxes)[order]


class DomainAdapter(Module):
    """PDA and SDA classifiers for every feature level."""

    def __init__(self, channels: Sequence[int], seed: int = 0, hidden: int = 64):
        rng = np.random.default_rng(seed)
        self.pixel = [PixelDomainClassifier(rng, c, hidden) for c in channels]
        self.semantic = [SemanticDomainClassifier(rng, c, hidden) for c in channels]


# -- adversarial contract ------------------------------------------------

@dataclass
class ContractReport:
    classifier_step_decreases_loss: bool
    backbone_step_increases_loss: bool
    grl_dot_plain: float
    zero_lambda_max_abs_grad: float
    loss_before: float
    loss_after_classifier_step: float
    loss_after_backbone_step: float

    @property
    def ok(self) -> bool:
        return (self.classifier_step_decreases_loss and self.backbone_step_increases_loss
                and self.grl_dot_plain < 0 and self.zero_lambda_max_abs_grad == 0.0)


def _grads(loss_fn, lambda_grl, params: Sequence[Parameter]) -> tuple[float, list[np.ndarray]]:
    for p in params:
        p.grad = None
    loss = loss_fn(lambda_grl)
    loss.backward()
    return loss.item(), [np.zeros_like(p.data) if p.grad is None else p.grad.copy() for p in params]


def adversarial_contract_check(loss_fn: Callable[[Optional[float]], Tensor], backbone: Sequence[Parameter],
                               classifier: Sequence[Parameter], eta: float = 1e-3) -> ContractReport:
    """Check the minimax directions of a domain loss built by ``loss_fn(lambda_grl)``.

    A small step along the classifier's negative gradient must lower the
    loss; a step along the backbone's negative gradient taken through the
    reversal layer must raise it. The reversed and plain backbone gradients
    must point in opposite directions, and ``lambda_grl=0`` must send exactly
    zero gradient into the backbone.
    """
    backbone, classifier = list(backbone), list(classifier)
    everything = backbone + classifier
    base, g = _grads(loss_fn, 1.0, everything)
    g_bb, g_cls = g[:len(backbone)], g[len(backbone):]
    _, g_plain = _grads(loss_fn, None, backbone)
    _, g_zero = _grads(loss_fn, 0.0, backbone)
    dot = float(sum((a.astype(np.float64) * b).sum() for a, b in zip(g_bb, g_plain)))

    def trial(params, grads):
        saved = [p.data.copy() for p in params]
        for p, gr in zip(params, grads):
            p.data = p.data - eta * gr
        value = loss_fn(1.0).item()
        for p, s in zip(params, saved):
            p.data = s
        return value

    after_cls = trial(classifier, g_cls)
    after_bb = trial(backbone, g_bb)
    for p in everything:
        p.grad = None
    return ContractReport(after_cls < base, after_bb > base, dot,
                          float(max((np.abs(x).max() for x in g_zero), default=0.0)),
                          base, after_cls, after_bb)


# -- A-distance ----------------------------------------------------------

MIN_SAMPLES = 32


def a_distance_from_error(err: float) -> float:
    err = min(max(float(err), 0.0), 0.5)
    return 2.0 * (1.0 - 2.0 * err)


def probe_error(source: np.ndarray, target: np.ndarray, seed: int = 0, hidden: int = 64, epochs: int = 200,
                lr: float = 0.1, momentum: float = 0.9, train_fraction: float = 0.7) -> float:
    """Held-out error of a freshly trained two-layer domain probe."""
    xs = np.asarray(source, dtype=np.float64).reshape(len(source), -1)
    xt = np.asarray(target, dtype=np.float64).reshape(len(target), -1)
    if len(xs) < MIN_SAMPLES or len(xt) < MIN_SAMPLES:
        raise EstimationError(f"need >= {MIN_SAMPLES} samples per domain, got {len(xs)} and {len(xt)}")
    if xs.shape[1] != xt.shape[1]:
        raise EstimationError(f"feature sizes differ: {xs.shape[1]} vs {xt.shape[1]}")
    rng = np.random.default_rng(seed)
    x = np.concatenate([xs, xt])
    y = np.concatenate([np.zeros(len(xs)), np.ones(len(xt))])
    # stratified split so both domains appear in train and test
    train_idx, test_idx = [], []
    for label in (0, 1):
        idx = rng.permutation(np.flatnonzero(y == label))
        cut = int(round(train_fraction * len(idx)))
        train_idx.append(idx[:cut])
        test_idx.append(idx[cut:])
    tr, te = np.concatenate(train_idx), np.concatenate(test_idx)
    mu = x[tr].mean(axis=0)
    sd = x[tr].std(axis=0)
    sd[sd == 0] = 1.0
    xn = (x - mu) / sd
    probe_rng = np.random.default_rng(rng.integers(2**32))
    l1 = Linear(probe_rng, x.shape[1], hidden)
    l2 = Linear(probe_rng, hidden, 1)
    params = l1.parameters() + l2.parameters()
    buf = [np.zeros_like(p.data) for p in params]
    xin = Tensor(xn[tr])
    ytr = y[tr][:, None]
    for _ in range(epochs):
        for p in params:
            p.grad = None
        p_hat = ops.sigmoid(l2(ops.relu(l1(xin))))
        ops.binary_cross_entropy(p_hat, ytr).backward()
        for p, b in zip(params, buf):
            b *= momentum
            b += p.grad
            p.data = p.data - lr * b
    logits = l2(ops.relu(l1(Tensor(xn[te])))).data[:, 0]
    pred = (logits > 0).astype(np.float64)
    return float((pred != y[te]).mean())


def a_distance(source: np.ndarray, target: np.ndarray, seed: int = 0, **probe_kwargs) -> float:
    """Proxy A-distance 2(1 - 2 err) from a seeded probe; err is clamped to [0, 0.5]."""
    return a_distance_from_error(probe_error(source, target, seed, **probe_kwargs))


def two_gaussians(n: int, dim: int, separation: float, sigma: float = 1.0, seed: int = 0):
    """Two seeded Gaussian clouds whose means lie ``separation`` apart along the first axis.

    ``separation=0`` draws both domains from the same distribution.
    """
    rng = np.random.default_rng(seed)
    shift = np.zeros(dim)
    shift[0] = separation / 2
    a = rng.normal(0.0, sigma, size=(n, dim)) - shift
    b = rng.normal(0.0, sigma, size=(n, dim)) + shift
    return a, b


def features_csv(source: np.ndarray, target: np.ndarray) -> str:
    """Flattened per-sample features with a trailing domain label column."""
    xs = np.asarray(source, dtype=np.float64).reshape(len(source), -1)
    xt = np.asarray(target, dtype=np.float64).reshape(len(target), -1)
    d = xs.shape[1]
    lines = [",".join([f"f{i}" for i in range(d)] + ["domain"])]
    for rows, label in ((xs, SOURCE), (xt, TARGET)):
        for r in rows:
            lines.append(",".join([repr(float(v)) for v in r] + [str(label)]))
    return "\n".join(lines) + "\n"
