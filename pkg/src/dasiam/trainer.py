"""Joint tracking + adversarial domain-alignment training."""

from __future__ import annotations

import dataclasses
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import io
from .autodiff import Parameter, Tensor, ops
from .data import SequenceDataset
from .domain import DomainAdapter, SOURCE, TARGET, pda_loss, roi_align_many, sda_loss, top_boxes
from .errors import ConfigurationError, TrainingError
from .siamese.losses import decode_boxes, tracking_loss
from .siamese.model import ModelConfig, SiameseRPN
from .siamese.pairs import TrainingPair, sample_pair
from .siamese.tracker import TrackerConfig, track_sequence
from .siamese.crops import to_input

log = logging.getLogger(__name__)

LOG_HEADER = "epoch,iter,L_t,L_pda,L_sda,L_total,lr"


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 19
    iters_per_epoch: int = 50
    batch_size: int = 4
    warmup_epochs: int = 5
    warmup_lr: float = 1e-3
    base_lr: float = 5e-3
    final_lr: float = 5e-4
    da_lr: float = 1e-3  # domain classifiers start here and decay with the tracker schedule
    momentum: float = 0.9
    weight_decay: float = 1e-4
    freeze_backbone_until: int = 10  # last frozen epoch (inclusive)
    lambda_da: float = 0.1
    lambda_grl: float = 1.0
    grl_ramp_epochs: int = 0  # 0 keeps lambda_grl constant
    enable_da: bool = True  # False builds no domain modules and draws no target pairs
    n_roi: int = 4
    max_gap: int = 20
    max_shift: float = 16.0
    grad_clip: float = 10.0
    backbone_lr_scale: float = 1.0  # backbone steps use lr times this once unfrozen
    pseudo_threshold: float = 0.2
    seed: int = 0

    def __post_init__(self):
        if not 0 <= self.warmup_epochs < self.epochs:
            raise ConfigurationError(f"warmup_epochs ({self.warmup_epochs}) must be < epochs ({self.epochs})")
        for name in ("warmup_lr", "base_lr", "final_lr", "da_lr", "backbone_lr_scale"):
            if not getattr(self, name) > 0:
                raise ConfigurationError(f"{name} must be > 0")
        if self.batch_size < 1 or self.iters_per_epoch < 1:
            raise ConfigurationError("batch_size and iters_per_epoch must be >= 1")
        if self.lambda_da < 0 or self.lambda_grl < 0:
            raise ConfigurationError("lambda_da and lambda_grl must be >= 0")

    @classmethod
    def from_mapping(cls, values: dict) -> "TrainConfig":
        """Build from string or typed values (config files, CLI flags); unknown keys are rejected."""
        kinds = {f.name: f.type for f in dataclasses.fields(cls)}
        kw = {}
        for key, raw in values.items():
            if key not in kinds:
                raise ConfigurationError(f"unknown training option {key!r}")
            default = getattr(cls, key)
            kw[key] = _coerce(key, raw, type(default))
        return cls(**kw)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


def _coerce(key, raw, kind):
    if isinstance(raw, kind) and not (kind is int and isinstance(raw, bool)):
        return raw
    text = str(raw).strip()
    try:
        if kind is bool:
            if text.lower() in ("1", "true", "yes", "on"):
                return True
            if text.lower() in ("0", "false", "no", "off"):
                return False
            raise ValueError(text)
        return kind(text)
    except ValueError:
        raise ConfigurationError(f"{key}: cannot read {raw!r} as {kind.__name__}") from None


def lr_at(epoch: int, config: TrainConfig = TrainConfig()) -> float:
    """Constant warm-up, then exponential interpolation from base_lr to final_lr (epochs are 1-based)."""
    if epoch <= config.warmup_epochs:
        return config.warmup_lr
    span = config.epochs - config.warmup_epochs - 1
    if span <= 0:
        return config.base_lr
    frac = (epoch - config.warmup_epochs - 1) / span
    return config.base_lr * (config.final_lr / config.base_lr) ** frac


def da_lr_at(epoch: int, config: TrainConfig = TrainConfig()) -> float:
    """Domain-module rate: ``da_lr`` through warm-up, then the same exponential decay as the tracker."""
    if epoch <= config.warmup_epochs:
        return config.da_lr
    return config.da_lr * lr_at(epoch, config) / config.base_lr


def grl_at(epoch: int, config: TrainConfig) -> float:
    if config.grl_ramp_epochs <= 0:
        return config.lambda_grl
    return config.lambda_grl * min(1.0, (epoch - 1) / config.grl_ramp_epochs)


class SGD:
    """Momentum SGD with L2 weight decay; parameters without a gradient are left untouched.

    ``lr_scale`` maps ``id(param)`` to a per-parameter multiplier on the step size.
    """

    def __init__(self, params: Sequence[Parameter], momentum: float = 0.9, weight_decay: float = 0.0,
                 lr_scale: Optional[dict] = None):
        self.params = list(params)
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.lr_scale = dict(lr_scale or {})
        self.buffers = [np.zeros_like(p.data) for p in self.params]

    def step(self, lr: float, skip: frozenset = frozenset()) -> None:
        for p, buf in zip(self.params, self.buffers):
            if p.grad is None or id(p) in skip:
                continue
            g = p.grad + self.weight_decay * p.data if self.weight_decay else p.grad
            buf *= self.momentum
            buf += g
            p.data = p.data - p.data.dtype.type(lr * self.lr_scale.get(id(p), 1.0)) * buf


def sgd_step(optimizer: SGD, config: TrainConfig, epoch: int, frozen: Sequence[Parameter] = (),
             schedule=lr_at) -> float:
    lr = schedule(epoch, config)
    optimizer.step(lr, frozenset(id(p) for p in frozen))
    return lr


def clip_gradients(params: Sequence[Parameter], max_norm: float) -> float:
    grads = [p.grad for p in params if p.grad is not None]
    norm = math.sqrt(sum(float((g.astype(np.float64) ** 2).sum()) for g in grads))
    if max_norm > 0 and norm > max_norm:
        scale = max_norm / norm
        for p in params:
            if p.grad is not None:
                p.grad = p.grad * p.grad.dtype.type(scale)
    return norm


# -- batches ---------------------------------------------------------------

@dataclass
class PseudoSequence:
    dataset: SequenceDataset
    boxes: np.ndarray  # baseline predictions, used only as crop centres
    scores: np.ndarray
    provenance: dict = field(default_factory=dict)


@dataclass
class DomainBatch:
    source: list[TrainingPair]
    target: list[TrainingPair]

    def __post_init__(self):
        if any(p.has_labels for p in self.target):
            raise ConfigurationError("target pairs must not carry supervision")


def _stack_inputs(pairs: Sequence[TrainingPair]) -> tuple[Tensor, Tensor]:
    z = Tensor(to_input(np.stack([p.template for p in pairs])))
    x = Tensor(to_input(np.stack([p.search for p in pairs])))
    return z, x


def prepare_pseudo_crops(targets: Sequence[SequenceDataset], model: SiameseRPN, threshold: float = 0.2,
                         tracker_config: TrackerConfig = TrackerConfig(), checkpoint: str = "") -> tuple[list, list]:
    """Track every target sequence with the baseline; returns (pool, skipped names).

    Sequences whose best score never reaches ``threshold`` are skipped.
    """
    pool, skipped = [], []
    for ds in targets:
        boxes, scores = track_sequence(model, ds, tracker_config)
        if len(scores) > 1 and scores[1:].max() < threshold:
            log.warning("%s: baseline max score %.3f < %.2f; skipped", ds.name, scores[1:].max(), threshold)
            skipped.append(ds.name)
            continue
        pool.append(PseudoSequence(ds, boxes, scores, {"checkpoint": checkpoint, "sequence": ds.name,
                                                       "threshold": threshold}))
    return pool, skipped


# -- losses ----------------------------------------------------------------

@dataclass
class LossTerms:
    total: Tensor
    tracking: Tensor
    pda: Optional[Tensor] = None
    sda: Optional[Tensor] = None

    def values(self) -> tuple[float, float, float, float]:
        f = lambda t: 0.0 if t is None else t.item()  # noqa: E731
        return f(self.tracking), f(self.pda), f(self.sda), f(self.total)


def clip_proposals(boxes: np.ndarray, size: float, min_side: float) -> np.ndarray:
    """Clip xywh boxes to the crop and widen any side below ``min_side`` about its centre."""
    x1 = np.clip(boxes[:, 0], 0.0, size)
    y1 = np.clip(boxes[:, 1], 0.0, size)
    x2 = np.clip(boxes[:, 0] + boxes[:, 2], 0.0, size)
    y2 = np.clip(boxes[:, 1] + boxes[:, 3], 0.0, size)
    w = np.maximum(x2 - x1, min_side)
    h = np.maximum(y2 - y1, min_side)
    cx = np.clip((x1 + x2) / 2, w / 2, size - w / 2)
    cy = np.clip((y1 + y2) / 2, h / 2, size - h / 2)
    return np.stack([cx - w / 2, cy - h / 2, w, h], axis=1)


def _rois_for(out_cls: np.ndarray, out_reg: np.ndarray, model: SiameseRPN, n_roi: int) -> list[np.ndarray]:
    mc = model.config
    grid = mc.anchor_grid()
    rois = []
    for i in range(out_cls.shape[0]):
        boxes, scores = decode_boxes(out_cls[i], out_reg[i], grid)
        rois.append(clip_proposals(top_boxes(boxes, scores, n_roi), mc.search_size, mc.stride))
    return rois


def _domain_terms(model, adapter: DomainAdapter, out, zf, xf, domain: int, lambda_grl: float, n_roi: int):
    """Per-level PDA and SDA losses for one domain's forward pass."""
    stride = model.config.stride
    rois = _rois_for(out.cls.data, out.reg.data, model, n_roi)
    pda, sda = [], []
    for lvl in range(len(xf)):
        pda.append(pda_loss(zf[lvl], xf[lvl], domain, adapter.pixel[lvl], lambda_grl))
        pooled = [roi_align_many(xf[lvl][i], rois[i], stride) for i in range(len(rois))]
        sda.append(sda_loss(ops.concat(pooled, axis=0), domain, adapter.semantic[lvl], lambda_grl))
    return pda, sda


def total_loss(model: SiameseRPN, adapter: Optional[DomainAdapter], batch: DomainBatch, lambda_da: float,
               lambda_grl: float = 1.0, n_roi: int = 4) -> LossTerms:
    """L_t on source pairs plus lambda_da times the level-summed PDA and SDA losses.

    Each level's domain losses are averaged over the source and target halves of the batch.
    """
    z, x = _stack_inputs(batch.source)
    out, zf, xf = model(z, x)
    cls_label = np.stack([p.cls_label for p in batch.source])
    reg_target = np.stack([p.reg_target for p in batch.source])
    l_t, _, _ = tracking_loss(out.cls, out.reg, cls_label, reg_target)
    if adapter is None:
        return LossTerms(l_t, l_t)
    zt, xt = _stack_inputs(batch.target)
    out_t, zf_t, xf_t = model(zt, xt)
    if not (np.isfinite(out.reg.data).all() and np.isfinite(out_t.reg.data).all()):
        # no proposals to pool; let the caller's NaN guard report it
        nan = Tensor(float("nan"))
        return LossTerms(nan, l_t, nan, nan)
    pda_s, sda_s = _domain_terms(model, adapter, out, zf, xf, SOURCE, lambda_grl, n_roi)
    pda_t, sda_t = _domain_terms(model, adapter, out_t, zf_t, xf_t, TARGET, lambda_grl, n_roi)
    l_pda = sum(((a + b) * 0.5 for a, b in zip(pda_s, pda_t)), Tensor(0.0))
    l_sda = sum(((a + b) * 0.5 for a, b in zip(sda_s, sda_t)), Tensor(0.0))
    return LossTerms(l_t + (l_pda + l_sda) * lambda_da, l_t, l_pda, l_sda)


# -- training loop ---------------------------------------------------------

@dataclass
class TrainResult:
    model: SiameseRPN
    adapter: Optional[DomainAdapter]
    log_rows: list[str]
    checkpoints: list[Path]
    skipped_targets: list[str] = field(default_factory=list)


def _streams(seed: int) -> tuple[np.random.Generator, np.random.Generator]:
    # independent streams: drawing target pairs never perturbs the source sequence
    src, tgt = np.random.SeedSequence(seed).spawn(2)
    return np.random.default_rng(src), np.random.default_rng(tgt)


def _draw_source(rng, sources, config: TrainConfig, mc: ModelConfig) -> TrainingPair:
    ds = sources[int(rng.integers(len(sources)))]
    return sample_pair(ds, rng, mc, config.max_gap, config.max_shift)


def _draw_target(rng, pool: Sequence[PseudoSequence], config: TrainConfig, mc: ModelConfig) -> TrainingPair:
    ps = pool[int(rng.integers(len(pool)))]
    return sample_pair(ps.dataset, rng, mc, config.max_gap, config.max_shift, boxes=ps.boxes)


def _dump_batch(out_dir: Optional[Path], batch: DomainBatch, epoch: int, it: int) -> str:
    if out_dir is None:
        return "no output directory for a diagnostic dump"
    path = Path(out_dir) / f"nan_batch_e{epoch:02d}_i{it:04d}.npz"
    arrays = {f"source_template_{i}": p.template for i, p in enumerate(batch.source)}
    arrays.update({f"source_search_{i}": p.search for i, p in enumerate(batch.source)})
    arrays.update({f"target_search_{i}": p.search for i, p in enumerate(batch.target)})
    path.parent.mkdir(parents=True, exist_ok=True)
    np.savez(path, **arrays)
    return f"last batch written to {path}"


def train(sources: Sequence[SequenceDataset], targets: Sequence[PseudoSequence] = (),
          config: TrainConfig = TrainConfig(), model_config: ModelConfig = ModelConfig(),
          out_dir: Optional[Path] = None, init_state: Optional[dict] = None) -> TrainResult:
    """Train a tracker on labelled ``sources`` with optional unlabelled pseudo-cropped ``targets``.

    Writes ``epoch_XX.ckpt`` (tracker), ``epoch_XX_da.ckpt`` (domain modules)
    and ``train_log.csv`` under ``out_dir`` when given.
    """
    if not sources:
        raise ConfigurationError("no source sequences")
    use_da = config.enable_da and len(targets) > 0
    if config.enable_da and config.lambda_da > 0 and not targets:
        raise ConfigurationError("domain adaptation needs target sequences (or set enable_da = false)")
    model = SiameseRPN(dataclasses.replace(model_config, seed=config.seed))
    if init_state is not None:
        model.load_state_dict(init_state)
    adapter = DomainAdapter(model_config.widths, seed=config.seed + 1) if use_da else None
    src_rng, tgt_rng = _streams(config.seed)
    backbone = model.backbone_parameters()
    opt = SGD(model.parameters(), config.momentum, config.weight_decay,
              {id(p): config.backbone_lr_scale for p in backbone})
    da_opt = SGD(adapter.parameters(), config.momentum, config.weight_decay) if adapter else None
    rows = [LOG_HEADER]
    ckpts: list[Path] = []
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        io.atomic_write_text(out_dir / "model_config.json", io.dumps_json(model_config.to_dict()))
        io.atomic_write_text(out_dir / "train_config.json", io.dumps_json(config.to_dict()))
    for epoch in range(1, config.epochs + 1):
        frozen = epoch <= config.freeze_backbone_until
        for p in backbone:
            p.requires_grad = not frozen
        lam_grl = grl_at(epoch, config)
        for it in range(config.iters_per_epoch):
            src = [_draw_source(src_rng, sources, config, model_config) for _ in range(config.batch_size)]
            tgt = [_draw_target(tgt_rng, targets, config, model_config)
                   for _ in range(config.batch_size)] if use_da else []
            batch = DomainBatch(src, tgt)
            model.zero_grad()
            if adapter:
                adapter.zero_grad()
            terms = total_loss(model, adapter, batch, config.lambda_da, lam_grl, config.n_roi)
            vals = terms.values()
            if not all(math.isfinite(v) for v in vals):
                raise TrainingError(f"non-finite loss at epoch {epoch} iter {it}: {vals}; "
                                    + _dump_batch(out_dir, batch, epoch, it))
            terms.total.backward()
            trainable = [p for p in model.parameters() if p.grad is not None]
            if adapter:
                trainable += [p for p in adapter.parameters() if p.grad is not None]
            clip_gradients(trainable, config.grad_clip)
            lr = sgd_step(opt, config, epoch, backbone if frozen else ())
            if da_opt:
                sgd_step(da_opt, config, epoch, schedule=da_lr_at)
            rows.append(",".join([str(epoch), str(it)] + [io.fmt_num(v) for v in vals] + [io.fmt_num(lr)]))
        if out_dir is not None:
            path = out_dir / f"epoch_{epoch:02d}.ckpt"
            io.save_checkpoint(path, model.state_dict())
            if adapter:
                io.save_checkpoint(out_dir / f"epoch_{epoch:02d}_da.ckpt", adapter.state_dict())
            io.atomic_write_text(out_dir / "train_log.csv", "\n".join(rows) + "\n")
            ckpts.append(path)
        log.info("epoch %d done: L_t=%.4f lr=%.2e", epoch, vals[0], lr)
    for p in backbone:
        p.requires_grad = True
    return TrainResult(model, adapter, rows, ckpts)


def load_model(checkpoint: Path, model_config: Optional[ModelConfig] = None) -> SiameseRPN:
    """Rebuild a tracker from a checkpoint, reading ``model_config.json`` beside it when present."""
    checkpoint = Path(checkpoint)
    if model_config is None:
        sidecar = checkpoint.parent / "model_config.json"
        model_config = model_config_from_file(sidecar) if sidecar.exists() else ModelConfig()
    model = SiameseRPN(model_config)
    model.load_state_dict(io.load_checkpoint(checkpoint))
    return model


def model_config_from_file(path: Path) -> ModelConfig:
    import json

    d = json.loads(Path(path).read_text(encoding="utf-8"))
    d["widths"] = tuple(d["widths"])
    d["anchor_ratios"] = tuple(d["anchor_ratios"])
    return ModelConfig(**d)
