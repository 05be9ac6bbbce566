"""Seeded desk-scale experiments: probe calibration, domain confusion, haze degradation and recovery."""

from __future__ import annotations

import dataclasses
import logging
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .autodiff import Linear, Tensor, ops
from .domain import a_distance, two_gaussians
from .haze import EVAL_BETA_RANGE, TRAIN_BETA_RANGE, BetaSampler, haze_corpus
from .metrics import otb_report
from .siamese.crops import crop_and_resize, template_side, to_input
from .siamese.model import ModelConfig
from .siamese.tracker import TrackerConfig, track_sequence
from .synthseq import DefaultSpecSampler, generate_corpus
from .trainer import TrainConfig, prepare_pseudo_crops, train

log = logging.getLogger(__name__)


def probe_calibration(seeds=range(5), n: int = 200, dim: int = 16) -> dict:
    """Mean A-distance for identical clouds and for tight clusters with means +/-5 apart."""
    same = [a_distance(*two_gaussians(n, dim, 0.0, 1.0, seed=s), seed=s) for s in seeds]
    apart = [a_distance(*two_gaussians(n, dim, 10.0, 0.1, seed=s), seed=s) for s in seeds]
    return {"identical": float(np.mean(same)), "separated": float(np.mean(apart)),
            "identical_runs": same, "separated_runs": apart}


@dataclass(frozen=True)
class ConfusionConfig:
    n: int = 300
    dim: int = 8
    hidden: int = 16
    shift: float = 3.0
    steps: int = 3000
    lr: float = 0.05
    momentum: float = 0.9


def confusion_run(seed: int, lambda_grl: float, cfg: ConfusionConfig = ConfusionConfig()) -> dict:
    """Train feature extractor + task head + domain head on two shifted Gaussians; measure A-distance.

    Source and target share the input distribution except for a mean shift
    along a task-irrelevant axis; only source labels are used. With
    ``lambda_grl=0`` the domain head still trains but cannot influence the features.
    """
    rng = np.random.default_rng(seed)
    xs = rng.normal(size=(cfg.n, cfg.dim))
    xt = rng.normal(size=(cfg.n, cfg.dim))
    xt[:, 1] += cfg.shift
    ys = (xs[:, 0] > 0).astype(np.float64)[:, None]
    init = np.random.default_rng(seed + 1000)
    feat = Linear(init, cfg.dim, cfg.hidden)
    task = Linear(init, cfg.hidden, 1)
    d1 = Linear(init, cfg.hidden, 32)
    d2 = Linear(init, 32, 1)
    params = feat.parameters() + task.parameters() + d1.parameters() + d2.parameters()
    bufs = [np.zeros_like(p.data) for p in params]
    x = Tensor(np.concatenate([xs, xt]))
    dom = np.concatenate([np.zeros(cfg.n), np.ones(cfg.n)])[:, None]
    for _ in range(cfg.steps):
        for p in params:
            p.grad = None
        f = ops.relu(feat(x))
        l_task = ops.binary_cross_entropy(ops.sigmoid(task(f[:cfg.n])), ys)
        l_dom = ops.binary_cross_entropy(ops.sigmoid(d2(ops.relu(d1(ops.grad_reverse(f, lambda_grl))))), dom)
        (l_task + l_dom).backward()
        for p, b in zip(params, bufs):
            b *= cfg.momentum
            b += p.grad
            p.data = p.data - cfg.lr * b
    f = ops.relu(feat(x)).data
    acc = float(((task(Tensor(f[:cfg.n])).data > 0) == (ys > 0.5)).mean())
    return {"a_distance": a_distance(f[:cfg.n], f[cfg.n:], seed=seed), "source_accuracy": acc}


def domain_confusion(seeds=range(5), cfg: ConfusionConfig = ConfusionConfig()) -> dict:
    rows = []
    for s in seeds:
        control = confusion_run(s, 0.0, cfg)
        adv = confusion_run(s, 1.0, cfg)
        red = 1.0 - adv["a_distance"] / control["a_distance"] if control["a_distance"] > 0 else 0.0
        rows.append({"seed": s, "control": control["a_distance"], "adversarial": adv["a_distance"],
                     "reduction": red, "adversarial_accuracy": adv["source_accuracy"]})
    return {"runs": rows, "mean_reduction": float(np.mean([r["reduction"] for r in rows])),
            "min_reduction": float(min(r["reduction"] for r in rows))}


# -- tracking experiments ------------------------------------------------------

# Synthetic depth is metric, so the experiments haze with depth_scale=1 instead of the
# percentile normalisation meant for unitless depth. Evaluation scenes sit far away under
# the light evaluation fog; unlabelled target-domain scenes sit closer under the denser
# training fog, so both see comparable optical thickness beta*d (about 0.5 to 2.4).
EVAL_SCENE_DEPTH = {"target": (100.0, 200.0), "background": (100.0, 250.0)}
TARGET_SCENE_DEPTH = {"target": (40.0, 80.0), "background": (40.0, 100.0)}


@dataclass(frozen=True)
class TrackingExperiment:
    n_train: int = 40
    n_eval: int = 10
    n_target: int = 20
    eval_depth: dict = field(default_factory=lambda: dict(EVAL_SCENE_DEPTH))
    target_depth: dict = field(default_factory=lambda: dict(TARGET_SCENE_DEPTH))
    train: TrainConfig = TrainConfig()
    model: ModelConfig = ModelConfig()
    tracker: TrackerConfig = TrackerConfig()
    eval_haze: BetaSampler = BetaSampler(*EVAL_BETA_RANGE, depth_scale=1.0)
    target_haze: BetaSampler = BetaSampler(*TRAIN_BETA_RANGE, depth_scale=1.0)


def _sampler(depth: dict) -> DefaultSpecSampler:
    return DefaultSpecSampler(target_depth_range=tuple(depth["target"]),
                              extra={"background_depth": tuple(depth["background"])})


def build_corpora(seed: int, exp: TrackingExperiment) -> dict:
    """Source, held-out clean, held-out hazed and unlabelled hazed target corpora, all seeded from ``seed``.

    Depth settings do not change clean pixels, so source and clean-eval
    frames are the same whatever the depth model.
    """
    base = np.random.SeedSequence(seed).generate_state(4)
    eval_sampler = _sampler(exp.eval_depth)
    source = generate_corpus(exp.n_train, eval_sampler, int(base[0]), prefix="src")
    clean = generate_corpus(exp.n_eval, eval_sampler, int(base[1]), prefix="eval")
    hazed = haze_corpus(clean, exp.eval_haze, int(base[2]))
    target = haze_corpus(generate_corpus(exp.n_target, _sampler(exp.target_depth), int(base[3]), prefix="tgt"),
                         exp.target_haze, int(base[3]) + 1)
    return {"source": source, "clean": clean, "hazed": hazed, "target": target}


def target_features(model, datasets, level: int = -1, every: int = 5, flatten: bool = False) -> np.ndarray:
    """Backbone features of target-centred template crops, one row per sampled frame.

    Rows are spatial means over the chosen level unless ``flatten`` keeps the whole map.
    """
    rows = []
    size = model.config.template_size
    for ds in datasets:
        for t in range(0, len(ds), every):
            x, y, w, h = ds.boxes[t]
            crop = crop_and_resize(ds.frames[t], x + w / 2, y + h / 2, template_side(w, h), size)
            feat = model.extract_features(Tensor(to_input(crop)))[level].data[0]
            rows.append(feat.reshape(-1) if flatten else feat.mean(axis=(1, 2)))
    return np.stack(rows).astype(np.float64)


def evaluate_auc(model, datasets, tracker: TrackerConfig = TrackerConfig()) -> float:
    preds = {ds.name: track_sequence(model, ds, tracker)[0] for ds in datasets}
    gts = {ds.name: ds.boxes for ds in datasets}
    return otb_report(preds, gts)["aggregate"]["AUC"]


def tracking_experiment(seed: int, exp: TrackingExperiment = TrackingExperiment(), with_da: bool = True) -> dict:
    """Baseline (no DA) and optionally DA training for one seed; success AUC on clean and hazed eval sets."""
    corpora = build_corpora(seed, exp)
    base_cfg = dataclasses.replace(exp.train, seed=seed, enable_da=False)
    baseline = train(corpora["source"], config=base_cfg, model_config=exp.model).model
    out = {"seed": seed,
           "baseline_clean": evaluate_auc(baseline, corpora["clean"], exp.tracker),
           "baseline_hazed": evaluate_auc(baseline, corpora["hazed"], exp.tracker)}
    if with_da:
        pool, skipped = prepare_pseudo_crops(corpora["target"], baseline, exp.train.pseudo_threshold, exp.tracker)
        da_cfg = dataclasses.replace(exp.train, seed=seed, enable_da=True)
        adapted = train(corpora["source"], pool, config=da_cfg, model_config=exp.model).model
        out.update({"da_clean": evaluate_auc(adapted, corpora["clean"], exp.tracker),
                    "da_hazed": evaluate_auc(adapted, corpora["hazed"], exp.tracker),
                    "skipped_targets": skipped})
    return out
