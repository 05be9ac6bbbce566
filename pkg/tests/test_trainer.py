import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from dasiam import io, trainer
from dasiam.autodiff import Parameter, precision
from dasiam.domain import DomainAdapter
from dasiam.errors import ConfigurationError, TrainingError
from dasiam.siamese import ModelConfig, SiameseRPN, make_training_pair, track_sequence
from dasiam.synthseq import SceneSpec, generate_corpus, generate_sequence
from dasiam.trainer import (
    LOG_HEADER, SGD, DomainBatch, PseudoSequence, TrainConfig, da_lr_at, load_model, lr_at, prepare_pseudo_crops,
    clip_proposals, sgd_step, total_loss, train,
)

TINY = ModelConfig(widths=(4, 6, 6), adjust_channels=4, head_hidden=4)


def _short(**kw):
    base = dict(epochs=3, warmup_epochs=1, iters_per_epoch=2, batch_size=2, freeze_backbone_until=1)
    base.update(kw)
    return TrainConfig(**base)


@pytest.fixture(scope="module")
def corpus():
    return generate_corpus(3, seed=11, sampler=None)


@pytest.fixture(scope="module")
def pseudo(corpus):
    # ground-truth boxes as stand-in pseudo-labels keep these tests independent of a trained baseline
    return [PseudoSequence(ds, ds.boxes.copy(), np.ones(len(ds))) for ds in corpus[:2]]


def _batch(corpus, n=2):
    src = [make_training_pair(corpus[0], i, i + 3) for i in range(n)]
    tgt = [make_training_pair(corpus[1], i, i + 2, boxes=corpus[1].boxes) for i in range(n)]
    return DomainBatch(src, tgt)


class TestSchedule:
    def test_warmup_and_end_points(self):
        cfg = TrainConfig()
        assert [lr_at(e, cfg) for e in range(1, 6)] == [1e-3] * 5
        assert lr_at(6, cfg) == 5e-3
        assert lr_at(19, cfg) == pytest.approx(5e-4, rel=1e-12)

    def test_exponential_decay(self):
        cfg = TrainConfig()
        lrs = np.array([lr_at(e, cfg) for e in range(6, 20)])
        ratios = lrs[1:] / lrs[:-1]
        np.testing.assert_allclose(ratios, 0.1 ** (1 / 13), rtol=1e-12)

    def test_domain_module_rate(self):
        cfg = TrainConfig()
        assert [da_lr_at(e, cfg) for e in (1, 5, 6)] == [1e-3, 1e-3, 1e-3]
        assert da_lr_at(19, cfg) == pytest.approx(1e-4, rel=1e-12)
        for e in range(6, 20):
            assert da_lr_at(e, cfg) / lr_at(e, cfg) == pytest.approx(0.2, rel=1e-12)


class TestSGD:
    def test_single_step_on_square(self):
        w = Parameter(np.array(1.0))
        w.grad = 2 * w.data
        SGD([w], momentum=0.0).step(0.1)
        assert float(w.data) == pytest.approx(0.8, abs=1e-7)

    def test_momentum_matches_scalar_recursion(self):
        with precision(np.float64):
            w = Parameter(np.array(1.5))
        opt = SGD([w], momentum=0.9, weight_decay=0.01)
        ref_w, ref_v = 1.5, 0.0
        for _ in range(3):
            w.grad = 2 * w.data
            opt.step(0.05)
            g = 2 * ref_w + 0.01 * ref_w
            ref_v = 0.9 * ref_v + g
            ref_w = ref_w - 0.05 * ref_v
            assert float(w.data) == pytest.approx(ref_w, abs=1e-15)

    def test_skip_and_missing_grad_untouched(self):
        a, b = Parameter(np.ones(3)), Parameter(np.ones(3))
        a.grad = np.ones(3, dtype=a.data.dtype)
        SGD([a, b]).step(0.1, skip=frozenset({id(a)}))
        np.testing.assert_array_equal(a.data, 1.0)
        np.testing.assert_array_equal(b.data, 1.0)

    def test_lr_scale_per_parameter(self):
        a, b = Parameter(np.array(1.0)), Parameter(np.array(1.0))
        for q in (a, b):
            q.grad = np.array(1.0, dtype=q.data.dtype)
        SGD([a, b], momentum=0.0, lr_scale={id(a): 0.1}).step(0.5)
        assert float(a.data) == pytest.approx(0.95, abs=1e-7)
        assert float(b.data) == pytest.approx(0.5, abs=1e-7)

    def test_sgd_step_uses_schedule(self):
        w = Parameter(np.array(1.0))
        w.grad = np.array(1.0, dtype=w.data.dtype)
        lr = sgd_step(SGD([w], momentum=0.0), TrainConfig(), epoch=19)
        assert lr == pytest.approx(5e-4)
        assert float(w.data) == pytest.approx(1 - 5e-4, abs=1e-7)


class TestTotalLoss:
    def test_zero_lambda_is_tracking_loss_bitwise(self, corpus):
        model, adapter = SiameseRPN(TINY), DomainAdapter(TINY.widths, seed=1)
        terms = total_loss(model, adapter, _batch(corpus), lambda_da=0.0)
        assert terms.total.data.tobytes() == terms.tracking.data.tobytes()
        plain = total_loss(model, None, DomainBatch(_batch(corpus).source, []), lambda_da=0.0)
        assert plain.total.data.tobytes() == terms.total.data.tobytes()

    def test_half_probability_classifiers(self, corpus):
        model, adapter = SiameseRPN(TINY), DomainAdapter(TINY.widths, seed=1)
        for clf in adapter.pixel:
            clf.conv2.weight.data[:] = 0
            clf.conv2.bias.data[:] = 0
        for clf in adapter.semantic:
            clf.fc2.weight.data[:] = 0
            clf.fc2.bias.data[:] = 0
        lam = 0.1
        terms = total_loss(model, adapter, _batch(corpus), lambda_da=lam)
        # 3 levels x (PDA + SDA), each ln 2 after averaging over the two domains
        assert terms.pda.item() == pytest.approx(3 * math.log(2), rel=1e-5)
        assert terms.sda.item() == pytest.approx(3 * math.log(2), rel=1e-5)
        assert terms.total.item() - terms.tracking.item() == pytest.approx(lam * 6 * math.log(2), rel=1e-5)

    def test_gradient_matches_finite_differences(self, corpus, monkeypatch):
        # proposals are not differentiated through, so the oracle holds them fixed too
        cache, calls = [], [0]
        real = trainer._rois_for

        def frozen_rois(cls, reg, model, n_roi):
            # each forward asks for source then target proposals
            if len(cache) < 2:
                cache.append(real(cls, reg, model, n_roi))
            calls[0] += 1
            return cache[(calls[0] - 1) % 2]

        monkeypatch.setattr(trainer, "_rois_for", frozen_rois)
        with precision(np.float64):
            model = SiameseRPN(TINY)
            adapter = DomainAdapter(TINY.widths, seed=1, hidden=4)
            batch = _batch(corpus, n=1)
            params = [model.backbone.block3.conv1.weight, model.head_parameters()[0],
                      adapter.pixel[1].conv1.weight, adapter.semantic[2].fc1.weight]

            def loss():
                return total_loss(model, adapter, batch, lambda_da=0.5, lambda_grl=None).total

            model.zero_grad()
            adapter.zero_grad()
            loss().backward()
            rng = np.random.default_rng(0)
            for p in params:
                for _ in range(3):
                    idx = tuple(int(rng.integers(s)) for s in p.shape)
                    old = p.data[idx]
                    p.data[idx] = old + 1e-6
                    up = loss().item()
                    p.data[idx] = old - 1e-6
                    down = loss().item()
                    p.data[idx] = old
                    num = (up - down) / 2e-6
                    assert p.grad[idx] == pytest.approx(num, rel=1e-4, abs=1e-8)

    def test_target_pairs_must_be_unlabelled(self, corpus):
        src = [make_training_pair(corpus[0], 0, 2)]
        with pytest.raises(ConfigurationError):
            DomainBatch(src, src)


class TestProposals:
    def test_inside_boxes_unchanged(self):
        boxes = np.array([[10.0, 20.0, 30.0, 40.0], [0.0, 0.0, 128.0, 128.0]])
        np.testing.assert_array_equal(clip_proposals(boxes, 128, 8), boxes)

    @given(st.lists(st.floats(-1e6, 1e6), min_size=4, max_size=4))
    def test_any_box_lands_inside_with_min_side(self, raw):
        x, y, w, h = raw
        out = clip_proposals(np.array([[x, y, abs(w), abs(h)]]), 128.0, 8.0)[0]
        assert out[2] >= 8 and out[3] >= 8
        assert out[0] >= 0 and out[1] >= 0
        assert out[0] + out[2] <= 128 + 1e-9 and out[1] + out[3] <= 128 + 1e-9


class TestTrainLoop:
    def test_outputs_and_log(self, corpus, pseudo, tmp_path):
        res = train(corpus, pseudo, _short(), TINY, out_dir=tmp_path)
        names = sorted(p.name for p in tmp_path.iterdir())
        for e in (1, 2, 3):
            assert f"epoch_{e:02d}.ckpt" in names and f"epoch_{e:02d}_da.ckpt" in names
        lines = (tmp_path / "train_log.csv").read_text().splitlines()
        assert lines[0] == LOG_HEADER == "epoch,iter,L_t,L_pda,L_sda,L_total,lr"
        assert len(lines) == 1 + 3 * 2
        assert res.log_rows == lines
        reloaded = load_model(tmp_path / "epoch_03.ckpt")
        assert reloaded.config == TINY
        for k, v in res.model.state_dict().items():
            np.testing.assert_array_equal(reloaded.state_dict()[k], v)

    def test_backbone_bytes_frozen(self, corpus, pseudo, tmp_path):
        init = SiameseRPN(TINY).state_dict()
        train(corpus, pseudo, _short(freeze_backbone_until=2), TINY, out_dir=tmp_path)
        ckpt = {e: io.load_checkpoint(tmp_path / f"epoch_{e:02d}.ckpt") for e in (1, 2, 3)}
        backbone = [k for k in init if k.startswith("backbone.")]
        for k in backbone:
            assert ckpt[1][k].tobytes() == init[k].tobytes()
            assert ckpt[2][k].tobytes() == init[k].tobytes()
        assert any(ckpt[3][k].tobytes() != init[k].tobytes() for k in backbone)
        head = [k for k in init if not k.startswith("backbone.")]
        assert any(ckpt[1][k].tobytes() != init[k].tobytes() for k in head)

    def test_zero_lambda_reduces_to_plain_training(self, corpus, pseudo, tmp_path):
        cfg = _short(epochs=2, freeze_backbone_until=0)
        train(corpus, (), TrainConfig(**{**cfg.to_dict(), "enable_da": False}), TINY, out_dir=tmp_path / "plain")
        train(corpus, pseudo, TrainConfig(**{**cfg.to_dict(), "lambda_da": 0.0}), TINY, out_dir=tmp_path / "zero")
        for e in (1, 2):
            a = (tmp_path / "plain" / f"epoch_{e:02d}.ckpt").read_bytes()
            b = (tmp_path / "zero" / f"epoch_{e:02d}.ckpt").read_bytes()
            assert a == b

    def test_deterministic(self, corpus, pseudo):
        a = train(corpus, pseudo, _short(epochs=2), TINY)
        b = train(corpus, pseudo, _short(epochs=2), TINY)
        assert a.log_rows == b.log_rows

    def test_domain_balance(self, corpus, pseudo, monkeypatch):
        seen = []
        real = trainer.total_loss

        def spy(model, adapter, batch, *args, **kw):
            seen.append((len(batch.source), len(batch.target)))
            return real(model, adapter, batch, *args, **kw)

        monkeypatch.setattr(trainer, "total_loss", spy)
        train(corpus, pseudo, _short(batch_size=3), TINY)
        assert seen == [(3, 3)] * 6

    def test_nan_loss_aborts_with_dump(self, corpus, tmp_path, monkeypatch):
        real = trainer.tracking_loss

        def poisoned(cls, reg, *a, **kw):
            l_t, l_c, l_r = real(cls, reg, *a, **kw)
            return l_t * float("nan"), l_c, l_r

        monkeypatch.setattr(trainer, "tracking_loss", poisoned)
        with pytest.raises(TrainingError, match="non-finite"):
            train(corpus, (), _short(enable_da=False), TINY, out_dir=tmp_path)
        dumps = list(tmp_path.glob("nan_batch_*.npz"))
        assert len(dumps) == 1
        with np.load(dumps[0]) as z:
            assert "source_search_0" in z.files

    def test_non_finite_forward_hits_guard(self, corpus, pseudo, tmp_path, monkeypatch):
        # a diverged regression branch must reach the guard, not crash ROI pooling
        real = SiameseRPN.forward

        def poisoned(self, z, x):
            out, zf, xf = real(self, z, x)
            out.reg.data[...] = np.nan
            return out, zf, xf

        monkeypatch.setattr(SiameseRPN, "forward", poisoned)
        with pytest.raises(TrainingError, match="non-finite"):
            train(corpus, pseudo, _short(), TINY, out_dir=tmp_path)
        assert len(list(tmp_path.glob("nan_batch_*.npz"))) == 1

    def test_da_without_targets_rejected(self, corpus):
        with pytest.raises(ConfigurationError):
            train(corpus, (), _short(), TINY)

    def test_smoke_loss_decreases(self):
        ds = generate_sequence(SceneSpec(length=20), 3)
        cfg = TrainConfig(epochs=6, warmup_epochs=0, iters_per_epoch=12, batch_size=2, freeze_backbone_until=0,
                          enable_da=False, max_shift=0.0, max_gap=1, base_lr=5e-3, final_lr=2e-3)
        res = train([ds], (), cfg)
        rows = [r.split(",") for r in res.log_rows[1:]]
        per_epoch = [np.mean([float(r[2]) for r in rows if int(r[0]) == e]) for e in range(1, 7)]
        assert all(b < a for a, b in zip(per_epoch[1:], per_epoch[2:]))
        assert per_epoch[-1] < 0.5 * per_epoch[0]


class TestPseudoCrops:
    def test_skip_count_matches_recount(self):
        model = SiameseRPN(TINY)
        seqs = generate_corpus(4, seed=5)
        maxes = [track_sequence(model, ds)[1][1:].max() for ds in seqs]
        thr = float(np.median(maxes))
        pool, skipped = prepare_pseudo_crops(seqs, model, threshold=thr)
        expected = [ds.name for ds, m in zip(seqs, maxes) if m < thr]
        assert skipped == expected
        assert len(pool) + len(skipped) == len(seqs)
        assert all(p.provenance["threshold"] == thr for p in pool)

    def test_deterministic_and_unsupervised(self, corpus):
        model = SiameseRPN(TINY)
        a, _ = prepare_pseudo_crops(corpus[:1], model, threshold=0.0)
        b, _ = prepare_pseudo_crops(corpus[:1], model, threshold=0.0)
        np.testing.assert_array_equal(a[0].boxes, b[0].boxes)
        pair = make_training_pair(a[0].dataset, 0, 3, boxes=a[0].boxes)
        assert not pair.has_labels

    def test_perfect_baseline_gives_label_crops(self, corpus):
        ds = corpus[0]
        labelled = make_training_pair(ds, 1, 4)
        pseudo = make_training_pair(ds, 1, 4, boxes=ds.boxes)
        np.testing.assert_array_equal(labelled.template, pseudo.template)
        np.testing.assert_array_equal(labelled.search, pseudo.search)


class TestConfig:
    def test_from_strings(self):
        cfg = TrainConfig.from_mapping({"epochs": "7", "lambda_da": "0.01", "enable_da": "false", "warmup_epochs": "2"})
        assert cfg.epochs == 7 and cfg.lambda_da == 0.01 and cfg.enable_da is False

    @pytest.mark.parametrize("values", [{"epochz": "3"}, {"epochs": "three"}, {"enable_da": "maybe"},
                                        {"lambda_da": "-1"}, {"warmup_epochs": "19"}, {"base_lr": "0"}])
    def test_rejected(self, values):
        with pytest.raises(ConfigurationError):
            TrainConfig.from_mapping(values)

    def test_round_trip(self):
        cfg = TrainConfig(lambda_da=1.0, seed=4)
        assert TrainConfig.from_mapping(cfg.to_dict()) == cfg
