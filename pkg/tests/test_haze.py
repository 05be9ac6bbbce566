import hashlib
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dasiam.errors import ConfigurationError, GenerationError, PairingError
from dasiam.haze import (
    EVAL_SAMPLER,
    TRAIN_SAMPLER,
    BetaSampler,
    HazeParams,
    apply_haze,
    haze_corpus,
    haze_dataset,
    transmission,
)
from dasiam.synthseq import generate_corpus

GOLDEN_SHA256 = "0f8d53f7be5c8377a378cdce26ebde15ad30cd7174a662f0d6caa7b72e8a7a4b"


def per_pixel_haze(frame, depth, params):
    """Scalar reference: one pixel and channel at a time."""
    out = np.zeros_like(frame)
    h, w, _ = frame.shape
    for i in range(h):
        for j in range(w):
            metres = float(depth[i, j]) * params.depth_scale + params.depth_offset
            for c in range(3):
                t = math.exp(-metres * params.beta[c])
                v = t * float(frame[i, j, c]) + (1 - t) * params.airlight[c]
                out[i, j, c] = min(255, max(0, math.floor(v + 0.5)))
    return out


def test_transmission_beta_zero_is_one():
    depth = np.random.default_rng(0).uniform(0, 100, (5, 6))
    assert np.all(transmission(depth, HazeParams.uniform(0.0, depth_scale=1.0), 0) == 1.0)


def test_transmission_half_at_ln2():
    t = transmission(np.array([[1.0]]), HazeParams.uniform(math.log(2), depth_scale=1.0), 1)
    assert t[0, 0] == pytest.approx(0.5, abs=1e-15)


def test_transmission_matches_scalar_exp():
    rng = np.random.default_rng(1)
    depth = rng.uniform(0, 90, (7, 9))
    p = HazeParams(beta=(0.01, 0.02, 0.03), depth_scale=0.7, depth_offset=2.0)
    t = transmission(depth, p, 2)
    for i in range(7):
        for j in range(9):
            assert t[i, j] == math.exp(-(depth[i, j] * 0.7 + 2.0) * 0.03)


def test_beta_zero_is_byte_identity():
    rng = np.random.default_rng(2)
    frame = rng.integers(0, 256, (16, 20, 3), dtype=np.uint8)
    out = apply_haze(frame, rng.uniform(0, 50, (16, 20)), HazeParams.uniform(0.0))
    assert out.tobytes() == frame.tobytes()


def test_infinite_depth_limit_is_airlight():
    frame = np.random.default_rng(3).integers(0, 256, (4, 4, 3), dtype=np.uint8)
    out = apply_haze(frame, np.full((4, 4), 1e6), HazeParams(beta=(1.0, 1.0, 1.0), airlight=(240, 100, 7), depth_scale=1.0))
    assert np.all(out == np.array([240, 100, 7], dtype=np.uint8))


def test_half_transmission_rounds_half_up():
    frame = np.full((1, 1, 3), 200, dtype=np.uint8)
    out = apply_haze(frame, np.array([[1.0]]), HazeParams.uniform(math.log(2), airlight=(255, 255, 255), depth_scale=1.0))
    assert out[0, 0, 0] == 228


def test_matches_per_pixel_oracle():
    rng = np.random.default_rng(4)
    frame = rng.integers(0, 256, (12, 10, 3), dtype=np.uint8)
    depth = rng.uniform(0, 200, (12, 10))
    p = HazeParams(beta=(0.004, 0.011, 0.02), airlight=(240, 230, 250), depth_scale=0.5, depth_offset=1.0)
    np.testing.assert_array_equal(apply_haze(frame, depth, p), per_pixel_haze(frame, depth, p))


def test_golden_hash():
    rng = np.random.default_rng(20240601)
    frame = rng.integers(0, 256, (48, 64, 3), dtype=np.uint8)
    depth = rng.uniform(0, 120, (48, 64)).astype(np.float32)
    out = apply_haze(frame, depth, HazeParams(beta=(0.01, 0.02, 0.03), airlight=(240, 235, 230), depth_scale=1.0))
    assert hashlib.sha256(out.tobytes()).hexdigest() == GOLDEN_SHA256


def test_dimension_mismatch():
    with pytest.raises(PairingError):
        apply_haze(np.zeros((4, 4, 3), np.uint8), np.zeros((4, 5)), HazeParams.uniform(0.1))


def test_invalid_params():
    with pytest.raises(ConfigurationError):
        HazeParams.uniform(-0.1)
    with pytest.raises(ConfigurationError):
        HazeParams.uniform(0.1, airlight=(300, 0, 0))


@settings(max_examples=60, deadline=None)
@given(e=st.integers(0, 255), a=st.integers(0, 255), d=st.floats(0, 500),
       b1=st.floats(0, 0.1), b2=st.floats(0, 0.1))
def test_monotone_in_beta_and_bounded(e, a, d, b1, b2):
    lo, hi = sorted((b1, b2))
    frame = np.full((1, 1, 3), e, dtype=np.uint8)
    depth = np.array([[d]])
    v_lo = int(apply_haze(frame, depth, HazeParams.uniform(lo, airlight=a, depth_scale=1.0))[0, 0, 0])
    v_hi = int(apply_haze(frame, depth, HazeParams.uniform(hi, airlight=a, depth_scale=1.0))[0, 0, 0])
    if e < a:
        assert v_lo <= v_hi
    elif e > a:
        assert v_lo >= v_hi
    assert min(e, a) <= v_lo <= max(e, a)
    assert min(e, a) <= v_hi <= max(e, a)


@settings(max_examples=40, deadline=None)
@given(d1=st.floats(0, 300), d2=st.floats(0, 300), beta=st.floats(0, 0.2))
def test_transmission_monotone_in_depth(d1, d2, beta):
    lo, hi = sorted((d1, d2))
    p = HazeParams.uniform(beta, depth_scale=1.0)
    t = transmission(np.array([[lo, hi]]), p, 0)
    assert 0 < t[0, 1] <= t[0, 0] <= 1


@pytest.fixture(scope="module")
def corpus():
    return generate_corpus(3, seed=5)


def test_sampler_zero_is_identity(corpus):
    out = haze_dataset(corpus[0], BetaSampler(0.0, 0.0), seed=1)
    assert out.frames.tobytes() == corpus[0].frames.tobytes()


def test_dataset_determinism(corpus):
    a = haze_dataset(corpus[1], TRAIN_SAMPLER, seed=9)
    b = haze_dataset(corpus[1], TRAIN_SAMPLER, seed=9)
    assert a.frames.tobytes() == b.frames.tobytes()
    assert a.meta["haze"] == b.meta["haze"]


def test_boxes_preserved(corpus):
    for src, out in zip(corpus, haze_corpus(corpus, EVAL_SAMPLER, seed=3)):
        assert np.array_equal(src.boxes, out.boxes)


def test_train_and_eval_betas_disjoint():
    corpus = generate_corpus(6, seed=11)
    train = haze_corpus(corpus, TRAIN_SAMPLER, seed=1)
    evals = haze_corpus(corpus, EVAL_SAMPLER, seed=2)
    train_b = [d.meta["haze"]["beta"][0] for d in train]
    eval_b = [d.meta["haze"]["beta"][0] for d in evals]
    assert all(0.015 <= b <= 0.03 for b in train_b)
    assert all(0.005 <= b <= 0.012 for b in eval_b)
    assert max(eval_b) < min(train_b)


def test_missing_depth_names_frame(corpus):
    ds = corpus[0].replace(depth=None)
    with pytest.raises(GenerationError, match="frame 0"):
        haze_dataset(ds, TRAIN_SAMPLER)
