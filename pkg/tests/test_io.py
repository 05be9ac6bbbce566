import numpy as np
import pytest

from dasiam import io
from dasiam.data import BBox
from dasiam.errors import FormatError, IntegrityError, ParseError
from dasiam.synthseq import DefaultSpecSampler, generate_corpus


@pytest.fixture
def corpus():
    return generate_corpus(2, DefaultSpecSampler(frame_size=(48, 56), length=4, size_range=(10, 14), max_amplitude=4),
                           seed=3)


def test_dataset_round_trip(tmp_path, corpus):
    io.save_corpus(corpus, tmp_path)
    loaded = io.load_dataset(tmp_path)
    assert [d.name for d in loaded] == sorted(d.name for d in corpus)
    for a, b in zip(corpus, loaded):
        assert a.frames.tobytes() == b.frames.tobytes()
        assert np.array_equal(a.boxes, b.boxes)
        assert a.depth.tobytes() == b.depth.tobytes()
        assert a.meta == b.meta


def test_missing_frame_named(tmp_path, corpus):
    io.save_dataset(corpus[0], tmp_path)
    (tmp_path / corpus[0].name / "frames" / "000003.png").unlink()
    with pytest.raises(IntegrityError, match="000003.png"):
        io.load_dataset(tmp_path)


def test_count_mismatch(tmp_path, corpus):
    seq = io.save_dataset(corpus[0], tmp_path)
    gt = seq / "groundtruth.txt"
    gt.write_text(gt.read_text() + "1,2,3,4\n")
    with pytest.raises(IntegrityError):
        io.load_dataset(tmp_path)


def test_malformed_line_reports_file_and_line(tmp_path, corpus):
    seq = io.save_dataset(corpus[0], tmp_path)
    gt = seq / "groundtruth.txt"
    lines = gt.read_text().split("\n")
    lines[1] = "1,2,x,4"
    gt.write_text("\n".join(lines))
    with pytest.raises(ParseError) as exc:
        io.load_dataset(tmp_path)
    assert exc.value.line_no == 2
    assert "groundtruth.txt" in str(exc.value)


def test_box_line_format():
    assert io.parse_box_line("10,20,30,40") == BBox(10, 20, 30, 40)


def test_polygon_converted_to_rectangle():
    assert io.parse_box_line("1,2,11,2,11,7,1,7") == BBox(1, 2, 10, 5)


def test_dmap_round_trip(tmp_path):
    d = np.random.default_rng(0).uniform(0, 90, (5, 7)).astype(np.float32)
    io.write_dmap(tmp_path / "a.dmap", d)
    raw = (tmp_path / "a.dmap").read_bytes()
    assert raw[:4] == b"DMAP" and int.from_bytes(raw[4:8], "little") == 7
    assert io.read_dmap(tmp_path / "a.dmap").tobytes() == d.tobytes()


def test_checkpoint_save_load_save_identical(tmp_path):
    rng = np.random.default_rng(1)
    tensors = {"a.weight": rng.standard_normal((3, 2, 3, 3)), "b": rng.standard_normal(4), "c": np.float32(2.5)}
    io.save_checkpoint(tmp_path / "x.ckpt", tensors)
    loaded = io.load_checkpoint(tmp_path / "x.ckpt")
    io.save_checkpoint(tmp_path / "y.ckpt", loaded)
    assert (tmp_path / "x.ckpt").read_bytes() == (tmp_path / "y.ckpt").read_bytes()
    assert list(loaded) == list(tensors)


def test_checkpoint_header_layout(tmp_path):
    io.save_checkpoint(tmp_path / "x.ckpt", {"w": np.ones((2, 3), np.float32)})
    raw = (tmp_path / "x.ckpt").read_bytes()
    assert raw[:4] == b"DATK"
    assert int.from_bytes(raw[4:8], "little") == 1
    assert int.from_bytes(raw[8:12], "little") == 1
    assert len(raw) == 12 + 4 + 1 + 4 + 8 + 24


def test_truncated_checkpoint(tmp_path):
    io.save_checkpoint(tmp_path / "x.ckpt", {"w": np.ones(10)})
    raw = (tmp_path / "x.ckpt").read_bytes()
    (tmp_path / "t.ckpt").write_bytes(raw[:-3])
    with pytest.raises(FormatError):
        io.load_checkpoint(tmp_path / "t.ckpt")


def test_bad_magic(tmp_path):
    (tmp_path / "b.ckpt").write_bytes(b"NOPE" + b"\0" * 8)
    with pytest.raises(FormatError):
        io.load_checkpoint(tmp_path / "b.ckpt")


def test_inspect_lists_every_name(tmp_path):
    names = [f"t{i}" for i in range(7)]
    io.save_checkpoint(tmp_path / "x.ckpt", {n: np.zeros(i + 1) for i, n in enumerate(names)})
    raw = (tmp_path / "x.ckpt").read_bytes()
    assert int.from_bytes(raw[8:12], "little") == 7
    assert [n for n, _ in io.inspect_checkpoint(tmp_path / "x.ckpt")] == names


def test_predictions_round_trip(tmp_path):
    rng = np.random.default_rng(2)
    boxes, scores = rng.uniform(1, 50, (6, 4)), rng.uniform(0, 1, 6)
    io.write_predictions(tmp_path / "s_pred.txt", boxes, scores)
    b2, s2 = io.read_predictions(tmp_path / "s_pred.txt")
    assert np.array_equal(boxes, b2) and np.array_equal(scores, s2)


def test_config_parse_and_round_trip():
    cfg = io.parse_config("# comment\nepochs = 19\nlambda_da=0.1  # trailing\n\n")
    assert cfg == {"epochs": "19", "lambda_da": "0.1"}
    assert io.parse_config(io.format_config(cfg)) == cfg
    with pytest.raises(ParseError):
        io.parse_config("novalue\n")


def test_loading_does_not_modify_files(tmp_path, corpus):
    io.save_corpus(corpus, tmp_path)
    before = {p: p.read_bytes() for p in tmp_path.rglob("*") if p.is_file()}
    io.load_dataset(tmp_path)
    after = {p: p.read_bytes() for p in tmp_path.rglob("*") if p.is_file()}
    assert before == after
