"""Readers and writers for datasets, depth maps, checkpoints, predictions and configs.

On-disk dataset layout, one directory per sequence::

    <seq>/frames/000000.png
    <seq>/depth/000000.dmap      (optional)
    <seq>/groundtruth.txt        x,y,w,h per line
    <seq>/meta.json

All text is UTF-8 with LF line endings; binary data is little-endian.
"""

from __future__ import annotations

import json
import os
import struct
import tempfile
from pathlib import Path
from typing import Iterable, Mapping

import numpy as np
from PIL import Image

from .data import BBox, SequenceDataset
from .errors import FormatError, IntegrityError, ParseError

DMAP_MAGIC = b"DMAP"
CKPT_MAGIC = b"DATK"
CKPT_VERSION = 1


def fmt_num(v: float) -> str:
    """Shortest text that round-trips the float exactly; integers print without a decimal point."""
    v = float(v)
    if v.is_integer() and abs(v) < 1e15:
        return str(int(v))
    return repr(v)


def atomic_write_bytes(path: Path, payload: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(payload)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def atomic_write_text(path: Path, text: str) -> None:
    atomic_write_bytes(path, text.encode("utf-8"))


# -- depth maps -----------------------------------------------------------

def write_dmap(path: Path, depth: np.ndarray) -> None:
    depth = np.asarray(depth, dtype="<f4")
    h, w = depth.shape
    atomic_write_bytes(path, DMAP_MAGIC + struct.pack("<II", w, h) + depth.tobytes(order="C"))


def read_dmap(path: Path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if len(raw) < 12 or raw[:4] != DMAP_MAGIC:
        raise FormatError(f"{path}: not a DMAP file")
    w, h = struct.unpack("<II", raw[4:12])
    body = raw[12:]
    if len(body) != 4 * w * h:
        raise FormatError(f"{path}: expected {4 * w * h} bytes of raster, found {len(body)}")
    return np.frombuffer(body, dtype="<f4").reshape(h, w).astype(np.float32)


# -- ground truth and predictions ---------------------------------------

def parse_box_line(line: str, path="<string>", line_no: int = 1) -> BBox:
    """Parse ``x,y,w,h`` (or an 8-value polygon, converted to its bounding rectangle)."""
    parts = [p for p in line.replace("\t", ",").replace(" ", ",").split(",") if p != ""]
    try:
        vals = [float(p) for p in parts]
    except ValueError:
        raise ParseError(path, line_no, f"non-numeric value in {line!r}") from None
    if len(vals) == 8:
        xs, ys = vals[0::2], vals[1::2]
        vals = [min(xs), min(ys), max(xs) - min(xs), max(ys) - min(ys)]
    if len(vals) != 4:
        raise ParseError(path, line_no, f"expected 4 or 8 values, got {len(vals)}")
    if not all(np.isfinite(vals)) or vals[2] <= 0 or vals[3] <= 0:
        raise ParseError(path, line_no, f"invalid box {vals}")
    return BBox(*vals)


def read_groundtruth(path: Path) -> np.ndarray:
    lines = Path(path).read_text(encoding="utf-8").split("\n")
    if lines and lines[-1] == "":
        lines.pop()
    return np.array([parse_box_line(ln, path, i + 1).as_tuple() for i, ln in enumerate(lines)],
                    dtype=np.float64).reshape(-1, 4)


def format_boxes(boxes: Iterable) -> str:
    return "".join(",".join(fmt_num(v) for v in b) + "\n" for b in boxes)


def write_predictions(path: Path, boxes, scores) -> None:
    lines = [",".join(fmt_num(v) for v in list(b) + [s]) for b, s in zip(boxes, scores)]
    atomic_write_text(path, "".join(ln + "\n" for ln in lines))


def read_predictions(path: Path) -> tuple[np.ndarray, np.ndarray]:
    boxes, scores = [], []
    text = Path(path).read_text(encoding="utf-8")
    for i, ln in enumerate(text.split("\n")):
        if not ln:
            continue
        parts = ln.split(",")
        if len(parts) != 5:
            raise ParseError(path, i + 1, f"expected x,y,w,h,score, got {ln!r}")
        try:
            vals = [float(p) for p in parts]
        except ValueError:
            raise ParseError(path, i + 1, f"non-numeric value in {ln!r}") from None
        boxes.append(vals[:4])
        scores.append(vals[4])
    return np.array(boxes, dtype=np.float64).reshape(-1, 4), np.array(scores, dtype=np.float64)


# -- datasets -------------------------------------------------------------

def _to_jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _to_jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_to_jsonable(v) for v in obj]
    if isinstance(obj, np.generic):
        return obj.item()
    return obj


def dumps_json(obj) -> str:
    return json.dumps(_to_jsonable(obj), indent=2, sort_keys=True) + "\n"


def save_dataset(dataset: SequenceDataset, root: Path) -> Path:
    seq_dir = Path(root) / dataset.name
    (seq_dir / "frames").mkdir(parents=True, exist_ok=True)
    for i, frame in enumerate(dataset.frames):
        target = seq_dir / "frames" / f"{i:06d}.png"
        tmp = target.with_name(f".{target.name}.tmp")
        Image.fromarray(frame, mode="RGB").save(tmp, format="PNG")
        os.replace(tmp, target)
    if dataset.depth is not None:
        for i, d in enumerate(dataset.depth):
            write_dmap(seq_dir / "depth" / f"{i:06d}.dmap", d)
    atomic_write_text(seq_dir / "groundtruth.txt", format_boxes(dataset.boxes))
    atomic_write_text(seq_dir / "meta.json", dumps_json(dataset.meta))
    return seq_dir


def save_corpus(datasets: Iterable[SequenceDataset], root: Path) -> None:
    for ds in datasets:
        save_dataset(ds, root)


def load_sequence(seq_dir: Path) -> SequenceDataset:
    seq_dir = Path(seq_dir)
    gt_path = seq_dir / "groundtruth.txt"
    if not gt_path.exists():
        raise IntegrityError(f"{seq_dir}: missing groundtruth.txt")
    boxes = read_groundtruth(gt_path)
    frames = []
    for i in range(len(boxes)):
        fp = seq_dir / "frames" / f"{i:06d}.png"
        if not fp.exists():
            raise IntegrityError(f"{seq_dir.name}: missing frame {fp.name}")
        try:
            with Image.open(fp) as im:
                frames.append(np.asarray(im.convert("RGB"), dtype=np.uint8))
        except OSError as exc:
            raise IntegrityError(f"{seq_dir.name}: cannot decode {fp.name}: {exc}") from exc
    extra = sorted((seq_dir / "frames").glob("*.png"))
    if len(extra) != len(boxes):
        raise IntegrityError(f"{seq_dir.name}: {len(extra)} frame files but {len(boxes)} annotations")
    depth = None
    depth_dir = seq_dir / "depth"
    if depth_dir.is_dir():
        maps = []
        for i in range(len(boxes)):
            dp = depth_dir / f"{i:06d}.dmap"
            if not dp.exists():
                raise IntegrityError(f"{seq_dir.name}: missing depth map {dp.name}")
            maps.append(read_dmap(dp))
        depth = np.stack(maps) if maps else None
    meta_path = seq_dir / "meta.json"
    meta = json.loads(meta_path.read_text(encoding="utf-8")) if meta_path.exists() else {}
    return SequenceDataset(seq_dir.name, np.stack(frames), boxes, depth, meta)


def load_dataset(root: Path) -> list[SequenceDataset]:
    """Load every sequence directory under ``root`` in name order."""
    root = Path(root)
    if (root / "groundtruth.txt").exists():
        return [load_sequence(root)]
    dirs = sorted(p for p in root.iterdir() if p.is_dir() and (p / "groundtruth.txt").exists())
    if not dirs:
        raise IntegrityError(f"{root}: no sequence directories found")
    return [load_sequence(d) for d in dirs]


# -- checkpoints ----------------------------------------------------------

def encode_checkpoint(tensors: Mapping[str, np.ndarray]) -> bytes:
    chunks = [CKPT_MAGIC, struct.pack("<II", CKPT_VERSION, len(tensors))]
    for name, arr in tensors.items():
        arr = np.asarray(arr, dtype="<f4")
        raw = name.encode("utf-8")
        chunks.append(struct.pack("<I", len(raw)) + raw)
        chunks.append(struct.pack("<I", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
        chunks.append(np.ascontiguousarray(arr).tobytes())
    return b"".join(chunks)


def decode_checkpoint(raw: bytes, source="<bytes>") -> dict[str, np.ndarray]:
    def take(n):
        nonlocal pos
        if pos + n > len(raw):
            raise FormatError(f"{source}: truncated checkpoint")
        chunk = raw[pos:pos + n]
        pos += n
        return chunk

    pos = 0
    if take(4) != CKPT_MAGIC:
        raise FormatError(f"{source}: bad magic, not a DATK checkpoint")
    version, count = struct.unpack("<II", take(8))
    if version != CKPT_VERSION:
        raise FormatError(f"{source}: unsupported checkpoint version {version}")
    out: dict[str, np.ndarray] = {}
    for _ in range(count):
        (nlen,) = struct.unpack("<I", take(4))
        try:
            name = take(nlen).decode("utf-8")
        except UnicodeDecodeError:
            raise FormatError(f"{source}: tensor name is not UTF-8") from None
        (rank,) = struct.unpack("<I", take(4))
        shape = struct.unpack(f"<{rank}I", take(4 * rank))
        n = int(np.prod(shape)) if rank else 1
        out[name] = np.frombuffer(take(4 * n), dtype="<f4").reshape(shape).astype(np.float32)
    if pos != len(raw):
        raise FormatError(f"{source}: {len(raw) - pos} trailing bytes")
    return out


def save_checkpoint(path: Path, tensors: Mapping[str, np.ndarray]) -> None:
    atomic_write_bytes(path, encode_checkpoint(tensors))


def load_checkpoint(path: Path) -> dict[str, np.ndarray]:
    return decode_checkpoint(Path(path).read_bytes(), source=path)


def inspect_checkpoint(path: Path) -> list[tuple[str, tuple[int, ...]]]:
    return [(name, arr.shape) for name, arr in load_checkpoint(path).items()]


# -- config files ---------------------------------------------------------

def parse_config(text: str, source="<config>") -> dict[str, str]:
    """Flat ``key = value`` lines; ``#`` starts a comment."""
    out: dict[str, str] = {}
    for i, line in enumerate(text.split("\n"), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ParseError(source, i, f"expected key = value, got {line!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        if not key:
            raise ParseError(source, i, "empty key")
        out[key] = value
    return out


def read_config(path: Path) -> dict[str, str]:
    return parse_config(Path(path).read_text(encoding="utf-8"), source=path)


def format_config(values: Mapping[str, object]) -> str:
    return "".join(f"{k} = {v}\n" for k, v in values.items())
