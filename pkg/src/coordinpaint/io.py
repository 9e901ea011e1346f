"""File formats (UVM1 uv maps, CKPT checkpoints, RGB8 PNG) and dataset discovery.

UVM1 layout, little-endian::

    b"UVM1" | width u32 | height u32 | H*W records of (u f32, v f32, valid f32)

CKPT layout, little-endian::

    b"CKPT" | version u32 | entry count u32 |
    per entry: name length u32, UTF-8 name, rank u32, rank x extent u32, f32 payload |
    CRC32 u32 of every byte between the header and the CRC
"""

from __future__ import annotations

import hashlib
import json
import queue
import re
import struct
import threading
import zlib
from collections import OrderedDict
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Iterable, Iterator, Optional

import numpy as np
from PIL import Image

from .autodiff import Tensor
from .networks import NetworkParams
from .warp import UvMap

UVM_MAGIC = b"UVM1"
CKPT_MAGIC = b"CKPT"
CKPT_VERSION = 1


class FormatError(ValueError):
    """Malformed, truncated or corrupted file."""


# -- UVM1 -------------------------------------------------------------------------


def encode_uvm(uvmap: UvMap) -> bytes:
    h, w = uvmap.height, uvmap.width
    rec = np.stack([uvmap.u, uvmap.v, uvmap.valid.astype(np.float32)], axis=-1).astype("<f4")
    return UVM_MAGIC + struct.pack("<II", w, h) + rec.tobytes()


def decode_uvm(data: bytes) -> UvMap:
    if len(data) < 12:
        raise FormatError("truncated header")
    if data[:4] != UVM_MAGIC:
        raise FormatError(f"bad magic {data[:4]!r}, expected {UVM_MAGIC!r}")
    w, h = struct.unpack("<II", data[4:12])
    expected = 12 + 12 * w * h
    if len(data) < expected:
        raise FormatError("truncated payload")
    if len(data) > expected:
        raise FormatError(f"trailing bytes: expected {expected}, got {len(data)}")
    rec = np.frombuffer(data, dtype="<f4", offset=12).reshape(h, w, 3)
    valid = rec[..., 2]
    if not np.isin(valid, (0.0, 1.0)).all():
        raise FormatError("valid flags must be 0 or 1")
    return UvMap(rec[..., 0].astype(np.float32), rec[..., 1].astype(np.float32), valid == 1.0)


def write_uvm(path, uvmap: UvMap) -> None:
    Path(path).write_bytes(encode_uvm(uvmap))


def read_uvm(path) -> UvMap:
    return decode_uvm(Path(path).read_bytes())


# -- PNG ----------------------------------------------------------------------------


def write_png(path, image: np.ndarray) -> None:
    """Write a (3, H, W) image in [0, 1] as 8-bit RGB."""
    image = np.asarray(image)
    if image.ndim != 3 or image.shape[0] != 3:
        raise ValueError(f"expected a (3, H, W) image, got {image.shape}")
    arr = np.round(np.clip(image, 0, 1) * 255).astype(np.uint8).transpose(1, 2, 0)
    Image.fromarray(arr, mode="RGB").save(path, format="PNG")


def read_png(path) -> np.ndarray:
    """Read an 8-bit RGB PNG as a (3, H, W) float32 array in [0, 1]."""
    with Image.open(path) as im:
        if im.format != "PNG":
            raise FormatError(f"{path}: not a PNG file")
        if im.mode != "RGB":
            raise FormatError(f"{path}: expected 8-bit RGB, got mode {im.mode}")
        arr = np.asarray(im, dtype=np.uint8)
    return (arr.transpose(2, 0, 1).astype(np.float32) / 255.0)


def write_mask_png(path, mask: np.ndarray) -> None:
    m = np.asarray(mask, bool).astype(np.float32)
    write_png(path, np.stack([m, m, m]))


def read_mask_png(path) -> np.ndarray:
    return read_png(path).mean(axis=0) > 0.5


# -- CKPT ----------------------------------------------------------------------------


def encode_checkpoint(params: "OrderedDict[str, np.ndarray] | NetworkParams") -> bytes:
    body = bytearray()
    for name, value in params.items():
        arr = np.asarray(value.data if isinstance(value, Tensor) else value)
        raw = name.encode("utf-8")
        body += struct.pack("<I", len(raw)) + raw
        body += struct.pack("<I", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape)
        body += np.ascontiguousarray(arr, dtype="<f4").tobytes()
    header = CKPT_MAGIC + struct.pack("<II", CKPT_VERSION, len(params))
    return header + bytes(body) + struct.pack("<I", zlib.crc32(body) & 0xFFFFFFFF)


def decode_checkpoint(data: bytes) -> "OrderedDict[str, np.ndarray]":
    if len(data) < 16:
        raise FormatError("truncated checkpoint")
    if data[:4] != CKPT_MAGIC:
        raise FormatError(f"bad magic {data[:4]!r}, expected {CKPT_MAGIC!r}")
    version, count = struct.unpack("<II", data[4:12])
    if version != CKPT_VERSION:
        raise FormatError(f"unsupported checkpoint version {version}")
    body = data[12:-4]
    (crc,) = struct.unpack("<I", data[-4:])
    if zlib.crc32(body) & 0xFFFFFFFF != crc:
        raise FormatError("CRC mismatch: checkpoint payload is corrupted")
    out: "OrderedDict[str, np.ndarray]" = OrderedDict()
    pos = 0

    def take(n):
        nonlocal pos
        if pos + n > len(body):
            raise FormatError("truncated payload")
        chunk = body[pos : pos + n]
        pos += n
        return chunk

    for _ in range(count):
        (nlen,) = struct.unpack("<I", take(4))
        name = take(nlen).decode("utf-8")
        (rank,) = struct.unpack("<I", take(4))
        shape = struct.unpack(f"<{rank}I", take(4 * rank))
        size = int(np.prod(shape)) if rank else 1
        arr = np.frombuffer(take(4 * size), dtype="<f4").reshape(shape).astype(np.float32)
        if name in out:
            raise FormatError(f"duplicate entry {name!r}")
        out[name] = arr
    if pos != len(body):
        raise FormatError("unexpected bytes after the last entry")
    return out


def save_checkpoint(path, params, config: Optional[dict] = None) -> None:
    """Write parameters, plus ``<path>.json`` holding the run configuration when given."""
    path = Path(path)
    path.write_bytes(encode_checkpoint(params))
    if config is not None:
        Path(str(path) + ".json").write_text(json.dumps(config, indent=2, sort_keys=True))


def load_checkpoint(path) -> "OrderedDict[str, np.ndarray]":
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    return decode_checkpoint(path.read_bytes())


def load_checkpoint_config(path) -> Optional[dict]:
    side = Path(str(path) + ".json")
    return json.loads(side.read_text()) if side.exists() else None


def params_from_arrays(arrays, prefix: str = "", requires_grad: bool = True) -> NetworkParams:
    return NetworkParams(
        (k, Tensor(v, requires_grad=requires_grad, dtype=np.float32, name=k))
        for k, v in arrays.items()
        if k.startswith(prefix)
    )


# -- dataset --------------------------------------------------------------------------

_NAME = re.compile(r"^(?P<id>.+)_(?P<pose>[^_]+)\.png$")


@dataclass(frozen=True)
class PairRecord:
    subject: str
    source_pose: str
    target_pose: str
    source_image: Path
    source_uvm: Path
    target_image: Path
    target_uvm: Path
    split: str


def split_of(subject: str, test_fraction: float = 0.1) -> str:
    """Stable train/test assignment from a hash of the subject id."""
    h = int.from_bytes(hashlib.sha256(subject.encode("utf-8")).digest()[:8], "big")
    return "test" if (h % 10_000) < test_fraction * 10_000 else "train"


def dataset_index(directory, test_fraction: float = 0.1) -> list:
    """All ordered (source, target) pose pairs of each subject in ``directory``.

    Views are ``<id>_<pose>.png`` with a matching ``<id>_<pose>.uvm``; views
    without a uv map are skipped. Ordering is by subject, then source pose,
    then target pose.
    """
    directory = Path(directory)
    views: dict = {}
    for png in sorted(directory.glob("*.png")):
        m = _NAME.match(png.name)
        if not m:
            continue
        uvm = png.with_suffix(".uvm")
        if not uvm.exists():
            continue
        views.setdefault(m.group("id"), []).append((m.group("pose"), png, uvm))
    records = []
    for subject in sorted(views):
        poses = sorted(views[subject])
        split = split_of(subject, test_fraction)
        for sp, simg, suvm in poses:
            for tp, timg, tuvm in poses:
                if sp == tp:
                    continue
                records.append(PairRecord(subject, sp, tp, simg, suvm, timg, tuvm, split))
    return records


class Prefetcher:
    """Prepare items on a background thread, at most ``depth`` ahead, in FIFO order."""

    _DONE = object()

    def __init__(self, producer: Callable[[int], object], count: int, depth: int = 2):
        if depth < 1:
            raise ValueError("depth must be >= 1")
        self._queue: queue.Queue = queue.Queue(maxsize=depth)
        self._error: Optional[BaseException] = None
        self._stop = threading.Event()
        self._thread = threading.Thread(target=self._run, args=(producer, count), daemon=True)
        self._thread.start()

    def _run(self, producer, count):
        try:
            for i in range(count):
                if self._stop.is_set():
                    return
                item = producer(i)
                while not self._stop.is_set():
                    try:
                        self._queue.put(item, timeout=0.1)
                        break
                    except queue.Full:
                        continue
        except BaseException as exc:  # re-raised on the consumer side
            self._error = exc
        finally:
            self._queue.put(self._DONE)

    def __iter__(self) -> Iterator:
        while True:
            item = self._queue.get()
            if item is self._DONE:
                if self._error is not None:
                    raise self._error
                return
            yield item

    def close(self) -> None:
        self._stop.set()
