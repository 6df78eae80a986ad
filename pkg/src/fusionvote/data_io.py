"""
Datasets, the synthetic face-like pattern generator, and the binary file
formats for datasets and checkpoints.

Dataset file (little-endian)::

    magic      8 bytes   b"FVDSET\\x00\\x00"
    version    u32
    classes    u32
    count      u32       N
    channels   u32
    height     u32
    width      u32
    labels     N x u16
    pixels     N*channels*height*width x u8   (value / 255)

Checkpoint file (little-endian)::

    magic       8 bytes  b"FVCKPT\\x00\\x00"
    version     u32
    header_len  u32
    header      UTF-8 JSON: model config, tensor manifest (name, shape,
                dtype, offset, nbytes relative to the blob), metadata
    blob        raw little-endian float tensors
"""
from __future__ import annotations

import json
import math
import os
import struct
import tempfile
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from filelock import FileLock

from . import nn_core as nn
from .errors import ConfigurationError, FormatError, InputError
from .model_zoo import NetworkSpec, NetworkState

DATASET_MAGIC = b"FVDSET\x00\x00"
CHECKPOINT_MAGIC = b"FVCKPT\x00\x00"
DATASET_VERSION = 1
CHECKPOINT_VERSION = 1
_DATASET_HEADER = struct.Struct("<6I")


@dataclass
class DatasetBundle:
    images: np.ndarray  # [N, channels, H, W], values k/255
    labels: np.ndarray  # [N] int64
    class_names: tuple[str, ...]
    split: str = "train"

    def __post_init__(self):
        self.images = np.asarray(self.images)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        self.validate()

    @property
    def classes(self) -> int:
        return len(self.class_names)

    @property
    def counts(self) -> np.ndarray:
        return np.bincount(self.labels, minlength=self.classes)

    @property
    def image_shape(self) -> tuple[int, int, int]:
        return tuple(self.images.shape[1:])  # type: ignore[return-value]

    def __len__(self) -> int:
        return len(self.labels)

    def validate(self) -> None:
        if self.images.ndim != 4:
            raise InputError(f"images must be [N, channels, H, W], got {self.images.shape}")
        if len(self.images) != len(self.labels):
            raise InputError(f"{len(self.images)} images but {len(self.labels)} labels")
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.classes):
            raise InputError(f"label out of range for {self.classes} classes")
        if self.images.size and (self.images.min() < 0 or self.images.max() > 1):
            raise InputError("pixel values must lie in [0, 1]")


def default_class_names(classes: int) -> tuple[str, ...]:
    return tuple(f"class{c}" for c in range(classes))


# ---------------------------------------------------------------------------
# Synthetic generator
# ---------------------------------------------------------------------------

def _stroke(yy, xx, p0, p1, width):
    """Gaussian-profile line segment from p0 to p1 (row, col)."""
    (y0, x0), (y1, x1) = p0, p1
    dy, dx = y1 - y0, x1 - x0
    t = np.clip(((yy - y0) * dy + (xx - x0) * dx) / max(dy * dy + dx * dx, 1e-12), 0.0, 1.0)
    d2 = (yy - (y0 + t * dy)) ** 2 + (xx - (x0 + t * dx)) ** 2
    return np.exp(-d2 / (2 * width ** 2))


def class_parameters(label: int, classes: int) -> tuple[float, float]:
    """(mouth curvature, brow tilt) for a class: points evenly spaced on a circle."""
    angle = 2 * math.pi * label / classes
    return math.cos(angle), math.sin(angle)


def render_pattern(size: int, curve: float, tilt: float, shift=(0.0, 0.0), intensity: float = 1.0) -> np.ndarray:
    """Left-right symmetric face-like sketch: two eyes, two brows, a mouth arc.

    ``curve`` bends the mouth (positive = smile), ``tilt`` slants the brows.
    Coordinates scale with ``size`` so any size >= 16 renders the same layout.
    """
    s = size / 16.0
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    cy = (size - 1) / 2 + shift[0]
    cx = (size - 1) / 2 + shift[1]
    img = np.zeros((size, size))
    for side in (-1, 1):
        ex = cx + side * 3.0 * s
        img += np.exp(-((yy - (cy - 1.5 * s)) ** 2 + (xx - ex) ** 2) / (2 * (1.0 * s) ** 2))
        inner = (cy - 4.5 * s + tilt * 1.5 * s, ex - side * 2.0 * s)
        outer = (cy - 4.5 * s - tilt * 1.5 * s, ex + side * 2.0 * s)
        img += _stroke(yy, xx, inner, outer, 0.6 * s)
    # mouth: parabola through the mouth corners, sampled as short segments
    half = 4.0 * s
    xs = np.linspace(-half, half, 9)
    ys = cy + 4.0 * s - curve * 2.0 * s * (1 - (xs / half) ** 2)
    mouth = np.zeros_like(img)
    for i in range(len(xs) - 1):
        seg = _stroke(yy, xx, (ys[i], cx + xs[i]), (ys[i + 1], cx + xs[i + 1]), 0.6 * s)
        mouth = np.maximum(mouth, seg)
    img += mouth
    return np.clip(intensity * img, 0.0, 1.0)


def quantize(images: np.ndarray) -> np.ndarray:
    """Snap to the k/255 grid the dataset file stores, so save/load is exact."""
    q = np.rint(np.clip(images, 0.0, 1.0) * 255.0)
    return (q / 255.0).astype(nn.default_dtype())


def _make_split(rng, counts, classes, size, noise, jitter, split):
    images, labels = [], []
    for c, n in enumerate(counts):
        curve, tilt = class_parameters(c, classes)
        for _ in range(n):
            shift = rng.uniform(-1.0, 1.0, size=2)
            jc, jt = rng.uniform(-jitter, jitter, size=2)
            intensity = rng.uniform(0.75, 1.0)
            img = render_pattern(size, curve + jc, tilt + jt, shift, intensity)
            if noise > 0:
                img = img + rng.normal(0.0, noise, size=img.shape)
            images.append(img)
            labels.append(c)
    order = rng.permutation(len(labels))
    x = quantize(np.stack(images)[:, None] if images else np.zeros((0, 1, size, size)))
    return DatasetBundle(x[order], np.asarray(labels, dtype=np.int64)[order],
                         default_class_names(classes), split)


def generate_synthetic(classes: int, counts, size: int = 16, noise: float = 0.1, seed: int = 0,
                       test_counts=None, jitter: float = 0.6):
    """Train and test bundles of noisy, jittered class patterns.

    ``counts`` gives training samples per class (an int means the same for
    every class); ``test_counts`` defaults to a quarter of each.
    """
    if classes < 2:
        raise ConfigurationError("need at least two classes")
    if size < 16:
        raise ConfigurationError("image size must be >= 16")
    if noise < 0 or jitter < 0:
        raise ConfigurationError("noise and jitter must be non-negative")
    counts = [counts] * classes if np.isscalar(counts) else list(counts)
    if len(counts) != classes or any(int(n) != n or n < 1 for n in counts):
        raise ConfigurationError(f"need one positive integer count per class, got {counts}")
    if test_counts is None:
        test_counts = [max(1, int(n) // 4) for n in counts]
    elif np.isscalar(test_counts):
        test_counts = [test_counts] * classes
    if len(test_counts) != classes or any(int(n) != n or n < 0 for n in test_counts):
        raise ConfigurationError(f"need one non-negative test count per class, got {test_counts}")
    train_rng, test_rng = (np.random.default_rng(s) for s in np.random.SeedSequence(seed).spawn(2))
    train = _make_split(train_rng, [int(n) for n in counts], classes, size, noise, jitter, "train")
    test = _make_split(test_rng, [int(n) for n in test_counts], classes, size, noise, jitter, "test")
    return train, test


def import_directory(root, height: int, width: int, channels: int = 1, split: str = "train") -> DatasetBundle:
    """Per-class subdirectories of raw 8-bit images (channels x height x width bytes each)."""
    root = Path(root)
    class_dirs = sorted(p for p in root.iterdir() if p.is_dir())
    if len(class_dirs) < 2:
        raise InputError(f"{root}: need at least two class subdirectories")
    expected = channels * height * width
    images, labels = [], []
    for c, d in enumerate(class_dirs):
        for f in sorted(p for p in d.iterdir() if p.is_file()):
            raw = f.read_bytes()
            if len(raw) != expected:
                raise FormatError(f"{f}: expected {expected} bytes of raw pixels, found {len(raw)}", min(len(raw), expected))
            images.append(np.frombuffer(raw, dtype=np.uint8).reshape(channels, height, width))
            labels.append(c)
    if not images:
        raise InputError(f"{root}: no images found")
    x = (np.stack(images) / 255.0).astype(nn.default_dtype())
    return DatasetBundle(x, np.asarray(labels), tuple(d.name for d in class_dirs), split)


# ---------------------------------------------------------------------------
# File helpers
# ---------------------------------------------------------------------------

def _atomic_write(path, payload: bytes) -> None:
    path = Path(path)
    with FileLock(str(path) + ".lock"):
        fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name + ".", suffix=".tmp")
        try:
            with os.fdopen(fd, "wb") as fh:
                fh.write(payload)
            os.replace(tmp, path)
        except BaseException:
            if os.path.exists(tmp):
                os.unlink(tmp)
            raise
    try:
        os.unlink(str(path) + ".lock")
    except OSError:
        pass


def save_dataset(bundle: DatasetBundle, path) -> None:
    N, ch, H, W = bundle.images.shape
    if bundle.classes > 0xFFFF:
        raise ConfigurationError("dataset format stores labels as u16")
    pixels = np.rint(bundle.images * 255.0).astype(np.uint8)
    payload = b"".join([
        DATASET_MAGIC,
        _DATASET_HEADER.pack(DATASET_VERSION, bundle.classes, N, ch, H, W),
        bundle.labels.astype("<u2").tobytes(),
        pixels.tobytes(),
    ])
    _atomic_write(path, payload)


def load_dataset(path, split: str | None = None, class_names=None) -> DatasetBundle:
    """Read a dataset file; the file stores no names, so defaults are used unless given."""
    raw = Path(path).read_bytes()
    if len(raw) < 8 or raw[:8] != DATASET_MAGIC:
        raise FormatError("not a dataset file (bad magic)", 0)
    if len(raw) < 8 + _DATASET_HEADER.size:
        raise FormatError("truncated dataset header", len(raw))
    version, C, N, ch, H, W = _DATASET_HEADER.unpack_from(raw, 8)
    if version != DATASET_VERSION:
        raise FormatError(f"unsupported dataset version {version}", 8)
    if C < 1 or min(ch, H, W) < 1:
        raise FormatError(f"invalid dataset shape C={C} channels={ch} H={H} W={W}", 12)
    label_off = 8 + _DATASET_HEADER.size
    pixel_off = label_off + 2 * N
    end = pixel_off + N * ch * H * W
    if len(raw) < end:
        raise FormatError(f"truncated dataset: expected {end} bytes, found {len(raw)}", len(raw))
    if len(raw) > end:
        raise FormatError(f"{len(raw) - end} trailing bytes after pixel data", end)
    labels = np.frombuffer(raw, dtype="<u2", count=N, offset=label_off).astype(np.int64)
    bad = np.nonzero(labels >= C)[0]
    if bad.size:
        raise FormatError(f"label {labels[bad[0]]} out of range for {C} classes", label_off + 2 * int(bad[0]))
    pixels = np.frombuffer(raw, dtype=np.uint8, count=N * ch * H * W, offset=pixel_off)
    images = (pixels.reshape(N, ch, H, W) / 255.0).astype(nn.default_dtype())
    names = tuple(class_names) if class_names is not None else default_class_names(C)
    if len(names) != C:
        raise ConfigurationError(f"{len(names)} class names for {C} classes")
    return DatasetBundle(images, labels, names, split or Path(path).stem)


def save_checkpoint(state: NetworkState, path, extra_meta: dict | None = None) -> None:
    state.check()
    manifest, blobs, offset = [], [], 0
    for name in sorted(state.params):
        arr = np.ascontiguousarray(state.params[name])
        le = arr.astype(arr.dtype.newbyteorder("<"), copy=False)
        data = le.tobytes()
        manifest.append({"name": name, "shape": list(arr.shape), "dtype": le.dtype.str,
                         "offset": offset, "nbytes": len(data)})
        blobs.append(data)
        offset += len(data)
    meta = {
        "seed": state.seed,
        "epoch": state.epoch,
        "final_loss": state.loss_history[-1] if state.loss_history else None,
        "loss_history": state.loss_history,
        "well_trained": state.well_trained,
        "fitness": state.fitness,
    }
    if extra_meta:
        meta.update(extra_meta)
    header = json.dumps({"model": state.spec.to_config(), "tensors": manifest, "meta": meta},
                        sort_keys=True).encode("utf-8")
    payload = CHECKPOINT_MAGIC + struct.pack("<II", CHECKPOINT_VERSION, len(header)) + header + b"".join(blobs)
    _atomic_write(path, payload)


def read_checkpoint_header(path) -> dict:
    """Decode just the JSON header, without touching the tensor blob."""
    with open(path, "rb") as fh:
        head = fh.read(16)
        if len(head) < 8 or head[:8] != CHECKPOINT_MAGIC:
            raise FormatError("not a checkpoint file (bad magic)", 0)
        if len(head) < 16:
            raise FormatError("truncated checkpoint preamble", len(head))
        version, hlen = struct.unpack("<II", head[8:16])
        if version != CHECKPOINT_VERSION:
            raise FormatError(f"unsupported checkpoint version {version}", 8)
        text = fh.read(hlen)
    if len(text) < hlen:
        raise FormatError("truncated checkpoint header", 16 + len(text))
    try:
        header = json.loads(text.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"unreadable checkpoint header: {exc}", 16) from exc
    header["_blob_offset"] = 16 + hlen
    return header


def load_checkpoint(path) -> NetworkState:
    header = read_checkpoint_header(path)
    raw = Path(path).read_bytes()
    base = header.pop("_blob_offset")
    try:
        spec = NetworkSpec.from_config(header["model"])
        manifest = header["tensors"]
        meta = header.get("meta", {})
    except (KeyError, ConfigurationError) as exc:
        raise FormatError(f"checkpoint header missing or invalid field: {exc}", 16) from exc
    expected = spec.param_shapes()
    params = {}
    for entry in manifest:
        name, shape, dtype = entry["name"], tuple(entry["shape"]), np.dtype(entry["dtype"])
        start = base + int(entry["offset"])
        nbytes = int(entry["nbytes"])
        if dtype.kind != "f" or dtype.byteorder == ">":
            raise FormatError(f"{name}: unsupported tensor dtype {entry['dtype']}", 16)
        if name not in expected or expected[name] != shape:
            raise FormatError(f"{name}: shape {shape} does not match the model spec", 16)
        if nbytes != int(np.prod(shape)) * dtype.itemsize:
            raise FormatError(f"{name}: byte count {nbytes} inconsistent with shape {shape}", 16)
        if start + nbytes > len(raw):
            raise FormatError(f"{name}: tensor data truncated", len(raw))
        arr = np.frombuffer(raw, dtype=dtype, count=int(np.prod(shape)), offset=start).reshape(shape)
        if not np.all(np.isfinite(arr)):
            bad = int(np.flatnonzero(~np.isfinite(arr.ravel()))[0])
            raise FormatError(f"{name}: non-finite parameter value", start + bad * dtype.itemsize)
        params[name] = arr.astype(dtype.newbyteorder("="), copy=True)
    missing = sorted(set(expected) - set(params))
    if missing:
        raise FormatError(f"checkpoint lacks tensors {missing}", 16)
    end = base + sum(int(e["nbytes"]) for e in manifest)
    if len(raw) != end:
        raise FormatError(f"file length {len(raw)} != expected {end}", min(len(raw), end))
    state = NetworkState(
        spec=spec,
        params={k: params[k] for k in expected},
        seed=int(meta.get("seed", 0)),
        epoch=int(meta.get("epoch", 0)),
        loss_history=[float(v) for v in meta.get("loss_history", [])],
        well_trained=bool(meta.get("well_trained", False)),
        fitness=meta.get("fitness"),
    )
    return state
