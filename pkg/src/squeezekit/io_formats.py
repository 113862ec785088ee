"""Persistence: architecture text files, binary weights, CSV reports, toy data.

Weight file layout (little-endian)::

    b"SQZW" | u8 version | u32 layer count
    per layer: u16 name length | utf-8 name | u8 rank | u32 extent * rank
               | float32 payload (product of extents values)
"""
from __future__ import annotations

import csv
import dataclasses
import math
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .arch_builder import ArchGraph, HeadSpec, Metaparams, StemSpec, Variant, COMPLEX_PLACEMENTS, param_shapes
from .errors import FormatError, MetaparameterError, ParameterError, ParseError
from .tensor_core import Tensor

__all__ = [
    "ArchConfig",
    "render_arch",
    "parse_arch",
    "save_arch",
    "load_arch",
    "save_weights",
    "load_weights",
    "emit_csv",
    "ToyDataset",
    "gen_toy_dataset",
    "save_idx",
    "load_idx",
    "load_idx_dataset",
]

WEIGHT_MAGIC = b"SQZW"
WEIGHT_VERSION = 1


# --- architecture text ------------------------------------------------------

@dataclass(frozen=True)
class ArchConfig:
    metaparams: Metaparams = dataclasses.field(default_factory=Metaparams)
    variant: Variant = Variant.VANILLA
    complex_placement: str = "even"


_SECTIONS = {
    "meta": {"base_e": int, "incr_e": int, "freq": int, "pct3x3": float, "sr": float,
             "n_fire_modules": int},
    "stem": {"filters": int, "kernel": int, "stride": int, "pad": int},
    "head": {"classes": int},
    "variant": {"name": str, "complex_placement": str},
}


def render_arch(config: ArchConfig) -> str:
    mp = config.metaparams
    lines = ["# squeezekit architecture", "[meta]"]
    for key in _SECTIONS["meta"]:
        lines.append(f"{key} = {getattr(mp, key)!r}")
    lines += ["", "[stem]"]
    for key in _SECTIONS["stem"]:
        lines.append(f"{key} = {getattr(mp.stem, key)!r}")
    lines += ["", "[head]", f"classes = {mp.head.classes!r}", "", "[variant]",
              f"name = {config.variant.value}", f"complex_placement = {config.complex_placement}"]
    return "\n".join(lines) + "\n"


def parse_arch(text: str) -> ArchConfig:
    """Parse the ``[section]`` / ``key = value`` format written by :func:`render_arch`."""
    values: dict[str, dict] = {s: {} for s in _SECTIONS}
    section = None
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if line.startswith("[") and line.endswith("]"):
            section = line[1:-1].strip()
            if section not in _SECTIONS:
                raise ParseError(f"unknown section [{section}]", line=lineno)
            continue
        if "=" not in line:
            raise ParseError(f"expected 'key = value', got {raw.strip()!r}", line=lineno)
        if section is None:
            raise ParseError("key outside of any section", line=lineno)
        key, value = (part.strip() for part in line.split("=", 1))
        kinds = _SECTIONS[section]
        if key not in kinds:
            raise ParseError(f"unknown key in [{section}]", line=lineno, key=key)
        if key in values[section]:
            raise ParseError(f"duplicate key in [{section}]", line=lineno, key=key)
        try:
            values[section][key] = kinds[key](value)
        except ValueError:
            raise ParseError(f"cannot read {value!r} as {kinds[key].__name__}",
                             line=lineno, key=key) from None

    mp = Metaparams(**values["meta"], stem=StemSpec(**values["stem"]),
                    head=HeadSpec(**values["head"]))
    bad = mp.range_violations()
    if bad:
        raise MetaparameterError("; ".join(bad))
    variant = Variant.parse(values["variant"].get("name", "vanilla"))
    placement = values["variant"].get("complex_placement", "even")
    if placement not in COMPLEX_PLACEMENTS:
        raise MetaparameterError(f"complex_placement {placement!r} not in {COMPLEX_PLACEMENTS}")
    return ArchConfig(mp, variant, placement)


def save_arch(path, config: ArchConfig) -> None:
    Path(path).write_text(render_arch(config))


def load_arch(path) -> ArchConfig:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise FormatError(f"{path}: {exc.strerror or exc}") from None
    return parse_arch(text)


# --- weights ----------------------------------------------------------------

def _as_array(v) -> np.ndarray:
    return v.data if isinstance(v, Tensor) else np.asarray(v, dtype=np.float32)


def save_weights(path, weights: dict, graph: ArchGraph | None = None) -> None:
    """Write ``weights`` (name -> Tensor/array) in graph order when a graph is given."""
    if graph is not None:
        expected = param_shapes(graph)
        for name, shape in expected.items():
            if name not in weights:
                raise FormatError(f"missing weights for layer {name}")
            got = _as_array(weights[name]).shape
            if tuple(got) != tuple(shape):
                raise FormatError(f"{name}: graph shape {tuple(shape)} vs weights shape {tuple(got)}")
        names = list(expected)
    else:
        names = list(weights)
    chunks = [WEIGHT_MAGIC, struct.pack("<BI", WEIGHT_VERSION, len(names))]
    for name in names:
        arr = _as_array(weights[name])
        raw = name.encode("utf-8")
        chunks.append(struct.pack("<H", len(raw)) + raw)
        chunks.append(struct.pack(f"<B{arr.ndim}I", arr.ndim, *arr.shape))
        chunks.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    Path(path).write_bytes(b"".join(chunks))


class _Reader:
    def __init__(self, data: bytes, path):
        self.data, self.pos, self.path = data, 0, path

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise FormatError(f"{self.path}: truncated file (need {n} bytes at offset {self.pos})")
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def load_weights(path, graph: ArchGraph | None = None) -> dict[str, Tensor]:
    try:
        data = Path(path).read_bytes()
    except OSError as exc:
        raise FormatError(f"{path}: {exc.strerror or exc}") from None
    r = _Reader(data, path)
    if r.take(4) != WEIGHT_MAGIC:
        raise FormatError(f"{path}: bad magic, not a SQZW weight file")
    version, count = r.unpack("<BI")
    if version != WEIGHT_VERSION:
        raise FormatError(f"{path}: unsupported version {version}")
    out: dict[str, Tensor] = {}
    for _ in range(count):
        (n,) = r.unpack("<H")
        name = r.take(n).decode("utf-8")
        (rank,) = r.unpack("<B")
        shape = r.unpack(f"<{rank}I")
        payload = r.take(4 * math.prod(shape))
        out[name] = Tensor(np.frombuffer(payload, dtype="<f4").astype(np.float32), shape)
    if r.pos != len(data):
        raise FormatError(f"{path}: {len(data) - r.pos} trailing bytes after last layer")
    if graph is not None:
        expected = param_shapes(graph)
        problems = []
        for name, shape in expected.items():
            if name not in out:
                problems.append(f"{name}: missing from file (graph expects {tuple(shape)})")
            elif tuple(out[name].shape) != tuple(shape):
                problems.append(f"{name}: graph expects {tuple(shape)}, file has {tuple(out[name].shape)}")
        for name in out:
            if name not in expected:
                problems.append(f"{name}: in file {tuple(out[name].shape)} but not in graph")
        if problems:
            raise FormatError(f"{path}: " + "; ".join(problems))
    return out


# --- CSV --------------------------------------------------------------------

def _fmt(v) -> str:
    if isinstance(v, float):
        return repr(v)
    if v is None:
        return ""
    return str(v)


def emit_csv(report, path) -> None:
    """Write a SweepResult, SizeReport or CompressionReport as RFC 4180 CSV."""
    header, rows = report.csv_rows()
    try:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(header)
            for row in rows:
                w.writerow([_fmt(v) for v in row])
    except OSError as exc:
        raise FormatError(f"{path}: {exc.strerror or exc}") from None


# --- toy dataset ------------------------------------------------------------

@dataclass(frozen=True)
class ToyDataset:
    images: np.ndarray  # [N, C, H, W] float32
    labels: np.ndarray  # [N] int64
    n_train: int
    num_classes: int

    @property
    def train(self):
        return self.images[: self.n_train], self.labels[: self.n_train]

    @property
    def heldout(self):
        return self.images[self.n_train:], self.labels[self.n_train:]

    @property
    def image_shape(self) -> tuple[int, ...]:
        return tuple(self.images.shape[1:])


def _region_bounds(label: int, k: int, size: int, margin: int, gap: int):
    half = size // 2
    low, high = (margin, half - gap), (half + gap, size - margin)
    if k == 2:
        return (margin, size - margin), (low if label == 0 else high)
    return (low if label // 2 == 0 else high), (low if label % 2 == 0 else high)


def gen_toy_dataset(seed: int = 0, n: int = 1000, k: int = 4, size: int = 32,
                    heldout_fraction: float = 0.25, noise: float = 0.1,
                    distractors: int = 1, standardize: bool = True) -> ToyDataset:
    """Synthetic images whose class is the quadrant (k=4) or half (k=2) holding the brightest blob.

    Each image carries one bright Gaussian blob well inside the labelled
    region, ``distractors`` dimmer blobs anywhere, and additive Gaussian
    noise. Labels are balanced to within one sample and shuffled; the last
    ``heldout_fraction`` is held out. With ``standardize`` all images are
    shifted and scaled by the training split's global mean and std.
    """
    if k not in (2, 4):
        raise ParameterError(f"k must be 2 or 4, got {k}")
    if n < k:
        raise ParameterError(f"need n >= k, got n={n}, k={k}")
    rng = np.random.default_rng(seed)
    labels = rng.permutation(np.arange(n) % k).astype(np.int64)
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    images = np.empty((n, 3, size, size), dtype=np.float32)
    margin, gap = 3, max(1, size // 8)
    for idx, label in enumerate(labels):
        img = rng.normal(0.0, noise, size=(3, size, size))
        rows, cols = _region_bounds(int(label), k, size, margin, gap)
        blobs = [(rng.uniform(*rows), rng.uniform(*cols), 1.0)]
        for _ in range(distractors):
            blobs.append((rng.uniform(margin, size - margin), rng.uniform(margin, size - margin),
                          rng.uniform(0.2, 0.4)))
        for cy, cx, amp in blobs:
            sigma = rng.uniform(2.0, 3.0)
            tint = rng.uniform(0.7, 1.0, size=3)
            g = np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * sigma ** 2))
            img += amp * tint[:, None, None] * g
        images[idx] = img
    n_held = int(round(n * heldout_fraction))
    n_train = n - n_held
    if standardize:
        train = images[:n_train].astype(np.float64)
        mean, std = train.mean(), train.std()
        images = ((images - mean) / std).astype(np.float32)
    return ToyDataset(images, labels, n_train, k)


# --- IDX files --------------------------------------------------------------

_IDX_TYPES = {0x08: np.uint8, 0x09: np.int8, 0x0B: ">i2", 0x0C: ">i4", 0x0D: ">f4", 0x0E: ">f8"}


def save_idx(path, array: np.ndarray) -> None:
    array = np.asarray(array)
    code = {np.dtype(np.uint8): 0x08, np.dtype(np.int8): 0x09}.get(array.dtype)
    if code is None:
        code, array = 0x0D, array.astype(">f4")
    header = struct.pack(">HBB", 0, code, array.ndim) + struct.pack(f">{array.ndim}I", *array.shape)
    Path(path).write_bytes(header + array.tobytes())


def load_idx(path) -> np.ndarray:
    try:
        data = Path(path).read_bytes()
    except OSError as exc:
        raise FormatError(f"{path}: {exc.strerror or exc}") from None
    r = _Reader(data, path)
    zero, code, ndim = r.unpack(">HBB")
    if zero != 0 or code not in _IDX_TYPES:
        raise FormatError(f"{path}: not an IDX file")
    shape = r.unpack(f">{ndim}I")
    dtype = np.dtype(_IDX_TYPES[code])
    payload = r.take(math.prod(shape) * dtype.itemsize)
    return np.frombuffer(payload, dtype=dtype).reshape(shape)


def load_idx_dataset(directory, heldout_fraction: float = 0.25) -> ToyDataset:
    """Load ``images.idx`` ([N,H,W] or [N,C,H,W]) and ``labels.idx`` from a directory.

    uint8 images are scaled to [0, 1]; single-channel images stay single-channel.
    """
    directory = Path(directory)
    images = load_idx(directory / "images.idx")
    labels = load_idx(directory / "labels.idx").astype(np.int64)
    if images.ndim == 3:
        images = images[:, None]
    if images.ndim != 4 or labels.shape != (images.shape[0],):
        raise FormatError(f"{directory}: images {images.shape} / labels {labels.shape} do not pair up")
    scale = 255.0 if images.dtype == np.uint8 else 1.0
    images = (images.astype(np.float32) / scale).astype(np.float32)
    n = images.shape[0]
    n_held = int(round(n * heldout_fraction))
    return ToyDataset(images, labels, n - n_held, int(labels.max()) + 1 if n else 0)

