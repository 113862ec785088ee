"""Pruning + codebook quantization + sparse index coding, with exact size accounting.

Every parameter tensor is compressed independently:

1. magnitude pruning keeps the ``ceil(density * n)`` largest-magnitude values;
2. kept values are clustered by 1-D k-means into a per-layer codebook;
3. kept positions are stored as gaps between consecutive entries in
   ``index_bits``-wide fields; a gap too wide for the field is bridged by a
   filler entry whose codebook value is zero;
4. optionally, assignment and gap streams are sized under canonical Huffman
   coding.

Codebook slot 0 is reserved for the zero used by filler entries, so kept
weights are clustered into ``2**codebook_bits - 1`` centroids. This keeps the
layer decodable from its streams alone.

Container layout (little-endian, bit streams LSB-first, padded per layer)::

    b"SQZC" | u8 version | u32 layer count
    per layer: u16 name length | utf-8 name | u8 codebook_bits | u8 index_bits
               | u32 entry count (kept values + fillers)
               | float32 codebook * 2**codebook_bits
               | packed index stream | packed assignment stream
"""
from __future__ import annotations

import dataclasses
import heapq
import math
import struct
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .arch_builder import ArchGraph, param_shapes
from .errors import ConfigurationError, FormatError, ParameterError
from .tensor_core import Tensor

__all__ = [
    "CompressionConfig",
    "CompressedLayer",
    "CompressionReport",
    "prune_magnitude",
    "quantize_codebook",
    "encode_sparse_indices",
    "decode_sparse_indices",
    "huffman_code_lengths",
    "huffman_payload_bits",
    "entropy_code_size",
    "compress_layer",
    "decode_layer",
    "compress_model",
    "decompress_model",
    "write_container",
    "read_container",
    "pack_bits",
    "unpack_bits",
    "LAYER_HEADER_BYTES",
    "ALEXNET_BYTES",
]

CONTAINER_MAGIC = b"SQZC"
CONTAINER_VERSION = 1
LAYER_HEADER_BYTES = 16
ALEXNET_BYTES = 240 * 1_000_000
# canonical Huffman table cost: one code-length byte per alphabet symbol
HUFFMAN_TABLE_BITS_PER_SYMBOL = 8


@dataclass(frozen=True)
class CompressionConfig:
    density: float = 0.33
    codebook_bits: int = 8
    index_bits: int = 4
    entropy_code: bool = False

    def __post_init__(self):
        if not 0 < self.density <= 1:
            raise ParameterError(f"density must be in (0, 1], got {self.density}")
        if not 1 <= self.codebook_bits <= 16:
            raise ParameterError(f"codebook_bits must be in 1..16, got {self.codebook_bits}")
        if self.index_bits < 1:
            raise ParameterError(f"index_bits must be >= 1, got {self.index_bits}")


# --- pruning ----------------------------------------------------------------

def prune_magnitude(weights, density: float) -> np.ndarray:
    """Boolean mask keeping the ceil(density*n) largest |w|; ties keep the lower index."""
    w = np.asarray(weights).reshape(-1)
    if w.size == 0:
        raise ParameterError("cannot prune an empty weight vector")
    if not 0 < density <= 1:
        raise ParameterError(f"density must be in (0, 1], got {density}")
    keep = min(w.size, math.ceil(round(density * w.size, 9)))
    order = np.argsort(-np.abs(w.astype(np.float64)), kind="stable")
    mask = np.zeros(w.size, dtype=bool)
    mask[order[:keep]] = True
    return mask


# --- k-means codebook -------------------------------------------------------

def _nearest(values: np.ndarray, centroids: np.ndarray) -> np.ndarray:
    order = np.argsort(centroids, kind="stable")
    c = centroids[order]
    mids = (c[:-1] + c[1:]) / 2
    return order[np.searchsorted(mids, values, side="left")]


def quantize_codebook(values, bits: int, max_iter: int = 100, n_clusters: int | None = None,
                      history: list | None = None):
    """1-D k-means with ``2**bits`` centroids spaced linearly over [min, max].

    Lloyd iterations run until the assignment stops changing or ``max_iter``
    is reached; an empty cluster keeps its previous centroid. Returns
    ``(codebook, assignments)``. When ``history`` is given, the mean squared
    quantization error after every iteration is appended to it.
    """
    if not 1 <= bits <= 16:
        raise ParameterError(f"bits must be in 1..16, got {bits}")
    v = np.asarray(values, dtype=np.float64).reshape(-1)
    if v.size == 0:
        raise ParameterError("need at least one value to quantize")
    k = n_clusters or 2 ** bits
    centroids = np.linspace(v.min(), v.max(), k)
    assign = _nearest(v, centroids)
    for _ in range(max_iter):
        sums = np.bincount(assign, weights=v, minlength=k)
        counts = np.bincount(assign, minlength=k)
        filled = counts > 0
        centroids[filled] = sums[filled] / counts[filled]
        new = _nearest(v, centroids)
        if history is not None:
            history.append(float(np.mean((v - centroids[new]) ** 2)))
        if np.array_equal(new, assign):
            break
        assign = new
    return centroids.astype(np.float32), assign.astype(np.int64)


# --- relative indices ------------------------------------------------------

def encode_sparse_indices(mask, index_bits: int = 4):
    """Gap-encode the kept positions of ``mask``.

    Each entry stores ``position - previous_position - 1``. A gap larger than
    ``2**index_bits - 1`` is split by filler entries at the maximum gap.
    Returns ``(gaps, fillers)`` where ``fillers`` flags the filler entries;
    the filler count is ``fillers.sum()``.
    """
    if index_bits < 1:
        raise ParameterError(f"index_bits must be >= 1, got {index_bits}")
    pos = np.flatnonzero(np.asarray(mask).reshape(-1))
    span = 1 << index_bits
    gaps = np.diff(pos, prepend=-1) - 1
    n_fill = gaps >> index_bits  # floor(gap / 2**bits)
    counts = n_fill + 1
    total = int(counts.sum())
    out = np.full(total, span - 1, dtype=np.int64)
    fillers = np.ones(total, dtype=bool)
    last = np.cumsum(counts) - 1
    out[last] = gaps & (span - 1)
    fillers[last] = False
    return out, fillers


def decode_sparse_indices(gaps, fillers) -> np.ndarray:
    """Kept positions from a gap stream and its filler flags."""
    gaps = np.asarray(gaps, dtype=np.int64)
    pos = np.cumsum(gaps + 1) - 1
    return pos[~np.asarray(fillers, dtype=bool)]


# --- Huffman ----------------------------------------------------------------

def huffman_code_lengths(freqs: dict) -> dict:
    """Code length per symbol of an optimal prefix code; a lone symbol gets 1 bit."""
    items = sorted((f, s) for s, f in freqs.items() if f > 0)
    if not items:
        return {}
    if len(items) == 1:
        return {items[0][1]: 1}
    # (weight, tiebreak, symbols); tiebreak keeps merges deterministic
    heap = [(f, i, [s]) for i, (f, s) in enumerate(items)]
    heapq.heapify(heap)
    depth = {s: 0 for _, s in items}
    counter = len(heap)
    while len(heap) > 1:
        f1, _, a = heapq.heappop(heap)
        f2, _, b = heapq.heappop(heap)
        for s in a + b:
            depth[s] += 1
        heapq.heappush(heap, (f1 + f2, counter, a + b))
        counter += 1
    return depth


def huffman_payload_bits(symbols) -> int:
    freqs = Counter(np.asarray(symbols).reshape(-1).tolist())
    lengths = huffman_code_lengths(freqs)
    return sum(freqs[s] * lengths[s] for s in freqs)


def entropy_code_size(symbols, alphabet_size: int | None = None) -> int:
    """Payload bits under canonical Huffman plus one code-length byte per alphabet symbol."""
    arr = np.asarray(symbols).reshape(-1)
    if arr.size == 0:
        raise ParameterError("cannot entropy-code an empty stream")
    alphabet = alphabet_size if alphabet_size is not None else int(arr.max()) + 1
    return huffman_payload_bits(arr) + HUFFMAN_TABLE_BITS_PER_SYMBOL * alphabet


# --- bit packing ------------------------------------------------------------

def pack_bits(values, width: int) -> bytes:
    """Pack unsigned ``values`` into ``width``-bit fields, LSB first, zero padded to a byte."""
    v = np.asarray(values, dtype=np.uint64).reshape(-1)
    if v.size and int(v.max()) >= (1 << width):
        raise ParameterError(f"value {int(v.max())} does not fit in {width} bits")
    bits = ((v[:, None] >> np.arange(width, dtype=np.uint64)) & 1).astype(np.uint8)
    return np.packbits(bits.reshape(-1), bitorder="little").tobytes()


def unpack_bits(data: bytes, width: int, count: int) -> np.ndarray:
    bits = np.unpackbits(np.frombuffer(data, dtype=np.uint8), bitorder="little")
    bits = bits[: width * count].reshape(count, width).astype(np.int64)
    return (bits << np.arange(width, dtype=np.int64)).sum(axis=1)


def _packed_len(count: int, width: int) -> int:
    return (count * width + 7) // 8


# --- layers -----------------------------------------------------------------

@dataclass
class CompressedLayer:
    name: str
    size: int  # dense element count
    codebook_bits: int
    index_bits: int
    codebook: np.ndarray  # 2**codebook_bits float32, slot 0 == 0.0
    assignments: np.ndarray  # one per entry, 0 for fillers
    gaps: np.ndarray
    n_nonzero: int  # kept values, fillers excluded
    entropy_code: bool = False

    @property
    def n_fillers(self) -> int:
        return len(self.gaps) - self.n_nonzero

    @property
    def n_entries(self) -> int:
        return len(self.gaps)

    @property
    def assignment_bits(self) -> int:
        if self.entropy_code and self.n_entries:
            return entropy_code_size(self.assignments, 2 ** self.codebook_bits)
        return self.n_entries * self.codebook_bits

    @property
    def index_stream_bits(self) -> int:
        if self.entropy_code and self.n_entries:
            return entropy_code_size(self.gaps, 2 ** self.index_bits)
        return self.n_entries * self.index_bits

    @property
    def codebook_bytes(self) -> int:
        return 4 * 2 ** self.codebook_bits

    @property
    def bytes(self) -> int:
        return ((self.assignment_bits + 7) // 8 + (self.index_stream_bits + 7) // 8
                + self.codebook_bytes + LAYER_HEADER_BYTES)


def compress_layer(name: str, weights, config: CompressionConfig) -> CompressedLayer:
    w = np.asarray(weights, dtype=np.float32).reshape(-1)
    mask = prune_magnitude(w, config.density)
    gaps, fillers = encode_sparse_indices(mask, config.index_bits)
    kept = w[mask]
    k = 2 ** config.codebook_bits
    codebook = np.zeros(k, dtype=np.float32)
    assignments = np.zeros(len(gaps), dtype=np.int64)
    centroids, assign = quantize_codebook(kept, config.codebook_bits, n_clusters=k - 1)
    codebook[1:] = centroids
    assignments[~fillers] = assign + 1
    return CompressedLayer(name, w.size, config.codebook_bits, config.index_bits, codebook,
                           assignments, gaps, int(mask.sum()), config.entropy_code)


def decode_layer(layer: CompressedLayer) -> np.ndarray:
    """Dense float32 vector of the pruned and quantized weights."""
    out = np.zeros(layer.size, dtype=np.float32)
    pos = np.cumsum(layer.gaps + 1) - 1
    if len(pos) and pos[-1] >= layer.size:
        raise FormatError(f"{layer.name}: index stream runs past {layer.size} elements")
    out[pos] = layer.codebook[layer.assignments]
    return out


@dataclass
class CompressionReport:
    layers: list[CompressedLayer]
    config: CompressionConfig
    dense_bytes: int
    baseline_bytes: int
    shapes: dict = field(default_factory=dict)

    @property
    def compressed_bytes(self) -> int:
        return sum(layer.bytes for layer in self.layers)

    @property
    def ratio(self) -> float:
        return self.baseline_bytes / self.compressed_bytes

    @property
    def dense_ratio(self) -> float:
        return self.dense_bytes / self.compressed_bytes

    @property
    def compressed_mb(self) -> float:
        return self.compressed_bytes / 1_000_000

    def csv_rows(self):
        header = ["layer", "elements", "nonzeros", "fillers", "assignment_bits", "index_bits",
                  "codebook_bytes", "dense_bytes", "compressed_bytes"]
        rows = [[lay.name, lay.size, lay.n_nonzero, lay.n_fillers, lay.assignment_bits,
                 lay.index_stream_bits, lay.codebook_bytes, 4 * lay.size, lay.bytes]
                for lay in self.layers]
        rows.append(["TOTAL", sum(lay.size for lay in self.layers),
                     sum(lay.n_nonzero for lay in self.layers),
                     sum(lay.n_fillers for lay in self.layers),
                     sum(lay.assignment_bits for lay in self.layers),
                     sum(lay.index_stream_bits for lay in self.layers),
                     sum(lay.codebook_bytes for lay in self.layers),
                     self.dense_bytes, self.compressed_bytes])
        return header, rows


def _array(v) -> np.ndarray:
    return v.data if isinstance(v, Tensor) else np.asarray(v, dtype=np.float32)


def compress_model(graph: ArchGraph, weights: dict, config: CompressionConfig = CompressionConfig(),
                   baseline_bytes: int | None = None) -> CompressionReport:
    """Compress every parameter tensor of ``graph``; ratio is against ``baseline_bytes``
    (the dense 32-bit size when omitted)."""
    shapes = param_shapes(graph)
    layers = []
    for name, shape in shapes.items():
        if name not in weights:
            raise ConfigurationError(f"no weights supplied for {name}")
        arr = _array(weights[name])
        if tuple(arr.shape) != tuple(shape):
            raise ConfigurationError(f"{name}: graph expects {tuple(shape)}, weights are {tuple(arr.shape)}")
        layers.append(compress_layer(name, arr, config))
    dense = 4 * sum(math.prod(s) for s in shapes.values())
    return CompressionReport(layers, config, dense, baseline_bytes or dense, dict(shapes))


def decompress_model(layers, graph: ArchGraph) -> dict[str, Tensor]:
    shapes = param_shapes(graph)
    by_name = {layer.name: layer for layer in layers}
    out = {}
    for name, shape in shapes.items():
        if name not in by_name:
            raise ConfigurationError(f"container has no layer {name}")
        layer = dataclasses.replace(by_name[name], size=math.prod(shape))
        out[name] = Tensor(decode_layer(layer), shape)
    return out


# --- container --------------------------------------------------------------

def write_container(path, layers) -> None:
    chunks = [CONTAINER_MAGIC, struct.pack("<BI", CONTAINER_VERSION, len(layers))]
    for layer in layers:
        raw = layer.name.encode("utf-8")
        chunks.append(struct.pack("<H", len(raw)) + raw)
        chunks.append(struct.pack("<BBI", layer.codebook_bits, layer.index_bits, layer.n_entries))
        chunks.append(np.asarray(layer.codebook, dtype="<f4").tobytes())
        chunks.append(pack_bits(layer.gaps, layer.index_bits))
        chunks.append(pack_bits(layer.assignments, layer.codebook_bits))
    Path(path).write_bytes(b"".join(chunks))


def read_container(path) -> list[CompressedLayer]:
    """Layers of a SQZC file. ``size`` is set to the minimum extent the streams cover;
    :func:`decompress_model` widens it to the graph's shape."""
    try:
        data = Path(path).read_bytes()
    except OSError as exc:
        raise FormatError(f"{path}: {exc.strerror or exc}") from None
    pos = 0

    def take(n):
        nonlocal pos
        if pos + n > len(data):
            raise FormatError(f"{path}: truncated container at offset {pos}")
        chunk = data[pos:pos + n]
        pos += n
        return chunk

    if take(4) != CONTAINER_MAGIC:
        raise FormatError(f"{path}: bad magic, not a SQZC container")
    version, count = struct.unpack("<BI", take(5))
    if version != CONTAINER_VERSION:
        raise FormatError(f"{path}: unsupported container version {version}")
    layers = []
    for _ in range(count):
        (n,) = struct.unpack("<H", take(2))
        name = take(n).decode("utf-8")
        cbits, ibits, entries = struct.unpack("<BBI", take(6))
        codebook = np.frombuffer(take(4 * 2 ** cbits), dtype="<f4").astype(np.float32)
        gaps = unpack_bits(take(_packed_len(entries, ibits)), ibits, entries)
        assign = unpack_bits(take(_packed_len(entries, cbits)), cbits, entries)
        fillers = assign == 0
        extent = int(np.sum(gaps + 1)) if entries else 0
        layers.append(CompressedLayer(name, extent, cbits, ibits, codebook, assign, gaps,
                                      int((~fillers).sum())))
    if pos != len(data):
        raise FormatError(f"{path}: {len(data) - pos} trailing bytes")
    return layers
