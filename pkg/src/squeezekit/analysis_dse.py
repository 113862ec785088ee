"""Parameter counting, model size, activation profiling and design-space sweeps."""
from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from fractions import Fraction
from typing import Callable, Sequence

import numpy as np

from . import tensor_core as tc
from .arch_builder import (ArchGraph, DEFAULT_INPUT_SHAPE, HeadSpec, Metaparams, StemSpec,
                           Variant, build_squeezenet, infer_shapes)
from .errors import ConfigurationError, ParameterError, PreconditionError
from .io_formats import ToyDataset
from .model import calibrate_init, forward, init_params

__all__ = [
    "MB",
    "SizeRow",
    "SizeReport",
    "count_params",
    "model_size",
    "ActivationRow",
    "ActivationProfile",
    "activation_profile",
    "SweepRow",
    "SweepResult",
    "sweep_sr",
    "sweep_pct3x3",
    "PCT3X3_SWEEP_BASE",
    "TrainConfig",
    "TrainResult",
    "train_toy",
    "toy_metaparams",
]

MB = 1_000_000


@dataclass(frozen=True)
class SizeRow:
    name: str
    weights: int
    biases: int
    bytes: float

    @property
    def params(self) -> int:
        return self.weights + self.biases


@dataclass(frozen=True)
class SizeReport:
    rows: tuple[SizeRow, ...]
    bytes_per_weight: Fraction | int | float = 4

    @property
    def total_weights(self) -> int:
        return sum(r.weights for r in self.rows)

    @property
    def total_biases(self) -> int:
        return sum(r.biases for r in self.rows)

    @property
    def total_params(self) -> int:
        return self.total_weights + self.total_biases

    @property
    def total_bytes(self):
        return self.total_params * self.bytes_per_weight

    @property
    def total_mb(self) -> float:
        return float(self.total_bytes) / MB

    def csv_rows(self):
        header = ["layer", "weights", "biases", "params", "bytes"]
        rows = [[r.name, r.weights, r.biases, r.params, r.bytes] for r in self.rows]
        rows.append(["TOTAL", self.total_weights, self.total_biases, self.total_params,
                     self.total_bytes])
        return header, rows


def _require_validated(graph: ArchGraph) -> None:
    if not graph.validated:
        raise PreconditionError("graph has not been validated; call ensure_valid() first")


def _check_precision(bytes_per_weight) -> None:
    if not bytes_per_weight > 0:
        raise ParameterError(f"bytes_per_weight must be positive, got {bytes_per_weight}")


def count_params(graph: ArchGraph, bytes_per_weight=4) -> SizeReport:
    """Per-conv weight (in*filters*kh*kw) and bias (filters) counts; other layers hold none."""
    _require_validated(graph)
    _check_precision(bytes_per_weight)
    rows = []
    for n in graph.convs():
        w = math.prod(n.weight_shape)
        b = n.filters
        rows.append(SizeRow(n.name, w, b, (w + b) * bytes_per_weight))
    return SizeReport(tuple(rows), bytes_per_weight)


def model_size(graph: ArchGraph, bytes_per_weight=4):
    """Bytes needed to store every parameter at ``bytes_per_weight`` bytes each."""
    _check_precision(bytes_per_weight)
    return count_params(graph, bytes_per_weight).total_bytes


@dataclass(frozen=True)
class ActivationRow:
    name: str
    op: str
    shape: tuple[int, ...]
    elements: int
    downsample: bool


@dataclass(frozen=True)
class ActivationProfile:
    rows: tuple[ActivationRow, ...]

    @property
    def downsampling_nodes(self) -> list[str]:
        return [r.name for r in self.rows if r.downsample]

    @property
    def total_elements(self) -> int:
        return sum(r.elements for r in self.rows if r.op not in ("input", "output"))


def activation_profile(graph: ArchGraph, input_shape=None) -> ActivationProfile:
    g = infer_shapes(graph, input_shape or graph.input_shape)
    rows = []
    for n in g.nodes:
        down = n.op in ("conv", "maxpool") and n.stride > 1
        rows.append(ActivationRow(n.name, n.op, n.shape, math.prod(n.shape), down))
    return ActivationProfile(tuple(rows))


# --- sweeps -----------------------------------------------------------------

@dataclass(frozen=True)
class SweepRow:
    value: float
    total_params: int
    size_bytes: int
    toy_accuracy: float | None = None

    @property
    def size_mb(self) -> float:
        return self.size_bytes / MB


@dataclass(frozen=True)
class SweepResult:
    param: str
    rows: tuple[SweepRow, ...]
    variant: str = "vanilla"

    def row(self, value: float) -> SweepRow:
        for r in self.rows:
            if math.isclose(r.value, value, rel_tol=0, abs_tol=1e-12):
                return r
        raise KeyError(value)

    def csv_rows(self):
        header = ["param", "value", "total_params", "size_bytes", "size_mb", "toy_accuracy"]
        rows = [[self.param, r.value, r.total_params, r.size_bytes, r.size_mb, r.toy_accuracy]
                for r in self.rows]
        return header, rows


# (graph, metaparams) -> toy accuracy; optional per-row hook
TrainHook = Callable[[ArchGraph, Metaparams], float]

PCT3X3_SWEEP_BASE = Metaparams(base_e=128, incr_e=128, freq=2, pct3x3=0.5, sr=0.5)


def _sweep(param: str, base: Metaparams, values: Sequence[float], check, variant,
           input_shape, train_hook: TrainHook | None, workers: int) -> SweepResult:
    bad = [v for v in values if not check(v)]
    if bad:
        raise ParameterError(f"{param} values out of range: {bad}")
    ordered = sorted(set(float(v) for v in values))

    def evaluate(value: float) -> SweepRow:
        mp = replace(base, **{param: value})
        graph = build_squeezenet(mp, variant, input_shape)
        report = count_params(graph)
        acc = train_hook(graph, mp) if train_hook else None
        return SweepRow(value, report.total_params, int(report.total_bytes), acc)

    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            rows = list(pool.map(evaluate, ordered))
    else:
        rows = [evaluate(v) for v in ordered]
    return SweepResult(param, tuple(rows), Variant.parse(variant).value)


def sweep_sr(base: Metaparams | None, sr_values: Sequence[float], variant=Variant.VANILLA,
             input_shape=DEFAULT_INPUT_SHAPE, train_hook: TrainHook | None = None,
             workers: int = 1) -> SweepResult:
    """One independently generated model per squeeze ratio, sorted by SR.

    Rows are evaluated independently (optionally on ``workers`` threads) and
    merged by value, so the result never depends on scheduling.
    """
    return _sweep("sr", base or Metaparams(), sr_values, lambda v: 0 < v <= 1, variant,
                  input_shape, train_hook, workers)


def sweep_pct3x3(base: Metaparams | None, pct_values: Sequence[float], variant=Variant.VANILLA,
                 input_shape=DEFAULT_INPUT_SHAPE, train_hook: TrainHook | None = None,
                 workers: int = 1) -> SweepResult:
    """Like :func:`sweep_sr` over the 3x3 fraction; base defaults to SR=0.5."""
    return _sweep("pct3x3", base or PCT3X3_SWEEP_BASE, pct_values, lambda v: 0.01 <= v <= 0.99,
                  variant, input_shape, train_hook, workers)


# --- toy training -----------------------------------------------------------

def toy_metaparams(classes: int = 4) -> Metaparams:
    """Scaled-down SqueezeNet for 32x32 inputs: base_e=incr_e=16, SR=0.125.

    The stem is 32 filters, 3x3, stride 2, pad 1, so a 32x32 input reaches
    fire5..fire8 at 3x3 where zero padding lets the 3x3 expands tell corner
    cells apart; the quadrant task needs that absolute-position signal.
    """
    return Metaparams(base_e=16, incr_e=16, freq=2, pct3x3=0.5, sr=0.125,
                      stem=StemSpec(32, 3, 2, 1), head=HeadSpec(classes))


CALIBRATION_IMAGES = 64


@dataclass(frozen=True)
class TrainConfig:
    """Toy-run defaults; the reference schedule's 0.04 is halved for the narrow toy net."""

    steps: int = 200
    batch: int = 128
    initial_lr: float = 0.02
    seed: int = 0


@dataclass
class TrainResult:
    losses: list[float]
    accuracy: float
    params: dict = field(repr=False, default_factory=dict)

    @property
    def diverged(self) -> bool:
        return not all(math.isfinite(v) for v in self.losses)


def evaluate_accuracy(graph: ArchGraph, params, images, labels, batch: int = 256) -> float:
    if len(labels) == 0:
        return float("nan")
    correct = 0
    for start in range(0, len(labels), batch):
        logits = forward(graph, params, images[start:start + batch]).data
        correct += int(np.sum(logits.argmax(axis=1) == labels[start:start + batch]))
    return correct / len(labels)


def train_toy(graph: ArchGraph, dataset: ToyDataset, config: TrainConfig = TrainConfig(),
              params: dict | None = None) -> TrainResult:
    """Minibatch SGD with linearly decaying learning rate; returns per-step loss and held-out accuracy.

    Everything random (init, batch sampling, dropout) flows from ``config.seed``.
    Without ``params`` the network starts from a centred init calibrated on
    the first training images (see :func:`~squeezekit.model.calibrate_init`).
    """
    head = graph.output_node.shape[0]
    if dataset.num_classes != head:
        raise ConfigurationError(
            f"dataset has {dataset.num_classes} classes but the head has {head} filters"
        )
    if tuple(dataset.image_shape) != tuple(graph.input_shape):
        raise ConfigurationError(
            f"dataset images are {dataset.image_shape}, graph input is {graph.input_shape}"
        )
    if config.steps < 0 or config.batch < 1:
        raise ConfigurationError(f"invalid steps={config.steps} / batch={config.batch}")
    x_train, y_train = dataset.train
    if params is None:
        params = calibrate_init(graph, init_params(graph, config.seed, centered=True),
                                x_train[:CALIBRATION_IMAGES])
    params = dict(params)
    rng = np.random.default_rng([config.seed, 1])
    losses: list[float] = []
    if config.steps:
        schedule = tc.LrSchedule(config.initial_lr, config.steps)
        for step in range(config.steps):
            idx = rng.integers(0, len(y_train), config.batch)
            tape = tc.GradTape()
            logits = forward(graph, params, x_train[idx], train=True, rng=rng, tape=tape)
            loss, grad = tc.softmax_cross_entropy(logits, y_train[idx])
            losses.append(loss)
            if not math.isfinite(loss):
                break
            grads = tape.backward(logits, grad)
            by_name = {k: grads[id(v)] for k, v in params.items() if id(v) in grads}
            params = tc.sgd_step(params, by_name, schedule, step)
    x_held, y_held = dataset.heldout
    return TrainResult(losses, evaluate_accuracy(graph, params, x_held, y_held), params)
