"""Expand Fire-module metaparameters into validated computation graphs.

A SqueezeNet-family network is a stem convolution, a stack of Fire modules
(squeeze 1x1 conv feeding parallel 1x1 and 3x3 expand convs whose outputs are
concatenated), and a 1x1 classifier convolution followed by global average
pooling. Three macroarchitectures are supported: vanilla, simple bypass
(identity additions around every second module) and complex bypass (1x1 conv
additions around the remaining modules as well).
"""
from __future__ import annotations

import enum
import graphlib
import math
from dataclasses import dataclass, field, replace

from .errors import BypassError, MetaparameterError, ShapeError, ValidationError
from .tensor_core import conv_output_size

__all__ = [
    "FireSpec",
    "StemSpec",
    "HeadSpec",
    "Metaparams",
    "Variant",
    "Node",
    "ArchGraph",
    "round_half_up",
    "expand_metaparams",
    "build_fire",
    "build_squeezenet",
    "infer_shapes",
    "validate",
    "ensure_valid",
    "param_shapes",
    "DEFAULT_INPUT_SHAPE",
]

DEFAULT_INPUT_SHAPE = (3, 224, 224)
POOL_KERNEL = 3
POOL_STRIDE = 2
DROPOUT_RATIO = 0.5


def round_half_up(x: float) -> int:
    # tolerate representation error such as 0.1 * 45 = 4.499999...
    return math.floor(x + 0.5 + 1e-9)


@dataclass(frozen=True)
class FireSpec:
    s1x1: int
    e1x1: int
    e3x3: int

    def violations(self) -> list[str]:
        out = []
        for name in ("s1x1", "e1x1", "e3x3"):
            if getattr(self, name) < 1:
                out.append(f"{name}={getattr(self, name)} must be >= 1")
        if self.s1x1 >= self.e1x1 + self.e3x3:
            out.append(
                f"s1x1={self.s1x1} must be < e1x1+e3x3={self.e1x1 + self.e3x3}"
            )
        return out

    @property
    def out_channels(self) -> int:
        return self.e1x1 + self.e3x3


@dataclass(frozen=True)
class StemSpec:
    filters: int = 96
    kernel: int = 7
    stride: int = 2
    pad: int = 0


@dataclass(frozen=True)
class HeadSpec:
    classes: int = 1000


@dataclass(frozen=True)
class Metaparams:
    """Generators of every Fire module's dimensions.

    Defaults are the reference SqueezeNet: base_e=128, incr_e=128, freq=2,
    pct3x3=0.5, SR=0.125.
    """

    base_e: int = 128
    incr_e: int = 128
    freq: int = 2
    pct3x3: float = 0.5
    sr: float = 0.125
    n_fire_modules: int = 8
    stem: StemSpec = field(default_factory=StemSpec)
    head: HeadSpec = field(default_factory=HeadSpec)

    def range_violations(self) -> list[str]:
        out = []
        if self.base_e < 1:
            out.append(f"base_e={self.base_e} must be >= 1")
        if self.incr_e < 0:
            out.append(f"incr_e={self.incr_e} must be >= 0")
        if self.freq < 1:
            out.append(f"freq={self.freq} must be >= 1")
        if not 0 <= self.pct3x3 <= 1:
            out.append(f"pct3x3={self.pct3x3} must be in [0, 1]")
        if not 0 < self.sr <= 1:
            out.append(f"sr={self.sr} must be in (0, 1]")
        if self.n_fire_modules < 1:
            out.append(f"n_fire_modules={self.n_fire_modules} must be >= 1")
        for name in ("filters", "kernel", "stride"):
            if getattr(self.stem, name) < 1:
                out.append(f"stem.{name}={getattr(self.stem, name)} must be >= 1")
        if self.stem.pad < 0:
            out.append(f"stem.pad={self.stem.pad} must be >= 0")
        if self.head.classes < 1:
            out.append(f"head.classes={self.head.classes} must be >= 1")
        return out


class Variant(str, enum.Enum):
    VANILLA = "vanilla"
    SIMPLE_BYPASS = "simple_bypass"
    COMPLEX_BYPASS = "complex_bypass"

    @classmethod
    def parse(cls, text: "str | Variant") -> "Variant":
        if isinstance(text, Variant):
            return text
        key = str(text).strip().lower().replace("-", "_")
        for v in cls:
            if v.value == key or v.name.lower() == key:
                return v
        raise MetaparameterError(
            f"unknown variant {text!r}; expected one of {[v.value for v in cls]}"
        )


# placement of 1x1-conv bypasses in the complex variant
COMPLEX_PLACEMENTS = ("even", "all")


@dataclass(frozen=True)
class Node:
    """One layer of an :class:`ArchGraph`.

    ``op`` is one of input, conv, relu, maxpool, gap, dropout, concat, add,
    output. Conv nodes carry their parameter dimensions; ``module`` names the
    Fire module (``fire2`` ...) a node belongs to, and ``role`` its job in it.
    """

    name: str
    op: str
    inputs: tuple[str, ...] = ()
    filters: int = 0
    in_channels: int = 0
    kernel: int = 1
    stride: int = 1
    pad: int = 0
    ratio: float = 0.0
    module: str | None = None
    role: str | None = None
    shape: tuple[int, ...] | None = None

    @property
    def weight_shape(self) -> tuple[int, int, int, int] | None:
        if self.op != "conv":
            return None
        return (self.filters, self.in_channels, self.kernel, self.kernel)

    @property
    def bias_shape(self) -> tuple[int] | None:
        return (self.filters,) if self.op == "conv" else None


@dataclass(frozen=True)
class ArchGraph:
    """Immutable layer DAG. ``nodes`` are stored in a topological order."""

    nodes: tuple[Node, ...]
    input_shape: tuple[int, ...] | None = None
    fire_specs: tuple[FireSpec, ...] = ()
    variant: Variant = Variant.VANILLA
    validated: bool = False

    def __post_init__(self):
        object.__setattr__(self, "_index", {n.name: n for n in self.nodes})

    def __getitem__(self, name: str) -> Node:
        return self._index[name]

    def __contains__(self, name: str) -> bool:
        return name in self._index

    def __iter__(self):
        return iter(self.nodes)

    def __len__(self):
        return len(self.nodes)

    @property
    def input_node(self) -> Node:
        return next(n for n in self.nodes if n.op == "input")

    @property
    def output_node(self) -> Node:
        return next(n for n in self.nodes if n.op == "output")

    def by_op(self, op: str) -> list[Node]:
        return [n for n in self.nodes if n.op == op]

    def convs(self) -> list[Node]:
        return self.by_op("conv")

    def fire_modules(self) -> list[str]:
        seen = []
        for n in self.nodes:
            if n.module and n.module not in seen:
                seen.append(n.module)
        return seen

    def consumers(self, name: str) -> list[Node]:
        return [n for n in self.nodes if name in n.inputs]


def expand_metaparams(mp: Metaparams) -> list[FireSpec]:
    """Per-module (s1x1, e1x1, e3x3), module index 0 being fire2.

    e_i = base_e + incr_e * floor(i / freq); e3x3 = round(e_i * pct3x3);
    e1x1 = e_i - e3x3; s1x1 = max(1, round(SR * e_i)); rounding is half-up.
    """
    bad = mp.range_violations()
    if bad:
        raise MetaparameterError("; ".join(bad))
    specs = []
    for i in range(mp.n_fire_modules):
        e = mp.base_e + mp.incr_e * (i // mp.freq)
        e3 = round_half_up(e * mp.pct3x3)
        spec = FireSpec(max(1, round_half_up(mp.sr * e)), e - e3, e3)
        bad = spec.violations()
        if bad:
            raise MetaparameterError(f"fire{i + 2}: " + "; ".join(bad))
        specs.append(spec)
    return specs


def build_fire(spec: FireSpec, in_channels: int, source: str = "input",
               name: str = "fire") -> list[Node]:
    """Nodes of one Fire module reading from ``source``; the last node is the concat."""
    p = f"{name}/"
    return [
        Node(p + "squeeze1x1", "conv", (source,), spec.s1x1, in_channels, 1,
             module=name, role="squeeze"),
        Node(p + "relu_squeeze1x1", "relu", (p + "squeeze1x1",), module=name, role="squeeze"),
        Node(p + "expand1x1", "conv", (p + "relu_squeeze1x1",), spec.e1x1, spec.s1x1, 1,
             module=name, role="expand1x1"),
        Node(p + "relu_expand1x1", "relu", (p + "expand1x1",), module=name, role="expand1x1"),
        Node(p + "expand3x3", "conv", (p + "relu_squeeze1x1",), spec.e3x3, spec.s1x1, 3,
             pad=1, module=name, role="expand3x3"),
        Node(p + "relu_expand3x3", "relu", (p + "expand3x3",), module=name, role="expand3x3"),
        Node(p + "concat", "concat", (p + "relu_expand1x1", p + "relu_expand3x3"),
             module=name, role="concat"),
    ]


def _bypass_plan(variant: Variant, n: int, placement: str) -> dict[int, str]:
    """Module index (0 = fire2) -> 'wire' or 'conv'."""
    if placement not in COMPLEX_PLACEMENTS:
        raise MetaparameterError(
            f"complex placement {placement!r} not in {COMPLEX_PLACEMENTS}"
        )
    plan: dict[int, str] = {}
    if variant is Variant.VANILLA:
        return plan
    for i in range(n):
        if i % 2 == 1:  # fire3, fire5, ...
            plan[i] = "wire"
    if variant is Variant.COMPLEX_BYPASS:
        for i in range(n):
            if i % 2 == 0 or placement == "all":
                plan[i] = "conv"
    return plan


def build_squeezenet(mp: Metaparams | None = None, variant: Variant | str = Variant.VANILLA,
                     input_shape=DEFAULT_INPUT_SHAPE, complex_placement: str = "even",
                     pool_after: tuple[int, ...] = (4, 8)) -> ArchGraph:
    """Build, shape-annotate and validate a SqueezeNet-family graph.

    ``pool_after`` lists the Fire module numbers (fire2 = 2) followed by a
    max-pool; the stem is always followed by one.
    """
    mp = mp or Metaparams()
    variant = Variant.parse(variant)
    specs = expand_metaparams(mp)
    plan = _bypass_plan(variant, len(specs), complex_placement)

    stem = mp.stem
    nodes = [
        Node("input", "input"),
        Node("conv1", "conv", ("input",), stem.filters, input_shape[0], stem.kernel,
             stem.stride, stem.pad, role="stem"),
        Node("relu_conv1", "relu", ("conv1",), role="stem"),
        Node("pool1", "maxpool", ("relu_conv1",), kernel=POOL_KERNEL, stride=POOL_STRIDE),
    ]
    src, channels = "pool1", stem.filters
    for i, spec in enumerate(specs):
        name = f"fire{i + 2}"
        fire = build_fire(spec, channels, src, name)
        nodes.extend(fire)
        out = fire[-1].name
        kind = plan.get(i)
        if kind == "wire":
            if channels != spec.out_channels:
                raise BypassError(
                    f"simple bypass around {name}: input has {channels} channels, "
                    f"output has {spec.out_channels}; they must be the same"
                )
            nodes.append(Node(f"{name}/bypass_add", "add", (src, out), module=name, role="bypass"))
            out = f"{name}/bypass_add"
        elif kind == "conv":
            nodes.append(Node(f"{name}/bypass_conv", "conv", (src,), spec.out_channels, channels, 1,
                              module=name, role="bypass"))
            nodes.append(Node(f"{name}/bypass_add", "add", (f"{name}/bypass_conv", out),
                              module=name, role="bypass"))
            out = f"{name}/bypass_add"
        src, channels = out, spec.out_channels
        if i + 2 in pool_after:
            nodes.append(Node(f"pool{i + 2}", "maxpool", (src,), kernel=POOL_KERNEL,
                              stride=POOL_STRIDE))
            src = f"pool{i + 2}"
    nodes += [
        Node(f"drop{len(specs) + 1}", "dropout", (src,), ratio=DROPOUT_RATIO),
        Node("conv10", "conv", (f"drop{len(specs) + 1}",), mp.head.classes, channels, 1,
             role="head"),
        Node("relu_conv10", "relu", ("conv10",), role="head"),
        Node("pool10", "gap", ("relu_conv10",)),
        Node("output", "output", ("pool10",)),
    ]
    graph = ArchGraph(tuple(nodes), tuple(input_shape), tuple(specs), variant)
    return ensure_valid(infer_shapes(graph, input_shape))


def _node_shape(node: Node, in_shapes: list[tuple[int, ...]], input_shape) -> tuple[int, ...]:
    """Output shape of ``node`` given its input shapes; raises ShapeError."""
    op = node.op
    if op == "input":
        return tuple(input_shape)
    if op in ("relu", "dropout", "output"):
        return in_shapes[0]
    if op == "conv":
        c, h, w = in_shapes[0]
        if c != node.in_channels:
            raise ShapeError(
                f"{node.name}: input {node.inputs[0]} has {c} channels, conv expects {node.in_channels}"
            )
        return (node.filters, conv_output_size(h, node.kernel, node.stride, node.pad),
                conv_output_size(w, node.kernel, node.stride, node.pad))
    if op == "maxpool":
        c, h, w = in_shapes[0]
        if node.kernel > h or node.kernel > w:
            raise ShapeError(f"{node.name}: pooling kernel {node.kernel} larger than input {h}x{w}")
        return (c, (h - node.kernel) // node.stride + 1, (w - node.kernel) // node.stride + 1)
    if op == "gap":
        return (in_shapes[0][0],)
    if op == "concat":
        a, b = in_shapes
        if a[1:] != b[1:]:
            raise ShapeError(
                f"{node.name}: spatial mismatch {node.inputs[0]}={a} vs {node.inputs[1]}={b}"
            )
        return (a[0] + b[0],) + a[1:]
    if op == "add":
        a, b = in_shapes
        if a != b:
            raise ShapeError(
                f"{node.name}: add operands differ, {node.inputs[0]}={a} vs {node.inputs[1]}={b}"
            )
        return a
    raise ShapeError(f"{node.name}: unknown op {op!r}")


_ARITY = {"input": 0, "conv": 1, "relu": 1, "maxpool": 1, "gap": 1, "dropout": 1,
          "output": 1, "concat": 2, "add": 2}


def infer_shapes(graph: ArchGraph, input_shape=None) -> ArchGraph:
    """Return a copy of ``graph`` with every node's output shape filled in.

    Raises :class:`ShapeError` at the first inconsistency.
    """
    input_shape = tuple(input_shape or graph.input_shape or DEFAULT_INPUT_SHAPE)
    shapes: dict[str, tuple[int, ...]] = {}
    out = []
    for node in graph.nodes:
        try:
            ins = [shapes[s] for s in node.inputs]
        except KeyError as exc:
            raise ShapeError(f"{node.name}: input {exc.args[0]} is not defined before it") from None
        shp = _node_shape(node, ins, input_shape)
        shapes[node.name] = shp
        out.append(node if node.shape == shp else replace(node, shape=shp))
    if tuple(out) == graph.nodes and graph.input_shape == input_shape:
        return graph
    return replace(graph, nodes=tuple(out), input_shape=input_shape, validated=False)


def validate(graph: ArchGraph) -> list[str]:
    """All structural violations of ``graph``; an empty list means valid."""
    problems: list[str] = []
    names = [n.name for n in graph.nodes]
    if len(set(names)) != len(names):
        dup = sorted({n for n in names if names.count(n) > 1})
        problems.append(f"duplicate node names {dup}")
    index = {n.name: n for n in graph.nodes}
    n_in = len(graph.by_op("input"))
    n_out = len(graph.by_op("output"))
    if n_in != 1:
        problems.append(f"graph has {n_in} input nodes, expected exactly 1")
    if n_out != 1:
        problems.append(f"graph has {n_out} output nodes, expected exactly 1")

    for n in graph.nodes:
        if n.op not in _ARITY:
            problems.append(f"{n.name}: unknown op {n.op!r}")
        elif len(n.inputs) != _ARITY[n.op]:
            problems.append(f"{n.name}: {n.op} takes {_ARITY[n.op]} inputs, got {len(n.inputs)}")
        for src in n.inputs:
            if src not in index:
                problems.append(f"{n.name}: unknown input {src!r}")

    sorter = graphlib.TopologicalSorter({n.name: [s for s in n.inputs if s in index]
                                         for n in graph.nodes})
    try:
        order = list(sorter.static_order())
    except graphlib.CycleError as exc:
        problems.append(f"cycle through {exc.args[1]}")
        return problems
    if problems:
        return problems

    # shape consistency, collecting every failure rather than stopping
    input_shape = graph.input_shape or DEFAULT_INPUT_SHAPE
    shapes: dict[str, tuple[int, ...] | None] = {}
    for name in order:
        node = index[name]
        ins = [shapes.get(s) for s in node.inputs]
        if any(s is None for s in ins):
            shapes[name] = None
            continue
        try:
            shapes[name] = _node_shape(node, ins, input_shape)
        except ShapeError as exc:
            problems.append(str(exc))
            shapes[name] = None
            continue
        if node.shape is not None and node.shape != shapes[name]:
            problems.append(f"{name}: annotated shape {node.shape} != inferred {shapes[name]}")

    for module in graph.fire_modules():
        roles = {n.role: n for n in graph.nodes if n.module == module and n.op == "conv"}
        if {"squeeze", "expand1x1", "expand3x3"} <= roles.keys():
            spec = FireSpec(roles["squeeze"].filters, roles["expand1x1"].filters,
                            roles["expand3x3"].filters)
            problems += [f"{module}: {v}" for v in spec.violations()]
            if roles["expand3x3"].in_channels != spec.s1x1:
                problems.append(f"{module}: 3x3 expand reads {roles['expand3x3'].in_channels} "
                                f"channels, squeeze produces {spec.s1x1}")
    return problems


def ensure_valid(graph: ArchGraph) -> ArchGraph:
    """Return ``graph`` marked as validated, or raise :class:`ValidationError`."""
    problems = validate(graph)
    if problems:
        raise ValidationError(problems)
    if any(n.shape is None for n in graph.nodes):
        graph = infer_shapes(graph)
    return replace(graph, validated=True)


def param_shapes(graph: ArchGraph) -> dict[str, tuple[int, ...]]:
    """Ordered ``{"<conv>.weight": shape, "<conv>.bias": shape}`` for every conv."""
    out = {}
    for n in graph.convs():
        out[f"{n.name}.weight"] = n.weight_shape
        out[f"{n.name}.bias"] = n.bias_shape
    return out
