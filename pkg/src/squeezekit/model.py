"""Parameter initialisation and execution of an :class:`ArchGraph`."""
from __future__ import annotations

import math

import numpy as np

from . import tensor_core as tc
from .arch_builder import ArchGraph, param_shapes
from .errors import ConfigurationError, ShapeError

__all__ = ["init_params", "calibrate_init", "forward", "check_params"]


def init_params(graph: ArchGraph, seed: int = 0, centered: bool = False) -> dict[str, tc.Tensor]:
    """Fan-in scaled uniform weights, U(-sqrt(6/fan_in), +sqrt(6/fan_in)); zero biases.

    Parameters are drawn in graph order from one seeded generator, so the
    same graph and seed always give bitwise-identical values.

    With ``centered`` every filter that reads a ReLU output (all convs but
    those fed by the graph input) is shifted to zero mean. Such inputs are
    nonnegative and strongly correlated, so an uncentred filter's sign is set
    by its weight sum and a narrow squeeze layer can start out entirely dead.
    """
    rng = np.random.default_rng(seed)
    params = {}
    for node in graph.convs():
        shape = node.weight_shape
        fan_in = math.prod(shape[1:])
        bound = math.sqrt(6.0 / fan_in)
        w = rng.uniform(-bound, bound, size=shape)
        if centered and node.inputs != (graph.input_node.name,):
            w -= w.reshape(shape[0], -1).mean(axis=1)[:, None, None, None]
        params[f"{node.name}.weight"] = tc.Tensor(w.astype(np.float32))
        params[f"{node.name}.bias"] = tc.Tensor(np.zeros(node.bias_shape, dtype=np.float32))
    return params


def calibrate_init(graph: ArchGraph, params: dict[str, tc.Tensor], images, *,
                   head_std: float = 0.1, head_bias: float = 0.5) -> dict[str, tc.Tensor]:
    """Rescale each conv, in graph order, so its output has unit std on ``images``.

    The head conv is scaled to ``head_std`` instead and its bias set to
    ``head_bias``: logits start small and equal (initial loss close to
    ln(classes)) while the ReLU in front of the pooling stays active.
    Returns a new parameter dict; ``params`` is not modified.
    """
    params = dict(params)
    images = np.asarray(images)
    head_conv = graph.convs()[-1].name
    params[f"{head_conv}.bias"] = tc.Tensor(
        np.full(params[f"{head_conv}.bias"].shape, head_bias, dtype=np.float32))
    for node in graph.convs():
        acts: dict[str, tc.Tensor] = {}
        forward(graph, params, images, activations=acts)
        std = float(acts[node.name].data.std())
        target = head_std if node.name == head_conv else 1.0
        key = f"{node.name}.weight"
        params[key] = tc.Tensor(params[key].data * np.float32(target / max(std, 1e-8)))
    return params


def check_params(graph: ArchGraph, params: dict) -> None:
    expected = param_shapes(graph)
    missing = [k for k in expected if k not in params]
    extra = [k for k in params if k not in expected]
    if missing or extra:
        raise ConfigurationError(f"parameter names differ from graph: missing {missing}, unexpected {extra}")
    for name, shape in expected.items():
        got = tuple(params[name].shape)
        if got != tuple(shape):
            raise ConfigurationError(f"{name}: graph expects {tuple(shape)}, weights have {got}")


def forward(graph: ArchGraph, params: dict[str, tc.Tensor], x, *, train: bool = False,
            rng: np.random.Generator | None = None, tape: tc.GradTape | None = None,
            activations: dict | None = None) -> tc.Tensor:
    """Run ``graph`` on ``x`` (``[C,H,W]`` or ``[N,C,H,W]``) and return the output tensor.

    If ``activations`` is a dict it receives every node's output keyed by node name.
    """
    x = x if isinstance(x, tc.Tensor) else tc.Tensor(x)
    if tuple(x.shape[-3:]) != tuple(graph.input_shape):
        raise ShapeError(f"input shape {x.shape} does not match graph input {graph.input_shape}")
    acts: dict[str, tc.Tensor] = {}
    for node in graph.nodes:
        ins = [acts[s] for s in node.inputs]
        op = node.op
        if op == "input":
            out = x
        elif op == "conv":
            out = tc.conv2d(ins[0], params[f"{node.name}.weight"], params[f"{node.name}.bias"],
                            node.stride, node.pad, tape=tape)
        elif op == "relu":
            out = tc.relu(ins[0], tape=tape)
        elif op == "maxpool":
            out = tc.maxpool2d(ins[0], node.kernel, node.stride, tape=tape)
        elif op == "gap":
            out = tc.global_avg_pool(ins[0], tape=tape)
        elif op == "dropout":
            out = tc.dropout(ins[0], node.ratio, train=train, rng=rng, tape=tape)
        elif op == "concat":
            out = tc.concat_channels(ins[0], ins[1], tape=tape)
        elif op == "add":
            out = tc.add_elementwise(ins[0], ins[1], tape=tape)
        elif op == "output":
            out = ins[0]
        else:
            raise ShapeError(f"{node.name}: cannot execute op {op!r}")
        acts[node.name] = out
    if activations is not None:
        activations.update(acts)
    return acts[graph.output_node.name]
