"""Minimal deterministic tensor engine for SqueezeNet-family networks.

Only the layers a Fire-module network needs are provided: convolution,
max pooling, global average pooling, ReLU, dropout, channel concatenation,
elementwise addition and a softmax cross-entropy objective.

Two layers of API live here:

* raw kernels (``*_forward`` / ``*_backward``) operating on numpy arrays.
  They accumulate in float64 and return results in the dtype of their input,
  so feeding float64 arrays keeps the whole computation in double precision
  (which is what :func:`grad_check` does);
* :class:`Tensor`-level ops that store float32 and optionally record
  themselves on a :class:`GradTape` for reverse-mode differentiation.

Activations are ``[C, H, W]``; a leading batch axis ``[N, C, H, W]`` is
accepted everywhere and simply vectorises the per-sample computation.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .errors import ParameterError, ShapeError

__all__ = [
    "Tensor",
    "GradTape",
    "LrSchedule",
    "conv2d",
    "conv2d_forward",
    "conv2d_backward",
    "maxpool2d",
    "maxpool2d_forward",
    "maxpool2d_backward",
    "global_avg_pool",
    "global_avg_pool_forward",
    "global_avg_pool_backward",
    "relu",
    "relu_forward",
    "relu_backward",
    "dropout",
    "dropout_mask",
    "concat_channels",
    "add_elementwise",
    "softmax_cross_entropy",
    "sgd_step",
    "grad_check",
    "conv_output_size",
]

STORAGE_DTYPE = np.float32


class Tensor:
    """Dense float32 array with an explicit shape.

    ``Tensor(data, shape)`` accepts a flat sequence plus a shape, or any
    array-like (in which case its own shape is used).
    """

    __slots__ = ("data",)

    def __init__(self, data, shape: Sequence[int] | None = None):
        arr = np.asarray(data, dtype=STORAGE_DTYPE)
        if shape is not None:
            shape = tuple(int(s) for s in shape)
            if math.prod(shape) != arr.size:
                raise ShapeError(
                    f"shape {shape} holds {math.prod(shape)} values but data has {arr.size}"
                )
            arr = arr.reshape(shape)
        if arr.ndim == 0:
            arr = arr.reshape(1)
        if any(s < 1 for s in arr.shape):
            raise ShapeError(f"all extents must be >= 1, got {arr.shape}")
        self.data = np.ascontiguousarray(arr)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def flat(self) -> np.ndarray:
        return self.data.reshape(-1)

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape})"


@dataclass
class _Record:
    name: str
    inputs: tuple[Tensor, ...]
    output: Tensor
    backward: Callable[[np.ndarray], tuple]


@dataclass
class GradTape:
    """Ordered log of executed ops; ``backward`` replays it in reverse."""

    records: list[_Record] = field(default_factory=list)

    def record(self, name, inputs, output, backward) -> None:
        self.records.append(_Record(name, tuple(inputs), output, backward))

    def backward(self, output: Tensor, grad=None, visit: list | None = None) -> dict[int, np.ndarray]:
        """Propagate ``grad`` (default ones) from ``output`` back through the tape.

        Returns a mapping ``id(tensor) -> gradient`` for every tensor that
        received a gradient. If ``visit`` is given, the name of each replayed
        record is appended to it.
        """
        if grad is None:
            grad = np.ones(output.shape, dtype=np.float64)
        grad = np.asarray(grad, dtype=np.float64)
        if grad.shape != output.shape:
            raise ShapeError(f"seed gradient shape {grad.shape} != output shape {output.shape}")
        grads: dict[int, np.ndarray] = {id(output): grad}
        for rec in reversed(self.records):
            g = grads.get(id(rec.output))
            if visit is not None:
                visit.append(rec.name)
            if g is None:
                continue
            for t, gi in zip(rec.inputs, rec.backward(g)):
                if t is None or gi is None:
                    continue
                prev = grads.get(id(t))
                grads[id(t)] = gi if prev is None else prev + gi
        return grads


@dataclass(frozen=True)
class LrSchedule:
    """Linearly decaying learning rate reaching zero at ``total_steps``."""

    initial_lr: float
    total_steps: int

    def __post_init__(self):
        if not self.initial_lr > 0:
            raise ParameterError(f"initial_lr must be positive, got {self.initial_lr}")
        if int(self.total_steps) != self.total_steps or self.total_steps < 1:
            raise ParameterError(f"total_steps must be a positive integer, got {self.total_steps}")

    def lr(self, step: int) -> float:
        if step < 0 or step > self.total_steps:
            raise ParameterError(f"step {step} outside schedule [0, {self.total_steps}]")
        return self.initial_lr * (1.0 - step / self.total_steps)


def _record(tape, name, inputs, output, backward):
    if tape is not None:
        tape.record(name, inputs, output, backward)
    return output


def _batched(x: np.ndarray, rank: int = 3):
    """Return ``(x4, squeeze)`` where x4 always carries a batch axis."""
    if x.ndim == rank:
        return x[None], True
    if x.ndim == rank + 1:
        return x, False
    raise ShapeError(f"expected rank {rank} or {rank + 1} activation, got shape {x.shape}")


def conv_output_size(size: int, kernel: int, stride: int, pad: int) -> int:
    if size + 2 * pad < kernel:
        raise ShapeError(f"kernel {kernel} larger than padded extent {size} + 2*{pad}")
    return (size + 2 * pad - kernel) // stride + 1


# --- convolution -----------------------------------------------------------

def _conv_check(x: np.ndarray, w: np.ndarray, b, stride: int, pad: int):
    if w.ndim != 4:
        raise ShapeError(f"conv weights must be [F, C, kh, kw], got {w.shape}")
    if stride < 1 or pad < 0:
        raise ParameterError(f"invalid stride {stride} / pad {pad}")
    if x.shape[1] != w.shape[1]:
        raise ShapeError(
            f"channel mismatch: input has {x.shape[1]} channels, weights expect {w.shape[1]}"
        )
    if b is not None and b.shape != (w.shape[0],):
        raise ShapeError(f"bias shape {b.shape} != ({w.shape[0]},)")
    ho = conv_output_size(x.shape[2], w.shape[2], stride, pad)
    wo = conv_output_size(x.shape[3], w.shape[3], stride, pad)
    return ho, wo


def _im2col(x: np.ndarray, kh: int, kw: int, stride: int, pad: int, ho: int, wo: int):
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x
    win = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(2, 3))
    win = win[:, :, : stride * (ho - 1) + 1 : stride, : stride * (wo - 1) + 1 : stride]
    # [N, C, Ho, Wo, kh, kw] -> [N*Ho*Wo, C*kh*kw]
    n, c = x.shape[:2]
    return win.transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, c * kh * kw)


def conv2d_forward(x, w, b=None, stride: int = 1, pad: int = 0) -> np.ndarray:
    """Cross-correlation with zero padding; see :func:`conv2d`."""
    out_dtype = np.result_type(x, w)
    x4, squeeze = _batched(np.asarray(x))
    w = np.asarray(w)
    b = None if b is None else np.asarray(b)
    ho, wo = _conv_check(x4, w, b, stride, pad)
    f, c, kh, kw = w.shape
    cols = _im2col(x4.astype(np.float64, copy=False), kh, kw, stride, pad, ho, wo)
    out = cols @ w.reshape(f, -1).astype(np.float64).T
    if b is not None:
        out += b.astype(np.float64)
    out = out.reshape(x4.shape[0], ho, wo, f).transpose(0, 3, 1, 2)
    out = np.ascontiguousarray(out, dtype=out_dtype)
    return out[0] if squeeze else out


def conv2d_backward(grad_out, x, w, stride: int = 1, pad: int = 0):
    """Gradients of :func:`conv2d_forward` w.r.t. input, weights and bias."""
    x4, squeeze = _batched(np.asarray(x))
    w = np.asarray(w)
    ho, wo = _conv_check(x4, w, None, stride, pad)
    f, c, kh, kw = w.shape
    g4 = np.asarray(grad_out)
    if squeeze:
        g4 = g4[None]
    n = x4.shape[0]
    if g4.shape != (n, f, ho, wo):
        raise ShapeError(f"grad_out shape {g4.shape[1:] if squeeze else g4.shape} != forward output {(f, ho, wo)}")
    dtype = np.result_type(x4, w)
    g = g4.astype(np.float64, copy=False).transpose(0, 2, 3, 1).reshape(-1, f)
    cols = _im2col(x4.astype(np.float64, copy=False), kh, kw, stride, pad, ho, wo)
    gw = (g.T @ cols).reshape(w.shape)
    gb = g.sum(axis=0)
    gcols = (g @ w.reshape(f, -1).astype(np.float64)).reshape(n, ho, wo, c, kh, kw)
    hp, wp = x4.shape[2] + 2 * pad, x4.shape[3] + 2 * pad
    gxp = np.zeros((n, c, hp, wp), dtype=np.float64)
    for i in range(kh):
        for j in range(kw):
            gxp[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride] += (
                gcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
            )
    gx = gxp[:, :, pad : pad + x4.shape[2], pad : pad + x4.shape[3]]
    gx = gx.astype(dtype)
    return (gx[0] if squeeze else gx), gw.astype(dtype), gb.astype(dtype)


def conv2d(input: Tensor, weights: Tensor, bias: Tensor | None = None, stride: int = 1,
           pad: int = 0, tape: GradTape | None = None) -> Tensor:
    """``out[f,y,x] = bias[f] + sum_{c,i,j} in[c, y*s+i-p, x*s+j-p] * w[f,c,i,j]``.

    Out-of-bounds reads contribute zero.
    """
    out = Tensor(conv2d_forward(input.data, weights.data,
                                None if bias is None else bias.data, stride, pad))

    def backward(g):
        gx, gw, gb = conv2d_backward(g, input.data, weights.data, stride, pad)
        return gx, gw, gb

    return _record(tape, "conv2d", (input, weights, bias), out, backward)


# --- pooling ---------------------------------------------------------------

def _pool_geometry(x4: np.ndarray, k: int, stride: int):
    if stride < 1 or k < 1:
        raise ParameterError(f"invalid pooling kernel {k} / stride {stride}")
    h, w = x4.shape[2:]
    if k > h or k > w:
        raise ShapeError(f"pooling kernel {k} larger than input {h}x{w}")
    return (h - k) // stride + 1, (w - k) // stride + 1


def _window_slices(k: int, stride: int, ho: int, wo: int):
    """Strided views of window offset (i, j), in row-major scan order."""
    for i in range(k):
        for j in range(k):
            yield (slice(None), slice(None), slice(i, i + stride * (ho - 1) + 1, stride),
                   slice(j, j + stride * (wo - 1) + 1, stride))


def maxpool2d_forward(x, k: int = 3, stride: int = 2) -> np.ndarray:
    x4, squeeze = _batched(np.asarray(x))
    ho, wo = _pool_geometry(x4, k, stride)
    out = None
    for sl in _window_slices(k, stride, ho, wo):
        out = x4[sl].copy() if out is None else np.maximum(out, x4[sl], out=out)
    return out[0] if squeeze else out


def maxpool2d_backward(grad_out, x, k: int = 3, stride: int = 2) -> np.ndarray:
    """Route each output gradient to the first maximum of its window (row-major scan)."""
    x4, squeeze = _batched(np.asarray(x))
    ho, wo = _pool_geometry(x4, k, stride)
    g4 = np.asarray(grad_out)
    if squeeze:
        g4 = g4[None]
    if g4.shape != (*x4.shape[:2], ho, wo):
        raise ShapeError(f"grad_out shape {g4.shape} != pooled shape {(*x4.shape[:2], ho, wo)}")
    best = maxpool2d_forward(x4, k, stride)
    pending = np.ones(best.shape, dtype=bool)
    gx = np.zeros(x4.shape, dtype=np.result_type(x4, g4))
    for sl in _window_slices(k, stride, ho, wo):
        hit = pending & (x4[sl] == best)
        gx[sl] += np.where(hit, g4, 0)
        pending &= ~hit
    return gx[0] if squeeze else gx


def maxpool2d(input: Tensor, k: int = 3, stride: int = 2, tape: GradTape | None = None) -> Tensor:
    out = Tensor(maxpool2d_forward(input.data, k, stride))
    return _record(tape, "maxpool2d", (input,), out,
                   lambda g: (maxpool2d_backward(g, input.data, k, stride),))


def global_avg_pool_forward(x) -> np.ndarray:
    x = np.asarray(x)
    if x.ndim not in (3, 4):
        raise ShapeError(f"expected [C,H,W] or [N,C,H,W], got {x.shape}")
    return x.astype(np.float64).mean(axis=(-2, -1)).astype(x.dtype)


def global_avg_pool_backward(grad_out, x) -> np.ndarray:
    x = np.asarray(x)
    h, w = x.shape[-2:]
    g = np.asarray(grad_out)[..., None, None] / (h * w)
    return np.broadcast_to(g, x.shape).astype(np.result_type(x, g))


def global_avg_pool(input: Tensor, tape: GradTape | None = None) -> Tensor:
    out = Tensor(global_avg_pool_forward(input.data))
    return _record(tape, "global_avg_pool", (input,), out,
                   lambda g: (global_avg_pool_backward(g, input.data),))


# --- elementwise -----------------------------------------------------------

def relu_forward(x) -> np.ndarray:
    x = np.asarray(x)
    return np.maximum(x, 0).astype(x.dtype)


def relu_backward(grad_out, x) -> np.ndarray:
    # gradient at exactly 0 is 0
    return np.where(np.asarray(x) > 0, grad_out, 0)


def relu(input: Tensor, tape: GradTape | None = None) -> Tensor:
    out = Tensor(relu_forward(input.data))
    return _record(tape, "relu", (input,), out, lambda g: (relu_backward(g, input.data),))


def dropout_mask(shape, ratio: float, rng: np.random.Generator) -> np.ndarray:
    """Inverted-dropout multiplier: 0 with probability ``ratio``, else ``1/(1-ratio)``."""
    if not 0 <= ratio < 1:
        raise ParameterError(f"dropout ratio must be in [0, 1), got {ratio}")
    keep = rng.random(shape) >= ratio
    return keep / (1.0 - ratio)


def dropout(input: Tensor, ratio: float = 0.5, train: bool = False,
            rng: np.random.Generator | None = None, tape: GradTape | None = None) -> Tensor:
    if not 0 <= ratio < 1:
        raise ParameterError(f"dropout ratio must be in [0, 1), got {ratio}")
    if not train or ratio == 0:
        out = Tensor(input.data)
        return _record(tape, "dropout", (input,), out, lambda g: (g,))
    if rng is None:
        raise ParameterError("training-mode dropout needs an explicit rng")
    mask = dropout_mask(input.shape, ratio, rng)
    out = Tensor(input.data * mask)
    return _record(tape, "dropout", (input,), out, lambda g: (g * mask,))


def concat_channels(a: Tensor, b: Tensor, tape: GradTape | None = None) -> Tensor:
    """Stack along the channel axis; channels of ``a`` come first."""
    if a.data.ndim != b.data.ndim or a.shape[:-3] != b.shape[:-3] or a.shape[-2:] != b.shape[-2:]:
        raise ShapeError(f"cannot concat {a.shape} and {b.shape}: spatial extents differ")
    axis = a.data.ndim - 3
    ca = a.shape[axis]
    out = Tensor(np.concatenate([a.data, b.data], axis=axis))

    def backward(g):
        return np.split(g, [ca], axis=axis)

    return _record(tape, "concat_channels", (a, b), out, backward)


def add_elementwise(a: Tensor, b: Tensor, tape: GradTape | None = None) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"cannot add tensors of shapes {a.shape} and {b.shape}")
    out = Tensor(a.data + b.data)
    return _record(tape, "add_elementwise", (a, b), out, lambda g: (g, g))


# --- objective and optimiser ----------------------------------------------

def _softmax_ce(logits: np.ndarray, labels) -> tuple[float, np.ndarray]:
    z = np.asarray(logits, dtype=np.float64)
    single = z.ndim == 1
    if single:
        z = z[None]
    labels = np.atleast_1d(np.asarray(labels))
    k = z.shape[1]
    if labels.shape != (z.shape[0],):
        raise ShapeError(f"{labels.shape[0]} labels for {z.shape[0]} logit rows")
    if np.any(labels < 0) or np.any(labels >= k) or labels.dtype.kind not in "iu":
        raise ParameterError(f"labels must be integers in [0, {k}), got {labels.tolist()}")
    z = z - z.max(axis=1, keepdims=True)
    logsum = np.log(np.exp(z).sum(axis=1))
    rows = np.arange(z.shape[0])
    loss = float(np.mean(logsum - z[rows, labels]))
    p = np.exp(z - logsum[:, None])
    p[rows, labels] -= 1.0
    p /= z.shape[0]
    return loss, (p[0] if single else p)


def softmax_cross_entropy(logits, label) -> tuple[float, np.ndarray]:
    """Mean cross-entropy of softmax(logits) against integer label(s).

    Accepts ``[K]`` with a scalar label or ``[N, K]`` with ``N`` labels.
    Returns the loss and its gradient w.r.t. the logits (float64).
    """
    data = logits.data if isinstance(logits, Tensor) else logits
    return _softmax_ce(data, label)


def sgd_step(params: dict, grads: dict, schedule: LrSchedule, step: int) -> dict:
    """Return new parameters ``p - lr(step) * g``; parameters without a gradient are kept."""
    lr = schedule.lr(step)
    out = {}
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            out[name] = p
            continue
        if g.shape != p.shape:
            raise ShapeError(f"gradient for {name} has shape {g.shape}, parameter {p.shape}")
        out[name] = Tensor(p.data - lr * np.asarray(g, dtype=np.float64))
    return out


# --- finite-difference verification ----------------------------------------

@dataclass(frozen=True)
class _OpSpec:
    forward: Callable
    backward: Callable
    sample: Callable  # (shapes, rng) -> list of float64 arrays
    default_shapes: tuple


def _sample_normal(shapes, rng):
    return [rng.standard_normal(s) for s in shapes]


def _sample_distinct(shapes, rng):
    # values spaced well beyond the finite-difference step so no window max flips
    out = []
    for s in shapes:
        n = math.prod(s)
        out.append((rng.permutation(n) * 0.05 - n * 0.025).reshape(s))
    return out


def _sample_away_from_zero(shapes, rng):
    out = []
    for s in shapes:
        mag = rng.uniform(0.1, 2.0, size=s)
        out.append(mag * rng.choice([-1.0, 1.0], size=s))
    return out


def _conv_spec(stride=1, pad=1):
    return _OpSpec(
        forward=lambda x, w, b: conv2d_forward(x, w, b, stride, pad),
        backward=lambda g, x, w, b: conv2d_backward(g, x, w, stride, pad),
        sample=_sample_normal,
        default_shapes=((2, 5, 5), (3, 2, 3, 3), (3,)),
    )


def _ce_spec():
    def forward(z, label):
        return np.array(_softmax_ce(z, label)[0])

    def backward(g, z, label):
        return (g * _softmax_ce(z, label)[1],)

    return forward, backward


OPS: dict[str, _OpSpec] = {
    "conv2d": _conv_spec(1, 1),
    "conv2d_strided": _conv_spec(2, 1),
    "maxpool2d": _OpSpec(
        forward=lambda x: maxpool2d_forward(x, 3, 2),
        backward=lambda g, x: (maxpool2d_backward(g, x, 3, 2),),
        sample=_sample_distinct,
        default_shapes=((2, 7, 7),),
    ),
    "global_avg_pool": _OpSpec(
        forward=global_avg_pool_forward,
        backward=lambda g, x: (global_avg_pool_backward(g, x),),
        sample=_sample_normal,
        default_shapes=((3, 4, 5),),
    ),
    "relu": _OpSpec(
        forward=relu_forward,
        backward=lambda g, x: (relu_backward(g, x),),
        sample=_sample_away_from_zero,
        default_shapes=((2, 4, 4),),
    ),
    "concat_channels": _OpSpec(
        forward=lambda a, b: np.concatenate([a, b], axis=0),
        backward=lambda g, a, b: tuple(np.split(g, [a.shape[0]], axis=0)),
        sample=_sample_normal,
        default_shapes=((2, 3, 3), (3, 3, 3)),
    ),
    "add_elementwise": _OpSpec(
        forward=lambda a, b: a + b,
        backward=lambda g, a, b: (g, g),
        sample=_sample_normal,
        default_shapes=((2, 3, 3), (2, 3, 3)),
    ),
    "softmax_cross_entropy": _OpSpec(
        forward=_ce_spec()[0],
        backward=_ce_spec()[1],
        sample=_sample_normal,
        default_shapes=((6,),),
    ),
}


def grad_check(op: str | _OpSpec, shapes=None, seed: int = 0, eps: float = 1e-3,
               max_coords: int = 400) -> float:
    """Max relative error between analytic and central-difference gradients.

    The scalar objective is ``sum(out * R)`` for a seeded random ``R``. All
    arithmetic is float64. At most ``max_coords`` coordinates per input are
    probed (sampled without replacement when the input is larger).
    """
    spec = OPS[op] if isinstance(op, str) else op
    rng = np.random.default_rng(seed)
    shapes = tuple(tuple(s) for s in (shapes or spec.default_shapes))
    inputs = spec.sample(shapes, rng)
    extra = ()
    if spec is OPS.get("softmax_cross_entropy"):
        extra = (int(rng.integers(shapes[0][-1])),)
    out = np.asarray(spec.forward(*inputs, *extra), dtype=np.float64)
    proj = rng.standard_normal(out.shape)

    def objective():
        return float(np.sum(np.asarray(spec.forward(*inputs, *extra), dtype=np.float64) * proj))

    analytic = spec.backward(proj, *inputs, *extra)
    worst = 0.0
    for x, ga in zip(inputs, analytic):
        ga = np.asarray(ga, dtype=np.float64)
        flat = x.reshape(-1)
        n = flat.size
        coords = np.arange(n) if n <= max_coords else rng.choice(n, max_coords, replace=False)
        for i in coords:
            orig = flat[i]
            flat[i] = orig + eps
            up = objective()
            flat[i] = orig - eps
            down = objective()
            flat[i] = orig
            num = (up - down) / (2 * eps)
            a = ga.reshape(-1)[i]
            rel = abs(a - num) / max(abs(a), abs(num), 1e-6)
            worst = max(worst, rel)
    return worst
