"""Tape-recorded versions of the tensor and layer primitives.

Every function here takes `Var` operands, computes the forward value with
the kernels from `tensor_core`/`nn_ops`, and records a node so `backward`
can differentiate through it. Backward rules are registered at import
time, one per op kind.
"""

from __future__ import annotations

import numpy as np

from .autograd import TapeNode, Var, register_backward
from .nn_ops import (
    BatchNormState,
    _batchnorm2d_bwd,
    _batchnorm2d_fwd,
    _conv2d_bwd,
    _conv2d_fwd,
    _global_avg_pool_bwd,
    _global_avg_pool_fwd,
    _maxpool2_bwd,
    _maxpool2_fwd,
    _relu_bwd,
    _relu_fwd,
    _sigmoid_bwd,
    _sigmoid_fwd,
    _upsample_nearest2_bwd,
    _upsample_nearest2_fwd,
)
from .tensor_core import ShapeError


def add(a: Var, b: Var) -> Var:
    if a.value.shape != b.value.shape:
        raise ShapeError(f"add shape mismatch: {a.value.shape} vs {b.value.shape}")
    return a.tape.record("add", (a, b), a.value + b.value)


def _add_bwd(node: TapeNode, g: np.ndarray):
    return g, g


def mul(a: Var, b: Var) -> Var:
    if a.value.shape != b.value.shape:
        raise ShapeError(f"mul shape mismatch: {a.value.shape} vs {b.value.shape}")
    return a.tape.record("mul", (a, b), a.value * b.value, ctx=(a.value, b.value))


def _mul_bwd(node: TapeNode, g: np.ndarray):
    av, bv = node.ctx
    return g * bv, g * av


def scale(a: Var, c: float) -> Var:
    """Multiply by a non-learnable scalar constant."""
    return a.tape.record("scale", (a,), a.value * c, ctx=(float(c),))


def _scale_bwd(node: TapeNode, g: np.ndarray):
    (c,) = node.ctx
    return (g * c,)


def sum_all(a: Var) -> Var:
    """Sum of all elements, as a scalar-shaped (1, 1, 1, 1) tensor."""
    out = a.value.sum().reshape(1, 1, 1, 1)
    return a.tape.record("sum_all", (a,), out, ctx=(a.value.shape,))


def _sum_all_bwd(node: TapeNode, g: np.ndarray):
    (shape,) = node.ctx
    out = np.empty(shape, dtype=g.dtype)
    out[...] = g.reshape(())
    return (out,)


def concat_channels(parts: list[Var]) -> Var:
    if len(parts) == 0:
        raise ShapeError("concat_channels needs at least one part")
    first = parts[0].value
    for k, p in enumerate(parts[1:], start=1):
        if (p.value.shape[0],) + p.value.shape[2:] != (first.shape[0],) + first.shape[2:]:
            raise ShapeError(
                f"concat_channels n/h/w mismatch: part 0 is {first.shape}, "
                f"part {k} is {p.value.shape}"
            )
    widths = tuple(p.value.shape[1] for p in parts)
    if len(parts) == 1:
        out = parts[0].value.copy()
    else:
        out = np.concatenate([p.value for p in parts], axis=1)
    return parts[0].tape.record("concat_channels", parts, out, ctx=(widths,))


def _concat_channels_bwd(node: TapeNode, g: np.ndarray):
    (widths,) = node.ctx
    grads = []
    start = 0
    for c in widths:
        grads.append(g[:, start:start + c])
        start += c
    return tuple(grads)


def channel_scale(x: Var, w: Var) -> Var:
    xv, wv = x.value, w.value
    if wv.shape != (xv.shape[0], xv.shape[1], 1, 1):
        raise ShapeError(
            f"channel_scale weight shape {wv.shape} does not match "
            f"({xv.shape[0]}, {xv.shape[1]}, 1, 1)"
        )
    return x.tape.record("channel_scale", (x, w), xv * wv, ctx=(xv, wv))


def _channel_scale_bwd(node: TapeNode, g: np.ndarray):
    xv, wv = node.ctx
    return g * wv, (g * xv).sum(axis=(2, 3), keepdims=True)


def conv2d(x: Var, weight: Var, bias: Var) -> Var:
    out = _conv2d_fwd(x.value, weight.value, bias.value)
    return x.tape.record("conv2d", (x, weight, bias), out,
                         ctx=(x.value, weight.value))


def _conv2d_op_bwd(node: TapeNode, g: np.ndarray):
    xv, wv = node.ctx
    return _conv2d_bwd(g, xv, wv)


def maxpool2(x: Var) -> Var:
    out, idx = _maxpool2_fwd(x.value)
    return x.tape.record("maxpool2", (x,), out, ctx=(idx, x.value.shape))


def _maxpool2_op_bwd(node: TapeNode, g: np.ndarray):
    idx, in_shape = node.ctx
    return (_maxpool2_bwd(g, idx, in_shape),)


def upsample_nearest2(x: Var) -> Var:
    return x.tape.record("upsample_nearest2", (x,), _upsample_nearest2_fwd(x.value))


def _upsample_nearest2_op_bwd(node: TapeNode, g: np.ndarray):
    return (_upsample_nearest2_bwd(g),)


def batchnorm2d(x: Var, gamma: Var, beta: Var, state: BatchNormState,
                training: bool) -> Var:
    out, xhat, inv = _batchnorm2d_fwd(x.value, gamma.value, beta.value,
                                      state, training)
    return x.tape.record("batchnorm2d", (x, gamma, beta), out,
                         ctx=(xhat, inv, gamma.value, training))


def _batchnorm2d_op_bwd(node: TapeNode, g: np.ndarray):
    xhat, inv, gamma, training = node.ctx
    return _batchnorm2d_bwd(g, xhat, inv, gamma, training)


def relu(x: Var) -> Var:
    return x.tape.record("relu", (x,), _relu_fwd(x.value), ctx=(x.value,))


def _relu_op_bwd(node: TapeNode, g: np.ndarray):
    (xv,) = node.ctx
    return (_relu_bwd(g, xv),)


def sigmoid(x: Var) -> Var:
    out = _sigmoid_fwd(x.value)
    return x.tape.record("sigmoid", (x,), out, ctx=(out,))


def _sigmoid_op_bwd(node: TapeNode, g: np.ndarray):
    (s,) = node.ctx
    return (_sigmoid_bwd(g, s),)


def global_avg_pool(x: Var) -> Var:
    return x.tape.record("global_avg_pool", (x,), _global_avg_pool_fwd(x.value),
                         ctx=(x.value.shape,))


def _global_avg_pool_op_bwd(node: TapeNode, g: np.ndarray):
    (in_shape,) = node.ctx
    return (_global_avg_pool_bwd(g, in_shape),)


register_backward("add", _add_bwd)
register_backward("mul", _mul_bwd)
register_backward("scale", _scale_bwd)
register_backward("sum_all", _sum_all_bwd)
register_backward("concat_channels", _concat_channels_bwd)
register_backward("channel_scale", _channel_scale_bwd)
register_backward("conv2d", _conv2d_op_bwd)
register_backward("maxpool2", _maxpool2_op_bwd)
register_backward("upsample_nearest2", _upsample_nearest2_op_bwd)
register_backward("batchnorm2d", _batchnorm2d_op_bwd)
register_backward("relu", _relu_op_bwd)
register_backward("sigmoid", _sigmoid_op_bwd)
register_backward("global_avg_pool", _global_avg_pool_op_bwd)
