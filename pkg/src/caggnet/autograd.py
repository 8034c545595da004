"""Tape-based reverse-mode differentiation.

A `Tape` is an append-only record of every differentiable operation
executed during a forward pass. Each recorded node stores the ids of its
operand tensors, whatever forward values its backward rule needs, and the
id of the tensor it produced. Ids index into the tape's value table;
leaves (inputs and parameters) are registered with `Tape.leaf` and have no
node. Running `backward` walks the node list in reverse, applying one
registered backward rule per operation kind and summing gradient
contributions over all paths.

The actual rules are registered by the modules that own the kernels
(`functional` for layer and tensor ops, `train` for the losses); this
module only provides the machinery plus the finite-difference oracle used
to validate every rule.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from typing import Callable, Iterable, Mapping

import numpy as np

from .tensor_core import Tensor4


class AutogradError(ValueError):
    """Raised for malformed tapes, bad loss shapes, or failed preconditions."""


@dataclass(frozen=True)
class TapeNode:
    """One recorded operation: inputs -> output plus saved context."""

    op: str
    inputs: tuple[int, ...]
    out: int
    ctx: tuple


@dataclass(frozen=True)
class Var:
    """Handle to a tensor living on a tape."""

    tape: "Tape"
    id: int

    @property
    def value(self) -> np.ndarray:
        return self.tape.values[self.id]

    @property
    def shape(self) -> tuple[int, ...]:
        return self.tape.values[self.id].shape


# One backward rule per differentiable op kind. A rule receives the node
# and the gradient w.r.t. the node's output and returns one gradient array
# (or None) per input, in input order.
BackwardRule = Callable[[TapeNode, np.ndarray], tuple]
RULES: dict[str, BackwardRule] = {}


def register_backward(op: str, rule: BackwardRule) -> None:
    if op in RULES:
        raise AutogradError(f"backward rule for {op!r} registered twice")
    RULES[op] = rule


class Tape:
    """Append-only operation record for one forward pass."""

    def __init__(self):
        self.values: list[np.ndarray] = []
        self.nodes: list[TapeNode] = []
        self.dtype: np.dtype | None = None
        self._leaf_ids: dict[int, int] = {}

    def _push(self, value: np.ndarray) -> int:
        if self.dtype is None:
            self.dtype = value.dtype
        elif value.dtype != self.dtype:
            raise AutogradError(
                f"mixed dtypes on tape: {self.dtype} vs {value.dtype}"
            )
        self.values.append(value)
        return len(self.values) - 1

    def leaf(self, value) -> Var:
        """Register an input or parameter array; repeated registration of
        the same array object returns the same id."""
        if isinstance(value, Tensor4):
            value = value.data
        value = np.asarray(value)
        if value.dtype not in (np.float32, np.float64):
            raise AutogradError(f"leaf dtype {value.dtype} is not float32/float64")
        key = id(value)
        if key in self._leaf_ids:
            return Var(self, self._leaf_ids[key])
        tid = self._push(value)
        self._leaf_ids[key] = tid
        return Var(self, tid)

    def leaf_id_for(self, value: np.ndarray) -> int | None:
        """Tape id of a previously registered leaf array, or None."""
        return self._leaf_ids.get(id(value))

    def record(self, op: str, inputs: Iterable[Var], out_value: np.ndarray,
               ctx: tuple = ()) -> Var:
        """Append an op node; returns a Var for its output."""
        if op not in RULES:
            raise AutogradError(f"op {op!r} has no registered backward rule")
        ids = []
        for v in inputs:
            if v.tape is not self:
                raise AutogradError("operands live on different tapes")
            ids.append(v.id)
        out = self._push(out_value)
        self.nodes.append(TapeNode(op, tuple(ids), out, ctx))
        return Var(self, out)


class GradStore:
    """Gradients keyed by tape id; an absent entry means a zero gradient."""

    def __init__(self, grads: dict[int, np.ndarray]):
        self._grads = grads

    def get(self, tid: int) -> np.ndarray | None:
        return self._grads.get(tid)

    def __contains__(self, tid: int) -> bool:
        return tid in self._grads

    def items(self):
        return self._grads.items()


def backward(tape: Tape, loss) -> GradStore:
    """Reverse-accumulate d(loss)/d(x) for every tensor on the tape.

    The loss must be scalar-shaped (1, 1, 1, 1). Gradients over multiple
    paths are summed; traversal order is fixed (reverse recording order,
    inputs in recorded order) so replays are bit-identical.
    """
    loss_id = loss.id if isinstance(loss, Var) else int(loss)
    if not (0 <= loss_id < len(tape.values)):
        raise AutogradError(f"id {loss_id} is not on this tape")
    loss_val = tape.values[loss_id]
    if loss_val.shape != (1, 1, 1, 1):
        raise AutogradError(
            f"loss must have shape (1, 1, 1, 1), got {loss_val.shape}"
        )
    grads: dict[int, np.ndarray] = {
        loss_id: np.ones((1, 1, 1, 1), dtype=loss_val.dtype)
    }
    for node in reversed(tape.nodes):
        g = grads.get(node.out)
        if g is None:
            continue
        input_grads = RULES[node.op](node, g)
        for tid, ig in zip(node.inputs, input_grads):
            if ig is None:
                continue
            acc = grads.get(tid)
            grads[tid] = ig if acc is None else acc + ig
    return GradStore(grads)


@dataclass
class CheckReport:
    """Outcome of one finite-difference gradient check."""

    op: str
    max_rel_err: float
    worst_coord: tuple[str, int]
    passed: bool

    def to_json(self) -> str:
        return json.dumps({
            "op": self.op,
            "max_rel_err": self.max_rel_err,
            "worst_coord": list(self.worst_coord),
            "passed": self.passed,
        })


def _named_arrays(params) -> list[tuple[str, np.ndarray]]:
    if isinstance(params, Mapping):
        return list(params.items())
    # duck-typed ParamStore: iterate trainable name -> array pairs
    named = getattr(params, "named_trainable", None)
    if named is not None:
        return list(named())
    raise AutogradError("params must be a mapping or expose named_trainable()")


def finite_diff_check(f, params, eps: float = 1e-5, tol: float = 1e-4,
                      max_coords: int = 256, rng=None,
                      name: str = "loss") -> CheckReport:
    """Compare tape gradients against central finite differences.

    `f` is a deterministic scalar function of the parameter arrays. It is
    called as ``f(params, need_grad=True)`` once, returning
    ``(loss, grads)`` with grads keyed by parameter name (missing keys
    mean zero), and as ``f(params)`` for plain evaluations. Parameters
    must be float64; each coordinate is perturbed in place by +-eps and
    the central difference (f(p+eps) - f(p-eps)) / (2 eps) is compared to
    the tape gradient using the relative error |a-b| / max(1, |a|, |b|).
    At most `max_coords` randomly sampled coordinates are checked per
    parameter (all of them when the parameter is small enough).
    """
    if not (1e-6 <= eps <= 1e-3):
        raise AutogradError(f"eps={eps} outside [1e-6, 1e-3]")
    rng = np.random.default_rng(0) if rng is None else rng
    named = _named_arrays(params)
    for pname, arr in named:
        if arr.dtype != np.float64:
            raise AutogradError(
                f"finite_diff_check needs float64 params; {pname} is {arr.dtype}"
            )

    loss0, grads = f(params, need_grad=True)
    if not math.isfinite(loss0):
        raise AutogradError(f"non-finite loss {loss0} at the base point")

    max_rel = 0.0
    worst = ("", -1)
    for pname, arr in named:
        size = arr.size
        if size <= max_coords:
            coords = np.arange(size)
        else:
            coords = np.sort(rng.choice(size, size=max_coords, replace=False))
        flat = arr.reshape(-1)
        gflat = None
        g = grads.get(pname)
        if g is not None:
            gflat = g.reshape(-1)
        for idx in coords:
            orig = flat[idx]
            flat[idx] = orig + eps
            lp = f(params)
            flat[idx] = orig - eps
            lm = f(params)
            flat[idx] = orig
            if not (math.isfinite(lp) and math.isfinite(lm)):
                raise AutogradError(
                    f"non-finite evaluation while perturbing {pname}[{idx}]"
                )
            fd = (lp - lm) / (2.0 * eps)
            tg = 0.0 if gflat is None else float(gflat[idx])
            rel = abs(fd - tg) / max(1.0, abs(fd), abs(tg))
            if rel > max_rel:
                max_rel = rel
                worst = (pname, int(idx))
    return CheckReport(op=name, max_rel_err=max_rel, worst_coord=worst,
                       passed=max_rel <= tol)
