"""Reverse-mode differentiation over a define-by-run tape.

Every differentiable op takes :class:`Var` arguments, computes its value
eagerly and appends a :class:`Node` to the shared :class:`Tape`. The node
keeps a vector-Jacobian closure and a replay closure, so the tape can both
be differentiated and re-executed from its leaves.

    tape = Tape()
    w = tape.param(np.ones(3), "w")
    loss = total(mul(w, w))
    grads = tape.backward(loss)        # {"w": array([2., 2., 2.])}
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import tensor as T
from .convolution import ConvSpec, conv2d as _conv2d, conv2d_grad as _conv2d_grad
from .tensor import ShapeError

LOG_FLOOR = 1e-12


class Var:
    __slots__ = ("tape", "id", "value", "name")

    def __init__(self, tape, id_, value, name=None):
        self.tape = tape
        self.id = id_
        self.value = value
        self.name = name

    @property
    def shape(self):
        return self.value.shape

    def __repr__(self):
        return f"Var(id={self.id}, name={self.name!r}, shape={self.value.shape})"


@dataclass
class Node:
    op: str
    inputs: tuple[int, ...]
    vjp: Callable | None = field(default=None, repr=False)
    replay: Callable | None = field(default=None, repr=False)


class Tape:
    """Ordered record of operations. Node ids are topologically sorted by construction.

    With ``record=False`` values are still computed but nothing is kept,
    which is what inference uses.
    """

    def __init__(self, record=True):
        self.record = record
        self.nodes: list[Node] = []
        self.values: list[np.ndarray] = []
        self.params: dict[str, int] = {}
        self._count = 0

    def _push(self, node, value, name=None):
        idx = self._count
        self._count += 1
        if self.record:
            self.nodes.append(node)
            self.values.append(value)
        return Var(self, idx, value, name)

    def param(self, value, name):
        """Leaf that receives a gradient under ``name``."""
        v = self._push(Node("param", ()), value, name)
        if self.record:
            if name in self.params:
                raise ValueError(f"duplicate parameter name {name!r}")
            self.params[name] = v.id
        return v

    def constant(self, value, name=None):
        return self._push(Node("const", ()), value, name)

    def apply(self, op, inputs, value, vjp, replay=None):
        return self._push(Node(op, tuple(v.id for v in inputs), vjp, replay), value)

    def replay(self) -> list[np.ndarray]:
        """Re-execute every recorded node from the recorded leaf values."""
        vals: list[np.ndarray] = []
        for node, recorded in zip(self.nodes, self.values):
            if not node.inputs and node.replay is None:
                vals.append(recorded)
            else:
                vals.append(node.replay(*[vals[i] for i in node.inputs]))
        return vals

    def backward(self, output: Var, seed=None, wrt=None) -> dict[str, np.ndarray]:
        return backward(self, seed, output=output, wrt=wrt)


def backward(tape: Tape, seed_grad=None, output: Var | None = None, wrt=None):
    """Propagate ``seed_grad`` from ``output`` (default: last node) back to the leaves.

    Returns gradients keyed by parameter name, or by ``Var.name`` / id for
    the Vars listed in ``wrt``. Parameters the output does not depend on
    get zero gradients.
    """
    if not tape.record:
        raise RuntimeError("cannot differentiate a tape created with record=False")
    if output is None:
        output_id = len(tape.nodes) - 1
    else:
        if output.tape is not tape:
            raise ValueError("output belongs to a different tape")
        output_id = output.id
    out_val = tape.values[output_id]
    if seed_grad is None:
        if out_val.size != 1:
            raise ShapeError(f"seed required for non-scalar output of shape {out_val.shape}")
        seed_grad = np.ones_like(out_val)
    seed_grad = np.asarray(seed_grad)
    if seed_grad.shape != out_val.shape:
        raise ShapeError(f"seed shape {seed_grad.shape} != output shape {out_val.shape}")

    grads: list[np.ndarray | None] = [None] * (output_id + 1)
    grads[output_id] = seed_grad.astype(out_val.dtype, copy=False)
    for idx in range(output_id, -1, -1):
        g = grads[idx]
        node = tape.nodes[idx]
        if g is None or node.vjp is None:
            continue
        in_grads = node.vjp(g)
        for src, gi in zip(node.inputs, in_grads):
            if gi is None:
                continue
            # fan-out accumulation happens in descending node-id order
            grads[src] = gi if grads[src] is None else grads[src] + gi

    def grad_of(i):
        if i < len(grads) and grads[i] is not None:
            return grads[i]
        return np.zeros_like(tape.values[i])

    if wrt is None:
        return {name: grad_of(i) for name, i in tape.params.items()}
    return {(v.name if v.name is not None else v.id): grad_of(v.id) for v in wrt}


# ---------------------------------------------------------------------------
# differentiable ops
# ---------------------------------------------------------------------------

def add(a: Var, b: Var) -> Var:
    if a.shape != b.shape:
        raise ShapeError(f"add operands differ: {a.shape} vs {b.shape}")
    return a.tape.apply("add", (a, b), a.value + b.value,
                        lambda g: (g, g), lambda x, y: x + y)


def mul(a: Var, b: Var) -> Var:
    if a.shape != b.shape:
        raise ShapeError(f"mul operands differ: {a.shape} vs {b.shape}")
    av, bv = a.value, b.value
    return a.tape.apply("mul", (a, b), av * bv,
                        lambda g: (g * bv, g * av), lambda x, y: x * y)


def total(a: Var) -> Var:
    """Sum of all entries, as a shape-(1,) value."""
    av = a.value
    out = np.array([av.astype(np.float64).sum()], dtype=av.dtype)
    return a.tape.apply("sum", (a,), out,
                        lambda g: (np.full_like(av, g[0]),),
                        lambda x: np.array([x.astype(np.float64).sum()], dtype=x.dtype))


def weighted_sum(a: Var, weights) -> Var:
    """``sum(a * weights)`` for a constant weight array."""
    w = np.asarray(weights, dtype=a.value.dtype)
    if w.shape != a.shape:
        raise ShapeError(f"weights {w.shape} do not match {a.shape}")
    def fwd(x):
        return np.array([(x.astype(np.float64) * w).sum()], dtype=x.dtype)
    return a.tape.apply("wsum", (a,), fwd(a.value), lambda g: (g[0] * w,), fwd)


def relu(a: Var) -> Var:
    av = a.value
    return a.tape.apply("relu", (a,), T.relu(av),
                        lambda g: (T.relu_backward(av, g),), T.relu)


def conv2d(x: Var, w: Var, b: Var | None, spec: ConvSpec) -> Var:
    xv, wv = x.value, w.value
    bv = None if b is None else b.value
    out = _conv2d(xv, wv, bv, spec)
    # the input image never needs a gradient during training
    need_input = not (x.tape.record and x.tape.nodes[x.id].op == "const")

    def vjp(g):
        gi, gk, gb = _conv2d_grad(xv, wv, spec, g, need_input=need_input)
        return (gi, gk) if b is None else (gi, gk, gb)

    inputs = (x, w) if b is None else (x, w, b)
    replay = (lambda xi, wi: _conv2d(xi, wi, None, spec)) if b is None else \
        (lambda xi, wi, bi: _conv2d(xi, wi, bi, spec))
    return x.tape.apply("conv2d", inputs, out, vjp, replay)


def max_pool2d(x: Var, window, stride, padding=0) -> Var:
    xv = x.value
    out = T.max_pool2d(xv, window, stride, padding)
    return x.tape.apply("max_pool2d", (x,), out,
                        lambda g: (T.max_pool2d_backward(xv, g, window, stride, padding),),
                        lambda xi: T.max_pool2d(xi, window, stride, padding))


def global_avg_pool2d(x: Var) -> Var:
    xv = x.value
    return x.tape.apply("gap", (x,), T.global_avg_pool2d(xv),
                        lambda g: (T.global_avg_pool2d_backward(xv, g),), T.global_avg_pool2d)


def flatten(x: Var) -> Var:
    shape = x.shape
    return x.tape.apply("flatten", (x,), x.value.reshape(shape[0], -1),
                        lambda g: (g.reshape(shape),), lambda xi: xi.reshape(shape[0], -1))


def affine(x: Var, w: Var, b: Var) -> Var:
    xv, wv = x.value, w.value

    def vjp(g):
        return T.affine_backward(xv, wv, g)

    return x.tape.apply("affine", (x, w, b), T.affine(xv, wv, b.value), vjp, T.affine)


def batch_norm(x: Var, gamma: Var, beta: Var, stats: T.RunningStats, mode="train", eps=1e-5) -> Var:
    out, cache = T.batch_norm(x.value, gamma.value, beta.value, stats, mode, eps)
    # replay must not touch the running statistics a second time
    frozen = T.RunningStats(stats.mean.copy(), stats.var.copy(), stats.momentum)

    def replay(xi, gi, bi):
        return T.batch_norm(xi, gi, bi, frozen, mode, eps, update=False)[0]

    return x.tape.apply("batch_norm", (x, gamma, beta), out,
                        lambda g: T.batch_norm_backward(cache, g, mode), replay)


def softmax_cross_entropy(logits: Var, labels, class_weights=None) -> Var:
    """Mean sparse categorical cross-entropy of softmax(logits); returns shape (1,).

    With ``class_weights`` the mean is weighted by the weight of each sample's label.
    """
    from .training import scce_loss, softmax

    labels = np.asarray(labels, dtype=np.int64)
    lv = logits.value
    n, c = lv.shape
    if class_weights is None:
        sw = np.full(n, 1.0 / n)
    else:
        cw = np.asarray(class_weights, dtype=np.float64)
        if cw.shape != (c,):
            raise ShapeError(f"class_weights must have shape ({c},), got {cw.shape}")
        sw = cw[labels] / cw[labels].sum()

    def fwd(li):
        p = softmax(li)
        if class_weights is None:
            return p, np.array([scce_loss(p, labels)], dtype=li.dtype)
        picked = np.maximum(p[np.arange(n), labels], LOG_FLOOR)
        return p, np.array([np.sum(sw * -np.log(picked))], dtype=li.dtype)

    probs, loss = fwd(lv)

    def vjp(g):
        onehot = np.zeros((n, c))
        onehot[np.arange(n), labels] = 1.0
        return (((probs - onehot) * (sw[:, None] * g[0])).astype(lv.dtype),)

    return logits.tape.apply("scce", (logits,), loss, vjp, lambda li: fwd(li)[1])


# ---------------------------------------------------------------------------
# finite-difference checking
# ---------------------------------------------------------------------------

@dataclass
class GradientReport:
    errors: dict[str, float]
    worst: str | None
    max_error: float
    analytic: dict[str, np.ndarray] = field(repr=False, default_factory=dict)
    numeric: dict[str, np.ndarray] = field(repr=False, default_factory=dict)


def relative_error(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(b)), 1e-8)
    return np.abs(a - b) / denom


def gradient_check(fn, params: dict[str, np.ndarray], step=1e-6) -> GradientReport:
    """Compare backward() against central differences for every parameter entry.

    ``fn(tape, vars)`` builds a scalar objective from the dict of parameter
    Vars. Parameters must be float64.
    """
    if not 1e-7 <= step <= 1e-3:
        raise ValueError(f"step must lie in [1e-7, 1e-3], got {step}")
    for name, p in params.items():
        if p.dtype != np.float64:
            raise TypeError(f"parameter {name!r} must be float64, got {p.dtype}")

    def evaluate(values, record):
        tape = Tape(record=record)
        vs = {k: tape.param(v, k) for k, v in values.items()}
        out = fn(tape, vs)
        if out.value.size != 1:
            raise ShapeError(f"objective must be scalar, got shape {out.value.shape}")
        return tape, out

    tape, out = evaluate(params, True)
    analytic = tape.backward(out)

    numeric = {}
    work = {k: v.copy() for k, v in params.items()}
    for name, p in work.items():
        g = np.zeros_like(p)
        flat = p.reshape(-1)
        gflat = g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            fp = float(evaluate(work, False)[1].value.reshape(-1)[0])
            flat[i] = orig - step
            fm = float(evaluate(work, False)[1].value.reshape(-1)[0])
            flat[i] = orig
            gflat[i] = (fp - fm) / (2 * step)
        numeric[name] = g

    errors = {k: float(relative_error(analytic[k], numeric[k]).max(initial=0.0)) for k in params}
    worst = max(errors, key=errors.get) if errors else None
    return GradientReport(errors, worst, errors[worst] if worst else 0.0, analytic, numeric)
