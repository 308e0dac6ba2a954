"""Dense tensors on a reverse-mode tape, plus SGD with momentum.

Every trainable quantity in the package lives on a :class:`Tape`. A tape is an
append-only list of nodes; each node records the primitive that produced it,
the ids of its inputs, the forward value and whatever the backward rule needs.
Node ids are list indices, so inputs always precede outputs and ``backward``
just walks the list in reverse.

Values are float64 numpy arrays. Scalars have shape ``()``.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Any, Callable

import numpy as np

logger = logging.getLogger(__name__)


class TapeError(ValueError):
    """Raised on shape mismatches, degenerate inputs and non-finite values."""


@dataclass
class Node:
    kind: str
    inputs: tuple[int, ...]
    value: np.ndarray
    cache: dict[str, Any] = field(default_factory=dict)
    name: str | None = None
    requires_grad: bool = False


@dataclass(frozen=True)
class Primitive:
    forward: Callable[..., tuple[np.ndarray, dict]]
    backward: Callable[..., tuple[np.ndarray | None, ...]]


PRIMITIVES: dict[str, Primitive] = {}


def _primitive(kind):
    def register(cls):
        PRIMITIVES[kind] = Primitive(cls.forward, cls.backward)
        return cls

    return register


def _need_2d(kind, *arrays):
    for a in arrays:
        if a.ndim != 2:
            raise TapeError(f"{kind}: expected 2-D input, got shape {a.shape}")


@_primitive("matmul")
class _MatMul:
    @staticmethod
    def forward(a, b):
        _need_2d("matmul", a, b)
        if a.shape[1] != b.shape[0]:
            raise TapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
        return a @ b, {}

    @staticmethod
    def backward(g, out, cache, a, b):
        return g @ b.T, a.T @ g


@_primitive("transpose")
class _Transpose:
    @staticmethod
    def forward(a):
        _need_2d("transpose", a)
        return np.ascontiguousarray(a.T), {}

    @staticmethod
    def backward(g, out, cache, a):
        return (np.ascontiguousarray(g.T),)


@_primitive("add_bias")
class _AddBias:
    @staticmethod
    def forward(x, b):
        _need_2d("add_bias", x)
        if b.shape != (x.shape[1],):
            raise TapeError(f"add_bias: bias shape {b.shape} does not match input {x.shape}")
        return x + b, {}

    @staticmethod
    def backward(g, out, cache, x, b):
        return g, g.sum(axis=0)


@_primitive("add")
class _Add:
    @staticmethod
    def forward(a, b):
        if a.shape != b.shape:
            raise TapeError(f"add: shapes differ {a.shape} vs {b.shape}")
        return a + b, {}

    @staticmethod
    def backward(g, out, cache, a, b):
        return g, g


@_primitive("mul")
class _Mul:
    @staticmethod
    def forward(a, b):
        if a.shape != b.shape:
            raise TapeError(f"mul: shapes differ {a.shape} vs {b.shape}")
        return a * b, {}

    @staticmethod
    def backward(g, out, cache, a, b):
        return g * b, g * a


@_primitive("relu")
class _Relu:
    @staticmethod
    def forward(x):
        return np.maximum(x, 0.0), {}

    @staticmethod
    def backward(g, out, cache, x):
        return (g * (x > 0.0),)


@_primitive("l2_normalize")
class _L2Normalize:
    """Row-wise for matrices, whole-vector for 1-D input."""

    @staticmethod
    def forward(x):
        if x.ndim not in (1, 2):
            raise TapeError(f"l2_normalize: expected 1-D or 2-D input, got shape {x.shape}")
        norms = np.sqrt(np.sum(x * x, axis=-1, keepdims=True))
        if np.any(norms == 0.0):
            raise TapeError("l2_normalize: zero-norm input row")
        y = x / norms
        return y, {"norms": norms}

    @staticmethod
    def backward(g, out, cache, x):
        dot = np.sum(g * out, axis=-1, keepdims=True)
        return ((g - out * dot) / cache["norms"],)


def _softmax_rows(x):
    shifted = x - np.max(x, axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / np.sum(e, axis=-1, keepdims=True)


@_primitive("softmax")
class _Softmax:
    @staticmethod
    def forward(x):
        if x.ndim not in (1, 2):
            raise TapeError(f"softmax: expected 1-D or 2-D input, got shape {x.shape}")
        return _softmax_rows(x), {}

    @staticmethod
    def backward(g, out, cache, x):
        dot = np.sum(g * out, axis=-1, keepdims=True)
        return (out * (g - dot),)


@_primitive("log_softmax")
class _LogSoftmax:
    @staticmethod
    def forward(x):
        if x.ndim not in (1, 2):
            raise TapeError(f"log_softmax: expected 1-D or 2-D input, got shape {x.shape}")
        m = np.max(x, axis=-1, keepdims=True)
        lse = m + np.log(np.sum(np.exp(x - m), axis=-1, keepdims=True))
        return x - lse, {}

    @staticmethod
    def backward(g, out, cache, x):
        return (g - np.exp(out) * np.sum(g, axis=-1, keepdims=True),)


@_primitive("log")
class _Log:
    @staticmethod
    def forward(x):
        if np.any(x <= 0.0):
            raise TapeError("log: non-positive input")
        return np.log(x), {}

    @staticmethod
    def backward(g, out, cache, x):
        return (g / x,)


@_primitive("exp")
class _Exp:
    @staticmethod
    def forward(x):
        return np.exp(x), {}

    @staticmethod
    def backward(g, out, cache, x):
        return (g * out,)


@_primitive("scale")
class _Scale:
    @staticmethod
    def forward(x, *, factor):
        return x * float(factor), {"factor": float(factor)}

    @staticmethod
    def backward(g, out, cache, x):
        return (g * cache["factor"],)


@_primitive("sum")
class _Sum:
    @staticmethod
    def forward(x):
        return np.asarray(np.sum(x), dtype=np.float64), {}

    @staticmethod
    def backward(g, out, cache, x):
        return (np.full(x.shape, float(g)),)


@_primitive("mean")
class _Mean:
    @staticmethod
    def forward(x):
        if x.size == 0:
            raise TapeError("mean: empty input")
        return np.asarray(np.sum(x) / x.size, dtype=np.float64), {}

    @staticmethod
    def backward(g, out, cache, x):
        return (np.full(x.shape, float(g) / x.size),)


@_primitive("concat_rows")
class _ConcatRows:
    @staticmethod
    def forward(*xs):
        _need_2d("concat_rows", *xs)
        widths = {x.shape[1] for x in xs}
        if len(widths) != 1:
            raise TapeError(f"concat_rows: column counts differ {[x.shape for x in xs]}")
        return np.concatenate(xs, axis=0), {"rows": [x.shape[0] for x in xs]}

    @staticmethod
    def backward(g, out, cache, *xs):
        bounds = np.cumsum([0] + cache["rows"])
        return tuple(g[bounds[i] : bounds[i + 1]] for i in range(len(xs)))


@_primitive("pick")
class _Pick:
    """``out[i] = x[i, index[i]]``."""

    @staticmethod
    def forward(x, *, index):
        _need_2d("pick", x)
        index = np.asarray(index, dtype=np.int64)
        if index.shape != (x.shape[0],):
            raise TapeError(f"pick: index shape {index.shape} does not match rows of {x.shape}")
        if np.any(index < 0) or np.any(index >= x.shape[1]):
            raise TapeError(f"pick: index out of range for {x.shape}")
        return x[np.arange(x.shape[0]), index], {"index": index}

    @staticmethod
    def backward(g, out, cache, x):
        gx = np.zeros_like(x)
        gx[np.arange(x.shape[0]), cache["index"]] = g
        return (gx,)


@_primitive("masked_logsumexp")
class _MaskedLogSumExp:
    """Row-wise log-sum-exp over entries where ``mask`` is true; empty rows give 0."""

    @staticmethod
    def forward(x, *, mask):
        _need_2d("masked_logsumexp", x)
        mask = np.asarray(mask, dtype=bool)
        if mask.shape != x.shape:
            raise TapeError(f"masked_logsumexp: mask shape {mask.shape} vs input {x.shape}")
        masked = np.where(mask, x, -np.inf)
        empty = ~mask.any(axis=1)
        m = np.max(np.where(empty[:, None], 0.0, masked), axis=1)
        e = np.where(mask, np.exp(masked - m[:, None]), 0.0)
        s = e.sum(axis=1)
        s[empty] = 1.0
        out = m + np.log(s)
        out[empty] = 0.0
        weights = e / s[:, None]
        return out, {"weights": weights}

    @staticmethod
    def backward(g, out, cache, x):
        return (cache["weights"] * g[:, None],)


@_primitive("linearized")
class _Linearized:
    """Scalar with an externally supplied value and gradient.

    Used where the value comes from an inner solver whose gradient is known in
    closed form (Sinkhorn dual potentials), so the solver is not unrolled.
    """

    @staticmethod
    def forward(x, *, value, grad):
        grad = np.asarray(grad, dtype=np.float64)
        if grad.shape != x.shape:
            raise TapeError(f"linearized: gradient shape {grad.shape} vs input {x.shape}")
        return np.asarray(float(value), dtype=np.float64), {"grad": grad}

    @staticmethod
    def backward(g, out, cache, x):
        return (cache["grad"] * float(g),)


class Tape:
    """Append-only computation record.

    Leaves are created with :meth:`param` (trainable, named) or :meth:`const`.
    Everything else goes through :meth:`apply` or the thin helpers below it.
    """

    def __init__(self):
        self.nodes: list[Node] = []
        self.grads: list[np.ndarray | None] | None = None

    def __len__(self):
        return len(self.nodes)

    def _push(self, node):
        self.nodes.append(node)
        return len(self.nodes) - 1

    def param(self, name, value):
        value = np.array(value, dtype=np.float64)
        if not np.all(np.isfinite(value)):
            raise TapeError(f"parameter {name!r} has non-finite entries")
        return self._push(Node("param", (), value, name=name, requires_grad=True))

    def const(self, value):
        value = np.array(value, dtype=np.float64)
        if not np.all(np.isfinite(value)):
            raise TapeError("constant has non-finite entries")
        return self._push(Node("const", (), value))

    def value(self, nid):
        return self.nodes[nid].value

    def apply(self, kind, *inputs, **attrs):
        if kind not in PRIMITIVES:
            raise TapeError(f"unknown primitive {kind!r}")
        for i in inputs:
            if not 0 <= i < len(self.nodes):
                raise TapeError(f"{kind}: unknown input node {i}")
        args = [self.nodes[i].value for i in inputs]
        try:
            # overflow is reported below as a non-finite output
            with np.errstate(over="ignore", invalid="ignore"):
                out, cache = PRIMITIVES[kind].forward(*args, **attrs)
        except TapeError as exc:
            if str(exc).startswith(kind):
                raise
            raise TapeError(f"{kind}: {exc}") from None
        out = np.asarray(out, dtype=np.float64)
        if not np.all(np.isfinite(out)):
            raise TapeError(f"{kind}: non-finite output for input shapes {[a.shape for a in args]}")
        requires_grad = any(self.nodes[i].requires_grad for i in inputs)
        return self._push(Node(kind, tuple(inputs), out, cache, requires_grad=requires_grad))

    # helpers
    def matmul(self, a, b):
        return self.apply("matmul", a, b)

    def transpose(self, a):
        return self.apply("transpose", a)

    def add_bias(self, x, b):
        return self.apply("add_bias", x, b)

    def add(self, a, b):
        return self.apply("add", a, b)

    def mul(self, a, b):
        return self.apply("mul", a, b)

    def relu(self, x):
        return self.apply("relu", x)

    def l2_normalize(self, x):
        return self.apply("l2_normalize", x)

    def softmax(self, x):
        return self.apply("softmax", x)

    def log_softmax(self, x):
        return self.apply("log_softmax", x)

    def log(self, x):
        return self.apply("log", x)

    def exp(self, x):
        return self.apply("exp", x)

    def scale(self, x, factor):
        return self.apply("scale", x, factor=factor)

    def sum(self, x):
        return self.apply("sum", x)

    def mean(self, x):
        return self.apply("mean", x)

    def concat_rows(self, *xs):
        return self.apply("concat_rows", *xs)

    def pick(self, x, index):
        return self.apply("pick", x, index=index)

    def masked_logsumexp(self, x, mask):
        return self.apply("masked_logsumexp", x, mask=mask)

    def linearized(self, x, value, grad):
        return self.apply("linearized", x, value=value, grad=grad)

    def backward(self, root):
        """Populate ``self.grads`` from scalar ``root``; return gradients of named params.

        Parameters that ``root`` does not depend on get exact zeros.
        """
        out = self.nodes[root].value
        if out.size != 1:
            raise TapeError(f"backward: root must be scalar, got shape {out.shape}")
        grads: list[np.ndarray | None] = [None] * len(self.nodes)
        grads[root] = np.ones_like(out)
        for nid in range(root, -1, -1):
            node = self.nodes[nid]
            g = grads[nid]
            if g is None or not node.inputs or not node.requires_grad:
                continue
            args = [self.nodes[i].value for i in node.inputs]
            in_grads = PRIMITIVES[node.kind].backward(g, node.value, node.cache, *args)
            for i, gi in zip(node.inputs, in_grads):
                if gi is None or not self.nodes[i].requires_grad:
                    continue
                grads[i] = gi if grads[i] is None else grads[i] + gi
        self.grads = grads
        result = {}
        for nid, node in enumerate(self.nodes):
            if node.kind == "param":
                g = grads[nid]
                result[node.name] = np.zeros_like(node.value) if g is None else g
        return result


def cross_entropy(tape, logits, labels):
    """Mean softmax cross-entropy of ``logits`` (N x C node) against integer labels."""
    logp = tape.log_softmax(logits)
    picked = tape.pick(logp, labels)
    return tape.scale(tape.mean(picked), -1.0)


@dataclass
class SGD:
    """SGD with momentum, coupled weight decay, linear warmup and step milestones.

    ``milestones`` is a list of ``(iteration, multiplier)``; every milestone at or
    before the current iteration multiplies the learning rate. ``lr_scale``
    maps parameter names to a per-parameter learning-rate multiplier.
    """

    lr: float
    momentum: float = 0.9
    weight_decay: float = 1e-4
    warmup_iters: int = 0
    milestones: list[tuple[int, float]] = field(default_factory=list)
    velocity: dict[str, np.ndarray] = field(default_factory=dict)
    lr_scale: dict[str, float] = field(default_factory=dict)

    def __post_init__(self):
        if not self.lr > 0:
            raise ValueError(f"lr must be positive, got {self.lr}")
        if not 0 <= self.momentum < 1:
            raise ValueError(f"momentum must lie in [0, 1), got {self.momentum}")
        if self.weight_decay < 0:
            raise ValueError("weight_decay must be non-negative")
        if self.warmup_iters < 0:
            raise ValueError("warmup_iters must be non-negative")
        for it, mult in self.milestones:
            if not mult > 0:
                raise ValueError(f"milestone multiplier must be positive, got {mult} at {it}")
        for name, scale in self.lr_scale.items():
            if not scale > 0:
                raise ValueError(f"lr_scale for {name!r} must be positive, got {scale}")

    def effective_lr(self, it):
        lr = self.lr
        if self.warmup_iters > 0 and it < self.warmup_iters:
            lr *= (it + 1) / self.warmup_iters
        for at, mult in self.milestones:
            if it >= at:
                lr *= mult
        return lr

    def step(self, params, grads, it):
        """Update ``params`` (a name -> array dict) in place of its values; return it."""
        lr = self.effective_lr(it)
        for name in sorted(grads):
            g = grads[name]
            w = params[name]
            if g.shape != w.shape:
                raise TapeError(f"sgd: gradient shape {g.shape} != parameter {name!r} shape {w.shape}")
            if not np.all(np.isfinite(g)):
                raise FloatingPointError(f"sgd: non-finite gradient for parameter {name!r}")
            v = self.velocity.get(name)
            if v is None:
                v = np.zeros_like(w)
            v = self.momentum * v + g + self.weight_decay * w
            self.velocity[name] = v
            params[name] = w - lr * self.lr_scale.get(name, 1.0) * v
        return params
