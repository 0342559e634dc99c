"""Dense float64 tensors with taped reverse-mode differentiation.

The operation set is closed: add, mul, matmul, transpose, reshape, slice,
concat, softmax, log, exp, mean, sum, layer_norm, gelu, power, sqrt and
cosine_similarity. Each op carries a hand-written vector-Jacobian product,
so the finite-difference checker in `grad_check` can cover the entire
surface. Everything runs in double precision; the point is verifiability,
not speed.
"""

from __future__ import annotations

import numpy as np
from scipy.special import erf

__all__ = [
    "Tensor",
    "Tape",
    "NdiffError",
    "ShapeError",
    "DomainError",
    "constant",
    "forward",
    "backward",
    "grad_check",
    "OP_KINDS",
]

_INV_SQRT2 = 1.0 / np.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / np.sqrt(2.0 * np.pi)


class NdiffError(Exception):
    """Base error for tensor/tape misuse."""


class ShapeError(NdiffError):
    def __init__(self, op: str, *shapes):
        self.op = op
        self.shapes = [tuple(s) for s in shapes]
        rendered = " vs ".join(str(s) for s in self.shapes)
        super().__init__(f"{op}: incompatible shapes {rendered}")


class DomainError(NdiffError):
    def __init__(self, op: str, detail: str):
        self.op = op
        super().__init__(f"{op}: {detail}")


class Tensor:
    """A float64 array, optionally recorded on a Tape.

    `node` is the tape node id when the value was produced by a recorded
    operation (or registered as a leaf); it is None for constants, which
    never receive gradients.
    """

    __slots__ = ("data", "tape", "node")

    def __init__(self, data, tape: "Tape | None" = None, node: int | None = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.tape = tape
        self.node = node

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def __repr__(self):
        tag = "const" if self.node is None else f"node {self.node}"
        return f"Tensor(shape={self.shape}, {tag})"


def constant(data) -> Tensor:
    """Wrap raw data as an untracked tensor."""
    return Tensor(data)


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum `grad` down to `shape` (reverses numpy broadcasting)."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


class _Node:
    __slots__ = ("parents", "shape")

    def __init__(self, parents, shape):
        self.parents = parents  # list of (input node id, vjp callable)
        self.shape = shape


class Tape:
    """Append-only record of operations; gradients flow in reverse order.

    A tape is confined to one logical thread. Tensors from other tapes may
    not be mixed in (constants are fine anywhere).
    """

    def __init__(self):
        self._nodes: list[_Node] = []
        self._leaf_ids: list[int] = []

    def __len__(self):
        return len(self._nodes)

    @property
    def leaf_ids(self) -> list[int]:
        return list(self._leaf_ids)

    def leaf(self, data) -> Tensor:
        """Register a differentiable leaf (parameter or input)."""
        t = Tensor(data)
        node = _Node([], t.data.shape)
        self._nodes.append(node)
        nid = len(self._nodes) - 1
        self._leaf_ids.append(nid)
        return Tensor(t.data, self, nid)

    # -- recording machinery -------------------------------------------------

    def _coerce(self, x) -> Tensor:
        if isinstance(x, Tensor):
            if x.node is not None and x.tape is not self:
                raise NdiffError("tensor belongs to a different tape")
            return x
        return Tensor(x)

    def _record(self, data: np.ndarray, parents) -> Tensor:
        """Record an op result; inputs without a node contribute no edges."""
        live = [(t.node, vjp) for t, vjp in parents if t.node is not None]
        if not live:
            return Tensor(data)
        node = _Node(live, data.shape)
        self._nodes.append(node)
        return Tensor(data, self, len(self._nodes) - 1)

    # -- the closed op set ----------------------------------------------------

    def add(self, a, b) -> Tensor:
        a, b = self._coerce(a), self._coerce(b)
        try:
            np.broadcast_shapes(a.shape, b.shape)
        except ValueError:
            raise ShapeError("add", a.shape, b.shape) from None
        out = a.data + b.data
        return self._record(out, [
            (a, lambda g, s=a.shape: _unbroadcast(g, s)),
            (b, lambda g, s=b.shape: _unbroadcast(g, s)),
        ])

    def mul(self, a, b) -> Tensor:
        a, b = self._coerce(a), self._coerce(b)
        try:
            np.broadcast_shapes(a.shape, b.shape)
        except ValueError:
            raise ShapeError("mul", a.shape, b.shape) from None
        out = a.data * b.data
        return self._record(out, [
            (a, lambda g, o=b.data, s=a.shape: _unbroadcast(g * o, s)),
            (b, lambda g, o=a.data, s=b.shape: _unbroadcast(g * o, s)),
        ])

    def matmul(self, a, b) -> Tensor:
        a, b = self._coerce(a), self._coerce(b)
        if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2] or a.shape[:-2] != b.shape[:-2]:
            raise ShapeError("matmul", a.shape, b.shape)
        out = a.data @ b.data
        return self._record(out, [
            (a, lambda g, o=b.data: g @ o.swapaxes(-1, -2)),
            (b, lambda g, o=a.data: o.swapaxes(-1, -2) @ g),
        ])

    def transpose(self, a, axes=None) -> Tensor:
        a = self._coerce(a)
        if axes is None:
            axes = tuple(reversed(range(a.ndim)))
        axes = tuple(axes)
        if sorted(axes) != list(range(a.ndim)):
            raise ShapeError("transpose", a.shape, axes)
        inv = tuple(np.argsort(axes))
        out = np.transpose(a.data, axes)
        return self._record(out, [(a, lambda g: np.transpose(g, inv))])

    def reshape(self, a, shape) -> Tensor:
        a = self._coerce(a)
        shape = tuple(shape)
        if int(np.prod(shape)) != a.size:
            raise ShapeError("reshape", a.shape, shape)
        out = a.data.reshape(shape)
        return self._record(out, [(a, lambda g, s=a.shape: g.reshape(s))])

    def slice(self, a, key) -> Tensor:
        """Basic slicing only (slices and ints); gradient scatters back."""
        a = self._coerce(a)
        if not isinstance(key, tuple):
            key = (key,)
        for k in key:
            if not isinstance(k, (slice, int)):
                raise NdiffError("slice: only slices and ints are supported")
        out = a.data[key]

        def vjp(g, s=a.shape, k=key):
            z = np.zeros(s)
            z[k] = g
            return z

        return self._record(np.array(out, copy=True), [(a, vjp)])

    def concat(self, parts, axis: int = 0) -> Tensor:
        parts = [self._coerce(p) for p in parts]
        if not parts:
            raise NdiffError("concat: empty input list")
        ref = list(parts[0].shape)
        for p in parts[1:]:
            other = list(p.shape)
            if len(other) != len(ref) or any(
                i != (axis % len(ref)) and other[i] != ref[i] for i in range(len(ref))
            ):
                raise ShapeError("concat", parts[0].shape, p.shape)
        out = np.concatenate([p.data for p in parts], axis=axis)
        offsets = np.cumsum([0] + [p.shape[axis % p.ndim] for p in parts])
        parents = []
        for i, p in enumerate(parts):
            def vjp(g, lo=offsets[i], hi=offsets[i + 1], ax=axis % p.ndim):
                idx = [slice(None)] * g.ndim
                idx[ax] = slice(lo, hi)
                return g[tuple(idx)]
            parents.append((p, vjp))
        return self._record(out, parents)

    def softmax(self, a, axis: int = -1) -> Tensor:
        a = self._coerce(a)
        shifted = a.data - a.data.max(axis=axis, keepdims=True)
        e = np.exp(shifted)
        out = e / e.sum(axis=axis, keepdims=True)

        def vjp(g, s=out, ax=axis):
            return s * (g - (g * s).sum(axis=ax, keepdims=True))

        return self._record(out, [(a, vjp)])

    def log(self, a) -> Tensor:
        a = self._coerce(a)
        if np.any(a.data <= 0.0):
            raise DomainError("log", "non-positive input")
        return self._record(np.log(a.data), [(a, lambda g, x=a.data: g / x)])

    def exp(self, a) -> Tensor:
        a = self._coerce(a)
        out = np.exp(a.data)
        return self._record(out, [(a, lambda g, o=out: g * o)])

    def sum(self, a, axis=None, keepdims: bool = False) -> Tensor:
        a = self._coerce(a)
        out = a.data.sum(axis=axis, keepdims=keepdims)

        def vjp(g, s=a.shape, ax=axis, kd=keepdims):
            if ax is not None and not kd:
                g = np.expand_dims(g, ax)
            return np.broadcast_to(g, s).copy()

        return self._record(np.asarray(out), [(a, vjp)])

    def mean(self, a, axis=None, keepdims: bool = False) -> Tensor:
        a = self._coerce(a)
        out = a.data.mean(axis=axis, keepdims=keepdims)
        count = a.size if axis is None else np.prod(
            [a.shape[i] for i in (axis if isinstance(axis, tuple) else (axis,))]
        )

        def vjp(g, s=a.shape, ax=axis, kd=keepdims, n=float(count)):
            if ax is not None and not kd:
                g = np.expand_dims(g, ax)
            return np.broadcast_to(g, s) / n

        return self._record(np.asarray(out), [(a, vjp)])

    def layer_norm(self, a, gain, bias, eps: float = 1e-5) -> Tensor:
        """Normalize over the last axis, then scale and shift."""
        a, gain, bias = self._coerce(a), self._coerce(gain), self._coerce(bias)
        d = a.shape[-1]
        if gain.shape != (d,) or bias.shape != (d,):
            raise ShapeError("layer_norm", a.shape, gain.shape, bias.shape)
        mu = a.data.mean(axis=-1, keepdims=True)
        var = ((a.data - mu) ** 2).mean(axis=-1, keepdims=True)
        inv = 1.0 / np.sqrt(var + eps)
        xhat = (a.data - mu) * inv
        out = xhat * gain.data + bias.data
        batch_axes = tuple(range(a.ndim - 1))

        def vjp_a(g, gd=gain.data, xh=xhat, iv=inv):
            dxh = g * gd
            return iv * (
                dxh
                - dxh.mean(axis=-1, keepdims=True)
                - xh * (dxh * xh).mean(axis=-1, keepdims=True)
            )

        return self._record(out, [
            (a, vjp_a),
            (gain, lambda g, xh=xhat: (g * xh).sum(axis=batch_axes)),
            (bias, lambda g: g.sum(axis=batch_axes)),
        ])

    def gelu(self, a) -> Tensor:
        a = self._coerce(a)
        phi_cdf = 0.5 * (1.0 + erf(a.data * _INV_SQRT2))
        out = a.data * phi_cdf

        def vjp(g, x=a.data, cdf=phi_cdf):
            pdf = _INV_SQRT_2PI * np.exp(-0.5 * x * x)
            return g * (cdf + x * pdf)

        return self._record(out, [(a, vjp)])

    def power(self, a, p: float) -> Tensor:
        a = self._coerce(a)
        p = float(p)
        if not p.is_integer() and np.any(a.data < 0.0):
            raise DomainError("power", f"negative base with non-integer exponent {p}")
        out = a.data ** p
        return self._record(out, [(a, lambda g, x=a.data: g * p * x ** (p - 1.0))])

    def sqrt(self, a) -> Tensor:
        a = self._coerce(a)
        if np.any(a.data < 0.0):
            raise DomainError("sqrt", "negative input")
        out = np.sqrt(a.data)
        return self._record(out, [(a, lambda g, o=out: g * 0.5 / o)])

    def cosine_similarity(self, a, b, eps: float = 1e-8) -> Tensor:
        a, b = self._coerce(a), self._coerce(b)
        if a.ndim != 1 or a.shape != b.shape:
            raise ShapeError("cosine_similarity", a.shape, b.shape)
        u = float(a.data @ b.data)
        na = float(np.linalg.norm(a.data))
        nb = float(np.linalg.norm(b.data))
        denom = na * nb + eps
        c = u / denom

        def vjp_a(g, x=a.data, y=b.data):
            term = y / denom
            if na > 0.0:
                term = term - c * nb * x / (na * denom)
            return g * term

        def vjp_b(g, x=a.data, y=b.data):
            term = x / denom
            if nb > 0.0:
                term = term - c * na * y / (nb * denom)
            return g * term

        return self._record(np.asarray(c), [(a, vjp_a), (b, vjp_b)])

    # -- derived helpers (compositions of the closed set) ---------------------

    def neg(self, a) -> Tensor:
        return self.mul(a, -1.0)

    def sub(self, a, b) -> Tensor:
        return self.add(a, self.neg(b))

    def logsumexp(self, a) -> Tensor:
        """Stable log-sum-exp of a 1-D tensor (max-subtraction trick)."""
        a = self._coerce(a)
        m = float(a.data.max())
        shifted = self.add(a, -m)
        return self.add(self.log(self.sum(self.exp(shifted))), m)


OP_KINDS = (
    "add", "mul", "matmul", "transpose", "reshape", "slice", "concat",
    "softmax", "log", "exp", "mean", "sum", "layer_norm", "gelu",
    "power", "sqrt", "cosine_similarity",
)


def forward(op_kind: str, inputs, tape: Tape, **ctx) -> Tensor:
    """Dispatch `op_kind` over `inputs` on `tape`; ctx carries op parameters."""
    if op_kind not in OP_KINDS:
        raise NdiffError(f"unknown op kind: {op_kind!r}")
    method = getattr(tape, op_kind)
    if op_kind == "concat":
        return method(list(inputs), **ctx)
    return method(*inputs, **ctx)


def backward(tape: Tape, loss: Tensor) -> dict[int, Tensor]:
    """Reverse sweep from a scalar loss; returns {leaf node id -> gradient}.

    Every registered leaf appears in the result, with zeros when the loss
    does not reach it. Deterministic: fixed reverse insertion order.
    """
    if loss.data.shape != ():
        raise NdiffError(f"backward: loss must be scalar, got shape {loss.data.shape}")
    grads: list[np.ndarray | None] = [None] * len(tape._nodes)
    if loss.node is not None:
        if loss.tape is not tape:
            raise NdiffError("backward: loss from a different tape")
        grads[loss.node] = np.ones(())
        for nid in range(loss.node, -1, -1):
            g = grads[nid]
            if g is None:
                continue
            for pid, vjp in tape._nodes[nid].parents:
                contrib = vjp(g)
                if grads[pid] is None:
                    grads[pid] = contrib
                else:
                    grads[pid] = grads[pid] + contrib
    out = {}
    for lid in tape._leaf_ids:
        g = grads[lid]
        out[lid] = Tensor(g if g is not None else np.zeros(tape._nodes[lid].shape))
    return out


def grad_check(scalar_fn, params: dict[str, np.ndarray], eps: float = 1e-5) -> float:
    """Compare taped gradients of `scalar_fn` against central differences.

    `scalar_fn(tape, bound)` must deterministically build a scalar Tensor
    from `bound`, a dict of leaf Tensors mirroring `params`. Returns the
    worst relative error max|ga - gn| / max(1, |ga|, |gn|) over all
    coordinates of all parameters.
    """
    params = {k: np.asarray(v, dtype=np.float64) for k, v in params.items()}

    def run(vals):
        tape = Tape()
        bound = {k: tape.leaf(v) for k, v in vals.items()}
        out = scalar_fn(tape, bound)
        if out.data.shape != ():
            raise NdiffError("grad_check: scalar_fn must return a scalar")
        return out, tape, bound

    out1, tape, bound = run(params)
    out2, _, _ = run(params)
    if out1.data.tobytes() != out2.data.tobytes():
        raise NdiffError("grad_check: scalar_fn is not deterministic")

    grads = backward(tape, out1)
    analytic = {k: grads[bound[k].node].data for k in params}

    def value_at(vals) -> float:
        return run(vals)[0].item()

    worst = 0.0
    for name, base in params.items():
        for idx in np.ndindex(base.shape if base.shape else (1,)):
            key = idx if base.shape else ()
            hi = {k: v.copy() for k, v in params.items()}
            lo = {k: v.copy() for k, v in params.items()}
            hi[name][key] += eps
            lo[name][key] -= eps
            gn = (value_at(hi) - value_at(lo)) / (2.0 * eps)
            ga = float(analytic[name][key]) if base.shape else float(analytic[name])
            rel = abs(ga - gn) / max(1.0, abs(ga), abs(gn))
            worst = max(worst, rel)
    return worst
