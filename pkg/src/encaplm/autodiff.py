"""Dense float64 tensors with reverse-mode automatic differentiation.

Every differentiable computation is recorded on an explicit :class:`Tape`.
A tape owns an append-only list of nodes in topological order; calling
:meth:`Tape.backward` on a scalar output walks the list in reverse and
deposits gradients on every ``requires_grad`` leaf that the output depends
on.  Tensors are plain value holders and may be reused across tapes
(parameters are); an op *output* belongs to the tape that produced it, and
feeding it to a different tape silently treats it as a constant (detach).

All arithmetic is 64-bit.  Every operation verifies that its result is
finite, so a NaN/Inf is reported at the op that produced it rather than
miles downstream.
"""

from __future__ import annotations

import math
from typing import Callable, Sequence

import numpy as np

GELU_C = math.sqrt(2.0 / math.pi)
GELU_A = 0.044715
LAYER_NORM_EPS = 1e-5


class ShapeError(ValueError):
    """Operand shapes do not conform to the operation's arity rules."""


class NonFiniteError(ArithmeticError):
    """A computation produced NaN or Inf."""


class Tensor:
    """A dense float64 array with an optional gradient slot.

    ``grad`` is populated (same shape as ``data``) by ``Tape.backward`` when
    ``requires_grad`` is set; it is ``None`` until then.
    """

    __slots__ = ("data", "requires_grad", "grad", "_tape", "_nid")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.ascontiguousarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self._tape: "Tape | None" = None
        self._nid: int = -1

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() on non-scalar tensor of shape {self.shape}")
        return float(self.data.reshape(()))

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"


def tensor(data, requires_grad: bool = False) -> Tensor:
    return Tensor(data, requires_grad=requires_grad)


def zeros(shape, requires_grad: bool = False) -> Tensor:
    return Tensor(np.zeros(shape), requires_grad=requires_grad)


def zeros_like(t: Tensor, requires_grad: bool = False) -> Tensor:
    return Tensor(np.zeros_like(t.data), requires_grad=requires_grad)


class _Node:
    __slots__ = ("op", "inputs", "value", "grad", "backward", "source")

    def __init__(self, op, inputs, value, backward, source=None):
        self.op = op
        self.inputs = inputs
        self.value = value
        self.grad: np.ndarray | None = None
        self.backward = backward
        self.source: Tensor | None = source


class Tape:
    """Ordered record of operations; single-owner during construction.

    Nodes are appended in execution order, which is by construction a valid
    topological order: an op can only consume tensors that already exist.
    """

    def __init__(self):
        self._nodes: list[_Node] = []
        self._leaf_ids: dict[int, int] = {}
        self._leaf_refs: list[Tensor] = []

    def __len__(self) -> int:
        return len(self._nodes)

    # -- graph construction -------------------------------------------------

    def _leaf(self, t: Tensor) -> int:
        nid = self._leaf_ids.get(id(t))
        if nid is not None:
            return nid
        node = _Node("leaf", (), t.data, None, source=t)
        self._nodes.append(node)
        nid = len(self._nodes) - 1
        self._leaf_ids[id(t)] = nid
        self._leaf_refs.append(t)
        return nid

    def _id(self, t: Tensor) -> int:
        if not isinstance(t, Tensor):
            raise TypeError(f"expected Tensor, got {type(t).__name__}")
        if t._tape is self:
            return t._nid
        # Outputs of other tapes enter as constants; plain tensors as leaves.
        return self._leaf(t)

    def _record(self, op: str, input_ids: tuple, value: np.ndarray, backward) -> Tensor:
        # One-pass probe: any NaN/Inf element makes the sum non-finite.
        if not math.isfinite(float(value.sum())):
            raise NonFiniteError(f"non-finite result in op '{op}' (tape node {len(self._nodes)})")
        node = _Node(op, input_ids, value, backward)
        self._nodes.append(node)
        out = Tensor.__new__(Tensor)
        out.data = value
        out.requires_grad = True
        out.grad = None
        out._tape = self
        out._nid = len(self._nodes) - 1
        return out

    def _accum(self, nid: int, g: np.ndarray) -> None:
        node = self._nodes[nid]
        if node.grad is None:
            node.grad = np.array(g, dtype=np.float64, copy=True)
        else:
            node.grad += g

    # -- primitives ----------------------------------------------------------

    def add(self, a: Tensor, b: Tensor) -> Tensor:
        """Elementwise sum; ``b`` may also be a length-q row bias for a (p, q) ``a``."""
        ai, bi = self._id(a), self._id(b)
        av, bv = a.data, b.data
        bias = av.ndim == 2 and bv.shape == (av.shape[1],)
        if not bias and av.shape != bv.shape:
            raise ShapeError(f"add: shapes {av.shape} and {bv.shape} do not conform")

        def backward(g, t=self):
            t._accum(ai, g)
            t._accum(bi, g.sum(axis=0) if bias else g)

        return self._record("add", (ai, bi), av + bv, backward)

    def multiply(self, a: Tensor, b: Tensor) -> Tensor:
        """Elementwise (Hadamard) product of same-shape tensors."""
        ai, bi = self._id(a), self._id(b)
        av, bv = a.data, b.data
        if av.shape != bv.shape:
            raise ShapeError(f"multiply: shapes {av.shape} and {bv.shape} differ")

        def backward(g, t=self):
            t._accum(ai, g * bv)
            t._accum(bi, g * av)

        return self._record("multiply", (ai, bi), av * bv, backward)

    def mul_scalar(self, a: Tensor, s: Tensor) -> Tensor:
        """Product of ``a`` with a size-1 tensor ``s``; differentiable in both."""
        if s.data.size != 1:
            raise ShapeError(f"mul_scalar: scalar operand has shape {s.shape}")
        ai, si = self._id(a), self._id(s)
        av = a.data
        sv = float(s.data.reshape(()))
        s_shape = s.data.shape

        def backward(g, t=self):
            t._accum(ai, g * sv)
            t._accum(si, np.full(s_shape, (g * av).sum()))

        return self._record("mul_scalar", (ai, si), av * sv, backward)

    def scale(self, a: Tensor, c: float) -> Tensor:
        """Multiply by a Python float constant (not differentiated w.r.t. ``c``)."""
        ai = self._id(a)
        c = float(c)

        def backward(g, t=self):
            t._accum(ai, g * c)

        return self._record("scale", (ai,), a.data * c, backward)

    def matmul(self, a: Tensor, b: Tensor, bias: Tensor | None = None) -> Tensor:
        """Matrix product; an optional (r,) ``bias`` is added row-wise."""
        ai, bi = self._id(a), self._id(b)
        av, bv = a.data, b.data
        if av.ndim != 2 or bv.ndim != 2:
            raise ShapeError(f"matmul: operands must be 2-D, got {av.shape} and {bv.shape}")
        if av.shape[1] != bv.shape[0]:
            raise ShapeError(f"matmul: inner extents differ, {av.shape} x {bv.shape}")
        if bias is None:

            def backward(g, t=self):
                t._accum(ai, g @ bv.T)
                t._accum(bi, av.T @ g)

            return self._record("matmul", (ai, bi), av @ bv, backward)
        ci = self._id(bias)
        if bias.data.shape != (bv.shape[1],):
            raise ShapeError(f"matmul: bias shape {bias.shape} does not match output width")

        def backward_bias(g, t=self):
            t._accum(ai, g @ bv.T)
            t._accum(bi, av.T @ g)
            t._accum(ci, g.sum(axis=0))

        return self._record("matmul", (ai, bi, ci), av @ bv + bias.data, backward_bias)

    def transpose(self, a: Tensor) -> Tensor:
        ai = self._id(a)
        if a.data.ndim != 2:
            raise ShapeError(f"transpose: expected 2-D, got {a.shape}")

        def backward(g, t=self):
            t._accum(ai, g.T)

        return self._record("transpose", (ai,), np.ascontiguousarray(a.data.T), backward)

    def reshape(self, a: Tensor, shape) -> Tensor:
        ai = self._id(a)
        shape = tuple(int(s) for s in shape)
        if int(np.prod(shape)) != a.data.size:
            raise ShapeError(f"reshape: cannot view size {a.data.size} as {shape}")
        src_shape = a.data.shape

        def backward(g, t=self):
            t._accum(ai, g.reshape(src_shape))

        return self._record("reshape", (ai,), a.data.reshape(shape), backward)

    def concat_rows(self, parts: Sequence[Tensor]) -> Tensor:
        """Stack 2-D tensors with equal column counts along axis 0."""
        if len(parts) == 0:
            raise ShapeError("concat_rows: at least one input required")
        ids = tuple(self._id(p) for p in parts)
        cols = {p.data.shape[1] for p in parts if p.data.ndim == 2}
        if any(p.data.ndim != 2 for p in parts) or len(cols) != 1:
            raise ShapeError("concat_rows: inputs must be 2-D with equal column counts")
        sizes = [p.data.shape[0] for p in parts]
        offsets = np.cumsum([0] + sizes)

        def backward(g, t=self):
            for k, nid in enumerate(ids):
                t._accum(nid, g[offsets[k]:offsets[k + 1]])

        return self._record("concat_rows", ids, np.concatenate([p.data for p in parts], axis=0), backward)

    def concat_cols(self, parts: Sequence[Tensor]) -> Tensor:
        """Stack 2-D tensors with equal row counts along axis 1."""
        if len(parts) == 0:
            raise ShapeError("concat_cols: at least one input required")
        ids = tuple(self._id(p) for p in parts)
        rows = {p.data.shape[0] for p in parts if p.data.ndim == 2}
        if any(p.data.ndim != 2 for p in parts) or len(rows) != 1:
            raise ShapeError("concat_cols: inputs must be 2-D with equal row counts")
        sizes = [p.data.shape[1] for p in parts]
        offsets = np.cumsum([0] + sizes)

        def backward(g, t=self):
            for k, nid in enumerate(ids):
                t._accum(nid, g[:, offsets[k]:offsets[k + 1]])

        return self._record("concat_cols", ids, np.concatenate([p.data for p in parts], axis=1), backward)

    def slice_rows(self, a: Tensor, start: int, stop: int) -> Tensor:
        ai = self._id(a)
        if a.data.ndim != 2 or not (0 <= start < stop <= a.data.shape[0]):
            raise ShapeError(f"slice_rows: bad range [{start}:{stop}] for shape {a.shape}")
        shape = a.data.shape

        def backward(g, t=self):
            full = np.zeros(shape)
            full[start:stop] = g
            t._accum(ai, full)

        return self._record("slice_rows", (ai,), a.data[start:stop].copy(), backward)

    def slice_cols(self, a: Tensor, start: int, stop: int) -> Tensor:
        ai = self._id(a)
        if a.data.ndim != 2 or not (0 <= start < stop <= a.data.shape[1]):
            raise ShapeError(f"slice_cols: bad range [{start}:{stop}] for shape {a.shape}")
        shape = a.data.shape

        def backward(g, t=self):
            full = np.zeros(shape)
            full[:, start:stop] = g
            t._accum(ai, full)

        return self._record("slice_cols", (ai,), np.ascontiguousarray(a.data[:, start:stop]), backward)

    def pick(self, a: Tensor, index: int) -> Tensor:
        """Extract one scalar (flat index) as a shape-() tensor."""
        ai = self._id(a)
        flat = a.data.reshape(-1)
        if not (0 <= index < flat.size):
            raise ShapeError(f"pick: index {index} out of range for size {flat.size}")
        shape = a.data.shape

        def backward(g, t=self):
            full = np.zeros(shape)
            full.reshape(-1)[index] = g
            t._accum(ai, full)

        return self._record("pick", (ai,), np.asarray(flat[index]), backward)

    def sum_all(self, a: Tensor) -> Tensor:
        """Sum every element into a shape-() scalar."""
        ai = self._id(a)
        shape = a.data.shape

        def backward(g, t=self):
            t._accum(ai, np.full(shape, float(g)))

        return self._record("sum_all", (ai,), np.asarray(a.data.sum()), backward)

    def gelu(self, a: Tensor) -> Tensor:
        """GELU in tanh-approximation form (pinned so checkpoints are portable)."""
        ai = self._id(a)
        x = a.data
        x2 = x * x
        th = np.tanh(GELU_C * (x + GELU_A * x2 * x))
        value = 0.5 * x * (1.0 + th)

        def backward(g, t=self):
            du = GELU_C * (1.0 + 3.0 * GELU_A * x2)
            t._accum(ai, g * (0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * du))

        return self._record("gelu", (ai,), value, backward)

    def layer_norm(self, a: Tensor, gain: Tensor, bias: Tensor) -> Tensor:
        """Per-row normalization of a (p, q) tensor followed by a learnable affine.

        ``gain`` and ``bias`` have shape (q,).  Epsilon is fixed at 1e-5.
        Pass ones/zeros to observe the pre-affine normalization alone.
        """
        ai, gi, bi = self._id(a), self._id(gain), self._id(bias)
        x, gv, bv = a.data, gain.data, bias.data
        if x.ndim != 2 or gv.shape != (x.shape[1],) or bv.shape != (x.shape[1],):
            raise ShapeError(
                f"layer_norm: expected (p,q) input with (q,) gain/bias, got {x.shape}, {gv.shape}, {bv.shape}"
            )
        mu = x.mean(axis=1, keepdims=True)
        var = ((x - mu) ** 2).mean(axis=1, keepdims=True)
        inv = 1.0 / np.sqrt(var + LAYER_NORM_EPS)
        xhat = (x - mu) * inv

        def backward(g, t=self):
            t._accum(bi, g.sum(axis=0))
            t._accum(gi, (g * xhat).sum(axis=0))
            dxhat = g * gv
            m1 = dxhat.mean(axis=1, keepdims=True)
            m2 = (dxhat * xhat).mean(axis=1, keepdims=True)
            t._accum(ai, inv * (dxhat - m1 - xhat * m2))

        return self._record("layer_norm", (ai, gi, bi), xhat * gv + bv, backward)

    def softmax_rows(self, a: Tensor) -> Tensor:
        """Row-wise softmax of a 2-D tensor, computed with max-subtraction."""
        ai = self._id(a)
        x = a.data
        if x.ndim != 2:
            raise ShapeError(f"softmax_rows: expected 2-D, got {x.shape}")
        e = np.exp(x - x.max(axis=1, keepdims=True))
        y = e / e.sum(axis=1, keepdims=True)

        def backward(g, t=self):
            t._accum(ai, y * (g - (g * y).sum(axis=1, keepdims=True)))

        return self._record("softmax_rows", (ai,), y, backward)

    def embedding_lookup(self, table: Tensor, ids) -> Tensor:
        """Gather rows of a (V, d) table; gradient scatter-adds back into it."""
        ti = self._id(table)
        tv = table.data
        if tv.ndim != 2:
            raise ShapeError(f"embedding_lookup: table must be 2-D, got {tv.shape}")
        idx = np.asarray(ids, dtype=np.int64)
        if idx.ndim != 1:
            raise ShapeError("embedding_lookup: ids must be a flat index list")
        if idx.size and (idx.min() < 0 or idx.max() >= tv.shape[0]):
            raise IndexError(f"embedding_lookup: index out of range [0, {tv.shape[0]})")
        shape = tv.shape

        def backward(g, t=self):
            full = np.zeros(shape)
            np.add.at(full, idx, g)
            t._accum(ti, full)

        return self._record("embedding_lookup", (ti,), tv[idx].copy(), backward)

    def cross_entropy_mean(self, logits: Tensor, targets) -> Tensor:
        """Mean over rows of -log softmax(logits)[target]; returns a () scalar."""
        li = self._id(logits)
        z = logits.data
        if z.ndim != 2:
            raise ShapeError(f"cross_entropy_mean: logits must be 2-D, got {z.shape}")
        idx = np.asarray(targets, dtype=np.int64)
        n, v = z.shape
        if idx.shape != (n,):
            raise ShapeError(f"cross_entropy_mean: expected {n} targets, got shape {idx.shape}")
        if n == 0:
            raise ShapeError("cross_entropy_mean: empty batch")
        if idx.min() < 0 or idx.max() >= v:
            raise IndexError(f"cross_entropy_mean: target index out of range [0, {v})")
        zmax = z.max(axis=1, keepdims=True)
        lse = np.log(np.exp(z - zmax).sum(axis=1, keepdims=True)) + zmax
        logp = z - lse
        value = np.asarray(-logp[np.arange(n), idx].mean())

        def backward(g, t=self):
            d = np.exp(logp)
            d[np.arange(n), idx] -= 1.0
            t._accum(li, d * (float(g) / n))

        return self._record("cross_entropy_mean", (li,), value, backward)

    _PRIMITIVES = {
        "add": add,
        "multiply": multiply,
        "mul_scalar": mul_scalar,
        "scale": scale,
        "matmul": matmul,
        "transpose": transpose,
        "reshape": reshape,
        "concat_rows": concat_rows,
        "concat_cols": concat_cols,
        "slice_rows": slice_rows,
        "slice_cols": slice_cols,
        "pick": pick,
        "sum_all": sum_all,
        "gelu": gelu,
        "layer_norm": layer_norm,
        "softmax_rows": softmax_rows,
        "embedding_lookup": embedding_lookup,
        "cross_entropy_mean": cross_entropy_mean,
    }

    def apply_primitive(self, kind: str, *inputs, **kwargs) -> Tensor:
        """Dispatch an op by name; ``kind`` must be a registered primitive."""
        fn = self._PRIMITIVES.get(kind)
        if fn is None:
            raise ValueError(f"unknown primitive kind '{kind}'")
        return fn(self, *inputs, **kwargs)

    # -- differentiation ------------------------------------------------------

    def backward(self, out: Tensor, leaves=None) -> None:
        """Reverse sweep from a scalar output; fills ``grad`` on every
        ``requires_grad`` leaf registered on this tape (zeros if unreachable).

        ``leaves`` restricts which tensors receive a gradient -- used by
        scoped queries such as :func:`gradient` so that probing one input
        never clobbers the ``grad`` slots of shared parameters.
        """
        if out._tape is not self:
            raise ValueError("backward: output does not belong to this tape")
        if out.data.size != 1:
            raise ShapeError(f"backward: output must be scalar, got shape {out.shape}")
        wanted = None if leaves is None else {id(t) for t in leaves}
        for node in self._nodes:
            node.grad = None
        self._nodes[out._nid].grad = np.ones_like(out.data)
        for node in reversed(self._nodes):
            if node.grad is None or node.backward is None:
                continue
            node.backward(node.grad)
        for node in self._nodes:
            src = node.source
            if src is None or not src.requires_grad:
                continue
            if wanted is not None and id(src) not in wanted:
                continue
            src.grad = np.array(node.grad, copy=True) if node.grad is not None else np.zeros_like(src.data)


def gradient(f: Callable[[Tape, Tensor], Tensor], x: Tensor) -> Tensor:
    """Exact reverse-mode gradient of a scalar tape function at ``x``.

    ``f`` receives a fresh tape and a requires-grad copy of ``x`` and must
    return a scalar output recorded on that tape.
    """
    tape = Tape()
    leaf = Tensor(np.array(x.data, copy=True), requires_grad=True)
    out = f(tape, leaf)
    if out.data.size != 1:
        raise ShapeError(f"gradient: f must be scalar-valued, got shape {out.shape}")
    tape.backward(out, leaves=(leaf,))
    return Tensor(leaf.grad)


def hvp_step(x: np.ndarray) -> float:
    """Finite-difference step for Hessian-vector products: 1e-4 * max(1, ||x||_inf)."""
    return 1e-4 * max(1.0, float(np.abs(x).max())) if x.size else 1e-4


def hvp(f: Callable[[Tape, Tensor], Tensor], x: Tensor, v: Tensor) -> Tensor:
    """Hessian-vector product of a scalar tape function via a central
    difference of exact gradients: (grad f(x+ev) - grad f(x-ev)) / 2e."""
    if x.data.shape != v.data.shape:
        raise ShapeError(f"hvp: v shape {v.shape} must match x shape {x.shape}")
    eps = hvp_step(x.data)
    gp = gradient(f, Tensor(x.data + eps * v.data))
    gm = gradient(f, Tensor(x.data - eps * v.data))
    out = (gp.data - gm.data) / (2.0 * eps)
    if not np.isfinite(out).all():
        raise NonFiniteError("hvp: non-finite result")
    return Tensor(out)
