"""Tape-based reverse-mode differentiation over dense float64 matrices.

A :class:`Record` is built op by op (shapes are checked as each op is
recorded), then evaluated with :meth:`Record.forward` and differentiated with
:meth:`Record.backward`.  Everything is 2-D: vectors are ``1 x n`` rows and
scalars are ``1 x 1``.

>>> rec = Record()
>>> w = rec.param("w", np.array([[0.0]]))
>>> loss = rec.reduce_sum(rec.sigmoid(w))
>>> float(rec.forward(loss)[0, 0])
0.5
>>> float(rec.backward(loss)["w"][0, 0])
0.25
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import kernels


class ShapeError(ValueError):
    """Operands of a recorded op have incompatible shapes."""


class UsageError(RuntimeError):
    pass


class NonFiniteError(FloatingPointError):
    pass


@dataclass(eq=False)
class Tensor:
    """Handle to one node of a :class:`Record`."""

    record: Record = field(repr=False)
    node_id: int
    rows: int
    cols: int

    @property
    def shape(self) -> tuple[int, int]:
        return (self.rows, self.cols)

    @property
    def value(self) -> np.ndarray:
        return self.record.value(self)


def stable_sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def _broadcast_shape(op_index, name, a, b):
    out = []
    for da, db in zip(a, b):
        if da == db or db == 1:
            out.append(da)
        elif da == 1:
            out.append(db)
        else:
            raise ShapeError(f"op #{op_index} {name}: cannot broadcast {a} with {b}")
    return tuple(out)


def _unbroadcast(g, shape):
    if g.shape[0] != shape[0]:
        g = g.sum(axis=0, keepdims=True)
    if g.shape[1] != shape[1]:
        g = g.sum(axis=1, keepdims=True)
    return g


class SparseConst:
    """Constant CSR matrix used by :meth:`Record.spmm`, with its transpose cached."""

    def __init__(self, indptr, indices, data, shape):
        self.indptr = np.ascontiguousarray(indptr, dtype=np.int64)
        self.indices = np.ascontiguousarray(indices, dtype=np.int64)
        self.data = np.ascontiguousarray(data, dtype=np.float64)
        self.shape = (int(shape[0]), int(shape[1]))
        self._t = None

    @classmethod
    def from_scipy(cls, m):
        m = m.tocsr()
        m.sort_indices()
        return cls(m.indptr, m.indices, m.data, m.shape)

    @property
    def nnz(self):
        return len(self.data)

    def transpose(self) -> SparseConst:
        if self._t is None:
            rows = np.repeat(np.arange(self.shape[0]), np.diff(self.indptr))
            order = np.lexsort((rows, self.indices))
            counts = np.bincount(self.indices, minlength=self.shape[1])
            indptr = np.concatenate([[0], np.cumsum(counts)])
            self._t = SparseConst(indptr, rows[order], self.data[order],
                                  (self.shape[1], self.shape[0]))
            self._t._t = self
        return self._t

    def matmul(self, x: np.ndarray) -> np.ndarray:
        return kernels.csr_spmm(self.indptr, self.indices, self.data,
                                np.ascontiguousarray(x), self.shape[0])

    def toarray(self) -> np.ndarray:
        out = np.zeros(self.shape)
        rows = np.repeat(np.arange(self.shape[0]), np.diff(self.indptr))
        np.add.at(out, (rows, self.indices), self.data)
        return out


class Record:
    """Ordered list of primitive ops; the computation record of one pass."""

    def __init__(self, check_finite: bool = True):
        self.check_finite = check_finite
        self._ops: list[tuple[str, tuple[int, ...], dict]] = []
        self._shapes: list[tuple[int, int]] = []
        self._needs_grad: list[bool] = []
        self._params: dict[str, int] = {}
        self._values: list[np.ndarray] | None = None

    def __len__(self):
        return len(self._ops)

    # -- leaves -----------------------------------------------------------
    def _push(self, name, inputs, shape, attrs, needs_grad=None):
        if needs_grad is None:
            needs_grad = any(self._needs_grad[i] for i in inputs)
        self._ops.append((name, inputs, attrs))
        self._shapes.append(shape)
        self._needs_grad.append(needs_grad)
        self._values = None
        return Tensor(self, len(self._ops) - 1, shape[0], shape[1])

    @staticmethod
    def _as_matrix(array):
        a = np.asarray(array, dtype=np.float64)
        if a.ndim != 2:
            raise ShapeError(f"expected a 2-D array, got shape {a.shape}")
        return a

    def param(self, name: str, array) -> Tensor:
        if name in self._params:
            raise UsageError(f"parameter {name!r} registered twice")
        a = self._as_matrix(array)
        t = self._push("param", (), a.shape, {"value": a, "name": name}, needs_grad=True)
        self._params[name] = t.node_id
        return t

    def const(self, array) -> Tensor:
        a = self._as_matrix(array)
        return self._push("const", (), a.shape, {"value": a}, needs_grad=False)

    # -- primitives -------------------------------------------------------
    def _check(self, *ts):
        for t in ts:
            if t.record is not self:
                raise UsageError("tensor belongs to a different record")

    def matmul(self, a: Tensor, b: Tensor) -> Tensor:
        self._check(a, b)
        if a.cols != b.rows:
            raise ShapeError(f"op #{len(self)} matmul: {a.shape} @ {b.shape}")
        return self._push("matmul", (a.node_id, b.node_id), (a.rows, b.cols), {})

    def add(self, a: Tensor, b: Tensor) -> Tensor:
        self._check(a, b)
        shape = _broadcast_shape(len(self), "add", a.shape, b.shape)
        return self._push("add", (a.node_id, b.node_id), shape, {})

    def hadamard(self, a: Tensor, b: Tensor) -> Tensor:
        self._check(a, b)
        shape = _broadcast_shape(len(self), "hadamard", a.shape, b.shape)
        return self._push("hadamard", (a.node_id, b.node_id), shape, {})

    def scale(self, a: Tensor, c: float) -> Tensor:
        self._check(a)
        return self._push("scale", (a.node_id,), a.shape, {"c": float(c)})

    def gather(self, a: Tensor, idx) -> Tensor:
        """Rows ``a[idx]``."""
        self._check(a)
        idx = np.ascontiguousarray(idx, dtype=np.int64)
        if idx.ndim != 1 or (len(idx) and (idx.min() < 0 or idx.max() >= a.rows)):
            raise ShapeError(f"op #{len(self)} gather: bad row index for {a.shape}")
        return self._push("gather", (a.node_id,), (len(idx), a.cols), {"idx": idx})

    def scatter_add(self, a: Tensor, idx, n_rows: int) -> Tensor:
        """``out[idx[i]] += a[i]`` into an ``n_rows`` matrix."""
        self._check(a)
        idx = np.ascontiguousarray(idx, dtype=np.int64)
        if idx.shape != (a.rows,):
            raise ShapeError(f"op #{len(self)} scatter_add: index length {idx.shape} vs {a.shape}")
        if len(idx) and (idx.min() < 0 or idx.max() >= n_rows):
            raise ShapeError(f"op #{len(self)} scatter_add: index out of range for {n_rows} rows")
        return self._push("scatter_add", (a.node_id,), (int(n_rows), a.cols),
                          {"idx": idx, "n": int(n_rows)})

    def spmm(self, m: SparseConst, a: Tensor) -> Tensor:
        """Constant sparse matrix times ``a``: a fused gather/weighted scatter-add."""
        self._check(a)
        if m.shape[1] != a.rows:
            raise ShapeError(f"op #{len(self)} spmm: {m.shape} @ {a.shape}")
        return self._push("spmm", (a.node_id,), (m.shape[0], a.cols), {"m": m})

    def sigmoid(self, a: Tensor) -> Tensor:
        self._check(a)
        return self._push("sigmoid", (a.node_id,), a.shape, {})

    def tanh(self, a: Tensor) -> Tensor:
        self._check(a)
        return self._push("tanh", (a.node_id,), a.shape, {})

    def relu(self, a: Tensor) -> Tensor:
        self._check(a)
        return self._push("relu", (a.node_id,), a.shape, {})

    def softplus(self, a: Tensor) -> Tensor:
        self._check(a)
        return self._push("softplus", (a.node_id,), a.shape, {})

    def softmax_rows(self, a: Tensor) -> Tensor:
        self._check(a)
        return self._push("softmax_rows", (a.node_id,), a.shape, {})

    def segment_softmax(self, a: Tensor, indptr) -> Tensor:
        """Softmax of an ``E x 1`` column within each ``indptr`` segment."""
        self._check(a)
        indptr = np.ascontiguousarray(indptr, dtype=np.int64)
        if a.cols != 1 or indptr[-1] != a.rows:
            raise ShapeError(f"op #{len(self)} segment_softmax: {a.shape} vs segments ending at {indptr[-1]}")
        return self._push("segment_softmax", (a.node_id,), a.shape, {"indptr": indptr})

    def concat_cols(self, parts: list[Tensor]) -> Tensor:
        self._check(*parts)
        rows = {p.rows for p in parts}
        if len(rows) != 1:
            raise ShapeError(f"op #{len(self)} concat_cols: row counts {[p.shape for p in parts]}")
        return self._push("concat_cols", tuple(p.node_id for p in parts),
                          (parts[0].rows, sum(p.cols for p in parts)),
                          {"widths": [p.cols for p in parts]})

    def reduce_sum(self, a: Tensor, axis: int | None = None) -> Tensor:
        self._check(a)
        shape = {None: (1, 1), 0: (1, a.cols), 1: (a.rows, 1)}[axis]
        return self._push("reduce_sum", (a.node_id,), shape, {"axis": axis})

    # -- composites -------------------------------------------------------
    def sub(self, a: Tensor, b: Tensor) -> Tensor:
        return self.add(a, self.scale(b, -1.0))

    def linear(self, x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
        out = self.matmul(x, w)
        return out if b is None else self.add(out, b)

    def mean(self, a: Tensor) -> Tensor:
        return self.scale(self.reduce_sum(a), 1.0 / (a.rows * a.cols))

    # -- evaluation -------------------------------------------------------
    def forward(self, terminal: Tensor | None = None) -> np.ndarray | None:
        """Evaluate every recorded op in order and cache the results."""
        values: list[np.ndarray] = []
        with np.errstate(over="ignore", invalid="ignore"):
            for i, (name, inputs, attrs) in enumerate(self._ops):
                args = [values[j] for j in inputs]
                out = _FORWARD[name](args, attrs)
                if self.check_finite and name not in ("param", "const") and not np.isfinite(out).all():
                    raise NonFiniteError(f"op #{i} {name} produced non-finite values")
                values.append(out)
        self._values = values
        if terminal is None:
            return None
        return values[terminal.node_id]

    def value(self, t: Tensor) -> np.ndarray:
        if self._values is None:
            raise UsageError("forward() has not been run on this record")
        return self._values[t.node_id]

    def backward(self, terminal: Tensor, seed: np.ndarray | None = None) -> dict[str, np.ndarray]:
        """Gradients of ``terminal`` (weighted by ``seed``) for every parameter."""
        if self._values is None:
            raise UsageError("backward() called before forward()")
        if seed is None:
            if terminal.shape != (1, 1):
                raise ShapeError(f"seed required for non-scalar terminal {terminal.shape}")
            seed = np.ones((1, 1))
        seed = np.asarray(seed, dtype=np.float64)
        if seed.shape != terminal.shape:
            raise ShapeError(f"seed shape {seed.shape} != terminal shape {terminal.shape}")
        grads: list[np.ndarray | None] = [None] * len(self._ops)
        grads[terminal.node_id] = seed
        for i in range(terminal.node_id, -1, -1):
            g = grads[i]
            if g is None:
                continue
            name, inputs, attrs = self._ops[i]
            if not inputs:
                continue
            args = [self._values[j] for j in inputs]
            wanted = [self._needs_grad[j] for j in inputs]
            in_grads = _BACKWARD[name](g, args, self._values[i], attrs, wanted)
            for j, gj, w in zip(inputs, in_grads, wanted):
                if not w or gj is None:
                    continue
                grads[j] = gj if grads[j] is None else grads[j] + gj
        out = {}
        for pname, nid in self._params.items():
            g = grads[nid]
            out[pname] = np.zeros(self._shapes[nid]) if g is None else g
        return out


# -- op table ---------------------------------------------------------------

def _f_softmax_rows(x):
    z = x - x.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


_FORWARD = {
    "param": lambda a, at: at["value"],
    "const": lambda a, at: at["value"],
    "matmul": lambda a, at: a[0] @ a[1],
    "add": lambda a, at: a[0] + a[1],
    "hadamard": lambda a, at: a[0] * a[1],
    "scale": lambda a, at: at["c"] * a[0],
    "gather": lambda a, at: a[0][at["idx"]],
    "scatter_add": lambda a, at: kernels.scatter_add_rows(np.ascontiguousarray(a[0]), at["idx"], at["n"]),
    "spmm": lambda a, at: at["m"].matmul(a[0]),
    "sigmoid": lambda a, at: stable_sigmoid(a[0]),
    "tanh": lambda a, at: np.tanh(a[0]),
    "relu": lambda a, at: np.maximum(a[0], 0.0),
    "softplus": lambda a, at: np.logaddexp(0.0, a[0]),
    "softmax_rows": lambda a, at: _f_softmax_rows(a[0]),
    "segment_softmax": lambda a, at: kernels.segment_softmax(
        np.ascontiguousarray(a[0][:, 0]), at["indptr"])[:, None],
    "concat_cols": lambda a, at: np.hstack(a),
    "reduce_sum": lambda a, at: (a[0].sum(axis=at["axis"], keepdims=True)
                                 if at["axis"] is not None else a[0].sum().reshape(1, 1)),
}


def _b_concat(g, args, out, at, wanted):
    edges = np.cumsum([0] + at["widths"])
    return [g[:, edges[k]:edges[k + 1]] for k in range(len(args))]


def _b_softmax_rows(g, args, y, at, wanted):
    return [y * (g - (g * y).sum(axis=1, keepdims=True))]


_BACKWARD = {
    "matmul": lambda g, a, y, at, w: [g @ a[1].T if w[0] else None, a[0].T @ g if w[1] else None],
    "add": lambda g, a, y, at, w: [_unbroadcast(g, a[0].shape), _unbroadcast(g, a[1].shape)],
    "hadamard": lambda g, a, y, at, w: [_unbroadcast(g * a[1], a[0].shape) if w[0] else None,
                                        _unbroadcast(g * a[0], a[1].shape) if w[1] else None],
    "scale": lambda g, a, y, at, w: [at["c"] * g],
    "gather": lambda g, a, y, at, w: [kernels.scatter_add_rows(np.ascontiguousarray(g), at["idx"], a[0].shape[0])],
    "scatter_add": lambda g, a, y, at, w: [g[at["idx"]]],
    "spmm": lambda g, a, y, at, w: [at["m"].transpose().matmul(g)],
    "sigmoid": lambda g, a, y, at, w: [g * y * (1.0 - y)],
    "tanh": lambda g, a, y, at, w: [g * (1.0 - y * y)],
    "relu": lambda g, a, y, at, w: [g * (a[0] > 0.0)],
    "softplus": lambda g, a, y, at, w: [g * stable_sigmoid(a[0])],
    "softmax_rows": _b_softmax_rows,
    "segment_softmax": lambda g, a, y, at, w: [kernels.segment_softmax_backward(
        np.ascontiguousarray(y[:, 0]), np.ascontiguousarray(g[:, 0]), at["indptr"])[:, None]],
    "concat_cols": _b_concat,
    "reduce_sum": lambda g, a, y, at, w: [np.broadcast_to(g, a[0].shape).copy()],
}

PRIMITIVES = tuple(k for k in _FORWARD if k not in ("param", "const"))
