"""Reverse-mode automatic differentiation over an append-only op tape.

Node values are float64 numpy arrays: scalars have shape (), vectors shape
(n,), and batches of vectors shape (B, n).  ``matvec`` is the only matrix
product; a 2-D right operand is treated as a stack of row vectors.  The
``detach`` op copies its input value and contributes nothing to its input's
adjoint, which is what lets a loss use one quantity for its forward value
and a different one for its gradient path.

Gradients are taken with respect to parameter leaves registered via
``Tape.param``; ``Tape.backward`` returns their concatenation in
registration order.
"""

from __future__ import annotations

import numpy as np


class TapeError(ValueError):
    """Raised on malformed tape usage (shape mismatch, non-scalar root)."""


class Node:
    __slots__ = ("op", "args", "value", "aux", "needs_grad")

    def __init__(self, op, args, value, aux, needs_grad):
        self.op = op
        self.args = args
        self.value = value
        self.aux = aux
        self.needs_grad = needs_grad

    def __repr__(self):  # pragma: no cover - debugging aid
        return f"Node({self.op}, args={self.args}, shape={self.value.shape})"


def _as_array(x) -> np.ndarray:
    a = np.asarray(x, dtype=np.float64)
    return a


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum an adjoint down to the shape of the operand it feeds."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, (gd, sd) in enumerate(zip(g.shape, shape)):
        if sd == 1 and gd != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _forward(op: str, vals: list[np.ndarray], aux):
    """Single evaluation rule per op, shared by graph building and replay."""
    if op == "add":
        return vals[0] + vals[1]
    if op == "sub":
        return vals[0] - vals[1]
    if op == "mul":
        return vals[0] * vals[1]
    if op == "neg":
        return -vals[0]
    if op == "scale":
        return vals[0] * aux
    if op == "matvec":
        w, x = vals
        return np.matmul(x, w.T) if x.ndim == 2 else np.matmul(w, x)
    if op == "relu":
        return np.maximum(vals[0], 0.0)
    if op == "tanh":
        return np.tanh(vals[0])
    if op == "sin":
        return np.sin(vals[0])
    if op == "cos":
        return np.cos(vals[0])
    if op == "detach":
        return vals[0].copy()
    if op == "mean":
        return np.asarray(vals[0].mean())
    if op == "sum":
        return np.asarray(vals[0].sum())
    if op == "reshape":
        return vals[0].reshape(aux)
    if op == "slice":
        return vals[0][aux[0]:aux[1]]
    if op == "gather":
        return vals[0][aux]
    if op == "concat":
        return np.concatenate(vals, axis=-1)
    raise TapeError(f"unknown op {op!r}")


class Tape:
    """Append-only record of primitive ops with reverse-mode backward."""

    def __init__(self):
        self.nodes: list[Node] = []
        self.param_ids: list[int] = []
        self._adj = None
        self._owned = None

    # -- leaves ------------------------------------------------------------

    def const(self, x) -> int:
        return self._push("const", (), _as_array(x), None, needs_grad=False)

    def param(self, x) -> int:
        v = _as_array(x)
        if v.ndim != 1:
            raise TapeError("parameter leaves must be flat vectors")
        nid = self._push("param", (), v.copy(), None, needs_grad=True)
        self.param_ids.append(nid)
        return nid

    # -- op builders ---------------------------------------------------------

    def add(self, a: int, b: int) -> int:
        return self._op("add", a, b)

    def sub(self, a: int, b: int) -> int:
        return self._op("sub", a, b)

    def mul(self, a: int, b: int) -> int:
        return self._op("mul", a, b)

    def neg(self, a: int) -> int:
        return self._op("neg", a)

    def scale(self, a: int, k: float) -> int:
        return self._op("scale", a, aux=float(k))

    def matvec(self, w: int, x: int) -> int:
        wv, xv = self.nodes[w].value, self.nodes[x].value
        if wv.ndim != 2:
            raise TapeError("matvec weight must be 2-D")
        if xv.shape[-1] != wv.shape[1]:
            raise TapeError(
                f"matvec dimension mismatch: {wv.shape} with {xv.shape}")
        return self._op("matvec", w, x)

    def relu(self, a: int) -> int:
        return self._op("relu", a)

    # hinge max(0, x); identical rule to relu, kept as the loss-facing name
    max0 = relu

    def tanh(self, a: int) -> int:
        return self._op("tanh", a)

    def sin(self, a: int) -> int:
        return self._op("sin", a)

    def cos(self, a: int) -> int:
        return self._op("cos", a)

    def detach(self, a: int) -> int:
        return self._push("detach", (a,), self.nodes[a].value.copy(), None,
                          needs_grad=False)

    def mean(self, a: int) -> int:
        return self._op("mean", a)

    def sum(self, a: int) -> int:
        return self._op("sum", a)

    def reshape(self, a: int, shape: tuple) -> int:
        return self._op("reshape", a, aux=tuple(shape))

    def slice1d(self, a: int, start: int, stop: int) -> int:
        if self.nodes[a].value.ndim != 1:
            raise TapeError("slice1d expects a flat vector")
        return self._op("slice", a, aux=(int(start), int(stop)))

    def gather_rows(self, a: int, idx) -> int:
        ix = np.asarray(idx, dtype=np.intp)
        return self._op("gather", a, aux=ix)

    def concat(self, parts: list[int]) -> int:
        if not parts:
            raise TapeError("concat of zero parts")
        return self._op("concat", *parts)

    # -- access --------------------------------------------------------------

    def value(self, nid: int) -> np.ndarray:
        return self.nodes[nid].value

    def n_params(self) -> int:
        return sum(self.nodes[i].value.size for i in self.param_ids)

    def param_slices(self) -> list[tuple[int, int, int]]:
        """(node id, start, stop) of each parameter leaf in the flat gradient."""
        out, off = [], 0
        for nid in self.param_ids:
            n = self.nodes[nid].value.size
            out.append((nid, off, off + n))
            off += n
        return out

    # -- engine ----------------------------------------------------------

    def _push(self, op, args, value, aux, needs_grad) -> int:
        self.nodes.append(Node(op, args, value, aux, needs_grad))
        return len(self.nodes) - 1

    def _op(self, op: str, *args: int, aux=None) -> int:
        vals = [self.nodes[a].value for a in args]
        needs = any(self.nodes[a].needs_grad for a in args)
        return self._push(op, args, _forward(op, vals, aux), aux, needs)

    def backward(self, root: int) -> np.ndarray:
        """Flat gradient of a scalar root w.r.t. all parameter leaves."""
        rv = self.nodes[root].value
        if rv.size != 1:
            raise TapeError("backward root must be scalar-valued")
        # adjoints are stored by reference on first deposit and only
        # materialized into owned buffers when a second consumer adds in
        adj: list[np.ndarray | None] = [None] * (root + 1)
        owned = [False] * (root + 1)
        adj[root] = np.ones_like(rv)
        owned[root] = True
        self._adj, self._owned = adj, owned
        for nid in range(root, -1, -1):
            g = adj[nid]
            node = self.nodes[nid]
            if g is None or not node.needs_grad or node.op == "param":
                continue
            self._backprop(node, g, adj)
        out = np.zeros(self.n_params())
        for nid, a, b in self.param_slices():
            if nid <= root and adj[nid] is not None:
                out[a:b] = adj[nid]
        self._adj = self._owned = None
        return out

    def grad_slice(self, param_handle: int, flat_grad: np.ndarray) -> np.ndarray:
        for nid, a, b in self.param_slices():
            if nid == param_handle:
                return flat_grad[a:b]
        raise TapeError("handle is not a registered parameter leaf")

    def _accum(self, adj, nid: int, g: np.ndarray):
        if not self.nodes[nid].needs_grad:
            return
        owned = self._owned
        if adj[nid] is None:
            adj[nid] = g  # reference; never mutated while not owned
        elif owned[nid]:
            adj[nid] += g
        else:
            adj[nid] = adj[nid] + g
            owned[nid] = True

    def _accum_buffer(self, adj, nid: int) -> np.ndarray | None:
        """Writable adjoint buffer for scatter-style deposits."""
        if not self.nodes[nid].needs_grad:
            return None
        owned = self._owned
        if adj[nid] is None:
            adj[nid] = np.zeros_like(self.nodes[nid].value)
            owned[nid] = True
        elif not owned[nid]:
            adj[nid] = adj[nid].copy()
            owned[nid] = True
        return adj[nid]

    def _backprop(self, node: Node, g: np.ndarray, adj):
        op, args = node.op, node.args
        vals = [self.nodes[a].value for a in args]
        if op == "add":
            self._accum(adj, args[0], _unbroadcast(g, vals[0].shape))
            self._accum(adj, args[1], _unbroadcast(g, vals[1].shape))
        elif op == "sub":
            self._accum(adj, args[0], _unbroadcast(g, vals[0].shape))
            self._accum(adj, args[1], _unbroadcast(-g, vals[1].shape))
        elif op == "mul":
            self._accum(adj, args[0], _unbroadcast(g * vals[1], vals[0].shape))
            self._accum(adj, args[1], _unbroadcast(g * vals[0], vals[1].shape))
        elif op == "neg":
            self._accum(adj, args[0], -g)
        elif op == "scale":
            self._accum(adj, args[0], g * node.aux)
        elif op == "matvec":
            w, x = vals
            if x.ndim == 2:
                self._accum(adj, args[0], np.matmul(g.T, x))
                self._accum(adj, args[1], np.matmul(g, w))
            else:
                self._accum(adj, args[0], np.outer(g, x))
                self._accum(adj, args[1], np.matmul(w.T, g))
        elif op == "relu":
            self._accum(adj, args[0], g * (vals[0] > 0.0))
        elif op == "tanh":
            self._accum(adj, args[0], g * (1.0 - node.value * node.value))
        elif op == "sin":
            self._accum(adj, args[0], g * np.cos(vals[0]))
        elif op == "cos":
            self._accum(adj, args[0], -g * np.sin(vals[0]))
        elif op == "mean":
            self._accum(adj, args[0],
                        np.full(vals[0].shape, float(g) / vals[0].size))
        elif op == "sum":
            self._accum(adj, args[0], np.full(vals[0].shape, float(g)))
        elif op == "reshape":
            self._accum(adj, args[0], g.reshape(vals[0].shape))
        elif op == "slice":
            buf = self._accum_buffer(adj, args[0])
            if buf is not None:
                buf[node.aux[0]:node.aux[1]] += g
        elif op == "gather":
            buf = self._accum_buffer(adj, args[0])
            if buf is not None:
                np.add.at(buf, node.aux, g)
        elif op == "concat":
            off = 0
            for a, v in zip(args, vals):
                w = v.shape[-1]
                self._accum(adj, a, g[..., off:off + w])
                off += w
        else:  # pragma: no cover - detach/const/param never reach here
            raise TapeError(f"no backward rule for {op!r}")

    def replay(self) -> float:
        """Re-run every op from the leaves; return max |replayed - stored|.

        Bit-identical replay (return value 0.0) is an invariant.
        """
        vals: list[np.ndarray] = []
        worst = 0.0
        for node in self.nodes:
            if node.op in ("const", "param"):
                v = node.value
            else:
                v = _forward(node.op, [vals[a] for a in node.args], node.aux)
            d = float(np.max(np.abs(v - node.value))) if v.size else 0.0
            worst = max(worst, d)
            vals.append(v)
        return worst
