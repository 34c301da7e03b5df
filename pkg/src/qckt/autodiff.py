"""Reverse-mode automatic differentiation on a per-run tape.

Tensors are C-contiguous float64 numpy arrays (scalars are 0-d arrays).  A
:class:`Tape` records every operation as an append-only list of nodes, so the
node list is already topologically ordered and :meth:`Tape.backward` is a
single reverse sweep.  Tapes are cheap and rebuilt for every sequence batch;
one tape is single-threaded, distinct tapes share nothing.

Beyond the rank-1 core ops, most ops accept an extra trailing batch axis
(columns), which is how sequence batches are pushed through the model graph.
"""

import numpy as np

from . import kernels
from .errors import DomainError, ShapeError

EPS_PROB = 1e-12  # probability clamp before logs


def as_tensor(x):
    """Coerce to a C-ordered float64 ndarray (0-d for scalars)."""
    return np.asarray(x, dtype=np.float64, order="C")


def sigmoid(x):
    """Numerically stable logistic function, elementwise."""
    x = np.asarray(x, dtype=np.float64)
    shape = x.shape
    flat = np.atleast_1d(x).ravel()
    out = np.empty_like(flat)
    pos = flat >= 0
    neg = ~pos
    out[pos] = 1.0 / (1.0 + np.exp(-flat[pos]))
    ex = np.exp(flat[neg])
    out[neg] = ex / (1.0 + ex)
    return out.reshape(shape) if shape else out[0]


def bce_value(pred, target):
    """Binary cross entropy with the standard probability clamp."""
    p = np.clip(pred, EPS_PROB, 1.0 - EPS_PROB)
    return -(target * np.log(p) + (1.0 - target) * np.log1p(-p))


class Node:
    """One recorded operation: kind, input node ids, output value.

    ``grad`` is populated by :meth:`Tape.backward`; it always has the same
    shape as ``value``.
    """

    __slots__ = ("id", "op", "value", "inputs", "grad", "name", "_backward")

    def __init__(self, nid, op, value, inputs, backward, name=None):
        self.id = nid
        self.op = op
        self.value = value
        self.inputs = inputs
        self.grad = None
        self.name = name
        self._backward = backward

    def __repr__(self):
        return f"Node({self.id}, {self.op}, shape={self.value.shape})"


def _ensure_grad(node):
    if node.grad is None:
        node.grad = np.zeros_like(node.value)
    return node.grad


def flatten_groups(groups):
    """Turn per-column index groups into flat (rows, cols, weights) arrays.

    Weight of each member is 1/len(group), so a weighted scatter computes the
    per-group mean.
    """
    rows, cols, wts = [], [], []
    for j, grp in enumerate(groups):
        grp = list(grp)
        if not grp:
            raise DomainError("embed_mean: empty index group")
        inv = 1.0 / len(grp)
        rows.extend(grp)
        cols.extend([j] * len(grp))
        wts.extend([inv] * len(grp))
    return (
        np.asarray(rows, dtype=np.int64),
        np.asarray(cols, dtype=np.int64),
        np.asarray(wts, dtype=np.float64),
    )


class Tape:
    def __init__(self):
        self.nodes = []

    def _record(self, op, value, inputs, backward, name=None):
        node = Node(len(self.nodes), op, as_tensor(value), tuple(inputs), backward, name)
        self.nodes.append(node)
        return node

    def leaf(self, value, name=None):
        """Record an input tensor (parameter or constant)."""
        return self._record("leaf", value, (), None, name=name)

    # -- core ops ----------------------------------------------------------

    def matmul(self, w, x):
        """W (r x c) times x, where x is a vector (c,) or batch (c x B)."""
        wv, xv = w.value, x.value
        if wv.ndim != 2 or xv.ndim not in (1, 2) or wv.shape[1] != xv.shape[0]:
            raise ShapeError(f"cannot multiply {wv.shape} by {xv.shape}")
        out = wv @ xv

        def backward(g):
            _ensure_grad(w)
            if xv.ndim == 1:
                w.grad += np.outer(g, xv)
            else:
                w.grad += g @ xv.T
            _ensure_grad(x)
            x.grad += wv.T @ g

        return self._record("matmul", out, (w, x), backward)

    # spec name for the vector case
    matvec = matmul

    def add(self, a, b):
        if a.value.shape != b.value.shape:
            raise ShapeError(f"add shapes differ: {a.value.shape} vs {b.value.shape}")

        def backward(g):
            _ensure_grad(a)
            a.grad += g
            _ensure_grad(b)
            b.grad += g

        return self._record("add", a.value + b.value, (a, b), backward)

    def mul(self, a, b):
        if a.value.shape != b.value.shape:
            raise ShapeError(f"mul shapes differ: {a.value.shape} vs {b.value.shape}")

        def backward(g):
            _ensure_grad(a)
            a.grad += g * b.value
            _ensure_grad(b)
            b.grad += g * a.value

        return self._record("mul", a.value * b.value, (a, b), backward)

    def sigmoid(self, x):
        y = sigmoid(x.value)

        def backward(g):
            _ensure_grad(x)
            x.grad += g * y * (1.0 - y)

        return self._record("sigmoid", y, (x,), backward)

    def tanh(self, x):
        y = np.tanh(x.value)

        def backward(g):
            _ensure_grad(x)
            x.grad += g * (1.0 - y * y)

        return self._record("tanh", y, (x,), backward)

    def relu(self, x):
        # gradient at exactly 0 is 0 (subgradient choice)
        y = np.maximum(x.value, 0.0)
        pos = x.value > 0

        def backward(g):
            _ensure_grad(x)
            x.grad += g * pos

        return self._record("relu", y, (x,), backward)

    def concat(self, parts):
        """Join rank-1 tensors in order; backward slices the gradient back."""
        for p in parts:
            if p.value.ndim != 1:
                raise ShapeError(f"concat requires vectors, got shape {p.value.shape}")
        return self._concat0(parts, "concat")

    def vstack(self, parts):
        """Axis-0 concatenation of matrices/vectors with equal trailing shape."""
        return self._concat0(parts, "vstack")

    def _concat0(self, parts, op):
        parts = tuple(parts)
        out = np.concatenate([p.value for p in parts], axis=0)
        sizes = [p.value.shape[0] for p in parts]

        def backward(g):
            off = 0
            for p, k in zip(parts, sizes):
                _ensure_grad(p)
                p.grad += g[off : off + k]
                off += k

        return self._record(op, out, parts, backward)

    def sum_pool(self, x):
        """Sum of a rank-1 tensor; gradient broadcasts 1 to every entry."""
        if x.value.ndim != 1:
            raise ShapeError(f"sum_pool requires a vector, got shape {x.value.shape}")

        def backward(g):
            _ensure_grad(x)
            x.grad += g

        return self._record("sum_pool", x.value.sum(), (x,), backward)

    def bce(self, pred, target):
        """Binary cross entropy of a scalar probability against a 0/1 target."""
        if target not in (0, 1):
            raise DomainError(f"bce target must be 0 or 1, got {target!r}")
        if pred.value.ndim != 0:
            raise ShapeError(f"bce expects a scalar prediction, got {pred.value.shape}")
        t = float(target)
        p = np.clip(pred.value, EPS_PROB, 1.0 - EPS_PROB)
        inside = (pred.value > EPS_PROB) & (pred.value < 1.0 - EPS_PROB)

        def backward(g):
            _ensure_grad(pred)
            pred.grad += g * inside * (p - t) / (p * (1.0 - p))

        return self._record("bce", bce_value(p, t), (pred,), backward)

    # -- batched extensions --------------------------------------------------

    def add_bias(self, x, b):
        """Add a (r,) bias to every column of a (r x B) matrix."""
        if x.value.ndim != 2 or b.value.shape != (x.value.shape[0],):
            raise ShapeError(f"add_bias shapes: {x.value.shape} and {b.value.shape}")

        def backward(g):
            _ensure_grad(x)
            x.grad += g
            _ensure_grad(b)
            b.grad += g.sum(axis=1)

        return self._record("add_bias", x.value + b.value[:, None], (x, b), backward)

    def scale_rows(self, x, w):
        """Multiply row i of x by w[i] (elementwise weight vector)."""
        if x.value.ndim != 2 or w.value.shape != (x.value.shape[0],):
            raise ShapeError(f"scale_rows shapes: {x.value.shape} and {w.value.shape}")

        def backward(g):
            _ensure_grad(x)
            x.grad += g * w.value[:, None]
            _ensure_grad(w)
            w.grad += (g * x.value).sum(axis=1)

        return self._record("scale_rows", x.value * w.value[:, None], (x, w), backward)

    def scale_columns(self, x, coeffs):
        """Multiply column j of x by the constant coeffs[j] (no grad to coeffs)."""
        coeffs = as_tensor(coeffs)
        if x.value.ndim != 2 or coeffs.shape != (x.value.shape[1],):
            raise ShapeError(f"scale_columns shapes: {x.value.shape} and {coeffs.shape}")

        def backward(g):
            _ensure_grad(x)
            x.grad += g * coeffs[None, :]

        return self._record("scale_columns", x.value * coeffs[None, :], (x,), backward)

    def as_row(self, x):
        """View a (B,) vector as a (1 x B) single-row matrix."""
        if x.value.ndim != 1:
            raise ShapeError(f"as_row requires a vector, got {x.value.shape}")

        def backward(g):
            _ensure_grad(x)
            x.grad += g[0]

        return self._record("as_row", x.value[None, :], (x,), backward)

    def sum_columns(self, x):
        """Column sums of a (r x B) matrix -> (B,)."""
        if x.value.ndim != 2:
            raise ShapeError(f"sum_columns requires a matrix, got {x.value.shape}")

        def backward(g):
            _ensure_grad(x)
            x.grad += g[None, :]

        return self._record("sum_columns", x.value.sum(axis=0), (x,), backward)

    def dot_columns(self, w, x):
        """w . x[:, j] for each column -> (B,)."""
        if x.value.ndim != 2 or w.value.shape != (x.value.shape[0],):
            raise ShapeError(f"dot_columns shapes: {w.value.shape} and {x.value.shape}")

        def backward(g):
            _ensure_grad(w)
            w.grad += x.value @ g
            _ensure_grad(x)
            x.grad += np.outer(w.value, g)

        return self._record("dot_columns", w.value @ x.value, (w, x), backward)

    def mul_scalar(self, x, s):
        """Multiply x by a scalar parameter node."""
        if s.value.ndim != 0:
            raise ShapeError("mul_scalar expects a scalar node")

        def backward(g):
            _ensure_grad(x)
            x.grad += g * s.value
            _ensure_grad(s)
            s.grad += (g * x.value).sum()

        return self._record("mul_scalar", x.value * s.value, (x, s), backward)

    def add_scalar(self, x, s):
        """Add a scalar parameter node to every entry of x."""
        if s.value.ndim != 0:
            raise ShapeError("add_scalar expects a scalar node")

        def backward(g):
            _ensure_grad(x)
            x.grad += g
            _ensure_grad(s)
            s.grad += g.sum()

        return self._record("add_scalar", x.value + s.value, (x, s), backward)

    def scale_const(self, x, c):
        """Multiply by a python constant."""
        c = float(c)

        def backward(g):
            _ensure_grad(x)
            x.grad += g * c

        return self._record("scale_const", x.value * c, (x,), backward)

    def embed(self, table, indices):
        """Select rows of an (n x d) table -> columns of a (d x B) matrix."""
        indices = np.asarray(indices, dtype=np.int64)
        out = table.value[indices].T

        def backward(g):
            _ensure_grad(table)
            np.add.at(table.grad, indices, g.T)

        return self._record("embed", out, (table,), backward)

    def embed_mean(self, table, groups):
        """Average row groups of an (n x d) table -> columns of (d x B).

        ``groups`` is a sequence of non-empty index collections, one per
        output column.
        """
        return self.embed_mean_flat(table, *flatten_groups(groups), len(groups))

    def embed_mean_flat(self, table, rows, cols, wts, n_cols):
        """:meth:`embed_mean` with groups pre-flattened by :func:`flatten_groups`."""
        d = table.value.shape[1]
        out = np.zeros((d, n_cols))
        np.add.at(out.T, cols, table.value[rows] * wts[:, None])

        def backward(g):
            _ensure_grad(table)
            np.add.at(table.grad, rows, g.T[cols] * wts[:, None])

        return self._record("embed_mean", out, (table,), backward)

    def lstm_gates(self, z, c_prev):
        """Fused gate pass: z (4d x B) stacked preactivations, c_prev (d x B).

        Returns (h, c) nodes.  All four gates are logistic; the cell is
        f*c_prev + i*cand and h is o*tanh(c).  Forward and backward run in the
        active kernel backend.
        """
        zv, cv = z.value, c_prev.value
        if zv.ndim != 2 or cv.ndim != 2 or zv.shape != (4 * cv.shape[0], cv.shape[1]):
            raise ShapeError(f"lstm_gates shapes: {zv.shape} and {cv.shape}")
        gates, tc, c, h = kernels.gates_forward(zv, cv)
        dc_box = [None]

        def backward_h(g):
            dc = dc_box[0]
            if dc is None:
                dc = np.zeros_like(c)
            dz, dcp = kernels.gates_backward(g, dc, gates, tc, cv)
            _ensure_grad(z)
            z.grad += dz
            _ensure_grad(c_prev)
            c_prev.grad += dcp

        h_node = self._record("lstm_gates", h, (z, c_prev), backward_h)

        def backward_c(g):
            dc_box[0] = g
            _ensure_grad(h_node)  # guarantees backward_h runs even if h is unused

        c_node = self._record("lstm_cell", c, (h_node,), backward_c)
        return h_node, c_node

    def bce_sum(self, pred, targets, mask=None):
        """Sum of binary cross entropies of a (N,) prediction vector.

        ``targets`` (and optional 0/1 ``mask``) are constants; masked-out
        positions contribute nothing to value or gradient.
        """
        targets = as_tensor(targets)
        if pred.value.shape != targets.shape or pred.value.ndim != 1:
            raise ShapeError(f"bce_sum shapes: {pred.value.shape} and {targets.shape}")
        m = np.ones_like(targets) if mask is None else as_tensor(mask)
        p = np.clip(pred.value, EPS_PROB, 1.0 - EPS_PROB)
        inside = (pred.value > EPS_PROB) & (pred.value < 1.0 - EPS_PROB)
        val = float((m * bce_value(p, targets)).sum())

        def backward(g):
            _ensure_grad(pred)
            pred.grad += g * m * inside * (p - targets) / (p * (1.0 - p))

        return self._record("bce_sum", val, (pred,), backward)

    # -- reverse sweep -------------------------------------------------------

    def backward(self, loss):
        """Fill ``grad`` on every node reachable from the scalar loss."""
        if loss.value.ndim != 0:
            raise ShapeError(f"backward needs a scalar loss, got shape {loss.value.shape}")
        loss.grad = np.ones_like(loss.value)
        for node in reversed(self.nodes[: loss.id + 1]):
            if node.grad is None or node._backward is None:
                continue
            node._backward(node.grad)

    @staticmethod
    def grad(node):
        """Gradient of the last backward pass; zeros if unreachable from loss."""
        if node.grad is None:
            return np.zeros_like(node.value)
        return node.grad


class GradCheckReport:
    """Per-parameter max relative error between tape and finite differences."""

    def __init__(self, h, tol):
        self.h = h
        self.tol = tol
        self.max_rel_err = {}
        self.failures = []

    @property
    def passed(self):
        return not self.failures and all(e < self.tol for e in self.max_rel_err.values())

    def worst(self):
        return max(self.max_rel_err.values()) if self.max_rel_err else 0.0

    def __repr__(self):
        state = "pass" if self.passed else f"FAIL {self.failures or ''}"
        return f"GradCheckReport(worst={self.worst():.3g}, tol={self.tol}, {state})"


def grad_check(build, params, h=1e-5, tol=1e-4):
    """Compare tape gradients against central finite differences.

    ``build(tape, nodes)`` must deterministically construct a scalar loss from
    the dict of parameter leaf nodes.  Gradients are checked entrywise with
    relative error |g_ad - g_fd| / max(1e-8, |g_ad| + |g_fd|).
    """
    params = {k: as_tensor(v) for k, v in params.items()}

    def loss_value():
        tape = Tape()
        nodes = {k: tape.leaf(v, name=k) for k, v in params.items()}
        return float(build(tape, nodes).value)

    tape = Tape()
    nodes = {k: tape.leaf(v, name=k) for k, v in params.items()}
    loss = build(tape, nodes)
    tape.backward(loss)

    report = GradCheckReport(h, tol)
    for name, arr in params.items():
        g_ad = Tape.grad(nodes[name])
        if not np.all(np.isfinite(g_ad)):
            report.failures.append(f"non-finite tape gradient for {name}")
            report.max_rel_err[name] = np.inf
            continue
        g_fd = np.zeros_like(arr)
        flat, fd_flat = arr.reshape(-1), g_fd.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            up = loss_value()
            flat[i] = orig - h
            down = loss_value()
            flat[i] = orig
            fd_flat[i] = (up - down) / (2.0 * h)
        if not np.all(np.isfinite(g_fd)):
            report.failures.append(f"non-finite finite-difference gradient for {name}")
            report.max_rel_err[name] = np.inf
            continue
        denom = np.maximum(1e-8, np.abs(g_ad) + np.abs(g_fd))
        report.max_rel_err[name] = float(np.max(np.abs(g_ad - g_fd) / denom)) if flat.size else 0.0
    return report
