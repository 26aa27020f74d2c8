"""Minimal reverse-mode automatic differentiation over dense float64 arrays.

The op set is deliberately small: matmul, elementwise arithmetic, leaky ReLU,
max reduction over a middle axis, row gathering, channel concatenation and a
stabilized log-softmax. That is enough to express shared MLPs, edge
convolutions, neighborhood pooling and the gather/concat plumbing the rest of
the package needs.

Tensors are immutable after creation. Computation is recorded on an explicit
`Tape`; tensors without a tape run the same numpy code without recording,
which is the fast inference path.
"""

import numpy as np

__all__ = [
    "Tape",
    "Tensor",
    "add",
    "sub",
    "mul",
    "matmul",
    "leaky_relu",
    "max_reduce",
    "gather_rows",
    "concat",
    "reshape",
    "expand_mid",
    "sum_all",
    "log_softmax",
    "backward",
]


class Tape:
    """Ordered record of operations for one reverse sweep.

    Records are appended in execution order, so every operation's inputs
    precede it and a single reversed pass computes all gradients. Gradients
    accumulate additively when a node feeds multiple consumers. A tape can
    be consumed by `backward` exactly once.
    """

    def __init__(self):
        self._records = []  # (out_id, grad_fn); grad_fn(g) -> [(in_id, g_in), ...]
        self._leaves = {}   # node_id -> shape, for requires_grad leaves
        self._next_id = 0
        self._consumed = False

    def _fresh_id(self):
        nid = self._next_id
        self._next_id += 1
        return nid

    def _register_leaf(self, shape):
        nid = self._fresh_id()
        self._leaves[nid] = tuple(shape)
        return nid

    def _record(self, grad_fn):
        nid = self._fresh_id()
        self._records.append((nid, grad_fn))
        return nid

    @property
    def num_records(self):
        return len(self._records)


class Tensor:
    """Dense float64 array, optionally tracked on a tape.

    `node_id` is the opaque tape handle; it is None for constants that do
    not participate in differentiation.
    """

    __slots__ = ("data", "requires_grad", "tape", "node_id")

    def __init__(self, data, requires_grad=False, tape=None, node_id=None):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.tape = tape
        self.node_id = node_id

    @classmethod
    def parameter(cls, data, tape):
        """Wrap `data` as a trainable leaf on `tape`."""
        arr = np.asarray(data, dtype=np.float64)
        return cls(arr, requires_grad=True, tape=tape,
                   node_id=tape._register_leaf(arr.shape))

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def __repr__(self):
        tag = f", node={self.node_id}" if self.node_id is not None else ""
        return f"Tensor(shape={self.data.shape}{tag})"

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)


def _as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _tape_of(*tensors):
    tape = None
    for t in tensors:
        if t.tape is not None:
            if tape is None:
                tape = t.tape
            elif tape is not t.tape:
                raise ValueError("operands live on different tapes")
    return tape


def _emit(tape, out_data, grad_fn):
    """Wrap `out_data`; record `grad_fn` if any input was on a tape."""
    if tape is None:
        return Tensor(out_data)
    return Tensor(out_data, requires_grad=True, tape=tape,
                  node_id=tape._record(grad_fn))


def add(a, b):
    """Elementwise sum. `b` may also be a 1-D bias broadcast over the last axis."""
    a, b = _as_tensor(a), _as_tensor(b)
    bias = a.shape != b.shape
    if bias and not (b.ndim == 1 and a.ndim >= 1 and a.shape[-1] == b.shape[0]):
        raise ValueError(f"add: shapes {a.shape} and {b.shape} are incompatible")
    out = a.data + b.data
    tape = _tape_of(a, b)
    aid, bid = a.node_id, b.node_id
    lead = tuple(range(a.ndim - 1))

    def grad_fn(g):
        contribs = []
        if aid is not None:
            contribs.append((aid, g))
        if bid is not None:
            contribs.append((bid, g.sum(axis=lead) if bias else g))
        return contribs

    return _emit(tape, out, grad_fn)


def sub(a, b):
    """Elementwise difference of same-shape tensors."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.shape != b.shape:
        raise ValueError(f"sub: shapes {a.shape} and {b.shape} differ")
    out = a.data - b.data
    tape = _tape_of(a, b)
    aid, bid = a.node_id, b.node_id

    def grad_fn(g):
        contribs = []
        if aid is not None:
            contribs.append((aid, g))
        if bid is not None:
            contribs.append((bid, -g))
        return contribs

    return _emit(tape, out, grad_fn)


def mul(a, b):
    """Elementwise product; `b` may be a python scalar."""
    a = _as_tensor(a)
    if isinstance(b, (int, float)):
        s = float(b)
        aid = a.node_id
        return _emit(a.tape, a.data * s,
                     lambda g: [(aid, g * s)] if aid is not None else [])
    b = _as_tensor(b)
    if a.shape != b.shape:
        raise ValueError(f"mul: shapes {a.shape} and {b.shape} differ")
    tape = _tape_of(a, b)
    aid, bid = a.node_id, b.node_id
    a_data, b_data = a.data, b.data

    def grad_fn(g):
        contribs = []
        if aid is not None:
            contribs.append((aid, g * b_data))
        if bid is not None:
            contribs.append((bid, g * a_data))
        return contribs

    return _emit(tape, a_data * b_data, grad_fn)


def matmul(a, b):
    """Matrix product of 2-D tensors: (M,K) @ (K,N) -> (M,N)."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ValueError(f"matmul: shapes {a.shape} and {b.shape} do not chain")
    tape = _tape_of(a, b)
    aid, bid = a.node_id, b.node_id
    a_data, b_data = a.data, b.data

    def grad_fn(g):
        contribs = []
        if aid is not None:
            contribs.append((aid, g @ b_data.T))
        if bid is not None:
            contribs.append((bid, a_data.T @ g))
        return contribs

    return _emit(tape, a_data @ b_data, grad_fn)


def leaky_relu(x, slope=0.2):
    """Elementwise max(x, slope*x); at x == 0 the subgradient `slope` is used."""
    if not 0.0 <= slope < 1.0:
        raise ValueError(f"leaky_relu: slope {slope} outside [0, 1)")
    x = _as_tensor(x)
    mask = x.data > 0
    out = np.where(mask, x.data, slope * x.data)
    xid = x.node_id

    def grad_fn(g):
        return [(xid, np.where(mask, g, slope * g))] if xid is not None else []

    return _emit(x.tape, out, grad_fn)


def max_reduce(x, axis=1):
    """Maximum over one axis; gradient routes to the argmax only.

    Ties are broken toward the lowest index along the reduced axis, which
    keeps the backward pass deterministic.
    """
    x = _as_tensor(x)
    if x.shape[axis] < 1:
        raise ValueError(f"max_reduce: empty reduction axis in shape {x.shape}")
    arg = np.argmax(x.data, axis=axis)
    out = np.take_along_axis(x.data, np.expand_dims(arg, axis), axis=axis)
    out = np.squeeze(out, axis=axis)
    xid = x.node_id
    in_shape = x.shape

    def grad_fn(g):
        if xid is None:
            return []
        gx = np.zeros(in_shape)
        np.put_along_axis(gx, np.expand_dims(arg, axis),
                          np.expand_dims(g, axis), axis=axis)
        return [(xid, gx)]

    return _emit(x.tape, out, grad_fn)


def gather_rows(x, idx):
    """out[m, j] = x[idx[m, j]] for x of shape (N, C) and integer idx (M, k).

    Backward scatter-adds, so duplicate indices accumulate gradient.
    """
    x = _as_tensor(x)
    idx = np.asarray(idx)
    if not np.issubdtype(idx.dtype, np.integer):
        raise ValueError("gather_rows: idx must be an integer array")
    if x.ndim != 2 or idx.ndim != 2:
        raise ValueError(f"gather_rows: need (N,C) data and (M,k) idx, "
                         f"got {x.shape} and {idx.shape}")
    n = x.shape[0]
    if idx.size and (idx.min() < 0 or idx.max() >= n):
        raise ValueError(f"gather_rows: index out of range for {n} rows")
    out = x.data[idx]
    xid = x.node_id
    shape = x.shape

    def grad_fn(g):
        if xid is None:
            return []
        gx = np.zeros(shape)
        np.add.at(gx, idx.ravel(), g.reshape(-1, shape[1]))
        return [(xid, gx)]

    return _emit(x.tape, out, grad_fn)


def concat(parts):
    """Concatenate along the channel (last) axis; other extents must match."""
    parts = [_as_tensor(p) for p in parts]
    if not parts:
        raise ValueError("concat: need at least one part")
    lead = parts[0].shape[:-1]
    for p in parts[1:]:
        if p.shape[:-1] != lead:
            raise ValueError(f"concat: leading extents differ: "
                             f"{[p.shape for p in parts]}")
    out = np.concatenate([p.data for p in parts], axis=-1)
    tape = _tape_of(*parts)
    ids = [p.node_id for p in parts]
    widths = [p.shape[-1] for p in parts]
    edges = np.cumsum([0] + widths)

    def grad_fn(g):
        return [(nid, g[..., edges[i]:edges[i + 1]])
                for i, nid in enumerate(ids) if nid is not None]

    return _emit(tape, out, grad_fn)


def reshape(x, shape):
    """Row-major reshape; gradient reshapes back."""
    x = _as_tensor(x)
    out = x.data.reshape(shape)
    xid = x.node_id
    old = x.shape

    def grad_fn(g):
        return [(xid, g.reshape(old))] if xid is not None else []

    return _emit(x.tape, out, grad_fn)


def expand_mid(x, k):
    """Repeat rows of (M, C) into (M, k, C); gradient sums over the k axis."""
    x = _as_tensor(x)
    if x.ndim != 2:
        raise ValueError(f"expand_mid: need a 2-D tensor, got {x.shape}")
    out = np.broadcast_to(x.data[:, None, :], (x.shape[0], k, x.shape[1])).copy()
    xid = x.node_id

    def grad_fn(g):
        return [(xid, g.sum(axis=1))] if xid is not None else []

    return _emit(x.tape, out, grad_fn)


def sum_all(x):
    """Sum of all elements, as a scalar tensor."""
    x = _as_tensor(x)
    xid = x.node_id
    shape = x.shape

    def grad_fn(g):
        return [(xid, np.full(shape, g))] if xid is not None else []

    return _emit(x.tape, np.asarray(x.data.sum()), grad_fn)


def log_softmax(x):
    """Row-wise log softmax of a 2-D tensor, stabilized via max subtraction."""
    x = _as_tensor(x)
    if x.ndim != 2:
        raise ValueError(f"log_softmax: need a 2-D tensor, got {x.shape}")
    shifted = x.data - x.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    out = shifted - lse
    soft = np.exp(out)
    xid = x.node_id

    def grad_fn(g):
        if xid is None:
            return []
        return [(xid, g - soft * g.sum(axis=1, keepdims=True))]

    return _emit(x.tape, out, grad_fn)


def backward(loss):
    """Run the reverse sweep from a scalar `loss`.

    Returns a dict mapping each requires_grad leaf's node id to its gradient
    tensor (zeros if the leaf never influenced the loss). Each tape supports
    one backward pass.
    """
    if not isinstance(loss, Tensor) or loss.tape is None:
        raise ValueError("backward: loss must be a tensor recorded on a tape")
    if loss.data.shape != ():
        raise ValueError(f"backward: loss must be scalar, got shape {loss.data.shape}")
    tape = loss.tape
    if tape._consumed:
        raise RuntimeError("backward: tape already consumed")
    tape._consumed = True

    grads = {loss.node_id: np.asarray(1.0)}
    for out_id, grad_fn in reversed(tape._records):
        g = grads.pop(out_id, None)
        if g is None:
            continue
        for in_id, gin in grad_fn(g):
            acc = grads.get(in_id)
            grads[in_id] = gin if acc is None else acc + gin

    return {nid: Tensor(grads.get(nid, np.zeros(shape)))
            for nid, shape in tape._leaves.items()}
