"""Minimal dense-tensor core with tape-based reverse-mode autodiff.

Values are float32 by default (float64 is supported and propagates, which is
what the gradient-check tests use). Reductions accumulate in float64 and cast
back to the input dtype. A tape is just the implicit graph of Tensor parents;
`backward` walks it in reverse topological order.
"""

from __future__ import annotations

import numpy as np

from .errors import ContractError, NumericGuardError, ShapeError

DEFAULT_DTYPE = np.float32

# When False, ops skip recording the backward graph (evaluation fast path).
_grad_enabled = True


class no_grad:
    """Context manager that disables graph recording."""

    def __enter__(self):
        global _grad_enabled
        self._prev = _grad_enabled
        _grad_enabled = False
        return self

    def __exit__(self, *exc):
        global _grad_enabled
        _grad_enabled = self._prev
        return False


class Tensor:
    __slots__ = ("values", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, values, requires_grad=False):
        if isinstance(values, (np.ndarray, np.generic)):
            arr = np.asarray(values)
            if arr.dtype not in (np.float32, np.float64):
                arr = arr.astype(DEFAULT_DTYPE)
        else:
            arr = np.asarray(values, dtype=DEFAULT_DTYPE)
        self.values = arr
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = ()
        self._backward = None

    @property
    def shape(self):
        return self.values.shape

    @property
    def dtype(self):
        return self.values.dtype

    def item(self):
        return float(self.values)

    def zero_grad(self):
        self.grad = None

    def accumulate_grad(self, g):
        if self.grad is None:
            self.grad = np.array(g, dtype=self.values.dtype, copy=True)
        else:
            self.grad += g

    def __repr__(self):
        return f"Tensor(shape={self.values.shape}, grad={self.requires_grad})"


def constant(values):
    return Tensor(values, requires_grad=False)


def _result(values, parents, backward_fn):
    """Build an op result, recording the tape edge when tracking is on."""
    track = _grad_enabled and any(p.requires_grad for p in parents)
    out = Tensor(values, requires_grad=track)
    if track:
        out._parents = tuple(parents)
        out._backward = backward_fn
    return out


def backward(loss):
    """Populate grads of all requires_grad leaves reachable from `loss`.

    Repeated calls without a grad reset accumulate, matching the optimizer
    contract. `loss` must be a scalar produced by recorded ops.
    """
    if loss.values.ndim != 0 and loss.values.size != 1:
        raise ContractError(f"backward expects a scalar, got shape {loss.values.shape}")
    topo = []
    visited = set()
    stack = [(loss, False)]
    while stack:
        node, processed = stack.pop()
        if processed:
            topo.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in visited:
                stack.append((p, False))
    loss.accumulate_grad(np.ones_like(loss.values))
    for node in reversed(topo):
        if node._backward is not None:
            node._backward(node.grad)


# ---------------------------------------------------------------------------
# core ops
# ---------------------------------------------------------------------------

def matmul(a, b):
    """np.matmul semantics for 2D, or batched 3D (batch dims must match)."""
    if a.values.ndim < 2 or b.values.ndim < 2:
        raise ShapeError("matmul needs >=2D operands")
    if a.values.shape[-1] != b.values.shape[-2]:
        raise ShapeError(f"matmul inner dims differ: {a.values.shape} @ {b.values.shape}")
    if a.values.ndim != b.values.ndim:
        raise ShapeError("matmul operands must have equal rank")
    vals = np.matmul(a.values, b.values)

    def back(g):
        if a.requires_grad:
            a.accumulate_grad(np.matmul(g, np.swapaxes(b.values, -1, -2)))
        if b.requires_grad:
            b.accumulate_grad(np.matmul(np.swapaxes(a.values, -1, -2), g))

    return _result(vals, (a, b), back)


def add(a, b):
    """Elementwise add; also supports (N, d) + (d,) row broadcast."""
    av, bv = a.values, b.values
    if av.shape == bv.shape:
        vals = av + bv

        def back(g):
            if a.requires_grad:
                a.accumulate_grad(g)
            if b.requires_grad:
                b.accumulate_grad(g)

    elif av.ndim == 2 and bv.ndim == 1 and av.shape[1] == bv.shape[0]:
        vals = av + bv

        def back(g):
            if a.requires_grad:
                a.accumulate_grad(g)
            if b.requires_grad:
                b.accumulate_grad(g.sum(axis=0, dtype=np.float64).astype(bv.dtype))

    else:
        raise ShapeError(f"add shapes incompatible: {av.shape} + {bv.shape}")
    return _result(vals, (a, b), back)


def sub(a, b):
    return add(a, scale(b, -1.0))


def mul(a, b):
    """Elementwise product; also (N, d) * (d,) row broadcast."""
    av, bv = a.values, b.values
    if not (av.shape == bv.shape
            or (av.ndim == 2 and bv.ndim == 1 and av.shape[1] == bv.shape[0])
            or av.ndim == 0 or bv.ndim == 0):
        raise ShapeError(f"mul shapes incompatible: {av.shape} * {bv.shape}")
    vals = av * bv

    def back(g):
        if a.requires_grad:
            ga = g * bv
            if ga.shape != av.shape:
                ga = _reduce_to(ga, av.shape, av.dtype)
            a.accumulate_grad(ga)
        if b.requires_grad:
            gb = g * av
            if gb.shape != bv.shape:
                gb = _reduce_to(gb, bv.shape, bv.dtype)
            b.accumulate_grad(gb)

    return _result(vals, (a, b), back)


def _reduce_to(g, shape, dtype):
    while g.ndim > len(shape):
        g = g.sum(axis=0, dtype=np.float64)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True, dtype=np.float64)
    return g.astype(dtype)


def scale(a, c):
    c = float(c)
    vals = a.values * np.asarray(c, dtype=a.values.dtype)

    def back(g):
        if a.requires_grad:
            a.accumulate_grad(g * np.asarray(c, dtype=a.values.dtype))

    return _result(vals, (a,), back)


def relu(a):
    vals = np.maximum(a.values, 0)

    def back(g):
        if a.requires_grad:
            a.accumulate_grad(g * (a.values > 0))

    return _result(vals, (a,), back)


def sigmoid(a):
    vals = 1.0 / (1.0 + np.exp(-a.values))

    def back(g):
        if a.requires_grad:
            a.accumulate_grad(g * vals * (1.0 - vals))

    return _result(vals, (a,), back)


def tanh(a):
    vals = np.tanh(a.values)

    def back(g):
        if a.requires_grad:
            a.accumulate_grad(g * (1.0 - vals * vals))

    return _result(vals, (a,), back)


def softmax(a, axis=-1):
    """Stabilized softmax. -inf entries get weight exactly 0."""
    x = a.values
    m = np.max(x, axis=axis, keepdims=True)
    e = np.exp(x - m)
    denom = e.sum(axis=axis, keepdims=True, dtype=np.float64).astype(x.dtype)
    vals = e / denom

    def back(g):
        if a.requires_grad:
            dot = (g * vals).sum(axis=axis, keepdims=True, dtype=np.float64).astype(x.dtype)
            a.accumulate_grad(vals * (g - dot))

    return _result(vals, (a,), back)


def dropout(a, rate, rng, train):
    """Inverted dropout: scales by 1/keep at train time, identity at eval."""
    if not 0.0 <= rate < 1.0:
        raise ContractError(f"dropout rate must be in [0,1), got {rate}")
    if not train or rate == 0.0:
        return a
    keep = 1.0 - rate
    mask = (rng.random(a.values.shape) < keep).astype(a.values.dtype) / np.asarray(keep, dtype=a.values.dtype)
    vals = a.values * mask

    def back(g):
        if a.requires_grad:
            a.accumulate_grad(g * mask)

    return _result(vals, (a,), back)


def concat(tensors, axis=0):
    tensors = list(tensors)
    if not tensors:
        raise ShapeError("concat of empty list")
    vals = np.concatenate([t.values for t in tensors], axis=axis)
    sizes = [t.values.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def back(g):
        for t, s, e in zip(tensors, offsets[:-1], offsets[1:]):
            if t.requires_grad:
                idx = [slice(None)] * g.ndim
                idx[axis] = slice(s, e)
                t.accumulate_grad(g[tuple(idx)])

    return _result(vals, tuple(tensors), back)


def mean(a, axis=None):
    """Mean with float64 accumulation."""
    vals = a.values.mean(axis=axis, dtype=np.float64).astype(a.values.dtype)
    n = a.values.size if axis is None else a.values.shape[axis]

    def back(g):
        if a.requires_grad:
            if axis is None:
                a.accumulate_grad(np.full_like(a.values, g / n))
            else:
                a.accumulate_grad(np.repeat(np.expand_dims(g, axis) / n, a.values.shape[axis], axis=axis))

    return _result(vals, (a,), back)


def sum_(a, axis=None):
    vals = a.values.sum(axis=axis, dtype=np.float64).astype(a.values.dtype)

    def back(g):
        if a.requires_grad:
            if axis is None:
                a.accumulate_grad(np.full_like(a.values, g))
            else:
                a.accumulate_grad(np.repeat(np.expand_dims(g, axis), a.values.shape[axis], axis=axis))

    return _result(vals, (a,), back)


def l2_norm(a):
    sq = (a.values.astype(np.float64) ** 2).sum()
    nrm = np.sqrt(sq).astype(a.values.dtype)

    def back(g):
        if a.requires_grad:
            denom = max(float(nrm), 1e-30)
            a.accumulate_grad(g * (a.values / np.asarray(denom, dtype=a.values.dtype)))

    return _result(nrm, (a,), back)


def cosine_similarity(a, b, eps=1e-8):
    """a.b / (|a||b|) for 1D vectors, with a near-zero-norm guard."""
    av = a.values.astype(np.float64)
    bv = b.values.astype(np.float64)
    if av.ndim != 1 or bv.ndim != 1 or av.shape != bv.shape:
        raise ShapeError(f"cosine_similarity needs equal 1D vectors, got {av.shape}, {bv.shape}")
    na = np.sqrt((av * av).sum())
    nb = np.sqrt((bv * bv).sum())
    if na <= eps or nb <= eps:
        raise NumericGuardError(f"cosine_similarity norm below guard: |a|={na:.3g} |b|={nb:.3g}")
    dot = (av * bv).sum()
    c = dot / (na * nb)
    vals = np.asarray(c, dtype=a.values.dtype)

    def back(g):
        g64 = float(g)
        if a.requires_grad:
            ga = g64 * (bv / (na * nb) - c * av / (na * na))
            a.accumulate_grad(ga.astype(a.values.dtype))
        if b.requires_grad:
            gb = g64 * (av / (na * nb) - c * bv / (nb * nb))
            b.accumulate_grad(gb.astype(b.values.dtype))

    return _result(vals, (a, b), back)


def cross_entropy(logits, target):
    """-log softmax(logits)[target], stabilized by max subtraction."""
    x = logits.values
    if x.ndim != 1:
        raise ShapeError(f"cross_entropy expects 1D logits, got shape {x.shape}")
    target = int(target)
    if not 0 <= target < x.shape[0]:
        raise IndexError(f"cross_entropy target {target} out of range for {x.shape[0]} logits")
    x64 = x.astype(np.float64)
    m = x64.max()
    z = x64 - m
    logsum = np.log(np.exp(z).sum())
    loss = logsum - z[target]
    vals = np.asarray(loss, dtype=x.dtype)
    probs = np.exp(z - logsum)

    def back(g):
        if logits.requires_grad:
            gl = probs.copy()
            gl[target] -= 1.0
            logits.accumulate_grad((float(g) * gl).astype(x.dtype))

    return _result(vals, (logits,), back)


def take_rows(a, indices):
    """Gather rows along axis 0; backward scatter-adds."""
    idx = np.asarray(indices, dtype=np.intp)
    vals = a.values[idx]

    def back(g):
        if a.requires_grad:
            acc = np.zeros_like(a.values)
            np.add.at(acc, idx, g)
            a.accumulate_grad(acc)

    return _result(vals, (a,), back)


def reshape(a, shape):
    vals = a.values.reshape(shape)

    def back(g):
        if a.requires_grad:
            a.accumulate_grad(g.reshape(a.values.shape))

    return _result(vals, (a,), back)


def transpose(a, axes):
    vals = np.transpose(a.values, axes)
    inv = tuple(sorted(range(len(axes)), key=axes.__getitem__))

    def back(g):
        if a.requires_grad:
            a.accumulate_grad(np.transpose(g, inv))

    return _result(vals, (a,), back)


# ---------------------------------------------------------------------------
# parameters and optimizer
# ---------------------------------------------------------------------------

class ParamStore:
    """Named trainable tensors, each tagged with a parameter group."""

    def __init__(self):
        self._params = {}   # name -> Tensor
        self._groups = {}   # name -> group

    def add(self, name, tensor, group):
        if name in self._params:
            raise ContractError(f"duplicate parameter name {name!r}")
        tensor.requires_grad = True
        self._params[name] = tensor
        self._groups[name] = group
        return tensor

    def __getitem__(self, name):
        return self._params[name]

    def __contains__(self, name):
        return name in self._params

    def group_of(self, name):
        return self._groups[name]

    def names(self):
        return list(self._params.keys())

    def items(self):
        return self._params.items()

    def groups(self):
        return sorted(set(self._groups.values()))

    def zero_grads(self):
        for t in self._params.values():
            t.grad = None

    def copy_values(self):
        return {k: v.values.copy() for k, v in self._params.items()}


class Adam:
    """Adam with bias correction; per-group step counters and learning rates.

    Groups with lr == 0 are skipped entirely: no parameter writes, no moment
    updates, no step-count increment.
    """

    def __init__(self, store, beta1=0.9, beta2=0.999, eps=1e-8):
        self.store = store
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.m = {k: np.zeros_like(t.values) for k, t in store.items()}
        self.v = {k: np.zeros_like(t.values) for k, t in store.items()}
        self.steps = {g: 0 for g in store.groups()}

    def step(self, lr_by_group):
        live = {g for g, lr in lr_by_group.items() if lr > 0.0}
        for g in live:
            self.steps[g] += 1
        for name, t in self.store.items():
            group = self.store.group_of(name)
            if group not in live:
                continue
            if t.grad is None:
                raise ContractError(f"adam_step: missing grad for {name!r}")
            lr = lr_by_group[group]
            tstep = self.steps[group]
            m = self.m[name]
            v = self.v[name]
            g32 = t.grad.astype(t.values.dtype, copy=False)
            m *= self.beta1
            m += (1.0 - self.beta1) * g32
            v *= self.beta2
            v += (1.0 - self.beta2) * (g32 * g32)
            mhat = m / (1.0 - self.beta1 ** tstep)
            vhat = v / (1.0 - self.beta2 ** tstep)
            t.values -= (lr * mhat / (np.sqrt(vhat) + self.eps)).astype(t.values.dtype)


def adam_step(optimizer, lr_by_group):
    optimizer.step(lr_by_group)
