"""Float64 tensors with reverse-mode differentiation.

Only the operations the model needs are provided. Shapes are never
coerced implicitly: elementwise ops require equal shapes, and the single
broadcast allowed is a feature vector over the token axis (``add_vec`` /
``mul_vec``). Every op result is checked for NaN/Inf.
"""
from __future__ import annotations

import contextlib
import math

import numpy as np

from . import kernels


class ShapeError(ValueError):
    pass


class NonFiniteError(FloatingPointError):
    pass


_GRAD_ENABLED = True


@contextlib.contextmanager
def no_grad():
    """Run the enclosed forward pass without recording a tape."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


@contextlib.contextmanager
def enable_grad():
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = True
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def grad_enabled() -> bool:
    return _GRAD_ENABLED


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "_forward", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.array(data, dtype=np.float64)
        if not np.isfinite(arr).all():
            raise NonFiniteError(f"tensor {name or ''} holds non-finite values")
        self.data = arr
        self.requires_grad = requires_grad
        self.grad = None
        self._parents = ()
        self._backward = None
        self._forward = None
        self.name = name

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:
        tag = f" {self.name}" if self.name else ""
        return f"Tensor{tag}(shape={self.shape}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, other)
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def backward(self) -> None:
        """Accumulate d(self)/d(leaf) into ``leaf.grad`` for every leaf."""
        for leaf, g in _run_backward(self).items():
            leaf.grad = g if leaf.grad is None else leaf.grad + g


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _result(data: np.ndarray, parents: tuple, backward, op: str, forward=None) -> Tensor:
    """Wrap an op output. ``forward`` recomputes ``data`` from the parents'
    arrays and is kept on the tape so :func:`grad_check` can replay it."""
    # a NaN or Inf anywhere makes the sum non-finite
    if not math.isfinite(data.sum()):
        raise NonFiniteError(f"{op} produced non-finite values")
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.name = None
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward
        out._forward = forward
    else:
        out.requires_grad = False
        out._parents = ()
        out._backward = None
        out._forward = None
    return out


def _mismatch(op: str, a, b) -> ShapeError:
    return ShapeError(f"{op}: incompatible shapes {tuple(a)} and {tuple(b)}")


# ---------------------------------------------------------------------------
# backward engine


def _topo_order(root: Tensor) -> list:
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def _run_backward(root: Tensor, seed: np.ndarray | None = None) -> dict:
    if not root.requires_grad:
        return {}
    if seed is None:
        if root.data.size != 1:
            raise ShapeError(f"backward needs a scalar root, got shape {root.shape}")
        seed = np.ones_like(root.data)
    grads = {id(root): seed}
    leaves = {}
    for node in reversed(_topo_order(root)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            leaves[node] = g
            continue
        for p, pg in zip(node._parents, node._backward(g)):
            if pg is None or not p.requires_grad:
                continue
            key = id(p)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg
    return leaves


def gradients(loss: Tensor, params: dict) -> dict:
    """Gradient record for named parameters.

    Parameters without a path to ``loss`` are absent from the result, which
    means a zero gradient.
    """
    leaves = _run_backward(loss)
    return {name: leaves[p] for name, p in params.items() if p in leaves}


# ---------------------------------------------------------------------------
# linear algebra


def matmul(x: Tensor, w: Tensor) -> Tensor:
    """``x[..., k] @ w[k, m]``; ``w`` must be 2-D."""
    if w.ndim != 2 or x.shape[-1] != w.shape[0]:
        raise _mismatch("matmul", x.shape, w.shape)
    xd, wd = x.data, w.data
    out = xd @ wd

    def backward(g):
        gx = g @ wd.T if x.requires_grad else None
        gw = None
        if w.requires_grad:
            gw = xd.reshape(-1, xd.shape[-1]).T @ g.reshape(-1, g.shape[-1])
        return gx, gw

    return _result(out, (x, w), backward, "matmul", np.matmul)


def bmm(a: Tensor, b: Tensor) -> Tensor:
    """Batched ``a[B, n, k] @ b[B, k, m]``."""
    if a.ndim != 3 or b.ndim != 3 or a.shape[0] != b.shape[0] or a.shape[2] != b.shape[1]:
        raise _mismatch("bmm", a.shape, b.shape)
    ad, bd = a.data, b.data

    def backward(g):
        ga = g @ bd.transpose(0, 2, 1) if a.requires_grad else None
        gb = ad.transpose(0, 2, 1) @ g if b.requires_grad else None
        return ga, gb

    return _result(ad @ bd, (a, b), backward, "bmm", np.matmul)


def transpose(x: Tensor) -> Tensor:
    """Swap the last two axes."""
    if x.ndim < 2:
        raise ShapeError(f"transpose: need at least 2 axes, got {x.shape}")
    def forward(a):
        return np.ascontiguousarray(np.swapaxes(a, -1, -2))

    return _result(forward(x.data), (x,), lambda g: (np.swapaxes(g, -1, -2),), "transpose", forward)


# ---------------------------------------------------------------------------
# elementwise


def add(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise _mismatch("add", a.shape, b.shape)
    return _result(a.data + b.data, (a, b), lambda g: (g, g), "add", np.add)


def sub(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise _mismatch("sub", a.shape, b.shape)
    return _result(a.data - b.data, (a, b), lambda g: (g, -g), "sub", np.subtract)


def mul(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise _mismatch("mul", a.shape, b.shape)
    ad, bd = a.data, b.data
    return _result(ad * bd, (a, b), lambda g: (g * bd, g * ad), "mul", np.multiply)


def scale(x: Tensor, c: float) -> Tensor:
    c = float(c)
    return _result(x.data * c, (x,), lambda g: (g * c,), "scale", lambda a: a * c)


def _vec_view(op: str, x: Tensor, v: Tensor):
    """Broadcast view maker for ``v`` over the token axis of ``x``, plus a reducer."""
    if v.shape == x.shape[-1:]:
        return (lambda a: a), lambda g: g.reshape(-1, g.shape[-1]).sum(axis=0)
    if x.ndim == 3 and v.shape == (x.shape[0], x.shape[2]):
        return (lambda a: a[:, None, :]), lambda g: g.sum(axis=1)
    raise _mismatch(op, x.shape, v.shape)


def add_vec(x: Tensor, v: Tensor) -> Tensor:
    """Add a feature vector to every token: ``v`` is ``[d]`` or per-sample ``[B, d]``."""
    view, reduce = _vec_view("add_vec", x, v)
    return _result(x.data + view(v.data), (x, v), lambda g: (g, reduce(g)), "add_vec",
                   lambda a, b: a + view(b))


def mul_vec(x: Tensor, v: Tensor) -> Tensor:
    """Scale every token channel-wise by ``v`` (``[d]`` or ``[B, d]``)."""
    view, reduce = _vec_view("mul_vec", x, v)
    xd, vb = x.data, view(v.data)
    return _result(xd * vb, (x, v), lambda g: (g * vb, reduce(g * xd)), "mul_vec",
                   lambda a, b: a * view(b))


def gelu(x: Tensor) -> Tensor:
    xd = x.data
    return _result(kernels.gelu_fwd(xd), (x,), lambda g: (kernels.gelu_bwd(g, xd),), "gelu", kernels.gelu_fwd)


def silu(x: Tensor) -> Tensor:
    xd = x.data
    sig = 1.0 / (1.0 + np.exp(-xd))

    def backward(g):
        return (g * sig * (1.0 + xd * (1.0 - sig)),)

    return _result(xd * sig, (x,), backward, "silu", lambda a: a / (1.0 + np.exp(-a)))


# ---------------------------------------------------------------------------
# reductions and normalization


def sum_all(x: Tensor) -> Tensor:
    shape = x.shape
    return _result(np.array(x.data.sum()), (x,), lambda g: (np.full(shape, float(g)),), "sum",
                   lambda a: np.array(a.sum()))


def mean(x: Tensor, axis: int) -> Tensor:
    n = x.shape[axis]
    if n == 0:
        raise ShapeError(f"mean: empty axis {axis} in shape {x.shape}")

    def backward(g):
        return (np.repeat(np.expand_dims(g, axis), n, axis=axis) / n,)

    return _result(x.data.mean(axis=axis), (x,), backward, "mean", lambda a: a.mean(axis=axis))


def var(x: Tensor, axis: int) -> Tensor:
    """Population variance over ``axis``."""
    n = x.shape[axis]
    xc = x.data - x.data.mean(axis=axis, keepdims=True)

    def forward(a):
        c = a - a.mean(axis=axis, keepdims=True)
        return (c * c).mean(axis=axis)

    def backward(g):
        return (np.expand_dims(g, axis) * xc * (2.0 / n),)

    return _result((xc * xc).mean(axis=axis), (x,), backward, "var", forward)


def mse(pred: Tensor, target: np.ndarray) -> Tensor:
    """Mean squared error against a constant target."""
    if pred.shape != np.shape(target):
        raise _mismatch("mse", pred.shape, np.shape(target))
    diff = pred.data - target
    n = diff.size
    def forward(a):
        d = a - target
        return np.array((d * d).sum() / n)

    return _result(np.array((diff * diff).sum() / n), (pred,),
                   lambda g: (diff * (2.0 * float(g) / n),), "mse", forward)


def softmax(x: Tensor, mask: np.ndarray | None = None) -> Tensor:
    """Softmax over the last axis; ``mask`` marks valid (True) positions."""
    shape = x.shape
    if mask is not None:
        mask = np.broadcast_to(mask, shape)
        if not mask.any(axis=-1).all():
            raise ShapeError("softmax: a row has no valid positions")

    def forward(a):
        if mask is not None:
            a = np.where(mask, a, -np.inf)
        return kernels.softmax_fwd(np.ascontiguousarray(a.reshape(-1, shape[-1])))

    y = forward(x.data)

    def backward(g):
        return (kernels.softmax_bwd(np.ascontiguousarray(g.reshape(-1, shape[-1])), y).reshape(shape),)

    return _result(y.reshape(shape), (x,), backward, "softmax", lambda a: forward(a).reshape(shape))


def layer_norm(x: Tensor, eps: float = 1e-6) -> Tensor:
    """Normalize the last axis to zero mean and unit variance (no affine)."""
    shape = x.shape
    y, rstd = kernels.layer_norm_fwd(np.ascontiguousarray(x.data.reshape(-1, shape[-1])), eps)

    def backward(g):
        return (kernels.layer_norm_bwd(np.ascontiguousarray(g.reshape(-1, shape[-1])), y, rstd).reshape(shape),)

    def forward(a):
        return kernels.layer_norm_fwd(np.ascontiguousarray(a.reshape(-1, shape[-1])), eps)[0].reshape(shape)

    return _result(y.reshape(shape), (x,), backward, "layer_norm", forward)


# ---------------------------------------------------------------------------
# shape and indexing


def reshape(x: Tensor, shape: tuple) -> Tensor:
    old = x.shape
    try:
        out = x.data.reshape(shape)
    except ValueError:
        raise _mismatch("reshape", old, shape) from None
    return _result(out, (x,), lambda g: (g.reshape(old),), "reshape", lambda a: a.reshape(shape))


def concat(xs: list, axis: int = 0) -> Tensor:
    """Concatenate along ``axis`` (the token axis for token tensors)."""
    if not xs:
        raise ShapeError("concat: nothing to concatenate")
    ref = list(xs[0].shape)
    ax = axis % len(ref)
    for t in xs[1:]:
        s = list(t.shape)
        if len(s) != len(ref) or s[:ax] + s[ax + 1:] != ref[:ax] + ref[ax + 1:]:
            raise _mismatch("concat", xs[0].shape, t.shape)
    sizes = [t.shape[ax] for t in xs]
    bounds = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.split(g, bounds, axis=ax))

    return _result(np.concatenate([t.data for t in xs], axis=ax), tuple(xs), backward, "concat",
                   lambda *arrs: np.concatenate(arrs, axis=ax))


def slice_axis(x: Tensor, start: int, stop: int, axis: int = 0) -> Tensor:
    shape = x.shape
    ax = axis % len(shape)
    if not 0 <= start <= stop <= shape[ax]:
        raise ShapeError(f"slice: [{start}:{stop}] out of range for axis {ax} of {shape}")
    idx = (slice(None),) * ax + (slice(start, stop),)

    def backward(g):
        full = np.zeros(shape)
        full[idx] = g
        return (full,)

    return _result(x.data[idx].copy(), (x,), backward, "slice", lambda a: a[idx].copy())


def gather_rows(x: Tensor, idx) -> Tensor:
    """Rows ``x[idx]`` of a 2-D tensor."""
    idx = np.asarray(idx, dtype=np.int64)
    if x.ndim != 2:
        raise ShapeError(f"gather: need a 2-D tensor, got {x.shape}")
    n = x.shape[0]
    if idx.size and (idx.min() < 0 or idx.max() >= n):
        raise ShapeError(f"gather: index out of range for {n} rows")

    def backward(g):
        return (kernels.scatter_add_rows(np.ascontiguousarray(g), idx, n),)

    return _result(x.data[idx], (x,), backward, "gather", lambda a: a[idx])


def scatter_rows(y: Tensor, idx, n: int) -> Tensor:
    """Zero ``[n, d]`` tensor with ``y[j]`` added into row ``idx[j]``."""
    idx = np.asarray(idx, dtype=np.int64)
    if y.ndim != 2 or idx.shape != (y.shape[0],):
        raise _mismatch("scatter", y.shape, idx.shape)
    if idx.size and (idx.min() < 0 or idx.max() >= n):
        raise ShapeError(f"scatter: index out of range for {n} rows")
    def forward(a):
        return kernels.scatter_add_rows(np.ascontiguousarray(a), idx, n)

    return _result(forward(y.data), (y,), lambda g: (g[idx],), "scatter", forward)


def split_heads(x: Tensor, heads: int) -> Tensor:
    """``[B, N, d]`` -> ``[B*heads, N, d/heads]``."""
    B, N, d = x.shape
    if d % heads:
        raise ShapeError(f"split_heads: width {d} not divisible by {heads} heads")
    dh = d // heads

    def forward(a):
        return np.ascontiguousarray(a.reshape(B, N, heads, dh).transpose(0, 2, 1, 3)).reshape(B * heads, N, dh)

    def backward(g):
        return (g.reshape(B, heads, N, dh).transpose(0, 2, 1, 3).reshape(B, N, d),)

    return _result(forward(x.data), (x,), backward, "split_heads", forward)


def merge_heads(x: Tensor, heads: int) -> Tensor:
    """Inverse of :func:`split_heads`."""
    Bh, N, dh = x.shape
    B = Bh // heads

    def forward(a):
        return np.ascontiguousarray(a.reshape(B, heads, N, dh).transpose(0, 2, 1, 3)).reshape(B, N, heads * dh)

    def backward(g):
        return (np.ascontiguousarray(g.reshape(B, N, heads, dh).transpose(0, 2, 1, 3)).reshape(Bh, N, dh),)

    return _result(forward(x.data), (x,), backward, "merge_heads", forward)


def rope(x: Tensor, cos: np.ndarray, sin: np.ndarray) -> Tensor:
    """Rotate feature pairs ``(2j, 2j+1)`` of each token by fixed angles.

    ``cos``/``sin`` are ``[N, d/2]`` tables for the N tokens of ``x[..., N, d]``.
    """
    if x.shape[-1] % 2 or cos.shape != (x.shape[-2], x.shape[-1] // 2):
        raise _mismatch("rope", x.shape, cos.shape)
    out = kernels.rope_rotate(x.data, cos, sin)
    neg = -sin
    return _result(out, (x,), lambda g: (kernels.rope_rotate(g, cos, neg),), "rope",
                   lambda a: kernels.rope_rotate(a, cos, sin))


def sinusoidal(values: np.ndarray, dim: int, max_period: float = 10000.0) -> Tensor:
    """Constant ``[len(values), dim]`` table of cos/sin features."""
    half = dim // 2
    freqs = np.exp(-math.log(max_period) * np.arange(half) / half)
    args = np.asarray(values, dtype=np.float64)[:, None] * freqs[None, :]
    table = np.concatenate([np.cos(args), np.sin(args)], axis=1)
    if dim % 2:
        table = np.concatenate([table, np.zeros((len(table), 1))], axis=1)
    return Tensor(table)


# ---------------------------------------------------------------------------
# verification harness


def _replay_plan(order: list, leaf: Tensor) -> list:
    """Recorded nodes whose value depends on ``leaf``, in evaluation order."""
    dirty = {id(leaf)}
    plan = []
    for node in order:
        if node._backward is None or not any(id(p) in dirty for p in node._parents):
            continue
        if node._forward is None:
            raise ValueError("grad_check: a recorded op cannot be replayed")
        dirty.add(id(node))
        plan.append(node)
    return plan


def _replay(plan: list, root: Tensor, leaf: Tensor, value: np.ndarray) -> float:
    vals = {id(leaf): value}
    for node in plan:
        vals[id(node)] = node._forward(*[vals.get(id(p), p.data) for p in node._parents])
    return float(vals.get(id(root), root.data))


def grad_check(f, params: list, h: float = 1e-5, analytic=None, replay: bool = False) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``f`` is a zero-argument callable returning a scalar Tensor built from
    ``params``. ``analytic`` optionally supplies the gradients to test
    (a callable returning one array per parameter); by default they come
    from the tape. Error per entry is ``|a - n| / max(1, |n|)``.

    With ``replay`` the perturbed losses come from re-running the recorded
    numpy computations downstream of each perturbed parameter instead of
    calling ``f`` again. Discrete choices made outside the tape (token
    routing) stay fixed at ``params``. The replay must reproduce ``f`` at
    ``params`` bitwise or the check is refused.
    """
    if h <= 0:
        raise ValueError("grad_check: step must be positive")
    with enable_grad():
        loss = f()
    if not np.isfinite(loss.data).all():
        raise NonFiniteError("grad_check: f is not finite at theta")
    if analytic is None:
        leaves = _run_backward(loss)
        grads = [leaves.get(p, np.zeros(p.shape)) for p in params]
    else:
        grads = [np.asarray(g, dtype=np.float64) for g in analytic()]
    order = _topo_order(loss) if replay else None
    worst = 0.0
    with no_grad():
        for p, g in zip(params, grads):
            gflat = np.asarray(g).reshape(-1)
            if replay:
                plan = _replay_plan(order, p)
                base = p.data.copy()
                if _replay(plan, loss, p, base) != float(loss.data):
                    raise ValueError("grad_check: replay does not reproduce f")
                flat = base.reshape(-1)

                def evaluate():
                    return _replay(plan, loss, p, base)
            else:
                flat = p.data.reshape(-1)

                def evaluate():
                    return float(f().data)
            for i in range(flat.size):
                v = flat[i]
                flat[i] = v + h
                fp = evaluate()
                flat[i] = v - h
                fm = evaluate()
                flat[i] = v
                if not (math.isfinite(fp) and math.isfinite(fm)):
                    raise NonFiniteError("grad_check: f is not finite at a perturbed point")
                num = (fp - fm) / (2.0 * h)
                worst = max(worst, abs(gflat[i] - num) / max(1.0, abs(num)))
    return worst
