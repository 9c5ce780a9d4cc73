"""Dense-tensor reverse-mode autodiff over a fixed primitive set.

Tensors wrap row-major numpy arrays (float64 by default, float32 selectable).
Operations record onto an explicit :class:`Tape` (a Wengert list); gradients
are obtained by a reverse scan over the recorded ops.  Every primitive's
vector-Jacobian product is itself expressed with tensor ops, so a backward
pass run with ``create_graph=True`` extends the tape and can be
differentiated again (used for Jacobian-norm gradients).
"""

from __future__ import annotations

import numpy as np

__all__ = [
    "Tensor",
    "Tape",
    "AutodiffError",
    "NonFiniteError",
    "TapeConsumedError",
    "no_record",
    "set_default_dtype",
    "get_default_dtype",
    "tensor",
    "zeros",
    "ones",
    "forward",
    "grad_check",
]


class AutodiffError(Exception):
    pass


class NonFiniteError(AutodiffError):
    """A forward op produced NaN or Inf."""


class TapeConsumedError(AutodiffError):
    """Backward requested on a tape whose records were released."""


_DEFAULT_DTYPE = np.float64
_FINITE_CHECKS = True


def set_default_dtype(dtype):
    global _DEFAULT_DTYPE
    dtype = np.dtype(dtype)
    if dtype not in (np.float32, np.float64):
        raise ValueError(f"unsupported dtype {dtype}")
    _DEFAULT_DTYPE = dtype.type


def get_default_dtype():
    return _DEFAULT_DTYPE


class Tensor:
    """Dense multi-dimensional array with value semantics.

    ``requires_grad`` marks a leaf parameter; non-leaf tensors are tracked
    automatically while a tape is recording.
    """

    __slots__ = ("data", "requires_grad", "node", "_tape")

    def __init__(self, data, requires_grad=False, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data, dtype=dtype if dtype is not None else None)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(_DEFAULT_DTYPE)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.node = None
        self._tape = None

    # -- basic introspection -------------------------------------------------
    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def item(self):
        return float(self.data)

    def numpy(self):
        return self.data

    def copy(self):
        t = Tensor(self.data.copy())
        t.requires_grad = self.requires_grad
        return t

    def detach(self):
        return Tensor(self.data)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.data.shape}{flag})"

    # -- operator sugar ------------------------------------------------------
    def __add__(self, other):
        return add(self, _wrap(other, self.dtype))

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, _wrap(other, self.dtype))

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def __sub__(self, other):
        return add(self, neg(_wrap(other, self.dtype)))

    def __rsub__(self, other):
        return add(_wrap(other, self.dtype), neg(self))

    def __truediv__(self, other):
        return div(self, _wrap(other, self.dtype))

    def __rtruediv__(self, other):
        return div(_wrap(other, self.dtype), self)

    def __pow__(self, p):
        return pow_const(self, p)

    def __matmul__(self, other):
        return matmul(self, _wrap(other, self.dtype))

    # -- method conveniences -------------------------------------------------
    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def relu(self):
        return relu(self)

    def abs(self):
        return abs_(self)


def _wrap(x, dtype=None):
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype if dtype is not None else _DEFAULT_DTYPE))


def tensor(data, requires_grad=False, dtype=None):
    return Tensor(data, requires_grad=requires_grad, dtype=dtype)


def zeros(shape, requires_grad=False, dtype=None):
    return Tensor(np.zeros(shape, dtype=dtype or _DEFAULT_DTYPE), requires_grad=requires_grad)


def ones(shape, requires_grad=False, dtype=None):
    return Tensor(np.ones(shape, dtype=dtype or _DEFAULT_DTYPE), requires_grad=requires_grad)


# ---------------------------------------------------------------------------
# Tape
# ---------------------------------------------------------------------------

_TAPE_STACK: list = []


class _Record:
    __slots__ = ("out", "inputs", "vjp", "op")

    def __init__(self, out, inputs, vjp, op):
        self.out = out
        self.inputs = inputs
        self.vjp = vjp
        self.op = op


class _NoRecord:
    def __enter__(self):
        _TAPE_STACK.append(None)
        return self

    def __exit__(self, *exc):
        _TAPE_STACK.pop()
        return False


def no_record():
    """Context manager suppressing tape recording."""
    return _NoRecord()


def _active_tape():
    return _TAPE_STACK[-1] if _TAPE_STACK else None


class _AmbientTape:
    """Yields (tape, nested) — the ambient tape when one is recording, else a
    fresh private tape.  `nested` tells the caller whether inner backward
    passes must keep the graph alive for an enclosing differentiation."""

    def __enter__(self):
        t = _active_tape()
        if t is not None:
            self._own = None
            return t, True
        self._own = Tape()
        _TAPE_STACK.append(self._own)
        return self._own, False

    def __exit__(self, *exc):
        if self._own is not None:
            _TAPE_STACK.pop()
        return False


def ambient_tape():
    return _AmbientTape()


class Tape:
    """Ordered record of primitive ops; supports repeated reverse passes.

    Ops append in execution order, so every record's inputs precede it and a
    single reverse scan visits each node exactly once.
    """

    def __init__(self):
        self._records: list[_Record] = []
        self._released = False
        self._next_leaf_id = -1

    def __enter__(self):
        _TAPE_STACK.append(self)
        return self

    def __exit__(self, *exc):
        _TAPE_STACK.pop()
        return False

    def __len__(self):
        return len(self._records)

    def _record(self, out, inputs, vjp, op):
        out.node = len(self._records)
        out._tape = self
        self._records.append(_Record(out, inputs, vjp, op))

    def _leaf_id(self, t):
        # leaves get negative ids; recorded outputs use their record index
        if t._tape is self and t.node is not None:
            return t.node
        t.node = self._next_leaf_id
        t._tape = self
        self._next_leaf_id -= 1
        return t.node

    def release(self):
        """Drop all records (frees saved activations); backward afterwards errors."""
        self._records.clear()
        self._released = True

    def gradients(self, output, wrt, seed=None, create_graph=False):
        """Gradients of `output` w.r.t. the tensors in `wrt`.

        `output` must be scalar unless a `seed` cotangent of matching shape is
        given.  Tensors unreachable from `output` get zero gradients.
        """
        cot = self._backward_map(output, seed, create_graph)
        out = []
        for p in wrt:
            g = cot.get(id(p))
            if g is None:
                g = Tensor(np.zeros_like(p.data))
            out.append(g)
        return out

    def backward(self, output, seed=None):
        """Full gradient map {node id -> Tensor} for every tracked leaf."""
        cot = self._backward_map(output, seed, create_graph=False)
        result = {}
        for rec in self._records:
            for inp in rec.inputs:
                if inp.requires_grad and id(inp) in cot:
                    result[self._leaf_id(inp)] = cot[id(inp)]
                elif inp.requires_grad:
                    result[self._leaf_id(inp)] = Tensor(np.zeros_like(inp.data))
        return result

    def _backward_map(self, output, seed, create_graph):
        if self._released:
            raise TapeConsumedError("tape was released; re-record before backward")
        if output._tape is not self or output.node is None or output.node < 0:
            raise AutodiffError("output was not recorded on this tape")
        if seed is None:
            if output.size != 1:
                raise AutodiffError("non-scalar output needs an explicit seed cotangent")
            seed = Tensor(np.ones_like(output.data))
        else:
            seed = _wrap(seed, output.dtype)
            if seed.shape != output.shape:
                raise AutodiffError("seed shape must match output shape")

        records = self._records[: output.node + 1]
        cot: dict[int, Tensor] = {id(output): seed}
        ctx = self if create_graph else None
        _TAPE_STACK.append(ctx)
        try:
            for rec in reversed(records):
                g = cot.pop(id(rec.out), None)
                if g is None:
                    continue
                need = tuple(_tracked_at(self, x) for x in rec.inputs)
                grads = rec.vjp(g, need)
                for inp, gi, nd in zip(rec.inputs, grads, need):
                    if not nd or gi is None:
                        continue
                    prev = cot.get(id(inp))
                    cot[id(inp)] = gi if prev is None else add(prev, gi)
        finally:
            _TAPE_STACK.pop()
        return cot


def _tracked_at(tape, t):
    return t.requires_grad or (t._tape is tape and t.node is not None and t.node >= 0)


def _apply(op, data, inputs, vjp):
    if _FINITE_CHECKS and not np.all(np.isfinite(data)):
        raise NonFiniteError(f"op '{op}' produced non-finite values")
    out = Tensor(data)
    t = _active_tape()
    if t is not None and any(_tracked_at(t, x) for x in inputs):
        t._record(out, inputs, vjp, op)
    return out


# ---------------------------------------------------------------------------
# broadcast helper
# ---------------------------------------------------------------------------

def _sum_to_shape(g, shape):
    """Reduce a broadcast cotangent back to `shape` (adjoint of broadcasting)."""
    if g.shape == tuple(shape):
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = sum_(g, axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = sum_(g, axis=axes, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# primitive ops
# ---------------------------------------------------------------------------

def add(a, b):
    a, b = _wrap(a), _wrap(b)

    def vjp(g, need):
        ga = _sum_to_shape(g, a.shape) if need[0] else None
        gb = _sum_to_shape(g, b.shape) if need[1] else None
        return ga, gb

    return _apply("add", a.data + b.data, (a, b), vjp)


def mul(a, b):
    a, b = _wrap(a), _wrap(b)

    def vjp(g, need):
        ga = _sum_to_shape(mul(g, b), a.shape) if need[0] else None
        gb = _sum_to_shape(mul(g, a), b.shape) if need[1] else None
        return ga, gb

    return _apply("mul", a.data * b.data, (a, b), vjp)


def neg(a):
    a = _wrap(a)

    def vjp(g, need):
        return (neg(g),)

    return _apply("neg", -a.data, (a,), vjp)


def div(a, b):
    return mul(a, pow_const(b, -1.0))


def pow_const(a, p):
    a = _wrap(a)
    p = float(p)

    def vjp(g, need):
        return (mul(g, mul(Tensor(np.asarray(p, dtype=a.dtype)), pow_const(a, p - 1.0))),)

    return _apply("pow", a.data**p, (a,), vjp)


def sqrt(a):
    return pow_const(a, 0.5)


def exp(a):
    a = _wrap(a)
    out_data = np.exp(a.data)

    def vjp(g, need):
        return (mul(g, out),)

    out = _apply("exp", out_data, (a,), vjp)
    return out


def log(a):
    a = _wrap(a)

    def vjp(g, need):
        return (div(g, a),)

    return _apply("log", np.log(a.data), (a,), vjp)


def tanh(a):
    a = _wrap(a)
    out_data = np.tanh(a.data)

    def vjp(g, need):
        return (mul(g, add(Tensor(np.ones_like(out.data)), neg(mul(out, out)))),)

    out = _apply("tanh", out_data, (a,), vjp)
    return out


def abs_(a):
    a = _wrap(a)
    s = Tensor(np.sign(a.data))

    def vjp(g, need):
        return (mul(g, s),)

    return _apply("abs", np.abs(a.data), (a,), vjp)


def relu(a):
    a = _wrap(a)
    mask = Tensor((a.data > 0).astype(a.data.dtype))

    def vjp(g, need):
        return (mul(g, mask),)

    return _apply("relu", np.maximum(a.data, 0.0), (a,), vjp)


def maximum(a, b):
    """Elementwise max; on ties the subgradient routes to the first argument."""
    a, b = _wrap(a), _wrap(b)
    take_a = (a.data >= b.data).astype(a.data.dtype)
    ma, mb = Tensor(take_a), Tensor(1.0 - take_a)

    def vjp(g, need):
        ga = _sum_to_shape(mul(g, ma), a.shape) if need[0] else None
        gb = _sum_to_shape(mul(g, mb), b.shape) if need[1] else None
        return ga, gb

    return _apply("maximum", np.maximum(a.data, b.data), (a, b), vjp)


def minimum(a, b):
    a, b = _wrap(a), _wrap(b)
    take_a = (a.data <= b.data).astype(a.data.dtype)
    ma, mb = Tensor(take_a), Tensor(1.0 - take_a)

    def vjp(g, need):
        ga = _sum_to_shape(mul(g, ma), a.shape) if need[0] else None
        gb = _sum_to_shape(mul(g, mb), b.shape) if need[1] else None
        return ga, gb

    return _apply("minimum", np.minimum(a.data, b.data), (a, b), vjp)


def sign(a):
    """Sign as a constant (zero gradient everywhere, as used by FGSM)."""
    a = _wrap(a)
    return Tensor(np.sign(a.data))


def greater(a, b):
    a, b = _wrap(a), _wrap(b)
    return Tensor((a.data > b.data).astype(a.data.dtype))


def where(mask, a, b):
    """mask is a constant 0/1 tensor; returns mask*a + (1-mask)*b."""
    mask = _wrap(mask)
    m = Tensor(mask.data)
    return add(mul(m, a), mul(Tensor(1.0 - m.data), b))


def clip(a, lo=None, hi=None):
    out = a
    if lo is not None:
        out = maximum(out, _wrap(lo, a.dtype))
    if hi is not None:
        out = minimum(out, _wrap(hi, a.dtype))
    return out


def sum_(a, axis=None, keepdims=False):
    a = _wrap(a)
    if axis is None:
        axes = tuple(range(a.ndim))
    elif isinstance(axis, int):
        axes = (axis % a.ndim,)
    else:
        axes = tuple(ax % a.ndim for ax in axis)
    in_shape = a.shape

    def vjp(g, need):
        if keepdims or a.ndim == 0:
            gk = g
        else:
            shape = list(in_shape)
            for ax in axes:
                shape[ax] = 1
            gk = reshape(g, tuple(shape))
        return (broadcast_to(gk, in_shape),)

    return _apply("sum", np.sum(a.data, axis=axes, keepdims=keepdims), (a,), vjp)


def mean(a, axis=None, keepdims=False):
    a = _wrap(a)
    if axis is None:
        n = a.size
    else:
        axes = (axis,) if isinstance(axis, int) else axis
        n = 1
        for ax in axes:
            n *= a.shape[ax % a.ndim]
    return mul(sum_(a, axis=axis, keepdims=keepdims), 1.0 / n)


def broadcast_to(a, shape):
    a = _wrap(a)
    shape = tuple(shape)

    def vjp(g, need):
        return (_sum_to_shape(g, a.shape),)

    return _apply("broadcast", np.broadcast_to(a.data, shape).copy(), (a,), vjp)


def reshape(a, shape):
    a = _wrap(a)
    shape = tuple(shape)
    old = a.shape

    def vjp(g, need):
        return (reshape(g, old),)

    return _apply("reshape", a.data.reshape(shape), (a,), vjp)


def transpose(a, axes):
    a = _wrap(a)
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))

    def vjp(g, need):
        return (transpose(g, inv),)

    return _apply("transpose", np.ascontiguousarray(a.data.transpose(axes)), (a,), vjp)


def concat(parts, axis=0):
    parts = [_wrap(p) for p in parts]
    axis = axis % parts[0].ndim
    sizes = [p.shape[axis] for p in parts]
    offsets = np.cumsum([0] + sizes)

    def vjp(g, need):
        outs = []
        for i, p in enumerate(parts):
            if need[i]:
                outs.append(slice_axis(g, axis, int(offsets[i]), int(offsets[i + 1])))
            else:
                outs.append(None)
        return tuple(outs)

    return _apply("concat", np.concatenate([p.data for p in parts], axis=axis), tuple(parts), vjp)


def slice_axis(a, axis, start, stop):
    a = _wrap(a)
    axis = axis % a.ndim
    idx = tuple(slice(None) if i != axis else slice(start, stop) for i in range(a.ndim))
    n = a.shape[axis]

    def vjp(g, need):
        pads = []
        if start > 0:
            shape = list(a.shape)
            shape[axis] = start
            pads.append(Tensor(np.zeros(shape, dtype=a.dtype)))
        pads.append(g)
        if stop < n:
            shape = list(a.shape)
            shape[axis] = n - stop
            pads.append(Tensor(np.zeros(shape, dtype=a.dtype)))
        return (concat(pads, axis=axis) if len(pads) > 1 else g,)

    return _apply("slice", np.ascontiguousarray(a.data[idx]), (a,), vjp)


def take(a, indices, axis=0):
    """Gather along `axis` with constant integer indices."""
    a = _wrap(a)
    axis = axis % a.ndim
    idx = np.asarray(indices, dtype=np.intp)
    size = a.shape[axis]

    def vjp(g, need):
        return (put(g, idx, axis, size),)

    return _apply("take", np.take(a.data, idx, axis=axis), (a,), vjp)


def put(g, indices, axis, size):
    """Scatter-add rows of `g` into a zero tensor of extent `size` on `axis` (adjoint of take)."""
    g = _wrap(g)
    axis = axis % g.ndim
    idx = np.asarray(indices, dtype=np.intp)
    out_shape = list(g.shape)
    out_shape[axis] = size
    data = np.zeros(out_shape, dtype=g.dtype)
    moved = np.moveaxis(data, axis, 0)
    np.add.at(moved, idx, np.moveaxis(g.data, axis, 0))

    def vjp(gg, need):
        return (take(gg, idx, axis),)

    return _apply("put", data, (g,), vjp)


def amax(a, axis, keepdims=False):
    """Max-reduce; subgradient routes to the first argmax in scan order."""
    a = _wrap(a)
    axes = (axis,) if isinstance(axis, int) else tuple(axis)
    axes = tuple(ax % a.ndim for ax in sorted(axes))
    # collapse reduced axes to one trailing axis to find first argmax
    perm = [i for i in range(a.ndim) if i not in axes] + list(axes)
    moved = a.data.transpose(perm)
    lead = moved.shape[: a.ndim - len(axes)]
    flat = moved.reshape(lead + (-1,))
    arg = np.argmax(flat, axis=-1)
    onehot = np.zeros_like(flat)
    np.put_along_axis(onehot, arg[..., None], 1.0, axis=-1)
    mask_data = onehot.reshape(moved.shape).transpose(np.argsort(perm))
    mask = Tensor(mask_data)
    out_data = np.max(a.data, axis=axes, keepdims=keepdims)
    in_shape = a.shape

    def vjp(g, need):
        if keepdims:
            gk = g
        else:
            shape = list(in_shape)
            for ax in axes:
                shape[ax] = 1
            gk = reshape(g, tuple(shape))
        return (mul(broadcast_to(gk, in_shape), mask),)

    return _apply("amax", out_data, (a,), vjp)


# -- einsum over two operands ------------------------------------------------

_EINSUM_PATHS: dict = {}


def _einsum(eq, x, y):
    key = (eq, x.shape, y.shape)
    path = _EINSUM_PATHS.get(key)
    if path is None:
        path = np.einsum_path(eq, x, y, optimize="optimal")[0]
        _EINSUM_PATHS[key] = path
    return np.einsum(eq, x, y, optimize=path)


def einsum2(eq, a, b):
    """Two-operand einsum without repeated labels inside an operand.

    Each operand's labels must be covered by the union of the output's and the
    other operand's labels, which makes both VJPs einsums of the same family.
    """
    a, b = _wrap(a), _wrap(b)
    lhs, out_l = eq.split("->")
    a_l, b_l = lhs.split(",")
    if len(set(a_l)) != len(a_l) or len(set(b_l)) != len(b_l):
        raise ValueError(f"einsum2 forbids repeated labels within an operand: {eq}")
    if not (set(a_l) <= set(out_l) | set(b_l) and set(b_l) <= set(out_l) | set(a_l)):
        raise ValueError(f"einsum2 cannot derive VJPs for {eq}")

    def vjp(g, need):
        ga = einsum2(f"{out_l},{b_l}->{a_l}", g, b) if need[0] else None
        gb = einsum2(f"{a_l},{out_l}->{b_l}", a, g) if need[1] else None
        return ga, gb

    return _apply("einsum", _einsum(eq, a.data, b.data), (a, b), vjp)


def matmul(a, b):
    a, b = _wrap(a), _wrap(b)
    if a.ndim == 2 and b.ndim == 2:
        return einsum2("ij,jk->ik", a, b)
    if a.ndim == 1 and b.ndim == 2:
        return einsum2("j,jk->k", a, b)
    if a.ndim == 2 and b.ndim == 1:
        return einsum2("ij,j->i", a, b)
    raise ValueError(f"matmul supports 1-D/2-D operands, got {a.ndim}-D @ {b.ndim}-D")


# -- patch extraction (shared by conv and pooling) ---------------------------

def _patch_geometry(h, w, kh, kw, stride, dilation, padding):
    eff_h = (kh - 1) * dilation + 1
    eff_w = (kw - 1) * dilation + 1
    ho = (h + 2 * padding - eff_h) // stride + 1
    wo = (w + 2 * padding - eff_w) // stride + 1
    if ho <= 0 or wo <= 0:
        raise ValueError(f"empty conv/pool output for input {h}x{w}, kernel {kh}x{kw}")
    return ho, wo


def _extract_np(x, kh, kw, stride, dilation, padding, pad_value):
    n, c, h, w = x.shape
    ho, wo = _patch_geometry(h, w, kh, kw, stride, dilation, padding)
    if padding:
        xp = np.pad(
            x,
            ((0, 0), (0, 0), (padding, padding), (padding, padding)),
            constant_values=pad_value,
        )
    else:
        xp = x
    win = np.lib.stride_tricks.sliding_window_view(
        xp, ((kh - 1) * dilation + 1, (kw - 1) * dilation + 1), axis=(2, 3)
    )
    win = win[:, :, ::stride, ::stride, ::dilation, ::dilation]
    return np.ascontiguousarray(win)


def extract_patches(x, kh, kw, stride=1, dilation=1, padding=0, pad_value=0.0):
    """Sliding windows of x [N,C,H,W] -> [N,C,Ho,Wo,kh,kw]."""
    x = _wrap(x)
    if x.ndim != 4:
        raise ValueError(f"extract_patches expects N,C,H,W input, got shape {x.shape}")
    shape = x.shape
    data = _extract_np(x.data, kh, kw, stride, dilation, padding, pad_value)

    def vjp(g, need):
        return (fold_patches(g, shape, kh, kw, stride, dilation, padding),)

    return _apply("patches", data, (x,), vjp)


def fold_patches(p, x_shape, kh, kw, stride=1, dilation=1, padding=0):
    """Scatter-add patches back onto the image grid (adjoint of extract_patches)."""
    p = _wrap(p)
    n, c, h, w = x_shape
    ho, wo = _patch_geometry(h, w, kh, kw, stride, dilation, padding)
    canvas = np.zeros((n, c, h + 2 * padding, w + 2 * padding), dtype=p.dtype)
    for i in range(kh):
        for j in range(kw):
            ii, jj = i * dilation, j * dilation
            canvas[:, :, ii : ii + ho * stride : stride, jj : jj + wo * stride : stride] += p.data[
                :, :, :, :, i, j
            ]
    data = canvas[:, :, padding : padding + h, padding : padding + w]

    def vjp(g, need):
        return (extract_patches(g, kh, kw, stride, dilation, padding, pad_value=0.0),)

    return _apply("fold", np.ascontiguousarray(data), (p,), vjp)


# ---------------------------------------------------------------------------
# composite neural-net ops
# ---------------------------------------------------------------------------

def conv2d(x, weight, bias=None, stride=1, padding=0, dilation=1, groups=1):
    """Direct 2-D cross-correlation with explicit zero padding.

    x: [N, Cin, H, W]; weight: [Cout, Cin/groups, kh, kw]; bias: [Cout] or None.
    """
    x, weight = _wrap(x), _wrap(weight)
    if x.ndim != 4 or weight.ndim != 4:
        raise ValueError("conv2d expects x [N,C,H,W] and weight [O,I,kh,kw]")
    n, cin, h, w = x.shape
    cout, cin_g, kh, kw = weight.shape
    if cin % groups or cout % groups:
        raise ValueError(f"channels ({cin}->{cout}) not divisible by groups={groups}")
    if cin_g != cin // groups:
        raise ValueError(
            f"weight expects {cin_g} input channels per group, input has {cin // groups}"
        )
    p = extract_patches(x, kh, kw, stride, dilation, padding)
    ho, wo = p.shape[2], p.shape[3]
    if groups == 1:
        y = einsum2("nchwkl,ockl->nohw", p, weight)
    else:
        pg = reshape(p, (n, groups, cin_g, ho, wo, kh, kw))
        wg = reshape(weight, (groups, cout // groups, cin_g, kh, kw))
        y = einsum2("ngchwkl,gockl->ngohw", pg, wg)
        y = reshape(y, (n, cout, ho, wo))
    if bias is not None:
        bias = _wrap(bias)
        if bias.shape != (cout,):
            raise ValueError(f"bias must have shape ({cout},), got {bias.shape}")
        y = add(y, reshape(bias, (1, cout, 1, 1)))
    return y


def avg_pool2d(x, kernel=3, stride=1, padding=1):
    """Average pooling; padded zeros count toward the mean (affine, positive weights)."""
    x = _wrap(x)
    p = extract_patches(x, kernel, kernel, stride, 1, padding, pad_value=0.0)
    k2 = np.full((kernel, kernel), 1.0 / (kernel * kernel), dtype=x.dtype)
    return einsum2("nchwkl,kl->nchw", p, Tensor(k2))


def max_pool2d(x, kernel=3, stride=1, padding=1):
    """Max pooling; padding is ignored (taken as -inf)."""
    x = _wrap(x)
    global _FINITE_CHECKS
    saved = _FINITE_CHECKS
    _FINITE_CHECKS = False  # patch tensor legitimately holds -inf pads
    try:
        p = extract_patches(x, kernel, kernel, stride, 1, padding, pad_value=-np.inf)
    finally:
        _FINITE_CHECKS = saved
    return amax(p, axis=(4, 5))


def global_avg_pool(x):
    return mean(x, axis=(2, 3))


def batchnorm(x, gamma, beta, running_mean, running_var, eps=1e-5, training=False,
              momentum=0.1):
    """Per-channel batch normalization for [N,C,H,W] inputs.

    In training mode, batch statistics are used (gradients flow through them)
    and running statistics are updated in place.  In inference mode the stored
    running statistics enter as constants.
    """
    x = _wrap(x)
    c = x.shape[1]
    shape = (1, c, 1, 1)
    if training:
        mu = mean(x, axis=(0, 2, 3), keepdims=True)
        var = mean(mul(add(x, neg(mu)), add(x, neg(mu))), axis=(0, 2, 3), keepdims=True)
        running_mean.data[...] = (1 - momentum) * running_mean.data + momentum * mu.data.reshape(c)
        running_var.data[...] = (1 - momentum) * running_var.data + momentum * var.data.reshape(c)
    else:
        mu = reshape(Tensor(running_mean.data.copy()), shape)
        var = reshape(Tensor(running_var.data.copy()), shape)
    inv = pow_const(add(var, _wrap(eps, x.dtype)), -0.5)
    xhat = mul(add(x, neg(mu)), inv)
    return add(mul(xhat, reshape(gamma, shape)), reshape(beta, shape))


def softmax(x, axis=-1):
    """Row-positive, rows sum to one; stabilized by a detached max shift."""
    x = _wrap(x)
    shift = Tensor(np.max(x.data, axis=axis, keepdims=True))
    e = exp(add(x, neg(broadcast_to(shift, x.shape))))
    denom = sum_(e, axis=axis, keepdims=True)
    return div(e, broadcast_to(denom, e.shape))


def log_softmax(x, axis=-1):
    x = _wrap(x)
    shift = Tensor(np.max(x.data, axis=axis, keepdims=True))
    z = add(x, neg(broadcast_to(shift, x.shape)))
    lse = log(sum_(exp(z), axis=axis, keepdims=True))
    return add(z, neg(broadcast_to(lse, x.shape)))


def logsumexp(x, axis=-1, keepdims=False):
    x = _wrap(x)
    shift_np = np.max(x.data, axis=axis, keepdims=True)
    z = add(x, neg(broadcast_to(Tensor(shift_np), x.shape)))
    s = log(sum_(exp(z), axis=axis, keepdims=True))
    out = add(s, Tensor(shift_np))
    if not keepdims:
        ax = axis % x.ndim
        out = reshape(out, tuple(d for i, d in enumerate(out.shape) if i != ax))
    return out


def cross_entropy(logits, labels):
    """Mean negative log-likelihood of integer labels under softmax(logits)."""
    logits = _wrap(logits)
    n, k = logits.shape
    labels = np.asarray(labels, dtype=np.intp)
    if labels.shape != (n,):
        raise ValueError(f"labels must have shape ({n},), got {labels.shape}")
    if labels.min() < 0 or labels.max() >= k:
        raise ValueError("label out of range")
    onehot = np.zeros((n, k), dtype=logits.dtype)
    onehot[np.arange(n), labels] = 1.0
    return mul(sum_(mul(log_softmax(logits), Tensor(onehot))), -1.0 / n)


# ---------------------------------------------------------------------------
# op registry (tag-dispatched forward per the primitive-op contract)
# ---------------------------------------------------------------------------

_FORWARD_REGISTRY = {
    "conv2d": conv2d,
    "relu": lambda x: relu(x),
    "batchnorm": batchnorm,
    "avg_pool2d": avg_pool2d,
    "max_pool2d": max_pool2d,
    "add": add,
    "scale": lambda x, factor: mul(x, float(factor)),
    "softmax": softmax,
    "cross_entropy": cross_entropy,
    "matmul": matmul,
}


def forward(op_kind, inputs, **params):
    """Dispatch a primitive forward by tag; unknown tags raise ValueError."""
    fn = _FORWARD_REGISTRY.get(op_kind)
    if fn is None:
        raise ValueError(f"unknown op tag '{op_kind}'")
    if isinstance(inputs, Tensor):
        inputs = [inputs]
    return fn(*inputs, **params)


# ---------------------------------------------------------------------------
# numeric gradient checking
# ---------------------------------------------------------------------------

def grad_check(fn, params, h=1e-5):
    """Max relative error between analytic and central-difference gradients.

    fn maps the parameter list to a scalar Tensor.  The error per coordinate is
    |analytic - numeric| / max(1, |analytic|); the max over all coordinates is
    returned.
    """
    params = [p if isinstance(p, Tensor) else Tensor(p, requires_grad=True) for p in params]
    with Tape() as tape:
        out = fn(params)
        if not np.all(np.isfinite(out.data)):
            raise NonFiniteError("function returned non-finite value")
        analytic = tape.gradients(out, params)
    worst = 0.0
    for p, g in zip(params, analytic):
        for idx in np.ndindex(p.data.shape):
            orig = p.data[idx]
            p.data[idx] = orig + h
            with no_record():
                fp = float(fn(params).data)
            p.data[idx] = orig - h
            with no_record():
                fm = float(fn(params).data)
            p.data[idx] = orig
            if not (np.isfinite(fp) and np.isfinite(fm)):
                raise NonFiniteError("function returned non-finite value during probing")
            num = (fp - fm) / (2 * h)
            a = g.data[idx]
            err = abs(a - num) / max(1.0, abs(a))
            worst = max(worst, err)
    return worst
