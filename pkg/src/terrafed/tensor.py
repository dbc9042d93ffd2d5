"""Reverse-mode autodiff over dense float64 arrays.

A small, auditable op set: every op computes its forward result eagerly with
a fixed summation order (contractions go through np.einsum without BLAS
dispatch) and, when a Tape is active and an input participates in gradient
flow, records a closure implementing its local gradient rule. `backward`
walks the tape once in reverse.

No broadcasting beyond what each op states, no higher-order derivatives.
"""
from __future__ import annotations

import threading
from typing import Callable, Sequence

import numpy as np

from .errors import (
    ContractError,
    DegenerateBatchError,
    DimensionError,
    LabelError,
    NumericError,
)

_TLS = threading.local()


def _tape_stack() -> list:
    stack = getattr(_TLS, "stack", None)
    if stack is None:
        stack = []
        _TLS.stack = stack
    return stack


def active_tape() -> "Tape | None":
    stack = _tape_stack()
    return stack[-1] if stack else None


class Tensor:
    """Dense float64 array, optionally a gradient-carrying leaf."""

    __slots__ = ("data", "requires_grad", "grad", "_tracked")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.array(data, dtype=np.float64, copy=True)
        if not np.all(np.isfinite(arr)):
            raise NumericError("tensor constructed from non-finite values")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._tracked = False

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError("item() on non-scalar tensor")
        return float(self.data.reshape(-1)[0])

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:  # pragma: no cover - debug aid
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"


class Tape:
    """Ordered record of ops; consumed by one backward pass.

    Node ids are topological by construction (append order), so the reverse
    walk visits every node exactly once.
    """

    __slots__ = ("_nodes", "_output_ids")

    def __init__(self):
        self._nodes: list[tuple[tuple[Tensor, ...], Tensor, Callable]] = []
        self._output_ids: set[int] = set()

    def __enter__(self) -> "Tape":
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc) -> bool:
        _tape_stack().pop()
        return False

    def __len__(self) -> int:
        return len(self._nodes)

    def record(self, inputs: tuple[Tensor, ...], output: Tensor, grad_fn: Callable) -> None:
        self._nodes.append((inputs, output, grad_fn))
        self._output_ids.add(id(output))

    def produced(self, t: Tensor) -> bool:
        return id(t) in self._output_ids

    def reset(self) -> None:
        self._nodes.clear()
        self._output_ids.clear()


def _finish(out_data: np.ndarray, inputs: tuple[Tensor, ...], grad_fn_factory, op: str) -> Tensor:
    """Wrap an op result; record the gradient rule if anything needs it."""
    if not np.all(np.isfinite(out_data)):
        raise NumericError(f"{op} produced non-finite values")
    out = Tensor.__new__(Tensor)
    out.data = out_data
    out.requires_grad = False
    out.grad = None
    out._tracked = False
    tape = active_tape()
    if tape is not None:
        needs = tuple(t.requires_grad or t._tracked for t in inputs)
        if any(needs):
            out._tracked = True
            tape.record(inputs, out, grad_fn_factory(needs))
    return out


def backward(loss: Tensor, tape: Tape) -> None:
    """Accumulate d(loss)/d(leaf) into .grad of every requires_grad leaf.

    The tape is reset afterwards.
    """
    if loss.data.size != 1:
        raise ContractError("backward requires a scalar loss")
    if not tape.produced(loss):
        raise ContractError("loss was not produced on this tape")
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    leaf_grads: dict[int, tuple[Tensor, np.ndarray]] = {}
    for inputs, output, grad_fn in reversed(tape._nodes):
        g = grads.pop(id(output), None)
        if g is None:
            continue
        contribs = grad_fn(g)
        for inp, contrib in zip(inputs, contribs):
            if contrib is None:
                continue
            if inp.requires_grad:
                key = id(inp)
                if key in leaf_grads:
                    leaf_grads[key] = (inp, leaf_grads[key][1] + contrib)
                else:
                    leaf_grads[key] = (inp, contrib)
            elif inp._tracked:
                key = id(inp)
                if key in grads:
                    grads[key] = grads[key] + contrib
                else:
                    grads[key] = contrib
    for leaf, g in leaf_grads.values():
        leaf.grad = np.array(g, dtype=np.float64)
    tape.reset()


# ---------------------------------------------------------------------------
# elementwise / structural ops
# ---------------------------------------------------------------------------


def _same_shape(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape:
        raise DimensionError(f"{op}: shapes {a.shape} and {b.shape} differ")


def add(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "add")

    def factory(needs):
        return lambda g: (g if needs[0] else None, g if needs[1] else None)

    return _finish(a.data + b.data, (a, b), factory, "add")


def sub(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "sub")

    def factory(needs):
        return lambda g: (g if needs[0] else None, -g if needs[1] else None)

    return _finish(a.data - b.data, (a, b), factory, "sub")


def mul(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "mul")
    ad, bd = a.data, b.data

    def factory(needs):
        return lambda g: (g * bd if needs[0] else None, g * ad if needs[1] else None)

    return _finish(ad * bd, (a, b), factory, "mul")


def scale(a: Tensor, s: float) -> Tensor:
    s = float(s)

    def factory(needs):
        return lambda g: (g * s if needs[0] else None,)

    return _finish(a.data * s, (a,), factory, "scale")


def square(a: Tensor) -> Tensor:
    ad = a.data

    def factory(needs):
        return lambda g: (2.0 * ad * g if needs[0] else None,)

    return _finish(ad * ad, (a,), factory, "square")


def mean_all(a: Tensor) -> Tensor:
    n = a.data.size
    shape = a.data.shape

    def factory(needs):
        return lambda g: (np.full(shape, float(g.reshape(-1)[0]) / n) if needs[0] else None,)

    return _finish(np.asarray(a.data.mean()), (a,), factory, "mean_all")


def concat_vec(parts: Sequence[Tensor]) -> Tensor:
    for p in parts:
        if p.data.ndim != 1:
            raise DimensionError("concat_vec expects 1-D tensors")
    sizes = [p.data.size for p in parts]
    offsets = np.cumsum([0] + sizes)

    def factory(needs):
        def fn(g):
            return tuple(
                g[offsets[i]:offsets[i + 1]] if needs[i] else None for i in range(len(sizes))
            )

        return fn

    return _finish(np.concatenate([p.data for p in parts]), tuple(parts), factory, "concat_vec")


def stack_rows(rows: Sequence[Tensor]) -> Tensor:
    width = rows[0].data.size
    for r in rows:
        if r.data.ndim != 1 or r.data.size != width:
            raise DimensionError("stack_rows expects equal-length 1-D tensors")

    def factory(needs):
        def fn(g):
            return tuple(g[i] if needs[i] else None for i in range(len(rows)))

        return fn

    return _finish(np.stack([r.data for r in rows]), tuple(rows), factory, "stack_rows")


def slice_vec(a: Tensor, lo: int, hi: int) -> Tensor:
    if a.data.ndim != 1:
        raise DimensionError("slice_vec expects a 1-D tensor")
    n = a.data.size

    def factory(needs):
        def fn(g):
            full = np.zeros(n)
            full[lo:hi] = g
            return (full,)

        return fn

    return _finish(a.data[lo:hi].copy(), (a,), factory, "slice_vec")


def slice_cols(a: Tensor, lo: int, hi: int) -> Tensor:
    if a.data.ndim != 2:
        raise DimensionError("slice_cols expects a 2-D tensor")
    shape = a.data.shape

    def factory(needs):
        def fn(g):
            full = np.zeros(shape)
            full[:, lo:hi] = g
            return (full,)

        return fn

    return _finish(a.data[:, lo:hi].copy(), (a,), factory, "slice_cols")


def reshape(a: Tensor, shape: tuple[int, ...]) -> Tensor:
    old = a.data.shape

    def factory(needs):
        return lambda g: (g.reshape(old),)

    return _finish(a.data.reshape(shape).copy(), (a,), factory, "reshape")


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0.0

    def factory(needs):
        return lambda g: (g * mask,)

    return _finish(np.where(mask, a.data, 0.0), (a,), factory, "relu")


def tanh_act(a: Tensor) -> Tensor:
    t = np.tanh(a.data)

    def factory(needs):
        return lambda g: (g * (1.0 - t * t),)

    return _finish(t, (a,), factory, "tanh_act")


def channel_mul(v: Tensor, t: Tensor) -> Tensor:
    """Per-channel broadcast product: out[c, ...] = v[c] * t[c, ...]."""
    if v.data.ndim != 1 or v.data.shape[0] != t.data.shape[0]:
        raise DimensionError("channel_mul: leading dimensions differ")
    vb = v.data.reshape((v.data.size,) + (1,) * (t.data.ndim - 1))
    td = t.data

    def factory(needs):
        def fn(g):
            dv = None
            if needs[0]:
                dv = (g * td).reshape(td.shape[0], -1).sum(axis=1)
            dt = g * vb if needs[1] else None
            return (dv, dt)

        return fn

    return _finish(td * vb, (v, t), factory, "channel_mul")


def dot(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "dot")
    ad, bd = a.data, b.data

    def factory(needs):
        return lambda g: (
            float(g) * bd if needs[0] else None,
            float(g) * ad if needs[1] else None,
        )

    return _finish(np.asarray(np.einsum("i,i->", ad, bd)), (a, b), factory, "dot")


def vecmat(v: Tensor, m: Tensor) -> Tensor:
    """out[j] = sum_i v[i] * m[i, j]."""
    if v.data.ndim != 1 or m.data.ndim != 2 or v.data.size != m.data.shape[0]:
        raise DimensionError("vecmat: incompatible shapes")
    vd, md = v.data, m.data

    def factory(needs):
        def fn(g):
            dv = np.einsum("ij,j->i", md, g) if needs[0] else None
            dm = np.einsum("i,j->ij", vd, g) if needs[1] else None
            return (dv, dm)

        return fn

    return _finish(np.einsum("i,ij->j", vd, md), (v, m), factory, "vecmat")


def softmax_vec(a: Tensor) -> Tensor:
    if a.data.ndim != 1:
        raise DimensionError("softmax_vec expects a 1-D tensor")
    z = a.data - a.data.max()
    e = np.exp(z)
    w = e / e.sum()

    def factory(needs):
        def fn(g):
            return (w * (g - float(np.einsum("i,i->", g, w))),)

        return fn

    return _finish(w, (a,), factory, "softmax_vec")


def affine(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """Dense layer: out = weight @ x + bias for 1-D x."""
    if x.data.ndim != 1 or weight.data.ndim != 2:
        raise DimensionError("affine expects 1-D input and 2-D weight")
    m, n = weight.data.shape
    if x.data.size != n or bias.data.size != m:
        raise DimensionError(
            f"affine: weight {weight.data.shape} vs input {x.data.shape} / bias {bias.data.shape}"
        )
    xd, wd = x.data, weight.data

    def factory(needs):
        def fn(g):
            dx = np.einsum("mn,m->n", wd, g) if needs[0] else None
            dw = np.einsum("m,n->mn", g, xd) if needs[1] else None
            db = g if needs[2] else None
            return (dx, dw, db)

        return fn

    return _finish(np.einsum("mn,n->m", wd, xd) + bias.data, (x, weight, bias), factory, "affine")


# ---------------------------------------------------------------------------
# spatial ops
# ---------------------------------------------------------------------------


def conv2d(x: Tensor, kernel: Tensor, bias: Tensor) -> Tensor:
    """3x3 convolution, stride 1, zero padding 1.

    Input is [Cin,H,W] or a batch [N,Cin,H,W]; the batch form contracts all
    images in one einsum call.
    """
    if kernel.data.ndim != 4:
        raise DimensionError("conv2d expects a [Cout,Cin,3,3] kernel")
    cout, cin, kh, kw = kernel.data.shape
    if (kh, kw) != (3, 3):
        raise DimensionError("conv2d kernel spatial size must be 3x3")
    if bias.data.shape != (cout,):
        raise DimensionError("conv2d: bias length must equal Cout")
    batched = x.data.ndim == 4
    if not batched and x.data.ndim != 3:
        raise DimensionError("conv2d expects [Cin,H,W] or [N,Cin,H,W] input")
    if x.data.shape[1 if batched else 0] != cin:
        raise DimensionError(
            f"conv2d: input channels {x.data.shape[1 if batched else 0]} != kernel Cin {cin}"
        )
    squeeze = not batched
    xd = x.data[None] if squeeze else x.data
    n, _, h, w = xd.shape
    padded = np.zeros((n, cin, h + 2, w + 2))
    padded[:, :, 1:h + 1, 1:w + 1] = xd
    # taps concatenated along the channel axis: windows[n, k*Cin + i, h, w]
    windows = np.concatenate(
        [padded[:, :, dy:dy + h, dx:dx + w] for dy in range(3) for dx in range(3)], axis=1
    ).reshape(n, 9 * cin, h * w)
    kmat = kernel.data.transpose(0, 2, 3, 1).reshape(cout, 9 * cin)
    out = (np.matmul(kmat, windows) + bias.data[None, :, None]).reshape(n, cout, h, w)

    def factory(needs):
        def fn(grad):
            g = grad[None] if squeeze else grad
            g2 = g.reshape(n, cout, h * w)
            d_x = None
            if needs[0]:
                dwin = np.matmul(kmat.T, g2).reshape(n, 9, cin, h, w)
                dpad = np.zeros_like(padded)
                k = 0
                for dy in range(3):
                    for dx in range(3):
                        dpad[:, :, dy:dy + h, dx:dx + w] += dwin[:, k]
                        k += 1
                d_x = dpad[:, :, 1:h + 1, 1:w + 1]
                if squeeze:
                    d_x = d_x[0]
            d_k = None
            if needs[1]:
                dk2 = np.matmul(g2, windows.swapaxes(1, 2)).sum(axis=0)
                d_k = dk2.reshape(cout, 3, 3, cin).transpose(0, 3, 1, 2)
            d_b = g.sum(axis=(0, 2, 3)) if needs[2] else None
            return (d_x, d_k, d_b)

        return fn

    return _finish(out[0] if squeeze else out, (x, kernel, bias), factory, "conv2d")


def pointwise_conv(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """Per-pixel affine map across channels; input [Cin,H,W] or [N,Cin,H,W]."""
    if weight.data.ndim != 2:
        raise DimensionError("pointwise_conv expects a [Cout,Cin] weight")
    cout, cin = weight.data.shape
    batched = x.data.ndim == 4
    if not batched and x.data.ndim != 3:
        raise DimensionError("pointwise_conv expects [Cin,H,W] or [N,Cin,H,W] input")
    if x.data.shape[1 if batched else 0] != cin:
        raise DimensionError(
            f"pointwise_conv: input channels {x.data.shape[1 if batched else 0]} != {cin}"
        )
    if bias.data.shape != (cout,):
        raise DimensionError("pointwise_conv: bias length must equal Cout")
    squeeze = not batched
    xd = x.data[None] if squeeze else x.data
    wd = weight.data
    n, _, h, w = xd.shape
    x2 = xd.reshape(n, cin, h * w)
    out = (np.matmul(wd, x2) + bias.data[None, :, None]).reshape(n, cout, h, w)

    def factory(needs):
        def fn(grad):
            g = grad[None] if squeeze else grad
            g2 = g.reshape(n, cout, h * w)
            d_x = None
            if needs[0]:
                d_x = np.matmul(wd.T, g2).reshape(n, cin, h, w)
                if squeeze:
                    d_x = d_x[0]
            d_w = np.matmul(g2, x2.swapaxes(1, 2)).sum(axis=0) if needs[1] else None
            d_b = g.sum(axis=(0, 2, 3)) if needs[2] else None
            return (d_x, d_w, d_b)

        return fn

    return _finish(out[0] if squeeze else out, (x, weight, bias), factory, "pointwise_conv")


def global_avg_pool(x: Tensor) -> Tensor:
    if x.data.ndim != 3:
        raise DimensionError("global_avg_pool expects [C,H,W]")
    _, h, w = x.data.shape

    def factory(needs):
        def fn(g):
            return (np.repeat(g[:, None, None] / (h * w), h, axis=1).repeat(w, axis=2),)

        return fn

    return _finish(x.data.mean(axis=(1, 2)), (x,), factory, "global_avg_pool")


def pixel_cross_entropy(logits: Tensor, labels: np.ndarray, ignore_value: int = 255) -> Tensor:
    """Mean over non-ignored pixels of -log softmax(logits)[label].

    Stabilized by per-pixel max subtraction.
    """
    if logits.data.ndim != 3:
        raise DimensionError("pixel_cross_entropy expects [C,H,W] logits")
    c = logits.data.shape[0]
    labels = np.asarray(labels)
    if labels.shape != logits.data.shape[1:]:
        raise DimensionError("pixel_cross_entropy: label grid shape mismatch")
    valid = labels != ignore_value
    n_valid = int(valid.sum())
    if n_valid == 0:
        raise DegenerateBatchError("all pixels ignored")
    lab_valid = labels[valid]
    if lab_valid.min() < 0 or lab_valid.max() >= c:
        raise LabelError(f"label outside [0,{c})")
    z = logits.data - logits.data.max(axis=0, keepdims=True)
    log_denom = np.log(np.exp(z).sum(axis=0))
    log_p = z - log_denom[None, :, :]
    ys, xs = np.nonzero(valid)
    loss = -log_p[lab_valid, ys, xs].sum() / n_valid

    def factory(needs):
        def fn(g):
            soft = np.exp(log_p)
            d = soft.copy()
            d[lab_valid, ys, xs] -= 1.0
            d *= valid[None, :, :]
            d *= float(g) / n_valid
            return (d,)

        return fn

    return _finish(np.asarray(loss), (logits,), factory, "pixel_cross_entropy")


def pixel_cross_entropy_batch(logits: Tensor, labels: np.ndarray, ignore_value: int = 255) -> Tensor:
    """Mean over samples of the per-sample non-ignored-pixel mean cross-entropy.

    Same value as averaging pixel_cross_entropy over the batch, in one op.
    Samples whose pixels are all ignored are excluded from the mean; at least
    one supervised sample is required.
    """
    if logits.data.ndim != 4:
        raise DimensionError("pixel_cross_entropy_batch expects [N,C,H,W] logits")
    n, c = logits.data.shape[:2]
    labels = np.asarray(labels)
    if labels.shape != (n,) + logits.data.shape[2:]:
        raise DimensionError("pixel_cross_entropy_batch: label grid shape mismatch")
    valid = labels != ignore_value
    per_sample = valid.sum(axis=(1, 2))
    live = per_sample > 0
    n_live = int(live.sum())
    if n_live == 0:
        raise DegenerateBatchError("all pixels ignored in every sample")
    flat = labels[valid]
    if flat.min() < 0 or flat.max() >= c:
        raise LabelError(f"label outside [0,{c})")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    log_denom = np.log(np.exp(z).sum(axis=1))
    log_p = z - log_denom[:, None, :, :]
    # weight each sample's pixels by 1 / (n_live * valid_count)
    weights = np.zeros(n)
    weights[live] = 1.0 / (n_live * per_sample[live])
    ns, ys, xs = np.nonzero(valid)
    loss = -(log_p[ns, flat, ys, xs] * weights[ns]).sum()

    def factory(needs):
        def fn(g):
            soft = np.exp(log_p)
            d = soft * (valid[:, None, :, :] * weights[:, None, None, None])
            d[ns, flat, ys, xs] -= weights[ns]
            return (d * float(g),)

        return fn

    return _finish(np.asarray(loss), (logits,), factory, "pixel_cross_entropy_batch")


# ---------------------------------------------------------------------------
# gradient checking
# ---------------------------------------------------------------------------


class GradCheckReport:
    """Per-parameter relative errors of tape gradients vs central differences."""

    def __init__(self, errors: dict[str, float], tol: float):
        self.errors = errors
        self.tol = tol

    @property
    def max_rel_error(self) -> float:
        return max(self.errors.values()) if self.errors else 0.0

    @property
    def passed(self) -> bool:
        return self.max_rel_error < self.tol

    def __repr__(self) -> str:
        worst = self.max_rel_error
        return f"GradCheckReport(max_rel_error={worst:.3e}, passed={self.passed})"


def _rel_err(a: float, b: float) -> float:
    return abs(a - b) / max(abs(a), abs(b), 1e-6)


def grad_check(
    closure: Callable[[], Tensor],
    params: dict[str, Tensor],
    step: float = 1e-5,
    tol: float = 1e-4,
) -> GradCheckReport:
    """Compare tape gradients of closure() against central finite differences.

    The closure must be deterministic and rebuild the loss from the current
    parameter values on each call.
    """
    with Tape() as tape:
        loss = closure()
        backward(loss, tape)
    analytic = {name: (p.grad.copy() if p.grad is not None else np.zeros_like(p.data))
                for name, p in params.items()}
    errors: dict[str, float] = {}
    for name, p in params.items():
        flat = p.data.reshape(-1)
        worst = 0.0
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            up = closure().item()
            flat[i] = orig - step
            down = closure().item()
            flat[i] = orig
            fd = (up - down) / (2.0 * step)
            worst = max(worst, _rel_err(fd, float(analytic[name].reshape(-1)[i])))
        errors[name] = worst
    return GradCheckReport(errors, tol)
