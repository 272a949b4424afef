"""Dense float64 tensors with a reverse-mode tape and an Adam optimizer.

The engine is intentionally small: values are plain numpy arrays, every
operation is recorded on an explicit ``Tape`` while one is active, and a
single backward pass over the tape (reverse creation order, which is a
topological order by construction) yields gradients for all watched
parameters.  Outside of a tape context every operation runs tape-free at
plain numpy speed, which is how inference and rollouts execute.

All computation is in 64-bit floating point.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import erf

_SQRT2 = float(np.sqrt(2.0))
_INV_SQRT_2PI = float(1.0 / np.sqrt(2.0 * np.pi))

_ACTIVE_TAPE: "Tape | None" = None


class Tensor:
    """A dense 64-bit array plus a flag marking it as a trainable leaf."""

    __slots__ = ("data", "requires_grad")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data.reshape(()))

    def copy(self) -> "Tensor":
        return Tensor(self.data.copy(), self.requires_grad)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # Arithmetic sugar; the module-level functions do the real work.
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __neg__(self):
        return scale(self, -1.0)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


class Tape:
    """Recorded operations in creation order (parents precede children).

    ``gradients`` is pure: calling it twice on the same tape returns
    bit-identical results.
    """

    def __init__(self):
        self._nodes: list[tuple[Tensor, tuple, object]] = []
        self._watched: dict[int, Tensor] = {}
        self._prev: Tape | None = None

    def __enter__(self) -> "Tape":
        global _ACTIVE_TAPE
        self._prev = _ACTIVE_TAPE
        _ACTIVE_TAPE = self
        return self

    def __exit__(self, exc_type, exc, tb):
        global _ACTIVE_TAPE
        _ACTIVE_TAPE = self._prev
        self._prev = None
        return False

    def watch(self, *tensors: Tensor) -> None:
        for t in tensors:
            self._watched.setdefault(id(t), t)

    def __len__(self) -> int:
        return len(self._nodes)

    def gradients(self, loss: Tensor) -> dict[Tensor, np.ndarray]:
        """Gradient of a scalar ``loss`` w.r.t. every watched tensor.

        Watched tensors not reachable from ``loss`` get zero gradients.
        """
        if loss.size != 1:
            raise ValueError(
                f"backward root must be a scalar, got shape {loss.shape}"
            )
        accum: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        for out, parents, vjp in reversed(self._nodes):
            g = accum.get(id(out))
            if g is None:
                continue
            for parent, pg in zip(parents, vjp(g)):
                if pg is None:
                    continue
                pid = id(parent)
                if pid in accum:
                    accum[pid] = accum[pid] + pg
                else:
                    accum[pid] = pg
        out_map: dict[Tensor, np.ndarray] = {}
        for t in self._watched.values():
            g = accum.get(id(t))
            out_map[t] = np.zeros_like(t.data) if g is None else np.asarray(g)
        return out_map


def backward(loss: Tensor, tape: Tape) -> dict[Tensor, np.ndarray]:
    """Run the reverse pass over ``tape`` from the scalar ``loss``."""
    return tape.gradients(loss)


def active_tape() -> Tape | None:
    return _ACTIVE_TAPE


def _record(out: Tensor, parents: tuple, vjp) -> Tensor:
    tape = _ACTIVE_TAPE
    if tape is not None:
        tape._nodes.append((out, parents, vjp))
        for p in parents:
            if p.requires_grad:
                tape.watch(p)
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` (inverse of numpy broadcasting)."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


# ---------------------------------------------------------------------------
# elementwise / reduction ops
# ---------------------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = Tensor(a.data + b.data)
    return _record(
        out,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
    )


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = Tensor(a.data - b.data)
    return _record(
        out,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)),
    )


def mul(a, b) -> Tensor:
    if isinstance(b, (int, float)):
        return scale(a, float(b))
    if isinstance(a, (int, float)):
        return scale(b, float(a))
    a, b = as_tensor(a), as_tensor(b)
    out = Tensor(a.data * b.data)
    return _record(
        out,
        (a, b),
        lambda g: (
            _unbroadcast(g * b.data, a.shape),
            _unbroadcast(g * a.data, b.shape),
        ),
    )


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)
    out = Tensor(a.data * c)
    return _record(out, (a,), lambda g: (g * c,))


def gelu(x: Tensor) -> Tensor:
    """Gaussian error linear unit, exact erf formulation."""
    xd = x.data
    cdf = 0.5 * (1.0 + erf(xd / _SQRT2))
    out = Tensor(xd * cdf)

    def vjp(g):
        pdf = _INV_SQRT_2PI * np.exp(-0.5 * xd * xd)
        return (g * (cdf + xd * pdf),)

    return _record(out, (x,), vjp)


def sum_all(x: Tensor) -> Tensor:
    out = Tensor(x.data.sum())
    return _record(out, (x,), lambda g: (np.broadcast_to(g, x.shape).copy(),))


def mean_all(x: Tensor) -> Tensor:
    n = x.size
    out = Tensor(x.data.mean())
    return _record(
        out, (x,), lambda g: (np.broadcast_to(g / n, x.shape).copy(),)
    )


def mean_axis(x: Tensor, axis, keepdims: bool = False) -> Tensor:
    axes = (axis,) if isinstance(axis, int) else tuple(axis)
    n = 1
    for ax in axes:
        n *= x.shape[ax]
    out = Tensor(x.data.mean(axis=axes, keepdims=keepdims))

    def vjp(g):
        gg = g
        if not keepdims:
            gg = np.expand_dims(gg, axes)
        return (np.broadcast_to(gg / n, x.shape).copy(),)

    return _record(out, (x,), vjp)


def mse_loss(pred: Tensor, target) -> Tensor:
    """Mean of squared differences over all elements."""
    target = as_tensor(target)
    if pred.shape != target.shape:
        raise ValueError(
            f"mse_loss shape mismatch: pred {pred.shape} vs target {target.shape}"
        )
    if pred.size == 0:
        raise ValueError("mse_loss on empty tensors")
    diff = pred.data - target.data
    n = pred.size
    out = Tensor(np.float64((diff * diff).mean()))

    def vjp(g):
        gd = (2.0 / n) * diff * g
        return (gd, -gd)

    return _record(out, (pred, target), vjp)


# ---------------------------------------------------------------------------
# shape / indexing ops
# ---------------------------------------------------------------------------

def reshape(x: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    out = Tensor(x.data.reshape(shape))
    return _record(out, (x,), lambda g: (g.reshape(x.shape),))


def roll(x: Tensor, shift: int, axis: int) -> Tensor:
    out = Tensor(np.roll(x.data, shift, axis=axis))
    return _record(out, (x,), lambda g: (np.roll(g, -shift, axis=axis),))


def slice_axis(x: Tensor, axis: int, start: int, length: int) -> Tensor:
    sel = [slice(None)] * x.ndim
    sel[axis] = slice(start, start + length)
    sel = tuple(sel)
    out = Tensor(x.data[sel])

    def vjp(g):
        gx = np.zeros_like(x.data)
        gx[sel] = g
        return (gx,)

    return _record(out, (x,), vjp)


def stack(tensors, axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    out = Tensor(np.stack([t.data for t in tensors], axis=axis))

    def vjp(g):
        return tuple(np.take(g, i, axis=axis) for i in range(len(tensors)))

    return _record(out, tuple(tensors), vjp)


def take_signed(src: Tensor, idx: np.ndarray, sign: np.ndarray, out_shape) -> Tensor:
    """Signed gather: ``out.flat[i] = sign[i] * src.flat[idx[i]]``.

    Used to apply group transforms to filter banks; the backward pass is a
    signed scatter-add, implemented with bincount for determinism.
    """
    out = Tensor((src.data.ravel()[idx] * sign).reshape(out_shape))

    def vjp(g):
        gsrc = np.bincount(
            idx, weights=g.ravel() * sign, minlength=src.size
        ).reshape(src.shape)
        return (gsrc,)

    return _record(out, (src,), vjp)


# ---------------------------------------------------------------------------
# convolution
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class PaddingSpec:
    """Per-axis padding: mode plus (leading, trailing) amounts per axis."""

    mode: str = "none"  # "circular" | "zero" | "none"
    y: tuple[int, int] = (0, 0)
    x: tuple[int, int] = (0, 0)

    def __post_init__(self):
        if self.mode not in ("circular", "zero", "none"):
            raise ValueError(f"unknown padding mode {self.mode!r}")
        if min(*self.y, *self.x) < 0:
            raise ValueError("padding amounts must be non-negative")
        if self.mode == "none" and (self.y != (0, 0) or self.x != (0, 0)):
            raise ValueError("mode 'none' requires zero padding amounts")


def _pad_values(x: np.ndarray, spec: PaddingSpec) -> np.ndarray:
    """Pad the two trailing axes, rows first then columns."""
    if spec.mode == "none":
        return x
    for axis, (p0, p1) in ((-2, spec.y), (-1, spec.x)):
        if p0 == 0 and p1 == 0:
            continue
        if spec.mode == "circular":
            if x.shape[axis] < 1:
                raise ValueError("circular padding on zero-length axis")
            parts = []
            if p0 > 0:
                parts.append(np.take(x, range(x.shape[axis] - p0, x.shape[axis]), axis=axis))
            parts.append(x)
            if p1 > 0:
                parts.append(np.take(x, range(0, p1), axis=axis))
            x = np.concatenate(parts, axis=axis)
        else:
            width = [(0, 0)] * x.ndim
            width[axis] = (p0, p1)
            x = np.pad(x, width)
    return x


def _unpad_adjoint(g: np.ndarray, spec: PaddingSpec, orig_hw: tuple[int, int]) -> np.ndarray:
    """Adjoint of ``_pad_values`` (columns first, then rows)."""
    if spec.mode == "none":
        return g
    h, w = orig_hw
    for axis, (p0, p1), n in ((-1, spec.x, w), (-2, spec.y, h)):
        if p0 == 0 and p1 == 0:
            continue
        core = np.take(g, range(p0, p0 + n), axis=axis).copy()
        if spec.mode == "circular":
            if p0 > 0:
                lead = np.take(g, range(0, p0), axis=axis)
                sel = [slice(None)] * g.ndim
                sel[axis] = slice(n - p0, n)
                core[tuple(sel)] += lead
            if p1 > 0:
                trail = np.take(g, range(p0 + n, p0 + n + p1), axis=axis)
                sel = [slice(None)] * g.ndim
                sel[axis] = slice(0, p1)
                core[tuple(sel)] += trail
        g = core
    return g


def _flatten_cl(x4: np.ndarray) -> np.ndarray:
    """[B,C,H,W] -> channels-last rows [B*H*W, C] (one copy)."""
    b, c, h, w = x4.shape
    return np.ascontiguousarray(x4.transpose(0, 2, 3, 1)).reshape(b * h * w, c)


def _corr_valid_flat(xflat: np.ndarray, shape, w4: np.ndarray) -> np.ndarray:
    """Valid cross-correlation via shifted GEMMs on channels-last rows.

    A filter tap (p, q) reads row ``r + p*W + q`` of the flat image; rows
    whose window would cross the right edge are computed anyway and
    discarded by the final crop, so no im2col copy is ever built.
    Returns [B, O, H', W'].
    """
    b, cin, hp, wp = shape
    cout, _, kh, kw = w4.shape
    ho, wo = hp - kh + 1, wp - kw + 1
    n = b * hp * wp
    y = np.zeros((n, cout))
    for p in range(kh):
        base = p * wp
        for q in range(kw):
            s = base + q
            rows = n - s
            y[:rows] += xflat[s:] @ w4[:, :, p, q].T
    out = y.reshape(b, hp, wp, cout)[:, :ho, :wo]
    return np.ascontiguousarray(out.transpose(0, 3, 1, 2))


def conv2d(x: Tensor, w: Tensor, padding: PaddingSpec | None = None,
           bias: Tensor | None = None) -> Tensor:
    """2D cross-correlation (no kernel flip) of ``x`` with filters ``w``.

    ``x`` is ``[Cin, H, W]`` or batched ``[B, Cin, H, W]``; ``w`` is
    ``[Cout, Cin, kH, kW]``.  Output spatial size along each axis is
    ``n + lead + trail - k + 1``.  Output sample ``i`` consumes padded
    input samples ``{i, ..., i+k-1}``.
    """
    if padding is None:
        padding = PaddingSpec()
    if w.ndim != 4:
        raise ValueError(f"filters must be 4D [Cout,Cin,kH,kW], got {w.shape}")
    batched = x.ndim == 4
    if not batched and x.ndim != 3:
        raise ValueError(f"input must be 3D or 4D, got shape {x.shape}")
    cout, cin_w, kh, kw = w.shape
    cin = x.shape[-3]
    if cin != cin_w:
        raise ValueError(
            f"channel axis mismatch: input has Cin={cin}, filters expect {cin_w}"
        )
    if kh < 1 or kw < 1:
        raise ValueError("kernel sizes must be >= 1")

    xd = x.data if batched else x.data[None]
    b = xd.shape[0]
    h, wid = xd.shape[-2], xd.shape[-1]
    xp = _pad_values(xd, padding)
    hp, wp = xp.shape[-2], xp.shape[-1]
    if hp < kh:
        raise ValueError(f"padded height {hp} smaller than kernel height {kh}")
    if wp < kw:
        raise ValueError(f"padded width {wp} smaller than kernel width {kw}")
    ho, wo = hp - kh + 1, wp - kw + 1

    xflat = _flatten_cl(xp)
    out_data = _corr_valid_flat(xflat, xp.shape, w.data)
    if bias is not None:
        out_data += bias.data[None, :, None, None]
    if not batched:
        out_data = out_data[0]
    out = Tensor(out_data)

    def vjp(g):
        gb4 = g if batched else g[None]
        gbias = gb4.sum(axis=(0, 2, 3)) if bias is not None else None
        # embed the output gradient in the padded frame, channels-last
        gframe = np.zeros((b, hp, wp, cout))
        gframe[:, :ho, :wo] = gb4.transpose(0, 2, 3, 1)
        gflat = gframe.reshape(b * hp * wp, cout)
        n = b * hp * wp
        gw = np.empty_like(w.data)
        gxflat = np.zeros((n, cin))
        for p in range(kh):
            base = p * wp
            for q in range(kw):
                s = base + q
                rows = n - s
                gw[:, :, p, q] = gflat[:rows].T @ xflat[s:]
                gxflat[s:] += gflat[:rows] @ w.data[:, :, p, q]
        gxp = gxflat.reshape(b, hp, wp, cin).transpose(0, 3, 1, 2)
        gx = _unpad_adjoint(gxp, padding, (h, wid))
        if not batched:
            gx = gx[0]
        if bias is not None:
            return (gx, gw, gbias)
        return (gx, gw)

    parents = (x, w) if bias is None else (x, w, bias)
    return _record(out, parents, vjp)


# ---------------------------------------------------------------------------
# Adam
# ---------------------------------------------------------------------------

@dataclass
class AdamState:
    """First/second moment accumulators keyed like the parameter dict."""

    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    step: int = 0


def adam_step(params: dict[str, Tensor], grads: dict[str, np.ndarray],
              state: AdamState, lr: float, beta1: float = 0.9,
              beta2: float = 0.999, eps: float = 1e-8) -> AdamState:
    """One Adam update with bias correction; mutates ``params`` in place."""
    if lr <= 0:
        raise ValueError("lr must be positive")
    state.step += 1
    t = state.step
    for name, p in params.items():
        g = np.asarray(grads[name])
        if g.shape != p.shape:
            raise ValueError(
                f"gradient shape {g.shape} does not match parameter "
                f"{name!r} of shape {p.shape}"
            )
        if not np.all(np.isfinite(g)):
            raise FloatingPointError(f"non-finite gradient for parameter {name!r}")
        m = state.m.get(name)
        if m is None:
            m = np.zeros_like(p.data)
            state.m[name] = m
            state.v[name] = np.zeros_like(p.data)
        v = state.v[name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        mhat = m / (1.0 - beta1 ** t)
        vhat = v / (1.0 - beta2 ** t)
        p.data -= lr * mhat / (np.sqrt(vhat) + eps)
    return state
