"""Equivariant network layers for staggered C-grid fields.

The lifting (input) layers convolve each field with a filter bank that is
collectively transformed by every group element: cell-centered filters
transform as scalars, the (W_u, W_v) pair transforms as a staggered
vector (rotations exchange the two rectangular kernels, mirrors negate
the u-kernel), and vertex kernels transform as pseudoscalars.  Channel g
of the output is the correlation of the fields with the g-transformed
bank, which makes the layer equivariant by construction onto the regular
representation.

Hidden layers are regular-representation group convolutions; output
layers map back to staggered fields under coefficient constraints that
tie the channels together (re-derived under this module's pinned channel
ordering and frozen in ``OutputCoefficients``).

Regular fields are carried as tensors of shape ``[B, C*|G|, H, W]`` with
channel index ``c * |G| + g``.
"""
from __future__ import annotations

import numpy as np

from . import tensor as T
from .grid import CLOSED, PERIODIC, GridSpec
from .symmetry import (GroupElement, P1, P4, P4M, SymmetryGroup, compose)
from .tensor import PaddingSpec, Tensor


# ---------------------------------------------------------------------------
# kernel transforms as signed gathers
# ---------------------------------------------------------------------------

def _rot_k(w: np.ndarray) -> np.ndarray:
    return np.rot90(w, -1, axes=(-2, -1))


def _mir_k(w: np.ndarray) -> np.ndarray:
    return w[..., ::-1]


def _scalar_kernel_transform(g: GroupElement, w: np.ndarray) -> np.ndarray:
    out = _mir_k(w) if g.flip else w
    for _ in range(g.rot):
        out = _rot_k(out)
    return out


def _pair_kernel_transform(g: GroupElement, wu: np.ndarray,
                           wv: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    if g.flip:
        wu, wv = -_mir_k(wu), _mir_k(wv)
    for _ in range(g.rot):
        wu, wv = -_rot_k(wv), _rot_k(wu)
    return wu, wv




def _encode(shape, offset=0):
    n = int(np.prod(shape))
    return np.arange(offset + 1.0, offset + n + 1.0).reshape(shape)


def _decode(arr) -> tuple[np.ndarray, np.ndarray]:
    """Recover (flat source index, sign) from a transformed encoding."""
    flat = np.asarray(arr).ravel()
    sign = np.sign(flat)
    idx = (np.abs(flat) - 1.0).round().astype(np.int64)
    return idx, sign


# ---------------------------------------------------------------------------
# padding helpers (alignment pinned: output i consumes padded {i..i+k-1})
# ---------------------------------------------------------------------------

def _odd_pad(k: int) -> tuple[int, int]:
    h = (k - 1) // 2
    return (h, h)


def _face_pad(k: int, bc: str) -> tuple[int, int]:
    # even k mapping face samples onto cell centers
    if bc == CLOSED:
        return (k // 2, k // 2)  # embeds the zero wall faces
    return (k // 2, k // 2 - 1)


def _vertex_pad(k: int) -> tuple[int, int]:
    # even k mapping cell centers onto vertices
    return (k // 2 - 1, k // 2)


def _mode(bc: str) -> str:
    return "zero" if bc == CLOSED else "circular"


def center_padding(k: int, bc: str) -> PaddingSpec:
    return PaddingSpec(_mode(bc), _odd_pad(k), _odd_pad(k))


def facex_padding(ky: int, kx: int, bc: str) -> PaddingSpec:
    return PaddingSpec(_mode(bc), _odd_pad(ky), _face_pad(kx, bc))


def facey_padding(ky: int, kx: int, bc: str) -> PaddingSpec:
    return PaddingSpec(_mode(bc), _face_pad(ky, bc), _odd_pad(kx))


# ---------------------------------------------------------------------------
# lifting layer
# ---------------------------------------------------------------------------

class StaggeredInputLayer:
    """Lift cell-centered channels plus one staggered (u, v) pair onto the
    regular representation of ``group``."""

    def __init__(self, group: SymmetryGroup, out_channels: int,
                 center_channels: int, kernel_size: int, bc: str,
                 rng: np.random.Generator, name: str = "input"):
        if kernel_size % 2 != 1 or kernel_size < 1:
            raise ValueError("kernel_size must be odd and >= 1")
        self.group = group
        self.bc = bc
        self.name = name
        self.out_channels = out_channels
        self.center_channels = center_channels
        k = kernel_size
        self.k = k
        ke = max(k - 1, 2)  # even extent across the face-normal axis
        self.ke = ke
        fan = center_channels * k * k + 2 * k * ke
        std = 1.0 / np.sqrt(fan)
        co = out_channels
        self.wc = (Tensor(rng.normal(0.0, std, (co, center_channels, k, k)),
                          requires_grad=True)
                   if center_channels else None)
        self.wu = Tensor(rng.normal(0.0, std, (co, 1, k, ke)), requires_grad=True)
        self.wv = Tensor(rng.normal(0.0, std, (co, 1, ke, k)), requires_grad=True)
        self.bias = Tensor(np.zeros(co), requires_grad=True)
        self._build_gathers()
        self.pad_c = center_padding(k, bc)
        self.pad_u = facex_padding(k, ke, bc)
        self.pad_v = facey_padding(ke, k, bc)

    def _build_gathers(self):
        G = self.group.order
        co = self.out_channels
        # big filters are laid out [Co, G, Cin, kh, kw] -> [Co*G, Cin, kh, kw]
        if self.wc is not None:
            rows = []
            for g in self.group:
                enc = _scalar_kernel_transform(g, _encode(self.wc.shape))
                rows.append(enc.reshape(co, 1, *enc.shape[1:]))
            self._gc = _decode(np.concatenate(rows, axis=1))
            self._gc_shape = (co * G,) + self.wc.shape[1:]
        nu = self.wu.size
        enc_u = _encode(self.wu.shape)
        enc_v = _encode(self.wv.shape, offset=nu)
        urows, vrows = [], []
        for g in self.group:
            tu, tv = _pair_kernel_transform(g, enc_u, enc_v)
            urows.append(tu.reshape(co, 1, *tu.shape[1:]))
            vrows.append(tv.reshape(co, 1, *tv.shape[1:]))
        self._gu = _decode(np.concatenate(urows, axis=1))
        self._gv = _decode(np.concatenate(vrows, axis=1))
        self._gu_shape = (co * G,) + self.wu.shape[1:]
        self._gv_shape = (co * G,) + self.wv.shape[1:]
        bidx = np.repeat(np.arange(co, dtype=np.int64), G)
        self._gb = (bidx, np.ones(co * G))

    def _uv_source(self) -> Tensor:
        # single flat parameter view: [wu | wv]
        return T.reshape(
            T.stack([T.reshape(self.wu, (self.wu.size,)),
                     T.reshape(self.wv, (self.wv.size,))], axis=0),
            (self.wu.size + self.wv.size,))

    def params(self) -> dict[str, Tensor]:
        out = {f"{self.name}.wu": self.wu, f"{self.name}.wv": self.wv,
               f"{self.name}.bias": self.bias}
        if self.wc is not None:
            out[f"{self.name}.wc"] = self.wc
        return out

    def forward(self, centers: np.ndarray | None, u: np.ndarray,
                v: np.ndarray) -> Tensor:
        """``centers`` is [B, Cc, H, W] (or None), ``u``/``v`` are
        [B, 1, ...] face arrays; returns [B, Co*|G|, H, W]."""
        src = self._uv_source()
        bias = T.take_signed(self.bias, *self._gb, (self.out_channels * self.group.order,))
        wu_big = T.take_signed(src, *self._gu, self._gu_shape)
        wv_big = T.take_signed(src, *self._gv, self._gv_shape)
        out = T.conv2d(Tensor(u), wu_big, self.pad_u, bias=bias)
        out = T.add(out, T.conv2d(Tensor(v), wv_big, self.pad_v))
        if self.wc is not None:
            if centers is None:
                raise ValueError("layer was built with center channels")
            wc_big = T.take_signed(self.wc, *self._gc, self._gc_shape)
            out = T.add(out, T.conv2d(Tensor(centers), wc_big, self.pad_c))
        return out


class CollocatedInputLayer:
    """Negative control: treats u, v as cell-centered scalars and lifts
    them with square kernels transformed as a collocated vector pair.

    On staggered data this breaks equivariance, which is the point.
    """

    def __init__(self, group: SymmetryGroup, out_channels: int,
                 center_channels: int, kernel_size: int, bc: str,
                 rng: np.random.Generator, name: str = "input"):
        self.group = group
        self.bc = bc
        self.name = name
        self.out_channels = out_channels
        self.center_channels = center_channels
        k = self.k = kernel_size
        co = out_channels
        std = 1.0 / np.sqrt((center_channels + 2) * k * k)
        self.wc = (Tensor(rng.normal(0.0, std, (co, center_channels, k, k)),
                          requires_grad=True) if center_channels else None)
        self.wu = Tensor(rng.normal(0.0, std, (co, 1, k, k)), requires_grad=True)
        self.wv = Tensor(rng.normal(0.0, std, (co, 1, k, k)), requires_grad=True)
        self.bias = Tensor(np.zeros(co), requires_grad=True)
        G = group.order
        nu = self.wu.size
        enc_u, enc_v = _encode(self.wu.shape), _encode(self.wv.shape, nu)
        urows, vrows, crows = [], [], []
        for g in group:
            tu, tv = _pair_kernel_transform(g, enc_u, enc_v)
            urows.append(tu.reshape(co, 1, 1, k, k))
            vrows.append(tv.reshape(co, 1, 1, k, k))
            if self.wc is not None:
                crows.append(_scalar_kernel_transform(
                    g, _encode(self.wc.shape)).reshape(co, 1, center_channels, k, k))
        self._gu = _decode(np.concatenate(urows, axis=1))
        self._gv = _decode(np.concatenate(vrows, axis=1))
        if self.wc is not None:
            self._gc = _decode(np.concatenate(crows, axis=1))
        self._big_uv = (co * G, 1, k, k)
        bidx = np.repeat(np.arange(co, dtype=np.int64), G)
        self._gb = (bidx, np.ones(co * G))
        self.pad = center_padding(k, bc)

    def params(self) -> dict[str, Tensor]:
        out = {f"{self.name}.wu": self.wu, f"{self.name}.wv": self.wv,
               f"{self.name}.bias": self.bias}
        if self.wc is not None:
            out[f"{self.name}.wc"] = self.wc
        return out

    def _embed(self, u: np.ndarray, v: np.ndarray):
        if self.bc == PERIODIC:
            return u, v
        # naive embedding: stick the interior faces into a center-shaped
        # array, zero on the trailing edge
        b = u.shape[0]
        ny, nxm1 = u.shape[-2], u.shape[-1]
        ue = np.zeros((b, 1, ny, nxm1 + 1))
        ue[..., :nxm1] = u
        nym1, nx = v.shape[-2], v.shape[-1]
        ve = np.zeros((b, 1, nym1 + 1, nx))
        ve[..., :nym1, :] = v
        return ue, ve

    def forward(self, centers, u, v) -> Tensor:
        src = T.reshape(
            T.stack([T.reshape(self.wu, (self.wu.size,)),
                     T.reshape(self.wv, (self.wv.size,))], axis=0),
            (self.wu.size + self.wv.size,))
        bias = T.take_signed(self.bias, *self._gb,
                             (self.out_channels * self.group.order,))
        ue, ve = self._embed(u, v)
        out = T.conv2d(Tensor(ue), T.take_signed(src, *self._gu, self._big_uv),
                       self.pad, bias=bias)
        out = T.add(out, T.conv2d(
            Tensor(ve), T.take_signed(src, *self._gv, self._big_uv), self.pad))
        if self.wc is not None:
            gshape = (self.out_channels * self.group.order,
                      self.center_channels, self.k, self.k)
            out = T.add(out, T.conv2d(Tensor(centers),
                                      T.take_signed(self.wc, *self._gc, gshape),
                                      self.pad))
        return out


# ---------------------------------------------------------------------------
# hidden group convolution
# ---------------------------------------------------------------------------

class GroupConv:
    """Regular-representation convolution: out(g) = sum_h T_g(W[g^-1 h]) * in(h).

    With the trivial group this is a standard convolution.
    """

    def __init__(self, group: SymmetryGroup, in_channels: int,
                 out_channels: int, kernel_size: int, bc: str,
                 rng: np.random.Generator, name: str):
        if kernel_size % 2 != 1:
            raise ValueError("group convolutions use odd kernels")
        self.group = group
        self.cin = in_channels
        self.cout = out_channels
        self.k = kernel_size
        self.name = name
        G = group.order
        std = 1.0 / np.sqrt(in_channels * G * kernel_size ** 2)
        self.w = Tensor(rng.normal(0.0, std,
                                   (out_channels, in_channels, G,
                                    kernel_size, kernel_size)),
                        requires_grad=True)
        self.bias = Tensor(np.zeros(out_channels), requires_grad=True)
        self.pad = center_padding(kernel_size, bc)
        self._build_gather()

    def _build_gather(self):
        group = self.group
        G = group.order
        k = self.k
        enc = _encode(self.w.shape)  # [Co, Ci, G, k, k]
        blocks = np.empty((self.cout, G, self.cin, G, k, k))
        for gi, g in enumerate(group):
            ginv = g.inverse()
            for hi, h in enumerate(group):
                src = group.index(compose(ginv, h))
                blocks[:, gi, :, hi] = _scalar_kernel_transform(g, enc[:, :, src])
        self._gw = _decode(blocks)
        self._gw_shape = (self.cout * G, self.cin * G, k, k)
        bidx = np.repeat(np.arange(self.cout, dtype=np.int64), G)
        self._gb = (bidx, np.ones(self.cout * G))

    def params(self) -> dict[str, Tensor]:
        return {f"{self.name}.w": self.w, f"{self.name}.bias": self.bias}

    def forward(self, x: Tensor) -> Tensor:
        big = T.take_signed(self.w, *self._gw, self._gw_shape)
        bias = T.take_signed(self.bias, *self._gb, (self.cout * self.group.order,))
        return T.conv2d(x, big, self.pad, bias=bias)


def group_mean(x: Tensor, group: SymmetryGroup, channels: int) -> Tensor:
    """Mean over the |G| axis of a [B, C*|G|, H, W] regular field."""
    b, cg, h, w = x.shape
    if cg != channels * group.order:
        raise ValueError(f"expected {channels * group.order} channels, got {cg}")
    xr = T.reshape(x, (b, channels, group.order, h, w))
    return T.mean_axis(xr, 2)


class ScalarOutputLayer:
    """Final group convolution followed by group pooling: an invariant
    cell-centered output channel."""

    def __init__(self, group: SymmetryGroup, in_channels: int,
                 kernel_size: int, bc: str, rng: np.random.Generator,
                 name: str = "scalar_out"):
        self.group = group
        self.conv = GroupConv(group, in_channels, 1, kernel_size, bc, rng, name)

    def params(self):
        return self.conv.params()

    def forward(self, x: Tensor) -> Tensor:
        return group_mean(self.conv.forward(x), self.group, 1)


# ---------------------------------------------------------------------------
# vector output layer (cell centers -> staggered faces)
# ---------------------------------------------------------------------------

class OutputCoefficients:
    """Free 4-vector generating the constrained (c, d, e, f) coefficient
    sets of the staggered vector output layer.

    The chains tie the four sets together:
      d(g) = c(r180 * g),  e(g) = c(r270 * g),  f(g) = c(r90 * g),
    with c constant on mirror pairs for p4m.  ``from_full`` validates an
    explicit coefficient set against these chains.
    """

    def __init__(self, group: SymmetryGroup, free=(1.0, 0.0, 0.0, 0.0)):
        if group.order not in (4, 8):
            raise ValueError("vector output coefficients need p4 or p4m")
        free = np.asarray(free, dtype=np.float64)
        if free.shape != (4,):
            raise ValueError("free coefficient vector has length 4")
        self.group = group
        self.free = free
        c = np.empty(group.order)
        for j in range(4):
            rj = GroupElement(j, False)
            c[group.index(rj)] = free[j]
            if group.order == 8:
                # mirror partner under left-multiplication by r180*m
                c[group.index(compose(GroupElement(2, True), rj))] = free[j]
        self.c = c
        self.d = self._left(GroupElement(2, False))
        self.e = self._left(GroupElement(3, False))
        self.f = self._left(GroupElement(1, False))

    def _left(self, a: GroupElement) -> np.ndarray:
        out = np.empty(self.group.order)
        for i, g in enumerate(self.group):
            out[i] = self.c[self.group.index(compose(a, g))]
        return out

    @classmethod
    def from_full(cls, group: SymmetryGroup, c, d, e, f) -> "OutputCoefficients":
        got = np.concatenate([np.asarray(x, dtype=np.float64) for x in (c, d, e, f)])
        free = [c[group.index(GroupElement(j, False))] for j in range(4)]
        built = cls(group, free)
        want = np.concatenate([built.c, built.d, built.e, built.f])
        if not np.array_equal(got, want):
            raise ValueError("coefficients violate the output-layer constraint chains")
        return built


class VectorOutputLayer:
    """Map a regular field to staggered (u, v) via two-point combinations
    of the adjacent cell centers (periodic grids).

    For p4/p4m the channel coefficients follow ``OutputCoefficients``;
    with the trivial group the same two-point structure is applied to
    four plain channels.
    """

    def __init__(self, group: SymmetryGroup,
                 coeffs: OutputCoefficients | None = None):
        self.group = group
        if group.order == 1:
            self.coeffs = None
            self.in_channels = 4
        else:
            self.coeffs = coeffs if coeffs is not None else OutputCoefficients(group)
            self.in_channels = 1

    def params(self):
        return {}

    def forward(self, x: Tensor) -> tuple[Tensor, Tensor]:
        """x: [B, in_channels*|G|, H, W] -> (u, v) each [B, 1, H, W]."""
        G = self.group.order
        if self.group.order == 1:
            cs = [(0, 1.0)]
            ds = [(1, 1.0)]
            es = [(2, 1.0)]
            fs = [(3, 1.0)]
        else:
            co = self.coeffs
            cs = [(i, w) for i, w in enumerate(co.c) if w != 0.0]
            ds = [(i, w) for i, w in enumerate(co.d) if w != 0.0]
            es = [(i, w) for i, w in enumerate(co.e) if w != 0.0]
            fs = [(i, w) for i, w in enumerate(co.f) if w != 0.0]

        def pick(i):
            return T.slice_axis(x, 1, i, 1)

        def combo(plus, minus, axis):
            acc = None
            for i, w in plus:
                term = T.roll(T.scale(pick(i), w), -1, axis)
                acc = term if acc is None else T.add(acc, term)
            for i, w in minus:
                term = T.scale(pick(i), w)
                acc = T.sub(acc, term) if acc is not None else T.scale(term, -1.0)
            return acc

        u = combo(cs, ds, axis=-1)  # u(c+1/2) = sum c_k p(c+1,k) - sum d_k p(c,k)
        v = combo(es, fs, axis=-2)
        return u, v


class VertexOutputLayer:
    """Even-kernel map from a regular field to a vertex potential.

    Channel g is convolved with det(g) * T_g(W); the determinant factor
    makes the pooled output transform as a pseudoscalar, which is what
    the curl construction requires.
    """

    def __init__(self, group: SymmetryGroup, in_channels: int,
                 rng: np.random.Generator, kernel_size: int = 2,
                 name: str = "vertex_out"):
        if kernel_size % 2 != 0:
            raise ValueError("vertex output kernels are even-sized")
        self.group = group
        self.cin = in_channels
        self.k = kernel_size
        self.name = name
        std = 1.0 / np.sqrt(in_channels * group.order * kernel_size ** 2)
        self.w = Tensor(rng.normal(0.0, std, (1, in_channels, kernel_size,
                                              kernel_size)),
                        requires_grad=True)
        blocks = []
        enc = _encode(self.w.shape)
        for g in group:
            # the kernel transforms spatially as a scalar; det(g) alone
            # carries the pseudoscalar character of the potential
            blocks.append(g.det * _scalar_kernel_transform(g, enc))
        # layout [1, Ci, G, k, k] -> big [1, Ci*G, k, k]
        stacked = np.stack(blocks, axis=2)
        self._gw = _decode(stacked)
        self._gw_shape = (1, in_channels * group.order, kernel_size, kernel_size)
        self.pad = PaddingSpec("circular", _vertex_pad(kernel_size),
                               _vertex_pad(kernel_size))

    def params(self):
        return {f"{self.name}.w": self.w}

    def forward(self, x: Tensor) -> Tensor:
        """x: [B, Ci*|G|, H, W] regular field -> [B, 1, H, W] potential."""
        b, cg, h, w = x.shape
        G = self.group.order
        # reorder [B, (C,G), H, W] -> [B, (Ci, G), ...] matches big filter
        big = T.take_signed(self.w, *self._gw, self._gw_shape)
        return T.conv2d(x, big, self.pad)


# ---------------------------------------------------------------------------
# differentiable staggered operators used by constraint layers
# ---------------------------------------------------------------------------

def curl_tensor(a: Tensor, dx: float) -> tuple[Tensor, Tensor]:
    """Differentiable curl of a vertex potential [B, 1, H, W] (periodic)."""
    du = T.scale(T.sub(a, T.roll(a, 1, axis=-2)), -1.0 / dx)
    dv = T.scale(T.sub(a, T.roll(a, 1, axis=-1)), 1.0 / dx)
    return du, dv
