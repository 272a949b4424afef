"""Discrete symmetry groups p1/p4/p4m and their actions on grid fields.

Pinned conventions:

* ``GroupElement(rot, flip)`` acts on coordinates as ``R^rot âˆ˜ M^flip``
  (mirror first, then rotation), where ``R`` is a 90-degree
  counterclockwise rotation about the grid center and ``M`` mirrors
  across the vertical center line (x -> -x).
* Channel ordering of the regular representation: p4 = [e, r, r2, r3];
  p4m alternates plain/mirrored with increasing rotation, i.e.
  [e, m, r, m*r, r2, m*r2, r3, m*r3] with ``m*r`` meaning "rotate, then
  mirror".
* Cell fields transform as scalars, (u, v) as a staggered vector pair
  (rotation exchanges the two face lattices; the mirror negates u), and
  vertex potentials as pseudoscalars (mirrors negate them, which is what
  makes the curl construction commute with the group).

All actions are exact signed index permutations; no interpolation.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .grid import CLOSED, PERIODIC, GridSpec, INSState, SWEState


@dataclass(frozen=True)
class GroupElement:
    rot: int
    flip: bool = False

    def __post_init__(self):
        object.__setattr__(self, "rot", self.rot % 4)

    def compose(self, other: "GroupElement") -> "GroupElement":
        """self after other: T = T_self o T_other."""
        if self.flip:
            rot = (self.rot - other.rot) % 4
        else:
            rot = (self.rot + other.rot) % 4
        return GroupElement(rot, self.flip ^ other.flip)

    def inverse(self) -> "GroupElement":
        if self.flip:
            return GroupElement(self.rot, True)
        return GroupElement((-self.rot) % 4, False)

    @property
    def is_identity(self) -> bool:
        return self.rot == 0 and not self.flip

    def matrix(self) -> np.ndarray:
        """2x2 signed permutation representation (acts on (x, y))."""
        r = np.array([[0.0, -1.0], [1.0, 0.0]])
        m = np.array([[-1.0, 0.0], [0.0, 1.0]])
        out = np.eye(2)
        if self.flip:
            out = m @ out
        for _ in range(self.rot):
            out = r @ out
        return out

    @property
    def det(self) -> float:
        return -1.0 if self.flip else 1.0

    def __str__(self) -> str:
        name = f"r{90 * self.rot}"
        return f"m*{name}" if self.flip else name


IDENTITY = GroupElement(0, False)


def compose(g2: GroupElement, g1: GroupElement) -> GroupElement:
    """Group composition g2 * g1 (apply g1 first)."""
    return g2.compose(g1)


@dataclass(frozen=True)
class SymmetryGroup:
    kind: str
    elements: tuple[GroupElement, ...]
    _index: dict = field(default_factory=dict, compare=False, repr=False)

    def __post_init__(self):
        self._index.update({g: i for i, g in enumerate(self.elements)})

    @property
    def order(self) -> int:
        return len(self.elements)

    def index(self, g: GroupElement) -> int:
        try:
            return self._index[g]
        except KeyError:
            raise ValueError(f"{g} is not an element of {self.kind}") from None

    def __contains__(self, g: GroupElement) -> bool:
        return g in self._index

    def __iter__(self):
        return iter(self.elements)


P1 = SymmetryGroup("p1", (IDENTITY,))
P4 = SymmetryGroup("p4", tuple(GroupElement(r, False) for r in range(4)))
# m*r means "rotate by r, then mirror"; canonical form M o R^r = R^(-r) o M.
P4M = SymmetryGroup(
    "p4m",
    tuple(
        GroupElement((-r) % 4, True) if f else GroupElement(r, False)
        for r in range(4)
        for f in (0, 1)
    ),
)

_GROUPS = {"p1": P1, "p4": P4, "p4m": P4M}


def group_by_name(name: str) -> SymmetryGroup:
    try:
        return _GROUPS[name.lower()]
    except KeyError:
        raise ValueError(f"unknown symmetry group {name!r}") from None


# ---------------------------------------------------------------------------
# primitive actions (one r90 step / one mirror), then composites
# ---------------------------------------------------------------------------

def _rot_cell(f: np.ndarray) -> np.ndarray:
    # (x, y) -> (-y, x) about the grid center; rows are y.
    return np.rot90(f, -1, axes=(-2, -1))


def _mir_cell(f: np.ndarray) -> np.ndarray:
    return f[..., ::-1]


def _rot_uv(u: np.ndarray, v: np.ndarray, bc: str) -> tuple[np.ndarray, np.ndarray]:
    vnew = np.rot90(u, -1)
    unew = -np.rot90(v, -1)
    if bc == PERIODIC:
        unew = np.roll(unew, -1, axis=1)
    return unew, vnew


def _mir_uv(u: np.ndarray, v: np.ndarray, bc: str) -> tuple[np.ndarray, np.ndarray]:
    unew = -u[:, ::-1]
    if bc == PERIODIC:
        unew = np.roll(unew, -1, axis=1)
    return unew, v[:, ::-1]


def _rot_vertex(a: np.ndarray) -> np.ndarray:
    return np.roll(np.rot90(a, -1), -1, axis=1)


def _mir_vertex(a: np.ndarray) -> np.ndarray:
    return -np.roll(a[:, ::-1], -1, axis=1)


def _require_square(shape_ok: bool):
    if not shape_ok:
        raise ValueError("group actions with rotations require a square cell grid")


def act_cell(g: GroupElement, f: np.ndarray) -> np.ndarray:
    """Scalar action f'(x) = f(g^-1 x) as an exact index permutation.

    Acts on the trailing two axes; leading axes are treated as channels.
    """
    f = np.asarray(f, dtype=np.float64)
    if g.rot % 2 == 1:
        _require_square(f.shape[-2] == f.shape[-1])
    out = f
    if g.flip:
        out = _mir_cell(out)
    for _ in range(g.rot):
        out = _rot_cell(out)
    return np.ascontiguousarray(out)


def act_staggered(g: GroupElement, u: np.ndarray, v: np.ndarray,
                  grid: GridSpec) -> tuple[np.ndarray, np.ndarray]:
    """Action on an (u, v) staggered vector pair."""
    _require_square(grid.nx == grid.ny)
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    if g.flip:
        u, v = _mir_uv(u, v, grid.bc)
    for _ in range(g.rot):
        u, v = _rot_uv(u, v, grid.bc)
    return np.ascontiguousarray(u), np.ascontiguousarray(v)


def act_vertex(g: GroupElement, a: np.ndarray) -> np.ndarray:
    """Pseudoscalar action on a periodic vertex potential."""
    a = np.asarray(a, dtype=np.float64)
    _require_square(a.shape[0] == a.shape[1])
    out = a
    if g.flip:
        out = _mir_vertex(out)
    for _ in range(g.rot):
        out = _rot_vertex(out)
    return np.ascontiguousarray(out)


def act_regular(g: GroupElement, channels: np.ndarray,
                group: SymmetryGroup) -> np.ndarray:
    """Action on a regular representation stack ``[C, |G|, H, W]``.

    Spatially transforms each slice and permutes the group axis by left
    composition: out[g'] = T_g(in[g^-1 * g']).
    """
    channels = np.asarray(channels, dtype=np.float64)
    if channels.ndim != 4 or channels.shape[1] != group.order:
        raise ValueError(
            f"regular field must be [C, {group.order}, H, W], got {channels.shape}"
        )
    if g not in group:
        raise ValueError(f"{g} is not in group {group.kind}")
    ginv = g.inverse()
    out = np.empty_like(channels)
    for i, gp in enumerate(group.elements):
        src = group.index(ginv.compose(gp))
        out[:, i] = act_cell(g, channels[:, src])
    return out


def act_swe_state(g: GroupElement, s: SWEState) -> SWEState:
    u, v = act_staggered(g, s.u, s.v, s.grid)
    return SWEState(s.grid, act_cell(g, s.zeta), u, v, act_cell(g, s.mask))


def act_ins_state(g: GroupElement, s: INSState) -> INSState:
    u, v = act_staggered(g, s.u, s.v, s.grid)
    return INSState(s.grid, u, v)


# ---------------------------------------------------------------------------
# equivariance harness
# ---------------------------------------------------------------------------

@dataclass
class EquivarianceReport:
    group: str
    tol: float
    errors: dict[str, float]

    @property
    def max_error(self) -> float:
        return max(self.errors.values()) if self.errors else 0.0

    @property
    def worst(self) -> str:
        return max(self.errors, key=self.errors.get) if self.errors else ""

    @property
    def passed(self) -> bool:
        return self.max_error <= self.tol

    def as_dict(self) -> dict:
        return {
            "group": self.group,
            "tol": self.tol,
            "errors": dict(self.errors),
            "max_error": self.max_error,
            "worst_element": self.worst,
            "passed": bool(self.passed),
        }


def _flatten(x) -> np.ndarray:
    if isinstance(x, np.ndarray):
        return x.ravel()
    if isinstance(x, (tuple, list)):
        return np.concatenate([_flatten(p) for p in x])
    if isinstance(x, (SWEState, INSState)):
        parts = [x.u, x.v]
        if isinstance(x, SWEState):
            parts = [x.zeta] + parts
        return np.concatenate([p.ravel() for p in parts])
    return np.asarray(x, dtype=np.float64).ravel()


def check_equivariance(map_fn, group: SymmetryGroup, inputs,
                       input_action, output_action,
                       tol: float = 1e-10) -> EquivarianceReport:
    """Compare map(T_g x) against T'_g map(x) for each non-identity g.

    The error per element is the max-norm of the difference relative to
    the max-norm of the transformed reference output, maximized over the
    supplied input draws.
    """
    errors = {str(g): 0.0 for g in group.elements if not g.is_identity}
    for x in inputs:
        base = map_fn(x)
        for g in group.elements:
            if g.is_identity:
                continue
            lhs = _flatten(map_fn(input_action(g, x)))
            rhs = _flatten(output_action(g, base))
            denom = max(float(np.max(np.abs(rhs))), 1e-30)
            err = float(np.max(np.abs(lhs - rhs))) / denom
            key = str(g)
            if err > errors[key]:
                errors[key] = err
    return EquivarianceReport(group.kind, tol, errors)
