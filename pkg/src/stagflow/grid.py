"""Arakawa C-grid data model and discrete calculus.

Conventions, fixed once and used everywhere:

* arrays are ``[row, col]`` with row = y (increasing upward) and
  col = x (increasing rightward);
* cell centers sit at integer coordinates ``(x, y) = (c, r)``;
* ``u`` lives on x-normal (vertical) faces at ``(c + 1/2, r)``;
* ``v`` lives on y-normal (horizontal) faces at ``(c, r + 1/2)``;
* vertices sit at ``(c + 1/2, r + 1/2)``.

Closed boundaries store interior faces only (``u`` is ny x (nx-1),
``v`` is (ny-1) x nx); boundary-normal velocities are implicitly zero.
Periodic grids store one face per cell in each direction (both ny x nx).
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

CLOSED = "closed"
PERIODIC = "periodic"


@dataclass(frozen=True)
class GridSpec:
    nx: int
    ny: int
    dx: float
    bc: str = CLOSED

    def __post_init__(self):
        if self.nx < 2 or self.ny < 2:
            raise ValueError("grid needs nx, ny >= 2")
        if self.dx <= 0:
            raise ValueError("dx must be positive")
        if self.bc not in (CLOSED, PERIODIC):
            raise ValueError(f"unknown boundary condition {self.bc!r}")

    @property
    def cell_shape(self) -> tuple[int, int]:
        return (self.ny, self.nx)

    @property
    def facex_shape(self) -> tuple[int, int]:
        if self.bc == CLOSED:
            return (self.ny, self.nx - 1)
        return (self.ny, self.nx)

    @property
    def facey_shape(self) -> tuple[int, int]:
        if self.bc == CLOSED:
            return (self.ny - 1, self.nx)
        return (self.ny, self.nx)

    @property
    def vertex_shape(self) -> tuple[int, int]:
        if self.bc != PERIODIC:
            raise ValueError("vertex fields are only defined on periodic grids")
        return (self.ny, self.nx)


def _check(name: str, arr: np.ndarray, shape: tuple[int, int]) -> np.ndarray:
    arr = np.asarray(arr, dtype=np.float64)
    if arr.shape != shape:
        raise ValueError(f"{name} has shape {arr.shape}, expected {shape}")
    return arr


@dataclass
class SWEState:
    """Surface elevation, staggered velocities and the boundary mask."""

    grid: GridSpec
    zeta: np.ndarray
    u: np.ndarray
    v: np.ndarray
    mask: np.ndarray

    def __post_init__(self):
        g = self.grid
        self.zeta = _check("zeta", self.zeta, g.cell_shape)
        self.u = _check("u", self.u, g.facex_shape)
        self.v = _check("v", self.v, g.facey_shape)
        self.mask = _check("mask", self.mask, g.cell_shape)

    def copy(self) -> "SWEState":
        return SWEState(self.grid, self.zeta.copy(), self.u.copy(),
                        self.v.copy(), self.mask.copy())


@dataclass
class INSState:
    grid: GridSpec
    u: np.ndarray
    v: np.ndarray

    def __post_init__(self):
        g = self.grid
        self.u = _check("u", self.u, g.facex_shape)
        self.v = _check("v", self.v, g.facey_shape)

    def copy(self) -> "INSState":
        return INSState(self.grid, self.u.copy(), self.v.copy())


def boundary_mask(grid: GridSpec) -> np.ndarray:
    """Binary cell field marking cells adjacent to a closed wall."""
    m = np.zeros(grid.cell_shape)
    if grid.bc == CLOSED:
        m[0, :] = m[-1, :] = 1.0
        m[:, 0] = m[:, -1] = 1.0
    return m


def divergence(u: np.ndarray, v: np.ndarray, grid: GridSpec) -> np.ndarray:
    """Per-cell (u_right - u_left)/dx + (v_top - v_bottom)/dx."""
    u = _check("u", u, grid.facex_shape)
    v = _check("v", v, grid.facey_shape)
    ny, nx = grid.cell_shape
    if grid.bc == PERIODIC:
        du = u - np.roll(u, 1, axis=1)
        dv = v - np.roll(v, 1, axis=0)
    else:
        ur = np.zeros((ny, nx))
        ur[:, :-1] = u
        ul = np.zeros((ny, nx))
        ul[:, 1:] = u
        vt = np.zeros((ny, nx))
        vt[:-1, :] = v
        vb = np.zeros((ny, nx))
        vb[1:, :] = v
        du = ur - ul
        dv = vt - vb
    return (du + dv) / grid.dx


def curl_of_potential(a: np.ndarray, grid: GridSpec) -> tuple[np.ndarray, np.ndarray]:
    """Velocities (u, v) = (-da/dy, +da/dx) from a vertex potential.

    The discrete divergence of the result vanishes identically
    (telescoping sums), which is the point of the construction.
    """
    if grid.bc != PERIODIC:
        raise ValueError("curl_of_potential requires a periodic grid")
    a = _check("a", a, grid.vertex_shape)
    u = -(a - np.roll(a, 1, axis=0)) / grid.dx
    v = (a - np.roll(a, 1, axis=1)) / grid.dx
    return u, v


def face_average_coarsen(state: INSState, factor: int) -> INSState:
    """Average the ``factor`` colinear fine faces on each coarse face line.

    This is the unique local face coarsening that preserves line integrals
    of normal velocity, hence maps divergence-free fields to
    divergence-free fields and (for them) preserves the global mean of
    each component.
    """
    if factor < 1:
        raise ValueError("factor must be >= 1")
    g = state.grid
    if g.bc != PERIODIC:
        raise ValueError("face_average_coarsen requires a periodic grid")
    if g.nx % factor or g.ny % factor:
        raise ValueError(
            f"factor {factor} does not divide grid {g.nx}x{g.ny}"
        )
    if factor == 1:
        return state.copy()
    nxc, nyc = g.nx // factor, g.ny // factor
    coarse = GridSpec(nxc, nyc, g.dx * factor, PERIODIC)
    # coarse u-face (R, C) lies on fine column index (C+1)*factor - 1
    ucols = (np.arange(nxc) + 1) * factor - 1
    uc = state.u[:, ucols].reshape(nyc, factor, nxc).mean(axis=1)
    vrows = (np.arange(nyc) + 1) * factor - 1
    vc = state.v[vrows, :].reshape(nyc, nxc, factor).mean(axis=2)
    return INSState(coarse, uc, vc)


def interpolate_to_centers(u: np.ndarray, v: np.ndarray,
                           grid: GridSpec) -> tuple[np.ndarray, np.ndarray]:
    """Two-face arithmetic means per cell (zero walls under closed BCs)."""
    u = _check("u", u, grid.facex_shape)
    v = _check("v", v, grid.facey_shape)
    ny, nx = grid.cell_shape
    if grid.bc == PERIODIC:
        uc = 0.5 * (u + np.roll(u, 1, axis=1))
        vc = 0.5 * (v + np.roll(v, 1, axis=0))
    else:
        ue = np.zeros((ny, nx + 1))
        ue[:, 1:-1] = u
        uc = 0.5 * (ue[:, :-1] + ue[:, 1:])
        ve = np.zeros((ny + 1, nx))
        ve[1:-1, :] = v
        vc = 0.5 * (ve[:-1, :] + ve[1:, :])
    return uc, vc
