"""Initial-condition generators for both PDE systems."""
from __future__ import annotations

import numpy as np

from ..grid import GridSpec, INSState, SWEState, boundary_mask
from .ins import project

ELEVATION = 0.1  # m


def _max_side(n: int) -> int:
    return max(2, int(round(0.28 * n)))


def _draw_rect(rng: np.random.Generator, grid: GridSpec, square: bool):
    ny, nx = grid.cell_shape
    w = int(rng.integers(2, _max_side(nx) + 1))
    h = w if square else int(rng.integers(2, _max_side(ny) + 1))
    c0 = int(rng.integers(0, nx - w + 1))
    r0 = int(rng.integers(0, ny - h + 1))
    return r0, c0, h, w


def _paint(zeta: np.ndarray, rect) -> None:
    r0, c0, h, w = rect
    zeta[r0:r0 + h, c0:c0 + w] += ELEVATION


def swe_ic_square(rng: np.random.Generator, grid: GridSpec) -> SWEState:
    """Resting fluid with one square elevation of random side/position."""
    zeta = np.zeros(grid.cell_shape)
    _paint(zeta, _draw_rect(rng, grid, square=True))
    return SWEState(grid, zeta, np.zeros(grid.facex_shape),
                    np.zeros(grid.facey_shape), boundary_mask(grid))


def swe_ic_generalization(rng: np.random.Generator, kind: str,
                          grid: GridSpec) -> SWEState:
    """Out-of-distribution elevations: one rectangle, two independent
    rectangles, or two rectangles forced to overlap (heights sum)."""
    zeta = np.zeros(grid.cell_shape)
    if kind == "one_rect":
        _paint(zeta, _draw_rect(rng, grid, square=False))
    elif kind == "two_rects":
        _paint(zeta, _draw_rect(rng, grid, square=False))
        _paint(zeta, _draw_rect(rng, grid, square=False))
    elif kind == "overlapping_rects":
        ny, nx = grid.cell_shape
        r1, c1, h1, w1 = _draw_rect(rng, grid, square=False)
        _paint(zeta, (r1, c1, h1, w1))
        w2 = int(rng.integers(2, _max_side(nx) + 1))
        h2 = int(rng.integers(2, _max_side(ny) + 1))
        # sample the second corner uniformly among overlapping placements
        rlo, rhi = max(0, r1 - h2 + 1), min(ny - h2, r1 + h1 - 1)
        clo, chi = max(0, c1 - w2 + 1), min(nx - w2, c1 + w1 - 1)
        r2 = int(rng.integers(rlo, rhi + 1))
        c2 = int(rng.integers(clo, chi + 1))
        _paint(zeta, (r2, c2, h2, w2))
    else:
        raise ValueError(f"unknown generalization IC kind {kind!r}")
    return SWEState(grid, zeta, np.zeros(grid.facex_shape),
                    np.zeros(grid.facey_shape), boundary_mask(grid))


def ins_ic_filtered_noise(rng: np.random.Generator, peak_k: int,
                          grid: GridSpec, sigma: float = 1.5) -> INSState:
    """Filtered Gaussian noise with peak spectral density at |k| = peak_k,
    projected divergence-free and normalized to unit RMS velocity."""
    n = grid.nx
    if not 1 <= peak_k < n // 2:
        raise ValueError(
            f"peak wavenumber {peak_k} outside the resolvable range "
            f"[1, {n // 2 - 1}]"
        )
    k1 = np.fft.fftfreq(n) * n
    kmag = np.hypot(k1[None, :], k1[:, None])
    band = np.exp(-0.5 * ((kmag - peak_k) / sigma) ** 2)
    band[0, 0] = 0.0

    def shaped():
        white = rng.standard_normal((n, n))
        return np.real(np.fft.ifft2(np.fft.fft2(white) * band))

    u, v = project(shaped(), shaped(), grid)
    rms = np.sqrt(np.mean(u * u) + np.mean(v * v))
    return INSState(grid, u / rms, v / rms)
