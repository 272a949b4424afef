"""Hard physical constraint layers: exact conservation by construction.

All corrections act on predicted increments.  The tensor variants are
differentiable and used inside surrogate models; the numpy variants
operate on solver states.
"""
from __future__ import annotations

import numpy as np

from . import tensor as T
from .grid import GridSpec, INSState, curl_of_potential
from .layers import curl_tensor
from .tensor import Tensor


def mass_correction(dzeta: Tensor) -> Tensor:
    """Remove the per-sample spatial mean: the output field sums to zero."""
    return T.sub(dzeta, T.mean_axis(dzeta, (-2, -1), keepdims=True))


def momentum_correction(du: Tensor, dv: Tensor) -> tuple[Tensor, Tensor]:
    """Zero the mean of each velocity increment component independently."""
    return (T.sub(du, T.mean_axis(du, (-2, -1), keepdims=True)),
            T.sub(dv, T.mean_axis(dv, (-2, -1), keepdims=True)))


def mass_correction_np(dzeta: np.ndarray) -> np.ndarray:
    return dzeta - dzeta.mean()


def momentum_correction_np(du: np.ndarray, dv: np.ndarray):
    return du - du.mean(), dv - dv.mean()


def divfree_increments(a: Tensor, dx: float) -> tuple[Tensor, Tensor]:
    """Velocity increments (du, dv) = curl(a); divergence-free and
    component-mean-free by telescoping, so mass and momentum are both
    conserved exactly when the increments are added to a state."""
    return curl_tensor(a, dx)


def divfree_update(a: np.ndarray, state: INSState) -> INSState:
    """Add the curl of a vertex potential to an INS state."""
    du, dv = curl_of_potential(a, state.grid)
    return INSState(state.grid, state.u + du, state.v + dv)
