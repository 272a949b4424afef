"""Rollout evaluation diagnostics: errors, correlations, spectra,
conserved-quantity series.

Pinned definitions (configurable where noted, never silently changed):
NRMSE normalizes by the RMS of the reference snapshot at the same time;
the high-correlation threshold defaults to 0.8; spectra are computed on
center-interpolated velocities with ``S(k) = |F|^2 / N^2`` so that the
sum over modes equals the spatial sum of squares (Parseval), and the
k^5-scaled column is applied only at export.
"""
from __future__ import annotations

import numpy as np

from .grid import GridSpec, INSState, SWEState, interpolate_to_centers


def nrmse(pred: np.ndarray, ref: np.ndarray) -> float:
    pred = np.asarray(pred, dtype=np.float64)
    ref = np.asarray(ref, dtype=np.float64)
    if pred.shape != ref.shape:
        raise ValueError(f"shape mismatch {pred.shape} vs {ref.shape}")
    rms = np.sqrt(np.mean(ref * ref))
    if rms == 0.0:
        raise ValueError("reference field has zero RMS")
    return float(np.sqrt(np.mean((pred - ref) ** 2)) / rms)


def pearson(pred: np.ndarray, ref: np.ndarray) -> float:
    pred = np.asarray(pred, dtype=np.float64).ravel()
    ref = np.asarray(ref, dtype=np.float64).ravel()
    if pred.shape != ref.shape:
        raise ValueError(f"shape mismatch {pred.shape} vs {ref.shape}")
    pc = pred - pred.mean()
    rc = ref - ref.mean()
    denom = np.sqrt(np.sum(pc * pc) * np.sum(rc * rc))
    if denom == 0.0:
        raise ValueError("correlation undefined for a constant field")
    return float(np.sum(pc * rc) / denom)


def high_correlation_time(series, threshold: float = 0.8,
                          times=None) -> float:
    """First time the correlation drops below ``threshold`` (the full
    duration if it never does).  ``times`` defaults to the series index."""
    series = np.asarray(series, dtype=np.float64)
    if series.size == 0:
        raise ValueError("empty correlation series")
    if times is None:
        times = np.arange(series.size, dtype=np.float64)
    times = np.asarray(times, dtype=np.float64)
    below = np.nonzero(series < threshold)[0]
    if below.size == 0:
        return float(times[-1])
    return float(times[below[0]])


# ---------------------------------------------------------------------------
# spectra
# ---------------------------------------------------------------------------

def _radial_bins(n: int):
    k1 = np.fft.fftfreq(n) * n
    kmag = np.hypot(k1[None, :], k1[:, None])
    bins = np.rint(kmag).astype(np.int64)
    return bins


def _binned_power(field_hat_sq: np.ndarray) -> np.ndarray:
    n = field_hat_sq.shape[0]
    bins = _radial_bins(n)
    return np.bincount(bins.ravel(), weights=field_hat_sq.ravel())


def scalar_spectrum(f: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Radially binned power of a square periodic field.

    Power convention: S(k) = |fft2(f)|^2 / N^2, so sum(S) = sum(f^2).
    """
    f = np.asarray(f, dtype=np.float64)
    n = f.shape[0]
    if f.shape != (n, n):
        raise ValueError("spectra require a square field")
    power = np.abs(np.fft.fft2(f)) ** 2 / f.size
    values = _binned_power(power)
    return np.arange(values.size, dtype=np.float64), values


def velocity_spectrum(u: np.ndarray, v: np.ndarray,
                      grid: GridSpec) -> tuple[np.ndarray, np.ndarray]:
    """Binned power of the center-interpolated velocity components."""
    if grid.nx != grid.ny:
        raise ValueError("spectra require a square grid")
    uc, vc = interpolate_to_centers(u, v, grid)
    k, su = scalar_spectrum(uc)
    _, sv = scalar_spectrum(vc)
    return k, su + sv


def energy_spectrum(u: np.ndarray, v: np.ndarray,
                    grid: GridSpec) -> tuple[np.ndarray, np.ndarray]:
    """Binned power of the kinetic energy field |u|^2 / 2 at centers."""
    if grid.nx != grid.ny:
        raise ValueError("spectra require a square grid")
    uc, vc = interpolate_to_centers(u, v, grid)
    return scalar_spectrum(0.5 * (uc * uc + vc * vc))


def spectrum_rows(k: np.ndarray, values: np.ndarray):
    """(bin_k, value, k5_scaled_value) rows for CSV export."""
    return [(float(kk), float(val), float(val * kk ** 5))
            for kk, val in zip(k, values)]


# ---------------------------------------------------------------------------
# conserved quantities
# ---------------------------------------------------------------------------

def swe_conserved(state: SWEState, depth: float, gravity: float) -> dict:
    grid = state.grid
    area = grid.dx ** 2
    h = depth + state.zeta
    uc, vc = interpolate_to_centers(state.u, state.v, grid)
    energy = area * np.sum(0.5 * gravity * state.zeta ** 2
                           + 0.5 * h * (uc * uc + vc * vc))
    return {
        "mass": float(area * np.sum(h)),
        "mom_u": float(np.sum(state.u)),
        "mom_v": float(np.sum(state.v)),
        "energy": float(energy),
    }


def ins_conserved(state: INSState) -> dict:
    grid = state.grid
    uc, vc = interpolate_to_centers(state.u, state.v, grid)
    return {
        "mass": float(state.u.mean() + state.v.mean()),
        "mom_u": float(np.sum(state.u)),
        "mom_v": float(np.sum(state.v)),
        "energy": float(0.5 * grid.dx ** 2 * np.sum(uc * uc + vc * vc)),
    }


def conservation_series(states, task: str, depth: float = 100.0,
                        gravity: float = 9.81) -> dict[str, np.ndarray]:
    rows = [(swe_conserved(s, depth, gravity) if task == "swe"
             else ins_conserved(s)) for s in states]
    return {key: np.array([r[key] for r in rows])
            for key in ("mass", "mom_u", "mom_v", "energy")}
