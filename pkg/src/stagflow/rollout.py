"""Autoregressive rollout (direct and hybrid) plus record aggregation.

Hybrid mode mirrors the semi-implicit solver's algebra: the surrogate
supplies the next surface elevation and the velocities follow from the
interim explicit step plus the implicit surface-gradient update.  A
rollout that leaves the finite range is truncated and flagged; flagged
records never contribute NaNs to aggregates, which report divergence
counts separately.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from .grid import SWEState
from .metrics import conservation_series, nrmse, pearson
from .solvers.swe import SWEParams, interim_velocities, _grad_x, _grad_y

DIRECT = "direct"
HYBRID_SWE = "hybrid_swe"


@dataclass
class RolloutRecord:
    task: str
    times: np.ndarray
    states: list
    nrmse: dict[str, np.ndarray] = field(default_factory=dict)
    corr: dict[str, np.ndarray] = field(default_factory=dict)
    conserved: dict[str, np.ndarray] = field(default_factory=dict)
    diverged: bool = False
    diverged_step: int | None = None
    metadata: dict = field(default_factory=dict)

    @property
    def n_steps(self) -> int:
        return len(self.states) - 1


def _finite(state) -> bool:
    with np.errstate(invalid="ignore"):
        ok = np.all(np.isfinite(state.u)) and np.all(np.isfinite(state.v))
        if isinstance(state, SWEState):
            ok = ok and np.all(np.isfinite(state.zeta))
    return bool(ok)


def hybrid_swe_step(state: SWEState, zeta_next: np.ndarray,
                    params: SWEParams) -> SWEState:
    """Velocity recovery from a predicted surface elevation."""
    grid = state.grid
    h = params.depth + state.zeta
    if np.min(h) <= 0.0:
        raise ValueError("water depth d + zeta must stay positive")
    ustar, vstar = interim_velocities(state, params, h)
    gw = params.gravity * params.w_imp * params.dt
    u_new = ustar - gw * _grad_x(zeta_next, grid.dx)
    v_new = vstar - gw * _grad_y(zeta_next, grid.dx)
    return SWEState(grid, zeta_next, u_new, v_new, state.mask)


def rollout(model, ic, steps: int, mode: str = DIRECT,
            params: SWEParams | None = None, dt: float | None = None,
            reference=None, metadata: dict | None = None) -> RolloutRecord:
    """Feed predictions back autoregressively for ``steps`` steps.

    ``model`` is a SurrogateModel, or (duck-typed) any callable mapping a
    state to the next state (direct) / to the next surface elevation
    (hybrid); the solver-substitution oracle tests use that hook.
    """
    if mode not in (DIRECT, HYBRID_SWE):
        raise ValueError(f"unknown rollout mode {mode!r}")
    task = "swe" if isinstance(ic, SWEState) else "ins"
    if mode == HYBRID_SWE:
        if task != "swe":
            raise ValueError("hybrid rollout applies to SWE states")
        if params is None:
            raise ValueError("hybrid rollout needs SWEParams")
        if dt is None:
            dt = params.dt
    if dt is None:
        dt = 1.0

    if callable(model):
        advance = model
    elif mode == HYBRID_SWE:
        advance = model.predict_zeta_next
    else:
        advance = model.step_ins

    states = [ic]
    diverged = False
    diverged_step = None
    state = ic
    with np.errstate(over="ignore", invalid="ignore"):
        for step in range(1, steps + 1):
            if mode == HYBRID_SWE:
                zeta_next = advance(state)
                if not np.all(np.isfinite(zeta_next)):
                    diverged, diverged_step = True, step
                    break
                state = hybrid_swe_step(state, np.asarray(zeta_next), params)
            else:
                state = advance(state)
            if not _finite(state):
                diverged, diverged_step = True, step
                break
            states.append(state)

    times = np.arange(len(states)) * dt
    record = RolloutRecord(task, times, states, diverged=diverged,
                           diverged_step=diverged_step,
                           metadata=dict(metadata or {}))
    with np.errstate(over="ignore"):
        if task == "swe" and params is not None:
            record.conserved = conservation_series(states, "swe",
                                                   depth=params.depth,
                                                   gravity=params.gravity)
        else:
            record.conserved = conservation_series(states, task)
    if reference is not None:
        _attach_reference_metrics(record, reference)
    return record


def _field_arrays(state, task):
    if task == "swe":
        return {"zeta": state.zeta, "u": state.u, "v": state.v}
    return {"u": state.u, "v": state.v}


def _attach_reference_metrics(record: RolloutRecord, reference) -> None:
    task = record.task
    n = min(record.n_steps, len(reference) - 1)
    names = ("zeta", "u", "v") if task == "swe" else ("u", "v")
    record.nrmse = {f: np.empty(n) for f in names}
    record.corr = {f: np.empty(n) for f in names}
    for s in range(1, n + 1):
        pred = _field_arrays(record.states[s], task)
        ref = _field_arrays(reference[s], task)
        for f in names:
            record.nrmse[f][s - 1] = nrmse(pred[f], ref[f])
            record.corr[f][s - 1] = pearson(pred[f], ref[f])


def write_metrics_csv(record: RolloutRecord, path) -> None:
    names = sorted(record.nrmse)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        header = ["step", "time"]
        header += [f"nrmse_{f}" for f in names]
        header += [f"rho_{f}" for f in names]
        header += ["mass", "mom_u", "mom_v", "energy"]
        writer.writerow(header)
        for s in range(record.n_steps + 1):
            row = [s, repr(float(record.times[s]))]
            for f in names:
                row.append(repr(float(record.nrmse[f][s - 1])) if 1 <= s else "")
            for f in names:
                row.append(repr(float(record.corr[f][s - 1])) if 1 <= s else "")
            for key in ("mass", "mom_u", "mom_v", "energy"):
                row.append(repr(float(record.conserved[key][s])))
            writer.writerow(row)


def aggregate_records(records: list[RolloutRecord]) -> dict:
    """Mean and standard error across ICs of each metric series, over the
    records that completed; divergence counted separately."""
    completed = [r for r in records if not r.diverged]
    out = {
        "n_records": len(records),
        "n_diverged": sum(1 for r in records if r.diverged),
        "mean": {},
        "sem": {},
    }
    if not completed:
        return out
    names = sorted(completed[0].nrmse)
    n = min(r.nrmse[names[0]].size for r in completed) if names else 0
    for f in names:
        stacked = np.stack([r.nrmse[f][:n] for r in completed])
        out["mean"][f"nrmse_{f}"] = stacked.mean(axis=0)
        out["sem"][f"nrmse_{f}"] = _sem(stacked)
        corr = np.stack([r.corr[f][:n] for r in completed])
        out["mean"][f"rho_{f}"] = corr.mean(axis=0)
        out["sem"][f"rho_{f}"] = _sem(corr)
    return out


def _sem(stacked: np.ndarray) -> np.ndarray:
    if stacked.shape[0] < 2:
        return np.zeros(stacked.shape[1])
    return stacked.std(axis=0, ddof=1) / np.sqrt(stacked.shape[0])


def write_aggregate_csv(agg: dict, path) -> None:
    keys = sorted(agg["mean"])
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["step"] + [f"{k}_mean" for k in keys]
                        + [f"{k}_sem" for k in keys])
        if not keys:
            return
        n = agg["mean"][keys[0]].size
        for s in range(n):
            row = [s + 1]
            row += [repr(float(agg["mean"][k][s])) for k in keys]
            row += [repr(float(agg["sem"][k][s])) for k in keys]
            writer.writerow(row)
