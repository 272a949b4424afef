"""Supervised training of surrogate models.

One-step MSE on normalized increments with Adam, per-epoch validation,
early stopping on the best validation loss, and two optional modes: the
pushforward trick (loss after two autoregressive steps, gradients through
the second only) and symmetry-group data augmentation.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .data import Trajectory
from .grid import INSState, SWEState
from .model import SurrogateModel
from .symmetry import SymmetryGroup, act_cell, act_staggered
from .tensor import AdamState, Tape, adam_step


@dataclass
class TrainConfig:
    batch_size: int = 32
    lr: float = 1.0e-4
    patience: int = 10
    max_epochs: int = 200
    seed: int = 0
    mode: str = "standard"  # standard | pushforward | augmented

    def __post_init__(self):
        if self.batch_size < 1 or self.max_epochs < 1 or self.patience < 1:
            raise ValueError("training sizes must be positive")
        if self.mode not in ("standard", "pushforward", "augmented"):
            raise ValueError(f"unknown training mode {self.mode!r}")


class NaNLossError(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# batch assembly
# ---------------------------------------------------------------------------

def _swe_batch(model: SurrogateModel, states: list[SWEState],
               next_zetas: list[np.ndarray]):
    zm, zs = model.norm.zeta
    _, us = model.norm.uv
    zeta = np.stack([s.zeta for s in states])[:, None]
    mask = np.stack([s.mask for s in states])[:, None]
    u = np.stack([s.u for s in states])[:, None]
    v = np.stack([s.v for s in states])[:, None]
    target = (np.stack(next_zetas)[:, None] - zeta) / zs
    return ((zeta - zm) / zs, mask, u / us, v / us), target


def _ins_batch(model: SurrogateModel, states: list[INSState],
               next_states: list[INSState]):
    _, us = model.norm.uv
    u = np.stack([s.u for s in states])[:, None]
    v = np.stack([s.v for s in states])[:, None]
    tu = (np.stack([s.u for s in next_states])[:, None] - u) / us
    tv = (np.stack([s.v for s in next_states])[:, None] - v) / us
    return (u / us, v / us), (tu, tv)


def batch_loss(model: SurrogateModel, states, next_states) -> T.Tensor:
    """One-step MSE on normalized increments for a batch of state pairs."""
    if model.cfg.task == "swe":
        inputs, target = _swe_batch(model, states,
                                    [s.zeta for s in next_states])
        pred = model.forward_swe(*inputs)
        return T.mse_loss(pred, target)
    inputs, (tu, tv) = _ins_batch(model, states, next_states)
    du, dv = model.forward_ins(*inputs)
    return T.scale(T.add(T.mse_loss(du, tu), T.mse_loss(dv, tv)), 0.5)


def pushforward_batch(model: SurrogateModel, x_t, x_t1, x_t2) -> T.Tensor:
    """Two-step autoregressive loss with gradients through the second
    application only: the first prediction runs tape-free.

    ``x_t1`` documents the data layout (three consecutive snapshots); the
    loss compares the second prediction against ``x_t2``.
    """
    del x_t1
    if model.cfg.task != "ins":
        raise ValueError("pushforward training is defined for INS surrogates")
    assert T.active_tape() is not None, "pushforward_batch expects an open tape"
    tape = T._ACTIVE_TAPE
    T._ACTIVE_TAPE = None
    try:
        mid = [model.step_ins(s) for s in x_t]
    finally:
        T._ACTIVE_TAPE = tape
    return batch_loss(model, mid, x_t2)


def augment_pair(rng: np.random.Generator, group: SymmetryGroup,
                 input_state, target_state):
    """Apply one uniformly drawn group element to an input/target pair
    with the staggered-field actions."""
    g = group.elements[int(rng.integers(0, group.order))]
    if g.is_identity:
        return input_state, target_state

    def act(state):
        u, v = act_staggered(g, state.u, state.v, state.grid)
        if isinstance(state, SWEState):
            return SWEState(state.grid, act_cell(g, state.zeta), u, v,
                            act_cell(g, state.mask))
        return INSState(state.grid, u, v)

    return act(input_state), act(target_state)


# ---------------------------------------------------------------------------
# training loop
# ---------------------------------------------------------------------------

def _pairs(trajectories: list[Trajectory], horizon: int):
    out = []
    for ti, tr in enumerate(trajectories):
        for t in range(tr.n_steps - horizon + 1):
            out.append((ti, t))
    return out


def _epoch_eval(model, trajectories, pairs, batch_size) -> float:
    total, count = 0.0, 0
    for start in range(0, len(pairs), batch_size):
        chunk = pairs[start:start + batch_size]
        states = [trajectories[ti].state(t) for ti, t in chunk]
        nexts = [trajectories[ti].state(t + 1) for ti, t in chunk]
        loss = batch_loss(model, states, nexts)
        total += loss.item() * len(chunk)
        count += len(chunk)
    return total / max(count, 1)


def train(model: SurrogateModel, train_trajs: list[Trajectory],
          val_trajs: list[Trajectory], cfg: TrainConfig):
    """Returns (history, best_epoch); the model ends up holding the
    weights with the best validation loss."""
    rng = np.random.default_rng(cfg.seed)
    horizon = 2 if cfg.mode == "pushforward" else 1
    pairs = _pairs(train_trajs, horizon)
    val_pairs = _pairs(val_trajs, 1)
    if not pairs or not val_pairs:
        raise ValueError("training and validation splits must be nonempty")
    params = model.params()
    adam = AdamState()
    history = []
    best_val = np.inf
    best_epoch = -1
    best_params = model.snapshot_params()
    since_best = 0
    for epoch in range(cfg.max_epochs):
        order = rng.permutation(len(pairs))
        total, seen = 0.0, 0
        for start in range(0, len(pairs), cfg.batch_size):
            chunk = [pairs[i] for i in order[start:start + cfg.batch_size]]
            states = [train_trajs[ti].state(t) for ti, t in chunk]
            tape = Tape()
            with tape:
                if cfg.mode == "pushforward":
                    x2 = [train_trajs[ti].state(t + 2) for ti, t in chunk]
                    x1 = [train_trajs[ti].state(t + 1) for ti, t in chunk]
                    loss = pushforward_batch(model, states, x1, x2)
                else:
                    nexts = [train_trajs[ti].state(t + 1) for ti, t in chunk]
                    if cfg.mode == "augmented":
                        aug = [augment_pair(rng, model.group, s, n)
                               for s, n in zip(states, nexts)]
                        states = [a[0] for a in aug]
                        nexts = [a[1] for a in aug]
                    loss = batch_loss(model, states, nexts)
            value = loss.item()
            if not np.isfinite(value):
                raise NaNLossError(
                    f"non-finite loss at epoch {epoch}, batch {start // cfg.batch_size}"
                )
            tape.watch(*params.values())
            grads = tape.gradients(loss)
            named = {name: grads[p] for name, p in params.items()}
            adam_step(params, named, adam, lr=cfg.lr)
            total += value * len(chunk)
            seen += len(chunk)
        val = _epoch_eval(model, val_trajs, val_pairs, cfg.batch_size)
        history.append({"epoch": epoch, "train_loss": total / seen,
                        "val_loss": val})
        if val < best_val:
            best_val = val
            best_epoch = epoch
            best_params = model.snapshot_params()
            since_best = 0
        else:
            since_best += 1
            if since_best >= cfg.patience:
                break
    model.set_params(best_params)
    return history, best_epoch


def write_history_csv(history, path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["epoch", "train_loss", "val_loss"])
        for row in history:
            writer.writerow([row["epoch"], repr(row["train_loss"]),
                             repr(row["val_loss"])])
