"""Command-line entry point: data generation, symmetry verification,
training, and rollout with metric/spectra export.

Exit codes: 0 success (and all properties within tolerance), 1 property
violation, 2 configuration error, 3 I/O failure, 4 numerical abort.
The output directory may be overridden with the STAGFLOW_OUT environment
variable; everything else comes from flags and JSON configs (validated
strictly: unknown keys are rejected).
"""
from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

import numpy as np

from .data import (Dataset, DatasetConfig, generate_dataset, load_dataset,
                   write_field_stack)
from .grid import GridSpec, INSState, SWEState, boundary_mask
from .metrics import (energy_spectrum, high_correlation_time, spectrum_rows,
                      velocity_spectrum)
from .model import (ModelConfig, NormStats, SurrogateModel, build_model,
                    fit_norm_stats, load_checkpoint, save_checkpoint)
from .rollout import (DIRECT, HYBRID_SWE, aggregate_records, rollout,
                      write_aggregate_csv, write_metrics_csv)
from .solvers.ic import ins_ic_filtered_noise, swe_ic_square
from .solvers.ins import CFLError, INSParams, ins_step, make_grid
from .solvers.swe import CGDivergedError, SWEParams, swe_step
from .symmetry import (act_cell, act_ins_state, act_staggered, act_swe_state,
                       check_equivariance, group_by_name)
from .train import NaNLossError, TrainConfig, train, write_history_csv

EXIT_OK = 0
EXIT_VIOLATION = 1
EXIT_CONFIG = 2
EXIT_IO = 3
EXIT_NUMERIC = 4


class ConfigError(ValueError):
    pass


def _load_json(path) -> dict:
    try:
        with open(path) as fh:
            return json.load(fh)
    except OSError as exc:
        raise OSError(f"cannot read config {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"invalid JSON in {path}: {exc}") from exc


def _out_dir(arg: str | None, default: str) -> Path:
    path = Path(os.environ.get("STAGFLOW_OUT", arg or default))
    path.mkdir(parents=True, exist_ok=True)
    return path


# ---------------------------------------------------------------------------
# gen-data
# ---------------------------------------------------------------------------

def cmd_gen_data(args) -> int:
    cfg = DatasetConfig.from_dict(_load_json(args.config))
    out = _out_dir(args.out, "dataset")
    manifest = generate_dataset(cfg, out, jobs=args.jobs)
    print(f"wrote {len(manifest['files'])} trajectories to {out}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# verify-symmetry
# ---------------------------------------------------------------------------

def _verify_swe_solver(args):
    params = SWEParams()
    grid = params.grid(args.size)
    rng = np.random.default_rng(args.seed)
    state = swe_ic_square(rng, grid)
    for _ in range(5):
        state = swe_step(state, params)
    return check_equivariance(
        lambda s: swe_step(s, params), group_by_name(args.group),
        [state], act_swe_state,
        lambda g, s: act_swe_state(g, s), tol=args.tol)


def _verify_ins_solver(args):
    params = INSParams()
    grid = make_grid(args.size)
    rng = np.random.default_rng(args.seed)
    state = ins_ic_filtered_noise(rng, max(2, args.size // 6), grid)
    return check_equivariance(
        lambda s: ins_step(s, params), group_by_name(args.group),
        [state], act_ins_state,
        lambda g, s: act_ins_state(g, s), tol=args.tol)


def _random_state(task: str, grid: GridSpec, rng):
    if task == "swe":
        return SWEState(grid, rng.normal(size=grid.cell_shape),
                        rng.normal(size=grid.facex_shape),
                        rng.normal(size=grid.facey_shape),
                        boundary_mask(grid))
    return ins_ic_filtered_noise(rng, max(2, grid.nx // 6), grid)


def _verify_input_layer(args):
    from .layers import CollocatedInputLayer, StaggeredInputLayer
    task = args.task
    group = group_by_name(args.group)
    if task == "swe":
        grid = GridSpec(args.size, args.size, 1.0, "closed")
        centers = 2
    else:
        grid = make_grid(args.size)
        centers = 0
    rng = np.random.default_rng(args.seed)
    cls = CollocatedInputLayer if args.break_staggering else StaggeredInputLayer
    layer = cls(group, 3, centers, 3, grid.bc, rng, "input")
    layer.bias.data[:] = rng.normal(size=3)
    inputs = [_random_state(task, grid, rng) for _ in range(args.draws)]

    def apply(state):
        if task == "swe":
            cen = np.stack([state.zeta, state.mask])[None]
        else:
            cen = None
        out = layer.forward(cen, state.u[None, None], state.v[None, None])
        return out.data[0].reshape(3, group.order, grid.ny, grid.nx)

    def in_act(g, state):
        return act_swe_state(g, state) if task == "swe" else act_ins_state(g, state)

    from .symmetry import act_regular
    return check_equivariance(apply, group, inputs, in_act,
                              lambda g, r: act_regular(g, r, group), tol=args.tol)


def _verify_full_net(args):
    task = args.task
    cfg = ModelConfig(task=task, group=args.group,
                      constraints=args.constraints, hidden=2, depth=2,
                      seed=args.seed, collocated_input=args.break_staggering)
    if task == "swe":
        grid = GridSpec(args.size, args.size, 10_000.0, "closed")
    else:
        grid = make_grid(args.size)
    model = build_model(cfg, grid)
    rng = np.random.default_rng(args.seed)
    inputs = [_random_state(task, grid, rng) for _ in range(args.draws)]
    group = model.group

    if task == "swe":
        def apply(state):
            zn, un, vn = model.normalize_swe(state.zeta, state.u, state.v)
            dz = model.forward_swe(zn[None, None], state.mask[None, None],
                                   un[None, None], vn[None, None])
            return dz.data[0, 0]

        return check_equivariance(apply, group, inputs, act_swe_state,
                                  lambda g, f: act_cell(g, f), tol=args.tol)

    def apply(state):
        un, vn = model.normalize_ins(state.u, state.v)
        du, dv = model.forward_ins(un[None, None], vn[None, None])
        return du.data[0, 0], dv.data[0, 0]

    def out_act(g, pair):
        return act_staggered(g, pair[0], pair[1], grid)

    return check_equivariance(apply, group, inputs, act_ins_state, out_act,
                              tol=args.tol)


def cmd_verify_symmetry(args) -> int:
    targets = {
        "swe-solver": _verify_swe_solver,
        "ins-solver": _verify_ins_solver,
        "input-layer": _verify_input_layer,
        "full-net": _verify_full_net,
    }
    report = targets[args.target](args)
    print(f"target {args.target} (group {args.group}, tol {args.tol:g}):")
    for name, err in sorted(report.errors.items()):
        print(f"  {name:10s} {err:.3e}")
    status = "PASS" if report.passed else "FAIL"
    print(f"{status}: max relative error {report.max_error:.3e}"
          + ("" if report.passed else f" (worst element {report.worst})"))
    payload = report.as_dict()
    payload["target"] = args.target
    report_path = args.report or f"verify_{args.target}.json"
    with open(report_path, "w") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return EXIT_OK if report.passed else EXIT_VIOLATION


# ---------------------------------------------------------------------------
# train
# ---------------------------------------------------------------------------

def _parse_train_config(raw: dict):
    allowed = {"data_dir", "n_train", "n_val", "model", "train"}
    unknown = set(raw) - allowed
    if unknown:
        raise ConfigError(f"unknown key(s) {sorted(unknown)} in train config")
    for key in ("data_dir", "n_train", "n_val", "model"):
        if key not in raw:
            raise ConfigError(f"train config requires {key!r}")
    model_cfg = ModelConfig.from_dict(raw["model"])
    train_d = dict(raw.get("train", {}))
    unknown = set(train_d) - set(TrainConfig.__dataclass_fields__)
    if unknown:
        raise ConfigError(f"unknown key(s) {sorted(unknown)} in train section")
    train_cfg = TrainConfig(**train_d)
    return raw["data_dir"], int(raw["n_train"]), int(raw["n_val"]), model_cfg, train_cfg


def cmd_train(args) -> int:
    raw = _load_json(args.config)
    data_dir, n_train, n_val, model_cfg, train_cfg = _parse_train_config(raw)
    if args.mode:
        train_cfg = TrainConfig(**{**train_cfg.__dict__, "mode": args.mode})
    dataset = load_dataset(data_dir)
    if dataset.task != model_cfg.task:
        raise ConfigError(
            f"dataset task {dataset.task!r} does not match model task "
            f"{model_cfg.task!r}"
        )
    if n_train + n_val > len(dataset):
        raise ConfigError("n_train + n_val exceeds the dataset size")
    train_split = dataset.trajectories[:n_train]
    val_split = dataset.trajectories[n_train:n_train + n_val]
    norm = fit_norm_stats(train_split, dataset.task)
    model = build_model(model_cfg, dataset.grid, norm)
    out = _out_dir(args.out, "run")
    history, best_epoch = train(model, train_split, val_split, train_cfg)
    save_checkpoint(model, out / "checkpoint.ssck")
    write_history_csv(history, out / "history.csv")
    resolved = {"data_dir": str(data_dir), "n_train": n_train, "n_val": n_val,
                "model": model_cfg.to_dict(), "train": train_cfg.__dict__,
                "best_epoch": best_epoch}
    with open(out / "config.json", "w") as fh:
        json.dump(resolved, fh, indent=2, sort_keys=True)
        fh.write("\n")
    print(f"trained {len(history)} epochs (best {best_epoch}); "
          f"artifacts in {out}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# rollout
# ---------------------------------------------------------------------------

def _rollout_swe_params(dataset: Dataset) -> SWEParams:
    swe = dataset.manifest["config"]["swe"]
    return SWEParams(swe["gravity"], swe["depth"], swe["c_drag"], swe["a_h"],
                     swe["dx"], swe["dt"], swe["w_imp"])


def cmd_rollout(args) -> int:
    model = load_checkpoint(args.checkpoint)
    dataset = load_dataset(args.data)
    if dataset.task != model.cfg.task:
        raise ConfigError("checkpoint task does not match the dataset")
    if dataset.grid.cell_shape != model.grid.cell_shape:
        raise ConfigError(
            f"checkpoint grid {model.grid.cell_shape} incompatible with "
            f"dataset grid {dataset.grid.cell_shape}"
        )
    if model.cfg.task == "swe" and not args.hybrid:
        raise ConfigError("SWE checkpoints require --hybrid rollout")
    if model.cfg.task == "ins" and args.hybrid:
        raise ConfigError("--hybrid only applies to SWE checkpoints")
    if args.ics:
        indices = [int(x) for x in args.ics.split(",")]
    else:
        indices = list(range(len(dataset)))
    for i in indices:
        if not 0 <= i < len(dataset):
            raise ConfigError(f"IC index {i} out of range")
    out = _out_dir(args.out, "rollout")
    mode = HYBRID_SWE if args.hybrid else DIRECT
    params = _rollout_swe_params(dataset) if model.cfg.task == "swe" else None
    dt = (params.dt if params is not None
          else dataset.manifest["config"]["ins"]["ml_dt"])
    records = []
    summary = {"ics": [], "divergence_count": 0}
    for i in indices:
        traj = dataset.trajectories[i]
        reference = [traj.state(t) for t in range(traj.n_steps + 1)]
        rec = rollout(model, reference[0], args.steps, mode=mode,
                      params=params, dt=dt, reference=reference,
                      metadata={"ic_index": i})
        records.append(rec)
        write_metrics_csv(rec, out / f"metrics_ic{i:03d}.csv")
        _write_states(rec, out / f"rollout_ic{i:03d}.cgf")
        entry = {"ic_index": i, "diverged": rec.diverged,
                 "diverged_step": rec.diverged_step}
        if rec.corr and not rec.diverged:
            key = "zeta" if model.cfg.task == "swe" else "u"
            entry["high_correlation_time"] = high_correlation_time(
                rec.corr[key], threshold=args.threshold,
                times=rec.times[1:rec.corr[key].size + 1])
        summary["ics"].append(entry)
        if rec.diverged:
            summary["divergence_count"] += 1
        if model.cfg.task == "ins" and not rec.diverged:
            final = rec.states[-1]
            k, sv = velocity_spectrum(final.u, final.v, dataset.grid)
            _write_spectrum(spectrum_rows(k, sv),
                            out / f"spectrum_velocity_ic{i:03d}.csv")
            k, se = energy_spectrum(final.u, final.v, dataset.grid)
            _write_spectrum(spectrum_rows(k, se),
                            out / f"spectrum_energy_ic{i:03d}.csv")
    agg = aggregate_records(records)
    write_aggregate_csv(agg, out / "aggregate.csv")
    summary["n_records"] = agg["n_records"]
    with open(out / "summary.json", "w") as fh:
        json.dump(summary, fh, indent=2, sort_keys=True)
        fh.write("\n")
    print(f"rolled out {len(indices)} ICs for {args.steps} steps; "
          f"{summary['divergence_count']} diverged; results in {out}")
    return EXIT_OK


def _write_states(rec, path) -> None:
    if rec.task == "swe":
        fields = {
            "zeta": ("cell", np.stack([s.zeta for s in rec.states])),
            "u": ("facex", np.stack([s.u for s in rec.states])),
            "v": ("facey", np.stack([s.v for s in rec.states])),
        }
    else:
        fields = {
            "u": ("facex", np.stack([s.u for s in rec.states])),
            "v": ("facey", np.stack([s.v for s in rec.states])),
        }
    write_field_stack(path, fields)


def _write_spectrum(rows, path) -> None:
    import csv as _csv
    with open(path, "w", newline="") as fh:
        writer = _csv.writer(fh)
        writer.writerow(["bin_k", "value", "k5_scaled_value"])
        for row in rows:
            writer.writerow([repr(x) for x in row])


# ---------------------------------------------------------------------------
# parser / entry point
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="stagflow",
        description="staggered-grid PDE surrogates: data, training, "
                    "verification, rollout")
    sub = parser.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="generate a reference dataset")
    g.add_argument("--config", required=True)
    g.add_argument("--out", default=None)
    g.add_argument("--jobs", type=int, default=1)
    g.set_defaults(func=cmd_gen_data)

    v = sub.add_parser("verify-symmetry", help="check group equivariance")
    v.add_argument("--target", required=True,
                   choices=["swe-solver", "ins-solver", "input-layer",
                            "full-net"])
    v.add_argument("--task", default="ins", choices=["swe", "ins"])
    v.add_argument("--group", default="p4m", choices=["p4", "p4m"])
    v.add_argument("--constraints", default="none")
    v.add_argument("--size", type=int, default=None)
    v.add_argument("--tol", type=float, default=1e-10)
    v.add_argument("--seed", type=int, default=0)
    v.add_argument("--draws", type=int, default=3)
    v.add_argument("--break-staggering", action="store_true")
    v.add_argument("--report", default=None)
    v.set_defaults(func=cmd_verify_symmetry)

    t = sub.add_parser("train", help="train a surrogate")
    t.add_argument("--config", required=True)
    t.add_argument("--out", default=None)
    t.add_argument("--mode", default=None,
                   choices=["standard", "pushforward", "augmented"])
    t.set_defaults(func=cmd_train)

    r = sub.add_parser("rollout", help="autoregressive evaluation")
    r.add_argument("--checkpoint", required=True)
    r.add_argument("--data", required=True)
    r.add_argument("--steps", type=int, required=True)
    r.add_argument("--hybrid", action="store_true")
    r.add_argument("--ics", default=None)
    r.add_argument("--threshold", type=float, default=0.8)
    r.add_argument("--out", default=None)
    r.set_defaults(func=cmd_rollout)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.command == "verify-symmetry" and args.size is None:
        args.size = {"swe-solver": 16, "ins-solver": 32}.get(args.target, 16)
    try:
        return args.func(args)
    except (ConfigError, ValueError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except OSError as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (NaNLossError, CGDivergedError, CFLError, FloatingPointError) as exc:
        print(f"numerical abort: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
