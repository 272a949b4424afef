"""Dataset generation, the CGF1 field-stack file format, and loading.

CGF1 layout (little-endian):

    magic   4 bytes  b"CGF1"
    version u16      (currently 1)
    nfields u16
    nsteps  u32      number of stored snapshots
    per field: name_len u16, utf-8 name, kind u8, rows u32, cols u32
    payload: for each field in order, nsteps * rows * cols float64,
             row-major (field-major, then timesteps)

Round-trips are lossless; the manifest JSON records seeds, parameters and
the exact file list.
"""
from __future__ import annotations

import json
import struct
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .grid import CLOSED, PERIODIC, GridSpec, INSState, SWEState, boundary_mask, divergence
from .solvers.ic import ins_ic_filtered_noise, swe_ic_generalization, swe_ic_square
from .solvers.ins import INSParams, ins_step, make_grid
from .solvers.swe import SWEParams, swe_step
from .grid import face_average_coarsen

MAGIC = b"CGF1"
VERSION = 1
KINDS = {"cell": 0, "facex": 1, "facey": 2, "vertex": 3}
KIND_NAMES = {v: k for k, v in KINDS.items()}


class FormatError(ValueError):
    pass


def write_field_stack(path, fields: dict[str, tuple[str, np.ndarray]]) -> None:
    """``fields`` maps name -> (kind, array of shape [nsteps, rows, cols])."""
    names = list(fields)
    nsteps = {fields[n][1].shape[0] for n in names}
    if len(nsteps) != 1:
        raise FormatError("all fields must share the same number of steps")
    nsteps = nsteps.pop()
    path = Path(path)
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<HHI", VERSION, len(names), nsteps))
        for name in names:
            kind, arr = fields[name]
            if kind not in KINDS:
                raise FormatError(f"unknown field kind {kind!r}")
            raw = name.encode("utf-8")
            fh.write(struct.pack("<H", len(raw)))
            fh.write(raw)
            fh.write(struct.pack("<BII", KINDS[kind], arr.shape[1], arr.shape[2]))
        for name in names:
            arr = np.ascontiguousarray(fields[name][1], dtype="<f8")
            fh.write(arr.tobytes())


def read_field_stack(path) -> dict[str, tuple[str, np.ndarray]]:
    path = Path(path)
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != MAGIC:
        raise FormatError(f"{path} is not a CGF1 field stack (bad magic)")
    version, nfields, nsteps = struct.unpack_from("<HHI", blob, 4)
    if version != VERSION:
        raise FormatError(f"unsupported CGF1 version {version}")
    off = 12
    headers = []
    for _ in range(nfields):
        (nlen,) = struct.unpack_from("<H", blob, off)
        off += 2
        name = blob[off:off + nlen].decode("utf-8")
        off += nlen
        kind, rows, cols = struct.unpack_from("<BII", blob, off)
        off += 9
        headers.append((name, kind, rows, cols))
    out = {}
    for name, kind, rows, cols in headers:
        count = nsteps * rows * cols
        arr = np.frombuffer(blob, dtype="<f8", count=count, offset=off).copy()
        off += count * 8
        out[name] = (KIND_NAMES[kind], arr.reshape(nsteps, rows, cols))
    if off != len(blob):
        raise FormatError(f"{path}: payload length mismatch")
    return out


# ---------------------------------------------------------------------------
# generation configs
# ---------------------------------------------------------------------------

def _reject_unknown(d: dict, allowed, where: str) -> None:
    unknown = set(d) - set(allowed)
    if unknown:
        raise ValueError(f"unknown key(s) {sorted(unknown)} in {where}")


@dataclass
class SWEDataConfig:
    grid_n: int = 32
    dx: float = 10_000.0
    dt: float = 300.0
    gravity: float = 9.81
    depth: float = 100.0
    c_drag: float = 1.0e-3
    a_h: float = 0.0
    w_imp: float = 0.5
    ic: str = "square"   # square | one_rect | two_rects | overlapping_rects

    def params(self) -> SWEParams:
        return SWEParams(self.gravity, self.depth, self.c_drag, self.a_h,
                         self.dx, self.dt, self.w_imp)

    def grid(self) -> GridSpec:
        return GridSpec(self.grid_n, self.grid_n, self.dx, CLOSED)


@dataclass
class INSDataConfig:
    coarse_n: int = 48
    factor: int = 2
    substeps: int = 64       # fine steps per saved coarse step
    burn_in: int = 24        # coarse steps discarded
    peak_k: int = 10
    mu: float = 1.0e-3
    length: float = 2.0 * np.pi
    ml_dt: float = 0.8375

    def params(self) -> INSParams:
        return INSParams(mu=self.mu, dt=self.ml_dt / self.substeps)

    def fine_grid(self) -> GridSpec:
        return make_grid(self.coarse_n * self.factor, self.length)

    def coarse_grid(self) -> GridSpec:
        return make_grid(self.coarse_n, self.length)


@dataclass
class DatasetConfig:
    task: str
    n_trajectories: int
    steps: int
    seed: int = 0
    swe: SWEDataConfig = field(default_factory=SWEDataConfig)
    ins: INSDataConfig = field(default_factory=INSDataConfig)

    @classmethod
    def from_dict(cls, d: dict) -> "DatasetConfig":
        _reject_unknown(d, ("task", "n_trajectories", "steps", "seed",
                            "swe", "ins"), "dataset config")
        for key in ("task", "n_trajectories", "steps"):
            if key not in d:
                raise ValueError(f"dataset config requires {key!r}")
        task = d["task"]
        if task not in ("swe", "ins"):
            raise ValueError(f"unknown task {task!r}")
        swe_d = dict(d.get("swe", {}))
        _reject_unknown(swe_d, SWEDataConfig.__dataclass_fields__, "swe section")
        ins_d = dict(d.get("ins", {}))
        _reject_unknown(ins_d, INSDataConfig.__dataclass_fields__, "ins section")
        cfg = cls(task=task, n_trajectories=int(d["n_trajectories"]),
                  steps=int(d["steps"]), seed=int(d.get("seed", 0)),
                  swe=SWEDataConfig(**swe_d), ins=INSDataConfig(**ins_d))
        if cfg.n_trajectories < 1 or cfg.steps < 1:
            raise ValueError("n_trajectories and steps must be >= 1")
        return cfg

    def to_dict(self) -> dict:
        return {"task": self.task, "n_trajectories": self.n_trajectories,
                "steps": self.steps, "seed": self.seed,
                "swe": asdict(self.swe), "ins": asdict(self.ins)}


def _swe_trajectory(cfg: DatasetConfig, seed: int):
    sc = cfg.swe
    grid, params = sc.grid(), sc.params()
    rng = np.random.default_rng(seed)
    if sc.ic == "square":
        state = swe_ic_square(rng, grid)
    else:
        state = swe_ic_generalization(rng, sc.ic, grid)
    zetas = [state.zeta]
    us = [state.u]
    vs = [state.v]
    for _ in range(cfg.steps):
        state = swe_step(state, params)
        zetas.append(state.zeta)
        us.append(state.u)
        vs.append(state.v)
    return {
        "zeta": ("cell", np.stack(zetas)),
        "u": ("facex", np.stack(us)),
        "v": ("facey", np.stack(vs)),
    }


def _ins_trajectory(cfg: DatasetConfig, seed: int):
    ic = cfg.ins
    fine, params = ic.fine_grid(), ic.params()
    rng = np.random.default_rng(seed)
    state = ins_ic_filtered_noise(rng, ic.peak_k, fine)
    for _ in range(ic.burn_in * ic.substeps):
        state = ins_step(state, params)
    coarse = face_average_coarsen(state, ic.factor)
    us = [coarse.u]
    vs = [coarse.v]
    for _ in range(cfg.steps):
        for _ in range(ic.substeps):
            state = ins_step(state, params)
        coarse = face_average_coarsen(state, ic.factor)
        us.append(coarse.u)
        vs.append(coarse.v)
    return {"u": ("facex", np.stack(us)), "v": ("facey", np.stack(vs))}


def _one_trajectory(args):
    cfg_dict, index = args
    cfg = DatasetConfig.from_dict(cfg_dict)
    seed = cfg.seed + index
    fields = (_swe_trajectory(cfg, seed) if cfg.task == "swe"
              else _ins_trajectory(cfg, seed))
    return index, seed, fields


def generate_dataset(cfg: DatasetConfig, out_dir, jobs: int = 1) -> dict:
    """Run the reference solver per trajectory and write CGF1 files plus a
    manifest; per-trajectory seeds are ``cfg.seed + index``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    tasks = [(cfg.to_dict(), i) for i in range(cfg.n_trajectories)]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(_one_trajectory, tasks))
        results.sort(key=lambda r: r[0])
    else:
        results = [_one_trajectory(t) for t in tasks]
    files = []
    seeds = []
    for index, seed, fields in results:
        fname = f"traj_{index:04d}.cgf"
        write_field_stack(out / fname, fields)
        files.append(fname)
        seeds.append(seed)
    manifest = {
        "format": "CGF1",
        "format_version": VERSION,
        "config": cfg.to_dict(),
        "seeds": seeds,
        "files": files,
    }
    with open(out / "manifest.json", "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return manifest


@dataclass
class Trajectory:
    """One loaded trajectory: arrays indexed [snapshot, ...]."""

    task: str
    grid: GridSpec
    fields: dict[str, np.ndarray]

    @property
    def n_steps(self) -> int:
        return next(iter(self.fields.values())).shape[0] - 1

    def swe_state(self, t: int) -> SWEState:
        return SWEState(self.grid, self.fields["zeta"][t], self.fields["u"][t],
                        self.fields["v"][t], boundary_mask(self.grid))

    def ins_state(self, t: int) -> INSState:
        return INSState(self.grid, self.fields["u"][t], self.fields["v"][t])

    def state(self, t: int):
        return self.swe_state(t) if self.task == "swe" else self.ins_state(t)


@dataclass
class Dataset:
    task: str
    grid: GridSpec
    trajectories: list[Trajectory]
    manifest: dict

    def __len__(self) -> int:
        return len(self.trajectories)


def load_dataset(data_dir) -> Dataset:
    data_dir = Path(data_dir)
    try:
        with open(data_dir / "manifest.json") as fh:
            manifest = json.load(fh)
    except OSError as exc:
        raise FileNotFoundError(f"no manifest.json under {data_dir}: {exc}")
    cfg = DatasetConfig.from_dict(manifest["config"])
    task = cfg.task
    if task == "swe":
        grid = cfg.swe.grid()
    else:
        grid = cfg.ins.coarse_grid()
    trajs = []
    for fname in manifest["files"]:
        raw = read_field_stack(data_dir / fname)
        fields = {name: arr for name, (_, arr) in raw.items()}
        trajs.append(Trajectory(task, grid, fields))
    return Dataset(task, grid, trajs, manifest)
