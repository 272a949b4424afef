"""Surrogate model assembly, normalization, parameter budgets, checkpoints.

A model maps the current state to a normalized next-state increment:
SWE surrogates predict the surface-elevation increment only (velocities
are recovered by the solver's algebraic update at rollout time); INS
surrogates predict velocity increments directly, through the constrained
vector head, or through a vertex potential whose curl enforces the
divergence-free condition.

Velocity normalization shares one (mean, std) pair across both
components with the mean pinned to zero: a nonzero shift would not
commute with rotations of the vector field and would break the exact
equivariance the architecture otherwise guarantees.
"""
from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from . import tensor as T
from .constraints import mass_correction, momentum_correction
from .grid import CLOSED, PERIODIC, GridSpec, INSState, SWEState, boundary_mask
from .layers import (CollocatedInputLayer, GroupConv, ScalarOutputLayer,
                     StaggeredInputLayer, VectorOutputLayer,
                     VertexOutputLayer, curl_tensor)
from .symmetry import SymmetryGroup, group_by_name
from .tensor import Tensor

SWE_CONSTRAINTS = ("none", "M")
INS_CONSTRAINTS = ("none", "rho_u", "M+rho_u")


@dataclass(frozen=True)
class ModelConfig:
    task: str                         # "swe" | "ins"
    group: str = "p1"                 # "p1" | "p4" | "p4m"
    constraints: str = "none"
    hidden: int = 4
    depth: int = 2
    kernel_size: int = 3
    seed: int = 0
    hidden_widths: tuple[int, ...] | None = None  # p1 budget matching
    collocated_input: bool = False    # negative control, breaks staggering

    def __post_init__(self):
        if self.task not in ("swe", "ins"):
            raise ValueError(f"unknown task {self.task!r}")
        allowed = SWE_CONSTRAINTS if self.task == "swe" else INS_CONSTRAINTS
        if self.constraints not in allowed:
            raise ValueError(
                f"task {self.task!r} admits constraints {allowed}, "
                f"got {self.constraints!r}"
            )
        group_by_name(self.group)
        if self.hidden < 1 or self.depth < 1:
            raise ValueError("hidden and depth must be >= 1")
        if self.kernel_size % 2 != 1:
            raise ValueError("kernel_size must be odd")
        if self.hidden_widths is not None:
            if self.group != "p1":
                raise ValueError("hidden_widths only applies to p1 models")
            if len(self.hidden_widths) != self.depth + 1:
                raise ValueError("hidden_widths needs depth + 1 entries")

    def widths(self) -> tuple[int, ...]:
        if self.hidden_widths is not None:
            return tuple(self.hidden_widths)
        return (self.hidden,) * (self.depth + 1)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["hidden_widths"] = (list(self.hidden_widths)
                              if self.hidden_widths is not None else None)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown model config key(s) {sorted(unknown)}")
        hw = d.get("hidden_widths")
        d = dict(d)
        if hw is not None:
            d["hidden_widths"] = tuple(int(x) for x in hw)
        return cls(**d)


@dataclass
class NormStats:
    """Per-field normalization; (mean, std) with shared velocity stats."""

    zeta: tuple[float, float] | None
    uv: tuple[float, float]

    def __post_init__(self):
        if self.zeta is not None and self.zeta[1] <= 0:
            raise ValueError("zeta std must be positive")
        if self.uv[1] <= 0:
            raise ValueError("velocity std must be positive")

    def to_dict(self) -> dict:
        return {"zeta": list(self.zeta) if self.zeta else None,
                "uv": list(self.uv)}

    @classmethod
    def from_dict(cls, d: dict) -> "NormStats":
        z = d.get("zeta")
        return cls(tuple(z) if z else None, tuple(d["uv"]))


def fit_norm_stats(trajectories, task: str) -> NormStats:
    """Stats over the training split; velocity components pooled into one
    (0, std) pair so the normalized vector still rotates correctly."""
    if not trajectories:
        raise ValueError("cannot fit normalization on an empty dataset")
    uv_sq = 0.0
    uv_n = 0
    for tr in trajectories:
        for name in ("u", "v"):
            arr = tr.fields[name]
            uv_sq += float(np.sum(arr * arr))
            uv_n += arr.size
    uv_std = float(np.sqrt(uv_sq / uv_n))
    if uv_std <= 0.0:
        raise ValueError("velocity fields have zero variance")
    zeta = None
    if task == "swe":
        vals = np.concatenate([tr.fields["zeta"].ravel() for tr in trajectories])
        std = float(vals.std())
        if std <= 0.0:
            raise ValueError("zeta field has zero variance")
        zeta = (float(vals.mean()), std)
    return NormStats(zeta, (0.0, uv_std))


class SurrogateModel:
    """Input lifting, hidden group convolutions, constrained output head."""

    def __init__(self, cfg: ModelConfig, grid: GridSpec, norm: NormStats):
        self.cfg = cfg
        self.grid = grid
        self.norm = norm
        self.group: SymmetryGroup = group_by_name(cfg.group)
        rng = np.random.default_rng(cfg.seed)
        bc = grid.bc
        widths = cfg.widths()
        center_channels = 2 if cfg.task == "swe" else 0
        input_cls = (CollocatedInputLayer if cfg.collocated_input
                     else StaggeredInputLayer)
        self.input_layer = input_cls(self.group, widths[0], center_channels,
                                     cfg.kernel_size, bc, rng, "input")
        self.hidden = [
            GroupConv(self.group, widths[i], widths[i + 1], cfg.kernel_size,
                      bc, rng, f"hidden{i}")
            for i in range(cfg.depth)
        ]
        last = widths[-1]
        self.head_scalar = None
        self.head_vector_conv = None
        self.vector_out = None
        self.head_vertex = None
        if cfg.task == "swe":
            self.head_scalar = ScalarOutputLayer(self.group, last,
                                                 cfg.kernel_size, bc, rng, "head")
        elif cfg.constraints == "M+rho_u":
            self.head_vertex = VertexOutputLayer(self.group, last, rng,
                                                 name="head")
        else:
            self.vector_out = VectorOutputLayer(self.group)
            self.head_vector_conv = GroupConv(self.group, last,
                                              self.vector_out.in_channels,
                                              cfg.kernel_size, bc, rng, "head")

    # -- parameters ---------------------------------------------------------

    def params(self) -> dict[str, Tensor]:
        out = dict(self.input_layer.params())
        for h in self.hidden:
            out.update(h.params())
        for head in (self.head_scalar, self.head_vector_conv, self.head_vertex):
            if head is not None:
                out.update(head.params())
        return out

    def parameter_count(self) -> int:
        return sum(p.size for p in self.params().values())

    def set_params(self, values: dict[str, np.ndarray]) -> None:
        params = self.params()
        missing = set(params) - set(values)
        if missing:
            raise ValueError(f"checkpoint missing parameters {sorted(missing)}")
        for name, p in params.items():
            arr = np.asarray(values[name], dtype=np.float64)
            if arr.shape != p.shape:
                raise ValueError(
                    f"parameter {name!r} has shape {arr.shape}, "
                    f"expected {p.shape}"
                )
            p.data = arr.copy()

    def snapshot_params(self) -> dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.params().items()}

    # -- normalization ------------------------------------------------------

    def normalize_swe(self, zeta, u, v):
        zm, zs = self.norm.zeta
        _, us = self.norm.uv
        return (zeta - zm) / zs, u / us, v / us

    def normalize_ins(self, u, v):
        _, us = self.norm.uv
        return u / us, v / us

    # -- forward passes (batched arrays in, normalized increments out) ------

    def forward_swe(self, zeta_n, mask, u_n, v_n) -> Tensor:
        centers = np.concatenate([zeta_n, mask], axis=1)
        r = T.gelu(self.input_layer.forward(centers, u_n, v_n))
        for conv in self.hidden:
            r = T.gelu(conv.forward(r))
        dz = self.head_scalar.forward(r)
        if self.cfg.constraints == "M":
            dz = mass_correction(dz)
        return dz

    def forward_ins(self, u_n, v_n) -> tuple[Tensor, Tensor]:
        r = T.gelu(self.input_layer.forward(None, u_n, v_n))
        for conv in self.hidden:
            r = T.gelu(conv.forward(r))
        if self.head_vertex is not None:
            a = self.head_vertex.forward(r)
            return curl_tensor(a, self.grid.dx)
        du, dv = self.vector_out.forward(self.head_vector_conv.forward(r))
        if self.cfg.constraints == "rho_u":
            du, dv = momentum_correction(du, dv)
        return du, dv

    # -- inference on states (tape-free) -------------------------------------

    def predict_zeta_next(self, state: SWEState) -> np.ndarray:
        zn, un, vn = self.normalize_swe(state.zeta, state.u, state.v)
        dz = self.forward_swe(zn[None, None], state.mask[None, None],
                              un[None, None], vn[None, None])
        return state.zeta + self.norm.zeta[1] * dz.data[0, 0]

    def step_ins(self, state: INSState) -> INSState:
        un, vn = self.normalize_ins(state.u, state.v)
        du, dv = self.forward_ins(un[None, None], vn[None, None])
        s = self.norm.uv[1]
        return INSState(state.grid, state.u + s * du.data[0, 0],
                        state.v + s * dv.data[0, 0])


def build_model(cfg: ModelConfig, grid: GridSpec | None = None,
                norm: NormStats | None = None) -> SurrogateModel:
    if grid is None:
        grid = (GridSpec(32, 32, 10_000.0, CLOSED) if cfg.task == "swe"
                else GridSpec(48, 48, 2 * np.pi / 48, PERIODIC))
    if (cfg.task == "swe") != (grid.bc == CLOSED):
        raise ValueError("SWE runs on closed grids, INS on periodic grids")
    if norm is None:
        norm = NormStats((0.0, 1.0) if cfg.task == "swe" else None, (0.0, 1.0))
    return SurrogateModel(cfg, grid, norm)


# ---------------------------------------------------------------------------
# parameter budget matching
# ---------------------------------------------------------------------------

def parameter_count(cfg: ModelConfig) -> int:
    """Analytic parameter count (validated against built models in tests)."""
    G = group_by_name(cfg.group).order
    k = cfg.kernel_size
    widths = cfg.widths()
    cc = 2 if cfg.task == "swe" else 0
    w0 = widths[0]
    if cfg.collocated_input:
        count = cc * k * k * w0 + 2 * k * k * w0 + w0
    else:
        count = cc * k * k * w0 + 2 * k * max(k - 1, 2) * w0 + w0
    for i in range(cfg.depth):
        count += widths[i] * widths[i + 1] * G * k * k + widths[i + 1]
    last = widths[-1]
    if cfg.task == "swe":
        count += last * G * k * k + 1
    elif cfg.constraints == "M+rho_u":
        count += last * 4
    else:
        vec_ch = 1 if G > 1 else 4
        count += vec_ch * last * G * k * k + vec_ch
    return count


def match_parameter_budget(cfg: ModelConfig, tol: float = 0.02,
                           constraints: str | None = None) -> ModelConfig:
    """p1 counterpart of a group-equivariant config: standard convolutions
    of the same kernel size with per-layer widths chosen to land within
    ``tol`` of the equivariant model's parameter count.

    ``constraints`` overrides the baseline's constraint set (the usual
    baseline is unconstrained p1).
    """
    if cfg.group == "p1":
        return cfg
    target = parameter_count(cfg)
    base = replace(cfg, group="p1", hidden_widths=None,
                   constraints=cfg.constraints if constraints is None
                   else constraints)
    nw = cfg.depth + 1
    G = group_by_name(cfg.group).order
    center = max(1, int(round(cfg.hidden * np.sqrt(G))))
    lo, hi = 1, max(4, 3 * center)
    best = None
    best_key = None
    span = range(lo, hi + 1)

    # depth+1 knobs around the sqrt(|G|) width scaling; among candidates
    # inside the tolerance prefer balanced widths (no starved bottleneck
    # layers), then the closest count
    def rec(widths):
        nonlocal best, best_key
        if len(widths) == nw:
            cand = replace(base, hidden_widths=tuple(widths))
            err = abs(parameter_count(cand) - target) / target
            key = (err > tol, -min(widths) if err <= tol else 0, err)
            if best_key is None or key < best_key:
                best, best_key = cand, key
            return
        for w in span:
            if abs(w - center) > center + 4 and len(widths) > 0:
                continue
            rec(widths + [w])
    rec([])
    err = abs(parameter_count(best) - target) / target
    if err > tol:
        raise ValueError(
            f"could not match parameter budget within {tol:.0%} "
            f"(best {err:.2%})"
        )
    return best


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

CHECKPOINT_MAGIC = b"SSCK"
CHECKPOINT_VERSION = 1


def save_checkpoint(model: SurrogateModel, path) -> None:
    params = model.params()
    header = {
        "model": model.cfg.to_dict(),
        "norm": model.norm.to_dict(),
        "grid": {"nx": model.grid.nx, "ny": model.grid.ny,
                 "dx": model.grid.dx, "bc": model.grid.bc},
        "params": [{"name": n, "shape": list(p.shape)}
                   for n, p in params.items()],
    }
    raw = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<HI", CHECKPOINT_VERSION, len(raw)))
        fh.write(raw)
        for _, p in params.items():
            fh.write(np.ascontiguousarray(p.data, dtype="<f8").tobytes())


def load_checkpoint(path) -> SurrogateModel:
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != CHECKPOINT_MAGIC:
        raise ValueError(f"{path} is not a surrogate checkpoint (bad magic)")
    version, hlen = struct.unpack_from("<HI", blob, 4)
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {version}")
    header = json.loads(blob[10:10 + hlen].decode("utf-8"))
    cfg = ModelConfig.from_dict(header["model"])
    g = header["grid"]
    grid = GridSpec(g["nx"], g["ny"], g["dx"], g["bc"])
    norm = NormStats.from_dict(header["norm"])
    model = SurrogateModel(cfg, grid, norm)
    off = 10 + hlen
    values = {}
    for spec in header["params"]:
        shape = tuple(spec["shape"])
        count = int(np.prod(shape)) if shape else 1
        arr = np.frombuffer(blob, dtype="<f8", count=count, offset=off)
        off += count * 8
        values[spec["name"]] = arr.reshape(shape)
    if off != len(blob):
        raise ValueError("checkpoint payload length mismatch")
    model.set_params(values)
    return model
