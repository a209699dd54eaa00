"""Dataset generation: analytic polynomial gradients and a fine-grid heat oracle."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np

from penn import io
from penn.mesh import BoundarySpec, Mesh, TensorField, cuboid_mesh

log = logging.getLogger(__name__)


class CflViolation(ValueError):
    def __init__(self, dt, required):
        super().__init__(f"explicit step {dt:.6g} violates stability on the refined grid; need dt <= {required:.6g}")
        self.dt = dt
        self.required_dt = required


# --------------------------------------------------------------- meshes

def generate_cuboid_mesh(seed, cells_min=10, cells_max=20, extent=2.0, anisotropy=0.2) -> Mesh:
    """Origin-centred cuboid with per-axis cell counts in ``[cells_min, cells_max]``.

    Per-axis extents are ``extent * (1 +- anisotropy)``.
    """
    if cells_min > cells_max or cells_min < 1:
        raise ValueError("need 1 <= cells_min <= cells_max")
    rng = np.random.default_rng(seed)
    counts = rng.integers(cells_min, cells_max + 1, size=3)
    ext = extent * (1.0 + rng.uniform(-anisotropy, anisotropy, size=3))
    return cuboid_mesh(counts, ext / counts, -ext / 2)


def boundary_normals(mesh: Mesh):
    normals = mesh.normals
    idx = np.array(sorted(normals), dtype=np.int64)
    return idx, np.array([normals[i] for i in idx]).reshape(len(idx), 3)


# ------------------------------------------------------------ polynomials

@dataclass
class PolynomialField:
    """``sum c_ijk x^i y^j z^k`` with exact differentiation."""

    exponents: np.ndarray  # (T, 3) int
    coefficients: np.ndarray  # (T,)

    def __post_init__(self):
        self.exponents = np.asarray(self.exponents, dtype=np.int64).reshape(-1, 3)
        self.coefficients = np.asarray(self.coefficients, dtype=float).reshape(-1)
        if len(self.exponents) != len(self.coefficients):
            raise ValueError("one coefficient per exponent triple")
        if np.any(self.exponents < 0):
            raise ValueError("exponents must be non-negative")

    @classmethod
    def from_map(cls, coeffs: dict) -> "PolynomialField":
        keys = sorted(coeffs)
        return cls(np.array(keys, dtype=np.int64).reshape(-1, 3), [coeffs[k] for k in keys])

    @classmethod
    def random(cls, rng, degree=10, damping=3.0) -> "PolynomialField":
        """Coefficients ``U(-1, 1) * damping**-(i+j+k)`` for every term up to ``degree``."""
        exps = np.array(
            [(i, j, k) for i in range(degree + 1) for j in range(degree + 1 - i) for k in range(degree + 1 - i - j)],
            dtype=np.int64,
        )
        c = rng.uniform(-1.0, 1.0, size=len(exps)) * damping ** (-exps.sum(axis=1).astype(float))
        return cls(exps, c)

    @property
    def degree(self) -> int:
        return int(self.exponents.sum(axis=1).max()) if len(self.exponents) else 0

    def to_map(self) -> dict:
        return {tuple(int(v) for v in e): float(c) for e, c in zip(self.exponents, self.coefficients)}

    def __call__(self, x) -> np.ndarray:
        x = np.asarray(x, float).reshape(-1, 3)
        mono = np.prod(x[:, None, :] ** self.exponents[None, :, :], axis=2)
        return mono @ self.coefficients

    def derivative(self, axis: int) -> "PolynomialField":
        e = self.exponents.copy()
        c = self.coefficients * e[:, axis]
        keep = e[:, axis] > 0
        e[keep, axis] -= 1
        return PolynomialField(e[keep], c[keep])

    def gradient(self, x) -> np.ndarray:
        return np.stack([self.derivative(a)(x) for a in range(3)], axis=1)


@dataclass
class GradientSample:
    mesh: Mesh
    psi: TensorField
    grad: TensorField
    bc: BoundarySpec
    seed: Optional[int] = None


def gradient_sample_from_polynomial(mesh: Mesh, poly: PolynomialField, seed=None) -> GradientSample:
    x = mesh.vertices
    psi = poly(x)
    g = poly.gradient(x)
    idx, normals = boundary_normals(mesh)
    gn = np.einsum("nd,nd->n", g[idx], normals)
    bc = BoundarySpec(0, 1, neumann_idx=idx, neumann_normals=normals, neumann_values=gn[:, None, None])
    return GradientSample(mesh, TensorField.scalar(psi), TensorField.vector(g), bc, seed)


def generate_gradient_sample(seed, cells_min=10, cells_max=20, degree=10, damping=3.0) -> GradientSample:
    """Random polynomial on a random cuboid; Neumann data on every boundary vertex."""
    rng = np.random.default_rng(seed)
    mesh = generate_cuboid_mesh(rng.integers(2**31), cells_min, cells_max)
    poly = PolynomialField.random(rng, degree, damping)
    return gradient_sample_from_polynomial(mesh, poly, seed)


# ------------------------------------------------------------ heat oracle

@dataclass
class ProblemSpec:
    """Initial state, boundary data and coefficients of one time-evolution problem."""

    mesh: Mesh
    u0: TensorField
    bc: BoundarySpec
    horizon: float
    kappa: float = 1.0
    dt: Optional[float] = None  # model step; defaults to the horizon
    processor: str = "heat"

    def __post_init__(self):
        if self.dt is None:
            self.dt = self.horizon
        if not (self.dt > 0 and self.horizon > 0):
            raise ValueError("horizon and dt must be positive")
        self.u0.check_mesh(self.mesh)
        self.bc.validate(self.mesh)


@dataclass
class HeatSample:
    problem: ProblemSpec
    target: TensorField
    seed: Optional[int] = None

    @property
    def mesh(self):
        return self.problem.mesh


def cfl_limit(spacing, kappa) -> float:
    """Largest stable explicit step for the 7-point Laplacian: ``1 / (2 kappa sum 1/h_k^2)``."""
    return 1.0 / (2.0 * kappa * float(np.sum(1.0 / np.asarray(spacing, float) ** 2)))


def _grid_values(values, shape):
    nx, ny, nz = shape
    return np.asarray(values, float).reshape(nz + 1, ny + 1, nx + 1).transpose(2, 1, 0)


def _refine(a, r):
    """Trilinear interpolation of grid values onto an ``r``-times subdivided grid."""
    for ax in range(3):
        n = a.shape[ax] - 1
        t = np.arange(n * r + 1) / r
        lo = np.minimum(np.floor(t).astype(int), max(n - 1, 0))
        w = t - lo
        a0 = np.take(a, lo, axis=ax)
        a1 = np.take(a, np.minimum(lo + 1, n), axis=ax)
        shape = [1, 1, 1]
        shape[ax] = -1
        w = w.reshape(shape)
        a = (1 - w) * a0 + w * a1
    return a


def _laplacian(u, h):
    p = np.pad(u, 1, mode="reflect")  # ghost mirror: zero normal derivative
    out = np.zeros_like(u)
    for ax in range(3):
        sl_m = [slice(1, -1)] * 3
        sl_p = [slice(1, -1)] * 3
        sl_m[ax] = slice(0, -2)
        sl_p[ax] = slice(2, None)
        out += (p[tuple(sl_m)] + p[tuple(sl_p)] - 2 * u) / h[ax] ** 2
    return out


def heat_oracle_solve(spec: ProblemSpec, refine: int = 4, times=None, dt_fine=None) -> list:
    """Explicit finite differences for ``u_t = kappa lap u`` on a refined grid.

    Works in the grid's own index frame, so the result does not depend on
    how the mesh is placed in space. Dirichlet data are held fixed; every
    other boundary vertex is insulated. Snapshots are restricted to the
    coarse vertices by injection.
    """
    mesh, bc = spec.mesh, spec.bc
    if mesh.grid is None:
        raise ValueError("heat oracle needs a structured mesh")
    if spec.u0.rank != 0 or spec.u0.channels != 1:
        raise ValueError("heat oracle solves a single scalar channel")
    if len(bc.neumann_idx) and np.any(bc.neumann_values != 0):
        raise ValueError("heat oracle supports homogeneous Neumann data only")
    refine = int(refine)
    if refine < 1:
        raise ValueError("refine must be >= 1")
    shape = mesh.grid.shape
    h = np.asarray(mesh.grid.spacing, float) / refine
    limit = cfl_limit(h, spec.kappa)
    if dt_fine is not None and dt_fine > limit:
        raise CflViolation(dt_fine, limit)
    step_max = limit * 0.9 if dt_fine is None else dt_fine

    u0 = spec.u0.values[:, 0, 0].copy()
    mask = np.zeros(mesh.n_vertices)
    u0[bc.dirichlet_idx] = bc.dirichlet_values[:, 0, 0]
    mask[bc.dirichlet_idx] = 1.0
    u = _refine(_grid_values(u0, shape), refine)
    fixed = np.isclose(_refine(_grid_values(mask, shape), refine), 1.0)
    fixed_vals = u[fixed].copy()

    times = [spec.horizon] if times is None else sorted(float(t) for t in times)
    out, t_now = [], 0.0
    for t in times:
        span = t - t_now
        if span < 0:
            raise ValueError("times must be non-negative")
        n_steps = int(math.ceil(span / step_max - 1e-12)) if span > 0 else 0
        dt = span / n_steps if n_steps else 0.0
        for _ in range(n_steps):
            u = u + dt * spec.kappa * _laplacian(u, h)
            u[fixed] = fixed_vals
        t_now = t
        coarse = u[::refine, ::refine, ::refine].transpose(2, 1, 0).ravel()
        out.append(TensorField.scalar(coarse))
    return out


def heat_problem(mesh: Mesh, u0, dirichlet_idx, horizon, kappa=1.0, dirichlet_values=None) -> ProblemSpec:
    """Dirichlet on ``dirichlet_idx`` (values default to ``u0`` there); other boundary vertices insulated."""
    u0 = np.asarray(u0, float).reshape(mesh.n_vertices)
    didx = np.asarray(dirichlet_idx, dtype=np.int64)
    dv = u0[didx] if dirichlet_values is None else np.asarray(dirichlet_values, float).reshape(len(didx))
    u0 = u0.copy()
    u0[didx] = dv
    bidx, normals = boundary_normals(mesh)
    keep = ~np.isin(bidx, didx)
    bc = BoundarySpec(
        0, 1, didx, dv[:, None, None], bidx[keep], normals[keep], np.zeros((int(keep.sum()), 1, 1))
    )
    return ProblemSpec(mesh, TensorField.scalar(u0), bc, horizon, kappa)


def generate_heat_sample(seed, cells_min=4, cells_max=8, spacing=0.125, kappa=1.0, horizon=(0.25, 0.5),
                         refine=4, dt_fine=None) -> HeatSample:
    """Pseudo-2D plate (one cell thick) with fixed temperatures on the x-faces."""
    rng = np.random.default_rng(seed)
    nx, ny = rng.integers(cells_min, cells_max + 1, size=2)
    mesh = cuboid_mesh((nx, ny, 1), (spacing,) * 3)
    x = mesh.vertices
    lx, ly = nx * spacing, ny * spacing
    u0 = np.full(mesh.n_vertices, rng.uniform(-0.5, 0.5))
    for m in range(3):
        for n in range(3):
            u0 += rng.uniform(-1, 1) / (1 + m + n) * np.cos(m * np.pi * x[:, 0] / lx) * np.cos(n * np.pi * x[:, 1] / ly)
    didx = np.where(np.isclose(x[:, 0], 0.0) | np.isclose(x[:, 0], lx))[0]
    # constant temperature per face
    dv = np.where(np.isclose(x[didx, 0], 0.0), rng.uniform(-1, 1), rng.uniform(-1, 1))
    T = float(rng.uniform(*horizon)) if np.ndim(horizon) else float(horizon)
    problem = heat_problem(mesh, u0, didx, T, kappa, dv)
    target = heat_oracle_solve(problem, refine, dt_fine=dt_fine)[0]
    return HeatSample(problem, target, seed)


# -------------------------------------------------------------- datasets

SPLITS = ("train", "val", "test")


def _sample_seeds(seed, n):
    return [int(s) for s in np.random.default_rng(seed).integers(0, 2**31 - 1, size=n)]


def write_sample(sample, directory):
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    if isinstance(sample, GradientSample):
        io.save_mesh(sample.mesh, d / "mesh.json")
        io.write_fields_csv(d / "fields.csv", sample.mesh, {"psi": sample.psi, "grad": sample.grad})
        io.write_json(io.bc_to_dict(sample.bc), d / "bc.json")
        meta = {"kind": "gradient", "seed": sample.seed}
    else:
        p = sample.problem
        io.save_mesh(p.mesh, d / "mesh.json")
        io.write_fields_csv(d / "fields.csv", p.mesh, {"u0": p.u0, "uT": sample.target})
        io.write_json(dict(io.bc_to_dict(p.bc), horizon=p.horizon, kappa=p.kappa, dt=p.dt), d / "bc.json")
        meta = {"kind": "heat", "seed": sample.seed}
    return meta


def read_sample(directory):
    d = Path(directory)
    mesh = io.load_mesh(d / "mesh.json")
    _, fields = io.read_fields_csv(d / "fields.csv")
    bcd = io.read_json(d / "bc.json")
    bc = io.bc_from_dict(bcd)
    if "psi" in fields:
        return GradientSample(mesh, fields["psi"], fields["grad"], bc)
    problem = ProblemSpec(mesh, fields["u0"], bc, bcd["horizon"], bcd.get("kappa", 1.0), bcd.get("dt"))
    return HeatSample(problem, fields["uT"])


def make_dataset(kind, n_train, n_val, n_test, seed, out, **options) -> dict:
    """Write one directory per sample plus ``manifest.json`` (seeds and sha256 hashes)."""
    if kind not in ("gradient", "heat"):
        raise ValueError(f"unknown dataset kind {kind!r}")
    for n in (n_train, n_val, n_test):
        if n < 0:
            raise ValueError("sample counts must be non-negative")
    out = Path(out)
    counts = {"train": n_train, "val": n_val, "test": n_test}
    seeds = _sample_seeds(seed, sum(counts.values()))
    if kind == "gradient":
        opts = {"cells_min": 10, "cells_max": 20, "degree": 10, "damping": 3.0}
        opts.update({k: v for k, v in options.items() if v is not None})
        make = lambda s: generate_gradient_sample(s, **opts)  # noqa: E731
    else:
        opts = {"cells_min": 4, "cells_max": 8, "spacing": 0.125, "kappa": 1.0, "horizon": (0.25, 0.5), "refine": 4,
                "dt_fine": None}
        opts.update({k: v for k, v in options.items() if v is not None})
        make = lambda s: generate_heat_sample(s, **opts)  # noqa: E731
    manifest = {"kind": kind, "seed": int(seed), "counts": counts, "options": _jsonable(opts), "samples": []}
    k = 0
    for split in SPLITS:
        for i in range(counts[split]):
            rel = f"{split}/{i:04d}"
            s = seeds[k]
            k += 1
            write_sample(make(s), out / rel)
            hashes = {name: io.sha256_file(out / rel / name) for name in ("mesh.json", "fields.csv", "bc.json")}
            manifest["samples"].append({"split": split, "index": i, "seed": s, "path": rel, "sha256": hashes})
    io.write_json(manifest, out / "manifest.json")
    log.info("dataset kind=%s samples=%d out=%s", kind, k, out)
    return manifest


def _jsonable(d):
    return {k: (list(v) if isinstance(v, tuple) else v) for k, v in d.items()}


def load_dataset(directory, split=None) -> list:
    directory = Path(directory)
    manifest = io.read_json(directory / "manifest.json")
    out = []
    for entry in manifest["samples"]:
        if split is not None and entry["split"] != split:
            continue
        s = read_sample(directory / entry["path"])
        s.seed = entry["seed"]
        out.append(s)
    return out


def dataset_kind(directory) -> str:
    return io.read_json(Path(directory) / "manifest.json")["kind"]
