"""Hexahedral meshes, per-vertex tensor fields and boundary specifications."""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property
from typing import Mapping, Optional

import numpy as np

# Local faces of a VTK-ordered hexahedron, outward by the right-hand rule.
HEX_FACES = np.array(
    [
        [0, 3, 2, 1],
        [4, 5, 6, 7],
        [0, 1, 5, 4],
        [1, 2, 6, 5],
        [2, 3, 7, 6],
        [3, 0, 4, 7],
    ]
)

# Six tetrahedra sharing the 0-6 diagonal.
_HEX_TETS = np.array(
    [[0, 1, 2, 6], [0, 2, 3, 6], [0, 3, 7, 6], [0, 7, 4, 6], [0, 4, 5, 6], [0, 5, 1, 6]]
)


class MeshError(ValueError):
    pass


def _frozen(a, dtype):
    out = np.array(a, dtype=dtype, copy=True)
    out.setflags(write=False)
    return out


@dataclass(frozen=True)
class StructuredGrid:
    """Index structure of an axis-aligned grid mesh.

    Vertex ``(i, j, k)`` has id ``i + (nx + 1) * (j + (ny + 1) * k)``.
    Spacings are per-axis constants in the grid's local frame, so the
    structure survives rigid motions of the vertex positions.
    """

    shape: tuple[int, int, int]
    spacing: tuple[float, float, float]

    @property
    def vertex_shape(self) -> tuple[int, int, int]:
        return tuple(n + 1 for n in self.shape)

    def to_dict(self) -> dict:
        return {"shape": list(self.shape), "spacing": list(self.spacing)}

    @classmethod
    def from_dict(cls, d) -> "StructuredGrid":
        return cls(tuple(int(n) for n in d["shape"]), tuple(float(h) for h in d["spacing"]))


@dataclass(frozen=True)
class Mesh:
    vertices: np.ndarray
    cells: np.ndarray
    boundary_faces: np.ndarray
    grid: Optional[StructuredGrid] = None

    def __post_init__(self):
        object.__setattr__(self, "vertices", _frozen(self.vertices, float).reshape(-1, 3))
        object.__setattr__(self, "cells", _frozen(self.cells, np.int64).reshape(-1, 8))
        object.__setattr__(self, "boundary_faces", _frozen(self.boundary_faces, np.int64).reshape(-1, 4))
        self._validate()

    def _validate(self):
        n = self.n_vertices
        if self.cells.size and (self.cells.min() < 0 or self.cells.max() >= n):
            raise MeshError("cell references a vertex index outside [0, %d)" % n)
        if self.boundary_faces.size and (self.boundary_faces.min() < 0 or self.boundary_faces.max() >= n):
            raise MeshError("boundary face references a vertex index outside [0, %d)" % n)
        vol = self.cell_volumes()
        bad = np.flatnonzero(vol <= 0)
        if bad.size:
            raise MeshError(f"cell {int(bad[0])} is degenerate or inverted (volume {vol[bad[0]]:.3e})")
        if self.boundary_faces.size:
            owners = self._face_owner_counts()
            bad = np.flatnonzero(owners != 1)
            if bad.size:
                raise MeshError(
                    f"boundary face {int(bad[0])} belongs to {int(owners[bad[0]])} cells, expected exactly one"
                )

    @classmethod
    def from_cells(cls, vertices, cells, grid: Optional[StructuredGrid] = None) -> "Mesh":
        """Build a mesh, deriving outward boundary faces from the cells."""
        cells = np.asarray(cells, dtype=np.int64).reshape(-1, 8)
        faces = cells[:, HEX_FACES].reshape(-1, 4)
        keys = np.sort(faces, axis=1)
        _, inverse, counts = np.unique(keys, axis=0, return_inverse=True, return_counts=True)
        boundary = faces[counts[inverse.ravel()] == 1]
        return cls(vertices, cells, boundary, grid)

    @property
    def n_vertices(self) -> int:
        return len(self.vertices)

    @property
    def n_cells(self) -> int:
        return len(self.cells)

    def cell_volumes(self) -> np.ndarray:
        x = self.vertices[self.cells]  # (M, 8, 3)
        t = x[:, _HEX_TETS]  # (M, 6, 4, 3)
        edges = t[:, :, 1:] - t[:, :, :1]
        return np.linalg.det(edges).sum(axis=1) / 6.0

    def _face_owner_counts(self) -> np.ndarray:
        cell_faces = np.sort(self.cells[:, HEX_FACES].reshape(-1, 4), axis=1)
        bkeys = np.sort(self.boundary_faces, axis=1)
        allkeys = np.concatenate([cell_faces, bkeys])
        uniq, inverse, counts = np.unique(allkeys, axis=0, return_inverse=True, return_counts=True)
        inverse = inverse.ravel()
        # counts include the boundary face itself once
        return counts[inverse[len(cell_faces):]] - 1

    @cached_property
    def boundary_vertices(self) -> np.ndarray:
        return _frozen(np.unique(self.boundary_faces), np.int64)

    @cached_property
    def adjacency(self) -> tuple[np.ndarray, np.ndarray]:
        return build_adjacency(self)

    def neighbors(self, i: int) -> np.ndarray:
        indptr, indices = self.adjacency
        return indices[indptr[i]:indptr[i + 1]]

    @cached_property
    def normals(self) -> dict[int, np.ndarray]:
        return vertex_normals(self)


def build_adjacency(mesh: Mesh) -> tuple[np.ndarray, np.ndarray]:
    """Shared-cell neighbourhoods as CSR arrays ``(indptr, indices)``.

    ``j`` is a neighbour of ``i`` iff both appear in some cell and ``i != j``.
    Neighbour lists are sorted ascending.
    """
    n = mesh.n_vertices
    c = mesh.cells
    src = np.repeat(c, 8, axis=1).ravel()
    dst = np.tile(c, (1, 8)).ravel()
    keep = src != dst
    pairs = np.unique(src[keep] * n + dst[keep])
    src, dst = np.divmod(pairs, n)
    counts = np.bincount(src, minlength=n)
    isolated = np.flatnonzero(counts == 0)
    if isolated.size:
        raise MeshError(f"vertex {int(isolated[0])} has an empty neighbourhood")
    indptr = np.concatenate([[0], np.cumsum(counts)])
    return _frozen(indptr, np.int64), _frozen(dst, np.int64)


def face_area_vectors(mesh: Mesh) -> np.ndarray:
    """Area-weighted outward normals of the boundary quads."""
    p = mesh.vertices[mesh.boundary_faces]
    return 0.5 * np.cross(p[:, 2] - p[:, 0], p[:, 3] - p[:, 1])


def vertex_normals(mesh: Mesh) -> dict[int, np.ndarray]:
    """Unit outward normal per boundary vertex (area-weighted face average)."""
    acc = np.zeros((mesh.n_vertices, 3))
    av = face_area_vectors(mesh)
    for k in range(4):
        np.add.at(acc, mesh.boundary_faces[:, k], av)
    out = {}
    scale = np.abs(av).max() if len(av) else 1.0
    for i in mesh.boundary_vertices:
        nrm = np.linalg.norm(acc[i])
        if nrm <= 1e-12 * scale:
            raise MeshError(f"accumulated normal at vertex {int(i)} vanishes")
        out[int(i)] = acc[i] / nrm
    return out


@dataclass(frozen=True)
class TensorField:
    """Per-vertex tensor values of shape ``(n_vertices, 3**rank, channels)``."""

    rank: int
    values: np.ndarray

    def __post_init__(self):
        if self.rank not in (0, 1, 2):
            raise ValueError(f"rank must be 0, 1 or 2, got {self.rank}")
        v = np.array(self.values, dtype=float, copy=True)
        if v.ndim == 2 and self.rank == 0:
            v = v[:, None, :]
        if v.ndim != 3 or v.shape[1] != 3**self.rank or v.shape[2] < 1:
            raise ValueError(f"values must have shape (n, {3 ** self.rank}, channels), got {v.shape}")
        if not np.all(np.isfinite(v)):
            raise ValueError("field contains non-finite values")
        v.setflags(write=False)
        object.__setattr__(self, "values", v)

    @property
    def channels(self) -> int:
        return self.values.shape[2]

    @property
    def n_vertices(self) -> int:
        return self.values.shape[0]

    @classmethod
    def scalar(cls, values) -> "TensorField":
        v = np.asarray(values, dtype=float)
        if v.ndim == 1:
            v = v[:, None]
        return cls(0, v[:, None, :])

    @classmethod
    def vector(cls, values) -> "TensorField":
        v = np.asarray(values, dtype=float)
        if v.ndim == 2:
            v = v[:, :, None]
        return cls(1, v)

    def check_mesh(self, mesh: Mesh):
        if self.n_vertices != mesh.n_vertices:
            raise ValueError(f"field has {self.n_vertices} vertices, mesh has {mesh.n_vertices}")


def _as_rows(values, n, shape):
    v = np.asarray(values, dtype=float)
    return v.reshape((n,) + shape)


@dataclass(frozen=True)
class BoundarySpec:
    """Dirichlet and Neumann data for one field.

    Arrays are row-aligned with the index arrays: ``dirichlet_values`` is
    ``(n_dirichlet, 3**rank, channels)``, ``neumann_normals`` is
    ``(n_neumann, 3)``, ``neumann_values`` (directional derivatives) is
    ``(n_neumann, 3**rank, channels)`` and ``weights`` is ``(n_neumann,)``.
    """

    rank: int = 0
    channels: int = 1
    dirichlet_idx: np.ndarray = field(default_factory=lambda: np.zeros(0, np.int64))
    dirichlet_values: Optional[np.ndarray] = None
    neumann_idx: np.ndarray = field(default_factory=lambda: np.zeros(0, np.int64))
    neumann_normals: Optional[np.ndarray] = None
    neumann_values: Optional[np.ndarray] = None
    weights: Optional[np.ndarray] = None

    DEFAULT_WEIGHT = 10.0

    def __post_init__(self):
        comps = 3**self.rank
        di = _frozen(self.dirichlet_idx, np.int64).ravel()
        ni = _frozen(self.neumann_idx, np.int64).ravel()
        dv = self.dirichlet_values
        dv = np.zeros((len(di), comps, self.channels)) if dv is None else _as_rows(dv, len(di), (comps, self.channels))
        nn = np.zeros((len(ni), 3)) if self.neumann_normals is None else _as_rows(self.neumann_normals, len(ni), (3,))
        nv = self.neumann_values
        nv = np.zeros((len(ni), comps, self.channels)) if nv is None else _as_rows(nv, len(ni), (comps, self.channels))
        w = self.weights
        w = np.full(len(ni), self.DEFAULT_WEIGHT) if w is None else np.asarray(w, float).reshape(len(ni))
        for name, arr in (("dirichlet_idx", di), ("neumann_idx", ni)):
            if len(np.unique(arr)) != len(arr):
                raise ValueError(f"{name} contains duplicates")
        if len(ni) and np.any(np.abs(np.linalg.norm(nn, axis=1) - 1.0) > 1e-12):
            raise ValueError("Neumann normals must have unit norm")
        if np.any(w <= 0):
            raise ValueError("Neumann weights must be positive")
        if not (np.all(np.isfinite(dv)) and np.all(np.isfinite(nv))):
            raise ValueError("boundary values must be finite")
        object.__setattr__(self, "dirichlet_idx", di)
        object.__setattr__(self, "neumann_idx", ni)
        object.__setattr__(self, "dirichlet_values", _frozen(dv, float))
        object.__setattr__(self, "neumann_normals", _frozen(nn, float))
        object.__setattr__(self, "neumann_values", _frozen(nv, float))
        object.__setattr__(self, "weights", _frozen(w, float))

    @classmethod
    def from_maps(
        cls,
        dirichlet: Mapping[int, object] = None,
        neumann: Mapping[int, tuple] = None,
        weights: Mapping[int, float] = None,
        rank: int = 0,
        channels: int = 1,
    ) -> "BoundarySpec":
        """Build from ``{vertex: value}`` and ``{vertex: (normal, g)}`` maps."""
        dirichlet = dict(dirichlet or {})
        neumann = dict(neumann or {})
        weights = dict(weights or {})
        comps = 3**rank
        di = np.array(sorted(dirichlet), dtype=np.int64)
        dv = np.array([np.asarray(dirichlet[i], float).reshape(comps, channels) for i in di]).reshape(
            len(di), comps, channels
        )
        ni = np.array(sorted(neumann), dtype=np.int64)
        nn = np.array([np.asarray(neumann[i][0], float) for i in ni]).reshape(len(ni), 3)
        nv = np.array([np.asarray(neumann[i][1], float).reshape(comps, channels) for i in ni]).reshape(
            len(ni), comps, channels
        )
        w = np.array([weights.get(int(i), cls.DEFAULT_WEIGHT) for i in ni], dtype=float)
        return cls(rank, channels, di, dv, ni, nn, nv, w)

    def validate(self, mesh: Mesh):
        bset = set(mesh.boundary_vertices.tolist())
        for name, idx in (("Dirichlet", self.dirichlet_idx), ("Neumann", self.neumann_idx)):
            stray = [int(i) for i in idx if int(i) not in bset]
            if stray:
                raise ValueError(f"{name} vertex {stray[0]} is not a boundary vertex")

    def dirichlet_map(self) -> dict[int, np.ndarray]:
        return {int(i): v for i, v in zip(self.dirichlet_idx, self.dirichlet_values)}

    def neumann_map(self) -> dict[int, tuple[np.ndarray, np.ndarray]]:
        return {int(i): (n, g) for i, n, g in zip(self.neumann_idx, self.neumann_normals, self.neumann_values)}

    def with_weights(self, w) -> "BoundarySpec":
        w = np.broadcast_to(np.asarray(w, float), self.neumann_idx.shape)
        return BoundarySpec(
            self.rank, self.channels, self.dirichlet_idx, self.dirichlet_values,
            self.neumann_idx, self.neumann_normals, self.neumann_values, w,
        )

    def without_neumann(self) -> "BoundarySpec":
        return BoundarySpec(self.rank, self.channels, self.dirichlet_idx, self.dirichlet_values)


def inner_product(f: TensorField, g: TensorField) -> float:
    """Mesh-wide inner product summed over vertices, components and channels."""
    if f.rank != g.rank or f.values.shape != g.values.shape:
        raise ValueError(f"shape mismatch: {f.values.shape} vs {g.values.shape}")
    return float(np.dot(f.values.ravel(), g.values.ravel()))


def check_orthogonal(R, tol: float = 1e-12) -> np.ndarray:
    R = np.asarray(R, dtype=float)
    if R.shape != (3, 3) or np.abs(R @ R.T - np.eye(3)).max() > tol:
        raise ValueError("R is not orthogonal")
    return R


def transform_values(values: np.ndarray, rank: int, R: np.ndarray) -> np.ndarray:
    """Rotate per-vertex tensors of shape ``(n, 3**rank, c)``."""
    if rank == 0:
        return np.array(values, copy=True)
    if rank == 1:
        return np.einsum("ab,nbc->nac", R, values)
    n, _, c = values.shape
    t = values.reshape(n, 3, 3, c)
    return np.einsum("ab,nbdc,ed->naec", R, t, R).reshape(n, 9, c)


def transform_mesh(mesh: Mesh, R, t) -> Mesh:
    R = check_orthogonal(R)
    x = mesh.vertices @ R.T + np.asarray(t, float)
    cells, faces = mesh.cells, mesh.boundary_faces
    if np.linalg.det(R) < 0:
        # a reflection flips orientation: mirror the local vertex order
        cells = cells[:, [0, 3, 2, 1, 4, 7, 6, 5]]
        faces = faces[:, ::-1]
    return Mesh(x, cells, faces, mesh.grid)


def transform_bc(bc: BoundarySpec, R) -> BoundarySpec:
    R = check_orthogonal(R)
    return BoundarySpec(
        bc.rank,
        bc.channels,
        bc.dirichlet_idx,
        transform_values(bc.dirichlet_values, bc.rank, R),
        bc.neumann_idx,
        bc.neumann_normals @ R.T,
        transform_values(bc.neumann_values, bc.rank, R),
        bc.weights,
    )


def apply_isometry(field: TensorField, mesh: Mesh, R, t, bc: Optional[BoundarySpec] = None):
    """Apply ``x -> R x + t`` to a mesh and a field living on it.

    Returns ``(field, mesh)``, or ``(field, mesh, bc)`` when a boundary
    specification is passed (normals and tensor-valued data rotate with R).
    """
    R = check_orthogonal(R)
    field.check_mesh(mesh)
    out = (TensorField(field.rank, transform_values(field.values, field.rank, R)), transform_mesh(mesh, R, t))
    if bc is not None:
        return out + (transform_bc(bc, R),)
    return out


def random_isometry(rng: np.random.Generator, scale: float = 1.0):
    """Random element of O(3) (reflections included) and a translation."""
    q, r = np.linalg.qr(rng.standard_normal((3, 3)))
    q = q * np.sign(np.diag(r))
    if rng.random() < 0.5:
        q[:, 0] = -q[:, 0]
    return q, rng.normal(scale=scale, size=3)


def cuboid_mesh(shape, spacing=(1.0, 1.0, 1.0), origin=(0.0, 0.0, 0.0)) -> Mesh:
    """Axis-aligned structured hexahedral grid with ``shape`` cells per axis."""
    nx, ny, nz = (int(s) for s in shape)
    hx, hy, hz = (float(h) for h in spacing)
    ii, jj, kk = np.meshgrid(np.arange(nx + 1), np.arange(ny + 1), np.arange(nz + 1), indexing="ij")
    # vertex id = i + (nx+1) * (j + (ny+1) * k)
    order = lambda a: a.transpose(2, 1, 0).ravel()  # noqa: E731
    x = np.stack([order(ii) * hx, order(jj) * hy, order(kk) * hz], axis=1) + np.asarray(origin, float)

    def vid(i, j, k):
        return i + (nx + 1) * (j + (ny + 1) * k)

    ci, cj, ck = (a.transpose(2, 1, 0).ravel() for a in np.meshgrid(np.arange(nx), np.arange(ny), np.arange(nz), indexing="ij"))
    cells = np.stack(
        [
            vid(ci, cj, ck), vid(ci + 1, cj, ck), vid(ci + 1, cj + 1, ck), vid(ci, cj + 1, ck),
            vid(ci, cj, ck + 1), vid(ci + 1, cj, ck + 1), vid(ci + 1, cj + 1, ck + 1), vid(ci, cj + 1, ck + 1),
        ],
        axis=1,
    )
    return Mesh.from_cells(x, cells, StructuredGrid((nx, ny, nz), (hx, hy, hz)))
