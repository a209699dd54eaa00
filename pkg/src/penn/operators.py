"""IsoGCN spatial operators with the Neumann (dual-frame) boundary term.

The gradient at vertex ``i`` is reconstructed from normalised neighbour
directions ``e_ij = (x_j - x_i) / |x_j - x_i|``::

    grad_i = M_i^-1 [ sum_j (psi_j - psi_i) / |x_j - x_i| e_ij + w_i n_i g_i ]
    M_i    = sum_j e_ij (x) e_ij + w_i n_i (x) n_i

with ``w_i = 0`` (plain IsoGCN) away from the Neumann set. Everything is
linear in ``psi``, so each operator is stored as a sparse matrix plus a
per-vertex offset direction ``M_i^-1 w_i n_i`` that multiplies ``g_i``.
Channel mixing is deliberately absent here; see ``penn.nn``.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Optional

import numpy as np
import scipy.sparse as sp

from penn import autodiff as ad
from penn.mesh import BoundarySpec, Mesh, TensorField

log = logging.getLogger(__name__)

COND_LIMIT = 1e10
TIKHONOV = 1e-8
SINGULAR_LIMIT = 1e12


class SingularMomentError(ValueError):
    pass


@dataclass(frozen=True)
class MomentMatrix:
    matrices: np.ndarray  # (n, 3, 3)
    inverses: np.ndarray  # (n, 3, 3)
    condition: np.ndarray  # (n,) condition number of the inverted matrix
    regularized: np.ndarray  # (n,) bool, Tikhonov fallback used


def _edges(mesh: Mesh):
    indptr, nbr = mesh.adjacency
    src = np.repeat(np.arange(mesh.n_vertices), np.diff(indptr))
    d = mesh.vertices[nbr] - mesh.vertices[src]
    r = np.linalg.norm(d, axis=1)
    return src, nbr, d / r[:, None], r


def moment_matrices(mesh: Mesh, neumann_idx=(), normals=None, weights=None) -> MomentMatrix:
    src, _, e, _ = _edges(mesh)
    M = np.zeros((mesh.n_vertices, 3, 3))
    np.add.at(M, src, e[:, :, None] * e[:, None, :])
    neumann_idx = np.asarray(neumann_idx, dtype=np.int64)
    if len(neumann_idx):
        n = np.asarray(normals, float)
        w = np.asarray(weights, float)
        M[neumann_idx] += w[:, None, None] * n[:, :, None] * n[:, None, :]
    return _invert(M)


def _invert(M: np.ndarray) -> MomentMatrix:
    s = np.linalg.svd(M, compute_uv=False)
    with np.errstate(divide="ignore", invalid="ignore"):
        cond = np.where(s[:, -1] > 0, s[:, 0] / s[:, -1], np.inf)
    reg = cond > COND_LIMIT
    Mr = M.copy()
    if np.any(reg):
        eps = TIKHONOV * np.trace(M[reg], axis1=1, axis2=2) / 3.0
        Mr[reg] += eps[:, None, None] * np.eye(3)
        s_r = np.linalg.svd(Mr[reg], compute_uv=False)
        with np.errstate(divide="ignore", invalid="ignore"):
            cond_r = np.where(s_r[:, -1] > 0, s_r[:, 0] / s_r[:, -1], np.inf)
        cond = cond.copy()
        cond[reg] = cond_r
        bad = np.flatnonzero(~(cond < SINGULAR_LIMIT))
        if bad.size:
            raise SingularMomentError(f"moment matrix at vertex {int(bad[0])} is singular (condition {cond[bad[0]]:.3e})")
        log.info(
            "moment_matrix regularized=%d max_condition=%.3e vertices=%s",
            int(reg.sum()), float(cond.max()), np.flatnonzero(reg)[:10].tolist(),
        )
    return MomentMatrix(M, np.linalg.inv(Mr), cond, reg)


class GradientOperator:
    """Sparse gradient reconstruction for one mesh and one Neumann set.

    ``matrix`` is ``(3n, n)`` with rows ordered ``3 * vertex + axis``;
    ``offset`` is ``(n_neumann, 3)``, the vectors ``M_i^-1 w_i n_i``;
    ``div_matrix`` is ``(n, 3n)`` and takes the trace of the gradient of
    a vertex-major vector field.
    """

    @classmethod
    def from_bc(cls, mesh: Mesh, bc: Optional[BoundarySpec], normalize=True) -> "GradientOperator":
        if bc is None or len(bc.neumann_idx) == 0:
            return cls(mesh, normalize=normalize)
        return cls(mesh, bc.neumann_idx, bc.neumann_normals, bc.weights, normalize=normalize)

    def __init__(self, mesh: Mesh, neumann_idx=(), normals=None, weights=None, normalize=True):
        self.n = mesh.n_vertices
        self.normalize = normalize
        self.neumann_idx = np.asarray(neumann_idx, dtype=np.int64).ravel()
        if len(self.neumann_idx):
            weights = np.asarray(weights, float).ravel()
            if np.any(weights < 0):
                raise ValueError("Neumann weights must be non-negative")
        self.moments = moment_matrices(mesh, self.neumann_idx, normals, weights)
        # normalize=False drops M^-1: the un-normalised IsoGCN baseline
        Minv = self.moments.inverses if normalize else np.broadcast_to(np.eye(3), (self.n, 3, 3))
        src, dst, e, r = _edges(mesh)
        coef = np.einsum("eab,eb->ea", Minv[src], e) / r[:, None]  # (E, 3)
        diag = np.zeros((self.n, 3))
        np.add.at(diag, src, -coef)
        rows = np.concatenate([(3 * src[:, None] + np.arange(3)).ravel(), (3 * np.arange(self.n)[:, None] + np.arange(3)).ravel()])
        cols = np.concatenate([np.repeat(dst, 3), np.repeat(np.arange(self.n), 3)])
        vals = np.concatenate([coef.ravel(), diag.ravel()])
        self.matrix = sp.csr_matrix((vals, (rows, cols)), shape=(3 * self.n, self.n))
        self.matrix.sum_duplicates()
        # D[i, 3j + c] = G[3i + c, j]
        coo = self.matrix.tocoo()
        vtx, comp = np.divmod(coo.row, 3)
        self.div_matrix = sp.csr_matrix((coo.data, (vtx, 3 * coo.col + comp)), shape=(self.n, 3 * self.n))
        self._matrix_t = self.matrix.T.tocsr()
        self._div_matrix_t = self.div_matrix.T.tocsr()
        if len(self.neumann_idx):
            nrm = np.asarray(normals, float).reshape(-1, 3)
            self.offset = np.einsum("nab,nb->na", Minv[self.neumann_idx], weights[:, None] * nrm)
        else:
            self.offset = np.zeros((0, 3))

    @property
    def has_neumann(self) -> bool:
        return len(self.neumann_idx) > 0

    def gradient(self, x, g=None):
        """Componentwise gradient of ``x`` with shape ``(n, K, C)`` -> ``(n, 3K, C)``.

        Output component ``(k, d)`` (``k`` outer) is the derivative of input
        component ``k`` along axis ``d``. ``g`` holds the Neumann values
        ``(n_neumann, K, C)``; ignored when this operator has no Neumann set.
        """
        x = ad.as_var(x)
        n, K, C = x.shape
        y = ad.spmm(self.matrix, ad.reshape(x, (n, K * C)), self._matrix_t)  # rows (i, d), cols (k, c)
        y = ad.transpose(ad.reshape(y, (n, 3, K, C)), (0, 2, 1, 3))
        if self.has_neumann and g is not None:
            g = ad.as_var(g)
            term = ad.mul(ad.reshape(g, (-1, K, 1, C)), self.offset[:, None, :, None])
            y = ad.add(y, ad.scatter_rows(term, self.neumann_idx, n))
        return ad.reshape(y, (n, 3 * K, C))

    def divergence(self, x, g=None):
        """Contract the derivative index with the last tensor index.

        ``x`` is ``(n, 3K, C)`` -> ``(n, K, C)``.
        """
        x = ad.as_var(x)
        n, K3, C = x.shape
        K = K3 // 3
        # rows (j, b) vertex-major, columns (a, c)
        t = ad.transpose(ad.reshape(x, (n, K, 3, C)), (0, 2, 1, 3))
        y = ad.reshape(ad.spmm(self.div_matrix, ad.reshape(t, (3 * n, K * C)), self._div_matrix_t), (n, K, C))
        if self.has_neumann and g is not None:
            g = ad.as_var(g)
            term = ad.mul(ad.reshape(g, (-1, K, 3, C)), self.offset[:, None, :, None])
            term = ad.reshape(ad.matmul_const(ad.transpose(term, (0, 1, 3, 2)), np.ones((3, 1))), (-1, K, C))
            y = ad.add(y, ad.scatter_rows(term, self.neumann_idx, n))
        return y


_CACHE: dict = {}


def operator_for(mesh: Mesh, bc: Optional[BoundarySpec] = None, weight: Optional[float] = None,
                 normalize=True) -> GradientOperator:
    """Build (and memoise per mesh object) the operator for a Neumann set."""
    if bc is None or len(bc.neumann_idx) == 0:
        key = (id(mesh), normalize, None)
    else:
        w = bc.weights if weight is None else np.full(len(bc.neumann_idx), float(weight))
        key = (id(mesh), normalize, bc.neumann_idx.tobytes(), bc.neumann_normals.tobytes(), np.asarray(w).tobytes())
    hit = _CACHE.get(key)
    if hit is not None and hit[0] is mesh:
        return hit[1]
    if key[2] is None:
        op = GradientOperator(mesh, normalize=normalize)
    else:
        op = GradientOperator(mesh, bc.neumann_idx, bc.neumann_normals, w, normalize=normalize)
    if len(_CACHE) > 256:
        _CACHE.clear()
    _CACHE[key] = (mesh, op)
    return op


def _check(field: TensorField, mesh: Mesh, rank=None):
    field.check_mesh(mesh)
    if rank is not None and field.rank != rank:
        raise ValueError(f"expected a rank-{rank} field, got rank {field.rank}")


def _neumann_values(bc: BoundarySpec, field: TensorField):
    g = bc.neumann_values
    if g.shape[1:] != field.values.shape[1:]:
        raise ValueError(f"Neumann data shape {g.shape[1:]} does not match field {field.values.shape[1:]}")
    return g


def isogcn_grad(psi: TensorField, mesh: Mesh) -> TensorField:
    _check(psi, mesh, 0)
    return TensorField(1, operator_for(mesh).gradient(psi.values).value)


def neumann_isogcn_grad(psi: TensorField, mesh: Mesh, bc: BoundarySpec, weight: Optional[float] = None) -> TensorField:
    """IsoGCN gradient with the Neumann constraint term.

    ``weight`` overrides the per-vertex weights in ``bc``; ``weight=0``
    reproduces :func:`isogcn_grad` exactly.
    """
    _check(psi, mesh, 0)
    if weight is not None and weight < 0:
        raise ValueError("Neumann weight must be non-negative")
    op = operator_for(mesh, bc, weight)
    if weight == 0:
        op = operator_for(mesh)
    return TensorField(1, op.gradient(psi.values, _neumann_values(bc, psi)).value)


def isogcn_jacobian(v: TensorField, mesh: Mesh, bc: Optional[BoundarySpec] = None) -> TensorField:
    """Row ``c`` of the result is the gradient of component ``c``."""
    _check(v, mesh, 1)
    op = operator_for(mesh, bc)
    g = _neumann_values(bc, v) if op.has_neumann else None
    return TensorField(2, op.gradient(v.values, g).value)


def isogcn_div(T: TensorField, mesh: Mesh, bc: Optional[BoundarySpec] = None) -> TensorField:
    _check(T, mesh)
    if T.rank == 0:
        raise ValueError("divergence needs a rank-1 or rank-2 field")
    op = operator_for(mesh, bc)
    g = _neumann_values(bc, T) if op.has_neumann else None
    return TensorField(T.rank - 1, op.divergence(T.values, g).value)


def isogcn_laplacian(psi: TensorField, mesh: Mesh, bc_grad: Optional[BoundarySpec] = None) -> TensorField:
    """Divergence of the (Neumann-corrected) gradient."""
    _check(psi, mesh)
    if psi.rank == 0:
        inner = neumann_isogcn_grad(psi, mesh, bc_grad) if bc_grad is not None else isogcn_grad(psi, mesh)
    elif psi.rank == 1:
        inner = isogcn_jacobian(psi, mesh, bc_grad)
    else:
        raise ValueError("Laplacian supports rank-0 and rank-1 fields")
    return isogcn_div(inner, mesh)
