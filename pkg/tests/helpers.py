"""Shared builders for solver and model tests."""

import numpy as np

from penn.boundary import boundary_encode, dirichlet_apply
from penn.datagen import heat_problem
from penn.mesh import cuboid_mesh
from penn.nn import Mlp
from penn.operators import operator_for
from penn.solver import FieldBinding, ProcessorContext, ProcessorSpec


def heat_setup(shape=(4, 3, 1), seed=0, spacing=0.25, all_dirichlet=False):
    """Scalar heat problem with identity encoding: (state, processor, context, problem)."""
    rng = np.random.default_rng(seed)
    mesh = cuboid_mesh(shape, (spacing,) * 3)
    x = mesh.vertices
    didx = mesh.boundary_vertices if all_dirichlet else np.where(np.isclose(x[:, 0], 0.0))[0]
    u0 = rng.normal(size=mesh.n_vertices)
    problem = heat_problem(mesh, u0, didx, 0.1, dirichlet_values=rng.normal(size=len(didx)))
    bc = problem.bc
    state = dirichlet_apply(boundary_encode(Mlp.identity(1), problem.u0.values, bc))
    ctx = ProcessorContext(operator_for(mesh))
    ctx.fields["h"] = FieldBinding(operator_for(mesh, bc), bc.neumann_values)
    return state, ProcessorSpec.diffusion(1, mix=False), ctx, problem


def dense_laplacian(ctx, n):
    """Matrix of the processor ``div(grad h)`` (homogeneous Neumann data)."""
    b = ctx.fields["h"]
    G = b.op.matrix.toarray()
    D = ctx.plain.div_matrix.toarray()
    return D @ G


def implicit_reference(L, h0, dt, didx):
    """Dense solve of ``(I - dt L) h = h0`` with Dirichlet rows pinned to ``h0``."""
    n = len(h0)
    free = np.setdiff1d(np.arange(n), didx)
    A = np.eye(n) - dt * L
    h = h0.copy()
    rhs = h0[free] - A[np.ix_(free, didx)] @ h0[didx]
    h[free] = np.linalg.solve(A[np.ix_(free, free)], rhs)
    return h
