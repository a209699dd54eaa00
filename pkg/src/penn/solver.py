"""Neural nonlinear solver: implicit residuals driven to zero with Barzilai-Borwein steps.

The processor (the discretised right-hand side of the PDE) is a small
expression tree of equivariant operators and channel-mixing layers, see
:class:`ProcessorSpec`.
"""

from __future__ import annotations

import csv
import logging
import math
import time
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from penn import autodiff as ad
from penn.boundary import EncodedState, dirichlet_apply
from penn.nn import LinearLayer
from penn.operators import GradientOperator

log = logging.getLogger(__name__)


class SolverDivergence(RuntimeError):
    """Non-finite values inside a solve. Carries the iteration and the trace."""

    def __init__(self, message, iteration, trace):
        super().__init__(message)
        self.iteration = iteration
        self.trace = trace


class ProcessorTypeError(TypeError):
    pass


# ---------------------------------------------------------------- processor

@dataclass
class FieldBinding:
    """Operator carrying one field's Neumann set, plus its encoded Neumann values."""

    op: GradientOperator
    neumann: Optional[object] = None  # Var or array (n_neumann, K, C)


@dataclass
class ProcessorContext:
    plain: GradientOperator
    fields: dict = field(default_factory=dict)

    def binding(self, name):
        return self.fields.get(name)


class Node:
    def infer(self, types):
        raise NotImplementedError

    def __call__(self, ctx: ProcessorContext, env: dict):
        raise NotImplementedError

    def layers(self):
        return []


@dataclass
class Field(Node):
    name: str

    def infer(self, types):
        if self.name not in types:
            raise ProcessorTypeError(f"unbound field {self.name!r}")
        return types[self.name]

    def __call__(self, ctx, env):
        return ad.as_var(env[self.name])


@dataclass
class Zero(Node):
    like: str = "h"

    def infer(self, types):
        return Field(self.like).infer(types)

    def __call__(self, ctx, env):
        return ad.as_var(np.zeros(ad.value(env[self.like]).shape))


def _spatial(node, ctx, env, method):
    """Pick the Neumann-aware operator only when differentiating a bound field directly."""
    x = node.child(ctx, env)
    if isinstance(node.child, Field):
        b = ctx.binding(node.child.name)
        if b is not None:
            return getattr(b.op, method)(x, b.neumann)
    return getattr(ctx.plain, method)(x)


@dataclass
class Grad(Node):
    child: Node

    def infer(self, types):
        rank, ch = self.child.infer(types)
        if rank > 1:
            raise ProcessorTypeError("gradient of a rank-2 field is not supported")
        return rank + 1, ch

    def __call__(self, ctx, env):
        return _spatial(self, ctx, env, "gradient")


@dataclass
class Div(Node):
    child: Node

    def infer(self, types):
        rank, ch = self.child.infer(types)
        if rank == 0:
            raise ProcessorTypeError("divergence of a rank-0 field")
        return rank - 1, ch

    def __call__(self, ctx, env):
        return _spatial(self, ctx, env, "divergence")


@dataclass
class Laplacian(Node):
    child: Node

    def infer(self, types):
        rank, ch = self.child.infer(types)
        if rank > 1:
            raise ProcessorTypeError("Laplacian supports rank 0 and 1")
        return rank, ch

    def __call__(self, ctx, env):
        return ctx.plain.divergence(Grad(self.child)(ctx, env))


@dataclass
class Contract(Node):
    """``(T v)_c = sum_d T_cd v_d`` per channel, e.g. ``(u . grad) u = J(u) u``."""

    tensor: Node
    vector: Node

    def infer(self, types):
        rt, ct = self.tensor.infer(types)
        rv, cv = self.vector.infer(types)
        if rt != 2 or rv != 1 or ct != cv:
            raise ProcessorTypeError(f"contract needs rank-2 and rank-1 with equal channels, got {(rt, ct)}, {(rv, cv)}")
        return 1, ct

    def __call__(self, ctx, env):
        T = self.tensor(ctx, env)
        v = self.vector(ctx, env)
        n, _, C = v.shape
        prod = ad.mul(ad.reshape(T, (n, 3, 3, C)), ad.reshape(v, (n, 1, 3, C)))
        # sum over d via a constant contraction on a transposed view
        prod = ad.transpose(prod, (0, 1, 3, 2))
        return ad.reshape(ad.matmul_const(prod, np.ones((3, 1))), (n, 3, C))

    def layers(self):
        return self.tensor.layers() + self.vector.layers()


@dataclass
class Mix(Node):
    """Channel-mixing linear layer (bias-free for rank > 0 to stay equivariant)."""

    child: Node
    layer: LinearLayer

    def infer(self, types):
        rank, ch = self.child.infer(types)
        if ch != self.layer.n_in:
            raise ProcessorTypeError(f"mix expects {self.layer.n_in} channels, got {ch}")
        if rank > 0 and self.layer.bias is not None:
            raise ProcessorTypeError("bias on a rank>0 feature breaks equivariance")
        return rank, self.layer.n_out

    def __call__(self, ctx, env):
        return self.layer(self.child(ctx, env))

    def layers(self):
        return self.child.layers() + [self.layer]


@dataclass
class Scale(Node):
    child: Node
    coef: float

    def infer(self, types):
        return self.child.infer(types)

    def __call__(self, ctx, env):
        return ad.mul(self.child(ctx, env), float(self.coef))


@dataclass
class Sum(Node):
    terms: list

    def __init__(self, *terms):
        self.terms = list(terms)

    def infer(self, types):
        out = {t.infer(types) for t in self.terms}
        if len(out) != 1:
            raise ProcessorTypeError(f"sum of mismatched ranks/channels: {sorted(out)}")
        return out.pop()

    def __call__(self, ctx, env):
        acc = self.terms[0](ctx, env)
        for t in self.terms[1:]:
            acc = ad.add(acc, t(ctx, env))
        return acc

    def layers(self):
        return [layer for t in self.terms for layer in t.layers()]


for _cls in (Grad, Div, Laplacian, Scale):
    _cls.layers = lambda self: self.child.layers()


@dataclass
class ProcessorSpec:
    """Root of a processor expression; ``root`` evaluates to D(h)."""

    root: Node

    def check(self, types):
        out = self.root.infer(types)
        if "h" in types and out != types["h"]:
            raise ProcessorTypeError(f"processor maps {types['h']} to {out}; must preserve rank and channels")
        return out

    def __call__(self, ctx, env):
        return self.root(ctx, env)

    def parameters(self):
        return [p for layer in self.root.layers() for p in layer.parameters()]

    @classmethod
    def zero(cls):
        return cls(Zero("h"))

    @classmethod
    def diffusion(cls, channels, coef=1.0, mix=True, rng=None):
        """``coef * Mix_out(div(Mix_in(grad h)))``; mixes start at identity."""
        inner = Grad(Field("h"))
        if mix:
            inner = Mix(inner, LinearLayer.identity(channels, name="proc.mix_in"))
        out = Div(inner)
        if mix:
            out = Mix(out, LinearLayer.identity(channels, name="proc.mix_out"))
        return cls(Scale(out, coef))


# ------------------------------------------------------------------- solver

@dataclass
class SolverConfig:
    max_iterations: int = 8
    alpha0: float = 0.1
    convergence_epsilon: float = 1e-8
    denominator_epsilon: float = 1e-30
    alpha_max: float = 1e3

    def __post_init__(self):
        for name in ("max_iterations", "alpha0", "convergence_epsilon", "denominator_epsilon", "alpha_max"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")


@dataclass
class SolverTrace:
    iterations: list = field(default_factory=list)
    residual_norms: list = field(default_factory=list)
    alphas: list = field(default_factory=list)
    ms: list = field(default_factory=list)
    clamped: int = 0
    stop_reason: str = "max_iterations"

    def add(self, it, rnorm, alpha, ms):
        self.iterations.append(it)
        self.residual_norms.append(float(rnorm))
        self.alphas.append(float(alpha))
        self.ms.append(float(ms))

    def __len__(self):
        return len(self.iterations)

    def rows(self):
        return list(zip(self.iterations, self.residual_norms, self.alphas, self.ms))

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["iter", "residual_norm", "alpha", "ms"])
            for row in self.rows():
                w.writerow([row[0]] + [repr(v) for v in row[1:]])

    def summary(self) -> dict:
        return {
            "iterations": len(self),
            "first_residual": self.residual_norms[0] if self.residual_norms else None,
            "last_residual": self.residual_norms[-1] if self.residual_norms else None,
            "alpha_min": min(self.alphas, default=None),
            "alpha_max": max(self.alphas, default=None),
            "clamped": self.clamped,
            "stop_reason": self.stop_reason,
        }


def residual(h, h0, proc: ProcessorSpec, dt: float, ctx: ProcessorContext, env=None):
    """``R(h) = h - h0 - D(h) dt``."""
    h = ad.as_var(h.h if isinstance(h, EncodedState) else h)
    h0 = ad.as_var(h0.h if isinstance(h0, EncodedState) else h0)
    if h.shape != h0.shape:
        raise ValueError(f"shape mismatch {h.shape} vs {h0.shape}")
    env = dict(env or {})
    env["h"] = h
    d = proc(ctx, env)
    if d.shape != h.shape:
        raise ProcessorTypeError(f"processor output {d.shape} does not match state {h.shape}")
    return ad.add(ad.add(h, ad.neg(h0)), ad.mul(d, -float(dt)))


def bb_step_size(dh, dR, denominator_epsilon: float = 1e-30):
    """Two-point step ``<dh, dR> / <dR, dR>`` over the whole mesh.

    Returns ``None`` when ``<dR, dR>`` falls below ``denominator_epsilon``
    (the caller treats that as convergence).
    """
    dh, dR = ad.as_var(dh), ad.as_var(dR)
    if dh.shape != dR.shape:
        raise ValueError(f"shape mismatch {dh.shape} vs {dR.shape}")
    den = ad.vdot(dR, dR)
    if not float(den.value) >= denominator_epsilon:
        return None
    return ad.div(ad.vdot(dh, dR), den)


def _mask(R, idx):
    if idx is None or len(idx) == 0:
        return R
    return ad.overwrite_rows(R, idx, np.zeros((len(idx),) + R.shape[1:]))


def _finite(x):
    return bool(np.all(np.isfinite(x)))


def bb_solve(start: EncodedState, residual_fn: Callable, cfg: SolverConfig, dirichlet=True, ref_norm=None,
             trace: Optional[SolverTrace] = None, project: Optional[Callable] = None):
    """Iterate ``h <- DirichletLayer(h - alpha R(h))`` with BB step sizes.

    The residual's Dirichlet rows are zeroed when the Dirichlet layer is on,
    because those rows are overwritten after every update anyway.
    ``project`` (a map on the raw update) replaces the Dirichlet layer when given.
    """
    trace = SolverTrace() if trace is None else trace
    idx = start.dirichlet_idx if dirichlet else None
    h = start.h
    if ref_norm is None:
        ref_norm = float(np.linalg.norm(h.value))
    ref_norm = ref_norm if ref_norm > 0 else 1.0
    prev_h = prev_R = None
    for it in range(cfg.max_iterations):
        t0 = time.perf_counter()
        R = _mask(residual_fn(h), idx)
        if not _finite(R.value):
            trace.stop_reason = "divergent"
            raise SolverDivergence(f"non-finite residual at iteration {it}", it, trace)
        rnorm = float(np.linalg.norm(R.value)) / ref_norm
        if rnorm < cfg.convergence_epsilon:
            trace.add(it, rnorm, math.nan, 1e3 * (time.perf_counter() - t0))
            trace.stop_reason = "converged"
            break
        if prev_h is None:
            alpha = ad.as_var(cfg.alpha0)
        else:
            alpha = bb_step_size(ad.add(h, ad.neg(prev_h)), ad.add(R, ad.neg(prev_R)), cfg.denominator_epsilon)
            if alpha is None:
                trace.add(it, rnorm, math.nan, 1e3 * (time.perf_counter() - t0))
                trace.stop_reason = "stalled"
                break
            a = float(alpha.value)
            if not math.isfinite(a):
                trace.stop_reason = "divergent"
                raise SolverDivergence(f"non-finite step size at iteration {it}", it, trace)
            if abs(a) > cfg.alpha_max:
                trace.clamped += 1
                log.debug("bb_clamp iteration=%d alpha=%.3e", it, a)
                alpha = ad.as_var(math.copysign(cfg.alpha_max, a))
        h_new = ad.add(h, ad.neg(ad.mul(R, alpha)))
        if project is not None:
            h_new = project(h_new)
        elif dirichlet:
            h_new = dirichlet_apply(start.replace(h_new)).h
        if not _finite(h_new.value):
            trace.stop_reason = "divergent"
            raise SolverDivergence(f"non-finite state at iteration {it}", it, trace)
        trace.add(it, rnorm, float(alpha.value), 1e3 * (time.perf_counter() - t0))
        prev_h, prev_R, h = h, R, h_new
    return start.replace(h), trace


def nonlinear_solve(h0: EncodedState, proc: ProcessorSpec, cfg: SolverConfig, dt: float, ctx: ProcessorContext,
                    dirichlet=True, env=None, project=None):
    """Solve ``h - h0 - D(h) dt = 0`` from ``h0`` (already Dirichlet-applied)."""

    def res(h):
        return residual(h, h0.h, proc, dt, ctx, env)

    return bb_solve(h0, res, cfg, dirichlet=dirichlet and project is None, project=project)


def explicit_step(u: EncodedState, proc: ProcessorSpec, dt: float, ctx: ProcessorContext, dirichlet=True, env=None):
    """``u + D(u) dt`` followed by the Dirichlet overwrite."""
    env = dict(env or {})
    env["h"] = u.h
    d = proc(ctx, env)
    if d.shape != u.h.shape:
        raise ProcessorTypeError(f"processor output {d.shape} does not match state {u.h.shape}")
    out = u.replace(ad.add(u.h, ad.mul(d, float(dt))))
    return dirichlet_apply(out) if dirichlet else out


# ------------------------------------------------------------ fractional step

@dataclass
class FractionalStepConfig:
    dt: float
    reynolds: float
    velocity: SolverConfig = field(default_factory=lambda: SolverConfig(max_iterations=8))
    pressure: SolverConfig = field(default_factory=lambda: SolverConfig(max_iterations=5))
    mixers: dict = field(default_factory=dict)  # optional LinearLayers: convection, diffusion, pressure_gradient


def _maybe_mix(node, cfg, key):
    layer = cfg.mixers.get(key)
    return Mix(node, layer) if layer is not None else node


def fractional_step_nodes(cfg: FractionalStepConfig):
    """Expression trees for the intermediate velocity, pressure residual and velocity residual."""
    u, p = Field("u"), Field("p")
    conv = _maybe_mix(Contract(Grad(u), u), cfg, "convection")
    diff = _maybe_mix(Laplacian(u), cfg, "diffusion")
    rhs = Sum(Scale(conv, -1.0), Scale(diff, 1.0 / cfg.reynolds))
    u_tilde = Sum(Field("u0"), Scale(rhs, cfg.dt))
    # sign flipped relative to lap p - div(u~)/dt so the residual is monotone in p
    r_p = Sum(Scale(Div(Field("u_tilde")), 1.0 / cfg.dt), Scale(Laplacian(p), -1.0))
    grad_p = _maybe_mix(Grad(p), cfg, "pressure_gradient")
    r_u = Sum(u, Scale(Field("u_tilde"), -1.0), Scale(grad_p, cfg.dt))
    return u_tilde, r_p, r_u


def fractional_step_process(h_u: EncodedState, h_p: EncodedState, cfg: FractionalStepConfig, ctx: ProcessorContext,
                            dirichlet=True, traces=None):
    """One implicit fractional step in the encoded space.

    Outer BB loop on velocity; every outer iteration recomputes the
    intermediate velocity and runs the inner BB loop on the pressure
    Poisson residual before taking the velocity step.
    """
    u_tilde_node, r_p_node, r_u_node = fractional_step_nodes(cfg)
    u0 = h_u.h
    state = {"p": h_p}
    inner_traces = []

    def velocity_residual(u):
        env = {"u": u, "u0": u0}
        ut = u_tilde_node(ctx, env)
        env["u_tilde"] = ut

        def pressure_residual(p):
            return r_p_node(ctx, dict(env, p=p))

        p_state, tr = bb_solve(state["p"], pressure_residual, cfg.pressure, dirichlet=dirichlet,
                               ref_norm=_ref(ut.value))
        inner_traces.append(tr)
        state["p"] = p_state
        env["p"] = p_state.h
        return r_u_node(ctx, env)

    outer = SolverTrace()
    u_state, outer = bb_solve(h_u, velocity_residual, cfg.velocity, dirichlet=dirichlet,
                              ref_norm=_ref(u0.value), trace=outer)
    if traces is not None:
        traces.append(outer)
        traces.extend(inner_traces)
    return u_state, state["p"]


def _ref(x):
    n = float(np.linalg.norm(x))
    return n if n > 0 else 1.0
