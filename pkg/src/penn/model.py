"""Model assembly: encode, solve in the encoded space, decode.

:class:`PennModel` predicts a scalar heat field at the horizon from the
initial field and its boundary data. :class:`GradientModel` reconstructs a
gradient field from a scalar field and Neumann data.
"""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Optional

import numpy as np

from penn import autodiff as ad
from penn.boundary import boundary_encode, dirichlet_apply, pseudoinverse_decode
from penn.datagen import GradientSample, HeatSample, ProblemSpec
from penn.mesh import BoundarySpec
from penn.nn import LinearLayer, Mlp, linear_from_dict, linear_to_dict, mlp_from_dict, mlp_to_dict
from penn.operators import GradientOperator, operator_for
from penn.solver import (
    Div,
    Field,
    FieldBinding,
    Grad,
    Mix,
    ProcessorContext,
    ProcessorSpec,
    SolverConfig,
    SolverDivergence,
    SolverTrace,
    Scale,
    explicit_step,
    nonlinear_solve,
)

log = logging.getLogger(__name__)

# a solve that cannot cut its residual by this factor "does not converge"
REQUIRED_REDUCTION = 10.0


@dataclass
class Ablation:
    """Switches for the components under study; all on is the full model."""

    encoded_boundary: bool = True
    nonlinear_solver: bool = True
    bc_inputs: bool = True
    dirichlet_layer: bool = True
    pseudoinverse_decoder: bool = True
    post_decode_dirichlet: bool = False
    explicit_substeps: int = 8

    NAMES = (
        "penn",
        "no_encoded_boundary",
        "no_solver",
        "no_bc_input",
        "no_dirichlet_layer",
        "no_pinv_decoder",
        "no_pinv_decoder_post_dirichlet",
    )

    @classmethod
    def named(cls, name: str) -> "Ablation":
        table = {
            "penn": {},
            "no_encoded_boundary": {"encoded_boundary": False},
            "no_solver": {"nonlinear_solver": False},
            "no_bc_input": {"bc_inputs": False},
            "no_dirichlet_layer": {"dirichlet_layer": False},
            "no_pinv_decoder": {"pseudoinverse_decoder": False},
            "no_pinv_decoder_post_dirichlet": {"pseudoinverse_decoder": False, "post_decode_dirichlet": True},
        }
        if name not in table:
            raise ValueError(f"unknown ablation {name!r}; choose from {', '.join(cls.NAMES)}")
        return cls(**table[name])

    def to_dict(self):
        return {k: v for k, v in asdict(self).items()}


@dataclass
class Normalizer:
    """Per-channel standardisation ``(u - mean) / std``."""

    mean: float = 0.0
    std: float = 1.0

    @classmethod
    def fit(cls, arrays) -> "Normalizer":
        v = np.concatenate([np.asarray(a, float).ravel() for a in arrays])
        std = float(v.std())
        return cls(float(v.mean()), std if std > 0 else 1.0)

    def forward(self, u):
        return (np.asarray(u, float) - self.mean) / self.std

    def inverse(self, z):
        return ad.add(ad.mul(z, self.std), self.mean)


@dataclass
class SolveOutcome:
    """Structured report of one solve: never raised, always returned."""

    status: str  # converged | reduced | divergent | explicit
    iterations: int
    residual_norms: list = field(default_factory=list)
    message: str = ""

    @property
    def divergent(self) -> bool:
        return self.status == "divergent"

    def to_dict(self):
        return asdict(self)


def _classify(trace: SolverTrace) -> str:
    """converged | reduced | divergent.

    ``reduced``: the iteration budget ran out after the residual fell by at
    least ``REQUIRED_REDUCTION``. Anything else that did not converge
    (non-finite values, growth, stagnation) counts as divergent.
    """
    r = trace.residual_norms
    if trace.stop_reason in ("converged", "divergent"):
        return trace.stop_reason
    if not r or not all(map(math.isfinite, r)):
        return "divergent"
    if trace.stop_reason == "stalled" and r[-1] == 0.0:
        return "converged"
    return "reduced" if r[-1] * REQUIRED_REDUCTION <= r[0] else "divergent"


class PennModel:
    """Encoder -> (nonlinear solver | explicit stack) -> decoder for one scalar quantity."""

    def __init__(self, encoder: Mlp, processor: ProcessorSpec, solver: SolverConfig = None,
                 ablation: Ablation = None, decoder: Optional[Mlp] = None, normalizer: Normalizer = None):
        self.encoder = encoder
        self.processor = processor
        self.solver = solver or SolverConfig()
        self.ablation = ablation or Ablation()
        self.normalizer = normalizer or Normalizer()
        if self.ablation.pseudoinverse_decoder:
            if not encoder.decodable:
                raise ValueError("pseudoinverse decoding needs a decodable encoder")
            decoder = None
        elif decoder is None:
            raise ValueError("a learned decoder is required when the pseudoinverse decoder is off")
        self.decoder = decoder
        width = encoder.n_out
        processor.check({"h": (0, width)})
        if decoder is not None and (decoder.n_in != width or decoder.n_out != encoder.n_in):
            raise ValueError("decoder widths do not chain with the encoder")

    @classmethod
    def build(cls, rng, width=16, ablation: Ablation = None, solver: SolverConfig = None, normalizer=None):
        ablation = ablation or Ablation()
        encoder = Mlp.build(rng, [1, width, width], activation="leaky_relu", decodable=True, name="encoder")
        processor = ProcessorSpec.diffusion(width, coef=1.0, mix=True)
        decoder = None
        if not ablation.pseudoinverse_decoder:
            decoder = Mlp.build(rng, [width, width, 1], activation="leaky_relu", last_activation="identity",
                                name="decoder")
        return cls(encoder, processor, solver, ablation, decoder, normalizer)

    def parameters(self):
        ps = self.encoder.parameters() + self.processor.parameters()
        if self.decoder is not None:
            ps += self.decoder.parameters()
        return ps

    # ------------------------------------------------------------ pieces
    def _inputs(self, problem: ProblemSpec):
        norm = self.normalizer
        u = norm.forward(problem.u0.values)
        bc = problem.bc
        if not self.ablation.bc_inputs:
            bc = BoundarySpec(bc.rank, bc.channels)
        else:
            bc = BoundarySpec(
                bc.rank, bc.channels, bc.dirichlet_idx, norm.forward(bc.dirichlet_values),
                bc.neumann_idx, bc.neumann_normals, bc.neumann_values / norm.std, bc.weights,
            )
        return u, bc

    def _context(self, problem, u, bc) -> ProcessorContext:
        plain = operator_for(problem.mesh)
        ctx = ProcessorContext(plain)
        if len(bc.neumann_idx):
            g = self.encoder.jvp(u[bc.neumann_idx], bc.neumann_values)
            ctx.fields["h"] = FieldBinding(operator_for(problem.mesh, bc), g)
        return ctx

    def _decode(self, h):
        if self.decoder is None:
            return pseudoinverse_decode(self.encoder, h, check=False)
        return self.decoder(h)

    def run(self, problem: ProblemSpec):
        """Differentiable prediction; returns ``(u_T Var, SolverTrace or None)``.

        Raises :class:`SolverDivergence` on non-finite values.
        """
        ab = self.ablation
        u, bc = self._inputs(problem)
        state = boundary_encode(self.encoder, u, bc)
        use_dl = ab.dirichlet_layer and len(bc.dirichlet_idx) > 0
        if use_dl:
            state = dirichlet_apply(state)
        ctx = self._context(problem, u, bc)
        dt = problem.dt * problem.kappa
        trace = None
        if not ab.nonlinear_solver:
            k = max(1, int(ab.explicit_substeps))
            for _ in range(k):
                state = explicit_step(state, self.processor, dt / k, ctx, dirichlet=use_dl)
                if not np.all(np.isfinite(state.h.value)):
                    raise SolverDivergence("non-finite state in the explicit stack", 0, None)
        elif not ab.encoded_boundary:
            project = self._physical_dirichlet(bc) if use_dl else None
            state, trace = nonlinear_solve(state, self.processor, self.solver, dt, ctx, dirichlet=False,
                                           project=project)
        else:
            state, trace = nonlinear_solve(state, self.processor, self.solver, dt, ctx, dirichlet=use_dl)
        y = self._decode(state.h)
        if ab.post_decode_dirichlet and len(bc.dirichlet_idx):
            y = ad.overwrite_rows(y, bc.dirichlet_idx, bc.dirichlet_values)
        return self.normalizer.inverse(y), trace

    def _physical_dirichlet(self, bc):
        """Decode, overwrite the Dirichlet rows in physical space, encode again."""

        def project(h):
            y = self._decode(h)
            y = ad.overwrite_rows(y, bc.dirichlet_idx, bc.dirichlet_values)
            return self.encoder(y)

        return project

    def predict(self, problem: ProblemSpec) -> np.ndarray:
        return self.run(problem)[0].value

    def solve_report(self, problem: ProblemSpec) -> tuple[Optional[np.ndarray], SolveOutcome]:
        """Prediction plus a structured outcome; divergence is reported, not raised.

        The prediction is ``None`` only when it is not finite.
        """
        try:
            out, trace = self.run(problem)
        except SolverDivergence as exc:
            tr = exc.trace
            return None, SolveOutcome("divergent", exc.iteration, list(tr.residual_norms) if tr else [], str(exc))
        except (FloatingPointError, OverflowError, np.linalg.LinAlgError) as exc:
            return None, SolveOutcome("divergent", -1, [], f"{type(exc).__name__}: {exc}")
        if not np.all(np.isfinite(out.value)):
            return None, SolveOutcome("divergent", -1, [], "non-finite prediction")
        if trace is None:
            return out.value, SolveOutcome("explicit", self.ablation.explicit_substeps, [], "")
        return out.value, SolveOutcome(_classify(trace), len(trace), list(trace.residual_norms), trace.stop_reason)

    # ----------------------------------------------------- serialisation
    def to_dict(self) -> dict:
        return {
            "type": "penn",
            "encoder": mlp_to_dict(self.encoder),
            "decoder": None if self.decoder is None else mlp_to_dict(self.decoder),
            "processor": [linear_to_dict(layer) for layer in self.processor.root.layers()],
            "solver": asdict(self.solver),
            "ablation": self.ablation.to_dict(),
            "normalizer": asdict(self.normalizer),
        }

    @classmethod
    def from_dict(cls, d) -> "PennModel":
        encoder = mlp_from_dict(d["encoder"])
        layers = [linear_from_dict(ld) for ld in d["processor"]]
        processor = _diffusion_with(layers)
        decoder = None if d.get("decoder") is None else mlp_from_dict(d["decoder"])
        return cls(encoder, processor, SolverConfig(**d["solver"]), Ablation(**d["ablation"]), decoder,
                   Normalizer(**d["normalizer"]))


def _diffusion_with(layers) -> ProcessorSpec:
    if len(layers) != 2:
        raise ValueError("expected the two mixing layers of the diffusion processor")
    return ProcessorSpec(Scale(Mix(Div(Mix(Grad(Field("h")), layers[0])), layers[1]), 1.0))


# ------------------------------------------------------------- gradients

class GradientModel:
    """Linear encoder -> gradient operator -> bias-free channel mix.

    ``normalize=False`` gives the IsoGCN baseline without the moment-matrix
    inverse, fed the same inputs (including the Neumann term).
    """

    def __init__(self, encoder: LinearLayer, decoder: LinearLayer, normalize=True, use_neumann=True):
        if decoder.bias is not None:
            raise ValueError("rank-1 features need a bias-free decoder")
        if encoder.n_out != decoder.n_in or decoder.n_out != 1 or encoder.n_in != 1:
            raise ValueError("encoder/decoder widths do not chain")
        self.encoder = encoder
        self.decoder = decoder
        self.normalize = normalize
        self.use_neumann = use_neumann

    @classmethod
    def build(cls, rng, width=4, normalize=True, use_neumann=True):
        enc = LinearLayer.init(rng, 1, width, bias=True, name="encoder")
        dec = LinearLayer.init(rng, width, 1, bias=False, name="decoder")
        return cls(enc, dec, normalize, use_neumann)

    def parameters(self):
        return self.encoder.parameters() + self.decoder.parameters()

    def operator(self, sample: GradientSample) -> GradientOperator:
        bc = sample.bc if self.use_neumann else None
        return operator_for(sample.mesh, bc, normalize=self.normalize)

    def run(self, sample: GradientSample):
        h = self.encoder(sample.psi.values)
        op = self.operator(sample)
        g = ad.linear(sample.bc.neumann_values, self.encoder.weight) if op.has_neumann else None
        return self.decoder(op.gradient(h, g)), None

    def predict(self, sample):
        return self.run(sample)[0].value

    def to_dict(self):
        return {
            "type": "gradient",
            "encoder": linear_to_dict(self.encoder),
            "decoder": linear_to_dict(self.decoder),
            "normalize": self.normalize,
            "use_neumann": self.use_neumann,
        }

    @classmethod
    def from_dict(cls, d):
        return cls(linear_from_dict(d["encoder"]), linear_from_dict(d["decoder"]), d["normalize"], d["use_neumann"])


def model_from_dict(d):
    if d.get("type") == "gradient":
        return GradientModel.from_dict(d)
    if d.get("type") == "penn":
        return PennModel.from_dict(d)
    raise ValueError(f"unknown model type {d.get('type')!r}")


def target_of(sample) -> np.ndarray:
    return sample.grad.values if isinstance(sample, GradientSample) else sample.target.values


def problem_of(sample):
    return sample if isinstance(sample, GradientSample) else sample.problem


def run_sample(model, sample):
    """Differentiable prediction for a dataset sample."""
    if isinstance(sample, HeatSample):
        return model.run(sample.problem)
    return model.run(sample)

