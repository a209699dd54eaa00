"""Structural checks on a model: equivariance, Dirichlet exactness, decoder round trip, solver traces.

Audits report; they never raise on a failed check.
"""

from __future__ import annotations

import numpy as np

from penn.boundary import NotDecodable, pseudoinverse_decode
from penn.datagen import GradientSample
from penn.mesh import random_isometry, transform_values
from penn.model import PennModel
from penn.training import transform_sample

EQUIVARIANCE_TOL = 1e-6
DIRICHLET_TOL = 1e-9
ROUND_TRIP_TOL = 1e-8


def _rel(a, b):
    den = max(float(np.linalg.norm(b)), 1e-300)
    return float(np.linalg.norm(np.asarray(a) - np.asarray(b)) / den)


def equivariance_deviation(model, sample, R, t) -> float:
    """``|f(g x) - g f(x)| / |g f(x)|`` for one isometry."""
    problem = sample if isinstance(sample, GradientSample) else sample.problem
    moved = transform_sample(sample, R, t)
    moved_problem = moved if isinstance(moved, GradientSample) else moved.problem
    base = model.predict(problem)
    rank = 1 if isinstance(sample, GradientSample) else 0
    return _rel(model.predict(moved_problem), transform_values(base, rank, R))


def audit_model(model, samples, n_transforms=3, seed=0) -> dict:
    rng = np.random.default_rng(seed)
    eq, dir_err, traces, statuses = [], [], [], []
    for s in samples:
        for _ in range(n_transforms):
            R, t = random_isometry(rng)
            eq.append(equivariance_deviation(model, s, R, t))
        if isinstance(model, PennModel):
            pred, outcome = model.solve_report(s.problem)
            statuses.append(outcome.status)
            r = outcome.residual_norms
            traces.append({"status": outcome.status, "iterations": outcome.iterations,
                           "first_residual": r[0] if r else None, "last_residual": r[-1] if r else None})
            bc = s.problem.bc
            if pred is not None and len(bc.dirichlet_idx):
                dir_err.append(float(np.abs(pred[bc.dirichlet_idx] - bc.dirichlet_values).max()))
    report = {
        "samples": len(samples),
        "equivariance": _check(max(eq) if eq else None, EQUIVARIANCE_TOL),
    }
    if isinstance(model, PennModel):
        report["dirichlet_exactness"] = _check(max(dir_err) if dir_err else None, DIRICHLET_TOL)
        report["round_trip"] = _round_trip(model, samples)
        report["solver_status"] = {k: statuses.count(k) for k in sorted(set(statuses))}
        report["bb_traces"] = traces
    return report


def _check(value, tol):
    if value is None:
        return {"status": "n/a", "value": None, "tolerance": tol}
    return {"status": "PASS" if value <= tol else "FAIL", "value": value, "tolerance": tol}


def _round_trip(model: PennModel, samples):
    if model.decoder is not None:
        return {"status": "n/a", "value": None, "tolerance": ROUND_TRIP_TOL, "note": "learned decoder"}
    errs = []
    try:
        for s in samples:
            u = model.normalizer.forward(s.problem.u0.values)
            back = pseudoinverse_decode(model.encoder, model.encoder(u)).value
            errs.append(float(np.abs(back - u).max()))
    except NotDecodable as exc:
        return {"status": "FAIL", "value": None, "tolerance": ROUND_TRIP_TOL, "note": str(exc)}
    return _check(max(errs), ROUND_TRIP_TOL)
