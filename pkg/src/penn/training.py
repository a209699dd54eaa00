"""Training loop, evaluation metrics and checkpoints."""

from __future__ import annotations

import csv
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from typing import Optional

import numpy as np

from penn import autodiff as ad
from penn import io
from penn.datagen import GradientSample, HeatSample, ProblemSpec
from penn.mesh import apply_isometry, random_isometry, transform_values
from penn.model import GradientModel, Normalizer, PennModel, model_from_dict, run_sample, target_of
from penn.nn import AdamState, adam_step
from penn.solver import SolverDivergence

log = logging.getLogger(__name__)

EXPLOSION_FACTOR = 100.0


class TrainingAborted(RuntimeError):
    def __init__(self, message, history):
        super().__init__(message)
        self.history = history


def sample_loss(model, sample):
    """Differentiable MSE of the prediction against the sample's target field."""
    pred, _ = run_sample(model, sample)
    diff = ad.add(pred, ad.neg(target_of(sample)))
    return ad.mul(ad.vdot(diff, diff), 1.0 / diff.value.size)


def loss_and_grads(model, sample):
    params = model.parameters()
    for p in params:
        p.grad = None
    loss = sample_loss(model, sample)
    ad.backward(loss)
    return float(loss.value), [p.grad for p in params]


def _safe_loss(model, sample) -> float:
    try:
        v = float(sample_loss(model, sample).value)
    except SolverDivergence:
        return math.inf
    return v if math.isfinite(v) else math.inf


def dataset_loss(model, samples) -> float:
    if not samples:
        return math.nan
    return float(np.mean([_safe_loss(model, s) for s in samples]))


def _snapshot(params):
    return [p.value.copy() for p in params]


def _restore(params, snap):
    for p, v in zip(params, snap):
        p.assign(v)


def train(model, train_set, epochs=50, lr=1e-3, val_set=None, seed=0, max_restarts=2, time_budget=None,
          callback=None) -> dict:
    """Adam on per-sample MSE, one update per sample.

    After each epoch the validation loss (training loss when no validation
    set is given) is checked. A non-finite value or one above
    ``EXPLOSION_FACTOR`` times the best so far reloads the best parameters,
    halves the learning rate and resumes; more than ``max_restarts`` such
    events abort with :class:`TrainingAborted`. The best parameters are
    loaded at the end.
    """
    if not train_set:
        raise ValueError("training set is empty")
    rng = np.random.default_rng(seed)
    params = model.parameters()
    opt = AdamState(params, lr=lr)
    history = {"train_loss": [], "val_loss": [], "lr": [], "restarts": 0, "epochs_run": 0, "seconds": 0.0,
               "aborted": False, "budget_exhausted": False}
    monitor = val_set if val_set else train_set
    best = dataset_loss(model, monitor)
    best_snap = _snapshot(params)
    t0 = time.perf_counter()
    for epoch in range(epochs):
        order = rng.permutation(len(train_set))
        losses = []
        blown = False
        for k in order:
            try:
                loss, grads = loss_and_grads(model, train_set[k])
            except SolverDivergence:
                blown = True
                break
            if not math.isfinite(loss) or not all(g is None or np.all(np.isfinite(g)) for g in grads):
                blown = True
                break
            losses.append(loss)
            adam_step(opt, grads)
        train_loss = float(np.mean(losses)) if losses and not blown else math.inf
        val_loss = dataset_loss(model, monitor) if not blown else math.inf
        history["train_loss"].append(train_loss)
        history["val_loss"].append(val_loss)
        history["lr"].append(opt.lr)
        history["epochs_run"] = epoch + 1
        if not math.isfinite(val_loss) or (math.isfinite(best) and val_loss > EXPLOSION_FACTOR * best):
            history["restarts"] += 1
            log.warning("training restart=%d epoch=%d val_loss=%s lr=%.3g", history["restarts"], epoch, val_loss,
                        opt.lr / 2)
            _restore(params, best_snap)
            if history["restarts"] > max_restarts:
                history["aborted"] = True
                history["seconds"] = time.perf_counter() - t0
                raise TrainingAborted(f"loss diverged after {max_restarts} restarts", history)
            opt.reset(opt.lr / 2)
        elif val_loss <= best or not math.isfinite(best):
            best = val_loss
            best_snap = _snapshot(params)
        if callback is not None:
            callback(epoch, history)
        if time_budget is not None and time.perf_counter() - t0 > time_budget:
            history["budget_exhausted"] = True
            break
    _restore(params, best_snap)
    history["best_val_loss"] = best
    history["seconds"] = time.perf_counter() - t0
    return history


# -------------------------------------------------------------- evaluation

@dataclass
class EvalReport:
    n_samples: int
    mse: float
    mse_sem: float
    dirichlet_mse: Optional[float] = None
    dirichlet_sem: Optional[float] = None
    neumann_mse: Optional[float] = None
    neumann_sem: Optional[float] = None
    mse_transformed: Optional[float] = None
    mse_transformed_sem: Optional[float] = None
    equivariance_deviation: Optional[float] = None
    divergent: int = 0  # solves that did not converge (predictions still scored when finite)
    per_sample: list = field(default_factory=list)

    def to_dict(self):
        return asdict(self)

    def write_json(self, path):
        io.write_json(self.to_dict(), path)

    def write_csv(self, path):
        """One metrics row; column names mirror the result tables."""
        cols = [
            ("MSE", self.mse), ("MSE SEM", self.mse_sem),
            ("MSE Dirichlet", self.dirichlet_mse), ("MSE Dirichlet SEM", self.dirichlet_sem),
            ("MSE Neumann", self.neumann_mse), ("MSE Neumann SEM", self.neumann_sem),
            ("MSE Trans.", self.mse_transformed), ("MSE Trans. SEM", self.mse_transformed_sem),
            ("Equivariance deviation", self.equivariance_deviation), ("Divergent", self.divergent),
            ("Samples", self.n_samples),
        ]
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow([c for c, _ in cols])
            w.writerow(["" if v is None else repr(v) for _, v in cols])


def mean_sem(values):
    """Mean and standard error (sample stddev / sqrt(n)) of per-sample values."""
    v = np.asarray([x for x in values if x is not None], float)
    if v.size == 0:
        return None, None
    sem = float(v.std(ddof=1) / np.sqrt(v.size)) if v.size > 1 else 0.0
    return float(v.mean()), sem


def _sq(pred, target, idx=None):
    d = (np.asarray(pred) - np.asarray(target)) ** 2
    if idx is not None:
        if len(idx) == 0:
            return None
        d = d[idx]
    return float(d.mean())


def transform_sample(sample, R, t):
    """Apply an isometry to a sample (mesh, inputs, boundary data and target)."""
    if isinstance(sample, GradientSample):
        psi, mesh, bc = apply_isometry(sample.psi, sample.mesh, R, t, sample.bc)
        grad = type(sample.grad)(1, transform_values(sample.grad.values, 1, R))
        return GradientSample(mesh, psi, grad, bc, sample.seed)
    p = sample.problem
    u0, mesh, bc = apply_isometry(p.u0, p.mesh, R, t, p.bc)
    problem = ProblemSpec(mesh, u0, bc, p.horizon, p.kappa, p.dt, p.processor)
    target = type(sample.target)(sample.target.rank, transform_values(sample.target.values, sample.target.rank, R))
    return HeatSample(problem, target, sample.seed)


def _predict(model, sample):
    if isinstance(model, PennModel):
        return model.solve_report(sample.problem)
    return model.predict(sample), None


def _boundary_sets(sample):
    if isinstance(sample, GradientSample):
        return np.zeros(0, np.int64), sample.bc.neumann_idx
    return sample.problem.bc.dirichlet_idx, sample.problem.bc.neumann_idx


def evaluate(model, samples, with_transforms=False, n_transforms=1, seed=0) -> EvalReport:
    """MSE (and boundary-restricted MSE) with standard errors over samples."""
    if not samples:
        raise ValueError("evaluation set is empty")
    rng = np.random.default_rng(seed)
    rows = []
    divergent = 0
    for k, s in enumerate(samples):
        pred, outcome = _predict(model, s)
        row = {"index": k, "seed": s.seed}
        if outcome is not None:
            row["status"] = outcome.status
            divergent += outcome.divergent
        if pred is None:
            rows.append(row)
            continue
        tgt = target_of(s)
        didx, nidx = _boundary_sets(s)
        row.update(mse=_sq(pred, tgt), dirichlet=_sq(pred, tgt, didx), neumann=_sq(pred, tgt, nidx))
        if with_transforms:
            vals = []
            for _ in range(n_transforms):
                R, t = random_isometry(rng)
                ts = transform_sample(s, R, t)
                tp, _ = _predict(model, ts)
                vals.append(math.inf if tp is None else _sq(tp, target_of(ts)))
            row["mse_transformed"] = float(np.mean(vals))
            row["equivariance_deviation"] = max(abs(v - row["mse"]) for v in vals) / max(row["mse"], 1e-300)
        rows.append(row)
    ok = [r for r in rows if "mse" in r]
    mse, sem = mean_sem([r["mse"] for r in ok])
    d_mse, d_sem = mean_sem([r["dirichlet"] for r in ok])
    n_mse, n_sem = mean_sem([r["neumann"] for r in ok])
    rep = EvalReport(len(samples), mse, sem, d_mse, d_sem, n_mse, n_sem, divergent=divergent, per_sample=rows)
    if with_transforms and ok:
        rep.mse_transformed, rep.mse_transformed_sem = mean_sem([r["mse_transformed"] for r in ok])
        rep.equivariance_deviation = max(r["equivariance_deviation"] for r in ok)
    return rep


def persistence_mse(samples) -> float:
    """MSE of predicting ``u(T) = u(0)``."""
    return float(np.mean([np.mean((s.problem.u0.values - s.target.values) ** 2) for s in samples]))


# ------------------------------------------------------------- checkpoints

def save_model(model, path, extra=None):
    d = model.to_dict()
    if extra:
        d["extra"] = extra
    io.write_json(d, path)


def load_model(path):
    return model_from_dict(io.read_json(path))


def fit_normalizer(samples):
    return Normalizer.fit([s.problem.u0.values for s in samples] + [s.target.values for s in samples])


def build_model(kind, rng, samples=None, ablation=None, width=None, solver=None):
    if kind == "gradient":
        return GradientModel.build(rng, width or 4)
    norm = fit_normalizer(samples) if samples else None
    return PennModel.build(rng, width or 16, ablation, solver, norm)

