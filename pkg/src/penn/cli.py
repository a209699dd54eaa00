"""``penn`` command line: gen, train, eval, audit, export.

Exit codes: 0 success, 1 runtime failure (structured JSON on stderr),
2 usage error.
"""

from __future__ import annotations

import argparse
import configparser
import json
import logging
import sys
from pathlib import Path

import numpy as np

from penn import io

log = logging.getLogger("penn")

DEFAULTS = {
    "kind": "heat",
    "seed": "0",
    "train": "20",
    "val": "5",
    "test": "5",
    "refine": "4",
    "dt_fine": "",
    "cells_min": "",
    "cells_max": "",
    "epochs": "200",
    "lr": "0.001",
    "width": "",
    "ablation": "penn",
    "operator": "neumann",
    "max_iterations": "8",
    "alpha0": "0.1",
    "convergence_epsilon": "1e-8",
    "alpha_max": "1000",
    "time_budget": "",
    "max_restarts": "2",
}


class UsageError(Exception):
    pass


def load_config(path=None, overrides=None) -> dict:
    """Defaults < config file ``[penn]`` section < command-line flags."""
    cp = configparser.ConfigParser()
    cp.read_dict({"penn": DEFAULTS})
    if path is not None:
        if not Path(path).is_file():
            raise FileNotFoundError(f"config file not found: {path}")
        cp.read(path)
        unknown = set(cp["penn"]) - set(DEFAULTS)
        if unknown:
            raise UsageError(f"unknown config keys: {', '.join(sorted(unknown))}")
    for k, v in (overrides or {}).items():
        if v is not None:
            cp["penn"][k] = str(v)
    return dict(cp["penn"])


def write_config(cfg: dict, path):
    cp = configparser.ConfigParser()
    cp.read_dict({"penn": cfg})
    with open(path, "w") as fh:
        cp.write(fh)


def _opt(cfg, key, cast):
    v = cfg.get(key, "")
    return None if v == "" else cast(v)


def _solver_cfg(cfg):
    from penn.solver import SolverConfig

    return SolverConfig(
        max_iterations=int(cfg["max_iterations"]),
        alpha0=float(cfg["alpha0"]),
        convergence_epsilon=float(cfg["convergence_epsilon"]),
        alpha_max=float(cfg["alpha_max"]),
    )


# ---------------------------------------------------------------- commands

def cmd_gen(args):
    from penn.datagen import make_dataset

    cfg = load_config(args.config, {"kind": args.kind, "seed": args.seed, "train": args.train, "val": args.val,
                                    "test": args.test, "dt_fine": args.dt_fine, "refine": args.refine})
    kind = cfg["kind"]
    if kind not in ("gradient", "heat"):
        raise UsageError(f"--kind must be gradient or heat, got {kind!r}")
    opts = {"cells_min": _opt(cfg, "cells_min", int), "cells_max": _opt(cfg, "cells_max", int)}
    if kind == "heat":
        opts.update(refine=int(cfg["refine"]), dt_fine=_opt(cfg, "dt_fine", float))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    manifest = make_dataset(kind, int(cfg["train"]), int(cfg["val"]), int(cfg["test"]), int(cfg["seed"]), out, **opts)
    write_config(cfg, out / "resolved_config.ini")
    print(json.dumps({"dataset": str(out), "samples": len(manifest["samples"])}))


def cmd_train(args):
    from penn.datagen import dataset_kind, load_dataset
    from penn.model import Ablation, GradientModel
    from penn.training import build_model, evaluate, save_model, train

    cfg = load_config(args.config, {"epochs": args.epochs, "lr": args.lr, "seed": args.seed,
                                    "ablation": args.ablation, "time_budget": args.time_budget})
    kind = dataset_kind(args.data)
    train_set = load_dataset(args.data, "train")
    val_set = load_dataset(args.data, "val")
    if not train_set:
        raise ValueError("dataset has no training samples")
    rng = np.random.default_rng(int(cfg["seed"]))
    if kind == "gradient":
        if cfg["operator"] not in ("neumann", "isogcn"):
            raise UsageError("operator must be neumann or isogcn")
        model = GradientModel.build(rng, _opt(cfg, "width", int) or 4, normalize=cfg["operator"] == "neumann")
    else:
        model = build_model("heat", rng, train_set, Ablation.named(cfg["ablation"]), _opt(cfg, "width", int),
                            _solver_cfg(cfg))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_config(cfg, out / "resolved_config.ini")
    history = train(model, train_set, int(cfg["epochs"]), float(cfg["lr"]), val_set, int(cfg["seed"]),
                    int(cfg["max_restarts"]), _opt(cfg, "time_budget", float))
    save_model(model, out / "model.json")
    io.write_json(history, out / "history.json")
    summary = {"model": str(out / "model.json"), "best_val_loss": history["best_val_loss"],
               "epochs_run": history["epochs_run"], "restarts": history["restarts"]}
    if val_set:
        summary["val_mse"] = evaluate(model, val_set).mse
    print(json.dumps(summary))


def cmd_eval(args):
    from penn.datagen import load_dataset
    from penn.training import evaluate, load_model

    model = load_model(args.model)
    samples = load_dataset(args.data, args.split)
    if not samples:
        raise ValueError(f"no samples in split {args.split!r}")
    rep = evaluate(model, samples, with_transforms=args.transforms, n_transforms=args.n_transforms, seed=args.seed)
    out = Path(args.out) if args.out else Path(args.model).parent
    out.mkdir(parents=True, exist_ok=True)
    rep.write_json(out / "eval_report.json")
    rep.write_csv(out / "eval_metrics.csv")
    write_config({"model": args.model, "data": args.data, "split": args.split, "transforms": args.transforms,
                  "n_transforms": args.n_transforms, "seed": args.seed}, out / "eval_config.ini")
    d = rep.to_dict()
    d.pop("per_sample")
    if rep.mse_transformed is not None and rep.mse:
        d["mse_transformed/mse_plain"] = rep.mse_transformed / rep.mse
    print(json.dumps(d))


def cmd_audit(args):
    from penn.audit import audit_model
    from penn.datagen import load_dataset
    from penn.training import load_model

    model = load_model(args.model)
    samples = load_dataset(args.data, args.split)
    if not samples:
        raise ValueError(f"no samples in split {args.split!r}")
    report = audit_model(model, samples, n_transforms=args.n_transforms, seed=args.seed)
    if args.out:
        Path(args.out).parent.mkdir(parents=True, exist_ok=True)
        io.write_json(report, args.out)
    print(json.dumps(report))


def cmd_export(args):
    from penn.datagen import GradientSample, read_sample
    from penn.mesh import TensorField
    from penn.training import load_model

    if args.format not in ("vtk", "csv"):
        raise UsageError(f"unknown format {args.format!r}")
    model = load_model(args.model)
    sample = read_sample(args.sample)
    pred = model.predict(sample if isinstance(sample, GradientSample) else sample.problem)
    name, truth = ("grad", sample.grad) if isinstance(sample, GradientSample) else ("u", sample.target)
    pred_f = TensorField(truth.rank, pred)
    writer = io.write_vtk if args.format == "vtk" else io.write_fields_csv
    writer(args.out, sample.mesh, {name: pred_f})
    if args.truth_out:
        writer(args.truth_out, sample.mesh, {name: truth})
    print(json.dumps({"prediction": args.out, "truth": args.truth_out}))


# ------------------------------------------------------------------ parser

class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(2, f"{self.prog}: error: {message}\n")


def build_parser():
    p = _Parser(prog="penn", description="Physics-embedded neural network toolkit")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("gen", help="generate a dataset")
    g.add_argument("--kind", choices=["gradient", "heat"])
    g.add_argument("--out", required=True)
    g.add_argument("--seed", type=int)
    g.add_argument("--train", type=int)
    g.add_argument("--val", type=int)
    g.add_argument("--test", type=int)
    g.add_argument("--refine", type=int)
    g.add_argument("--dt-fine", type=float)
    g.add_argument("--config")
    g.set_defaults(func=cmd_gen)

    t = sub.add_parser("train", help="train a model")
    t.add_argument("--data", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--config")
    t.add_argument("--epochs", type=int)
    t.add_argument("--lr", type=float)
    t.add_argument("--seed", type=int)
    t.add_argument("--ablation")
    t.add_argument("--time-budget", type=float)
    t.set_defaults(func=cmd_train)

    for name, func, helptext in (("eval", cmd_eval, "evaluate a model"), ("audit", cmd_audit, "audit a model")):
        e = sub.add_parser(name, help=helptext)
        e.add_argument("--model", required=True)
        e.add_argument("--data", required=True)
        e.add_argument("--split", default="test")
        e.add_argument("--out")
        e.add_argument("--seed", type=int, default=0)
        e.add_argument("--n-transforms", type=int, default=3)
        if name == "eval":
            e.add_argument("--transforms", action="store_true")
        e.set_defaults(func=func)

    x = sub.add_parser("export", help="write predicted fields as VTK or CSV")
    x.add_argument("--model", required=True)
    x.add_argument("--sample", required=True)
    x.add_argument("--format", required=True)
    x.add_argument("--out", required=True)
    x.add_argument("--truth-out")
    x.set_defaults(func=cmd_export)
    return p


def _error_payload(exc):
    d = {"error": type(exc).__name__, "message": str(exc)}
    for attr in ("required_dt", "iteration"):
        if hasattr(exc, attr):
            d[attr] = getattr(exc, attr)
    return d


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        stream=sys.stderr,
        format="level=%(levelname)s logger=%(name)s msg=%(message)s",
    )
    try:
        args.func(args)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"penn: error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # module errors become exit 1 with a JSON payload
        log.debug("command failed", exc_info=True)
        print(json.dumps(_error_payload(exc)), file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
