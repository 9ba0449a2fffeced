"""Command-line entry point.

Subcommands: simulate, estimate, experiment, verify. All runs are driven by
a YAML config (sections below); individual keys can be overridden with
--set section.key=value. Exit codes: 0 success, 1 usage/config error,
2 compute failure, 3 property-suite failure.
"""

import argparse
import json
import math
import os
import sys
import time

import numpy as np
import yaml

from . import __version__
from .errors import NsBayesError
from .experiments import (
    ExperimentSpec,
    emit,
    run_experiment,
)
from .model import load_dataset, rng_from, save_dataset, simulate
from .priors import prior_from_spec, sample_mu, validate_prior
from . import estimators as est_mod
from .experiments import _run_named_estimator
from . import verification

_ALLOWED = {
    "problem": {"N", "J", "sigma2_true", "mu_spec", "seed"},
    "prior": None,        # validated by prior_from_spec
    "priors": None,
    "estimators": None,
    "integration": {"method", "rel_tol", "max_nodes", "importance_samples"},
    "experiment": {"kind", "N_grid", "replicates", "master_seed", "mu_mode",
                   "transforms", "alpha"},
    "output": {"dir", "formats", "name"},
}


class ConfigError(Exception):
    pass


def load_config(path):
    try:
        with open(path) as fh:
            cfg = yaml.safe_load(fh) or {}
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    except yaml.YAMLError as exc:
        raise ConfigError(f"config {path} is not valid YAML: {exc}") from exc
    if not isinstance(cfg, dict):
        raise ConfigError("config root must be a mapping of sections")
    for key, sub in cfg.items():
        if key not in _ALLOWED:
            raise ConfigError(f"unknown config section {key!r}")
        allowed = _ALLOWED[key]
        if allowed is not None:
            if not isinstance(sub, dict):
                raise ConfigError(f"section {key!r} must be a mapping")
            unknown = set(sub) - allowed
            if unknown:
                raise ConfigError(f"unknown keys in section {key!r}: {sorted(unknown)}")
    return cfg


def _apply_overrides(cfg, pairs):
    for pair in pairs or []:
        if "=" not in pair:
            raise ConfigError(f"--set expects section.key=value, got {pair!r}")
        dotted, raw = pair.split("=", 1)
        parts = dotted.split(".")
        node = cfg
        for p in parts[:-1]:
            node = node.setdefault(p, {})
        node[parts[-1]] = yaml.safe_load(raw)
    return cfg


def _priors_from(cfg):
    if "priors" in cfg:
        return [prior_from_spec(p) for p in cfg["priors"]], cfg["priors"]
    if "prior" in cfg:
        return [prior_from_spec(cfg["prior"])], [cfg["prior"]]
    raise ConfigError("config needs a 'prior' or 'priors' section")


def _problem(cfg):
    prob = cfg.get("problem")
    if not prob:
        raise ConfigError("config needs a 'problem' section")
    for key in ("N", "J", "sigma2_true"):
        if key not in prob:
            raise ConfigError(f"problem section missing {key!r}")
    if prob["J"] < 2:
        raise ConfigError("problem.J must be >= 2")
    return prob


def cmd_simulate(cfg, args):
    prob = _problem(cfg)
    seed = prob.get("seed", 0)
    mu_spec = prob.get("mu_spec", 0.0)
    rng = rng_from(seed)
    if mu_spec == "prior":
        priors, _ = _priors_from(cfg)
        mu = sample_mu(priors[0], prob["N"], prob["sigma2_true"], rng)
    else:
        mu = np.broadcast_to(np.atleast_1d(np.asarray(mu_spec, float)), (prob["N"],))
    data = simulate(prob["N"], prob["J"], prob["sigma2_true"], mu, rng=rng)
    out = args.out or os.path.join(cfg.get("output", {}).get("dir", "."), "dataset.csv")
    os.makedirs(os.path.dirname(out) or ".", exist_ok=True)
    save_dataset(data, out, meta={
        "sigma2_true": prob["sigma2_true"],
        "mu_spec": mu_spec if isinstance(mu_spec, (int, float, str)) else list(mu_spec),
        "seed": seed,
        "N": prob["N"],
        "J": prob["J"],
    })
    print(f"wrote {out} and {out}.json")
    return 0


def cmd_estimate(cfg, args):
    if not os.path.exists(args.data):
        print(f"error: dataset file not found: {args.data}", file=sys.stderr)
        return 1
    data, _meta = load_dataset(args.data)
    priors, _ = _priors_from(cfg)
    names = cfg.get("estimators") or ["rkl", "mle", "corrected"]
    results, any_failed = [], False
    for prior in priors:
        for name in names:
            try:
                est = _run_named_estimator(name, data, prior)
                results.append({
                    "prior": prior.label, "estimator": name,
                    "sigma2_hat": est.sigma2_hat, "status": "ok",
                })
            except NsBayesError as exc:
                any_failed = True
                results.append({
                    "prior": prior.label, "estimator": name,
                    "sigma2_hat": None,
                    "status": f"{type(exc).__name__}: {exc}",
                })
    width = max(len(r["estimator"]) for r in results)
    for r in results:
        val = "-" if r["sigma2_hat"] is None else f"{r['sigma2_hat']:.10g}"
        print(f"{r['estimator']:<{width}}  {val:>16}  {r['status']}  [{r['prior']}]")
    if args.json_out:
        with open(args.json_out, "w") as fh:
            json.dump(results, fh, indent=2)
    if any_failed and args.strict:
        return 2
    return 0


def cmd_experiment(cfg, args):
    exp = cfg.get("experiment")
    if not exp or "kind" not in exp:
        raise ConfigError("config needs an 'experiment' section with a kind")
    prob = _problem(cfg)
    _, prior_specs = _priors_from(cfg)
    spec = ExperimentSpec(
        kind=exp["kind"],
        N_grid=exp.get("N_grid", [prob["N"]]),
        J=prob["J"],
        true_sigma2=prob["sigma2_true"],
        priors=prior_specs,
        estimators=cfg.get("estimators") or ["rkl", "mle", "corrected"],
        replicates=exp.get("replicates", 1),
        master_seed=exp.get("master_seed", 0),
        mu_mode=exp.get("mu_mode", {"fixed": 0.0}),
        transforms=exp.get("transforms", ["sqrt", "log", "reciprocal"]),
        alpha=exp.get("alpha"),
    )
    table = run_experiment(spec)
    out = cfg.get("output", {})
    run_name = out.get("name") or time.strftime("%Y%m%dT%H%M%S")
    run_dir = os.path.join(out.get("dir", "runs"), spec.kind, run_name)
    os.makedirs(run_dir, exist_ok=True)
    formats = out.get("formats", ["csv", "json"])
    paths = []
    for fmt in formats:
        fname = {"csv": "results.csv", "json": "manifest.json",
                 "svg_plot": "plot.svg"}[fmt]
        path = os.path.join(run_dir, fname)
        emit(table, fmt, path)
        paths.append(path)
    n_failed = sum(1 for r in table.rows if r.status != "ok")
    print(f"{len(table.rows)} rows ({n_failed} non-ok) -> {', '.join(paths)}")
    return 0


def cmd_verify(cfg, args):
    results = verification.run_all(seed=args.seed, perturb=args.perturb)
    all_ok = True
    for r in results:
        flag = "PASS" if r["passed"] else "FAIL"
        print(f"{flag}  {r['name']:<24} max deviation {r['max_deviation']:.3g}  ({r['details']})")
        all_ok &= r["passed"]
    return 0 if all_ok else 3


def build_parser():
    p = argparse.ArgumentParser(
        prog="nsbayes",
        description="Reverse-KL Bayes estimation and experiments for the "
                    "grouped-Gaussian shared-variance problem",
    )
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, needs_config=True):
        sp.add_argument("--config", required=needs_config,
                        help="YAML config file")
        sp.add_argument("--set", action="append", dest="overrides", metavar="K=V",
                        help="override a config key, e.g. --set experiment.master_seed=7")

    sp = sub.add_parser("simulate", help="write a dataset CSV + metadata JSON")
    common(sp)
    sp.add_argument("--out", help="output CSV path")
    sp.set_defaults(fn=cmd_simulate)

    sp = sub.add_parser("estimate", help="run estimators on a dataset file")
    common(sp)
    sp.add_argument("--data", required=True, help="dataset CSV path")
    sp.add_argument("--json-out", help="also write estimates as JSON")
    sp.add_argument("--strict", action="store_true",
                    help="exit 2 if any estimator errored")
    sp.set_defaults(fn=cmd_estimate)

    sp = sub.add_parser("experiment", help="run a declarative experiment")
    common(sp)
    sp.set_defaults(fn=cmd_experiment)

    sp = sub.add_parser("verify", help="run the built-in property suites")
    common(sp, needs_config=False)
    sp.add_argument("--seed", type=int, default=2024)
    sp.add_argument("--perturb", type=float, default=0.0,
                    help="self-test: perturb the reference precision by this "
                         "fraction (a nonzero value must make verify fail)")
    sp.set_defaults(fn=cmd_verify)
    return p


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        cfg = load_config(args.config) if getattr(args, "config", None) else {}
        cfg = _apply_overrides(cfg, getattr(args, "overrides", None))
        return args.fn(cfg, args)
    except (ConfigError, ValueError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 1
    except NsBayesError as exc:
        print(f"compute error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
