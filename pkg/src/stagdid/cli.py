"""Command line interface.

Subcommands: ``fit`` (posterior sampling), ``ifgls`` (iterated GLS),
``compare`` (marginal-likelihood model comparison), ``simulate``
(replication studies), ``split`` (training/estimation partition), and
``rerun`` (reproduce a prior run from its manifest).

Every run writes a ``manifest.json`` holding the resolved settings and
the SHA-256 digest of each input file, and no timestamps, so ``rerun``
can reproduce the outputs byte for byte. Exit codes: 0 on success, 1
when estimation fails, 2 on bad input.
"""

from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import os
import sys
from pathlib import Path

import numpy as np
import pandas as pd

from .design import build_design
from .errors import (
    DomainError,
    EstimationError,
    InputError,
    StagdidError,
)
from .gibbs import GibbsConfig, run_chain, summarize
from .ifgls import IfglsConfig, ifgls_fit
from .mlik import (
    MarglikConfig,
    log_marginal_likelihood,
    posterior_model_probs,
)
from .model import AttTable
from .panel import load_panel, split_training, write_panel
from .priors import PriorSpec, default_prior, student_t_prior, training_prior
from .sim import (
    EstimatorSpec,
    application_dgp,
    run_replications,
    small_n_dgp,
    benchmark_dgp,
)

__all__ = ["main"]

OUT_ENV = "STAGDID_OUT"

_VARIANTS = {"full": "full", "pre-pt": "pre_pt"}
_REGIMES = {"default": "default", "trained": "trained", "student-t": "student_t"}


def _sha256(path: Path) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            digest.update(chunk)
    return digest.hexdigest()


def _load(path_str: str):
    path = Path(path_str)
    if not path.is_file():
        raise InputError(f"input file not found: {path}")
    return load_panel(path)


def _write_json(doc: dict, path: Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _write_manifest(
    out: Path, command: str, settings: dict, input_paths: dict[str, str]
) -> None:
    doc = {
        "tool": "stagdid",
        "command": command,
        "settings": settings,
        "inputs": {
            name: {"path": str(Path(p).resolve()), "sha256": _sha256(Path(p))}
            for name, p in input_paths.items()
        },
    }
    _write_json(doc, out / "manifest.json")


def _plot_frame(table: AttTable) -> pd.DataFrame:
    rows = []
    for r in table.rows:
        for quantity, value in (
            ("point", r.point),
            ("lo95", r.lo95),
            ("hi95", r.hi95),
        ):
            rows.append((r.cohort, r.period, r.kind, quantity, value))
    return pd.DataFrame(
        rows, columns=["cohort", "period", "kind", "quantity", "value"]
    )


def _resolve_prior(settings: dict, data, variant: str):
    """Prior and estimation dataset for fit/compare settings."""
    treated = tuple(data.cohorts)
    if settings.get("prior_file"):
        path = Path(settings["prior_file"])
        if not path.is_file():
            raise InputError(f"prior file not found: {path}")
        prior = PriorSpec.from_json(path)
        if prior.beta1.mean.shape[0] != data.T:
            raise InputError(
                f"prior is for T={prior.beta1.mean.shape[0]}, data has T={data.T}"
            )
        if tuple(prior.treated) != treated:
            raise InputError(
                f"prior cohorts {prior.treated} do not match data {treated}"
            )
        return prior, data
    regime = settings["prior_regime"]
    if regime == "student_t":
        return (
            student_t_prior(
                data.T, data.d_w, treated,
                rho=settings["rho"], xi=settings["xi"],
            ),
            data,
        )
    base = default_prior(data.T, data.d_w, treated)
    if regime == "trained":
        train, estimate = split_training(
            data, settings["train_fraction"], settings["seed"] + 1
        )
        prior = training_prior(
            train, base, inflation=settings["inflation"], variant=variant
        )
        return prior, estimate
    return base, data


def _run_fit(settings: dict, out: Path) -> dict:
    data = _load(settings["panel"])
    variant = settings["variant"]
    design = build_design(data.T, data.cohorts)
    prior, fit_data = _resolve_prior(settings, data, variant)
    cfg = GibbsConfig(
        n_draws=settings["draws"],
        burnin=settings["burnin"],
        thin=settings["thin"],
        seed=settings["seed"],
        variant=variant,
    )
    draws = run_chain(fit_data, design, prior, cfg)
    table = summarize(draws, design)
    table.to_csv(out / "att.csv")
    if settings.get("emit_plot_data"):
        _plot_frame(table).to_csv(out / "plot_data.csv", index=False)
    if settings.get("save_draws"):
        draws.to_archive(out / "draws.csv", out / "draws_manifest.json")
    _write_manifest(out, "fit", settings, {"panel": settings["panel"]})
    return {
        "command": "fit",
        "variant": variant,
        "prior_regime": prior.regime,
        "n_units_fit": fit_data.n,
        "att_csv": str(out / "att.csv"),
    }


def _run_ifgls(settings: dict, out: Path) -> dict:
    data = _load(settings["panel"])
    design = build_design(data.T, data.cohorts)
    cfg = IfglsConfig(max_iter=settings["max_iter"], tol=settings["tol"])
    fit = ifgls_fit(data, design, variant=settings["variant"], cfg=cfg)
    if not fit.converged:
        raise EstimationError(
            f"iterated GLS did not converge in {cfg.max_iter} iterations"
        )
    fit.att.to_csv(out / "att.csv")
    if settings.get("emit_plot_data"):
        _plot_frame(fit.att).to_csv(out / "plot_data.csv", index=False)
    _write_json(fit.to_json_dict(), out / "ifgls.json")
    _write_manifest(out, "ifgls", settings, {"panel": settings["panel"]})
    return {
        "command": "ifgls",
        "variant": settings["variant"],
        "iterations": fit.iterations,
        "att_csv": str(out / "att.csv"),
    }


def _run_compare(settings: dict, out: Path) -> dict:
    if settings["prior_regime"] == "student_t":
        raise DomainError(
            "model comparison by marginal likelihood is unavailable under "
            "the student-t regime"
        )
    data = _load(settings["panel"])
    design = build_design(data.T, data.cohorts)
    log_ml: dict[str, float] = {}
    for j, variant in enumerate(("full", "pre_pt")):
        prior, fit_data = _resolve_prior(settings, data, variant)
        cfg = GibbsConfig(
            n_draws=settings["draws"],
            burnin=settings["burnin"],
            thin=settings["thin"],
            seed=settings["seed"] + j,
            variant=variant,
        )
        draws = run_chain(fit_data, design, prior, cfg)
        result = log_marginal_likelihood(
            fit_data, design, prior, draws,
            cfg=MarglikConfig(),
            seed=settings["seed"] + 11 + j,
        )
        log_ml[variant] = result.log_marglik
        table = summarize(draws, design)
        table.to_csv(out / f"att_{variant}.csv")
    prior_probs = settings.get("prior_model_probs")
    names = ("full", "pre_pt")
    probs_arr = posterior_model_probs(
        [log_ml[v] for v in names], prior_probs
    )
    probs = {v: float(p) for v, p in zip(names, probs_arr)}
    chosen = max(probs, key=probs.get)
    doc = {
        "log_marglik": log_ml,
        "posterior_probs": probs,
        "prior_probs": dict(
            zip(names, (0.5, 0.5) if prior_probs is None else prior_probs)
        ),
        "chosen": chosen,
    }
    _write_json(doc, out / "compare.json")
    _write_manifest(out, "compare", settings, {"panel": settings["panel"]})
    return {"command": "compare", **doc}


_PRESETS = {
    "bayes": EstimatorSpec(name="bayes", kind="gibbs", variant="full"),
    "bayes_prept": EstimatorSpec(name="bayes_prept", kind="gibbs", variant="pre_pt"),
    "bayes_ml": EstimatorSpec(name="bayes_ml", kind="select"),
    "bayes_t": EstimatorSpec(name="bayes_t", kind="gibbs", prior="student_t"),
    "bayes_trained": EstimatorSpec(name="bayes_trained", kind="gibbs", prior="trained"),
    "ifgls": EstimatorSpec(name="ifgls", kind="ifgls"),
}

_DGPS = {
    "benchmark": benchmark_dgp,
    "benchmark-prept": lambda: benchmark_dgp(zero_pre_trends=True),
    "small-n": small_n_dgp,
    "application": application_dgp,
}


def _run_simulate(settings: dict, out: Path) -> dict:
    name = settings["dgp"]
    if name not in _DGPS:
        raise InputError(
            f"unknown dgp {name!r}; choose from {sorted(_DGPS)}"
        )
    cfg = _DGPS[name]()
    if settings.get("n"):
        cfg = dataclasses.replace(cfg, n=settings["n"])
    try:
        specs = tuple(_PRESETS[key] for key in settings["estimators"])
    except KeyError as exc:
        raise InputError(
            f"unknown estimator preset {exc.args[0]!r}; "
            f"choose from {sorted(_PRESETS)}"
        ) from None
    report = run_replications(
        cfg,
        estimators=specs,
        n_reps=settings["reps"],
        base_seed=settings["base_seed"],
        jobs=settings["jobs"],
    )
    report.to_csv(out / "report.csv")
    report.to_json(out / "report.json")
    _write_manifest(out, "simulate", settings, {})
    return {
        "command": "simulate",
        "dgp": name,
        "n_reps": report.n_reps,
        "failures": report.failures,
        "report_csv": str(out / "report.csv"),
    }


def _run_split(settings: dict, out: Path) -> dict:
    data = _load(settings["panel"])
    train, estimate = split_training(
        data, settings["fraction"], settings["seed"]
    )
    write_panel(train, out / "train.csv")
    write_panel(estimate, out / "estimate.csv")
    _write_manifest(out, "split", settings, {"panel": settings["panel"]})
    return {
        "command": "split",
        "n_train": train.n,
        "n_estimate": estimate.n,
        "train_csv": str(out / "train.csv"),
    }


_RUNNERS = {
    "fit": _run_fit,
    "ifgls": _run_ifgls,
    "compare": _run_compare,
    "simulate": _run_simulate,
    "split": _run_split,
}


def _run_rerun(settings: dict, out: Path) -> dict:
    manifest_path = Path(settings["manifest"])
    if not manifest_path.is_file():
        raise InputError(f"manifest not found: {manifest_path}")
    try:
        doc = json.loads(manifest_path.read_text(encoding="utf-8"))
        command = doc["command"]
        stored = doc["settings"]
        inputs = doc["inputs"]
    except (json.JSONDecodeError, KeyError) as exc:
        raise InputError(f"malformed manifest: {exc}") from None
    if command not in _RUNNERS:
        raise InputError(f"manifest holds unknown command {command!r}")
    for name, entry in inputs.items():
        path = Path(entry["path"])
        if not path.is_file():
            raise InputError(f"manifest input {name!r} missing: {path}")
        digest = _sha256(path)
        if digest != entry["sha256"]:
            raise InputError(
                f"manifest input {name!r} changed on disk "
                f"(digest {digest[:12]} != recorded {entry['sha256'][:12]})"
            )
        stored = dict(stored, **{name: str(path)})
    return _RUNNERS[command](stored, out)


def _add_common_fit_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--prior-regime", choices=sorted(_REGIMES), default="default")
    p.add_argument("--prior", default=None, metavar="FILE",
                   help="JSON prior file; overrides --prior-regime")
    p.add_argument("--rho", type=float, default=1.0)
    p.add_argument("--xi", type=float, default=1.0)
    p.add_argument("--train-fraction", type=float, default=0.15)
    p.add_argument("--inflation", type=float, default=10.0)
    p.add_argument("--draws", type=int, default=1000)
    p.add_argument("--burnin", type=int, default=500)
    p.add_argument("--thin", type=int, default=1)
    p.add_argument("--seed", type=int, default=0)


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="stagdid",
        description="Staggered difference-in-differences estimation",
    )
    parser.add_argument(
        "--out", default=None,
        help=f"output directory (default: ${OUT_ENV} or the working directory)",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("fit", help="posterior sampling and ATT summaries")
    p.add_argument("panel", help="long-format panel CSV")
    p.add_argument("--variant", choices=sorted(_VARIANTS), default="full")
    _add_common_fit_args(p)
    p.add_argument("--emit-plot-data", action="store_true")
    p.add_argument("--save-draws", action="store_true")

    p = sub.add_parser("ifgls", help="iterated feasible GLS point estimates")
    p.add_argument("panel")
    p.add_argument("--variant", choices=sorted(_VARIANTS), default="full")
    p.add_argument("--max-iter", type=int, default=200)
    p.add_argument("--tol", type=float, default=1e-8)
    p.add_argument("--emit-plot-data", action="store_true")

    p = sub.add_parser("compare", help="marginal-likelihood model comparison")
    p.add_argument("panel")
    _add_common_fit_args(p)
    p.add_argument(
        "--prior-model-probs", default=None, metavar="P_FULL,P_PREPT",
        help="prior model probabilities (default: equal)",
    )

    p = sub.add_parser("simulate", help="replication study on a synthetic DGP")
    p.add_argument("--dgp", default="benchmark", choices=sorted(_DGPS))
    p.add_argument("--n", type=int, default=None, help="override the DGP's n")
    p.add_argument("--reps", type=int, default=20)
    p.add_argument("--base-seed", type=int, default=0)
    p.add_argument("--jobs", type=int, default=1)
    p.add_argument(
        "--estimators", default="bayes,ifgls",
        help=f"comma-separated presets from {sorted(_PRESETS)}",
    )

    p = sub.add_parser("split", help="stratified training/estimation split")
    p.add_argument("panel")
    p.add_argument("--fraction", type=float, default=0.15)
    p.add_argument("--seed", type=int, default=0)

    p = sub.add_parser("rerun", help="reproduce a run from its manifest")
    p.add_argument("manifest", help="path to a manifest.json")

    return parser


def _settings_from_args(args: argparse.Namespace) -> dict:
    if args.command == "fit":
        return {
            "panel": args.panel,
            "variant": _VARIANTS[args.variant],
            "prior_regime": _REGIMES[args.prior_regime],
            "prior_file": args.prior,
            "rho": args.rho,
            "xi": args.xi,
            "train_fraction": args.train_fraction,
            "inflation": args.inflation,
            "draws": args.draws,
            "burnin": args.burnin,
            "thin": args.thin,
            "seed": args.seed,
            "emit_plot_data": args.emit_plot_data,
            "save_draws": args.save_draws,
        }
    if args.command == "ifgls":
        return {
            "panel": args.panel,
            "variant": _VARIANTS[args.variant],
            "max_iter": args.max_iter,
            "tol": args.tol,
            "emit_plot_data": args.emit_plot_data,
        }
    if args.command == "compare":
        probs = None
        if args.prior_model_probs is not None:
            try:
                parts = [float(v) for v in args.prior_model_probs.split(",")]
            except ValueError:
                raise InputError(
                    f"cannot parse --prior-model-probs "
                    f"{args.prior_model_probs!r}"
                ) from None
            if len(parts) != 2:
                raise InputError("--prior-model-probs needs two values")
            probs = parts
        return {
            "panel": args.panel,
            "prior_regime": _REGIMES[args.prior_regime],
            "prior_file": args.prior,
            "rho": args.rho,
            "xi": args.xi,
            "train_fraction": args.train_fraction,
            "inflation": args.inflation,
            "draws": args.draws,
            "burnin": args.burnin,
            "thin": args.thin,
            "seed": args.seed,
            "prior_model_probs": probs,
        }
    if args.command == "simulate":
        return {
            "dgp": args.dgp,
            "n": args.n,
            "reps": args.reps,
            "base_seed": args.base_seed,
            "jobs": args.jobs,
            "estimators": [s for s in args.estimators.split(",") if s],
        }
    if args.command == "split":
        return {
            "panel": args.panel,
            "fraction": args.fraction,
            "seed": args.seed,
        }
    return {"manifest": args.manifest}


def main(argv: list[str] | None = None) -> int:
    parser = _build_parser()
    args = parser.parse_args(argv)
    out = Path(args.out or os.environ.get(OUT_ENV, "."))
    try:
        out.mkdir(parents=True, exist_ok=True)
        settings = _settings_from_args(args)
        runner = _run_rerun if args.command == "rerun" else _RUNNERS[args.command]
        result = runner(settings, out)
    except StagdidError as exc:
        doc = {
            "error": type(exc).__name__,
            "code": getattr(exc, "code", "error"),
            "message": str(exc),
        }
        print(json.dumps(doc), file=sys.stderr)
        return 2 if isinstance(exc, InputError) else 1
    except np.linalg.LinAlgError as exc:
        doc = {
            "error": "LinAlgError",
            "code": "estimation-error",
            "message": str(exc),
        }
        print(json.dumps(doc), file=sys.stderr)
        return 1
    print(json.dumps(result, sort_keys=True))
    return 0


if __name__ == "__main__":
    sys.exit(main())
