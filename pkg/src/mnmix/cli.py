"""Command-line interface: ``python -m mnmix <command> ...``.

Exit status is 0 on success, 2 on invalid input and 3 when ``--strict``
is given and some parameter fails the R-hat check.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from dataclasses import asdict, fields
from pathlib import Path

import numpy as np

from . import __version__
from .correlations import correlation_report
from .distributions import DomainError, RngStream
from .io import (IngestError, atomic_write, emit_results, parse_config, parse_counts_csv,
                 write_counts_csv, write_json)
from .metrics import mann_kendall, model_bic, posterior_point
from .model import ModelSpec
from .sampler import SamplerConfig, SamplerError, fit
from .simulation import Scenario, run_study, simulate_dataset

log = logging.getLogger("mnmix")

EXIT_OK, EXIT_INVALID, EXIT_CONVERGENCE = 0, 2, 3

# built-in defaults; a --config file overrides these and flags override both
DEFAULTS = {
    "seed": 0, "chains": 4, "iters": 50_000, "burn": 10_000, "thin": 5, "rhat": 1.05,
    "detection_dim": "C", "hurdle": False, "ar": False, "covariates": "", "out": ".",
    "strict": False, "wide_stops": False, "draws": True,
    "R": 10, "T": 5, "S": 5, "K": 5, "p_regime": "large", "lam_regime": "large",
    "p_regimes": "large", "lam_regimes": "large", "theta": None, "thetas": "",
    "phi": None, "replicates": 20, "jobs": 1, "variants": "mnm,hurdle",
    "likelihood": "integrated", "column": None,
}

VARIANTS = {
    "mnm": (False, False),
    "hurdle": (True, False),
    "ar": (False, True),
    "hurdle-ar": (True, True),
}


def _common(p, sampler=True, model=True):
    p.add_argument("--config", help="flat key = value file; flags override its entries")
    p.add_argument("--out", help="output directory")
    p.add_argument("--seed", type=int)
    p.add_argument("-v", "--verbose", action="store_true")
    if sampler:
        p.add_argument("--chains", type=int)
        p.add_argument("--iters", type=int)
        p.add_argument("--burn", type=int)
        p.add_argument("--thin", type=int)
        p.add_argument("--rhat", type=float, help="R-hat flag threshold")
        p.add_argument("--strict", action="store_true", default=None,
                       help="exit with status 3 when any R-hat reaches the threshold")
    if model:
        p.add_argument("--detection-dim", choices=("A", "B", "C"))
        p.add_argument("--hurdle", action="store_true", default=None)
        p.add_argument("--ar", action="store_true", default=None)


def build_parser():
    parser = argparse.ArgumentParser(prog="mnmix", description="Multi-species N-mixture models")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="simulate a dataset and its ground truth")
    _common(p, sampler=False)
    for dim in ("R", "T", "S", "K"):
        p.add_argument(f"--{dim}", dest=dim, type=int)
    p.add_argument("--p-regime", choices=("small", "large"))
    p.add_argument("--lam-regime", choices=("small", "large"))
    p.add_argument("--theta", type=float)
    p.add_argument("--phi", type=float)

    p = sub.add_parser("fit", help="fit a model to a count CSV")
    _common(p)
    p.add_argument("data")
    p.add_argument("--covariates", help="comma-separated site columns; a*b adds a product term")
    p.add_argument("--wide-stops", action="store_true", default=None)
    p.add_argument("--no-draws", dest="draws", action="store_false", default=None,
                   help="do not write the draws CSV")

    p = sub.add_parser("corr", help="correlation report from a parameter point JSON")
    _common(p, sampler=False, model=False)
    p.add_argument("params", help="JSON with mu_a, Sigma_a and optionally theta, phi, N, X, beta")
    p.add_argument("--hurdle", action="store_true", default=None)
    p.add_argument("--ar", action="store_true", default=None)

    p = sub.add_parser("study", help="simulation study over a scenario grid")
    _common(p)
    for dim in ("R", "T", "S", "K"):
        p.add_argument(f"--{dim}", dest=dim, type=int)
    p.add_argument("--p-regimes", help="comma-separated, e.g. small,large")
    p.add_argument("--lam-regimes")
    p.add_argument("--thetas", help="comma-separated zero probabilities (hurdle models)")
    p.add_argument("--replicates", type=int)
    p.add_argument("--jobs", type=int)
    p.add_argument("--manifest", help="rerun the study recorded in this manifest")

    p = sub.add_parser("compare", help="BIC table over datasets and model variants")
    _common(p, model=False)
    p.add_argument("data", nargs="+")
    p.add_argument("--variants", help="comma-separated from mnm,hurdle,ar,hurdle-ar")
    p.add_argument("--detection-dim", choices=("A", "B", "C"))
    p.add_argument("--covariates")
    p.add_argument("--wide-stops", action="store_true", default=None)
    p.add_argument("--likelihood", choices=("integrated", "plugin"))

    p = sub.add_parser("trend", help="Mann-Kendall test per series")
    _common(p, sampler=False, model=False)
    p.add_argument("series", help="CSV with year, an optional species column and a value column")
    p.add_argument("--column", help="value column (default: last column)")
    return parser


def resolve(args):
    """Merge built-in defaults, the config file and explicit flags."""
    opts = dict(DEFAULTS)
    if getattr(args, "config", None):
        opts.update(parse_config(args.config))
    for k, v in vars(args).items():
        if v is not None:
            opts[k] = v
    return opts


def _spec(opts, hurdle=None, ar=None):
    return ModelSpec(hurdle=bool(opts["hurdle"] if hurdle is None else hurdle),
                     autoregressive=bool(opts["ar"] if ar is None else ar),
                     detection_dim=str(opts["detection_dim"]))


def _sampler(opts):
    return SamplerConfig(n_chains=int(opts["chains"]), n_iter=int(opts["iters"]), n_burn=int(opts["burn"]),
                         thin=int(opts["thin"]), seed=int(opts["seed"]), rhat_threshold=float(opts["rhat"]))


def _list(value):
    if value is None or value == "":
        return []
    if isinstance(value, (list, tuple)):
        return list(value)
    return [v.strip() for v in str(value).split(",") if v.strip()]


def _manifest_base(command, opts):
    return {"command": command, "version": __version__,
            "options": {k: v for k, v in sorted(opts.items()) if k not in ("verbose", "config", "func")}}


def cmd_simulate(opts):
    spec = _spec(opts)
    scen = Scenario(R=int(opts["R"]), T=int(opts["T"]), S=int(opts["S"]), K=int(opts["K"]),
                    p_regime=opts["p_regime"], lam_regime=opts["lam_regime"],
                    theta=None if opts["theta"] is None else float(opts["theta"]),
                    phi=None if opts["phi"] is None else float(opts["phi"]), seed=int(opts["seed"]))
    data, truth = simulate_dataset(spec, scen, RngStream(int(opts["seed"])))
    out = Path(opts["out"])
    write_counts_csv(data, out / "counts.csv")
    write_json(truth.to_dict(), out / "truth.json")
    write_json(_manifest_base("simulate", opts), out / "manifest.json")
    log.info("wrote %s", out / "counts.csv")
    return EXIT_OK


def cmd_fit(opts):
    data = parse_counts_csv(opts["data"], wide_stops=bool(opts["wide_stops"]),
                            covariates=_list(opts["covariates"]))
    spec = _spec(opts)
    cfg = _sampler(opts)
    draws, summary = fit(data, spec, cfg)
    point = posterior_point(draws)
    N = draws.posterior_mean("N") if "N" in draws.blocks else None
    rs = draws.spec
    report = correlation_report(point.mu_a, point.Sigma_a, hurdle=rs.hurdle, autoregressive=rs.autoregressive,
                                theta=point.theta, X=data.X, beta=point.beta, phi=point.phi, N=N,
                                species=data.species_ids, sites=data.site_ids, R=data.R)
    out = Path(opts["out"])
    emit_results(out, summary=summary, report=report, draws=draws, data=data, write_draws=bool(opts["draws"]))
    write_json(_point_json(point, N, data), out / "posterior_point.json")
    man = _manifest_base("fit", opts)
    man["flagged"] = summary.flagged
    write_json(man, out / "manifest.json")
    if summary.flagged:
        log.warning("%d parameters with R-hat >= %g", len(summary.flagged), cfg.rhat_threshold)
        if opts["strict"]:
            return EXIT_CONVERGENCE
    return EXIT_OK


def _point_json(point, N, data):
    d = {"mu_a": point.mu_a.tolist(), "Sigma_a": point.Sigma_a.tolist(),
         "species": list(data.species_ids), "sites": list(data.site_ids)}
    if point.theta is not None:
        d["theta"] = point.theta
    if point.phi is not None:
        d["phi"] = point.phi.tolist()
    if point.beta.size:
        d["beta"] = point.beta.tolist()
        d["X"] = data.X.tolist()
    if N is not None:
        d["N"] = N.tolist()
    return d


def cmd_corr(opts):
    with open(opts["params"], encoding="utf-8") as fh:
        d = json.load(fh)
    try:
        mu_a, Sigma_a = np.asarray(d["mu_a"], float), np.asarray(d["Sigma_a"], float)
    except KeyError as exc:
        raise IngestError(f"parameter file lacks {exc.args[0]}") from None
    hurdle = bool(opts["hurdle"]) or "theta" in d
    ar = bool(opts["ar"]) or "phi" in d
    arr = {k: np.asarray(d[k], float) for k in ("phi", "N", "X", "beta") if k in d}
    report = correlation_report(mu_a, Sigma_a, hurdle=hurdle, autoregressive=ar, theta=d.get("theta"),
                                X=arr.get("X"), beta=arr.get("beta"), phi=arr.get("phi"), N=arr.get("N"),
                                species=tuple(d.get("species", ())), sites=tuple(d.get("sites", ())),
                                R=d.get("R"))
    emit_results(opts["out"], report=report)
    return EXIT_OK


def _study_from_opts(opts):
    thetas = [float(t) for t in _list(opts["thetas"])] or [opts["theta"]]
    spec = _spec(opts)
    if spec.hurdle and thetas == [None]:
        raise ValueError("hurdle studies need --thetas")
    if not spec.hurdle:
        thetas = [None]
    scenarios = [Scenario(R=int(opts["R"]), T=int(opts["T"]), S=int(opts["S"]), K=int(opts["K"]),
                          p_regime=pr, lam_regime=lr, theta=th, replicates=int(opts["replicates"]),
                          seed=int(opts["seed"]))
                 for pr in _list(opts["p_regimes"]) for lr in _list(opts["lam_regimes"]) for th in thetas]
    return spec, scenarios, _sampler(opts)


def study_manifest(spec, scenarios, cfg, jobs=1):
    """JSON-ready record that fully determines a study run."""
    spec_d = {"hurdle": spec.hurdle, "autoregressive": spec.autoregressive, "detection_dim": spec.detection_dim}
    cfg_d = {f.name: getattr(cfg, f.name) for f in fields(cfg) if f.name not in ("scales", "fixed")}
    return {"command": "study", "version": __version__, "spec": spec_d,
            "scenarios": [asdict(s) for s in scenarios], "sampler": cfg_d, "jobs": jobs}


def load_study_manifest(path):
    with open(path, encoding="utf-8") as fh:
        m = json.load(fh)
    if m.get("command") != "study":
        raise IngestError(f"{path} is not a study manifest")
    spec = ModelSpec(**m["spec"])
    scenarios = [Scenario(**s) for s in m["scenarios"]]
    cfg = SamplerConfig(**m["sampler"])
    return spec, scenarios, cfg, int(m.get("jobs", 1))


def cmd_study(opts):
    if opts.get("manifest"):
        spec, scenarios, cfg, jobs = load_study_manifest(opts["manifest"])
        if opts["jobs"] != DEFAULTS["jobs"]:
            jobs = int(opts["jobs"])  # parallelism does not change results
    else:
        spec, scenarios, cfg = _study_from_opts(opts)
        jobs = int(opts["jobs"])
    rows = run_study(spec, scenarios, cfg, n_jobs=jobs)
    out = Path(opts["out"])
    emit_results(out, rows=rows)
    write_json(study_manifest(spec, scenarios, cfg, jobs), out / "manifest.json")
    return EXIT_OK


def cmd_compare(opts):
    cfg = _sampler(opts)
    variants = _list(opts["variants"])
    bad = [v for v in variants if v not in VARIANTS]
    if bad:
        raise ValueError(f"unknown variants: {', '.join(bad)}")
    out_rows = []
    flagged = False
    for path in opts["data"]:
        data = parse_counts_csv(path, wide_stops=bool(opts["wide_stops"]), covariates=_list(opts["covariates"]))
        for v in variants:
            hurdle, ar = VARIANTS[v]
            if ar and data.K < 2:
                log.warning("skipping %s on %s: needs at least two years", v, path)
                continue
            spec = ModelSpec(hurdle=hurdle, autoregressive=ar, detection_dim=str(opts["detection_dim"]))
            draws, summary = fit(data, spec, cfg)
            flagged |= bool(summary.flagged)
            value, ll, k = model_bic(data, draws, mode=opts["likelihood"], seed=cfg.seed)
            out_rows.append((path, spec.name, k, repr(ll), repr(value)))
    out = Path(opts["out"])
    out.mkdir(parents=True, exist_ok=True)
    with atomic_write(out / "bic.csv") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["dataset", "model", "n_params", "loglik", "bic"])
        w.writerows(out_rows)
    for r in out_rows:
        print(f"{r[0]}\t{r[1]}\t{r[2]}\t{float(r[4]):.2f}")
    if flagged and opts["strict"]:
        return EXIT_CONVERGENCE
    return EXIT_OK


def cmd_trend(opts):
    with open(opts["series"], newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        cols = reader.fieldnames or []
        if "year" not in cols:
            raise IngestError("series CSV needs a year column")
        col = opts["column"] or cols[-1]
        if col not in cols:
            raise IngestError(f"no column {col!r}")
        groups = {}
        for row, rec in enumerate(reader, start=2):
            try:
                groups.setdefault(rec.get("species", ""), []).append((float(rec["year"]), float(rec[col])))
            except ValueError:
                raise IngestError(f"row {row}: non-numeric year or value") from None
    results = []
    for name in sorted(groups):
        series = [v for _, v in sorted(groups[name])]
        if len(series) < 3:
            log.warning("skipping series %r: fewer than three values", name)
            continue
        mk = mann_kendall(series)
        results.append((name, len(series), mk.S, repr(mk.tau), repr(mk.p), mk.method))
        print(f"{name or '-'}\tn={len(series)}\tS={mk.S}\ttau={mk.tau:.4f}\tp={mk.p:.4g}")
    out = Path(opts["out"])
    out.mkdir(parents=True, exist_ok=True)
    with atomic_write(out / "trend.csv") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["species", "n", "S", "tau", "p_one_sided", "method"])
        w.writerows(results)
    return EXIT_OK


COMMANDS = {"simulate": cmd_simulate, "fit": cmd_fit, "corr": cmd_corr, "study": cmd_study,
            "compare": cmd_compare, "trend": cmd_trend}


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        opts = resolve(args)
        return COMMANDS[args.command](opts)
    except SamplerError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONVERGENCE
    except (IngestError, DomainError, ValueError, KeyError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID


if __name__ == "__main__":
    sys.exit(main())
