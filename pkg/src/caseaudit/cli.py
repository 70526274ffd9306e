"""Command-line entry point: ``caseaudit {simulate,fit,lrt,ci,aggregate}``.

Exit codes: 0 success, 1 runtime or data error, 2 usage error.
"""

from __future__ import annotations

import argparse
import csv
import datetime as dt
import hashlib
import json
import logging
import sys
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from .estimation import (
    HYPOTHESES,
    EstimationError,
    FitResult,
    fit_mle,
    lrt,
    probability_ci,
)
from .ingest import (
    IngestError,
    aggregate_table,
    build_sample,
    parse_calendar,
    parse_events,
    parse_seeds,
    scan_class_labels,
    write_calendar,
    write_events,
    write_seeds,
    write_units_jsonl,
)
from .model import PROPORTION, VARIANTS, CourtConfig, ModelError, ModelSpec, Scenario
from .simulate import GeneratorSpec, SimulationError, random_seed_counts, simulate_assignments

log = logging.getLogger("caseaudit")

DEFAULT_CLASSES = (
    "AC", "ACO", "ADI", "AI", "ARE", "HC", "Inq", "MI", "MS", "Pet", "RE", "RHC", "RMS", "Rcl",
)
RULE_NAMES = {
    "uniform": "uniform_available",
    "proportion-penalized": "proportion_penalized",
    "fixed-bias": "fixed_bias",
    "true-model": "true_model",
}


class UsageError(Exception):
    pass


# ---------------------------------------------------------------------------
# Manifest


def _sha256(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


@dataclass
class RunManifest:
    """Provenance of one command run. Written next to its outputs; the
    timestamp lives only here so the outputs themselves stay reproducible."""

    command: str
    options: dict
    inputs: list[dict] = field(default_factory=list)
    outputs: list[str] = field(default_factory=list)
    config: dict | None = None
    specs: list[str] = field(default_factory=list)
    seed: int | None = None
    tool_version: str = __version__
    schema: str = "caseaudit.manifest/1"
    created: str = ""

    def add_input(self, path) -> None:
        if path is not None:
            p = Path(path)
            self.inputs.append({"name": p.name, "sha256": _sha256(p)})

    def write(self, path: Path) -> None:
        self.created = dt.datetime.now(dt.timezone.utc).isoformat(timespec="seconds")
        path.write_text(json.dumps(asdict(self), indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _manifest_path(out: Path) -> Path:
    return out.with_name(out.stem + ".manifest.json")


def _options(args: argparse.Namespace) -> dict:
    return {
        k: (str(v) if isinstance(v, Path) else v)
        for k, v in sorted(vars(args).items())
        if k not in ("func", "verbose")
    }


# ---------------------------------------------------------------------------
# Shared helpers


def _parse_list(text: str | None, cast=str) -> list | None:
    if text is None:
        return None
    try:
        return [cast(x.strip()) for x in text.split(",") if x.strip()]
    except ValueError as exc:
        raise UsageError(f"bad list {text!r}: {exc}") from None


def _court_from_args(args) -> CourtConfig:
    if getattr(args, "court", None):
        cfg = CourtConfig.from_dict(json.loads(Path(args.court).read_text(encoding="utf-8")))
        if args.reference is not None:
            cfg = cfg.with_reference(args.reference)
        return cfg
    classes = _parse_list(args.classes) or scan_class_labels(args.events)
    if not classes:
        raise IngestError(f"{args.events}: no events and no --classes given")
    return CourtConfig(args.chairs, tuple(classes), args.reference or 1)


def _load_sample(args):
    cfg = _court_from_args(args)
    events = parse_events(args.events, cfg)
    calendar = parse_calendar(args.calendar, cfg) if args.calendar else None
    seeds = parse_seeds(args.seeds, cfg) if args.seeds else None
    return cfg, build_sample(events, cfg, calendar, seeds)


def _dump_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2) + "\n", encoding="utf-8")


def fit_summary(fit: FitResult) -> str:
    lines = [
        f"model            {fit.spec.variant}",
        f"units / cases    {fit.n_units} / {fit.n_cases}",
        f"parameters       {fit.n_params}",
        f"log-likelihood   {fit.log_likelihood_at_max:.6f}",
        f"converged        {fit.converged} ({fit.iterations} iterations, "
        f"|grad|max {fit.final_gradient_norm:.2e})",
    ]
    if fit.separated:
        lines.append("WARNING          quasi-separated fit; estimates are unreliable")
    if fit.message:
        lines.append(f"note             {fit.message}")
    try:
        se = np.sqrt(np.diag(fit.covariance()))
    except EstimationError:
        se = np.full(fit.n_params, np.nan)
    lines.append("")
    lines.append(f"{'cell':<28}{'estimate':>14}{'std.err':>12}")
    for name, b, s in zip(fit.spec.cell_names(), fit.estimates.values, se):
        lines.append(f"{name:<28}{b:>14.6f}{s:>12.6f}")
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# Commands


def cmd_simulate(args) -> int:
    cfg = CourtConfig(args.chairs, tuple(_parse_list(args.classes) or DEFAULT_CLASSES), args.reference or 1)
    rule = RULE_NAMES[args.rule]
    if rule == "fixed_bias" and args.weights is None:
        raise UsageError("--rule fixed-bias needs --weights")
    if rule == "true_model" and (args.true_spec is None or args.true_params is None):
        raise UsageError("--rule true-model needs --true-spec and --true-params")
    if args.gamma is not None and rule != "proportion_penalized":
        raise UsageError("--gamma only applies to --rule proportion-penalized")
    ints = _parse_list(args.intensity, float)
    seeds = None
    if args.seed_total > 0:
        seeds = random_seed_counts(cfg, args.seed_total, args.seed_concentration, args.seed)
    gen = GeneratorSpec(
        rule=rule,
        n_days=args.days,
        intensities=ints[0] if len(ints) == 1 else tuple(ints),
        gamma=args.gamma or 0.0,
        weights=tuple(_parse_list(args.weights, float)) if args.weights else None,
        true_spec=args.true_spec,
        true_params=tuple(_parse_list(args.true_params, float)) if args.true_params else None,
        availability=args.availability,
        rotation_period=args.rotation_period,
        seed_counts=seeds,
        poisson=args.poisson,
        start_date=dt.date.fromisoformat(args.start),
        seed=args.seed,
    )
    res = simulate_assignments(gen, cfg)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_events(out / "events.csv", res.events)
    write_calendar(out / "calendar.csv", res.calendar)
    write_seeds(out / "seeds.csv", res.seeds)
    with open(out / "truth.jsonl", "w", encoding="utf-8") as fh:
        for rec in res.truth:
            fh.write(json.dumps(rec) + "\n")
    _dump_json(out / "court.json", cfg.to_dict())
    man = RunManifest(
        "simulate",
        _options(args),
        outputs=["events.csv", "calendar.csv", "seeds.csv", "truth.jsonl", "court.json"],
        config=cfg.to_dict(),
        seed=args.seed,
    )
    man.write(out / "manifest.json")
    total = int(res.counts.sum())
    print(f"days {args.days}  draws {len(res.truth)}  events {len(res.events)}  cases {total}")
    for j, k in enumerate(res.counts.sum(axis=0), start=1):
        print(f"  chair {j:>2}: {int(k)}")
    return 0


def cmd_fit(args) -> int:
    cfg, units = _load_sample(args)
    spec = ModelSpec(args.spec, cfg)
    fit = fit_mle(units, spec)
    out = Path(args.out)
    man_path = _manifest_path(out)
    summary_path = out.with_suffix(".txt")
    doc = fit.to_dict()
    doc["manifest"] = man_path.name
    _dump_json(out, doc)
    summary = fit_summary(fit)
    summary_path.write_text(summary, encoding="utf-8")
    outputs = [out.name, summary_path.name]
    if args.units_out:
        write_units_jsonl(args.units_out, units, cfg)
        outputs.append(Path(args.units_out).name)
    man = RunManifest("fit", _options(args), outputs=outputs, config=cfg.to_dict(), specs=[spec.variant])
    for p in (args.events, args.calendar, args.seeds, args.court):
        man.add_input(p)
    man.write(man_path)
    sys.stdout.write(summary)
    return 0 if fit.converged else 1


LRT_COLUMNS = ("model", "ll", "df", "chi_squared", "p_value", "hypothesis", "status")


def _p_text(p: float) -> str:
    return "< 0.0001" if p < 1e-4 else f"{p:.4f}"


def cmd_lrt(args) -> int:
    cfg, units = _load_sample(args)
    full_spec = ModelSpec(args.full, cfg)
    reduced = args.reduced or [v for v in VARIANTS if v != args.full]
    for v in reduced:
        if not ModelSpec(v, cfg).nested_in(full_spec):
            raise UsageError(f"{v} is not nested in {args.full}")
    full = fit_mle(units, full_spec)
    if not full.converged:
        raise EstimationError(f"full model {args.full} did not converge: {full.message}")
    rows = [
        {"model": args.full, "ll": full.log_likelihood_at_max, "df": "", "chi_squared": "",
         "p_value": "", "hypothesis": HYPOTHESES[args.full], "status": "ok"}
    ]
    failed = 0
    for v in reduced:
        try:
            fit = fit_mle(units, ModelSpec(v, cfg))
            if not fit.converged:
                raise EstimationError(fit.message or "did not converge")
            res = lrt(full, fit)
            rows.append({"model": v, "ll": fit.log_likelihood_at_max, "df": res.df,
                         "chi_squared": res.chi_squared, "p_value": res.p_value,
                         "hypothesis": HYPOTHESES[v], "status": "ok"})
        except (EstimationError, ModelError) as exc:
            failed += 1
            rows.append({"model": v, "ll": "", "df": "", "chi_squared": "", "p_value": "",
                         "hypothesis": HYPOTHESES[v], "status": f"failed: {exc}"})
    out = Path(args.out)
    with open(out, "w", newline="", encoding="utf-8") as fh:
        w = csv.DictWriter(fh, fieldnames=LRT_COLUMNS, lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in r.items()})
    man = RunManifest("lrt", _options(args), outputs=[out.name], config=cfg.to_dict(),
                      specs=[args.full, *reduced])
    for p in (args.events, args.calendar, args.seeds, args.court):
        man.add_input(p)
    man.write(_manifest_path(out))

    print(f"{'Model':<7}{'ll':>16}{'df':>9}{'Chi-squared':>14}{'p-value':>11}  Hypothesis")
    for r in rows:
        if r["status"] != "ok":
            print(f"{r['model']:<7}{'failed':>16}  {r['status']}")
            continue
        if r["df"] == "":
            print(f"{r['model']:<7}{r['ll']:>16.2f}{'-':>9}{'-':>14}{'-':>11}  -")
        else:
            print(f"{r['model']:<7}{r['ll']:>16.2f}{r['df']:>9.2f}{r['chi_squared']:>14.2f}"
                  f"{_p_text(r['p_value']):>11}  {r['hypothesis']}")
    return 1 if failed else 0


CI_COLUMNS = ("class", "chair", "available", "proportion", "point", "lower", "upper",
              "level", "family_size")


def cmd_ci(args) -> int:
    fit = FitResult.from_dict(json.loads(Path(args.fit).read_text(encoding="utf-8")))
    cfg = fit.spec.config
    n = cfg.n_chairs
    avail = np.ones(n, dtype=bool)
    for j in _parse_list(args.unavailable, int) or []:
        if not 1 <= j <= n:
            raise UsageError(f"--unavailable chair {j} outside 1..{n}")
        avail[j - 1] = False
    if not avail.any():
        raise UsageError("--unavailable leaves no chair available")
    if args.proportions is not None:
        props = np.array(_parse_list(args.proportions, float))
        if props.shape != (n,):
            raise UsageError(f"--proportions needs {n} values")
        if (props < 0).any() or abs(props.sum() - 1.0) > 1e-9:
            raise UsageError(f"--proportions must be non-negative and sum to 1 (got {props.sum()!r})")
    else:
        props = np.where(avail, 1.0 / avail.sum(), 0.0)
    classes = _parse_list(args.classes) or list(cfg.class_labels)
    for c in classes:
        if c not in cfg.class_labels:
            raise UsageError(f"unknown class {c!r}")
    cov = np.zeros((n, cfg.n_covariates))
    if PROPORTION in cfg.covariate_names:
        cov[:, cfg.covariate_names.index(PROPORTION)] = props
    out = Path(args.out)
    with open(out, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(CI_COLUMNS)
        for label in classes:
            table = probability_ci(fit, Scenario(cfg.class_index(label), cov, avail),
                                   args.level, args.family)
            for r in table.rows:
                w.writerow([label, r.chair, int(r.available), repr(float(props[r.chair - 1])),
                            repr(r.point), repr(r.lower), repr(r.upper), repr(args.level),
                            table.family_size])
    man = RunManifest("ci", _options(args), outputs=[out.name], config=cfg.to_dict(),
                      specs=[fit.spec.variant])
    man.add_input(args.fit)
    man.write(_manifest_path(out))
    print(f"wrote {len(classes)} class(es) x {n} chairs to {out}")
    return 0


def cmd_aggregate(args) -> int:
    cfg = _court_from_args(args)
    table = aggregate_table(parse_events(args.events, cfg), cfg)
    table.write_csv(args.out)
    print(f"grand total {table.grand_total}")
    return 0


# ---------------------------------------------------------------------------
# Parser


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


def _add_data_args(p) -> None:
    p.add_argument("--events", required=True, type=Path, help="event CSV (date,class,chair,count)")
    p.add_argument("--calendar", type=Path, help="unavailability CSV (chair,start_date,end_date,reason)")
    p.add_argument("--seeds", type=Path, help="pre-window history CSV (class,chair,count)")
    p.add_argument("--court", type=Path, help="court config JSON (as written by simulate)")
    p.add_argument("--chairs", type=int, default=11)
    p.add_argument("--classes", help="comma-separated class labels (default: those in the events file)")
    p.add_argument("--reference", type=int, help="reference chair (default 1)")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="caseaudit", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("simulate", help="generate a synthetic assignment stream")
    p.add_argument("--rule", choices=sorted(RULE_NAMES), default="uniform")
    p.add_argument("--days", type=int, default=10)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--chairs", type=int, default=11)
    p.add_argument("--classes", help="comma-separated class labels")
    p.add_argument("--reference", type=int)
    p.add_argument("--intensity", default="10", help="daily cases per class (scalar or list)")
    p.add_argument("--gamma", type=float)
    p.add_argument("--weights", help="comma-separated chair weights for fixed-bias")
    p.add_argument("--true-spec", choices=VARIANTS)
    p.add_argument("--true-params", help="comma-separated coefficients for true-model")
    p.add_argument("--availability", choices=("all", "rotating"), default="all")
    p.add_argument("--rotation-period", type=int, default=30)
    p.add_argument("--seed-total", type=int, default=0, help="pre-window cases per class (0: none)")
    p.add_argument("--seed-concentration", type=float, default=1.0)
    p.add_argument("--poisson", action="store_true")
    p.add_argument("--start", default="2008-02-28")
    p.add_argument("--out", required=True, type=Path, help="output directory")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("fit", help="fit one model by maximum likelihood")
    _add_data_args(p)
    p.add_argument("--spec", required=True, choices=VARIANTS)
    p.add_argument("--out", required=True, type=Path)
    p.add_argument("--units-out", type=Path, help="also write the sample units as JSON lines")
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("lrt", help="likelihood-ratio tests against a full model")
    _add_data_args(p)
    p.add_argument("--full", choices=VARIANTS, default="m1")
    p.add_argument("--reduced", nargs="+", choices=VARIANTS)
    p.add_argument("--out", required=True, type=Path)
    p.set_defaults(func=cmd_lrt)

    p = sub.add_parser("ci", help="Bonferroni-corrected probability intervals")
    p.add_argument("--fit", required=True, type=Path)
    g = p.add_mutually_exclusive_group()
    g.add_argument("--equal-proportions", action="store_true",
                   help="every available chair holds an equal share (default)")
    g.add_argument("--proportions", help="comma-separated per-chair proportions")
    p.add_argument("--unavailable", help="comma-separated unavailable chairs")
    p.add_argument("--level", type=float, default=0.99)
    p.add_argument("--family", type=int, help="Bonferroni family size (default: available chairs)")
    p.add_argument("--classes", help="restrict to these classes")
    p.add_argument("--out", required=True, type=Path)
    p.set_defaults(func=cmd_ci)

    p = sub.add_parser("aggregate", help="class x chair totals with margins")
    _add_data_args(p)
    p.add_argument("--out", required=True, type=Path)
    p.set_defaults(func=cmd_aggregate)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        logging.basicConfig(
            level=logging.INFO if args.verbose else logging.WARNING,
            format="%(levelname)s %(name)s: %(message)s",
        )
        if args.command == "ci" and not 0.0 < args.level < 1.0:
            raise UsageError("--level must lie in (0, 1)")
        if getattr(args, "family", None) is not None and args.family < 1:
            raise UsageError("--family must be >= 1")
        return args.func(args)
    except UsageError as exc:
        print(f"caseaudit: usage error: {exc}", file=sys.stderr)
        return 2
    except (IngestError, ModelError, EstimationError, SimulationError, OSError) as exc:
        print(f"caseaudit: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
