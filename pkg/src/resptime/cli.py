"""Command-line pipeline: simulate, extract, qualify, fit, diagnose, compare, outcomes.

Every command reads a JSON config (``--config``) whose keys may be overridden
by flags, and writes into ``--out``. Per-course products live under
``<out>/<course>/`` and per-subset products under
``<out>/<course>/<attempt>_<correctness>/``.

Exit codes: 1 I/O error, 2 validation error or missing prerequisite,
3 configuration error.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

from . import diagnostics as dg
from .cohort import (
    ConfigError,
    CourseStructure,
    QualificationConfig,
    build_subsets,
    load_structure,
    prepare_observations,
    read_matrix,
    write_matrix,
)
from .events import EventLog, ValidationError, parse_courses, write_events
from .extraction import extract, read_observations, write_observations
from .matrix import ATTEMPTS, CORRECTNESS, parse_subset_label, subset_label
from .model import (
    FitConfig,
    UnfittableError,
    fit,
    read_params,
    standardized_residuals,
    write_params,
)
from .outcomes import (
    outcome_models,
    prepare_slowness_records,
    read_learners,
    slowness_models,
    write_results,
)
from .synthetic import SynthSpec, course_structure, emit_event_log, generate

log = logging.getLogger("resptime")

ALL_SUBSETS = tuple(subset_label(a, c) for a in ATTEMPTS for c in CORRECTNESS)
COMPARISONS = (
    ("1_correct", "1_incorrect"),
    ("2_correct", "2_incorrect"),
    ("1_any", "2_any"),
)


class CliError(Exception):
    def __init__(self, code: int, message: str):
        super().__init__(message)
        self.code = code


def _config_error(message: str) -> CliError:
    return CliError(3, message)


def _build(cls, values: dict, what: str):
    known = {f.name for f in fields(cls)}
    unknown = set(values) - known
    if unknown:
        raise _config_error(f"unknown {what} settings: {sorted(unknown)}")
    try:
        return cls(**values)
    except (TypeError, ValueError) as exc:
        raise _config_error(f"invalid {what} settings: {exc}") from None


@dataclass
class RunConfig:
    out: Path
    events: Path | None = None
    structure: Path | None = None
    learners: Path | None = None
    qualification: QualificationConfig = field(default_factory=QualificationConfig)
    fit: FitConfig = field(default_factory=FitConfig)
    synth: SynthSpec = field(default_factory=SynthSpec)
    subsets: tuple[str, ...] = ALL_SUBSETS
    subsets_explicit: bool = False
    questions_per_page: int = 3
    jobs: int = 1


def load_config(args) -> RunConfig:
    raw: dict = {}
    base = Path(".")
    if args.config:
        path = Path(args.config)
        try:
            with open(path, encoding="utf-8") as fh:
                raw = json.load(fh)
        except OSError as exc:
            raise CliError(1, f"cannot read config {path}: {exc}") from None
        except json.JSONDecodeError as exc:
            raise _config_error(f"config {path} is not valid JSON: {exc}") from None
        if not isinstance(raw, dict):
            raise _config_error("config must be a JSON object")
        base = path.parent

    allowed = {
        "events", "structure", "learners", "qualification", "fit", "synth",
        "subsets", "questions_per_page", "jobs", "out", "seed",
    }
    unknown = set(raw) - allowed
    if unknown:
        raise _config_error(f"unknown config keys: {sorted(unknown)}")

    def path_of(key):
        flag = getattr(args, key, None)
        if flag:
            return Path(flag)
        if raw.get(key):
            return base / raw[key]
        return None

    synth = dict(raw.get("synth", {}))
    seed = args.seed if args.seed is not None else raw.get("seed")
    if seed is not None:
        synth["seed"] = int(seed)
    subsets = getattr(args, "subset", None) or raw.get("subsets")
    explicit = bool(getattr(args, "subset", None))
    if subsets:
        for label in subsets:
            try:
                parse_subset_label(label)
            except ValueError:
                raise _config_error(f"unknown subset {label!r}") from None
    out = args.out or raw.get("out")
    if not out:
        raise _config_error("an output directory is required (--out)")
    jobs = args.jobs if args.jobs is not None else raw.get("jobs", 1)
    if int(jobs) < 1:
        raise _config_error("jobs must be at least 1")
    qpp = getattr(args, "questions_per_page", None) or raw.get("questions_per_page", 3)
    if int(qpp) < 1:
        raise _config_error("questions_per_page must be at least 1")
    try:
        qualification = _build(QualificationConfig, raw.get("qualification", {}), "qualification")
    except ConfigError as exc:
        raise _config_error(str(exc)) from None
    return RunConfig(
        out=Path(out) if args.out else base / out,
        events=path_of("events"),
        structure=path_of("structure"),
        learners=path_of("learners"),
        qualification=qualification,
        fit=_build(FitConfig, raw.get("fit", {}), "fit"),
        synth=_build(SynthSpec, synth, "synth"),
        subsets=tuple(subsets) if subsets else ALL_SUBSETS,
        subsets_explicit=explicit,
        questions_per_page=int(qpp),
        jobs=int(jobs),
    )


# -- small file helpers ----------------------------------------------------


def _write_json(path: Path, obj) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _write_rows(path: Path, header, rows) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        for row in rows:
            writer.writerow([repr(v) if isinstance(v, float) else v for v in row])


def _require(path: Path) -> Path:
    if not path.exists():
        raise CliError(2, f"missing prerequisite: {path}")
    return path


def _course_dirs(out: Path, marker: str) -> list[Path]:
    depth = marker.count("/") + 1
    dirs = sorted({p.parents[depth - 1] for p in out.glob(f"*/{marker}")})
    if not dirs:
        raise CliError(2, f"missing prerequisite: no {out}/<course>/{marker}")
    return dirs


def _read_events(path: Path | None) -> dict[str, EventLog]:
    if path is None:
        raise _config_error("no events file configured (--events)")
    try:
        with open(path, encoding="utf-8") as fh:
            return parse_courses(fh)
    except UnicodeDecodeError as exc:
        raise CliError(1, f"{path} is not UTF-8: {exc}") from None


def _read_structures(path: Path | None) -> dict[str, CourseStructure]:
    if path is None:
        return {}
    with open(path, encoding="utf-8") as fh:
        try:
            obj = json.load(fh)
        except json.JSONDecodeError as exc:
            raise _config_error(f"structure file {path}: {exc}") from None
    items = obj if isinstance(obj, list) else [obj]
    try:
        structures = [CourseStructure.from_json(o) for o in items]
    except ConfigError as exc:
        raise _config_error(str(exc)) from None
    return {s.course_id: s for s in structures}


# -- commands --------------------------------------------------------------


def cmd_simulate(cfg: RunConfig) -> None:
    truth = generate(cfg.synth)
    course = cfg.synth.course_id
    cdir = cfg.out / course
    cdir.mkdir(parents=True, exist_ok=True)
    events = emit_event_log(truth, cfg.questions_per_page)
    write_events(events, cdir / "events.jsonl")
    _write_json(cdir / "structure.json", course_structure(truth, cfg.questions_per_page).to_json())
    write_params(truth.params, cdir / "truth_params.csv")
    write_matrix(truth.matrix, cdir / "truth_matrix.csv", cdir / "truth_matrix.json")
    _write_json(cdir / "synth_spec.json", cfg.synth.to_json())
    log.info("simulated %d observations for %s", truth.matrix.n_obs, course)


def cmd_extract(cfg: RunConfig) -> None:
    logs = _read_events(cfg.events)
    if not logs:
        raise CliError(2, f"{cfg.events}: no valid events")
    for course, elog in logs.items():
        cdir = cfg.out / course
        cdir.mkdir(parents=True, exist_ok=True)
        result = extract(elog, cfg.qualification.full_credit_threshold)
        write_observations(result.observations, cdir / "observations.csv")
        _write_rows(
            cdir / "attempt_counts.csv",
            ["user_id", "question_id", "submits"],
            [(u, q, n) for (u, q), n in sorted(result.attempt_counts.items())],
        )
        _write_json(
            cdir / "extract_tallies.json",
            {"parse": elog.rejection_summary(), "extraction": result.tallies},
        )
        log.info("%s: %d observations", course, len(result.observations))


def _read_attempt_counts(path: Path) -> dict[tuple[str, str], int]:
    with open(path, newline="", encoding="utf-8") as fh:
        return {(r["user_id"], r["question_id"]): int(r["submits"]) for r in csv.DictReader(fh)}


def cmd_qualify(cfg: RunConfig) -> None:
    logs = _read_events(cfg.events) if cfg.events else {}
    structures = _read_structures(cfg.structure)
    for cdir in _course_dirs(cfg.out, "observations.csv"):
        course = cdir.name
        observations = read_observations(cdir / "observations.csv")
        counts = _read_attempt_counts(_require(cdir / "attempt_counts.csv"))
        structure = structures.get(course)
        if structure is None:
            log.warning("%s: no course structure, explored-user filter skipped", course)
        prep = prepare_observations(observations, counts, logs.get(course), structure, cfg.qualification)
        matrices = build_subsets(prep.observations, cfg.qualification)
        for label in cfg.subsets:
            m = matrices[label]
            sdir = cdir / label
            sdir.mkdir(parents=True, exist_ok=True)
            write_matrix(m, sdir / "matrix.csv", sdir / "matrix.json")
        _write_json(
            cdir / "qualify_tallies.json",
            {
                "config": cfg.qualification.to_json(),
                "explored_filter": structure is not None,
                "explored_users": len(prep.explored_users),
                "filters": prep.tallies,
                "subsets": {k: {"N_u": m.n_users, "N_q": m.n_questions, "n_obs": m.n_obs, "status": m.status}
                            for k, m in matrices.items() if k in cfg.subsets},
            },
        )


def _fit_one(args):
    sdir, fit_cfg = args
    matrix = read_matrix(sdir / "matrix.csv", sdir / "matrix.json")
    try:
        params, report = fit(matrix, fit_cfg)
    except UnfittableError:
        _write_json(sdir / "fit_report.json", {"status": "unfittable", "subset": matrix.label})
        return sdir, "unfittable"
    write_params(params, sdir / "params.csv")
    _write_json(sdir / "fit_report.json", {"status": "ok", "subset": matrix.label, **report.to_json()})
    return sdir, "converged" if report.converged else "not_converged"


def cmd_fit(cfg: RunConfig) -> None:
    jobs = []
    for cdir in _course_dirs(cfg.out, "*/matrix.csv"):
        for label in cfg.subsets:
            sdir = cdir / label
            if (sdir / "matrix.csv").exists():
                jobs.append((sdir, cfg.fit))
            elif cfg.subsets_explicit:
                raise CliError(2, f"missing prerequisite: {sdir / 'matrix.csv'}")
    if cfg.jobs > 1:
        with ProcessPoolExecutor(cfg.jobs) as pool:
            results = list(pool.map(_fit_one, jobs))
    else:
        results = [_fit_one(j) for j in jobs]
    for sdir, status in results:
        log.info("%s/%s: %s", sdir.parent.name, sdir.name, status)


def _diagnose_subset(sdir: Path) -> dict:
    matrix = read_matrix(sdir / "matrix.csv", sdir / "matrix.json")
    params = read_params(_require(sdir / "params.csv"))
    x = standardized_residuals(params, matrix)
    moments = dg.raw_moments(x)
    devs = dg.moment_deviations(moments)
    stats = dg.dataset_stats(matrix)

    _write_rows(sdir / "ecdf.csv", ["x", "y"], dg.ecdf_vs_normal(x))
    per_q = dg.per_question_deviations(dg.residuals_by_question(x, matrix))
    _write_rows(
        sdir / "question_deviations.csv",
        ["question_id", "d1", "d2", "d3", "d4"],
        [(q, *d.as_tuple()) for q, d in sorted(per_q.items())],
    )
    curves = dg.deviation_curves(per_q)
    _write_rows(
        sdir / "deviation_curves.csv",
        ["k", "x", "y"],
        [(k, xv, yv) for k, pts in curves.items() for xv, yv in pts],
    )
    described = [
        (q, a, b, *dg.describe_question(a, b))
        for q, a, b in zip(params.question_ids, params.alpha.tolist(), params.beta.tolist())
    ]
    _write_rows(
        sdir / "questions.csv",
        ["question_id", "alpha", "beta", "typical_seconds", "spread_factor"],
        described,
    )
    summary = {
        "subset": matrix.label,
        "n_obs": matrix.n_obs,
        "moments": dict(zip(("m1", "m2", "m3", "m4"), moments.as_tuple())),
        "deviations": dict(zip(("d1", "d2", "d3", "d4"), devs.as_tuple())),
        "dataset": {"N_u": stats.n_users, "N_q": stats.n_questions, "missingness": stats.missingness, "r": stats.ratio},
    }
    try:
        rho, pairs = dg.intensity_discrimination_relation(params)
        _write_rows(sdir / "intensity_vs_spread.csv", ["x", "y"], pairs)
        summary["beta_vs_inverse_alpha_r"] = rho
    except ValueError as exc:
        summary["beta_vs_inverse_alpha_r"] = None
        summary["beta_vs_inverse_alpha_note"] = str(exc)
    _write_json(sdir / "summary.json", summary)
    return summary


def _write_comparison(prefix: Path, table: dict[str, dg.Correlation]) -> None:
    _write_rows(
        prefix.with_name(prefix.name + ".csv"),
        ["parameter", "n", "r", "se", "status"],
        [(c.parameter, c.n, c.r if c.r is not None else "", c.se if c.se is not None else "", c.status)
         for c in table.values()],
    )
    _write_rows(
        prefix.with_name(prefix.name + "_scatter.csv"),
        ["parameter", "id", "x", "y"],
        [(c.parameter, k, a, b) for c in table.values() for k, a, b in (c.pairs or [])],
    )


def cmd_diagnose(cfg: RunConfig) -> None:
    diagnosed = 0
    for cdir in _course_dirs(cfg.out, "*/matrix.csv"):
        fitted = {}
        for label in cfg.subsets:
            sdir = cdir / label
            report_path = sdir / "fit_report.json"
            if not report_path.exists():
                if cfg.subsets_explicit:
                    raise CliError(2, f"missing prerequisite: {report_path}")
                continue
            with open(report_path, encoding="utf-8") as fh:
                status = json.load(fh).get("status")
            if status != "ok":
                if cfg.subsets_explicit:
                    raise CliError(2, f"subset {cdir.name}/{label} has an empty matrix")
                continue
            _diagnose_subset(sdir)
            fitted[label] = read_params(sdir / "params.csv")
            diagnosed += 1
        for a, b in COMPARISONS:
            if a in fitted and b in fitted:
                _write_comparison(cdir / "comparisons" / f"{a}_vs_{b}", dg.compare_fits(fitted[a], fitted[b]))
    if not diagnosed:
        raise CliError(2, "no fitted non-empty subset to diagnose")


def cmd_compare(cfg: RunConfig, a: str, b: str) -> None:
    pa = read_params(_require(Path(a)))
    pb = read_params(_require(Path(b)))
    table = dg.compare_fits(pa, pb)
    cfg.out.mkdir(parents=True, exist_ok=True)
    _write_comparison(cfg.out / "compare", table)
    for c in table.values():
        log.info("%s: n=%d r=%s status=%s", c.parameter, c.n, c.r, c.status)


def _fitted_zetas(fit_dir: Path, label: str) -> dict[tuple[str, str], float]:
    out = {}
    for path in sorted(fit_dir.glob(f"*/{label}/params.csv")):
        course = path.parent.parent.name
        for user, z in read_params(path).zeta_map().items():
            out[(course, user)] = z
    return out


def cmd_outcomes(cfg: RunConfig, fit_dir: str | None) -> None:
    if cfg.learners is None:
        raise _config_error("no learner records configured (--learners)")
    records = read_learners(_require(cfg.learners))
    if fit_dir:
        z1 = _fitted_zetas(Path(fit_dir), "1_any")
        z2 = _fitted_zetas(Path(fit_dir), "2_any")
        records = [
            replace(r, zeta1=z1.get((r.course_id, r.user_id)), zeta2=z2.get((r.course_id, r.user_id)))
            for r in records
        ]
    records = [r for r in records if r.zeta1 is not None]
    if not records:
        raise CliError(2, "no learner has a first-attempt slowness")
    cfg.out.mkdir(parents=True, exist_ok=True)
    write_results(outcome_models(records), cfg.out / "outcome_models.csv")
    write_results(slowness_models(prepare_slowness_records(records)), cfg.out / "slowness_models.csv")


# -- entry point -----------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON run configuration")
    common.add_argument("--out", help="output directory")
    common.add_argument("--jobs", type=int, help="parallel worker processes")
    common.add_argument("--seed", type=int, help="random seed for simulation")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="resptime", description=__doc__.splitlines()[0], parents=[common])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", parents=[common], help="write synthetic events and ground truth")
    p.add_argument("--questions-per-page", type=int)
    p = sub.add_parser("extract", parents=[common], help="event log -> response-time observations")
    p.add_argument("--events")
    p = sub.add_parser("qualify", parents=[common], help="filters and per-subset matrices")
    p.add_argument("--events")
    p.add_argument("--structure")
    p.add_argument("--subset", action="append", help="limit to a subset label such as 1_any")
    for name, help_ in (("fit", "fit the model on every subset matrix"), ("diagnose", "residual and parameter diagnostics")):
        p = sub.add_parser(name, parents=[common], help=help_)
        p.add_argument("--subset", action="append", help="limit to a subset label such as 1_any")
    p = sub.add_parser("compare", parents=[common], help="correlate two parameter files")
    p.add_argument("params_a")
    p.add_argument("params_b")
    p = sub.add_parser("outcomes", parents=[common], help="outcome and slowness regressions")
    p.add_argument("--learners")
    p.add_argument("--fit-dir", help="take zeta1/zeta2 from fitted 1_any/2_any params under this directory")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        cfg = load_config(args)
        if args.command == "simulate":
            cmd_simulate(cfg)
        elif args.command == "extract":
            cmd_extract(cfg)
        elif args.command == "qualify":
            cmd_qualify(cfg)
        elif args.command == "fit":
            cmd_fit(cfg)
        elif args.command == "diagnose":
            cmd_diagnose(cfg)
        elif args.command == "compare":
            cmd_compare(cfg, args.params_a, args.params_b)
        elif args.command == "outcomes":
            cmd_outcomes(cfg, args.fit_dir)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code
    except ConfigError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return 3
    except (ValidationError, ValueError) as exc:
        print(f"validation error: {exc}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
