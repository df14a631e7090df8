"""Command-line front end: score, match, analyze, simulate.

Config files are flat ``key = value`` text; repeating a key builds a
list.  Overlap-region entries look like ``overlap = {var="x1", lo=-1.0}``.
Every output CSV starts with a ``#schema:`` comment naming its columns,
and identical invocations on identical inputs produce byte-identical
artifacts.

Exit codes: 0 success; 1 validation problem (nothing written); 2 runtime
failure (partial artifacts are removed).
"""

from __future__ import annotations

import argparse
import csv
import os
import sys
from dataclasses import dataclass, field
from pathlib import Path

from .combine import combined_ci
from .gen_score import fit_generalization, plan_copies
from .os_sens import collect_sets, os_ci
from .rct_infer import (
    BERNOULLI,
    BLOCKED,
    COMPLETE,
    build_rct_design,
    draw_assignments,
    rct_ci,
)
import numpy as np

from .sim_lab import ALL, ScenarioSpec, run_scenario
from .stat_kernel import SeededRng
from .study_data import (
    RCT,
    OverlapRule,
    StudyData,
    StudyDataError,
    apply_overlap,
    load_csv,
    residualize,
)
from .tri_match import match_triplets

__all__ = ["RunConfig", "run", "main"]

_ENV_SEED = "CAUSAL_FUSE_SEED"


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    """Validated knobs shared by the analysis subcommands."""

    input_path: Path | None = None
    output_dir: Path = Path(".")
    overlap: OverlapRule = field(default_factory=OverlapRule)
    gammas: list[float] = field(default_factory=lambda: [1.0])
    deltas: list[float] = field(default_factory=lambda: [0.0])
    alpha: float = 0.05
    controls_per_set: int = 1
    mc_samples: int = 10_000
    seed: int = 0
    rct_scheme: str = BERNOULLI
    rct_theta: float | None = None
    beta_grid_points: int = 401
    envelope_points: int = 201
    threads: int = 1

    def validate(self) -> None:
        if not self.gammas or not self.deltas:
            raise ConfigError("gamma and delta ladders must be nonempty")
        if sorted(self.gammas) != self.gammas or sorted(self.deltas) != self.deltas:
            raise ConfigError("gamma and delta ladders must be sorted ascending")
        if any(g < 1 for g in self.gammas):
            raise ConfigError("every gamma must be >= 1")
        if any(d < 0 for d in self.deltas):
            raise ConfigError("every delta must be >= 0")
        if not 0 < self.alpha < 1:
            raise ConfigError("alpha must be in (0,1)")
        if self.controls_per_set < 1:
            raise ConfigError("controls_per_set must be >= 1")
        if self.mc_samples < 99:
            raise ConfigError("mc_samples must be >= 99")
        if self.beta_grid_points < 3 or self.envelope_points < 2:
            raise ConfigError("grid sizes are too small")
        if self.rct_scheme not in (BERNOULLI, COMPLETE, BLOCKED):
            raise ConfigError(f"unknown rct_scheme {self.rct_scheme!r}")
        if self.threads < 1:
            raise ConfigError("threads must be >= 1")


def parse_config_text(text: str, path: str = "<config>") -> dict[str, list[str]]:
    out: dict[str, list[str]] = {}
    for line_no, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}: line {line_no}: expected 'key = value'")
        key, value = line.split("=", 1)
        out.setdefault(key.strip(), []).append(value.strip())
    return out


def _parse_overlap_entry(entry: str, covariate_names: list[str]) -> tuple[int, float, float]:
    body = entry.strip().strip("{}").strip()
    fields: dict[str, str] = {}
    for part in body.split(","):
        if not part.strip():
            continue
        if "=" not in part:
            raise ConfigError(f"bad overlap entry {entry!r}")
        k, v = part.split("=", 1)
        fields[k.strip()] = v.strip().strip("\"'")
    if "var" not in fields:
        raise ConfigError(f"overlap entry {entry!r} is missing var=")
    var = fields["var"]
    if var not in covariate_names:
        raise ConfigError(f"overlap entry names unknown covariate {var!r}")
    lo = float(fields.get("lo", "-inf"))
    hi = float(fields.get("hi", "inf"))
    return covariate_names.index(var), lo, hi


def _env_seed() -> int | None:
    raw = os.environ.get(_ENV_SEED)
    if raw is None:
        return None
    try:
        return int(raw)
    except ValueError:
        raise ConfigError(f"{_ENV_SEED} must be an integer, got {raw!r}") from None


def build_run_config(args, config: dict[str, list[str]], covariate_names: list[str]) -> RunConfig:
    cfg = RunConfig()

    def last(key: str) -> str | None:
        values = config.get(key)
        return values[-1] if values else None

    if "overlap" in config:
        bounds = tuple(
            _parse_overlap_entry(entry, covariate_names) for entry in config["overlap"]
        )
        cfg.overlap = OverlapRule(bounds=bounds)
    elif last("overlap_mode") == "rct_bounding_box":
        cfg.overlap = OverlapRule(mode="rct_bounding_box")
    gammas = list(getattr(args, "gamma", None) or []) or [float(v) for v in config.get("gamma", [])]
    deltas = list(getattr(args, "delta", None) or []) or [float(v) for v in config.get("delta", [])]
    cfg.gammas = sorted(gammas) if gammas else cfg.gammas
    cfg.deltas = sorted(deltas) if deltas else cfg.deltas
    if getattr(args, "alpha", None) is not None:
        cfg.alpha = args.alpha
    elif last("alpha"):
        cfg.alpha = float(last("alpha"))
    if getattr(args, "controls_per_set", None) is not None:
        cfg.controls_per_set = args.controls_per_set
    elif last("controls_per_set"):
        cfg.controls_per_set = int(last("controls_per_set"))
    if getattr(args, "mc_samples", None) is not None:
        cfg.mc_samples = args.mc_samples
    elif last("mc_samples"):
        cfg.mc_samples = int(last("mc_samples"))
    seed = getattr(args, "seed", None)
    if seed is None and last("seed") is not None:
        seed = int(last("seed"))
    if seed is None:
        seed = _env_seed()
    cfg.seed = 0 if seed is None else seed
    if last("rct_scheme"):
        cfg.rct_scheme = last("rct_scheme").lower()
    if last("rct_theta"):
        cfg.rct_theta = float(last("rct_theta"))
    if last("beta_grid_points"):
        cfg.beta_grid_points = int(last("beta_grid_points"))
    if last("envelope_points"):
        cfg.envelope_points = int(last("envelope_points"))
    if getattr(args, "threads", None) is not None:
        cfg.threads = args.threads
    elif last("threads"):
        cfg.threads = int(last("threads"))
    cfg.validate()
    return cfg


def _write_csv(path: Path, schema: list[str], rows: list[list]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as handle:
        handle.write("#schema: " + ",".join(schema) + "\n")
        writer = csv.writer(handle)
        writer.writerow(schema)
        writer.writerows(rows)


def _fmt(value) -> str:
    if value is None:
        return ""
    if isinstance(value, bool):
        return str(int(value))
    if isinstance(value, float):
        return format(value, ".10g")
    return str(value)


def _prepared_study(args, config) -> tuple[StudyData, RunConfig]:
    data = load_csv(args.input)
    cfg = build_run_config(args, config, list(data.covariate_names))
    cfg.input_path = Path(args.input)
    cfg.output_dir = Path(args.output_dir)
    data = apply_overlap(data, cfg.overlap)
    return data, cfg


def _cmd_score(args, config) -> list[Path]:
    data, cfg = _prepared_study(args, config)
    model = fit_generalization(data)
    plan = plan_copies(model, data)
    rct = [rec for rec in data.records if rec.source == RCT]
    nu = model.nu(np.array([rec.x for rec in rct], dtype=float))
    rows = [
        [rec.id, _fmt(float(score)), plan.copies[rec.id]] for rec, score in zip(rct, nu)
    ]
    out = cfg.output_dir / "score.csv"
    _write_csv(out, ["id", "nu_hat", "copies"], rows)
    return [out]


def _matched_design(data, cfg):
    model = fit_generalization(data)
    plan = plan_copies(model, data)
    sets, balance = match_triplets(data, plan, cfg.controls_per_set)
    return sets, balance


def _write_match_outputs(sets, balance, cfg) -> list[Path]:
    rows = []
    for ms in sets:
        rows.append([ms.set_id, ms.treated_id, "os_treated", _fmt(ms.in_overlap)])
        for cid in ms.control_ids:
            rows.append([ms.set_id, cid, "os_control", _fmt(ms.in_overlap)])
        if ms.rct_id is not None:
            rows.append([ms.set_id, ms.rct_id, "rct", _fmt(ms.in_overlap)])
    matched_path = cfg.output_dir / "matched.csv"
    _write_csv(matched_path, ["set_id", "unit_id", "role", "in_overlap"], rows)

    brows = [
        [row.domain, row.phase, row.contrast, row.covariate, _fmt(row.smd)]
        for row in balance.rows
    ]
    for (domain, phase), value in sorted(balance.max_abs_smd().items()):
        brows.append([domain, phase, "max_abs_smd", "", _fmt(value)])
    balance_path = cfg.output_dir / "balance.csv"
    _write_csv(balance_path, ["domain", "phase", "contrast", "covariate", "smd"], brows)
    return [matched_path, balance_path]


def _cmd_match(args, config) -> list[Path]:
    data, cfg = _prepared_study(args, config)
    sets, balance = _matched_design(data, cfg)
    return _write_match_outputs(sets, balance, cfg)


def _cmd_analyze(args, config) -> list[Path]:
    data, cfg = _prepared_study(args, config)
    sets, balance = _matched_design(data, cfg)
    written = _write_match_outputs(sets, balance, cfg)
    data = residualize(data)
    os_sets = collect_sets(sets, data)
    design = build_rct_design(data, sets, scheme=cfg.rct_scheme, theta=cfg.rct_theta)
    rng = SeededRng(cfg.seed)
    assignments = draw_assignments(design, rng, cfg.mc_samples)

    rows = []
    base = rct_ci(
        design,
        0.0,
        alpha=cfg.alpha,
        assignments=assignments,
        grid_points=cfg.beta_grid_points,
    )
    for d in cfg.deltas:
        rows.append(
            ["rct", "", _fmt(d), _fmt(cfg.alpha), _fmt(base.lower - d), _fmt(base.upper + d)]
        )
    for g in cfg.gammas:
        interval = os_ci(os_sets, g, alpha=cfg.alpha / 2.0)
        rows.append(
            ["os", _fmt(g), "", _fmt(cfg.alpha), _fmt(interval.lower), _fmt(interval.upper)]
        )
    for g in cfg.gammas:
        for d in cfg.deltas:
            result = combined_ci(
                os_sets, design, g, d, alpha=cfg.alpha,
                assignments=assignments, envelope_points=cfg.envelope_points,
            )
            rows.append(
                [
                    "combined",
                    _fmt(g),
                    _fmt(d),
                    _fmt(cfg.alpha),
                    _fmt(result.lower),
                    _fmt(result.upper),
                ]
            )
    ladder_path = cfg.output_dir / "ladder.csv"
    _write_csv(
        ladder_path, ["method", "gamma", "delta", "alpha", "lower", "upper"], rows
    )
    return written + [ladder_path]


def _scenario_specs(config: dict[str, list[str]], threads: int) -> list[ScenarioSpec]:
    def values(key: str, default: list[str]) -> list[str]:
        return config.get(key, default)

    gammas = [float(v) for v in values("analysis_gamma", [])]
    deltas = [float(v) for v in values("analysis_delta", [])]
    analysis = None
    if gammas or deltas:
        analysis = tuple((g, d) for g in (gammas or [1.0]) for d in (deltas or [0.0]))
    taus = [float(v) for v in values("effect_tau", [])]
    specs = []
    for n_total in values("n_total", ["500"]):
        for overlap in values("overlap_regime", [ALL]):
            for delta_star in values("delta_star", ["0"]):
                for gamma_star in values("gamma_star", ["1"]):
                    for tau in taus or [None]:
                        specs.append(
                            ScenarioSpec(
                                n_total=int(n_total),
                                overlap=overlap,
                                delta_star=float(delta_star),
                                gamma_star=float(gamma_star),
                                effect_tau=tau,
                                replications=int(values("replications", ["100"])[-1]),
                                alpha=float(values("alpha", ["0.05"])[-1]),
                                mc_samples=int(values("mc_samples", ["10000"])[-1]),
                                base_seed=int(values("base_seed", ["0"])[-1]),
                                analysis=analysis,
                                controls_per_set=int(
                                    values("controls_per_set", ["1"])[-1]
                                ),
                                workers=threads,
                            )
                        )
    return specs


_SCENARIO_COLUMNS = [
    "n_total",
    "overlap",
    "delta_star",
    "gamma_star",
    "effect_tau",
    "replications",
    "method",
    "gamma",
    "delta",
    "coverage",
    "avg_length",
    "rejection_rate",
    "balance_overlap_before",
    "balance_overlap_after",
    "balance_nonoverlap_before",
    "balance_nonoverlap_after",
    "n_errors",
]


def _cmd_simulate(args, config) -> list[Path]:
    out_dir = Path(args.output_dir)
    threads = args.threads if args.threads is not None else 1
    specs = _scenario_specs(config, threads)
    report_rows = []
    power_rows = []
    for spec in specs:
        print(
            f"scenario n={spec.n_total} overlap={spec.overlap} "
            f"delta*={spec.delta_star} gamma*={spec.gamma_star} tau={spec.effect_tau} "
            f"({spec.replications} replications)",
            file=sys.stderr,
        )
        report = run_scenario(spec)
        for (method, g, d), summary in sorted(report.methods.items()):
            report_rows.append(
                [
                    spec.n_total,
                    spec.overlap,
                    _fmt(spec.delta_star),
                    _fmt(spec.gamma_star),
                    _fmt(spec.effect_tau),
                    spec.replications,
                    method,
                    _fmt(g),
                    _fmt(d),
                    _fmt(summary.coverage),
                    _fmt(summary.avg_length),
                    _fmt(summary.rejection_rate),
                    _fmt(report.balance_mean.get(("overlap", "before"))),
                    _fmt(report.balance_mean.get(("overlap", "after"))),
                    _fmt(report.balance_mean.get(("non_overlap", "before"))),
                    _fmt(report.balance_mean.get(("non_overlap", "after"))),
                    report.n_errors,
                ]
            )
            if spec.effect_tau is not None:
                power_rows.append(
                    [
                        spec.n_total,
                        spec.overlap,
                        _fmt(spec.effect_tau),
                        method,
                        _fmt(g),
                        _fmt(d),
                        _fmt(summary.rejection_rate),
                    ]
                )
    report_path = out_dir / "report.csv"
    _write_csv(report_path, _SCENARIO_COLUMNS, report_rows)
    written = [report_path]
    if power_rows:
        power_path = out_dir / "power.csv"
        _write_csv(
            power_path,
            ["n_total", "overlap", "effect_tau", "method", "gamma", "delta", "rejection_rate"],
            power_rows,
        )
        written.append(power_path)
    return written


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="causal-fuse",
        description="Triplet matching and two-parameter sensitivity analysis "
        "for combined trial + observational studies.",
    )
    sub = parser.add_subparsers(dest="command")

    def add_common(p, needs_input=True):
        if needs_input:
            p.add_argument("--input", required=True, help="study CSV (id,source,z,y,x1..xp[,block])")
        p.add_argument("--config", default=None, help="flat key=value config file")
        p.add_argument("--output-dir", default=".", help="where artifacts are written")

    p_score = sub.add_parser("score", help="emit generalization scores and copy counts")
    add_common(p_score)

    p_match = sub.add_parser("match", help="build the triplet matched design")
    add_common(p_match)
    p_match.add_argument("--controls-per-set", type=int, default=None)

    p_an = sub.add_parser("analyze", help="confidence-interval ladder for a study")
    add_common(p_an)
    p_an.add_argument("--gamma", type=float, action="append", help="repeatable bias ladder entry")
    p_an.add_argument("--delta", type=float, action="append", help="repeatable bias ladder entry")
    p_an.add_argument("--alpha", type=float, default=None)
    p_an.add_argument("--controls-per-set", type=int, default=None)
    p_an.add_argument("--mc-samples", type=int, default=None)
    p_an.add_argument("--seed", type=int, default=None)
    p_an.add_argument("--threads", type=int, default=None)

    p_sim = sub.add_parser("simulate", help="run a simulation scenario grid")
    p_sim.add_argument("--scenario", required=True, help="scenario config file")
    p_sim.add_argument("--output-dir", default=".")
    p_sim.add_argument("--threads", type=int, default=None)
    return parser


_COMMANDS = {
    "score": _cmd_score,
    "match": _cmd_match,
    "analyze": _cmd_analyze,
    "simulate": _cmd_simulate,
}

_ARTIFACTS = {
    "score": ["score.csv"],
    "match": ["matched.csv", "balance.csv"],
    "analyze": ["matched.csv", "balance.csv", "ladder.csv"],
    "simulate": ["report.csv", "power.csv"],
}


def run(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:]) if argv is None else list(argv)
    parser = _build_parser()
    if not argv:
        parser.print_usage(sys.stderr)
        return 1
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return 0 if exc.code in (0, None) else 1
    if args.command is None:
        parser.print_usage(sys.stderr)
        return 1

    config: dict[str, list[str]] = {}
    config_path = getattr(args, "config", None) or getattr(args, "scenario", None)
    try:
        if config_path is not None:
            config = parse_config_text(
                Path(config_path).read_text(encoding="utf-8"), str(config_path)
            )
        out_dir = Path(args.output_dir)
        if not out_dir.exists():
            raise ConfigError(f"output directory {out_dir} does not exist")
        if getattr(args, "input", None) is not None and not Path(args.input).exists():
            raise ConfigError(f"input file {args.input} does not exist")
    except (ConfigError, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1

    candidates = [out_dir / name for name in _ARTIFACTS[args.command]]
    preexisting = {path for path in candidates if path.exists()}

    def cleanup() -> None:
        for path in candidates:
            if path not in preexisting and path.exists():
                try:
                    path.unlink()
                except OSError:
                    pass

    try:
        written = _COMMANDS[args.command](args, config)
    except (ConfigError, StudyDataError) as exc:
        cleanup()
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:
        cleanup()
        print(f"runtime failure: {exc}", file=sys.stderr)
        return 2
    for path in written:
        print(path)
    return 0


def main() -> None:
    raise SystemExit(run())


if __name__ == "__main__":
    main()
