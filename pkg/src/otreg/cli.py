"""Command-line runner: ``otreg run|battery|dump-map|dump-slices``.

Exit codes: 0 success, 2 configuration error, 3 hypothesis or threshold
failure, 4 numeric failure.
"""

from __future__ import annotations

import argparse
import dataclasses
import logging
import os
import sys
from pathlib import Path

import numpy as np
import yaml

from .batteries import BATTERIES, run_battery, write_battery_csv
from .boundary_layer import quasi_orthogonality_check, build_tilde_phi
from .density import normalize_at
from .errors import ConfigError, DomainError, HypothesisViolation, NumericError, OTRegError
from .eulerian import bb_energy, displacement_convexity_check, displacement_interpolate, lagrangian_energy
from .elliptic import harmonic_estimate_suite, write_estimate_csv
from .instances import build_pair
from .regularity import (MapInstance, RegularityConfig, campanato_iterate, classify_regular_points,
                         harmonic_approximation, one_step_improvement, scan_grid, write_decay_csv)
from .transport import check_monotonicity, inverse_consistency, solve_ot

log = logging.getLogger("otreg")

# stages that assume rho0(c) = rho1(c) = 1 at the centre
NORMALISED_STAGES = ("approximate", "tilt", "iterate")
STAGES = ("solve", "interpolate", "approximate", "tilt", "iterate", "classify", "batteries")
EXIT_CONFIG, EXIT_HYPOTHESIS, EXIT_NUMERIC = 2, 3, 4
TOP_KEYS = {"seed", "threads", "instance", "pipeline", "regularity", "R0", "center", "scan",
            "batteries", "energy_rtol"}


@dataclasses.dataclass
class ExperimentConfig:
    instance: dict
    pipeline: list
    regularity: RegularityConfig
    R0: float = 0.5
    center: tuple = (0.0, 0.0)
    scan: dict = dataclasses.field(default_factory=lambda: {"lo": -0.75, "hi": 0.75, "n": 16})
    batteries: list = dataclasses.field(default_factory=lambda: list(BATTERIES))
    seed: int = 0
    threads: int = 1
    energy_rtol: float = 0.02


def _number(raw: dict, key: str, kind=float, lo=None, hi=None, default=None):
    val = raw.get(key, default)
    try:
        val = kind(val)
    except (TypeError, ValueError):
        raise ConfigError(f"field '{key}' must be a {kind.__name__}, got {raw.get(key)!r}") from None
    if (lo is not None and val < lo) or (hi is not None and val > hi):
        raise ConfigError(f"field '{key}' = {val} outside [{lo}, {hi}]")
    return val


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file {path} does not exist")
    try:
        raw = yaml.safe_load(path.read_text()) or {}
    except yaml.YAMLError as exc:
        raise ConfigError(f"config is not valid YAML: {exc}") from None
    if not isinstance(raw, dict):
        raise ConfigError("config must be a mapping")
    unknown = set(raw) - TOP_KEYS
    if unknown:
        raise ConfigError(f"unknown config field(s): {', '.join(sorted(unknown))}")
    inst = dict(raw.get("instance", {}))
    alpha = _number(inst, "alpha", float, default=0.5)
    if not 0 < alpha < 1:
        raise ConfigError(f"field 'instance.alpha' must lie in (0, 1), got {alpha}")
    _number(inst, "n", int, 2, 1024, default=64)
    _number(inst, "n_points", int, 1, 16384, default=1024)
    for side in ("rho0", "rho1"):
        f = inst.get(side, {}).get("file") if isinstance(inst.get(side), dict) else None
        if f is not None and not Path(f).exists():
            raise ConfigError(f"field 'instance.{side}.file': {f} does not exist")
    pipeline = raw.get("pipeline", ["solve"])
    if isinstance(pipeline, str):
        pipeline = [pipeline]
    bad = [s for s in pipeline if s not in STAGES]
    if bad:
        raise ConfigError(f"field 'pipeline': unknown stage(s) {bad}; choose from {STAGES}")
    reg_raw = dict(raw.get("regularity", {}))
    names = {f.name for f in dataclasses.fields(RegularityConfig)}
    extra = set(reg_raw) - names
    if extra:
        raise ConfigError(f"unknown regularity field(s): {', '.join(sorted(extra))}")
    reg_raw.setdefault("alpha", alpha)
    try:
        reg = RegularityConfig(**reg_raw)
    except TypeError as exc:
        raise ConfigError(f"field 'regularity': {exc}") from None
    if reg.alpha != alpha:
        raise ConfigError("field 'regularity.alpha' must equal 'instance.alpha'")
    batteries = raw.get("batteries", list(BATTERIES))
    bad = [b for b in batteries if b not in BATTERIES]
    if bad:
        raise ConfigError(f"field 'batteries': unknown battery {bad}")
    center = raw.get("center", [0.0, 0.0])
    if not (isinstance(center, (list, tuple)) and len(center) == 2):
        raise ConfigError("field 'center' must be a pair of numbers")
    scan = {"lo": -0.75, "hi": 0.75, "n": 16, **dict(raw.get("scan", {}))}
    _number(scan, "n", int, 1, 256)
    return ExperimentConfig(
        instance=inst, pipeline=list(pipeline), regularity=reg,
        R0=_number(raw, "R0", float, 1e-6, 10.0, default=0.5),
        center=(float(center[0]), float(center[1])), scan=scan, batteries=list(batteries),
        seed=_number(raw, "seed", int, 0, 2**64 - 1, default=0),
        threads=_number(raw, "threads", int, 0, 4096, default=1),
        energy_rtol=_number(raw, "energy_rtol", float, 0.0, 1.0, default=0.02),
    )


class Summary:
    """Rows ``stage,check,value,pass`` written to ``summary.csv``."""

    def __init__(self):
        self.rows: list[tuple[str, str, float, bool | None]] = []

    def add(self, stage, check, value, passed=None):
        self.rows.append((stage, check, float(value), passed))

    def failed(self, stages=None) -> bool:
        return any(p is False for s, _, _, p in self.rows if stages is None or s in stages)

    def write(self, path):
        with open(path, "w") as fh:
            fh.write("stage,check,value,pass\n")
            for s, c, v, p in self.rows:
                flag = "" if p is None else int(p)
                fh.write(f"{s},{c},{v:.17g},{flag}\n")


def _threads(n: int) -> int:
    return (os.cpu_count() or 1) if n == 0 else n


class _Stage:
    """Prefix errors with the module and operation that raised them."""

    def __init__(self, where: str):
        self.where = where

    def __enter__(self):
        return self

    def __exit__(self, tp, exc, tb):
        if exc is not None and isinstance(exc, (OTRegError, ValueError, ArithmeticError)):
            if not getattr(exc, "_located", False):
                exc.args = (f"{self.where}: {exc}",)
                exc._located = True
        return False


def _prepare(cfg: ExperimentConfig):
    try:
        pair = build_pair(cfg.instance)
    except ConfigError:
        raise
    except OTRegError as exc:
        raise ConfigError(f"field 'instance': {exc}") from None
    rec = None
    if any(s in cfg.pipeline for s in NORMALISED_STAGES):
        with _Stage("density.normalize_at"):
            c = np.asarray(cfg.center)
            try:
                pair, rec = normalize_at(pair, c, c)
            except DomainError as exc:
                raise HypothesisViolation(str(exc)) from None
    with _Stage("transport.solve_ot"):
        sol = solve_ot(pair, int(cfg.instance.get("n_points", 1024)))
    return pair, sol, rec


def execute(cfg: ExperimentConfig, out: Path) -> Summary:
    out.mkdir(parents=True, exist_ok=True)
    summ = Summary()
    pair, sol, rec = _prepare(cfg)
    reg = cfg.regularity
    threads = _threads(cfg.threads)
    summ.add("solve", "cost", sol.cost)
    if rec is not None:
        summ.add("solve", "normalisation_identity", float(rec.is_identity))
    if "solve" in cfg.pipeline:
        sol.write_csv(out / "map.csv")
        with _Stage("transport.check_monotonicity"):
            mono = check_monotonicity(sol)
        summ.add("solve", "min_inner_product", mono.min_inner_product, mono.violating_pairs == 0)
        summ.add("solve", "inverse_mismatches", inverse_consistency(sol), inverse_consistency(sol) == 0)
    interp = None
    if "interpolate" in cfg.pipeline:
        with _Stage("eulerian.displacement_interpolate"):
            interp = displacement_interpolate(sol, pair.rho0, threads=threads)
        interp.write_csv(out / "slices.csv")
        bb, lag = bb_energy(interp, cfg.center), lagrangian_energy(sol)
        rel = abs(bb - lag) / lag if lag > 0 else abs(bb)
        summ.add("interpolate", "bb_energy", bb)
        summ.add("interpolate", "lagrangian_energy", lag)
        summ.add("interpolate", "energy_relative_gap", rel, rel <= cfg.energy_rtol)
        conv = displacement_convexity_check(interp, 0.0, cfg.center)
        summ.add("interpolate", "max_density", conv.max_density, None)
    inst = MapInstance.from_solution(sol, pair).rescaled(cfg.center, 1.0)
    if "approximate" in cfg.pipeline:
        with _Stage("regularity.harmonic_approximation"):
            ha = harmonic_approximation(inst.rescaled((0.0, 0.0), cfg.R0), reg)
        summ.add("approximate", "good_radius", ha.good.R)
        summ.add("approximate", "lagrangian_residual", ha.residual)
        summ.add("approximate", "energy_ratio", ha.energy_ratio)
        write_estimate_csv(harmonic_estimate_suite(ha.phi, 0.25), out / "estimates.csv")
        if interp is not None:
            with _Stage("boundary_layer.quasi_orthogonality_check"):
                hd = build_tilde_phi(interp, pair, cfg.center, cfg.R0)
                qo = quasi_orthogonality_check(interp, hd)
            summ.add("approximate", "cross_term", qo.cross)
    if "tilt" in cfg.pipeline:
        with _Stage("regularity.one_step_improvement"):
            st = one_step_improvement(inst, cfg.R0, reg)
        summ.add("tilt", "excess_before", st.before.excess)
        summ.add("tilt", "excess_after", st.after.excess, st.improved)
        summ.add("tilt", "frame_ratio", st.frame_ratio, st.frame_ratio <= reg.frame_constant)
        summ.add("tilt", "lambda_ratio", st.lambda_ratio, st.lambda_ratio <= reg.frame_constant)
        summ.add("tilt", "trace_residual", st.trace_residual)
    if "iterate" in cfg.pipeline:
        with _Stage("regularity.campanato_iterate"):
            state = campanato_iterate(inst, cfg.R0, reg)
        write_decay_csv(state, out / "decay.csv")
        summ.add("iterate", "rows", len(state.rows))
        summ.add("iterate", "breakdown_step", -1 if state.breakdown is None else state.breakdown,
                 state.breakdown is None)
        summ.add("iterate", "sup_ratio", state.sup_ratio, state.decay_ok)
        summ.add("iterate", "sup_bound", state.sup_bound)
        summ.add("iterate", "steps_passed", sum(r.passed for r in state.rows),
                 all(r.passed for r in state.rows))
    if "classify" in cfg.pipeline:
        pts, shape = scan_grid(float(cfg.scan["lo"]), float(cfg.scan["hi"]), int(cfg.scan["n"]))
        pts = pts + np.asarray(cfg.center)
        with _Stage("regularity.classify_regular_points"):
            cls = classify_regular_points(sol, pair, reg, pts, shape)
        cls.write_csv(out / "classify.csv")
        summ.add("classify", "regular_fraction", cls.regular_fraction)
        summ.add("classify", "flagged_components", cls.flagged_components())
    if "batteries" in cfg.pipeline:
        for name in cfg.batteries:
            rows = run_battery(name, cfg.seed)
            write_battery_csv(rows, out / f"battery_{name}.csv")
            hard = [r for r in rows if r.hard and not r.passed]
            soft = [r for r in rows if not r.hard and not r.passed]
            summ.add("batteries", f"{name}_hard_failures", len(hard), not hard)
            summ.add("batteries", f"{name}_ratio_failures", len(soft), not soft)
    summ.write(out / "summary.csv")
    return summ


def _exit_for(summ: Summary) -> int:
    hard = any(p is False and (s in ("solve", "interpolate") or c.endswith("_hard_failures"))
               for s, c, _, p in summ.rows)
    if hard:
        return EXIT_NUMERIC
    if summ.failed():
        return EXIT_HYPOTHESIS
    return 0


def _fail(exc: Exception) -> int:
    print(f"otreg: error: {exc}", file=sys.stderr)
    if isinstance(exc, ConfigError):
        return EXIT_CONFIG
    if isinstance(exc, HypothesisViolation):
        return EXIT_HYPOTHESIS
    return EXIT_NUMERIC


def cmd_run(args) -> int:
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg = dataclasses.replace(cfg, seed=args.seed)
    if args.threads is not None:
        cfg = dataclasses.replace(cfg, threads=args.threads)
    summ = execute(cfg, Path(args.out))
    code = _exit_for(summ)
    for s, c, v, p in summ.rows:
        if p is False:
            print(f"otreg: {s}: check {c} failed (value {v:.6g})", file=sys.stderr)
    return code


def cmd_battery(args) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    rows = run_battery(args.name, args.seed or 0)
    write_battery_csv(rows, out / f"battery_{args.name}.csv")
    hard = [r for r in rows if r.hard and not r.passed]
    soft = [r for r in rows if not r.hard and not r.passed]
    print(f"{args.name}: {len(rows)} rows, {len(hard)} hard failures, {len(soft)} ratio failures, "
          f"max ratio {max((r.ratio for r in rows if not r.hard), default=0.0):.6g}")
    if hard:
        return EXIT_NUMERIC
    return EXIT_HYPOTHESIS if soft else 0


def _dump(args, stage: str) -> int:
    cfg = load_config(args.config)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    pair, sol, _ = _prepare(cfg)
    if stage == "map":
        sol.write_csv(out / "map.csv")
    else:
        threads = _threads(args.threads if args.threads is not None else cfg.threads)
        with _Stage("eulerian.displacement_interpolate"):
            displacement_interpolate(sol, pair.rho0, threads=threads).write_csv(out / "slices.csv")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="otreg", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=None)
    common.add_argument("--threads", type=int, default=None, help="0 = all cores")
    common.add_argument("--out", required=True)
    sub = p.add_subparsers(dest="command", required=True)
    r = sub.add_parser("run", parents=[common], help="run a configured experiment")
    r.add_argument("--config", required=True)
    r.set_defaults(func=cmd_run)
    b = sub.add_parser("battery", parents=[common], help="run one invariant battery")
    b.add_argument("--name", required=True, choices=BATTERIES)
    b.set_defaults(func=cmd_battery)
    for name in ("map", "slices"):
        d = sub.add_parser(f"dump-{name}", parents=[common], help=f"write {name}.csv only")
        d.add_argument("--config", required=True)
        d.set_defaults(func=lambda a, n=name: _dump(a, n))
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(name)s: %(message)s")
    try:
        return args.func(args)
    except (OTRegError, ValueError, ArithmeticError) as exc:
        return _fail(exc)


if __name__ == "__main__":
    sys.exit(main())
