"""
Command line driver: ``oldroyd <subcommand> --config <path> [--out <dir>]``.

Configuration files are flat sectioned ``key = value`` text read with
:mod:`configparser`.  Every subcommand writes CSV tables (17 significant
digits, fixed headers) and a JSON summary into the output directory.
"""
from __future__ import annotations

import argparse
import configparser
import csv
import io
import json
import logging
import math
import sys
import time
from dataclasses import dataclass
from fractions import Fraction
from pathlib import Path

from . import cases, stability, verification
from .memory_kernel import KernelParams
from .stepper import SimConfig, StepFailure, run

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_SOLVER = 3
EXIT_ACCEPTANCE = 4

TRAJECTORY_COLUMNS = ("step", "t", "l2_U", "h1_U", "h1_Ubeta", "picard_iters", "energy_slack", "div_residual")
RATE_COLUMNS = ("level", "h_or_k", "err_L2", "err_H1", "rate_L2", "rate_H1")
TSCALING_COLUMNS = ("t", "err_L2", "err_L2_sqrt_t")


class ConfigError(ValueError):
    pass


REQUIRED = object()


def _number(text):
    """Float from decimal or fraction notation ("0.01", "1/2000")."""
    return float(Fraction(text.strip())) if "/" in text else float(text)


def _integer(text):
    return int(text.strip())


def _boolean(text):
    t = text.strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _word(text):
    return text.strip()


def _numbers(text):
    return tuple(_number(x) for x in text.split(",") if x.strip())


def _integers(text):
    return tuple(_integer(x) for x in text.split(",") if x.strip())


def fmt(x):
    """17 significant digits: exact double round trip."""
    if isinstance(x, bool):
        return "true" if x else "false"
    if isinstance(x, int):
        return str(x)
    return format(float(x), ".17g")


def _fmt_value(v):
    if isinstance(v, tuple):
        return ", ".join(fmt(x) for x in v)
    if isinstance(v, str):
        return v
    return fmt(v)


# section -> key -> (parser, default)
SCHEMA = {
    "physics": {
        "mu": (_number, None), "gamma": (_number, None), "delta": (_number, None),
        "kappa": (_number, None), "lambda": (_number, None), "nu": (_number, None),
    },
    "discretization": {"mesh_n": (_integer, 16), "k": (_number, REQUIRED), "T": (_number, REQUIRED)},
    "solver": {
        "picard_tol": (_number, 1e-10), "picard_max": (_integer, 50), "method": (_word, "picard"),
        "refactor": (_word, "adaptive"), "nonlinear": (_boolean, True),
    },
    "experiment": {
        "forcing": (_word, "zero"), "forcing_amplitude": (_number, 1.0),
        "initial": (_word, "zero"), "initial_amplitude": (_number, 1.0), "rough_modes": (_integer, 0),
        "manufactured_rate": (_number, 1.0),
        "levels": (_integers, (4, 8, 16, 32)),
        "k_levels": (_numbers, (1 / 20, 1 / 40, 1 / 80, 1 / 160)),
        "k_ref": (_number, 1 / 1280), "t_eval": (_numbers, (0.25, 0.5, 1.0, 2.0)), "t_rate": (_number, 1.0),
        "n_samples": (_integer, 8), "window_m": (_integer, 10), "window_l": (_integer, 20),
    },
    "output": {"stokes_norm": (_boolean, False), "keep_history": (_boolean, False)},
}
DEFAULT_PHYSICS = {"mu": 1.0, "gamma": 1.0, "delta": 1.0}


@dataclass(frozen=True)
class ConfigFile:
    sections: dict  # section -> {key: value}; physics always holds mu, gamma, delta

    def get(self, section, key):
        return self.sections[section][key]

    def sim_config(self):
        ph, d, so, ex, out = (self.sections[s] for s in SCHEMA)
        return SimConfig(
            mu=ph["mu"], gamma=ph["gamma"], delta=ph["delta"], k=d["k"], T=d["T"], mesh_n=d["mesh_n"],
            picard_tol=so["picard_tol"], picard_max=so["picard_max"],
            forcing=cases.ForcingSpec(ex["forcing"], ex["forcing_amplitude"]),
            initial=cases.InitialDataSpec(ex["initial"], ex["initial_amplitude"], ex["rough_modes"]),
            nonlinear=so["nonlinear"], solver=so["method"], refactor=so["refactor"],
            keep_history=out["keep_history"], stokes_norm=out["stokes_norm"],
            manufactured_rate=ex["manufactured_rate"])


def _resolve_physics(raw):
    """Fill mu, gamma, delta from either parameterization and check consistency."""
    out = {k: v for k, v in raw.items() if v is not None}
    phys = {"kappa", "lambda", "nu"}
    given = phys & out.keys()
    if given and given != phys:
        raise ConfigError(f"physics: kappa, lambda and nu must be given together (got {sorted(given)})")
    direct = {"mu", "gamma", "delta"} & out.keys()
    if given:
        try:
            params, mu = KernelParams.from_physical(out["kappa"], out["lambda"], out["nu"])
        except (ValueError, ZeroDivisionError) as exc:
            raise ConfigError(f"physics: {exc}") from None
        derived = {"mu": mu, "gamma": params.gamma, "delta": params.delta}
        for key in direct:
            if not math.isclose(out[key], derived[key], rel_tol=1e-12, abs_tol=1e-12):
                raise ConfigError(f"physics: {key}={out[key]!r} inconsistent with kappa/lambda/nu ({derived[key]!r})")
        out.update({k: v for k, v in derived.items() if k not in direct})
    for key, val in DEFAULT_PHYSICS.items():
        out.setdefault(key, val)
    return out


def parse_config(text):
    """Validated ConfigFile from sectioned key=value text."""
    cp = configparser.ConfigParser(interpolation=None, strict=True, inline_comment_prefixes=("#", ";"))
    cp.optionxform = str
    try:
        cp.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(f"malformed config: {exc}") from None
    for sec in cp.sections():
        if sec not in SCHEMA:
            raise ConfigError(f"unknown section [{sec}]")
    sections = {}
    for sec, keys in SCHEMA.items():
        given = cp[sec] if cp.has_section(sec) else {}
        for key in given:
            if key not in keys:
                raise ConfigError(f"unknown key {key!r} in section [{sec}]")
        vals = {}
        for key, (parser, default) in keys.items():
            if key in given:
                try:
                    vals[key] = parser(given[key])
                except (ValueError, ZeroDivisionError) as exc:
                    raise ConfigError(f"[{sec}] {key}: {exc}") from None
            elif default is REQUIRED:
                raise ConfigError(f"missing required key {key!r} in section [{sec}]")
            else:
                vals[key] = default
        sections[sec] = vals
    sections["physics"] = _resolve_physics(sections["physics"])
    k = sections["discretization"]["k"]
    if not 0.0 < k < 1.0:
        raise ConfigError(f"k = {k!r} violates the standing time-step assumption 0<k<1")
    cfg = ConfigFile(sections)
    try:
        cfg.sim_config()
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    return cfg


def serialize_config(cfg):
    """Text form of a ConfigFile with every key written out."""
    lines = []
    for sec, keys in SCHEMA.items():
        lines.append(f"[{sec}]")
        for key in keys:
            val = cfg.sections[sec].get(key)
            if val is not None:
                lines.append(f"{key} = {_fmt_value(val)}")
        lines.append("")
    return "\n".join(lines)


def config_echo(cfg):
    return {sec: {k: (list(v) if isinstance(v, tuple) else v) for k, v in vals.items() if v is not None}
            for sec, vals in cfg.sections.items()}


# ---------------------------------------------------------------------------
# writers

def _csv_text(header, rows):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for row in rows:
        w.writerow([fmt(x) for x in row])
    return buf.getvalue()


def trajectory_csv(records):
    rows = [(r.step, r.t, r.l2_U, r.h1_U, r.h1_Ubeta, r.picard_iters, r.energy_slack, r.div_residual)
            for r in records]
    return _csv_text(TRAJECTORY_COLUMNS, rows)


def rate_csv(table):
    return _csv_text(RATE_COLUMNS, table.rows())


def tscaling_csv(result):
    return _csv_text(TSCALING_COLUMNS, list(zip(result.t_eval, result.err_t, result.scaled)))


def _json_safe(obj):
    if isinstance(obj, dict):
        return {str(k): _json_safe(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_json_safe(v) for v in obj]
    if isinstance(obj, float) and not math.isfinite(obj):
        return None
    if hasattr(obj, "item"):
        return _json_safe(obj.item())
    return obj


def write_outputs(out_dir, files, summary):
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for name, text in files.items():
        (out / name).write_text(text, encoding="utf-8")
    (out / "summary.json").write_text(json.dumps(_json_safe(summary), indent=2, sort_keys=True) + "\n",
                                      encoding="utf-8")


SCHEME = {"element": "Taylor-Hood P2/P1", "quadrature_degree": 5, "time": "backward Euler",
          "memory": "right-rectangle recursion", "linear_solver": "SuperLU"}


# ---------------------------------------------------------------------------
# subcommands; each returns (files, summary, checks)

def _trajectory_checks(records):
    scale = max([1.0] + [r.f_norm ** 2 for r in records])
    return {
        "divergence": max((r.div_residual for r in records), default=0.0) <= 1e-10,
        "energy_slack": min((r.energy_slack for r in records), default=0.0) >= -1e-10 * scale,
    }


def cmd_run(cfg):
    sim = cfg.sim_config()
    res = run(sim)
    checks = _trajectory_checks(res.records)
    summary = {"records": len(res.records), "lambda1": res.lambda1,
               "final": {"l2_U": res.records[-1].l2_U, "h1_U": res.records[-1].h1_U} if res.records else {}}
    return {"trajectory.csv": trajectory_csv(res.records)}, summary, checks


def cmd_converge_space(cfg):
    sim = cfg.sim_config()
    table = verification.spatial_convergence_study(sim, cfg.get("experiment", "levels"))
    checks = {"rate_L2>=1.9": table.rates_l2[-1] >= 1.9, "rate_H1>=0.9": table.rates_h1[-1] >= 0.9}
    return {"rates_space.csv": rate_csv(table)}, {"rates": table.to_dict()}, checks


def cmd_converge_time(cfg):
    sim = cfg.sim_config()
    ex = cfg.sections["experiment"]
    table = verification.temporal_convergence_study(sim, ex["k_levels"], ex["k_ref"], ex["t_rate"])
    checks = {"rate_L2 in [0.85,1.1]": 0.85 <= table.fit_l2 <= 1.1}
    return {"rates_time.csv": rate_csv(table)}, {"rates": table.to_dict()}, checks


def cmd_nonsmooth(cfg):
    sim = cfg.sim_config()
    ex = cfg.sections["experiment"]
    res = verification.nonsmooth_initial_data_experiment(sim, ex["k_levels"], ex["k_ref"], ex["t_eval"],
                                                         ex["t_rate"])
    checks = {"rate_L2 in [0.85,1.1]": 0.85 <= res.rate_table.fit_l2 <= 1.1, "spread<3": res.spread < 3.0}
    files = {"rates_nonsmooth.csv": rate_csv(res.rate_table), "tscaling.csv": tscaling_csv(res)}
    return files, res.to_dict(), checks


def cmd_stability(cfg):
    sim = cfg.sim_config()
    ex = cfg.sections["experiment"]
    res = run(sim)
    space = verification.solution_space(sim.mesh_n)
    n_est = stability.estimate_N(space, samples=ex["n_samples"]).value
    report = stability.build_report(res, space, N_est=n_est, windows=((ex["window_m"], ex["window_l"]),))
    checks = {"lemma41": report.lemma41_margin >= 0, "lemma42": report.lemma42_margin >= 0,
              "lemma43": report.lemma43_passed}
    checks.update(_trajectory_checks(res.records))
    return {"trajectory.csv": trajectory_csv(res.records)}, {"stability": report.to_dict()}, checks


def cmd_long_time(cfg):
    sim = cfg.sim_config()
    ex = cfg.sections["experiment"]
    space = verification.solution_space(sim.mesh_n)
    n_est = stability.estimate_N(space, samples=ex["n_samples"]).value
    margin = stability.uniqueness_margin(n_est, sim.mu, sim.kernel.total_viscosity(sim.mu),
                                         stability.forcing_sup_norm(sim, space))
    res = verification.long_time_uniformity(sim, sim.k, ex["k_ref"], ex["t_eval"])
    rows = [(t, e) for t, e in zip(res.t_eval, res.err_l2)]
    checks = {"uniqueness_margin>0": margin > 0, "growth<=2": res.growth <= 2.0}
    summary = dict(res.to_dict(), N_est=n_est, uniqueness_margin=margin)
    return {"uniformity.csv": _csv_text(("t", "err_L2"), rows)}, summary, checks


def cmd_properties(cfg=None):
    from .properties import run_all
    results = run_all()
    for r in results:
        print(r.line())
    summary = {"checks": [{"name": r.name, "passed": r.passed, "worst": r.worst, "tolerance": r.tolerance}
                          for r in results]}
    return {}, summary, {r.name: r.passed for r in results}


COMMANDS = {
    "run": cmd_run, "converge-space": cmd_converge_space, "converge-time": cmd_converge_time,
    "nonsmooth": cmd_nonsmooth, "stability": cmd_stability, "long-time": cmd_long_time,
    "properties": cmd_properties,
}


def main(argv=None):
    parser = argparse.ArgumentParser(prog="oldroyd", description=__doc__.strip().splitlines()[0])
    parser.add_argument("command", choices=sorted(COMMANDS))
    parser.add_argument("--config", help="sectioned key=value configuration file")
    parser.add_argument("--out", default="oldroyd_out", help="output directory")
    parser.add_argument("-v", "--verbose", action="store_true")
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")

    cfg = None
    if args.command != "properties":
        if not args.config:
            print("error: --config is required for this subcommand", file=sys.stderr)
            return EXIT_CONFIG
        try:
            cfg = parse_config(Path(args.config).read_text(encoding="utf-8"))
        except (OSError, ConfigError) as exc:
            print(f"config error: {exc}", file=sys.stderr)
            return EXIT_CONFIG

    t0 = time.perf_counter()
    try:
        files, summary, checks = COMMANDS[args.command](cfg)
    except StepFailure as exc:
        print(f"solver failure after {len(exc.records)} steps: {exc}", file=sys.stderr)
        return EXIT_SOLVER
    except (RuntimeError, ArithmeticError) as exc:
        print(f"solver failure: {exc}", file=sys.stderr)
        return EXIT_SOLVER
    summary = {"command": args.command, "result": summary, "checks": checks, "scheme": SCHEME,
               "wall_time_s": time.perf_counter() - t0,
               "config": config_echo(cfg) if cfg is not None else None}
    write_outputs(args.out, files, summary)
    failed = [name for name, ok in checks.items() if not ok]
    for name, ok in checks.items():
        print(f"{'PASS' if ok else 'FAIL'} {name}")
    return EXIT_ACCEPTANCE if failed else EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
