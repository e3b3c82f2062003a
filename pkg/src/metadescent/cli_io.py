"""Run configuration files, CSV output and the ``metadescent`` command line.

Exit codes: 0 success, 1 usage or configuration error, 2 numerical
degeneracy, 3 verification failure.
"""
from __future__ import annotations

import argparse
import csv
import io
import json
import math
import re
import sys
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Any, Sequence

import numpy as np

from . import experiments, theory_bounds
from .maml_core import build_meta_system
from .solvers import DegenerateSystemError, solve_ideal, solve_min_l2
from .task_gen import ConfigError, MetaConfig, sample_task_batch, sample_truths, w0_uniform

EXIT_OK = 0
EXIT_CONFIG = 1
EXIT_DEGENERATE = 2
EXIT_VERIFY = 3

CSV_COLUMNS = (
    "p", "s", "m", "n_t", "n_v", "nu", "sigma", "alpha_t", "replicates", "skips",
    "estimand", "mean", "std", "stderr", "b_w0", "b_w_ideal", "b_w", "eta",
    "b_eig_min", "b_eig_max", "c_eig_min", "c_eig_max", "flags",
)

SYSTEM_KEYS = {"p", "s", "m", "n_t", "n_v", "n_r", "sigma", "sigma_r", "nu", "nu_r",
               "alpha_t", "alpha_r", "w0_norm_sq", "w0"}
SWEEP_KEYS = {"p_grid", "replicates", "estimands", "alpha_t_rule", "alpha_t_scale"}
CURVE_KEYS = {"id", "nu", "sigma"}
CONSTANT_KEYS = {"C1", "C2", "C3", "C4"}
AUDIT_KEYS = {"replicates", "alpha_r", "xxxx_n", "xxxx_p", "xxxx_draws", "identity_instances"}
TOP_KEYS = {"system", "sweep", "curves", "constants", "audit", "output", "seed"}


class ConfigFileError(ConfigError):
    def __init__(self, message: str, line: int | None = None, source: str = "<config>"):
        where = f"{source}:{line}: " if line else f"{source}: "
        super().__init__(where + message)
        self.line = line


# --------------------------------------------------------------------------
# Config documents


@dataclass
class RunConfig:
    system: dict[str, Any]
    sweep: dict[str, Any] | None = None
    curves: list[dict[str, Any]] | None = None
    constants: dict[str, float] = field(default_factory=lambda: dict(theory_bounds.DEFAULT_CONSTANTS))
    audit: dict[str, Any] | None = None
    output: str | None = None
    seed: int = 0

    def to_dict(self) -> dict[str, Any]:
        out: dict[str, Any] = {"system": dict(self.system)}
        if self.sweep is not None:
            out["sweep"] = dict(self.sweep)
        if self.curves is not None:
            out["curves"] = [dict(c) for c in self.curves]
        out["constants"] = dict(self.constants)
        if self.audit is not None:
            out["audit"] = dict(self.audit)
        if self.output is not None:
            out["output"] = self.output
        out["seed"] = self.seed
        return out

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), indent=2) + "\n"

    def meta_config(self, curve: dict[str, Any] | None = None) -> MetaConfig:
        sysd = dict(self.system)
        if curve is not None:
            sysd.update({k: v for k, v in curve.items() if k != "id"})
        s = int(sysd["s"])
        if "w0" in sysd:
            w0_s = np.asarray(sysd["w0"], dtype=float)
        else:
            w0_s = w0_uniform(float(sysd.get("w0_norm_sq", 0.0)), s)
        p = int(sysd.get("p", s))
        return MetaConfig(
            p=p, s=s, m=sysd["m"], n_t=sysd["n_t"], n_v=sysd["n_v"], n_r=sysd.get("n_r", 1),
            sigma=float(sysd.get("sigma", 0.0)), sigma_r=float(sysd.get("sigma_r", 0.0)),
            alpha_t=float(sysd.get("alpha_t", 0.0)), alpha_r=sysd.get("alpha_r"),
            w0_s=w0_s, nu=sysd.get("nu", 0.0), nu_r=float(sysd.get("nu_r", 0.0)),
        )

    def curve_list(self) -> list[dict[str, Any] | None]:
        return list(self.curves) if self.curves else [None]

    def plan(self, curve: dict[str, Any] | None = None, replicates: int | None = None) -> experiments.SweepPlan:
        if self.sweep is None:
            raise ConfigError("config has no 'sweep' section")
        sw = self.sweep
        return experiments.SweepPlan(
            base_cfg=self.meta_config(curve),
            p_grid=tuple(sw["p_grid"]),
            replicates=int(replicates if replicates is not None else sw.get("replicates", 100)),
            seed=self.seed,
            estimands=tuple(sw.get("estimands", experiments.ESTIMANDS)),
            alpha_t_rule=sw.get("alpha_t_rule", "fixed"),
            alpha_t_scale=float(sw.get("alpha_t_scale", 0.02)),
        )


def _key_line(text: str, key: str) -> int | None:
    m = re.search(r'"' + re.escape(key) + r'"\s*:', text)
    return text.count("\n", 0, m.start()) + 1 if m else None


def _check_keys(obj: Any, allowed: set[str], section: str, text: str, source: str) -> None:
    if not isinstance(obj, dict):
        raise ConfigFileError(f"section '{section}' must be an object", _key_line(text, section), source)
    for key in obj:
        if key not in allowed:
            raise ConfigFileError(f"unknown key '{key}' in '{section}'", _key_line(text, key), source)


def parse_config(text: str, source: str = "<config>") -> RunConfig:
    """Parse and validate a JSON run configuration."""
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigFileError(exc.msg, exc.lineno, source) from None
    _check_keys(doc, TOP_KEYS, "<top level>", text, source)
    if "system" not in doc:
        raise ConfigFileError("missing required section 'system'", None, source)
    _check_keys(doc["system"], SYSTEM_KEYS, "system", text, source)
    for k in ("s", "m", "n_t", "n_v"):
        if k not in doc["system"]:
            raise ConfigFileError(f"'system' is missing '{k}'", _key_line(text, "system"), source)
    if "w0" in doc["system"] and "w0_norm_sq" in doc["system"]:
        raise ConfigFileError("give either 'w0' or 'w0_norm_sq', not both", _key_line(text, "w0"), source)
    if "sweep" in doc:
        _check_keys(doc["sweep"], SWEEP_KEYS, "sweep", text, source)
        if "p_grid" not in doc["sweep"]:
            raise ConfigFileError("'sweep' is missing 'p_grid'", _key_line(text, "sweep"), source)
    if "curves" in doc:
        if not isinstance(doc["curves"], list) or not doc["curves"]:
            raise ConfigFileError("'curves' must be a nonempty list", _key_line(text, "curves"), source)
        for c in doc["curves"]:
            _check_keys(c, CURVE_KEYS, "curves", text, source)
            if "id" not in c:
                raise ConfigFileError("every curve needs an 'id'", _key_line(text, "curves"), source)
    if "constants" in doc:
        _check_keys(doc["constants"], CONSTANT_KEYS, "constants", text, source)
    if "audit" in doc:
        _check_keys(doc["audit"], AUDIT_KEYS, "audit", text, source)
    constants = dict(theory_bounds.DEFAULT_CONSTANTS)
    constants.update(doc.get("constants", {}))
    cfg = RunConfig(
        system=doc["system"],
        sweep=doc.get("sweep"),
        curves=doc.get("curves"),
        constants=constants,
        audit=doc.get("audit"),
        output=doc.get("output"),
        seed=int(doc.get("seed", 0)),
    )
    try:
        for curve in cfg.curve_list():
            cfg.meta_config(curve)
            if cfg.sweep is not None:
                cfg.plan(curve)
    except (ConfigError, KeyError, TypeError, ValueError) as exc:
        raise ConfigFileError(str(exc), None, source) from None
    return cfg


BUNDLED = ("fig1_a", "fig1_b", "fig1_c", "fig1_d", "fig1_e", "appendixE1", "underparam_p1", "audit")


def bundled_config_text(name: str) -> str:
    return resources.files("metadescent").joinpath("configs", f"{name}.json").read_text(encoding="utf-8")


def load_config(path_or_name: str) -> RunConfig:
    """Read a config from a path, or a bundled one by name (e.g. ``fig1_a``)."""
    path = Path(path_or_name)
    if path.exists():
        return parse_config(path.read_text(encoding="utf-8"), str(path))
    if path_or_name in BUNDLED:
        return parse_config(bundled_config_text(path_or_name), path_or_name)
    raise ConfigFileError("no such file or bundled config", None, path_or_name)


# --------------------------------------------------------------------------
# CSV


def format_value(v: Any) -> str:
    """Round-trip exact text for numbers; ``repr`` of a float is shortest-exact."""
    if isinstance(v, (bool, np.bool_)):
        return str(bool(v)).lower()
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


def record_row(rec: experiments.SweepRecord) -> dict[str, str]:
    b = rec.bounds
    flags = list(b.flags) + [f for f in rec.flags if f not in b.flags]
    values = {
        "p": rec.p, "s": rec.cfg.s, "m": rec.cfg.m, "n_t": rec.cfg.n_t, "n_v": rec.cfg.n_v,
        "nu": rec.cfg.nu_total, "sigma": rec.cfg.sigma, "alpha_t": rec.cfg.alpha_t,
        "replicates": rec.replicates, "skips": rec.skips, "estimand": rec.estimand,
        "mean": rec.mean, "std": rec.std, "stderr": rec.stderr,
        "b_w0": b.b_w0, "b_w_ideal": b.b_w_ideal, "b_w": b.b_w, "eta": b.eta,
        "b_eig_min": b.b_eig_min, "b_eig_max": b.b_eig_max, "c_eig_min": b.c_eig_min, "c_eig_max": b.c_eig_max,
        "flags": ";".join(flags),
    }
    return {k: format_value(values[k]) for k in CSV_COLUMNS}


def records_to_csv(records: Sequence[experiments.SweepRecord]) -> str:
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=CSV_COLUMNS, lineterminator="\n")
    w.writeheader()
    for rec in records:
        w.writerow(record_row(rec))
    return buf.getvalue()


def write_text(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write(text)


def read_csv(path: str | Path) -> list[dict[str, str]]:
    with open(path, newline="", encoding="utf-8") as fh:
        return list(csv.DictReader(fh))


def _output_paths(base: Path, curves: list[dict[str, Any] | None]) -> list[Path]:
    if len(curves) == 1:
        return [base]
    return [base.with_name(f"{base.stem}_{c['id']}{base.suffix or '.csv'}") for c in curves]


# --------------------------------------------------------------------------
# Commands


def cmd_sweep(config_path: str, output: str | None = None, seed: int | None = None,
              replicates: int | None = None, workers: int | None = None, out=None) -> int:
    out = out or sys.stdout
    cfg = load_config(config_path)
    if seed is not None:
        cfg.seed = seed
    target = output or cfg.output
    if not target:
        raise ConfigFileError("no output path (set 'output' or pass --output)", None, config_path)
    curves = cfg.curve_list()
    paths = _output_paths(Path(target), curves)
    for curve, path in zip(curves, paths):
        records = experiments.run_sweep(cfg.plan(curve, replicates), workers)
        try:
            write_text(path, records_to_csv(records))
        except OSError as exc:
            print(f"error: cannot write {path}: {exc}", file=sys.stderr)
            return EXIT_CONFIG
        print(f"wrote {len(records)} rows to {path}", file=out)
        if any(not r.valid for r in records):
            print(f"warning: {path} has p values where every replicate was degenerate", file=out)
    return EXIT_OK


def _bound_configs(cfg: RunConfig) -> list[tuple[str, MetaConfig]]:
    items = []
    for curve in cfg.curve_list():
        label = curve["id"] if curve else "-"
        if cfg.sweep is not None:
            plan = cfg.plan(curve)
            items += [(label, plan.config_at(p)) for p in plan.p_grid]
        else:
            items.append((label, cfg.meta_config(curve)))
    return items


def format_bound_report(mc: MetaConfig, rep: theory_bounds.BoundReport) -> str:
    lines = [f"p={mc.p} s={mc.s} m={mc.m} n_t={mc.n_t} n_v={mc.n_v} nu={mc.nu_total:g} sigma={mc.sigma:g} alpha_t={mc.alpha_t:.6g}"]
    for name, symbol in theory_bounds.BOUND_SYMBOLS.items():
        value = getattr(rep, name)
        text = value if isinstance(value, str) else f"{value:.10g}"
        lines.append(f"  {symbol:<18} {text}")
    lines.append(f"  {'flags':<18} {';'.join(rep.flags) or '-'}")
    return "\n".join(lines)


BOUND_CSV_COLUMNS = ("curve", "p", "s", "m", "n_t", "n_v", "nu", "sigma", "alpha_t") + tuple(theory_bounds.BOUND_SYMBOLS) + ("flags",)


def cmd_bounds(config_path: str, output: str | None = None, out=None) -> int:
    out = out or sys.stdout
    cfg = load_config(config_path)
    rows = []
    for label, mc in _bound_configs(cfg):
        rep = theory_bounds.bound_stack(mc)
        print(("[" + label + "] " if label != "-" else "") + format_bound_report(mc, rep), file=out)
        d = rep.as_dict()
        row = {"curve": label, "p": mc.p, "s": mc.s, "m": mc.m, "n_t": mc.n_t, "n_v": mc.n_v,
               "nu": mc.nu_total, "sigma": mc.sigma, "alpha_t": mc.alpha_t}
        row.update({k: d[k] for k in theory_bounds.BOUND_SYMBOLS})
        row["flags"] = d["flags"]
        rows.append({k: format_value(v) for k, v in row.items()})
    if output:
        buf = io.StringIO()
        w = csv.DictWriter(buf, fieldnames=BOUND_CSV_COLUMNS, lineterminator="\n")
        w.writeheader()
        w.writerows(rows)
        write_text(Path(output), buf.getvalue())
    return EXIT_OK


def cmd_verify(config_path: str = "audit", seed: int | None = None, replicates: int | None = None, out=None) -> int:
    """Audit table plus algebraic identity suite; 0 iff every check passes."""
    out = out or sys.stdout
    cfg = load_config(config_path)
    audit = dict(cfg.audit or {})
    mc = cfg.meta_config(cfg.curve_list()[0])
    seed = cfg.seed if seed is None else seed
    reps = int(replicates if replicates is not None else audit.get("replicates", 2000))
    rows = experiments.audit_expectations(
        mc, reps, seed,
        alpha_r_values=audit.get("alpha_r"),
        xxxx_shape=(int(audit.get("xxxx_n", 5)), int(audit.get("xxxx_p", 8))),
        xxxx_draws=int(audit.get("xxxx_draws", 100_000)),
    )
    ok = True
    print(f"{'check':<32} {'empirical':>16} {'theory':>16} {'stderr':>12} {'z':>8}  verdict", file=out)
    for r in rows:
        passed = math.isfinite(r.z) and abs(r.z) <= 4
        ok &= passed
        print(f"{r.name:<32} {r.empirical:>16.8g} {r.theoretical:>16.8g} {r.stderr:>12.4g} {r.z:>8.3f}  {'pass' if passed else 'FAIL'}", file=out)

    n_inst = int(audit.get("identity_instances", 100))
    worst = {"pythagoras_rel": 0.0, "interpolation_rel": 0.0, "delta_gamma_abs": 0.0}
    ideal_ok = sandwich_ok = True
    for i in range(n_inst):
        _, system = experiments.random_instance(seed, i)
        chk = experiments.check_identities(system)
        for k in worst:
            worst[k] = max(worst[k], getattr(chk, k))
        ideal_ok &= chk.ideal_gap >= -1e-8
        sandwich_ok &= chk.sandwich_ok
    identity_rows = [
        ("term1+term2 = model error (rel)", worst["pythagoras_rel"], worst["pythagoras_rel"] <= 1e-8),
        ("B w_l2 = gamma (rel to |gamma|)", worst["interpolation_rel"], worst["interpolation_rel"] <= 1e-8),
        ("gamma - B w0 - delta_gamma", worst["delta_gamma_abs"], worst["delta_gamma_abs"] <= 1e-8),
        ("ideal <= min-norm model error", float(ideal_ok), ideal_ok),
        ("term 2 eigenvalue sandwich", float(sandwich_ok), sandwich_ok),
    ]
    print(f"\nidentities over {n_inst} random instances (worst case)", file=out)
    for name, value, passed in identity_rows:
        ok &= passed
        print(f"{name:<32} {value:>16.8g}  {'pass' if passed else 'FAIL'}", file=out)

    if mc.overparameterized:
        n_own = min(reps, 20)
        worst_pyth = worst_dg = worst_t2 = worst_ideal = 0.0
        own_ok = True
        for r in range(n_own):
            rng = experiments.replicate_stream(seed, r)
            truths, _ = sample_truths(mc, rng)
            system = build_meta_system(sample_task_batch(mc, truths, rng), mc)
            chk = experiments.check_identities(system)
            own_ok &= chk.passes()
            l2 = solve_min_l2(system)
            worst_pyth = max(worst_pyth, chk.pythagoras_rel)
            worst_dg = max(worst_dg, float(system.delta_gamma @ system.delta_gamma))
            worst_t2 = max(worst_t2, l2.term2)
            worst_ideal = max(worst_ideal, solve_ideal(system).model_error)
        print(f"\nidentities on the configured system, {n_own} replicates (largest value)", file=out)
        for name, value in (("term1+term2 = model error (rel)", worst_pyth), ("|delta_gamma|^2", worst_dg),
                            ("term2", worst_t2), ("ideal model error", worst_ideal)):
            print(f"{name:<32} {value:>16.8g}", file=out)
        print(f"{'all identities':<32} {'':>16}  {'pass' if own_ok else 'FAIL'}", file=out)
        ok &= own_ok
    return EXIT_OK if ok else EXIT_VERIFY


def cmd_floor(config_path: str, out=None) -> int:
    out = out or sys.stdout
    cfg = load_config(config_path)
    c = cfg.constants
    for curve in cfg.curve_list():
        mc = cfg.meta_config(curve)
        b_delta = theory_bounds.approx_b_delta(mc, c["C1"], c["C2"], c["C3"])
        label = f"[{curve['id']}] " if curve else ""
        if mc.w0_norm_sq == 0:
            print(f"{label}nu={mc.nu_total:g} sigma={mc.sigma:g}: zero mean truth, no floor defined", file=out)
            continue
        fl = theory_bounds.descent_floor(mc, c["C4"], b_delta)
        if fl.g == 0:
            verdict = f"no fluctuation term; infimum approached at the threshold p = {c['C4'] * mc.mn_v:.6g}"
        elif fl.monotone_decreasing:
            verdict = f"monotone decreasing for p > {c['C4'] * mc.mn_v:.6g}"
        else:
            verdict = f"descent floor at p* = {fl.p_star:.6g}, value {fl.floor_value:.6g}"
        print(f"{label}nu={mc.nu_total:g} sigma={mc.sigma:g} g={fl.g:.6g}: {verdict}", file=out)
    return EXIT_OK


def cmd_tightness(config_path: str, output: str | None = None, replicates: int | None = None,
                  workers: int | None = None, out=None) -> int:
    out = out or sys.stdout
    cfg = load_config(config_path)
    c = cfg.constants
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["curve", "p", "simulated", "stderr", "approx", "ratio"])
    for curve in cfg.curve_list():
        plan = cfg.plan(curve, replicates)
        plan = experiments.with_overrides(plan, estimands=("model_error_l2",))
        records = experiments.run_sweep(plan, workers)
        label = curve["id"] if curve else "-"
        for row in experiments.tightness_comparison(records, c["C1"], c["C2"], c["C3"], c["C4"]):
            w.writerow([label, row.p] + [format_value(x) for x in (row.simulated, row.stderr, row.approx, row.ratio)])
            print(f"{label:>3} p={row.p:<5d} simulated={row.simulated:<12.6g} approx={row.approx:<12.6g} ratio={row.ratio:.4f}", file=out)
    if output:
        write_text(Path(output), buf.getvalue())
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="metadescent", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("sweep", help="run a seeded sweep over p and write CSV")
    p.add_argument("config")
    p.add_argument("-o", "--output")
    p.add_argument("--seed", type=int)
    p.add_argument("--replicates", type=int)
    p.add_argument("--workers", type=int, help="worker processes (default from METADESCENT_THREADS)")

    p = sub.add_parser("bounds", help="evaluate the bound stack")
    p.add_argument("config")
    p.add_argument("-o", "--output")

    p = sub.add_parser("verify", help="audit exact expectations and identities")
    p.add_argument("config", nargs="?", default="audit")
    p.add_argument("--seed", type=int)
    p.add_argument("--replicates", type=int)

    p = sub.add_parser("floor", help="descent-floor verdict per curve")
    p.add_argument("config")

    p = sub.add_parser("tightness", help="simulated model error against the approximate bound")
    p.add_argument("config")
    p.add_argument("-o", "--output")
    p.add_argument("--replicates", type=int)
    p.add_argument("--workers", type=int)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_CONFIG if exc.code else EXIT_OK
    try:
        if args.command == "sweep":
            return cmd_sweep(args.config, args.output, args.seed, args.replicates, args.workers)
        if args.command == "bounds":
            return cmd_bounds(args.config, args.output)
        if args.command == "verify":
            return cmd_verify(args.config, args.seed, args.replicates)
        if args.command == "floor":
            return cmd_floor(args.config)
        return cmd_tightness(args.config, args.output, args.replicates, args.workers)
    except DegenerateSystemError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DEGENERATE
    except (ConfigError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
