"""Config-driven experiment runner.

An experiment is a YAML file declaring an operator (by family or raw
coefficient expressions), a grid, observation windows, a list of
hypothesis checks and harness checks, and an optional Monte Carlo
block.  `run` executes hypothesis checks first, then the harness
checks, writes report.txt / summary.csv / per-check CSVs (optional SVG
curves) and exits 0 (all pass), 1 (some check failed), 2 (config
error) or 3 (fatal numeric error).
"""

from __future__ import annotations

import argparse
import concurrent.futures
import csv
import importlib.resources
import os
import sys

import yaml

from . import hypotheses
from .compactness import (CompactnessError, compactness_diagnostic,
                          diagnostic_to_csv)
from .expr import ExprError, parse
from .fkmc import FkConfig, FkmcError
from .harness import REGISTRY, HarnessError, RunContext
from .kernel import KernelError
from .operator import (OperatorError, TestFunction, confining_family,
                       heat_operator, make_operator, ou_operator,
                       radial_family)
from .solver import Grid, SolverError

__all__ = ["ConfigError", "load_config", "run", "list_checks", "main"]

_NUMERIC_ERRORS = (SolverError, KernelError, FkmcError, OperatorError,
                   HarnessError, CompactnessError, ExprError,
                   FloatingPointError, ZeroDivisionError)

_HYPOTHESIS_IDS = ("lyapunov", "lyapunov_minus_c", "W", "h", "div",
                   "drift_compensation", "V", "bounded_Aphi")


class ConfigError(Exception):
    pass


# ---------------------------------------------------------------------------
# config loading / validation

def _require(block, key, path):
    if key not in block:
        raise ConfigError(f"missing field {path}.{key}")
    return block[key]


def _normalize_operator(block):
    family = _require(block, "family", "operator")
    out = {"family": family}
    params = dict(block.get("params", {}))
    if family in ("heat", "ou"):
        pass
    elif family == "confining":
        for key in ("dim", "k", "m", "l", "omega", "C1", "c", "b",
                    "interval"):
            _require(params, key, "operator.params")
    elif family == "radial":
        for key in ("dim", "m", "r", "q", "Q", "b", "c", "C_J",
                    "interval"):
            _require(params, key, "operator.params")
    elif family == "raw":
        for key in ("dim", "Q", "b", "c", "c0", "eta0", "interval"):
            _require(params, key, "operator.params")
    else:
        raise ConfigError(f"unknown operator.family {family!r}")
    if "interval" in params:
        params["interval"] = [float(v) for v in params["interval"]]
    out["params"] = params
    return out


def _build_operator(block):
    family = block["family"]
    p = dict(block["params"])
    try:
        if family == "heat":
            return heat_operator(int(p.get("dim", 1)),
                                 c=float(p.get("c", 0.0)),
                                 interval=tuple(p.get("interval", (0, 10))))
        if family == "ou":
            return ou_operator(interval=tuple(p.get("interval", (0, 10))))
        dim = int(p["dim"])
        interval = tuple(p["interval"])
        if family == "confining":
            return confining_family(
                dim=dim, k=int(p["k"]), m=int(p["m"]), l=int(p["l"]),
                omega=parse(str(p["omega"]), dim),
                C1=parse(str(p["C1"]), dim),
                c=parse(str(p["c"]), dim),
                b=[parse(str(src), dim) for src in p["b"]],
                interval=interval)
        if family == "radial":
            q_upper = {(int(i), int(j)): parse(str(src), dim)
                       for (i, j), src in
                       ((tuple(int(v) for v in key.split(",")), val)
                        for key, val in p["Q"].items())}
            return radial_family(
                dim, m=int(p["m"]), r=int(p["r"]), q=int(p["q"]),
                Q_upper=q_upper, b=parse(str(p["b"]), dim),
                c=parse(str(p["c"]), dim), C_J=float(p["C_J"]),
                interval=interval)
        # raw
        q_upper = {(int(i), int(j)): parse(str(src), dim)
                   for (i, j), src in
                   ((tuple(int(v) for v in key.split(",")), val)
                    for key, val in p["Q"].items())}
        eta_profile = (parse(str(p["eta_profile"]), dim)
                       if "eta_profile" in p else None)
        return make_operator(
            dim, q_upper, [parse(str(src), dim) for src in p["b"]],
            parse(str(p["c"]), dim), c0=float(p["c0"]),
            eta0=float(p["eta0"]), interval=interval,
            eta_profile=eta_profile)
    except (KeyError, ValueError, TypeError, ExprError) as err:
        raise ConfigError(f"operator block invalid: {err}") from err


def load_config(path):
    """Parse and validate an experiment file; returns the normalized
    config dict (sorted keys, canonical scalar types)."""
    try:
        with open(path) as fh:
            raw = yaml.safe_load(fh)
    except OSError as err:
        raise ConfigError(f"cannot read {path}: {err}") from err
    except yaml.YAMLError as err:
        raise ConfigError(f"YAML parse error in {path}: {err}") from err
    if not isinstance(raw, dict):
        raise ConfigError("top level must be a mapping")

    cfg = {}
    cfg["operator"] = _normalize_operator(
        _require(raw, "operator", "<top>"))

    g = _require(raw, "grid", "<top>")
    grid = {"dim": int(_require(g, "dim", "grid")),
            "n": float(_require(g, "n", "grid")),
            "N": int(_require(g, "N", "grid")),
            "dt": float(_require(g, "dt", "grid")),
            "bc": str(g.get("bc", "dirichlet"))}
    if grid["N"] < 3 or grid["N"] % 2 == 0:
        raise ConfigError("grid.N must be odd and >= 3")
    if grid["bc"] not in ("dirichlet", "neumann"):
        raise ConfigError(f"grid.bc {grid['bc']!r} unknown")
    cfg["grid"] = grid

    w = _require(raw, "windows", "<top>")
    pairs = [[float(s), float(t)]
             for s, t in _require(w, "pairs", "windows")]
    lo, hi = cfg["operator"]["params"].get(
        "interval", [0.0, 10.0])
    for s, t in pairs:
        if not (lo <= s < t <= hi):
            raise ConfigError(
                f"windows.pairs entry ({s},{t}) outside operator "
                f"interval [{lo},{hi}]")
    cfg["windows"] = {"box": float(_require(w, "box", "windows")),
                      "pairs": pairs}

    checks = []
    for entry in raw.get("checks", []):
        if isinstance(entry, str):
            entry = {"id": entry}
        cid = _require(entry, "id", "checks[]")
        if cid not in REGISTRY:
            raise ConfigError(f"unknown check id {cid!r}")
        checks.append({k: entry[k] for k in sorted(entry)})
    cfg["checks"] = checks

    hyps = []
    for entry in raw.get("hypotheses", []):
        cid = _require(entry, "id", "hypotheses[]")
        if cid not in _HYPOTHESIS_IDS:
            raise ConfigError(f"unknown hypothesis id {cid!r}")
        hyps.append({k: entry[k] for k in sorted(entry)})
    cfg["hypotheses"] = hyps

    if "compactness" in raw:
        c = raw["compactness"]
        cfg["compactness"] = {
            "phi": str(c.get("phi", "1+r^2")),
            "W": str(c.get("W", "1+1/(1+r^2)")),
            "mu": float(c.get("mu", 0.0)),
            "R_W": float(c.get("R_W", 2.0)),
            "delta": float(_require(c, "delta", "compactness")),
            "R_list": [float(v) for v in _require(c, "R_list",
                                                  "compactness")],
            "l": int(c.get("l", 3)),
        }

    if "mc" in raw:
        m = raw["mc"]
        cfg["mc"] = {"n_paths": int(_require(m, "n_paths", "mc")),
                     "dt_mc": float(_require(m, "dt_mc", "mc")),
                     "seed": int(_require(m, "seed", "mc"))}

    cfg["output"] = str(raw.get("output", "out"))
    cfg["svg"] = bool(raw.get("svg", False))
    cfg["tolerances"] = {str(k): float(v)
                         for k, v in raw.get("tolerances", {}).items()}
    return cfg


def _run_hypothesis(op, entry):
    p = dict(entry)
    cid = p.pop("id")
    J = op.time_interval
    dim = op.dim

    def fn(src):
        return TestFunction.from_source(str(src), dim)

    if cid == "lyapunov":
        return hypotheses.check_lyapunov(op, fn(p.get("phi", "1+r^2")), J)
    if cid == "lyapunov_minus_c":
        return hypotheses.check_lyapunov_minus_c(
            op, fn(p.get("phi", "1+r^2")), J)
    if cid == "W":
        return hypotheses.check_W(op, fn(p.get("W", "1+1/(1+r^2)")),
                                  float(p.get("mu", 0.0)),
                                  float(p.get("R", 2.0)), J)
    if cid == "h":
        return hypotheses.check_h(op, fn(p.get("phi", "1+r^2")), J,
                                  l=int(p.get("l", 3)))
    if cid == "div":
        return hypotheses.check_div(op, J, float(p.get("p", 2)))
    if cid == "drift_compensation":
        return hypotheses.check_drift_compensation(
            op, J, float(p.get("p", 2)))
    if cid == "V":
        return hypotheses.check_V(op, fn(p.get("V", "1/(1+r^2)")), J)
    return hypotheses.check_bounded_Aphi(op, fn(p.get("phi", "1+r^2")), J)


def _svg_curve(xs, ys, path, title):
    """Minimal polyline plot, purely decorative."""
    wpx, hpx, pad = 480, 320, 40
    x0, x1 = min(xs), max(xs)
    y1 = max(max(ys), 1e-12)
    sx = (wpx - 2 * pad) / max(x1 - x0, 1e-12)
    pts = " ".join(
        f"{pad + (x - x0) * sx:.1f},"
        f"{hpx - pad - (y / y1) * (hpx - 2 * pad):.1f}"
        for x, y in zip(xs, ys))
    with open(path, "w") as fh:
        fh.write(
            f'<svg xmlns="http://www.w3.org/2000/svg" width="{wpx}" '
            f'height="{hpx}"><rect width="100%" height="100%" '
            f'fill="white"/><text x="{pad}" y="20">{title}</text>'
            f'<polyline fill="none" stroke="steelblue" stroke-width="2" '
            f'points="{pts}"/></svg>\n')


def _execute(cfg, out_dir, workers, seed_override):
    os.makedirs(out_dir, exist_ok=True)
    echo_path = os.path.join(out_dir, "config_echo.yaml")
    with open(echo_path, "w") as fh:
        yaml.safe_dump(cfg, fh, sort_keys=True, default_flow_style=False)

    op = _build_operator(cfg["operator"])
    g = cfg["grid"]
    mc = None
    if "mc" in cfg:
        seed = seed_override if seed_override is not None \
            else cfg["mc"]["seed"]
        mc = FkConfig(n_paths=cfg["mc"]["n_paths"],
                      dt_mc=cfg["mc"]["dt_mc"], seed=seed)
    ctx = RunContext(op=op, grid=Grid(g["dim"], g["n"], g["N"]),
                     dt=g["dt"],
                     pairs=[tuple(p) for p in cfg["windows"]["pairs"]],
                     window=cfg["windows"]["box"], bc=g["bc"], mc=mc,
                     seed=seed_override or 0, tols=cfg["tolerances"])

    lines, failed = [], False

    for entry in cfg["hypotheses"]:
        rep = _run_hypothesis(op, entry)
        lines.append(rep.to_record())
        failed |= not rep.passed

    def run_check(entry):
        params = dict(entry)
        cid = params.pop("id")
        fn, _anchor = REGISTRY[cid]
        return fn(ctx, **params)

    outcomes = []
    if workers > 1 and len(cfg["checks"]) > 1:
        with concurrent.futures.ThreadPoolExecutor(workers) as pool:
            futures = [pool.submit(run_check, e) for e in cfg["checks"]]
            for entry, fut in zip(cfg["checks"], futures):
                try:
                    outcomes.append(fut.result())
                except _NUMERIC_ERRORS as err:
                    raise FatalCheckError(entry["id"], err) from err
    else:
        for entry in cfg["checks"]:
            try:
                outcomes.append(run_check(entry))
            except _NUMERIC_ERRORS as err:
                raise FatalCheckError(entry["id"], err) from err
    for out in outcomes:
        lines.append(out.to_record())
        failed |= not out.passed

    if "compactness" in cfg:
        c = cfg["compactness"]
        s, t = ctx.pairs[0]
        try:
            diag = compactness_diagnostic(
                op, TestFunction.from_source(c["phi"], op.dim),
                TestFunction.from_source(c["W"], op.dim), c["mu"],
                c["R_W"], ctx.prop(s, t), ctx.window, c["R_list"],
                c["delta"], l=c["l"])
        except _NUMERIC_ERRORS as err:
            raise FatalCheckError("compactness", err) from err
        lines.append(f"compactness|verdict={diag['verdict']}"
                     f"|ybar={diag['ybar']:.6g}|C={diag['C']:.6g}"
                     f"|C_source={diag['C_source']}")
        diagnostic_to_csv(diag, os.path.join(out_dir, "tail_profile.csv"))
        if cfg["svg"]:
            _svg_curve(diag["R"], diag["measured_tail"],
                       os.path.join(out_dir, "tail_profile.svg"),
                       "sup tail mass vs R")
        failed |= diag["verdict"] != "consistent-with-compactness"

    with open(os.path.join(out_dir, "report.txt"), "w") as fh:
        fh.write("\n".join(lines) + "\n")
    with open(os.path.join(out_dir, "summary.csv"), "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["check", "anchor", "measured", "expected",
                    "tolerance", "pass", "runtime_s"])
        for out in outcomes:
            w.writerow([out.check_id, out.anchor, f"{out.measured:.12g}",
                        f"{out.expected:.12g}", f"{out.tolerance:.3g}",
                        out.passed, f"{out.runtime:.2f}"])
    for line in lines:
        print(line)
    return 1 if failed else 0


class FatalCheckError(Exception):
    def __init__(self, check_id, err):
        super().__init__(f"fatal numeric error in check "
                         f"{check_id!r}: {err}")
        self.check_id = check_id


def _resolve_config(name):
    if os.path.exists(name):
        return name
    bundled = importlib.resources.files("evolab") / "configs" / \
        f"{name}.yaml"
    if bundled.is_file():
        return str(bundled)
    raise ConfigError(f"config {name!r} not found (no such file and no "
                      f"bundled config with that name)")


def run(config, out_dir=None, workers=1, seed_override=None):
    try:
        path = _resolve_config(config)
        cfg = load_config(path)
    except ConfigError as err:
        print(f"config error: {err}", file=sys.stderr)
        return 2
    try:
        return _execute(cfg, out_dir or cfg["output"], workers,
                        seed_override)
    except FatalCheckError as err:
        print(str(err), file=sys.stderr)
        return 3


def list_checks():
    return "\n".join(f"{cid:28s} {anchor}"
                     for cid, (_fn, anchor) in REGISTRY.items())


def main(argv=None):
    ap = argparse.ArgumentParser(
        prog="evolab",
        description="numerical laboratory for nonautonomous parabolic "
                    "evolution operators")
    sub = ap.add_subparsers(dest="cmd", required=True)
    runp = sub.add_parser("run", help="execute an experiment config")
    runp.add_argument("config", help="path or bundled config name")
    runp.add_argument("--out", default=None, help="output directory")
    runp.add_argument("--workers", type=int, default=1)
    runp.add_argument("--seed-override", type=int, default=None)
    sub.add_parser("list-checks", help="print check ids and anchors")
    args = ap.parse_args(argv)
    if args.cmd == "list-checks":
        print(list_checks())
        return 0
    return run(args.config, out_dir=args.out, workers=args.workers,
               seed_override=args.seed_override)


if __name__ == "__main__":
    sys.exit(main())
