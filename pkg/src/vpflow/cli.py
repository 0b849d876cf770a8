"""Command-line front end: ``vpflow {run,sphere,oracle,decay}``.

Configuration files are flat ``key = value`` lines; ``#`` starts a comment.
Unknown keys are rejected and every validation error names its key.
"""

from __future__ import annotations

import argparse
import csv
import math
import sys
from pathlib import Path

import numpy as np

from . import flow, shapes, sphere
from .grid import DistanceField, GridGeometry, GridSet
from .io import atomic_write, csv_text, json_text, read_mask, read_raw_field, write_mask
from .oracle import exhaustive_minimize
from .step import StepConfig, minimize_linear

EXIT_OK, EXIT_ERROR, EXIT_NOT_CONVERGED = 0, 1, 2


class ConfigError(ValueError):
    pass


# ---------------------------------------------------------------------------
# value parsers


def _int(v):
    return int(v)


def _float(v):
    x = float(v)
    if not math.isfinite(x):
        raise ValueError("must be finite")
    return x


def _ints(v):
    return tuple(int(p) for p in v.replace("x", ",").split(",") if p.strip())


def _floats(v):
    return tuple(float(p) for p in v.split(",") if p.strip())


def _str(v):
    return v


def _positive(x):
    if isinstance(x, tuple):
        if not x or any(v <= 0 for v in x):
            raise ValueError("must be positive")
    elif not x > 0:
        raise ValueError("must be positive")


def _nonneg(x):
    if x < 0:
        raise ValueError("must be non-negative")


def _choice(*options):
    def check(x):
        if x not in options:
            raise ValueError(f"must be one of {', '.join(map(str, options))}")

    return check


_SHAPES = ("disk", "ellipse", "two-disks", "dumbbell", "annulus", "mask-file")

# key -> (parser, check or None, default); a default of None means "unset"
RUN_KEYS = {
    "preset": (_str, None, None),
    "dims": (_ints, _positive, None),
    "spacing": (_float, _positive, 1.0),
    "shape": (_str, _choice(*_SHAPES), None),
    "radius": (_float, _positive, None),
    "semi_axes": (_floats, _positive, None),
    "gap": (_float, _nonneg, 0.0),
    "separation": (_float, _positive, None),
    "neck_width": (_float, _positive, None),
    "r_in": (_float, _positive, None),
    "r_out": (_float, _positive, None),
    "mask_file": (_str, None, None),
    "h": (_float, _positive, None),
    "n_max": (_int, _nonneg, 100),
    "stop_threshold": (_float, None, None),
    "snapshot_every": (_int, _nonneg, 0),
    "max_bisection_iters": (_int, _positive, 200),
    "tail_start": (_int, _nonneg, None),
    "seed": (_int, _nonneg, 0),
}

SPHERE_KEYS = {
    "preset": (_str, None, None),
    "experiment": (_str, _choice("alexandrov", "halving", "sandwich", "probe"), None),
    "N": (_int, _choice(2, 3), 3),
    "l_max": (_int, _positive, 32),
    "trials": (_int, _positive, 100),
    "degree_min": (_int, _nonneg, 2),
    "degree_max": (_int, _positive, 6),
    "c1_max": (_float, _positive, 0.05),
    "eta": (_float, _positive, 0.2),
    "degree": (_int, _positive, 2),
    "eps0": (_float, _positive, 1e-3),
    "halvings": (_int, _positive, 4),
    "eps_list": (_floats, _positive, (1e-2, 1e-3)),
    "h": (_float, _positive, 0.01),
    "seed": (_int, _nonneg, 0),
}

ORACLE_KEYS = {
    "dims": (_ints, _positive, (5, 5)),
    "spacing": (_float, _positive, 1.0),
    "h": (_float, _positive, 1.0),
    "m_cells": (_int, _nonneg, None),
    "d_kind": (_str, _choice("random", "file", "disk"), "random"),
    "d_file": (_str, None, None),
    "d_scale": (_float, _positive, 1.0),
    "radius": (_float, _positive, 1.0),
    "seed": (_int, _nonneg, 0),
}

DECAY_KEYS = {
    "trace": (_str, None, None),
    "tail_start": (_int, _nonneg, None),
}

RUN_PRESETS = {
    "fixed-disk": {"dims": "128,128", "shape": "disk", "radius": "24", "h": "57.6", "n_max": "50"},
    "two-disks": {"dims": "192,96", "shape": "two-disks", "radius": "16", "gap": "64", "h": "25.6", "n_max": "50"},
    "tangent-disks": {"dims": "128,128", "shape": "two-disks", "radius": "20", "gap": "0", "h": "80", "n_max": "60"},
    "ellipse": {"dims": "256,256", "shape": "ellipse", "semi_axes": "80,40", "h": "300", "n_max": "60"},
}

SPHERE_PRESETS = {
    "alexandrov": {"experiment": "alexandrov", "N": "3", "l_max": "32", "trials": "100", "degree_min": "2", "degree_max": "6", "c1_max": "0.05", "seed": "20240101"},
    "halving": {"experiment": "halving", "N": "3", "l_max": "32", "degree": "2", "eps0": "1e-3", "halvings": "4"},
    "sandwich": {"experiment": "sandwich", "N": "2", "l_max": "32", "trials": "50", "c1_max": "0.05", "eta": "0.2", "degree_min": "1", "seed": "7"},
    "probe": {"experiment": "probe", "N": "3", "l_max": "16", "degree": "2", "eps_list": "1e-2,1e-3", "h": "0.01"},
}


# ---------------------------------------------------------------------------
# configuration files


def read_config_text(text: str, source: str = "<config>") -> dict:
    raw = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value'")
        key, value = (p.strip() for p in line.split("=", 1))
        if not key:
            raise ConfigError(f"{source}:{lineno}: empty key")
        if key in raw:
            raise ConfigError(f"{source}:{lineno}: duplicate key '{key}'")
        raw[key] = value
    return raw


def resolve_config(raw: dict, schema: dict, presets: dict | None = None, base_dir: Path | None = None) -> dict:
    """Apply a preset, parse and validate every key against ``schema``."""
    unknown = sorted(set(raw) - set(schema))
    if unknown:
        raise ConfigError(f"unknown key '{unknown[0]}'")
    merged = {}
    name = raw.get("preset")
    if name is not None:
        if not presets or name not in presets:
            raise ConfigError(f"preset: unknown preset '{name}'")
        merged.update(presets[name])
    merged.update(raw)
    cfg = {}
    for key, (parse, check, default) in schema.items():
        if key not in merged:
            cfg[key] = default
            continue
        try:
            value = parse(merged[key])
            if check is not None:
                check(value)
        except ValueError as exc:
            raise ConfigError(f"{key}: {exc} (got '{merged[key]}')") from None
        cfg[key] = value
    base = base_dir or Path(".")
    for key in ("mask_file", "d_file", "trace"):
        if cfg.get(key):
            p = Path(cfg[key])
            if not p.is_absolute():
                p = base / p
            if not p.exists():
                raise ConfigError(f"{key}: file not found: {p}")
            cfg[key] = str(p)
    return cfg


def _require(cfg, *keys):
    for k in keys:
        if cfg.get(k) is None:
            raise ConfigError(f"{k}: required")


# ---------------------------------------------------------------------------
# commands


def _initial_set(cfg) -> GridSet:
    if cfg["shape"] == "mask-file":
        _require(cfg, "mask_file")
        return read_mask(cfg["mask_file"], cfg["spacing"])
    _require(cfg, "dims", "shape")
    geo = GridGeometry(cfg["dims"], cfg["spacing"])
    shape = cfg["shape"]
    if shape == "disk":
        _require(cfg, "radius")
        return shapes.ball(geo, cfg["radius"])
    if shape == "ellipse":
        _require(cfg, "semi_axes")
        if len(cfg["semi_axes"]) != geo.ndim:
            raise ConfigError("semi_axes: need one value per grid axis")
        return shapes.ellipse(geo, cfg["semi_axes"])
    if shape == "two-disks":
        _require(cfg, "radius")
        return shapes.two_balls(geo, cfg["radius"], cfg["gap"])
    if shape == "dumbbell":
        _require(cfg, "radius", "separation", "neck_width")
        return shapes.dumbbell(geo, cfg["radius"], cfg["separation"], cfg["neck_width"])
    _require(cfg, "r_in", "r_out")
    return shapes.annulus(geo, cfg["r_in"], cfg["r_out"])


def cmd_run(cfg: dict, out: Path, quiet: bool) -> int:
    _require(cfg, "h")
    E0 = _initial_set(cfg)
    if E0.is_empty():
        raise ConfigError("shape: the initial set has no cells on this grid")
    step_cfg = StepConfig(cfg["h"], E0.volume, max_bisection_iters=cfg["max_bisection_iters"])

    def progress(rec):
        print(
            f"step {rec.n:4d}  P={rec.perimeter:.6g}  D={rec.dissipation:.6g}  "
            f"components={rec.n_components}",
            file=sys.stderr,
        )

    snap_dir = out / "snapshots" if cfg["snapshot_every"] else None
    trace = flow.run(
        E0,
        step_cfg,
        cfg["n_max"],
        stop_threshold=cfg["stop_threshold"],
        snapshot_every=cfg["snapshot_every"],
        snapshot_dir=snap_dir,
        progress=None if quiet else progress,
    )
    limit = flow.classify_limit(trace.final, trace)
    fit, fit_error = None, None
    try:
        fit = flow.fit_decay(trace, cfg["tail_start"])
    except flow.InsufficientDataError as exc:
        fit_error = exc
    flow.write_outputs(trace, out, limit, fit, fit_error)
    ext = "pgm" if trace.final.geometry.ndim == 2 else "raw"
    write_mask(out / f"final.{ext}", trace.final)
    summary = {
        "converged": trace.converged,
        "steps": trace.records[-1].n,
        "monotonicity_violations": flow.monotonicity_violations(trace),
        "summability_gap": flow.summability_gap(trace),
    }
    atomic_write(out / "summary.json", json_text(summary))
    if not quiet:
        print(f"L = {limit.L}, formula_L = {limit.formula_L:.4f}, converged = {trace.converged}", file=sys.stderr)
    return EXIT_OK if trace.converged else EXIT_NOT_CONVERGED


def cmd_sphere(cfg: dict, out: Path, quiet: bool) -> int:
    _require(cfg, "experiment")
    if cfg["degree_max"] > cfg["l_max"]:
        raise ConfigError("degree_max: exceeds l_max")
    grid = sphere.SphereGrid(cfg["N"], cfg["l_max"])
    exp = cfg["experiment"]
    summary = {"experiment": exp, "N": cfg["N"], "l_max": cfg["l_max"]}
    if exp == "alexandrov":
        rows = sphere.alexandrov_sweep(
            grid, cfg["trials"], cfg["seed"], (cfg["degree_min"], cfg["degree_max"]), cfg["c1_max"]
        )
        ratios = [r[4] for r in rows]
        summary.update(
            trials=len(rows),
            all_finite=bool(all(math.isfinite(r) for r in ratios)),
            empirical_C=max(ratios),
            seed=cfg["seed"],
        )
        text = csv_text(["trial", "c1_norm", "h1_norm", "curvature_deviation", "ratio"], rows)
        atomic_write(out / "alexandrov.csv", text)
    elif exp == "halving":
        rows = sphere.eps_halving(grid, cfg["degree"], cfg["eps0"], cfg["halvings"])
        last = [r[1] for r in rows[-2:]]
        summary.update(
            relative_change_last_two=abs(last[1] - last[0]) / abs(last[0]) if len(last) == 2 else None,
            linearized_prediction=sphere.linearized_ratio(cfg["degree"], cfg["N"]),
        )
        atomic_write(out / "halving.csv", csv_text(["eps", "ratio"], rows))
    elif exp == "sandwich":
        rows = sphere.sandwich_sweep(
            grid, cfg["trials"], cfg["seed"], cfg["eta"], cfg["c1_max"], (cfg["degree_min"], cfg["degree_max"])
        )
        mu = shapes.unit_ball_volume(cfg["N"])
        zero = sphere.RadialGraph.zero(grid, mu)
        c = 0.03
        D_num = sphere.dissipation_radial(zero.with_values(np.full(grid.n_nodes, c)), zero)
        D_exact = sphere.concentric_dissipation(1.0, 1.0 + c, cfg["N"])
        summary.update(
            pairs=len(rows),
            all_pass=bool(all(r[4] for r in rows)),
            concentric_relative_error=abs(D_num - D_exact) / D_exact,
            seed=cfg["seed"],
        )
        atomic_write(out / "sandwich.csv", csv_text(["pair", "D", "lower", "upper", "pass"], rows))
    else:
        mu = shapes.unit_ball_volume(cfg["N"])
        rows = []
        for eps in cfg["eps_list"]:
            g1 = sphere.normalize(sphere.RadialGraph(grid, eps * grid.harmonic(cfg["degree"]), mu))
            rep = sphere.dissipation_comparison_probe(g1, cfg["h"])
            rows.append((eps, cfg["h"], rep.D_ball, rep.D_step, rep.ratio, rep.residual, rep.iterations))
        summary.update(max_ratio=max(r[4] for r in rows), max_residual=max(r[5] for r in rows))
        header = ["eps", "h", "D_ball", "D_step", "ratio", "residual", "iterations"]
        atomic_write(out / "probe.csv", csv_text(header, rows))
    atomic_write(out / "summary.json", json_text(summary))
    if not quiet:
        print(json_text(summary), end="", file=sys.stderr)
    return EXIT_OK


def cmd_oracle(cfg: dict, out: Path, quiet: bool) -> int:
    geo = GridGeometry(cfg["dims"], cfg["spacing"])
    if cfg["d_kind"] == "file":
        _require(cfg, "d_file")
        d = read_raw_field(cfg["d_file"])
        geo = d.geometry
    elif cfg["d_kind"] == "disk":
        from .grid import signed_distance

        d = signed_distance(shapes.ball(geo, cfg["radius"]))
    else:
        rng = np.random.default_rng(cfg["seed"])
        d = DistanceField(geo, cfg["d_scale"] * rng.standard_normal(geo.dims))
    _require(cfg, "m_cells")
    res = exhaustive_minimize(d, cfg["h"], cfg["m_cells"])
    report = {
        "energy": res.energy,
        "m_cells": cfg["m_cells"],
        "cells": [list(map(int, ix)) for ix in np.argwhere(res.set.mask)],
        "n_candidates": res.n_candidates,
        "n_ties": res.n_ties,
    }
    if cfg["m_cells"] > 0:
        sol = minimize_linear(d, StepConfig(cfg["h"], cfg["m_cells"] * geo.cell_volume))
        report["solver_energy"] = sol.linear_energy
        report["solver_agrees"] = bool(sol.set == res.set and sol.linear_energy == res.energy)
    atomic_write(out / "oracle.json", json_text(report))
    ext = "pgm" if geo.ndim == 2 else "raw"
    write_mask(out / f"oracle_mask.{ext}", res.set)
    if not quiet:
        print(f"energy = {res.energy!r} over {res.n_candidates} candidate sets", file=sys.stderr)
    return EXIT_OK


def read_trace_csv(path) -> tuple[list, list, list]:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    if not rows or "dissipation" not in rows[0]:
        raise ConfigError(f"trace: {path} has no dissipation column")
    n = [int(r["n"]) for r in rows[1:]]
    D = [float(r["dissipation"]) for r in rows[1:]]
    comps = [int(r["n_components"]) for r in rows]
    return n, D, comps


def cmd_decay(cfg: dict, out: Path, quiet: bool) -> int:
    _require(cfg, "trace")
    n, D, comps = read_trace_csv(cfg["trace"])
    tail = cfg["tail_start"]
    if tail is None:
        tail = 1
        for i in range(1, len(comps)):
            if comps[i] != comps[i - 1]:
                tail = i + 1
    fit = flow.fit_log_linear(n, D, tail)
    atomic_write(out / "decay.json", json_text(fit.to_dict()))
    if not quiet:
        print(f"rate = {fit.rate:.6g}, r^2 = {fit.r_squared:.4f}", file=sys.stderr)
    return EXIT_OK


COMMANDS = {
    "run": (cmd_run, RUN_KEYS, RUN_PRESETS),
    "sphere": (cmd_sphere, SPHERE_KEYS, SPHERE_PRESETS),
    "oracle": (cmd_oracle, ORACLE_KEYS, None),
    "decay": (cmd_decay, DECAY_KEYS, None),
}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="vpflow", description="Volume-preserving flat flow experiments.")
    p.add_argument("command", choices=sorted(COMMANDS))
    p.add_argument("--config", help="key = value configuration file")
    p.add_argument("--preset", help="start from a named preset (same as 'preset = NAME')")
    p.add_argument("--out", default="out", help="output directory (default: out)")
    p.add_argument("--seed", type=int, help="seed for randomised experiments (overrides the config)")
    p.add_argument("--quiet", action="store_true", help="no progress output")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    func, schema, presets = COMMANDS[args.command]
    try:
        raw, base = {}, None
        if args.config:
            path = Path(args.config)
            raw = read_config_text(path.read_text(), str(path))
            base = path.parent
        if args.preset:
            if "preset" not in schema:
                raise ConfigError(f"preset: command '{args.command}' has no presets")
            raw.setdefault("preset", args.preset)
        if args.seed is not None:
            if args.seed < 0 or args.seed >= 2**64:
                raise ConfigError("seed: must be an unsigned 64-bit integer")
            raw["seed"] = str(args.seed)
            if "seed" not in schema:
                raw.pop("seed")
        cfg = resolve_config(raw, schema, presets, base)
        return func(cfg, Path(args.out), args.quiet)
    except (ConfigError, ValueError, OSError, RuntimeError) as exc:
        print(f"vpflow {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
