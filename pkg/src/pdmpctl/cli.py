"""Command-line driver: ``pdmpctl <command> --config FILE --out DIR``.

Commands: simulate, value, dual, bsde, crosscheck, track.  Exit status is
0 on success, 2 for an invalid configuration or a missing output
directory, and 3 for a failure while running.  Apart from
``run_manifest.json`` (which records wall-clock time) every output is a
deterministic function of the configuration and seed.
"""
from __future__ import annotations

import argparse
import csv
import json
import math
import sys
import time
import traceback
from pathlib import Path

import numpy as np

from . import __version__
from .bsde import (
    PenalizedScheme,
    Representation,
    compare_to_primal,
    constraint_violation,
    grid_samples,
    solve_penalized_grid,
    solve_penalized_regression,
)
from .config import TOYS, ConfigError, ExperimentConfig, load_config
from .hodgkin_huxley import HHModel
from .pdmp import OpenLoopPolicy, map_paths, path_cost, path_rng, simulate, write_trajectory_csv
from .primal import brute_force_value, dpp_residual, solve
from .randomization import (
    Estimator,
    Lambda0,
    NuPolicy,
    TabularNuFamily,
    dual_samples,
    minimize_over_nu,
    simulate_xi,
)

__all__ = ["main", "build_parser", "Context"]

MANIFEST = "run_manifest.json"


class Unsupported(ConfigError):
    """The command does not apply to the configured model."""


class Context:
    """Model and starting point resolved from a configuration."""

    def __init__(self, cfg: ExperimentConfig):
        self.cfg = cfg
        if cfg.run.model == "toy":
            self.hh = None
            self.model = TOYS[cfg.toy.name](horizon=cfg.toy.horizon, dt=cfg.toy.dt)
            self.t0 = cfg.toy.t
            self.x0 = np.zeros(self.model.n_coeffs)
            self.mode0 = cfg.toy.mode
            self.a0 = cfg.toy.a
        else:
            self.hh = HHModel.build(cfg.hh)
            self.model = self.hh.to_pdmp()
            self.t0 = 0.0
            self.x0 = np.zeros(self.model.n_coeffs)
            self.mode0 = self.hh.resting()
            self.a0 = 0.0
        self.lam0 = Lambda0(cfg.lambda0_weights(self.model.controls.size))

    def policy(self) -> OpenLoopPolicy:
        spec = self.cfg.simulate.policy
        if spec == "zero":
            return OpenLoopPolicy.constant(self.model.controls[0])
        if spec == "max":
            return OpenLoopPolicy.constant(self.model.controls[-1])
        a = float(spec.split(":", 1)[1])
        self.model.control_index(a)
        return OpenLoopPolicy.constant(a)

    def require_toy(self, what: str):
        if self.hh is not None:
            raise Unsupported(f"run.model: '{what}' needs a finite-mode toy model; "
                              "use 'dual' or 'track' for the spatial model")


def _fmt(v: float) -> str:
    return f"{v:.10g}"


def _write_json(path: Path, obj) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _write_csv(path: Path, header, rows) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


def _stamp(ctx: Context) -> dict:
    return {"manifest": MANIFEST, "config_hash": ctx.cfg.source_hash, "seed": ctx.cfg.run.seed,
            "schema_version": 1}


# ---------------------------------------------------------------------------
# commands


def cmd_simulate(ctx: Context, out: Path) -> list:
    cfg, model = ctx.cfg, ctx.model
    n, seed = cfg.run.paths, cfg.run.seed
    pol = ctx.policy()
    trajs = map_paths(lambda i: simulate(model, ctx.t0, ctx.x0, ctx.mode0, pol, path_rng(seed, i, "simulate")),
                      n, cfg.run.jobs)
    z = np.linspace(0.0, 1.0, cfg.simulate.z_points)
    with open(out / "trajectories.csv", "w", newline="", encoding="utf-8") as fh:
        write_trajectory_csv(fh, trajs, model, z)
    costs = np.array([path_cost(model, tr) for tr in trajs])
    jumps = np.array([tr.n_jumps for tr in trajs])
    mean_bound = model.rate_bound * (model.horizon - ctx.t0)
    limit = mean_bound + 3.0 * math.sqrt(max(mean_bound, 1e-300) / n)
    summary = {
        **_stamp(ctx),
        "command": "simulate",
        "model": model.name,
        "paths": n,
        "policy": pol.name,
        "cost_mean": float(costs.mean()),
        "cost_stderr": float(costs.std(ddof=1) / math.sqrt(n)) if n > 1 else 0.0,
        "jumps_mean": float(jumps.mean()),
        "jumps_max": int(jumps.max()),
        "rate_bound": model.rate_bound,
        "jump_mean_limit": limit,
        "jumps_within_bound": bool(jumps.mean() <= limit),
    }
    _write_json(out / "simulate_summary.json", summary)
    return ["trajectories.csv", "simulate_summary.json"]


def _geometric_ratio(history) -> float:
    h = np.asarray(history[-6:], dtype=float)
    h = h[h > 0]
    if h.size < 2:
        return 0.0
    return float(np.max(h[1:] / h[:-1]))


def cmd_value(ctx: Context, out: Path) -> list:
    ctx.require_toy("value")
    cfg, model = ctx.cfg, ctx.model
    V = solve(model, n_times=cfg.value.n_times, tol=cfg.value.tol, max_iter=cfg.value.max_iter,
              substeps=cfg.value.substeps)
    V.to_files(out / "value_grid.csv", out / "value_grid.json", model.mode_label)
    B = brute_force_value(model, times=V.times, jump_cap=cfg.value.jump_cap)
    summary = {
        **_stamp(ctx),
        "command": "value",
        "iterations": len(V.residuals),
        "residuals": V.residuals,
        "contraction_ratio": _geometric_ratio(V.residuals),
        "oracle_sup_error": float(np.max(np.abs(V.values - B.values))),
        "oracle_truncation_bound": B.meta["truncation_bound"],
        "value_at_start": V(ctx.t0, ctx.x0, ctx.mode0),
    }
    _write_json(out / "value_summary.json", summary)
    return ["value_grid.csv", "value_grid.json", "value_summary.json"]


def _dual_search(ctx: Context, paths: int, extra_starts=()):
    cfg, model = ctx.cfg, ctx.model
    fam = TabularNuFamily(model, by_mode=model.modes is not None, nu_min=cfg.dual.nu_min, nu_max=cfg.dual.nu_max)
    return fam, minimize_over_nu(model, ctx.lam0, fam, ctx.t0, ctx.x0, ctx.mode0, ctx.a0, n_paths=paths,
                                 seed=cfg.run.seed, budget=cfg.dual.budget, jobs=cfg.run.jobs,
                                 starts=extra_starts)


def cmd_dual(ctx: Context, out: Path) -> list:
    cfg, model = ctx.cfg, ctx.model
    fam, res = _dual_search(ctx, cfg.dual.paths)
    res.write_trace(out / "dual_trace.csv")
    base = dual_samples(model, ctx.lam0, NuPolicy.one(), ctx.t0, ctx.x0, ctx.mode0, ctx.a0, cfg.dual.paths,
                        cfg.run.seed, Estimator.DIRECT, cfg.run.jobs, purpose="dual-check")
    summary = {
        **_stamp(ctx),
        "command": "dual",
        "theta": res.theta.tolist(),
        "nu_table": np.clip(np.exp(res.theta), fam.nu_min, fam.nu_max).reshape(fam.shape).tolist(),
        "value": res.value,
        "stderr": res.stderr,
        "search_value": res.search_value,
        "evaluations": res.evaluations,
        "budget_exhausted": res.exhausted,
        "reference_value": float(base.mean()),
        "reference_stderr": float(base.std(ddof=1) / math.sqrt(base.size)),
    }
    _write_json(out / "dual_summary.json", summary)
    return ["dual_trace.csv", "dual_summary.json"]


def _bsde_ladder(ctx: Context):
    cfg, model = ctx.cfg, ctx.model
    sols = []
    for n in cfg.bsde.ladder:
        rep = Representation(cfg.bsde.representation)
        scheme = PenalizedScheme(n, cfg.bsde.dt, rep, n_paths=cfg.bsde.paths)
        if rep is Representation.GRID:
            sols.append(solve_penalized_grid(model, ctx.lam0, scheme))
        else:
            sols.append(solve_penalized_regression(model, ctx.lam0, scheme, seed=cfg.run.seed, jobs=cfg.run.jobs))
    return sols


def cmd_bsde(ctx: Context, out: Path) -> list:
    ctx.require_toy("bsde")
    model = ctx.model
    sols = _bsde_ladder(ctx)
    files = []
    for sol in sols:
        stem = f"bsde_n{sol.n_penalty}"
        if sol.grids:
            sol.to_files(out / f"{stem}.csv", out / f"{stem}.json", model.mode_label, _stamp(ctx))
            files += [f"{stem}.csv", f"{stem}.json"]
    samples = [(ctx.t0, ctx.x0, m) for m in model.modes]
    rows = []
    for sol in sols:
        v = sol.values_all(ctx.t0, ctx.x0, ctx.mode0)
        rows.append({"n": sol.n_penalty, "values": v.tolist(),
                     "violation": constraint_violation(sol, samples),
                     "penalty_mass_max": sol.diagnostics.get("penalty_mass_max")})
    summary = {**_stamp(ctx), "command": "bsde", "ladder": rows}
    _write_json(out / "bsde_summary.json", summary)
    return files + ["bsde_summary.json"]


def cmd_crosscheck(ctx: Context, out: Path) -> list:
    ctx.require_toy("crosscheck")
    cfg, model = ctx.cfg, ctx.model
    V = solve(model, n_times=cfg.value.n_times, tol=cfg.value.tol, max_iter=cfg.value.max_iter)
    B = brute_force_value(model, times=V.times, jump_cap=cfg.value.jump_cap)
    sols = _bsde_ladder(ctx)
    samples = grid_samples(V, every=10)
    ladder_gap = 0.0
    for lo, hi in zip(sols[:-1], sols[1:]):
        for s, x, m in samples:
            ladder_gap = max(ladder_gap, float(np.max(hi.values_all(s, x, m) - lo.values_all(s, x, m))))
    cmp = compare_to_primal(sols[-1], V, samples)
    fam, res = _dual_search(ctx, cfg.dual.paths)
    v_start = V(ctx.t0, ctx.x0, ctx.mode0)
    dpp, dpp_se = dpp_residual(V, model, ctx.t0, ctx.x0, ctx.mode0, cfg.run.paths, cfg.run.seed, cfg.run.jobs)
    checks = [
        ("primal_vs_oracle_sup", float(np.max(np.abs(V.values - B.values))), 1e-3),
        ("bsde_monotone_excess", ladder_gap, 1e-3),
        ("bsde_vs_primal_sup", cmp["sup_error"], 5e-2),
        ("bsde_control_spread", cmp["control_spread"], 2e-2),
        ("dual_below_primal", max(v_start - res.value - 3 * res.stderr, 0.0), 0.0),
        ("dpp_residual_excess", max(abs(dpp) - 3 * dpp_se - 2 * cfg.value.tol, 0.0), 0.0),
    ]
    rows = [[name, _fmt(val), _fmt(thr), "PASS" if val <= thr else "FAIL"] for name, val, thr in checks]
    _write_csv(out / "crosscheck.csv", ["check", "value", "threshold", "status"], rows)
    report = {
        **_stamp(ctx),
        "command": "crosscheck",
        "primal_value": v_start,
        "oracle_value": B(ctx.t0, ctx.x0, ctx.mode0),
        "bsde_value": sols[-1].values_all(ctx.t0, ctx.x0, ctx.mode0).tolist(),
        "bsde_penalty": sols[-1].n_penalty,
        "dual_value": res.value,
        "dual_stderr": res.stderr,
        "dual_gap": res.value - v_start,
        "dpp_residual": dpp,
        "dpp_stderr": dpp_se,
        "checks": {r[0]: r[3] for r in rows},
        "status": "PASS" if all(r[3] == "PASS" for r in rows) else "FAIL",
    }
    _write_json(out / "crosscheck.json", report)
    return ["crosscheck.csv", "crosscheck.json"]


def cmd_track(ctx: Context, out: Path) -> list:
    if ctx.hh is None:
        raise Unsupported("run.model: 'track' runs the spatial model; set run.model = hh")
    cfg, model, hh = ctx.cfg, ctx.model, ctx.hh
    n, seed, jobs = cfg.run.paths, cfg.run.seed, cfg.run.jobs
    grid = np.linspace(0.0, model.horizon, int(round(model.horizon / 0.05)) + 1)
    rows, series = [], {}
    for name, a in (("zero", model.controls[0]), ("max", model.controls[-1])):
        pol = OpenLoopPolicy.constant(a)

        def one(i, pol=pol):
            tr = simulate(model, ctx.t0, ctx.x0, ctx.mode0, pol, path_rng(seed, i, "track"))
            fields, _ = tr.state_at(model, grid)
            return path_cost(model, tr), hh.clipped_misfit(fields)

        res = map_paths(one, n, jobs)
        c = np.array([r[0] for r in res])
        rows.append([name, _fmt(c.mean()), _fmt(c.std(ddof=1) / math.sqrt(n))])
        series[name] = np.mean([r[1] for r in res], axis=0)
    nA = model.controls.size
    dark = np.zeros((model.mode_count, nA))
    dark[:, 1:] = math.log(cfg.dual.nu_min)
    dark[:, 0] = math.log(cfg.dual.nu_max)
    fam, res = _dual_search(ctx, cfg.dual.paths, extra_starts=[dark.reshape(-1)])
    res.write_trace(out / "track_dual_trace.csv")
    rows.append(["optimized_nu", _fmt(res.value), _fmt(res.stderr)])

    def one_nu(i):
        p = simulate_xi(model, ctx.lam0, res.nu, ctx.t0, ctx.x0, ctx.mode0, ctx.a0, path_rng(seed, i, "track-nu"))
        fields, _, _ = p.state_at(model, grid)
        return hh.clipped_misfit(fields)

    series["optimized_nu"] = np.mean(map_paths(one_nu, n, jobs), axis=0)
    _write_csv(out / "track_costs.csv", ["policy", "mean", "stderr"], rows)
    _write_csv(out / "track_misfit.csv", ["time", "zero", "max", "optimized_nu"],
               [[_fmt(t), _fmt(series["zero"][k]), _fmt(series["max"][k]), _fmt(series["optimized_nu"][k])]
                for k, t in enumerate(grid)])
    zero_mean, zero_se = float(rows[0][1]), float(rows[0][2])
    summary = {
        **_stamp(ctx),
        "command": "track",
        "costs": {r[0]: {"mean": float(r[1]), "stderr": float(r[2])} for r in rows},
        "optimized_not_worse": bool(res.value <= zero_mean + 3 * math.hypot(zero_se, res.stderr)),
        "nu_evaluations": res.evaluations,
        "rate_bound": model.rate_bound,
    }
    _write_json(out / "track_summary.json", summary)
    return ["track_costs.csv", "track_misfit.csv", "track_dual_trace.csv", "track_summary.json"]


COMMANDS = {
    "simulate": cmd_simulate,
    "value": cmd_value,
    "dual": cmd_dual,
    "bsde": cmd_bsde,
    "crosscheck": cmd_crosscheck,
    "track": cmd_track,
}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="pdmpctl", description="Controlled PDMP experiments.")
    p.add_argument("command", choices=sorted(COMMANDS))
    p.add_argument("--config", required=True, help="INI experiment file")
    p.add_argument("--out", required=True, help="existing output directory")
    p.add_argument("--seed", type=int, default=None, help="root seed (overrides run.seed)")
    p.add_argument("--paths", type=int, default=None, help="Monte Carlo paths (overrides run.paths)")
    p.add_argument("--jobs", type=int, default=None, help="worker processes (overrides run.jobs)")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    out = Path(args.out)
    if not out.is_dir():
        print(f"error: output directory {out} does not exist", file=sys.stderr)
        return 2
    started = time.perf_counter()
    try:
        cfg = load_config(args.config)
        if args.seed is not None:
            cfg.run.seed = args.seed
        if args.paths is not None:
            if args.paths < 2:
                raise ConfigError("--paths must be at least 2")
            cfg.run.paths = args.paths
        if args.jobs is not None:
            if args.jobs < 1:
                raise ConfigError("--jobs must be at least 1")
            cfg.run.jobs = args.jobs
        ctx = Context(cfg)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except ValueError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    try:
        files = COMMANDS[args.command](ctx, out)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001 - reported as a runtime failure
        traceback.print_exc()
        print(f"runtime failure: {exc}", file=sys.stderr)
        return 3
    import scipy

    _write_json(out / MANIFEST, {
        "schema": "run-manifest/1",
        "command": args.command,
        "config_hash": cfg.source_hash,
        "seed": cfg.run.seed,
        "paths": cfg.run.paths,
        "jobs": cfg.run.jobs,
        "versions": {"pdmpctl": __version__, "numpy": np.__version__, "scipy": scipy.__version__},
        "wall_clock_seconds": time.perf_counter() - started,
        "outputs": files,
    })
    return 0


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
