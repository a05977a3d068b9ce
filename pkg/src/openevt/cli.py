"""Command-line runner.

    openevt run --config cfg.json --out outdir [--pipeline NAME] [--workers N]
    openevt validate --config cfg.json

Every pipeline writes plain CSV files (floats in shortest round-trip form)
and the run ends with ``manifest.json``.  Named errors are recorded in the
manifest with their module and offending parameter, and make the process
exit with status 1.
"""

from __future__ import annotations

import argparse
import csv
import json
import math
import os
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from .config import ExperimentConfig, derive_seed
from .errors import (ConfigError, InfeasibleHorizonError, InsufficientSurvivorsError,
                     OpenEvtError, PipelineRefusedError)
from .extremes import (boundary_levels, degenerate_probe, distance_estimate, h0_oscillation,
                       operator_evd, return_ratios, theta_formula, theta_gumbel)
from .gev_fit import fit_gev, local_dimension, maxima_from_minima, normalizing_sequences
from .interval_maps import classify_target, orbit_derivative, singular_set_distance
from .open_dynamics import (backward_minima, check_feasible, conditioned_counts,
                            conditioned_minima, fit_alpha, geometric_gof, survival_ensemble)
from .ulam import (build_partition, check_hole_smallness, check_operator_closeness,
                   perturbed_eigenvalue_curve, spectral_solution)

SEED_TAGS = {"survival": 1, "evd": 2, "gumbel": 3, "gev": 4}


# ---------------------------------------------------------------------------
# output helpers


def fmt(v) -> str:
    if isinstance(v, (bool, np.bool_)):
        return "true" if v else "false"
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if v is None:
        return ""
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


def write_csv(path: Path, header, rows) -> str:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([fmt(v) for v in row])
    return path.name


def resolve_workers(cli_value: int | None) -> int:
    if cli_value is not None:
        return max(1, cli_value)
    env = os.environ.get("OPENEVT_WORKERS")
    return max(1, int(env)) if env else 1


# ---------------------------------------------------------------------------
# runner


class Runner:
    def __init__(self, cfg: ExperimentConfig, out: Path, workers: int = 1):
        self.cfg = cfg
        self.out = out
        self.workers = workers
        self.outputs: dict[str, list[str]] = {}
        self.warnings: list[dict] = []
        self.errors: list[dict] = []
        self.sys = cfg.system()
        self.z = cfg.exact_target()
        self.zf = float(self.z)

    def warn(self, code: str, message: str, **extra):
        self.warnings.append({"code": code, "message": message, **extra})

    def setup(self):
        cfg = self.cfg
        if self.sys.closed:
            self.warn("closed_system", "empty hole: closed-system control run")
        self.spec = classify_target(self.sys, self.z, p_max=cfg.p_max)
        self.partition = build_partition(self.sys, cfg.bins, cfg.markov_mode)
        self.sol = spectral_solution(self.sys, self.partition)
        self.hole_small = check_hole_smallness(self.sol, self.sys.map.beta, cfg.d_const)
        if not self.hole_small:
            self.warn("hole_smallness",
                      f"alpha={self.sol.alpha!r} <= d_const/beta={cfg.d_const / self.sys.map.beta!r}")
        if self.spec.on_survivor:
            osc = h0_oscillation(self.sol, self.zf)
            if osc > 0.1:
                self.warn("continuity", f"h0 varies by {osc:.3g} (relative) around z; "
                          "continuity of h0 at z is not supported by the bin data")

    def plan(self, pipeline: str) -> list[str]:
        on = self.spec.on_survivor
        if pipeline == "all":
            steps = ["spectral"] + (["evd", "theta", "dimension"] if on else ["degenerate"])
            if on and self.spec.kind == "periodic" and not self.hole_small:
                steps.remove("theta")
                self.warn("theta_refused", "theta pipeline skipped: hole-smallness check failed "
                          "for a periodic target")
            return steps
        if pipeline in ("evd", "theta", "dimension") and not on:
            raise PipelineRefusedError(
                f"target is {self.spec.label()}; pipeline {pipeline!r} needs a survivor-set target",
                parameter="pipeline")
        if pipeline == "degenerate" and on:
            raise PipelineRefusedError(
                f"target is {self.spec.label()}; the degenerate pipeline needs an off-survivor target",
                parameter="pipeline")
        if pipeline == "theta" and self.spec.kind == "periodic" and not self.hole_small:
            raise PipelineRefusedError(
                "hole-smallness check failed (alpha <= d_const/beta); theta is not defined "
                "by the periodic-target formula", parameter="d_const")
        return [pipeline]

    # -- pipelines ----------------------------------------------------------

    def spectral(self) -> list[str]:
        cfg, sol, part, out = self.cfg, self.sol, self.partition, self.out
        files = []
        bp = part.breakpoints
        files.append(write_csv(out / "eigendata.csv", ["bin", "lo", "hi", "h0", "mu0", "lambda"],
                               ((i, bp[i], bp[i + 1], sol.h0[i], sol.mu0[i], sol.lambda_weights[i])
                                for i in range(part.k))))
        coo = sol.operator.matrix.tocoo()
        order = np.lexsort((coo.col, coo.row))
        files.append(write_csv(out / "operator.csv", ["i", "j", "value"],
                               ((coo.row[t], coo.col[t], coo.data[t]) for t in order)))
        rows = [("alpha", sol.alpha), ("escape_rate", sol.escape_rate),
                ("lambda2_abs", sol.lambda2_abs), ("gap", sol.gap), ("h_minus", sol.h_minus),
                ("integral_h0", float(sol.h0_mass.sum())), ("beta", self.sys.map.beta),
                ("hole_measure", self.sys.hole.measure), ("hole_small", self.hole_small),
                ("closeness_surrogate", check_operator_closeness(self.sys, part)),
                ("bins", part.k), ("markov", part.markov)]
        ens = survival_ensemble(self.sys, sol, cfg.n_particles, cfg.horizon,
                                derive_seed(cfg.seed, SEED_TAGS["survival"]), self.workers)
        try:
            fit = fit_alpha(ens)
            rows += [("alpha_mc", fit.alpha_hat), ("alpha_mc_stderr", fit.stderr)]
        except InsufficientSurvivorsError as e:
            self.errors.append(e.record())
        if not self.sys.closed:
            stat, dof, pval = geometric_gof(ens, sol.alpha)
            rows += [("chi2_stat", stat), ("chi2_dof", dof), ("chi2_pvalue", pval)]
        files.append(write_csv(out / "spectral.csv", ["quantity", "value"], rows))
        files.append(write_csv(out / "survival.csv", ["t", "survivors", "fraction", "alpha_pow"],
                               ((t, c, c / cfg.n_particles, sol.alpha ** t)
                                for t, c in enumerate(ens.survivors))))
        t, counts = ens.exit_histogram()
        files.append(write_csv(out / "exit_times.csv", ["t", "count", "expected"],
                               ((ti, ci, cfg.n_particles * sol.alpha ** (ti - 1) * (1 - sol.alpha))
                                for ti, ci in zip(t, counts))))
        return files

    def evd(self) -> list[str]:
        cfg, sol = self.cfg, self.sol
        tau = 1.0 if 1.0 in cfg.tau else float(cfg.tau[0])
        levels = boundary_levels(sol, self.partition, self.z, tau, cfg.n_values)
        p_op = operator_evd(self.sys, sol, self.partition, self.z, levels)
        feasible = []
        for n in levels.n_values:
            try:
                check_feasible(cfg.n_particles, sol.alpha, n)
                feasible.append(n)
            except InfeasibleHorizonError as e:
                self.warn("infeasible_horizon", str(e), n=n)
        mc = {}
        if feasible:
            idx = [levels.n_values.index(n) for n in feasible]
            cc = conditioned_counts(self.sys, sol, self.zf, feasible,
                                    [[levels.radii[i]] for i in idx], cfg.n_particles,
                                    derive_seed(cfg.seed, SEED_TAGS["evd"]), self.workers)
            for j, n in enumerate(feasible):
                s = int(cc.survivors[j])
                p = cc.below[j][0] / s if s else math.nan
                mc[n] = (p, math.sqrt(p * (1 - p) / s) if s else math.nan)
        rows = []
        for i, n in enumerate(levels.n_values):
            p, se = mc.get(n, (math.nan, math.nan))
            rows.append((n, levels.u_values[i], levels.radii[i], p, se, p_op[i]))
        return [write_csv(self.out / "evd_curve.csv",
                          ["n", "u_n", "radius", "p_mc", "stderr", "p_op"], rows)]

    def theta(self) -> list[str]:
        cfg, sol, sys_, spec = self.cfg, self.sol, self.sys, self.spec
        est, err = {}, {}

        def attempt(name, fn):
            try:
                return fn()
            except OpenEvtError as e:
                self.errors.append(e.record())
                est[name], err[name] = math.nan, math.nan
                return None

        deriv = orbit_derivative(sys_.map, self.z, spec.period) if spec.kind == "periodic" else None
        f = attempt("formula", lambda: theta_formula(spec, sol.alpha, deriv))
        if f is not None:
            est["formula"], err["formula"] = f, 0.0
        radii = cfg.radii.values()
        files = []
        ps = attempt("spectral", lambda: perturbed_eigenvalue_curve(
            sys_, sol, self.partition, self.z, radii, on_survivor=True))
        if ps is not None:
            est["spectral"], err["spectral"] = ps.extrapolate()
            files.append(write_csv(self.out / "perturbed.csv",
                                   ["radius", "lambda_n", "delta_n", "slope"],
                                   zip(ps.radii, ps.lambda_n, ps.delta_n, ps.slope_estimates)))
        rr = attempt("return", lambda: return_ratios(sys_, sol, self.partition, self.z,
                                                     spec.period, cfg.k_max, radii))
        if rr is not None:
            est["return"] = rr.theta_ret
            err["return"] = (float(np.max(np.abs(rr.r_kn[:, -1] - rr.r_kn[:, -2])))
                             if len(rr.radii) > 1 else math.nan)
            if not rr.stable:
                self.warn("return_unstable", "r_k differ by more than 1e-3 between the two "
                          "smallest radii")
            files.append(write_csv(
                self.out / "returns.csv", ["k", "radius", "r_kn", "q_kn"],
                ((k, rr.radii[j], rr.r_kn[k, j], rr.q_kn[k, j])
                 for k in range(rr.k_max + 1) for j in range(len(rr.radii)))))
        g = attempt("gumbel", lambda: theta_gumbel(
            sys_, sol, self.z, cfg.gumbel_n, cfg.tau, cfg.n_particles,
            derive_seed(cfg.seed, SEED_TAGS["gumbel"]), self.workers))
        if g is not None:
            est["gumbel"], err["gumbel"] = g.theta, g.stderr
        rows = [(m, est.get(m, math.nan), err.get(m, math.nan))
                for m in ("formula", "spectral", "return", "gumbel")]
        files.insert(0, write_csv(self.out / "theta.csv", ["method", "estimate", "error"], rows))
        return files

    def dimension(self) -> list[str]:
        cfg, sol = self.cfg, self.sol
        dg = cfg.dimension
        de = local_dimension(sol, self.partition, self.z, dg.u_values())
        files = [write_csv(self.out / "dimension.csv", ["u_n", "lambda_mass", "d_n", "t0_hat"],
                           ((u, m, d, de.t0_hat)
                            for u, m, d in zip(de.u_values, de.masses, de.d_n_values)))]
        if de.atom_flag:
            self.warn("atom", "local dimension estimate near 0: Λ looks atomic at z")
        fits, ns = [], []
        seed = derive_seed(cfg.seed, SEED_TAGS["gev"])
        for j, n in enumerate(dg.gev_n):
            try:
                if self.sys.map.affine:
                    md = backward_minima(self.sys, sol, self.zf, n, dg.paths, seed + j, self.workers)
                else:
                    check_feasible(cfg.n_particles, sol.alpha, n)
                    md = conditioned_minima(self.sys, sol, self.zf, n, cfg.n_particles,
                                            seed + j, self.workers)
                fits.append(fit_gev(maxima_from_minima(md)))
                ns.append(n)
            except OpenEvtError as e:
                self.errors.append(e.record())
        if fits:
            seq = normalizing_sequences(fits, ns)
            for f in fits:
                if f.gumbel_flag:
                    self.warn("gev_shape", f"fitted shape {f.shape:.3g} outside the Gumbel band")
            files.append(write_csv(self.out / "gev.csv",
                                   ["n", "location", "scale", "shape", "a_n", "b_n"],
                                   ((n, f.location, f.scale, f.shape, a, b)
                                    for n, f, a, b in zip(ns, fits, seq.a_n, seq.b_n))))
        return files

    def degenerate(self) -> list[str]:
        cfg = self.cfg
        probe = degenerate_probe(self.sys, self.sol, self.partition, self.z, cfg.n_values,
                                 self.spec, cfg.survivor_depth)
        dist = distance_estimate(self.sys, self.sol, self.partition, self.z, self.spec,
                                 cfg.survivor_depth)
        files = [write_csv(self.out / "degenerate.csv",
                           ["n", "u_n", "radius", "lambda_n", "lambda_equals_alpha", "p_op"],
                           ((n, math.log(n), 1.0 / n, lam, lam == probe.alpha, p)
                            for n, lam, p in zip(probe.n_values, probe.lambda_n, probe.curve)))]
        files.append(write_csv(self.out / "distance.csv", ["quantity", "value"],
                               [("n_hat", dist.n_hat), ("estimate", dist.estimate),
                                ("exact", dist.exact), ("depth", dist.depth),
                                ("ratio", dist.estimate / dist.exact if dist.exact > 0 else math.nan)]))
        return files


def run(cfg: ExperimentConfig, out: Path, pipeline: str | None = None, workers: int = 1) -> tuple[dict, int]:
    """Execute the configured pipelines; returns (manifest, exit status)."""
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    pipeline = pipeline or cfg.pipeline
    start = time.perf_counter()
    manifest = {"tool": "openevt", "version": __version__, "config": cfg.to_dict(),
                "seed": cfg.seed, "pipeline": pipeline, "workers": workers}
    status = 0
    runner = None
    try:
        runner = Runner(cfg, out, workers)
        runner.setup()
        manifest["classification"] = runner.spec.label()
        manifest["alpha"] = runner.sol.alpha
        for step in runner.plan(pipeline):
            try:
                runner.outputs[step] = getattr(runner, step)()
            except OpenEvtError as e:
                runner.errors.append({**e.record(), "pipeline": step})
    except OpenEvtError as e:
        status = 1
        manifest.setdefault("errors", []).append(e.record())
    except (ValueError, ArithmeticError) as e:
        status = 1
        manifest.setdefault("errors", []).append(
            {"name": type(e).__name__, "module": "cli", "parameter": None, "message": str(e)})
    if runner is not None:
        manifest["outputs"] = runner.outputs
        manifest["warnings"] = runner.warnings
        manifest["errors"] = runner.errors + manifest.get("errors", [])
    manifest.setdefault("outputs", {})
    manifest.setdefault("warnings", [])
    manifest.setdefault("errors", [])
    if manifest["errors"]:
        status = 1
    manifest["wall_clock_seconds"] = time.perf_counter() - start
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True, default=fmt) + "\n")
    return manifest, status


# ---------------------------------------------------------------------------
# validation


def validate(cfg_dict: dict) -> list[dict]:
    """Static schema checks plus cheap dynamic checks; each item has a level."""
    diags: list[dict] = []

    def add(level, code, message, parameter=None):
        diags.append({"level": level, "code": code, "message": message, "parameter": parameter})

    try:
        cfg = ExperimentConfig.from_dict(cfg_dict)
    except ConfigError as e:
        add("fatal", "schema", str(e), e.parameter)
        return diags
    sys_ = cfg.system()
    z = cfg.exact_target()
    if sys_.closed:
        add("warning", "closed_system", "empty hole: only closed-system controls are meaningful", "hole")
    try:
        spec = classify_target(sys_, z, p_max=cfg.p_max)
        add("info", "classification", spec.label(), "target")
    except OpenEvtError as e:
        add("fatal", type(e).__name__, str(e), e.parameter)
        return diags
    d = singular_set_distance(sys_.map, float(z), 10)
    add("info", "singular_distance", f"distance from z to boundary preimages (depth 10) = {d!r}", "target")
    try:
        part = build_partition(sys_, min(cfg.bins, 1024), cfg.markov_mode)
        sol = spectral_solution(sys_, part)
    except OpenEvtError as e:
        add("fatal" if e.module == "ulam" and type(e).__name__ == "UnsupportedModeError" else "warning",
            type(e).__name__, str(e), e.parameter)
        return diags
    m_h = sys_.hole.measure
    if m_h > 0:
        add("info", "hole_constant",
            f"1 - alpha = {1 - sol.alpha!r}; observed ratio (1 - alpha)/m(H) = {(1 - sol.alpha) / m_h!r} "
            "(informational surrogate)", "hole")
    beta = sys_.map.beta
    if check_hole_smallness(sol, beta, cfg.d_const):
        add("info", "hole_smallness", f"alpha={sol.alpha!r} > d_const/beta={cfg.d_const / beta!r}", "d_const")
    else:
        add("warning", "hole_smallness",
            f"alpha={sol.alpha!r} <= d_const/beta={cfg.d_const / beta!r}; theta refused for periodic targets",
            "d_const")
    for n in list(cfg.n_values) + [cfg.gumbel_n]:
        try:
            check_feasible(cfg.n_particles, sol.alpha, n)
        except InfeasibleHorizonError as e:
            add("warning", "InfeasibleHorizonError", str(e), "n_values" if n in cfg.n_values else "gumbel_n")
    return diags


# ---------------------------------------------------------------------------
# entry point


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(prog="openevt", description="Extreme value statistics for open interval maps")
    sub = ap.add_subparsers(dest="command", required=True)
    r = sub.add_parser("run", help="run pipelines and write CSV files plus manifest.json")
    r.add_argument("--config", required=True)
    r.add_argument("--out", default=None)
    r.add_argument("--pipeline", default=None, choices=["spectral", "evd", "theta", "dimension",
                                                        "degenerate", "all"])
    r.add_argument("--workers", type=int, default=None)
    v = sub.add_parser("validate", help="check a config without running it")
    v.add_argument("--config", required=True)
    args = ap.parse_args(argv)

    if args.command == "validate":
        try:
            d = json.loads(Path(args.config).read_text())
        except (OSError, json.JSONDecodeError) as e:
            print(json.dumps([{"level": "fatal", "code": "schema", "message": str(e), "parameter": "config"}]))
            return 1
        diags = validate(d)
        print(json.dumps(diags, indent=2))
        return 1 if any(x["level"] == "fatal" for x in diags) else 0

    try:
        cfg = ExperimentConfig.load(args.config)
    except (ConfigError, OSError) as e:
        rec = e.record() if isinstance(e, ConfigError) else {"name": type(e).__name__, "module": "cli",
                                                             "parameter": "config", "message": str(e)}
        print(json.dumps({"errors": [rec]}), file=sys.stderr)
        return 1
    out = args.out or cfg.output
    if not out:
        print(json.dumps({"errors": [ConfigError("no output directory", parameter="out").record()]}),
              file=sys.stderr)
        return 1
    manifest, status = run(cfg, Path(out), args.pipeline, resolve_workers(args.workers))
    if status:
        print(json.dumps({"errors": manifest["errors"]}), file=sys.stderr)
    return status


if __name__ == "__main__":
    raise SystemExit(main())
