"""Command-line driver: ``dualflow run | analyze-utility | report``.

A run is driven by one JSON config document::

    {
      "utility": {"variant": "exponential", "gamma": 1.0},
      "market":  {"variant": "black_scholes", "theta": 0.5, "T": 1.0},
      "seed": 42,
      "pipeline": "all",                 # or a list of stage names
      "x0": 0.0,
      "grids": {...}, "paths": {...}, "tolerances": {...}
    }

Stages run in dependency order and hand results to each other only
through files listed in ``manifest.json``.  Exit codes: 0 all selected
reports pass, 2 configuration problem, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import copy
import hashlib
import json
import math
import sys
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np
from scipy.interpolate import CubicSpline

from . import __version__
from . import io as dio
from .basis_risk import EntropyField, FactorGrid, basis_risk_wealth_flow, solve_distortion, solve_semilinear, value_fields
from .bspde import (derivative_value_decomposition_check, dual_bspde_residual, estimate_dual_decomposition,
                    estimate_primal_decomposition, estimator_agreement, primal_bspde_residual, transport_checks)
from .duality import (CompleteFlow, DualValueField, ValueField, conditional_checks, duality_on_paths,
                      dynamic_fields, fit_order, static_solve, wealth_and_strategy_flow)
from .errors import CapabilityError, ConfigError, DomainError, DualflowError, ModelError
from .inverse import closed_form_inverse, integrate_inverse_sde, invert_pathwise, roundtrip_residual
from .kernel import LognormalDualKernel
from .market import BasisRisk, BlackScholes, MarketSpec, TimeGrid, market_from_dict, simulate_paths
from .report import ResidualReport
from .utility import Exponential, Utility, check_regularity, utility_from_dict

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC = 0, 2, 3

STAGES = ("analyze", "solve", "fields", "inverse", "bspde", "conditional")
DEPENDS = {"analyze": (), "solve": ("analyze",), "fields": ("analyze",), "inverse": ("analyze",),
           "bspde": ("fields",), "conditional": ("fields",)}

DEFAULTS = {
    "pipeline": "all",
    "x0": 0.0,
    "grids": {
        "n_steps": 64,                      # simulation grid
        "flow_x": [-3.0, 3.0, 61],          # wealth-flow x grid (lo, hi, n)
        "conditional_flow_x": [-8.0, 8.0, 17],
        "inverse_targets": [-1.0, -0.5, 0.0, 0.5, 1.0],
        "field_steps": 200,                 # value-field time steps
        "field_x": [-3.0, 3.0, 201],
        "field_y": [0.07, 12.0, 201],       # log-spaced
        "factor": [-3.0, 3.0, 241],
    },
    "paths": {"solve": 100_000, "inverse": 200, "conditional": 20_000},
    "conditional": {"tau": [0.25, 0.5, 0.75], "x": [-1.0, 0.0, 1.0]},
    "tolerances": {},
}


class UsageError(Exception):
    """Invalid invocation or config; maps to exit code 2."""

    def __init__(self, msg: str, fields: list[str] | None = None):
        super().__init__(msg)
        self.fields = fields or []


# --------------------------------------------------------------------------
# config
# --------------------------------------------------------------------------


def _merge(base: dict, over: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in over.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = v
    return out


def _load_document(path: str | None) -> dict:
    if path is None:
        raise UsageError("--config is required", ["--config"])
    try:
        doc = json.loads(Path(path).read_text())
    except FileNotFoundError as exc:
        raise UsageError(f"config file not found: {path}", ["--config"]) from exc
    except json.JSONDecodeError as exc:
        raise UsageError(f"config is not valid JSON: {exc}", ["--config"]) from exc
    if not isinstance(doc, dict):
        raise UsageError("config must be a JSON object", ["<root>"])
    return doc


def build_utility(doc: dict) -> Utility:
    if not isinstance(doc, dict):
        raise UsageError("utility must be an object", ["utility"])
    try:
        return utility_from_dict(doc)
    except KeyError as exc:
        raise UsageError(f"utility is missing field {exc.args[0]!r}", [f"utility.{exc.args[0]}"]) from exc
    except (DomainError, TypeError, ValueError) as exc:
        raise UsageError(f"invalid utility: {exc}", ["utility"]) from exc


def build_market(doc: dict) -> MarketSpec:
    if not isinstance(doc, dict):
        raise UsageError("market must be an object", ["market"])
    try:
        return market_from_dict(doc)
    except KeyError as exc:
        raise UsageError(f"market is missing field {exc.args[0]!r}", [f"market.{exc.args[0]}"]) from exc
    except (ModelError, TypeError, ValueError) as exc:
        raise UsageError(f"invalid market: {exc}", ["market"]) from exc


def _check_range(cfg: dict, key: str, positive: bool = False) -> tuple[float, float, int]:
    val = cfg["grids"][key]
    try:
        lo, hi, n = float(val[0]), float(val[1]), int(val[2])
    except (TypeError, ValueError, IndexError) as exc:
        raise UsageError(f"grids.{key} must be [lo, hi, n]", [f"grids.{key}"]) from exc
    if not (lo < hi) or n < 5 or (positive and lo <= 0):
        raise UsageError(f"grids.{key} needs lo < hi{', lo > 0' if positive else ''} and n >= 5",
                         [f"grids.{key}"])
    return lo, hi, n


def normalize_config(doc: dict, seed: int | None = None) -> dict:
    """Defaults merged in, seed resolved, grids and pipeline validated."""
    problems = [k for k in ("utility", "market") if k not in doc]
    if problems:
        raise UsageError(f"missing required field(s): {', '.join(problems)}", problems)
    cfg = _merge(DEFAULTS, {k: v for k, v in doc.items() if k != "threads"})
    if seed is not None:
        cfg["seed"] = seed
    if "seed" not in cfg:
        raise UsageError("seed is required (no default entropy source)", ["seed"])
    if not isinstance(cfg["seed"], int) or isinstance(cfg["seed"], bool) or cfg["seed"] < 0:
        raise UsageError("seed must be a non-negative integer", ["seed"])
    pipe = cfg["pipeline"]
    pipe = list(STAGES) if pipe == "all" else ([pipe] if isinstance(pipe, str) else list(pipe))
    bad = [p for p in pipe if p not in STAGES]
    if bad:
        raise UsageError(f"unknown pipeline stage(s) {bad}; choose from {list(STAGES)} or 'all'", ["pipeline"])
    cfg["pipeline"] = [s for s in STAGES if s in pipe]
    build_utility(cfg["utility"])
    model = build_market(cfg["market"])
    for key in ("flow_x", "conditional_flow_x", "field_x", "factor"):
        _check_range(cfg, key)
    _check_range(cfg, "field_y", positive=True)
    g = cfg["grids"]
    for key in ("n_steps", "field_steps"):
        if not isinstance(g[key], int) or g[key] < 4:
            raise UsageError(f"grids.{key} must be an integer >= 4", [f"grids.{key}"])
    for key, n in cfg["paths"].items():
        if not isinstance(n, int) or n < 2:
            raise UsageError(f"paths.{key} must be an integer >= 2", [f"paths.{key}"])
    for tau in cfg["conditional"]["tau"]:
        for steps, name in ((g["n_steps"], "n_steps"), (g["field_steps"], "field_steps")):
            k = tau / model.T * steps
            if not (0 < tau < model.T) or abs(k - round(k)) > 1e-9:
                raise UsageError(f"conditional tau={tau} is not an interior point of grids.{name}",
                                 ["conditional.tau"])
    if not isinstance(cfg["tolerances"], dict):
        raise UsageError("tolerances must be an object", ["tolerances"])
    return cfg


def config_hash(cfg: dict) -> str:
    text = json.dumps(dio.jsonable(cfg), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(text.encode()).hexdigest()


# --------------------------------------------------------------------------
# stages
# --------------------------------------------------------------------------


@dataclass
class StageResult:
    status: str = "PASS"                       # PASS | FAIL | ERROR | UNSUPPORTED | SKIPPED
    reports: list[ResidualReport] = field(default_factory=list)
    outputs: list[str] = field(default_factory=list)
    diagnostics: list[str] = field(default_factory=list)


@dataclass
class Context:
    cfg: dict
    out: Path
    threads: int
    tolerance_scale: float
    utility: Utility
    model: MarketSpec

    def path(self, rel: str) -> Path:
        p = self.out / rel
        p.parent.mkdir(parents=True, exist_ok=True)
        return p

    def tol(self, name: str, default: float) -> float:
        return float(self.cfg["tolerances"].get(name, default))

    def linspace(self, key: str) -> np.ndarray:
        lo, hi, n = self.cfg["grids"][key]
        return np.linspace(lo, hi, int(n))

    def geomspace(self, key: str) -> np.ndarray:
        lo, hi, n = self.cfg["grids"][key]
        return np.geomspace(lo, hi, int(n))

    @property
    def seed(self) -> int:
        return int(self.cfg["seed"])

    @property
    def field_times(self) -> np.ndarray:
        return TimeGrid(self.model.T, self.cfg["grids"]["field_steps"]).times


def _default_bspde_tol(u: Utility) -> float:
    return 1e-3 if isinstance(u, Exponential) else 1e-2


def stage_analyze(ctx: Context, res: StageResult) -> None:
    # the bounded-density probe (r2) needs a closed-form lognormal density
    market = ctx.model if isinstance(ctx.model, BlackScholes) else None
    rr = check_regularity(ctx.utility, market=market, seed=ctx.seed)
    dio.write_json(ctx.path("analyze/regularity.json"), rr.to_record())
    res.outputs.append("analyze/regularity.json")
    rep = ResidualReport("regularity_gate", metadata={"flags": rr.failures})
    for name in ("inada", "rav1"):
        rep.add(f"{name}_failed", float(not getattr(rr, f"{name}_pass")), 0.0)
    rep.add("r1_and_r2_failed", float(not rr.r1_pass and not rr.r2_pass), 0.0)
    res.reports.append(rep)
    for name in rr.gate_failures:
        wit = getattr(rr, f"{name}_witness", None)
        res.diagnostics.append(f"regularity condition failed: {name}"
                               + (f" {json.dumps(dio.jsonable(wit))}" if wit else ""))


def stage_solve(ctx: Context, res: StageResult) -> None:
    u, m = ctx.utility, ctx.model
    n = ctx.cfg["paths"]["solve"]
    x0 = float(ctx.cfg["x0"])
    sol = static_solve(u, m, x0, n_paths=n, seed=ctx.seed, n_steps=ctx.cfg["grids"]["n_steps"],
                       threads=ctx.threads)
    rec = {"x": sol.x, "y_star": sol.y_star, "V": sol.v, "V_tilde": sol.v_tilde, "V_mc": sol.v_mc,
           "mc_stderr": sol.mc_stderr, "V2": sol.v2, "V3": sol.v3, "n_paths": n}
    dio.write_json(ctx.path("solve/static.json"), rec)
    res.outputs.append("solve/static.json")
    rep = ResidualReport("static_solution", metadata={"n_paths": n, "seed": ctx.seed})
    rep.add("conjugacy_gap", sol.conjugacy_gap, ctx.tol("conjugacy_gap", 1e-10))
    if isinstance(m, BlackScholes):
        rep.add_se_test("mc_value_minus_V", sol.v_mc, sol.mc_stderr, sol.v)
        ker = LognormalDualKernel(u, m.sharpe, m.T)
        xs = ctx.linspace("flow_x")
        if not np.any(np.isclose(xs, x0)):
            xs = np.sort(np.append(xs, x0))
        pv = ker.primal(0.0, xs)
        dio.write_series_csv(ctx.path("solve/value_table.csv"),
                             {"x": xs, "V": pv.V, "V1": pv.V1, "y_star": pv.w})
        res.outputs.append("solve/value_table.csv")
        paths = simulate_paths(m, TimeGrid(m.T, 1), n, ctx.seed, "P", threads=ctx.threads)
        from .duality import optimal_terminal_wealth

        xT = optimal_terminal_wealth(u, sol.y_star, paths.Z[:, -1])
        err = np.abs(u.derivative(xT, 1) - sol.y_star * paths.Z[:, -1])
        rep.add("pathwise_duality_max", float(np.max(err)), ctx.tol("pathwise_duality_max", 1e-10))
    res.reports.append(rep)


def _field_files(kind: str) -> dict[str, str]:
    return {k: f"fields/{kind}_{k}.csv" for k in ("V", "V1", "V2", "V3")}


def stage_fields(ctx: Context, res: StageResult) -> None:
    u, m = ctx.utility, ctx.model
    t = ctx.field_times
    rep = ResidualReport("fields", metadata={"n_t": t.size})
    if isinstance(m, BlackScholes):
        x, y = ctx.linspace("field_x"), ctx.geomspace("field_y")
        pf, df = dynamic_fields(u, m, t, x, y)
        for kind, fld, key in (("primal", pf, "x"), ("dual", df, "y")):
            for name, rel in _field_files(kind).items():
                dio.write_matrix_csv(ctx.path(rel), key, getattr(fld, key), t, getattr(fld, name))
                res.outputs.append(rel)
        finite = np.isfinite(pf.V).all() and np.isfinite(df.V).all()
        rep.add("non_finite_entries", float(not finite), 0.0)
        rep.add("primal_terminal_max", float(np.max(np.abs(pf.V[-1] - u(x)))), 0.0)
        rep.metadata.update(pf.metadata)
    elif isinstance(m, BasisRisk):
        lo, hi, n = ctx.cfg["grids"]["factor"]
        grid = FactorGrid(lo, hi, int(n))
        steps = ctx.cfg["grids"]["field_steps"]
        ed, es = solve_distortion(m, steps, grid), solve_semilinear(m, steps, grid)
        for e in (ed, es):
            rel = f"fields/entropy_{e.method}.csv"
            dio.write_matrix_csv(ctx.path(rel), "factor", e.y, e.t, e.H)
            res.outputs.append(rel)
        diff = float(np.max(np.abs(ed.H - es.H)) / np.max(np.abs(ed.H)))
        rep.add("entropy_route_relative_difference", diff, ctx.tol("entropy_route_relative_difference", 2e-2))
        rep.metadata["H0"] = float(ed.value(0.0, m.y0))
    else:
        raise CapabilityError("value fields need a Markov model with a closed dual kernel "
                              "(black_scholes or basis_risk)")
    res.reports.append(rep)


def _read_value_fields(ctx: Context) -> tuple[ValueField, DualValueField]:
    mats = {}
    for kind in ("primal", "dual"):
        for name, rel in _field_files(kind).items():
            mats[kind, name] = dio.read_matrix_csv(ctx.out / rel)
    x, t, _ = mats["primal", "V"]
    y = mats["dual", "V"][0]
    meta = {"source": "fields/*.csv"}
    pf = ValueField(t, x, *(mats["primal", k][2] for k in ("V", "V1", "V2", "V3")), metadata=dict(meta))
    df = DualValueField(t, y, *(mats["dual", k][2] for k in ("V", "V1", "V2", "V3")), metadata=dict(meta))
    return pf, df


def _read_entropy(ctx: Context, method: str) -> EntropyField:
    y, t, H = dio.read_matrix_csv(ctx.out / f"fields/entropy_{method}.csv")
    return EntropyField(t, y, H, method, {"source": f"fields/entropy_{method}.csv"})


def stage_bspde(ctx: Context, res: StageResult) -> None:
    u, m = ctx.utility, ctx.model
    if isinstance(m, BlackScholes):
        pf, df = _read_value_fields(ctx)
        tol = ctx.tol("bspde", _default_bspde_tol(u))
        P = estimate_primal_decomposition(pf, m)
        D = estimate_dual_decomposition(df, m)
        rp = primal_bspde_residual(P, u, threshold=tol)
        rd = dual_bspde_residual(D, u, P, threshold=tol)
        t2 = transport_checks(estimate_primal_decomposition(pf, m, use_analytic=True),
                             estimate_dual_decomposition(df, m, use_analytic=True),
                             tol_abs=ctx.tol("curvature", 1e-4))
        dv = derivative_value_decomposition_check(pf, m, threshold=ctx.tol("commutation", 1e-4))
        res.reports += [rp, rd, t2, dv]
        k_grid = (P.t, P.k, D.k)
    elif isinstance(m, BasisRisk):
        es, ed = _read_entropy(ctx, "semilinear"), _read_entropy(ctx, "distortion")
        x, y = ctx.linspace("field_x"), ctx.geomspace("field_y")
        ps, ds = value_fields(u, es, x, y)
        pd_, dd = value_fields(u, ed, x, y)
        tol = ctx.tol("bspde", 5e-2)
        P, D = estimate_primal_decomposition(ps, m), estimate_dual_decomposition(dd, m)
        rp = primal_bspde_residual(P, u, threshold=tol)
        rd = dual_bspde_residual(D, u, P, threshold=tol)
        t2 = transport_checks(P, D, tol_abs=ctx.tol("curvature", 1e-2), tol_rel=ctx.tol("transport", 1e-2))
        ag = estimator_agreement(P, estimate_primal_decomposition(pd_, m), tol=ctx.tol("agreement", 2e-2))
        res.reports += [rp, rd, t2, ag]
        k_grid = (P.t, P.k, D.k)
    else:
        raise CapabilityError("BSPDE residuals need a Markov value field")
    t, x, y = k_grid
    mid = rp.arrays["residual"].shape[1] // 2
    dio.write_matrix_csv(ctx.path("bspde/primal_residual.csv"), "x", x, t, rp.arrays["residual"][:, mid, :])
    dio.write_matrix_csv(ctx.path("bspde/dual_residual.csv"), "y", y, t, rd.arrays["residual"][:, mid, :])
    res.outputs += ["bspde/primal_residual.csv", "bspde/dual_residual.csv"]


def _flow_for(ctx: Context, paths, x_grid):
    u, m = ctx.utility, ctx.model
    if isinstance(m, BlackScholes):
        return wealth_and_strategy_flow(u, m, x_grid, paths)
    if isinstance(m, BasisRisk):
        return basis_risk_wealth_flow(u, m, x_grid, paths)
    raise CapabilityError("inverse flows need an explicit flow (black_scholes or basis_risk)")


def stage_inverse(ctx: Context, res: StageResult) -> None:
    m = ctx.model
    grid = TimeGrid(m.T, ctx.cfg["grids"]["n_steps"])
    n = ctx.cfg["paths"]["inverse"]
    if not isinstance(m, (BlackScholes, BasisRisk)):
        raise CapabilityError("inverse flows need an explicit flow (black_scholes or basis_risk)")
    paths = simulate_paths(m, grid, n, ctx.seed + 1, "P", threads=ctx.threads)
    wf = _flow_for(ctx, paths, ctx.linspace("flow_x"))
    targets = np.asarray(ctx.cfg["grids"]["inverse_targets"], dtype=float)
    inv = invert_pathwise(wf, targets)
    rep = ResidualReport("inverse_flow", metadata={"n_paths": n, "n_steps": grid.n_steps})
    rep.add("roundtrip_sup", roundtrip_residual(wf.flow, paths, inv), ctx.tol("roundtrip", 1e-6))
    if isinstance(m, BlackScholes):
        cf = closed_form_inverse(wf.flow, paths, targets)
        rep.add("closed_form_vs_inverted_sup", float(np.max(np.abs(cf.psi - inv.psi))), ctx.tol("roundtrip", 1e-6))
        rep.add("pathwise_duality_relative_max",
                float(max(np.max(np.abs(duality_on_paths(wf, k))) for k in range(grid.n_steps + 1))),
                ctx.tol("pathwise_duality_relative", 1e-8))
        rows = {"dt": [], "strong_error": []}
        for f in (1, 2, 4, 8):
            if grid.n_steps % f:
                continue
            pc = paths.coarsen(f)
            sde = integrate_inverse_sde(wf.flow, targets, pc, wf.x, on_exit="freeze")
            ref = cf.psi[:, ::f, :]
            rows["dt"].append(pc.grid.dt)
            rows["strong_error"].append(float(np.mean(np.abs(sde.psi[:, -1, :] - ref[:, -1, :]))))
        dio.write_series_csv(ctx.path("inverse/sde_convergence.csv"), rows)
        res.outputs.append("inverse/sde_convergence.csv")
        if len(rows["dt"]) >= 2 and min(rows["strong_error"]) > 0:
            rep.add("sde_strong_order", fit_order(rows["dt"], rows["strong_error"]), math.inf,
                    note="reported only at desk path counts")
    for rel, writer, obj in (("inverse/psi.csv", dio.write_inverse_csv, inv),
                             ("inverse/psi.dfl", dio.write_inverse_binary, inv),
                             ("inverse/paths.csv", dio.write_paths_csv, paths),
                             ("inverse/paths.dfl", dio.write_paths_binary, paths)):
        writer(ctx.path(rel), obj)
        res.outputs.append(rel)
    res.reports.append(rep)


def stage_conditional(ctx: Context, res: StageResult) -> None:
    u, m = ctx.utility, ctx.model
    if not isinstance(m, BlackScholes):
        raise CapabilityError("conditional checks need a complete market")
    pf, _ = _read_value_fields(ctx)
    grid = TimeGrid(m.T, ctx.cfg["grids"]["n_steps"])
    paths = simulate_paths(m, grid, ctx.cfg["paths"]["conditional"], ctx.seed + 2, "P", threads=ctx.threads)
    xs = np.asarray(ctx.cfg["conditional"]["x"], dtype=float)
    wf = wealth_and_strategy_flow(u, m, ctx.linspace("conditional_flow_x"), paths, CompleteFlow(u, m))
    inv = invert_pathwise(wf, xs)
    field_grid = TimeGrid(m.T, ctx.cfg["grids"]["field_steps"])
    rows = {"tau": [], "x": [], "V_field": []}
    for tau in ctx.cfg["conditional"]["tau"]:
        v_tau = CubicSpline(pf.x, pf.V[field_grid.index(tau)])
        for x in xs:
            value = float(v_tau(x))
            res.reports.append(conditional_checks(wf, inv, tau, float(x), value_at_tau=value))
            rows["tau"].append(tau), rows["x"].append(float(x)), rows["V_field"].append(value)
    dio.write_series_csv(ctx.path("conditional/field_values.csv"), rows)
    res.outputs.append("conditional/field_values.csv")


STAGE_FUNCS: dict[str, Callable[[Context, StageResult], None]] = {
    "analyze": stage_analyze, "solve": stage_solve, "fields": stage_fields,
    "inverse": stage_inverse, "bspde": stage_bspde, "conditional": stage_conditional,
}


def _with_dependencies(selected: list[str]) -> list[str]:
    need = set(selected)
    for s in reversed(STAGES):
        if s in need:
            need.update(DEPENDS[s])
    return [s for s in STAGES if s in need]


def run(cfg: dict, out: Path, threads: int = 1, tolerance_scale: float = 1.0,
        echo: Callable[[str], None] = print) -> int:
    """Execute the configured stages and write the manifest; returns the exit code."""
    out.mkdir(parents=True, exist_ok=True)
    ctx = Context(cfg, out, threads, tolerance_scale, build_utility(cfg["utility"]), build_market(cfg["market"]))
    stages = _with_dependencies(cfg["pipeline"])
    results: dict[str, StageResult] = {}
    ops = []
    for name in STAGES:
        res = StageResult()
        t0 = time.perf_counter()
        blocked = [d for d in DEPENDS[name] if results.get(d) and results[d].status not in ("PASS",)]
        if name not in stages:
            res.status = "SKIPPED"
            res.diagnostics.append("not selected")
        elif blocked:
            res.status = "SKIPPED"
            res.diagnostics.append(f"blocked by {', '.join(blocked)}")
        else:
            try:
                STAGE_FUNCS[name](ctx, res)
                res.reports = [r.scaled(tolerance_scale) for r in res.reports]
                res.status = "PASS" if all(r.passed for r in res.reports) else "FAIL"
                for r in res.reports:
                    res.diagnostics += [f"{r.name}: {f}" for f in r.failures]
            except CapabilityError as exc:
                res.status = "UNSUPPORTED"
                res.diagnostics.append(str(exc))
            except DualflowError as exc:
                res.status = "ERROR"
                res.diagnostics.append(f"{type(exc).__name__}: {exc}")
        if res.status not in ("SKIPPED", "UNSUPPORTED") or res.reports:
            rel = f"{name}/report.json"
            dio.write_json(ctx.path(rel), {"stage": name, "status": res.status,
                                           "diagnostics": res.diagnostics,
                                           "reports": [r.to_record() for r in res.reports]})
            res.outputs.append(rel)
        results[name] = res
        ops.append({"name": name, "status": res.status, "wall_time_s": round(time.perf_counter() - t0, 3),
                    "diagnostics": res.diagnostics,
                    "outputs": {rel: dio.sha256_file(out / rel) for rel in res.outputs}})
        echo(f"[{name}] {res.status}" + (f" - {'; '.join(res.diagnostics)}" if res.diagnostics
                                          and res.status != "PASS" else ""))
    failed = [o["name"] for o in ops if o["status"] in ("FAIL", "ERROR")]
    code = EXIT_NUMERIC if failed else EXIT_OK
    manifest = {"artifact_version": __version__, "config_hash": config_hash(cfg), "config": cfg,
                "operations": ops, "exit_code": code}
    dio.write_json(out / "manifest.json", manifest)
    for name in failed:
        echo(f"failing report: {out / name / 'report.json'}")
    return code


# --------------------------------------------------------------------------
# report verb
# --------------------------------------------------------------------------


def _compact(v: float) -> str:
    """``1e-3`` style for round thresholds, ``%.3g`` otherwise."""
    if v == 0 or not math.isfinite(v):
        return f"{v:g}"
    mant, exp = f"{v:.2e}".split("e")
    mant = mant.rstrip("0").rstrip(".")
    exp_i = int(exp)
    return f"{mant}e{exp_i}" if abs(exp_i) >= 3 else f"{v:.3g}"


def summarize(out: Path, echo: Callable[[str], None] = print) -> int:
    mpath = out / "manifest.json"
    try:
        manifest = dio.read_json(mpath)
        ops = manifest["operations"]
    except (FileNotFoundError, json.JSONDecodeError, KeyError, TypeError) as exc:
        echo(f"error: no readable manifest in {out} ({type(exc).__name__})")
        return EXIT_CONFIG
    plots = out / "plots"
    plots.mkdir(exist_ok=True)
    for op in ops:
        echo(f"== {op['name']}: {op['status']} ==")
        rel = f"{op['name']}/report.json"
        if rel not in op.get("outputs", {}):
            for d in op.get("diagnostics", []):
                echo(f"  ({d})")
            continue
        doc = dio.read_json(out / rel)
        for rep in doc["reports"]:
            for st in rep["statistics"]:
                thr = st["threshold"]
                thr = float(thr) if not isinstance(thr, str) else float(thr)
                val = st["value"] if not isinstance(st["value"], str) else float(st["value"])
                flag = "PASS" if st["passed"] else "FAIL"
                echo(f"  {rep['name']}: {st['name']} ≤ {_compact(thr)} {flag}  (value {val:.4g})")
    # plot-ready series
    vfile = out / "fields/primal_V.csv"
    if vfile.exists():
        x, t, V = dio.read_matrix_csv(vfile)
        idx = sorted({0, t.size // 2, t.size - 1})
        dio.write_series_csv(plots / "value_slices.csv", {"x": x, **{f"V(t={t[k]:g})": V[k] for k in idx}})
    for rel in ("bspde/primal_residual.csv", "bspde/dual_residual.csv"):
        if (out / rel).exists():
            (plots / Path(rel).name.replace(".csv", "_heatmap.csv")).write_bytes((out / rel).read_bytes())
    conv = out / "inverse/sde_convergence.csv"
    if conv.exists():
        import csv

        with open(conv, newline="") as fh:
            rows = list(csv.DictReader(fh))
        if len(rows) >= 2:
            h = [float(r["dt"]) for r in rows]
            e = [float(r["strong_error"]) for r in rows]
            order = fit_order(h, e) if min(e) > 0 else math.nan
            dio.write_series_csv(plots / "inverse_convergence.csv",
                                 {"dt": h, "strong_error": e, "fitted_order": [order] * len(h)})
    return EXIT_OK


# --------------------------------------------------------------------------
# entry point
# --------------------------------------------------------------------------


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="dualflow", description="Dual-side optimal investment lab.")
    sub = p.add_subparsers(dest="verb", required=True)
    for verb in ("run", "analyze-utility"):
        s = sub.add_parser(verb)
        s.add_argument("--config", required=True)
        s.add_argument("--out", default="dualflow-out")
        s.add_argument("--seed", type=int, default=None)
        s.add_argument("--threads", type=int, default=1)
        s.add_argument("--tolerance-scale", type=float, default=1.0)
    s = sub.add_parser("report")
    s.add_argument("--out", default=None)
    s.add_argument("directory", nargs="?", default=None)
    return p


def _analyze_only(doc: dict, out: Path, seed: int | None) -> int:
    if "utility" not in doc:
        raise UsageError("missing required field: utility", ["utility"])
    u = build_utility(doc["utility"])
    model = build_market(doc["market"]) if "market" in doc else None
    if model is not None and not isinstance(model, BlackScholes):
        model = None
    s = seed if seed is not None else doc.get("seed", 0)
    rr = check_regularity(u, market=model, seed=int(s))
    out.mkdir(parents=True, exist_ok=True)
    dio.write_json(out / "regularity.json", rr.to_record())
    print(f"rav1_bounds = {rr.rav1_bounds}")
    print(f"flags failed: {rr.failures or 'none'}")
    if rr.gate_failures:
        print(f"gate failures: {', '.join(rr.gate_failures)}")
        return EXIT_NUMERIC
    return EXIT_OK


def main(argv: list[str] | None = None) -> int:
    args = _parser().parse_args(argv)
    try:
        if args.verb == "report":
            d = args.directory or args.out
            if d is None:
                raise UsageError("report needs a result directory", ["directory"])
            return summarize(Path(d))
        if args.threads < 1:
            raise UsageError("--threads must be >= 1", ["--threads"])
        if not (args.tolerance_scale > 0):
            raise UsageError("--tolerance-scale must be positive", ["--tolerance-scale"])
        doc = _load_document(args.config)
        if args.verb == "analyze-utility":
            return _analyze_only(doc, Path(args.out), args.seed)
        cfg = normalize_config(doc, args.seed)
        return run(cfg, Path(args.out), args.threads, args.tolerance_scale)
    except (UsageError, ConfigError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        for f in getattr(exc, "fields", []) or []:
            print(f"  field: {f}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
