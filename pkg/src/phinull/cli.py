"""Experiment harness: config-driven suites with deterministic artifacts.

Five subcommands cover the laboratory surface:

    operators-check   mesh + weight-calculus property suites
    carleman          manufactured-solution ratio sweeps over tau
    hum               one linear synthesis + measured inequality report
    semilinear        Picard fixed point + decay certificate
    decay-sweep       h-sweep with the h <-> delta coupling, kappa fit

Every run reads a single JSON config, writes report.json, CSV tables and a
gnuplot script into --out, and is bit-reproducible for a fixed seed.  Exit
codes: 0 all assertions pass, 1 assertion failure, 2 config error,
3 resource cap exceeded.
"""

from __future__ import annotations

import argparse
import json
import math
import sys
from pathlib import Path

import numpy as np

from . import carleman_lab as cl
from . import fixedpoint as fp
from . import forward_solver as fwd
from . import hum_control as hum
from . import mesh as msh
from . import reporting as rpt
from . import scenario as scn
from . import weights as wgt
from .errors import (
    ConfigError,
    DivergenceError,
    GateViolation,
    InfeasibleRegionError,
    ResourceCapError,
    ScaleLimitError,
    SolveError,
)

CELL_BUDGET_DEFAULT = 10_000_000


# ---------------------------------------------------------------------------
# config plumbing

def load_config(path) -> dict:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    try:
        cfg = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(
            f"config parse error at line {exc.lineno}, column {exc.colno}: {exc.msg}"
        ) from exc
    if not isinstance(cfg, dict):
        raise ConfigError("config root must be a JSON object")
    return cfg


def _mesh_from(cfg) -> msh.MeshSpec:
    m = cfg.get("mesh", {})
    try:
        return msh.MeshSpec(int(m.get("n", 1)), int(m.get("N", 15)))
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"bad mesh block: {exc}") from exc


def _tree_from(cfg) -> scn.ScenarioTree:
    t = cfg.get("tree", {})
    try:
        return scn.ScenarioTree(K=int(t.get("K", 6)), T=float(t.get("T", 1.0)))
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"bad tree block: {exc}") from exc


def _params_from(cfg, delta=None) -> wgt.WeightParams:
    w = dict(cfg.get("weights", {}))
    if delta is not None:
        w["delta"] = delta
    try:
        return wgt.WeightParams(
            lam=float(w.get("lam", 0.35)),
            tau=float(w.get("tau", 2.0)),
            m=float(w.get("m", 0.35)),
            delta=float(w.get("delta", 0.25)),
            T=float(w.get("T", cfg.get("tree", {}).get("T", 1.0))),
            alpha=float(w.get("alpha", 1e-3)),
            delta0=float(w.get("delta0", 2.0)),
            eps0=float(w.get("eps0", 2.0)),
        )
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"bad weights block: {exc}") from exc


def _region_from(cfg, mesh) -> list[tuple[float, float]]:
    region = cfg.get("region", [[0.2, 0.8]] * mesh.n)
    if not isinstance(region, list) or len(region) != mesh.n:
        raise ConfigError(f"region must list {mesh.n} [lo, hi] intervals")
    return [tuple(map(float, box)) for box in region]


def _check_budget(cfg, mesh, tree) -> None:
    budget = int(cfg.get("cell_budget", CELL_BUDGET_DEFAULT))
    cells = (2**tree.K) * mesh.N**mesh.n * tree.K
    if cells > budget:
        raise ResourceCapError(
            f"configured run needs {cells} cells > budget {budget}"
        )


def _y0_from(cfg, mesh, rng) -> np.ndarray:
    spec = cfg.get("y0", {"kind": "sin"})
    kind = spec.get("kind", "sin")
    pts = mesh.points(mesh.extents_primal())
    if kind == "sin":
        out = np.ones(pts.shape[:-1])
        for k in range(mesh.n):
            out = out * np.sin(np.pi * pts[..., k])
        return float(spec.get("scale", 1.0)) * out
    if kind == "random":
        return float(spec.get("scale", 1.0)) * rng.standard_normal(
            mesh.shape(mesh.extents_primal())
        )
    raise ConfigError(f"unknown y0 kind {kind!r}")


def _nonlin_from(cfg, mesh, rng) -> fwd.NonlinearitySpec | None:
    spec = cfg.get("nonlinearity")
    if spec is None:
        return None
    kind = spec.get("kind", "state")
    L1 = float(spec.get("L1", 0.1))
    if kind == "zero":
        nl = fwd.NonlinearitySpec(F1=lambda t, p, a, b: 0.0 * a, L1=0.0)
    elif kind == "state":
        nl = fwd.NonlinearitySpec(
            F1=lambda t, p, a, b: L1 * np.sin(a) if spec.get("saturated") else L1 * a,
            L1=L1 + 1e-12,
        )
    elif kind == "state_gradient":
        scale = L1 / (1 + mesh.n)

        def f1(t, p, a, b):
            return scale * (a + sum(b))

        nl = fwd.NonlinearitySpec(F1=f1, L1=L1 + 1e-12)
    else:
        raise ConfigError(f"unknown nonlinearity kind {kind!r}")
    nl.validate(mesh, rng)
    return nl


class _Failures:
    def __init__(self):
        self.items: list[str] = []

    def check(self, name: str, ok: bool, detail: str = "") -> bool:
        if not ok:
            self.items.append(f"{name}: {detail}" if detail else name)
        return ok


# ---------------------------------------------------------------------------
# subcommands

def run_operators_check(cfg, out: Path, seed: int, strict: bool) -> tuple[int, dict]:
    mesh = _mesh_from(cfg)
    rng = np.random.default_rng(seed)
    fails = _Failures()
    rows = []
    trials = int(cfg.get("trials", 25))
    for trial in range(trials):
        u = msh.zeros(mesh, mesh.extents_closure())
        inner = tuple(slice(1, -1) for _ in range(mesh.n))
        u.values[inner] = rng.standard_normal(mesh.shape(mesh.extents_primal()))
        for i in range(1, mesh.n + 1):
            v = msh.GridFunction(
                mesh, rng.standard_normal(mesh.shape(mesh.extents_dual(i))),
                mesh.extents_dual(i),
            )
            res = msh.sbp_residual(u, v, i)
            rows.append({"check": "sbp", "trial": trial, "direction": i,
                         "residual": res})
            fails.check("sbp_residual", res <= 1e-12, f"{res:.3e}")
    gamma = msh.unit_coefficients(mesh)
    A = msh.laplacian_matrix(mesh, gamma).toarray()
    sym = float(np.max(np.abs(A - A.T)))
    rows.append({"check": "laplacian_symmetry", "trial": 0, "direction": 0,
                 "residual": sym})
    fails.check("laplacian_adjointness", sym <= 1e-12, f"{sym:.3e}")
    params = _params_from(cfg)
    region = _region_from(cfg, mesh)
    ident = wgt.asymptotic_check(
        "avg2_identity", params, region, Ns=tuple(cfg.get("Ns", (7, 15, 31)))
    )
    rows.append({"check": "avg2_identity", "trial": 0, "direction": 1,
                 "residual": max(ident.residuals)})
    fails.check("avg2_identity", ident.passed, f"{max(ident.residuals):.3e}")
    rpt.write_csv(out / "operator_residuals.csv", rows)
    payload = {
        "suite": "operators-check",
        "failures": fails.items,
        "n_checks": len(rows),
        "gates": params.gates(mesh.h),
    }
    return (1 if fails.items else 0), payload


def run_carleman(cfg, out: Path, seed: int, strict: bool) -> tuple[int, dict]:
    mesh = _mesh_from(cfg)
    tree = _tree_from(cfg)
    _check_budget(cfg, mesh, tree)
    params = _params_from(cfg)
    region = _region_from(cfg, mesh)
    psi = wgt.build_psi(mesh, region)
    gamma = msh.unit_coefficients(mesh)
    taus = [float(t) for t in cfg.get("taus", [2.0, 4.0, 8.0, 16.0])]
    if not taus:
        raise ConfigError("taus must be a non-empty list")
    n_samples = int(cfg.get("n_samples", 50))
    alarm = float(cfg.get("alarm_ratio", np.inf))
    fails = _Failures()
    rows = []
    sample_rows = []
    maxima = []
    for tau in taus:
        p = wgt.WeightParams(
            lam=params.lam, tau=tau, m=params.m, delta=params.delta, T=params.T,
            alpha=params.alpha, delta0=params.delta0, eps0=params.eps0,
        )
        w_eval = wgt.weight_fields(p, psi)
        gates = w_eval.gate_report(mesh.h)
        if strict and not gates["gate_sh_le_delta0"]:
            raise GateViolation(f"s h gate violated at tau={tau}")
        rng = np.random.default_rng(seed)
        worst = 0.0
        for sample in range(n_samples):
            w_field = scn.AdaptedField.from_random(
                tree, mesh, mesh.extents_primal(), rng
            )
            mb = cl.manufacture(w_field, gamma, tree)
            fails.check(
                "manufacture_reconstruction",
                mb.reconstruction_residual <= 1e-12,
                f"{mb.reconstruction_residual:.3e}",
            )
            rep = cl.carleman_ratio(mb, w_eval, psi.control_mask, tree)
            fails.check("ratio_finite", rep.ratio is None or np.isfinite(rep.ratio))
            fails.check("no_counterexample", not rep.counterexample_candidate)
            srow = {"tau": tau, "sample": sample, "lhs": rep.lhs, "rhs": rep.rhs,
                    "ratio": rep.ratio}
            srow.update({f"gate::{k}": v for k, v in gates.items()})
            sample_rows.append(srow)
            ratio_alarms = rep.ratio is not None and rep.ratio > alarm
            if rep.counterexample_candidate or ratio_alarms:
                # full field dump so the offending instance can be replayed
                dump = out / f"counterexample_tau{tau:g}_s{sample}.json"
                rpt.write_json(dump, {
                    "report": rep.to_dict(),
                    "w": [lv for lv in mb.w.levels],
                    "f": [lv for lv in mb.f.levels],
                    "g": [lv for lv in mb.g.levels],
                })
            if rep.ratio is not None:
                worst = max(worst, rep.ratio)
        maxima.append(worst)
        row = {"tau": tau, "max_ratio": worst, "n_samples": n_samples}
        row.update({f"gate::{k}": v for k, v in gates.items()})
        rows.append(row)
    rpt.write_csv(out / "carleman_ratios.csv", rows)
    rpt.write_csv(out / "carleman_samples.csv", sample_rows)
    rpt.write_plot_script(
        out / "plot.gp", "carleman_ratios.csv", "tau", "max_ratio",
        "Carleman ratio vs tau",
    )
    peak = int(np.argmax(maxima))
    tail_ok = all(
        b <= a * 1.10 for a, b in zip(maxima[peak:], maxima[peak + 1 :])
    )
    fails.check("tail_non_increasing_beyond_peak", tail_ok)
    payload = {
        "suite": "carleman",
        "tree": tree.manifest(),
        "taus": taus,
        "max_ratios": maxima,
        "peak_tau": taus[peak],
        "peak_is_last_grid_point": peak == len(taus) - 1,
        "failures": fails.items,
    }
    return (1 if fails.items else 0), payload


def _build_problem(cfg, mesh, rng, nonlin=None):
    region = _region_from(cfg, mesh)
    pts = mesh.points(mesh.extents_primal())
    mask = np.ones(pts.shape[:-1], dtype=bool)
    for k, (lo, hi) in enumerate(region):
        mask &= (pts[..., k] > lo) & (pts[..., k] < hi)
    gamma = msh.unit_coefficients(mesh)
    y0 = _y0_from(cfg, mesh, rng)
    return fwd.ForwardProblem(
        mesh=mesh, gamma=gamma, control_mask=mask, y0=y0, nonlin=nonlin
    ), region


def run_hum(cfg, out: Path, seed: int, strict: bool) -> tuple[int, dict]:
    mesh = _mesh_from(cfg)
    tree = _tree_from(cfg)
    _check_budget(cfg, mesh, tree)
    rng = np.random.default_rng(seed)
    params = _params_from(cfg)
    problem, region = _build_problem(cfg, mesh, rng)
    psi = wgt.build_psi(mesh, region)
    w = wgt.weight_fields(params, psi)
    epsilon = cfg.get("epsilon", 1.0)
    hum_cfg = hum.HumConfig(
        weights=w, epsilon=epsilon,
        cg_tol=float(cfg.get("cg_tol", 1e-9)),
        cg_max_iter=int(cfg.get("cg_max_iter", 800)),
    )
    sol = hum.minimize_j(problem, tree, hum_cfg)
    if strict and not all(
        sol.gates[k] for k in ("gate_sh_le_delta0", "gate_sTh_le_eps0")
    ):
        raise GateViolation("weight gates violated in strict mode")
    fails = _Failures()
    fails.check("cg_converged", sol.converged, f"{sol.iterations} iterations")
    res = hum.kkt_formula_residual(sol, problem, tree, w)
    fails.check("kkt_u", res["u_rel"] <= 1e-6, f"{res['u_rel']:.3e}")
    fails.check("kkt_U", res["U_rel"] <= 1e-6, f"{res['U_rel']:.3e}")
    fails.check(
        "ito_duality", sol.duality_residual <= 1e-8,
        f"{sol.duality_residual:.3e}",
    )
    report = hum.verify_linear_bounds(sol, problem, tree, w)
    row = {
        "h": mesh.h, "tau": params.tau, "lambda": params.lam,
        "delta": params.delta, "epsilon": sol.epsilon,
        "E_yT": sol.j_terms["terminal"], "J_eps": sol.j_value,
        "kkt_res": sol.kkt_residual, "kkt_u_rel": res["u_rel"],
        "kkt_U_rel": res["U_rel"], "duality_res": sol.duality_residual,
        "energy_ratio": report.energy_ratio,
        "gradient_ratio": report.gradient_ratio,
        "c_measured": report.c_measured,
    }
    row.update({f"gate::{k}": v for k, v in sol.gates.items()})
    rpt.write_csv(out / "hum_run.csv", [row])
    if cfg.get("export_trajectory"):
        fwd.trajectory_csv(sol.y, tree, out / "trajectory.csv")
    payload = {
        "suite": "hum",
        "tree": tree.manifest(),
        "epsilon": sol.epsilon,
        "iterations": sol.iterations,
        "j_terms": sol.j_terms,
        "kkt": res,
        "inequalities": report.to_dict(),
        "failures": fails.items,
    }
    return (1 if fails.items else 0), payload


def run_semilinear(cfg, out: Path, seed: int, strict: bool) -> tuple[int, dict]:
    mesh = _mesh_from(cfg)
    tree = _tree_from(cfg)
    _check_budget(cfg, mesh, tree)
    rng = np.random.default_rng(seed)
    params = _params_from(cfg)
    nonlin = _nonlin_from(cfg, mesh, rng) or fwd.NonlinearitySpec(
        F1=lambda t, p, a, b: 0.1 * a, L1=0.1 + 1e-12
    )
    problem, region = _build_problem(cfg, mesh, rng, nonlin=nonlin)
    psi = wgt.build_psi(mesh, region)
    w = wgt.weight_fields(params, psi)
    hum_cfg = hum.HumConfig(
        weights=w, epsilon=cfg.get("epsilon", 1e-2),
        cg_tol=float(cfg.get("cg_tol", 1e-9)),
        cg_max_iter=int(cfg.get("cg_max_iter", 800)),
    )
    result = fp.picard_iterate(
        problem, tree, hum_cfg,
        tol=float(cfg.get("tol", 1e-8)),
        max_iter=int(cfg.get("max_iter", 30)),
    )
    fails = _Failures()
    rep = result.report
    fails.check("picard_converged", rep.converged, f"{rep.iterations} sweeps")
    fails.check(
        "contraction_factor_lt_1", rep.contraction_factor < 1.0,
        f"{rep.contraction_factor:.3e}",
    )
    if rep.resim_residual is not None:
        fails.check(
            "f2_substitution", rep.resim_residual <= 1e-8,
            f"{rep.resim_residual:.3e}",
        )
    row = fp.decay_certificate(result, problem, tree).to_dict()
    rpt.write_csv(out / "semilinear_run.csv", [row])
    payload = {
        "suite": "semilinear",
        "tree": tree.manifest(),
        "iterations": rep.iterations,
        "increments": rep.increments,
        "contraction_factor": rep.contraction_factor,
        "tau_used": rep.tau_used,
        "tau_escalations": rep.tau_escalations,
        "certificate": row,
        "failures": fails.items,
    }
    return (1 if fails.items else 0), payload


def run_decay_sweep(cfg, out: Path, seed: int, strict: bool) -> tuple[int, dict]:
    Ns = [int(N) for N in cfg.get("Ns", [])]
    if len(Ns) < 3:
        raise ConfigError("decay sweep needs at least three mesh sizes in Ns")
    coupling = cfg.get("coupling", {})
    eps0 = float(coupling.get("eps0", 0.35))
    base = _params_from(cfg)
    tree_cfg = _tree_from(cfg)
    rows = []
    fails = _Failures()
    for N in Ns:
        mesh = msh.MeshSpec(int(cfg.get("mesh", {}).get("n", 1)), N)
        tree = scn.ScenarioTree(K=tree_cfg.K, T=tree_cfg.T)
        _check_budget(cfg, mesh, tree)
        rng = np.random.default_rng(seed)
        delta = fp.coupled_delta(mesh.h, eps0, base.tau, base.m, base.T)
        params = wgt.WeightParams(
            lam=base.lam, tau=base.tau, m=base.m, delta=delta, T=base.T,
            alpha=base.alpha, delta0=base.delta0, eps0=max(base.eps0, eps0),
        )
        nonlin = _nonlin_from(cfg, mesh, rng)
        problem, region = _build_problem(cfg, mesh, rng, nonlin=nonlin)
        psi = wgt.build_psi(mesh, region)
        w = wgt.weight_fields(params, psi)
        hum_cfg = hum.HumConfig(
            weights=w, epsilon=cfg.get("epsilon", "tight"),
            cg_tol=float(cfg.get("cg_tol", 1e-9)),
            cg_max_iter=int(cfg.get("cg_max_iter", 1200)),
        )
        if nonlin is None:
            sol = hum.minimize_j(problem, tree, hum_cfg)
            hn = mesh.h**mesh.n
            y0n = float(hn * (problem.y0**2).sum())
            row = fp.DecayRow(
                h=mesh.h, delta=delta, tau=params.tau, lam=params.lam,
                ratio_T=sol.j_terms["terminal"] / y0n,
                u_cost=sol.controls.u_cost, U_cost=sol.controls.U_cost,
                control_bound_ratio=0.0, uncontrolled_ratio=None,
                gates=w.gate_report(mesh.h),
            ).to_dict()
        else:
            result = fp.picard_iterate(
                problem, tree, hum_cfg, tol=float(cfg.get("tol", 1e-8))
            )
            fails.check(f"picard_converged_N{N}", result.report.converged)
            row = fp.decay_certificate(
                result, problem, tree, compare_uncontrolled=False
            ).to_dict()
        if strict and not row["gate::gate_sTh_le_eps0"]:
            raise GateViolation(f"coupling gate violated at N={N}")
        rows.append(row)
    rpt.write_csv(out / "decay_table.csv", rows)
    rpt.write_plot_script(
        out / "plot.gp", "decay_table.csv", "h", "ratio_T",
        "terminal ratio vs h",
    )
    # only rows with all three parameter gates held enter the fit
    primary_gates = (
        "gate::gate_sh_le_delta0",
        "gate::gate_tauh_theta_le_1",
        "gate::gate_sTh_le_eps0",
    )
    fit_rows = [
        r for r in rows
        if all(r[k] for k in primary_gates) and r["ratio_T"] > 0
    ]
    if len(fit_rows) >= 3:
        kappa, intercept, r2, flag = fit_kappa(
            [(r["h"], r["ratio_T"]) for r in fit_rows]
        )
    else:
        kappa = intercept = r2 = float("nan")
        flag = "undefined: fewer than 3 gated rows"
        fails.check("kappa_fit_defined", False, flag)
    fails.check("kappa_positive", kappa > 0, f"kappa={kappa:.4g} ({flag})")
    fails.check("fit_quality", r2 >= 0.9, f"r2={r2:.4g}")
    ratios = [r["ratio_T"] for r in rows]
    fails.check(
        "monotone_decay",
        all(b < a for a, b in zip(ratios, ratios[1:])),
        f"ratios={ratios}",
    )
    payload = {
        "suite": "decay-sweep",
        "kappa_hat": kappa,
        "intercept": intercept,
        "r2": r2,
        "flag": flag,
        "rows": rows,
        "failures": fails.items,
    }
    return (1 if fails.items else 0), payload


def fit_kappa(rows) -> tuple[float, float, float, str]:
    """OLS of -log(ratio) against 1/h: slope kappa, intercept, r^2, flag.

    rows: iterable of (h, ratio) pairs; needs >= 3 rows with positive ratios.
    """
    pts = [(float(h), float(r)) for h, r in rows]
    if len(pts) < 3:
        raise ValueError(f"kappa fit needs >= 3 rows, got {len(pts)}")
    if any(r <= 0 for _, r in pts):
        raise ValueError("kappa fit needs positive terminal ratios")
    x = np.array([1.0 / h for h, _ in pts])
    y = np.array([-math.log(r) for _, r in pts])
    slope, intercept = np.polyfit(x, y, 1)
    pred = slope * x + intercept
    ss_res = float(np.sum((y - pred) ** 2))
    ss_tot = float(np.sum((y - np.mean(y)) ** 2))
    r2 = 1.0 - ss_res / ss_tot if ss_tot > 0 else 1.0
    flag = "ok" if slope > 0 else "no decay"
    if ss_tot == 0:
        flag = "no decay"
        slope = 0.0
    return float(slope), float(intercept), float(r2), flag


SUITES = {
    "operators-check": run_operators_check,
    "carleman": run_carleman,
    "hum": run_hum,
    "semilinear": run_semilinear,
    "decay-sweep": run_decay_sweep,
}


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="phinull", description=__doc__,
        formatter_class=argparse.RawDescriptionHelpFormatter,
    )
    parser.add_argument("subcommand", choices=sorted(SUITES))
    parser.add_argument("--config", required=True, help="JSON config path")
    parser.add_argument("--out", default=".", help="output directory")
    parser.add_argument("--seed", type=int, default=None,
                        help="override the config seed")
    parser.add_argument("--strict-gates", action="store_true",
                        help="refuse runs whose parameter gates are violated")
    args = parser.parse_args(argv)

    out = Path(args.out)
    try:
        cfg = load_config(args.config)
        seed = args.seed if args.seed is not None else int(cfg.get("seed", 0))
        out.mkdir(parents=True, exist_ok=True)
        code, payload = SUITES[args.subcommand](
            cfg, out, seed, args.strict_gates
        )
    except (ConfigError, InfeasibleRegionError, ScaleLimitError, ValueError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except ResourceCapError as exc:
        print(f"resource cap: {exc}", file=sys.stderr)
        return 3
    except GateViolation as exc:
        print(f"gate violation (strict mode): {exc}", file=sys.stderr)
        return 1
    except (SolveError, DivergenceError) as exc:
        print(f"solver failure: {exc}", file=sys.stderr)
        return 1
    payload["seed"] = seed
    payload["exit_code"] = code
    rpt.write_json(out / "report.json", payload)
    for failure in payload.get("failures", []):
        print(f"FAIL {failure}", file=sys.stderr)
    return code


if __name__ == "__main__":
    sys.exit(main())
