"""Numerical evaluation of the backward Carleman estimate and its calculus.

Manufactured solutions.  Given any adapted Dirichlet field w on the tree,

    f_k = (E[w_{k+1}|.] - w_k)/dt + sum_i D_i(gamma_i D_i w_k),
    g_k = E[w_{k+1} dB | .]/dt,

makes  dw + sum_i D_i(gamma_i D_i w) dt = f dt + g dB  exact on the binomial
tree, so both sides of the estimate can be evaluated for arbitrary w.

Conjugated operator.  With r = e^{s phi}, rho = e^{-s phi}, the spatial part
of r P(rho z) decomposes exactly as

    r sum_i D_i(gamma_i D_i(rho z)) = C1(z) + C2(z) + B2(z) + R_h(z)

where  C1 = sum_i r A_i^2 rho D_i(gamma_i D_i z),
       C2 = sum_i gamma_i r D_i^2 rho A_i^2 z,
       B2 = 2 sum_i gamma_i r D_i A_i rho D_i A_i z,
and R_h collects the exact remainders of the discrete product rules,

    R_h = sum_i [ (A_i gamma_i - gamma_i) r D_i^2 rho
                  + D_i gamma_i r A_i D_i rho ] A_i^2 z
        + sum_i 2 (A_i gamma_i - gamma_i) r D_i A_i rho  D_i A_i z
        + sum_i (h^2/4) D_i gamma_i  r D_i^2 rho   D_i A_i z
        + sum_i (h^2/4) D_i gamma_i  r D_i A_i rho D_i^2 z,

whose coefficients are h-small exactly as the analysis requires.  The
bookkeeping terms C4, C5 and B3 = -2 s (Delta_gamma phi) z cancel from this
spatial identity and only enter the commutator remainder

    M_h(z) = C4(z) + C5(z) + B3(z) - R_h(z),

whose measured bound ||M_h z||^2 <= O_lam(1) (s^2 ||z||^2 + h^2 s^2 ||Dz||^2)
is tracked over mesh sweeps.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import mesh as msh
from . import scenario as scn
from . import weights as wgt
from .errors import GateViolation


@dataclass
class ManufacturedBackward:
    """Adapted triple (w, f, g) satisfying the backward operator identity."""

    w: scn.AdaptedField          # levels 0..K, primal values (Dirichlet implied)
    f: scn.AdaptedField          # levels 0..K-1
    g: scn.AdaptedField          # levels 0..K-1
    reconstruction_residual: float = 0.0


def manufacture(
    w: scn.AdaptedField, gamma: msh.CoefficientField, tree: scn.ScenarioTree
) -> ManufacturedBackward:
    """Derive (f, g) from w so the backward identity holds exactly per node."""
    mesh = w.mesh
    K = tree.K
    f_levels, g_levels = [], []
    lap_levels = []
    for k in range(K):
        mean = scn.cond_expectation(w, k)
        slope = scn.martingale_part(w, k)
        lap = _laplacian_level(mesh, gamma, w.levels[k])
        lap_levels.append(lap)
        f_levels.append((mean - w.levels[k]) / tree.dt + lap)
        g_levels.append(slope)
    f = scn.AdaptedField(tree, f_levels, mesh, mesh.extents_primal())
    g = scn.AdaptedField(tree, g_levels, mesh, mesh.extents_primal())
    # self-consistency: step w forward from (f, g) and compare
    worst = 0.0
    scale = max(float(np.max(np.abs(lv), initial=0.0)) for lv in w.levels)
    for k in range(K):
        base = w.levels[k] - tree.dt * lap_levels[k] + tree.dt * f_levels[k]
        rec = np.empty_like(w.levels[k + 1])
        rec[0::2] = base + tree.sqrt_dt * g_levels[k]
        rec[1::2] = base - tree.sqrt_dt * g_levels[k]
        worst = max(worst, float(np.max(np.abs(rec - w.levels[k + 1]), initial=0.0)))
    res = worst / scale if scale > 0 else worst
    return ManufacturedBackward(w=w, f=f, g=g, reconstruction_residual=res)


def _laplacian_level(mesh, gamma, level_vals):
    """sum_i D_i(gamma_i D_i .) of zero-extended states, batched over nodes."""
    out = np.zeros_like(level_vals)
    h2 = mesh.h**2
    for i in range(1, mesh.n + 1):
        ax = i  # axis 0 indexes nodes
        extents = list(mesh.extents_primal())
        extents[i - 1] = msh.DUAL
        gvals = gamma.on_extents(i, extents)
        padded = np.pad(
            level_vals,
            [(0, 0)] + [(1, 1) if a == i - 1 else (0, 0) for a in range(mesh.n)],
            mode="constant",
        )
        lo = [slice(None)] * padded.ndim
        hi = [slice(None)] * padded.ndim
        lo[ax] = slice(0, -1)
        hi[ax] = slice(1, None)
        flux = gvals * (padded[tuple(hi)] - padded[tuple(lo)])
        l2 = [slice(None)] * flux.ndim
        h2i = [slice(None)] * flux.ndim
        l2[ax] = slice(0, -1)
        h2i[ax] = slice(1, None)
        out += (flux[tuple(h2i)] - flux[tuple(l2)]) / h2
    return out


@dataclass
class CarlemanRatioReport:
    lhs_terms: dict
    rhs_terms: dict
    lhs: float
    rhs: float
    ratio: float | None  # None when degenerate (0/0)
    degenerate: bool
    counterexample_candidate: bool  # nonzero LHS against zero RHS
    gates: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        out = {"lhs": self.lhs, "rhs": self.rhs, "ratio": self.ratio,
               "degenerate": self.degenerate,
               "counterexample_candidate": self.counterexample_candidate}
        out.update({f"lhs::{k}": v for k, v in self.lhs_terms.items()})
        out.update({f"rhs::{k}": v for k, v in self.rhs_terms.items()})
        out.update({f"gate::{k}": v for k, v in self.gates.items()})
        return out


def carleman_ratio(
    mb: ManufacturedBackward,
    weights: wgt.CarlemanWeights,
    control_mask: np.ndarray,
    tree: scn.ScenarioTree,
    strict_gates: bool = False,
) -> CarlemanRatioReport:
    """Both sides of the backward Carleman estimate for a manufactured triple.

    LHS: E int s^3 lam^4 xi^3 e^{2s phi}|w|^2 dt
       + sum_i E int_{Q_i*} s lam^2 xi e^{2s phi}|D_i w|^2 dt
       + E int tau^2 lam^3 e^{2lam(6m+1)} e^{4 tau phi}|w(0)|^2
       + sum_i E int_{M_i*} e^{4 tau phi}|D_i w(0)|^2
    RHS: observation over M0 + f term + g term + h^-2 terminal term.
    A single lam plays the role of both lam and the frozen lam_0.
    """
    mesh = mb.w.mesh
    p = weights.params
    lam = p.lam
    h = mesh.h
    hn = h**mesh.n
    gates = weights.gate_report(h)
    if strict_gates and not gates["gate_sh_le_delta0"]:
        raise GateViolation(
            f"s(t) h = {p.s_max * h:.3g} exceeds delta0 = {p.delta0:.3g}"
        )
    pts = mesh.points(mesh.extents_primal())
    xi = weights.xi_at(pts)
    phi = weights.phi_at(pts)
    dual_pts = [mesh.points(mesh.extents_dual(i)) for i in range(1, mesh.n + 1)]
    xi_d = [weights.xi_at(q) for q in dual_pts]
    phi_d = [weights.phi_at(q) for q in dual_pts]

    w_bulk = grad_bulk = obs = f_term = g_term = 0.0
    for k in range(tree.K):
        t = tree.t(k)
        s = weights.s(t)
        e2s = np.exp(2.0 * s * phi)
        nn = tree.n_nodes(k)
        w_bulk += tree.dt * hn * float(
            (s**3 * lam**4 * xi**3 * e2s * mb.w.levels[k] ** 2).sum()
        ) / nn
        obs += tree.dt * hn * float(
            (s**3 * lam**4 * xi**3 * e2s * control_mask * mb.w.levels[k] ** 2).sum()
        ) / nn
        f_term += tree.dt * hn * float((e2s * mb.f.levels[k] ** 2).sum()) / nn
        for i in range(1, mesh.n + 1):
            e2s_d = np.exp(2.0 * s * phi_d[i - 1])
            dw = _difference_level(mesh, mb.w.levels[k], i)
            grad_bulk += tree.dt * hn * float(
                (s * lam**2 * xi_d[i - 1] * e2s_d * dw**2).sum()
            ) / nn
        g_term += tree.dt * hn * float(
            (s**2 * lam**2 * xi**2 * np.exp(2.0 * s * phi) * mb.g.levels[k] ** 2).sum()
        ) / nn
    # t = 0 terms (single root node)
    e4tau = np.exp(4.0 * p.tau * phi)
    w0 = mb.w.levels[0][0]
    initial_w = hn * float(
        (p.tau**2 * lam**3 * math.exp(2.0 * lam * (6 * p.m + 1)) * e4tau * w0**2).sum()
    )
    initial_grad = 0.0
    for i in range(1, mesh.n + 1):
        e4tau_d = np.exp(4.0 * p.tau * phi_d[i - 1])
        dw0 = _difference_level(mesh, mb.w.levels[0], i)[0]
        initial_grad += hn * float((e4tau_d * dw0**2).sum())
    # terminal term at t = T
    sT = p.s_terminal
    e2sT = np.exp(2.0 * sT * phi)
    terminal = hn * float(
        (e2sT * mb.w.levels[tree.K] ** 2).sum()
    ) / (tree.n_nodes(tree.K) * h**2)

    lhs_terms = {
        "bulk_w": w_bulk, "bulk_grad": grad_bulk,
        "initial_w": initial_w, "initial_grad": initial_grad,
    }
    rhs_terms = {
        "observation": obs, "f_source": f_term, "g_source": g_term,
        "terminal_over_h2": terminal,
    }
    lhs = sum(lhs_terms.values())
    rhs = sum(rhs_terms.values())
    degenerate = lhs == 0.0 and rhs == 0.0
    counterexample = rhs == 0.0 and lhs > 0.0
    ratio = None if rhs == 0.0 else lhs / rhs
    return CarlemanRatioReport(
        lhs_terms=lhs_terms, rhs_terms=rhs_terms, lhs=lhs, rhs=rhs,
        ratio=ratio, degenerate=degenerate,
        counterexample_candidate=counterexample, gates=gates,
    )


def _difference_level(mesh: msh.MeshSpec, level_vals: np.ndarray, i: int) -> np.ndarray:
    """D_i of zero-extended primal node states, on dual-i, batched."""
    ax = i
    padded = np.pad(
        level_vals,
        [(0, 0)] + [(1, 1) if a == i - 1 else (0, 0) for a in range(mesh.n)],
        mode="constant",
    )
    lo = [slice(None)] * padded.ndim
    hi = [slice(None)] * padded.ndim
    lo[ax] = slice(0, -1)
    hi[ax] = slice(1, None)
    return (padded[tuple(hi)] - padded[tuple(lo)]) / mesh.h


def tau_sweep_max_ratios(
    mesh: msh.MeshSpec,
    gamma: msh.CoefficientField,
    psi: wgt.PsiField,
    taus,
    base_params: wgt.WeightParams,
    tree: scn.ScenarioTree,
    n_samples: int = 50,
    seed: int = 0,
) -> list[float]:
    """Max Carleman ratio over shared random w, per tau (same draws each tau)."""
    out = []
    for tau in taus:
        p = base_params
        params = wgt.WeightParams(
            lam=p.lam, tau=float(tau), m=p.m, delta=p.delta, T=p.T,
            alpha=p.alpha, delta0=p.delta0, eps0=p.eps0,
        )
        w_eval = wgt.weight_fields(params, psi)
        rng = np.random.default_rng(seed)
        worst = 0.0
        for _ in range(n_samples):
            w = scn.AdaptedField.from_random(
                tree, mesh, mesh.extents_primal(), rng
            )
            mb = manufacture(w, gamma, tree)
            rep = carleman_ratio(mb, w_eval, psi.control_mask, tree)
            if rep.ratio is not None:
                worst = max(worst, rep.ratio)
        out.append(worst)
    return out


# ---------------------------------------------------------------------------
# conjugated-operator identity

def _ratio_field(weights, t, i, taps, pts):
    """r(x) * Stencil_i[rho](x) via exponent differences, at arbitrary points."""
    return weights.r_times_stencil_rho(t, i, taps, pts)


def conjugation_decomposition(
    z: msh.GridFunction,
    weights: wgt.CarlemanWeights,
    gamma: msh.CoefficientField,
    t: float,
) -> dict:
    """Max-norm residual of the exact spatial identity (see module docstring).

    The left side composes the raw mesh operators on the literal product
    rho*z; the right side assembles C1 + C2 + B2 + R_h from the named
    stencil factors.  Both sides are invariant under shifting phi by a
    constant, and the left side is evaluated under the shift phi - max(phi)
    so the materialized rho stays inside float range.
    """
    mesh = z.mesh
    if any(e != msh.CLOSED for e in z.extents):
        raise msh.MeshTagError("conjugation check expects a closure grid function")
    if not z.boundary_is_zero():
        raise msh.MeshTagError("z must carry exact Dirichlet zeros")
    h = mesh.h
    s = weights.s(t)
    pts_p = mesh.points(mesh.extents_primal())
    pts_c = mesh.points(mesh.extents_closure())
    shift = weights.phi_max

    # left side: r * sum_i D_i(gamma_i D_i(rho z)) by raw composition
    rho_shift = np.exp(-s * (weights.phi_at(pts_c) - shift))
    rz = msh.GridFunction(mesh, rho_shift * z.values, mesh.extents_closure())
    lap = msh.div_form_laplacian(rz, gamma)
    r_shift = np.exp(s * (weights.phi_at(pts_p) - shift))
    lhs = r_shift * lap.values

    # right side pieces; weight factors by exponent-difference stencils
    a2t = wgt.a2_taps()
    d2t = wgt.d2_taps(h)
    adt = wgt.ad_taps(h)
    rhs = np.zeros_like(lhs)
    for i in range(1, mesh.n + 1):
        rA2rho = _ratio_field(weights, t, i, a2t, pts_p)
        rD2rho = _ratio_field(weights, t, i, d2t, pts_p)
        rADrho = _ratio_field(weights, t, i, adt, pts_p)
        gam_p = gamma.at(i, pts_p)
        # z stencils (zero-extension via the closure input)
        d_gd = msh.interior_part(
            msh.difference(_flux(z, gamma, i), i)
        ).values  # D_i(gamma_i D_i z)
        a2z = msh.interior_part(msh.average(msh.average(z, i), i)).values
        adz = msh.interior_part(msh.average(msh.difference(z, i), i)).values
        d2z = msh.interior_part(msh.difference(msh.difference(z, i), i)).values
        # gamma stencils at primal points
        extents_d = list(mesh.extents_closure())
        extents_d[i - 1] = msh.DUAL
        gam_dual = msh.GridFunction(
            mesh, gamma.on_extents(i, extents_d), tuple(extents_d)
        )
        a_gam = msh.interior_part(msh.average(gam_dual, i)).values
        d_gam = msh.interior_part(msh.difference(gam_dual, i)).values
        c1 = rA2rho * d_gd
        c2 = gam_p * rD2rho * a2z
        b2 = 2.0 * gam_p * rADrho * adz
        r_h = (
            ((a_gam - gam_p) * rD2rho + d_gam * rADrho) * a2z
            + 2.0 * (a_gam - gam_p) * rADrho * adz
            + 0.25 * h**2 * d_gam * rD2rho * adz
            + 0.25 * h**2 * d_gam * rADrho * d2z
        )
        rhs += c1 + c2 + b2 + r_h
    scale = float(np.max(np.abs(lhs)) + np.max(np.abs(rhs)))
    resid = float(np.max(np.abs(lhs - rhs)))
    return {
        "residual": resid / scale if scale > 0 else 0.0,
        "absolute": resid,
        "scale": scale,
    }


def _flux(z: msh.GridFunction, gamma: msh.CoefficientField, i: int) -> msh.GridFunction:
    d = msh.difference(z, i)
    g = gamma.on_extents(i, d.extents)
    return msh.GridFunction(z.mesh, g * d.values, d.extents)


def commutator_remainder(
    z: msh.GridFunction,
    weights: wgt.CarlemanWeights,
    gamma: msh.CoefficientField,
    t: float,
) -> np.ndarray:
    """M_h(z) = C4(z) + C5(z) + B3(z) - R_h(z) on the primal mesh."""
    mesh = z.mesh
    h = mesh.h
    s = weights.s(t)
    pts_p = mesh.points(mesh.extents_primal())
    d2t = wgt.d2_taps(h)
    adt = wgt.ad_taps(h)
    out = np.zeros(mesh.shape(mesh.extents_primal()))
    for i in range(1, mesh.n + 1):
        # beta = r D_i^2 rho as an analytic closure, sampled where needed
        beta = lambda q: weights.r_times_stencil_rho(t, i, d2t, q)
        az = msh.average(z, i)  # dual-i (closed elsewhere)
        extents_d = az.extents
        gam_d = gamma.on_extents(i, extents_d)
        dbeta_d = _half_diff(beta, mesh, extents_d, i)
        # C4 = (h^2/4) D_i[gamma_i D_i(beta) A_i z]
        c4_arg = msh.GridFunction(mesh, gam_d * dbeta_d * az.values, extents_d)
        c4 = 0.25 * h**2 * msh.interior_part(msh.difference(c4_arg, i)).values
        # C5 = (h^2/4) D_i[D_i(gamma_i beta) A_i z]
        gb = lambda q: gamma.at(i, q) * beta(q)
        dgb_d = _half_diff(gb, mesh, extents_d, i)
        c5_arg = msh.GridFunction(mesh, dgb_d * az.values, extents_d)
        c5 = 0.25 * h**2 * msh.interior_part(msh.difference(c5_arg, i)).values
        out += c4 + c5
        # R_h contribution of direction i
        rD2rho = weights.r_times_stencil_rho(t, i, d2t, pts_p)
        rADrho = weights.r_times_stencil_rho(t, i, adt, pts_p)
        gam_p = gamma.at(i, pts_p)
        a2z = msh.interior_part(msh.average(msh.average(z, i), i)).values
        adz = msh.interior_part(msh.average(msh.difference(z, i), i)).values
        d2z = msh.interior_part(msh.difference(msh.difference(z, i), i)).values
        extents_dc = list(mesh.extents_closure())
        extents_dc[i - 1] = msh.DUAL
        gam_dual = msh.GridFunction(
            mesh, gamma.on_extents(i, extents_dc), tuple(extents_dc)
        )
        a_gam = msh.interior_part(msh.average(gam_dual, i)).values
        d_gam = msh.interior_part(msh.difference(gam_dual, i)).values
        r_h = (
            ((a_gam - gam_p) * rD2rho + d_gam * rADrho) * a2z
            + 2.0 * (a_gam - gam_p) * rADrho * adz
            + 0.25 * h**2 * d_gam * rD2rho * adz
            + 0.25 * h**2 * d_gam * rADrho * d2z
        )
        out -= r_h
    # B3 = -2 s (Delta_gamma phi) z with the analytic pure second derivatives
    hess = weights.hess_diag_phi_at(pts_p)
    gam_all = np.stack(
        [gamma.at(i, pts_p) for i in range(1, mesh.n + 1)], axis=-1
    )
    lap_phi = np.sum(gam_all * hess, axis=-1)
    z_int = msh.interior_part(z).values
    out += -2.0 * s * lap_phi * z_int
    return out


def _half_diff(fn, mesh, extents, i):
    """D_i of an analytic closure, sampled at the points of `extents`."""
    pts = mesh.points(extents)
    e = np.zeros(mesh.n)
    e[i - 1] = 0.5 * mesh.h
    return (fn(pts + e) - fn(pts - e)) / mesh.h


def remainder_bound_ratio(
    z_field: scn.AdaptedField,
    weights: wgt.CarlemanWeights,
    gamma: msh.CoefficientField,
    tree: scn.ScenarioTree,
) -> dict:
    """Measured E int |M_h z|^2 dt over s^2 ||z||^2 + h^2 s^2 ||Dz||^2.

    The gate tau h max(theta) <= 1 is recorded; the ratio should stay inside
    a factor-100 band over a mesh sweep at fixed lam.
    """
    mesh = z_field.mesh
    h = mesh.h
    hn = h**mesh.n
    num = den = 0.0
    for k in range(tree.K):
        t = tree.t(k)
        s = weights.s(t)
        nn = tree.n_nodes(k)
        for node in range(nn):
            zvals = np.zeros(mesh.shape(mesh.extents_closure()))
            inner = tuple(slice(1, -1) for _ in range(mesh.n))
            zvals[inner] = z_field.levels[k][node]
            zg = msh.GridFunction(mesh, zvals, mesh.extents_closure())
            mh = commutator_remainder(zg, weights, gamma, t)
            num += tree.dt * hn * float((mh**2).sum()) / nn
        den += tree.dt * hn * s**2 * float((z_field.levels[k] ** 2).sum()) / nn
        for i in range(1, mesh.n + 1):
            dz = _difference_level(mesh, z_field.levels[k], i)
            den += tree.dt * hn * h**2 * s**2 * float((dz**2).sum()) / nn
    gate = weights.params.tau * h * weights.params.theta_max <= 1.0
    ratio = num / den if den > 0 else (0.0 if num == 0 else math.inf)
    return {
        "ratio": ratio,
        "numerator": num,
        "denominator": den,
        "gate_tauh_theta_le_1": bool(gate),
        "degenerate": den == 0.0,
    }
