"""Carleman weight system: psi, xi, phi, theta, s, r = e^{s phi}, rho = e^{-s phi}.

Spatial side.  From an auxiliary profile psi in (0,1] with no critical points
outside an interior box G1 of the control region, set

    xi(x)  = exp(lam * (psi(x) + 6m))
    phi(x) = xi(x) - lam * exp(6 lam (m+1))        (negative for lam >~ 0.26)

Temporal side.  theta is 1 + (1 - 4t/T)^sigma on [0, T/4], constant 1 up to
T/2, rises monotonically (C^2 quintic segment) on [T/2, 3T/4] and equals
(T - t + delta T)^{-m} on the last quarter, so theta(T) = (delta T)^{-m}
stays finite.  s(t) = tau * theta(t), r = e^{s phi}, rho = e^{-s phi}.

Scale discipline.  For the asymptotic ranges lam > 1, m >= 1 the offset
lam*e^{6 lam (m+1)} exceeds e^12, so e^{s phi} leaves double-precision range
for every admissible (tau, theta); those parameters are usable only through
the exponent-difference evaluators below (r * stencil(rho) needs just
s * (phi(x) - phi(x'))).  Pipelines that must materialize rho^2 run at
sub-threshold lam, m and carry an asymptotic_range gate in every report.  The
weight_fields constructor guards materialization and raises ScaleLimitError
naming the dominating parameter when 2 * s_max * max|phi| would overflow.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import mesh as msh
from .errors import InfeasibleRegionError, ScaleLimitError

EXP_LIMIT = 700.0  # |exponent| budget for any materialized e^{2 s phi}


@dataclass(frozen=True)
class WeightParams:
    """Scalar weight parameters (lam, tau, m, delta, T) plus the gate bounds.

    The asymptotic theory wants lam > 1, m >= 1, tau >= 1 and then
    sigma = tau lam^2 e^{lam(6m-4)} > 2 automatically; desk-scale runs may
    sit below those thresholds (see module docstring), so the constructor
    only hard-rejects structurally broken inputs and `strict=True` restores
    the full assertions.  alpha is the required gradient floor for psi,
    delta0 / eps0 bound the two gates s(t)h <= delta0 and
    tau (delta T)^{-m} h <= eps0, which are recorded with every report.
    """

    lam: float
    tau: float
    m: float
    delta: float
    T: float = 1.0
    alpha: float = 1e-3
    delta0: float = 2.0
    eps0: float = 2.0
    strict: bool = False

    def __post_init__(self):
        if self.lam <= 0 or self.tau <= 0 or self.m <= 0:
            raise ValueError("lam, tau, m must be positive")
        if not 0 < self.delta < 0.5:
            raise ValueError(f"delta must lie in (0, 1/2), got {self.delta}")
        if self.T <= 0:
            raise ValueError("horizon T must be positive")
        if self.T * (0.25 + self.delta) > 1.0 + 1e-12:
            raise ValueError(
                "theta cannot increase on [T/2, 3T/4] when T(1/4+delta) > 1; "
                "rescale the horizon (T=1 is the desk default)"
            )
        if self.alpha <= 0:
            raise ValueError("alpha must be positive")
        if self.strict:
            if not (self.lam > 1 and self.m >= 1 and self.tau >= 1):
                raise ValueError(
                    "strict mode requires the asymptotic range lam>1, m>=1, tau>=1"
                )
            if not self.sigma > 2:
                raise ValueError(f"strict mode requires sigma > 2, got {self.sigma}")

    @property
    def sigma(self) -> float:
        return self.tau * self.lam**2 * math.exp(self.lam * (6 * self.m - 4))

    @property
    def theta_max(self) -> float:
        return max(2.0, (self.delta * self.T) ** (-self.m))

    @property
    def s_max(self) -> float:
        return self.tau * self.theta_max

    @property
    def s_terminal(self) -> float:
        return self.tau * (self.delta * self.T) ** (-self.m)

    def gates(self, h: float) -> dict:
        """Gate booleans carried by every downstream report."""
        return {
            "gate_sh_le_delta0": bool(self.s_max * h <= self.delta0),
            "gate_tauh_theta_le_1": bool(self.tau * h * self.theta_max <= 1.0),
            "gate_sTh_le_eps0": bool(self.s_terminal * h <= self.eps0),
            "sigma_gt_2": bool(self.sigma > 2),
            "asymptotic_range": bool(self.lam > 1 and self.m >= 1 and self.tau >= 1),
        }


def asymptotic_range_params(tau: float = 1.0, delta: float = 0.25) -> WeightParams:
    """Smallest admissible asymptotic-range parameters (weight calculus only)."""
    return WeightParams(lam=1.02, tau=tau, m=1.0, delta=delta, strict=True)


def desk_params(
    lam: float = 0.35, tau: float = 2.0, m: float = 0.35, delta: float = 0.25, **kw
) -> WeightParams:
    """Sub-threshold parameters that keep e^{+-2 s phi} in float range."""
    return WeightParams(lam=lam, tau=tau, m=m, delta=delta, **kw)


class ThetaSchedule:
    """Piecewise temporal weight theta with analytic derivatives per piece."""

    def __init__(self, p: WeightParams):
        self.p = p
        T = p.T
        self.t1, self.t2, self.t3 = T / 4, T / 2, 3 * T / 4
        dT = p.delta * T
        v1 = (T / 4 + dT) ** (-p.m)
        d1 = p.m * (T / 4 + dT) ** (-p.m - 1)
        a1 = p.m * (p.m + 1) * (T / 4 + dT) ** (-p.m - 2)
        dt_seg = self.t3 - self.t2
        # quintic Hermite on u in [0,1]: value/slope/curvature (1,0,0) -> (v1,d1,a1)
        rhs = np.array(
            [v1 - 1.0, d1 * dt_seg, a1 * dt_seg**2],
            dtype=float,
        )
        A = np.array([[1, 1, 1], [3, 4, 5], [6, 12, 20]], dtype=float)
        self._c345 = np.linalg.solve(A, rhs)
        self._seg_len = dt_seg
        us = np.linspace(0.0, 1.0, 201)
        if np.min(self._dquintic(us)) < -1e-12:
            raise ValueError(
                "quintic theta segment is not monotone for these parameters"
            )

    def junction_mismatch(self) -> dict:
        """One-sided derivative gaps at the interpolant junctions (relative)."""
        p = self.p
        seg = self._seg_len
        out = {}
        # T/2: constant piece (1, 0, 0) vs quintic at u = 0
        left = (1.0, 0.0, 0.0)
        right = (self._quintic(0.0), self._dquintic(0.0) / seg, self._ddquintic(0.0) / seg**2)
        out["T/2"] = tuple(
            abs(a - b) / (1.0 + abs(a) + abs(b)) for a, b in zip(left, right)
        )
        # 3T/4: quintic at u = 1 vs the terminal power-law piece
        dT = p.delta * p.T
        tail = (
            (p.T / 4 + dT) ** (-p.m),
            p.m * (p.T / 4 + dT) ** (-p.m - 1.0),
            p.m * (p.m + 1.0) * (p.T / 4 + dT) ** (-p.m - 2.0),
        )
        quin = (self._quintic(1.0), self._dquintic(1.0) / seg, self._ddquintic(1.0) / seg**2)
        out["3T/4"] = tuple(
            abs(a - b) / (1.0 + abs(a) + abs(b)) for a, b in zip(quin, tail)
        )
        return out

    def _quintic(self, u):
        c3, c4, c5 = self._c345
        return 1.0 + c3 * u**3 + c4 * u**4 + c5 * u**5

    def _dquintic(self, u):
        c3, c4, c5 = self._c345
        return 3 * c3 * u**2 + 4 * c4 * u**3 + 5 * c5 * u**4

    def _ddquintic(self, u):
        c3, c4, c5 = self._c345
        return 6 * c3 * u + 12 * c4 * u**2 + 20 * c5 * u**3

    def _check(self, t: float) -> float:
        if t < -1e-12 or t > self.p.T + 1e-12:
            raise ValueError(f"t={t} outside [0, T={self.p.T}]")
        return min(max(t, 0.0), self.p.T)

    def value(self, t: float) -> float:
        t = self._check(t)
        p = self.p
        if t <= self.t1:
            return 1.0 + (1.0 - 4.0 * t / p.T) ** p.sigma
        if t <= self.t2:
            return 1.0
        if t <= self.t3:
            return float(self._quintic((t - self.t2) / self._seg_len))
        return (p.T - t + p.delta * p.T) ** (-p.m)

    def d1(self, t: float) -> float:
        t = self._check(t)
        p = self.p
        if t < self.t1:
            return -(4.0 * p.sigma / p.T) * (1.0 - 4.0 * t / p.T) ** (p.sigma - 1.0)
        if t <= self.t2:
            return 0.0
        if t <= self.t3:
            return float(self._dquintic((t - self.t2) / self._seg_len)) / self._seg_len
        return p.m * (p.T - t + p.delta * p.T) ** (-p.m - 1.0)

    def d2(self, t: float) -> float:
        t = self._check(t)
        p = self.p
        if t < self.t1:
            return (16.0 * p.sigma * (p.sigma - 1.0) / p.T**2) * (
                1.0 - 4.0 * t / p.T
            ) ** (p.sigma - 2.0)
        if t <= self.t2:
            return 0.0
        if t <= self.t3:
            return (
                float(self._ddquintic((t - self.t2) / self._seg_len))
                / self._seg_len**2
            )
        return p.m * (p.m + 1.0) * (p.T - t + p.delta * p.T) ** (-p.m - 2.0)


def theta_eval(t: float, p: WeightParams) -> tuple[float, float, float]:
    """theta(t) and its first two derivatives (analytic per piece)."""
    sched = ThetaSchedule(p)
    return sched.value(t), sched.d1(t), sched.d2(t)


def _bump_factory(center: np.ndarray, radii: np.ndarray):
    """C^infty bump supported on the box center +- radii, normalized to 1."""

    def fac(u):
        out = np.zeros_like(u)
        inside = np.abs(u) < 1.0 - 1e-12
        ui = u[inside]
        out[inside] = np.exp(1.0 - 1.0 / (1.0 - ui**2))
        return out

    def dfac(u):
        out = np.zeros_like(u)
        inside = np.abs(u) < 1.0 - 1e-12
        ui = u[inside]
        g = np.exp(1.0 - 1.0 / (1.0 - ui**2))
        out[inside] = g * (-2.0 * ui / (1.0 - ui**2) ** 2)
        return out

    def ddfac(u):
        out = np.zeros_like(u)
        inside = np.abs(u) < 1.0 - 1e-12
        ui = u[inside]
        q = 1.0 - ui**2
        g = np.exp(1.0 - 1.0 / q)
        first = -2.0 * ui / q**2
        out[inside] = g * (first**2 - 2.0 / q**2 - 8.0 * ui**2 / q**3)
        return out

    def value(pts):
        u = (pts - center) / radii
        prod = np.ones(pts.shape[:-1])
        for k in range(pts.shape[-1]):
            prod = prod * fac(u[..., k])
        return prod

    def grad(pts):
        u = (pts - center) / radii
        facs = [fac(u[..., k]) for k in range(pts.shape[-1])]
        out = []
        for k in range(pts.shape[-1]):
            g = dfac(u[..., k]) / radii[k]
            for j in range(pts.shape[-1]):
                if j != k:
                    g = g * facs[j]
            out.append(g)
        return np.stack(out, axis=-1)

    def hess_diag(pts):
        u = (pts - center) / radii
        facs = [fac(u[..., k]) for k in range(pts.shape[-1])]
        out = []
        for k in range(pts.shape[-1]):
            g = ddfac(u[..., k]) / radii[k] ** 2
            for j in range(pts.shape[-1]):
                if j != k:
                    g = g * facs[j]
            out.append(g)
        return np.stack(out, axis=-1)

    return value, grad, hess_diag


class _SineBase:
    """Product profile prod_i sin(pi x_i^{a_i}) with its unique max at `center`.

    a_i = ln(1/2)/ln(c_i) places the only interior critical point at c; for a
    centered region (c_i = 1/2) this is the plain product of sines.  Outside
    [0,1] the factors are extended by odd reflection (only h-neighborhoods of
    the boundary are ever sampled there).
    """

    def __init__(self, center: np.ndarray):
        self.a = np.log(0.5) / np.log(center)

    def _f(self, t, a):
        t = np.asarray(t, dtype=float)
        out = np.empty_like(t)
        main = (t >= 0.0) & (t <= 1.0)
        out[main] = np.sin(np.pi * np.clip(t[main], 0.0, 1.0) ** a)
        below = t < 0.0
        out[below] = -np.sin(np.pi * np.abs(t[below]) ** a)
        above = t > 1.0
        out[above] = -np.sin(np.pi * np.clip(2.0 - t[above], 0.0, 1.0) ** a)
        return out

    def _df(self, t, a):
        t = np.asarray(t, dtype=float)
        tt = np.clip(np.abs(t), 1e-300, None)
        tt = np.where(t > 1.0, np.clip(2.0 - t, 1e-300, None), tt)
        return np.pi * a * tt ** (a - 1.0) * np.cos(np.pi * tt**a)

    def _ddf(self, t, a):
        t = np.asarray(t, dtype=float)
        tt = np.clip(np.abs(t), 1e-300, None)
        tt = np.where(t > 1.0, np.clip(2.0 - t, 1e-300, None), tt)
        s = np.where((t < 0.0) | (t > 1.0), -1.0, 1.0)
        w = np.pi * a * tt ** (a - 1.0)
        return s * (np.pi * a * (a - 1.0) * tt ** (a - 2.0) * np.cos(np.pi * tt**a)
                    - w**2 * np.sin(np.pi * tt**a))

    def value(self, pts):
        prod = np.ones(pts.shape[:-1])
        for k in range(pts.shape[-1]):
            prod = prod * self._f(pts[..., k], self.a[k])
        return prod

    def grad(self, pts):
        facs = [self._f(pts[..., k], self.a[k]) for k in range(pts.shape[-1])]
        out = []
        for k in range(pts.shape[-1]):
            g = self._df(pts[..., k], self.a[k])
            for j in range(pts.shape[-1]):
                if j != k:
                    g = g * facs[j]
            out.append(g)
        return np.stack(out, axis=-1)

    def hess_diag(self, pts):
        facs = [self._f(pts[..., k], self.a[k]) for k in range(pts.shape[-1])]
        out = []
        for k in range(pts.shape[-1]):
            g = self._ddf(pts[..., k], self.a[k])
            for j in range(pts.shape[-1]):
                if j != k:
                    g = g * facs[j]
            out.append(g)
        return np.stack(out, axis=-1)


@dataclass
class PsiField:
    """Auxiliary profile psi with its control/observation boxes and gradient floor."""

    mesh: msh.MeshSpec
    psi: msh.GridFunction  # closure samples
    fn: Callable  # psi at arbitrary points
    grad_fn: Callable  # analytic gradient
    hess_diag_fn: Callable  # analytic pure second derivatives
    control_box: tuple  # G0 as ((lo, hi), ...) per axis
    interior_box: tuple  # G1, strictly inside G0
    control_mask: np.ndarray  # M0 = G0 cap M, boolean on primal
    interior_mask: np.ndarray  # G1 cap M, boolean on primal
    grad_floor: float  # measured min |grad psi| over M \ G1

    def gradient_at(self, pts: np.ndarray) -> np.ndarray:
        return self.grad_fn(pts)


def _box_mask(mesh: msh.MeshSpec, box) -> np.ndarray:
    pts = mesh.points(mesh.extents_primal())
    mask = np.ones(pts.shape[:-1], dtype=bool)
    for k, (lo, hi) in enumerate(box):
        mask &= (pts[..., k] > lo) & (pts[..., k] < hi)
    return mask


def build_psi(
    mesh: msh.MeshSpec,
    control_box: Sequence[tuple[float, float]],
    bump_amplitude: float = 0.5,
    required_floor: float | None = None,
) -> PsiField:
    """Construct psi: 0 on the boundary, max 1 inside G1, no flat spots off G1.

    The base profile is the warped product sine of _SineBase (reducing to
    prod sin(pi x_i) for a centered control box), sharpened by a compactly
    supported bump on G1 and normalized to max exactly 1 at the G1 center.
    G1 is the control box shrunk by 2h per side; a box thinner than that is
    rejected as infeasible.
    """
    h = mesh.h
    if len(control_box) != mesh.n:
        raise InfeasibleRegionError(
            f"control box needs {mesh.n} axis intervals, got {len(control_box)}"
        )
    interior_box = []
    for lo, hi in control_box:
        if not (0.0 <= lo < hi <= 1.0):
            raise InfeasibleRegionError(f"invalid interval ({lo}, {hi})")
        if hi - lo <= 4.0 * h:
            raise InfeasibleRegionError(
                f"control interval ({lo}, {hi}) spans <= 4 cells at h={h:.4g}; "
                "no interior observation box fits"
            )
        # shrink by 2h per side, capped at a sixth of the width so a coarse
        # mesh does not squeeze the bump into a needle (steep psi wrecks the
        # exponent budget of the weight stencils)
        shrink = min(2.0 * h, (hi - lo) / 6.0)
        interior_box.append((lo + shrink, hi - shrink))
    interior_box = tuple(interior_box)
    control_mask = _box_mask(mesh, control_box)
    if not control_mask.any():
        raise InfeasibleRegionError("control box contains no primal mesh point")
    center = np.array([(lo + hi) / 2 for lo, hi in interior_box])
    radii = np.array([(hi - lo) / 2 for lo, hi in interior_box])

    base = _SineBase(center)
    bump_v, bump_g, bump_h = _bump_factory(center, radii)
    amp = float(bump_amplitude)
    norm = 1.0 + amp  # base and bump both peak at exactly 1 at the center

    def fn(pts):
        return (base.value(pts) + amp * bump_v(pts)) / norm

    def grad_fn(pts):
        return (base.grad(pts) + amp * bump_g(pts)) / norm

    def hess_diag_fn(pts):
        return (base.hess_diag(pts) + amp * bump_h(pts)) / norm

    psi = msh.from_callable(mesh, fn, mesh.extents_closure())
    # clean boundary: the analytic profile vanishes there up to roundoff
    for ax in range(mesh.n):
        for idx in (0, -1):
            sl = [slice(None)] * mesh.n
            sl[ax] = idx
            psi.values[tuple(sl)] = 0.0

    interior_mask = _box_mask(mesh, interior_box)
    # measured floor: centered differences of the sampled closure values
    grad_sq = np.zeros(mesh.shape(mesh.extents_primal()))
    for i in range(1, mesh.n + 1):
        comp = msh.interior_part(msh.average(msh.difference(psi, i), i))
        grad_sq += comp.values**2
    outside = ~interior_mask
    grad_floor = float(np.sqrt(np.min(grad_sq[outside]))) if outside.any() else np.inf

    inner = psi.values[tuple(slice(1, -1) for _ in range(mesh.n))]
    if np.any(inner <= 0.0) or np.any(inner > 1.0 + 1e-12):
        raise InfeasibleRegionError("psi construction left values outside (0, 1]")
    if grad_floor <= 0.0:
        raise InfeasibleRegionError(
            "psi has a flat spot outside the observation box; move/widen G0"
        )
    if required_floor is not None and grad_floor < required_floor:
        raise InfeasibleRegionError(
            f"measured gradient floor {grad_floor:.3g} below required "
            f"{required_floor:.3g}"
        )
    return PsiField(
        mesh=mesh,
        psi=psi,
        fn=fn,
        grad_fn=grad_fn,
        hess_diag_fn=hess_diag_fn,
        control_box=tuple(tuple(b) for b in control_box),
        interior_box=interior_box,
        control_mask=control_mask,
        interior_mask=interior_mask,
        grad_floor=grad_floor,
    )


class CarlemanWeights:
    """Evaluators for xi, phi, theta, s, r, rho tied to one (params, psi) pair.

    rho is always computed as e^{-s phi}, never as 1/r, and materializing
    either is guarded by the construction-time range check.  The stencil
    ratio helpers (r_times_stencil_rho & friends) only ever form exponent
    differences s*(phi(x)-phi(x')), which is what keeps the asymptotic
    checks usable at asymptotic-range lam.
    """

    def __init__(self, params: WeightParams, psi: PsiField, guard: bool = True):
        self.params = params
        self.psi = psi
        self.mesh = psi.mesh
        self.theta = ThetaSchedule(params)
        self.offset = params.lam * math.exp(6.0 * params.lam * (params.m + 1.0))
        phi_closure = self.phi_at(self.mesh.points(self.mesh.extents_closure()))
        self.phi_max = float(np.max(phi_closure))
        self.phi_min = float(np.min(phi_closure))
        self.phi_negative = self.phi_max < 0.0
        if guard:
            worst = 2.0 * params.s_max * max(abs(self.phi_min), abs(self.phi_max))
            if worst > EXP_LIMIT:
                blame = "tau" if params.s_max > 4.0 else "lam/m"
                raise ScaleLimitError(
                    f"2*s_max*max|phi| = {worst:.3g} exceeds the exp range; "
                    f"reduce {blame} (s_max={params.s_max:.3g}, "
                    f"max|phi|={max(abs(self.phi_min), abs(self.phi_max)):.3g})",
                    offending=blame,
                )

    # -- spatial fields -------------------------------------------------
    def xi_at(self, pts: np.ndarray) -> np.ndarray:
        p = self.params
        return np.exp(p.lam * (self.psi.fn(pts) + 6.0 * p.m))

    def phi_at(self, pts: np.ndarray) -> np.ndarray:
        return self.xi_at(pts) - self.offset

    def xi_field(self, extents) -> np.ndarray:
        return self.xi_at(self.mesh.points(extents))

    def phi_field(self, extents) -> np.ndarray:
        return self.phi_at(self.mesh.points(extents))

    def grad_phi_at(self, pts: np.ndarray) -> np.ndarray:
        # phi' = lam xi psi'
        xi = self.xi_at(pts)
        return self.params.lam * xi[..., None] * self.psi.grad_fn(pts)

    def hess_diag_phi_at(self, pts: np.ndarray) -> np.ndarray:
        # phi'' (pure) = lam xi psi'' + lam^2 xi (psi')^2
        p = self.params
        xi = self.xi_at(pts)[..., None]
        g = self.psi.grad_fn(pts)
        hd = self.psi.hess_diag_fn(pts)
        return p.lam * xi * hd + p.lam**2 * xi * g**2

    # -- temporal fields ------------------------------------------------
    def s(self, t: float) -> float:
        return self.params.tau * self.theta.value(t)

    def log_r(self, t: float, pts: np.ndarray) -> np.ndarray:
        return self.s(t) * self.phi_at(pts)

    def r(self, t: float, pts: np.ndarray) -> np.ndarray:
        return np.exp(self.log_r(t, pts))

    def rho(self, t: float, pts: np.ndarray) -> np.ndarray:
        return np.exp(-self.log_r(t, pts))

    def rho2_field(self, t: float, extents) -> np.ndarray:
        return np.exp(-2.0 * self.log_r(t, self.mesh.points(extents)))

    def r2_field(self, t: float, extents) -> np.ndarray:
        return np.exp(2.0 * self.log_r(t, self.mesh.points(extents)))

    # -- exponent-difference stencils ------------------------------------
    def r_times_stencil_rho(
        self,
        t: float,
        i: int,
        taps: Sequence[tuple[int, float]],
        pts: np.ndarray,
        power: int = 1,
        prefactor: Callable | None = None,
    ) -> np.ndarray:
        """r(x)^power * sum_j c_j g(x_j) rho(x_j)^power at the given points.

        taps are (offset in half-steps along direction i, coefficient); only
        the differences s*(phi(x) - phi(x_j)) are exponentiated, so this is
        usable far outside the materialization range of r and rho.
        """
        s = self.s(t)
        base = self.phi_at(pts)
        out = np.zeros(pts.shape[:-1])
        half = 0.5 * self.mesh.h
        for off, coeff in taps:
            shifted = pts.copy()
            shifted[..., i - 1] += off * half
            term = np.exp(power * s * (base - self.phi_at(shifted)))
            if prefactor is not None:
                term = term * prefactor(shifted)
            out += coeff * term
        return out

    def gate_report(self, h: float) -> dict:
        g = self.params.gates(h)
        g["phi_negative"] = bool(self.phi_negative)
        return g


def weight_fields(params: WeightParams, psi: PsiField, guard: bool = True) -> CarlemanWeights:
    """Build the weight evaluators; raises ScaleLimitError when out of range."""
    return CarlemanWeights(params, psi, guard=guard)


# ---------------------------------------------------------------------------
# stencil taps (half-step offsets along one direction)

A_TAPS = ((1, 0.5), (-1, 0.5))


def d_taps(h: float):
    return ((1, 1.0 / h), (-1, -1.0 / h))


def compose_taps(a, b):
    """Convolution of two half-step tap sets."""
    acc: dict[int, float] = {}
    for o1, c1 in a:
        for o2, c2 in b:
            acc[o1 + o2] = acc.get(o1 + o2, 0.0) + c1 * c2
    return tuple(sorted(acc.items()))


def a2_taps():
    return compose_taps(A_TAPS, A_TAPS)  # ((-2,1/4),(0,1/2),(2,1/4))


def d2_taps(h: float):
    return compose_taps(d_taps(h), d_taps(h))


def ad_taps(h: float):
    return compose_taps(A_TAPS, d_taps(h))


# ---------------------------------------------------------------------------
# asymptotic expansion catalog

ASYMPTOTIC_CATALOG = (
    "avg2_identity",          # r A_i^2 rho - r rho - (h^2/4) r D_i^2 rho == 0
    "xi3_average",            # r^2 A_i(xi^-3 rho^2) - xi^-3 = O((sh)^2)
    "xi3_difference_bound",   # |r^2 D_i(a xi^-3 rho^2)| <= C s lam xi^-2
    "d2rho_leading",          # r D_i^2 rho = s^2 lam^2 xi^2 (d_i psi)^2 + lower order
)


@dataclass
class SlopeReport:
    expr_id: str
    kind: str  # "identity" | "slope2" | "bounded"
    Ns: tuple
    hs: tuple
    residuals: tuple
    slope: float | None
    passed: bool
    detail: dict = field(default_factory=dict)


def _loglog_slope(hs, vals):
    hs = np.asarray(hs, dtype=float)
    vals = np.asarray(vals, dtype=float)
    keep = vals > 0
    if keep.sum() < 2:
        return 0.0
    return float(np.polyfit(np.log(hs[keep]), np.log(vals[keep]), 1)[0])


def asymptotic_check(
    expr_id: str,
    params: WeightParams,
    control_box: Sequence[tuple[float, float]],
    Ns: Sequence[int] = (7, 15, 31, 63),
    direction: int = 1,
    a_coeff: Callable | None = None,
) -> SlopeReport:
    """Evaluate one catalog expression over a mesh sweep at t = T/2 (theta = 1).

    s = tau stays fixed across the sweep, so O((sh)^2) remainders must show a
    log-log slope >= 1.9 in h, the algebraic identity must vanish to 1e-12,
    and the bound-type entries must stay within a factor-100 band.
    """
    if expr_id not in ASYMPTOTIC_CATALOG:
        raise KeyError(
            f"unknown expression {expr_id!r}; catalog: {ASYMPTOTIC_CATALOG}"
        )
    t_mid = params.T / 2.0
    residuals = []
    hs = []
    detail: dict = {}
    for N in Ns:
        mesh = msh.MeshSpec(len(control_box), N)
        psi = build_psi(mesh, control_box)
        w = CarlemanWeights(params, psi, guard=False)
        pts = mesh.points(mesh.extents_primal())
        i = direction
        h = mesh.h
        s = w.s(t_mid)
        if expr_id == "avg2_identity":
            ra2 = w.r_times_stencil_rho(t_mid, i, a2_taps(), pts)
            rd2 = w.r_times_stencil_rho(t_mid, i, d2_taps(h), pts)
            res = np.max(np.abs(ra2 - 1.0 - h**2 / 4.0 * rd2))
            scale = max(1.0, np.max(np.abs(ra2)))
            residuals.append(float(res / scale))
        elif expr_id == "xi3_average":
            pref = lambda q: w.xi_at(q) ** (-3.0)
            val = w.r_times_stencil_rho(t_mid, i, A_TAPS, pts, power=2, prefactor=pref)
            res = np.abs(val - w.xi_at(pts) ** (-3.0))
            residuals.append(float(np.max(res)))
        elif expr_id == "xi3_difference_bound":
            a_fn = a_coeff or (
                lambda q: 1.0 + 0.5 * np.sin(2.0 * np.pi * q[..., 0])
            )
            pref = lambda q: a_fn(q) * w.xi_at(q) ** (-3.0)
            val = w.r_times_stencil_rho(
                t_mid, i, d_taps(h), pts, power=2, prefactor=pref
            )
            bound = s * params.lam * w.xi_at(pts) ** (-2.0)
            residuals.append(float(np.max(np.abs(val) / bound)))
        elif expr_id == "d2rho_leading":
            val = w.r_times_stencil_rho(t_mid, i, d2_taps(h), pts)
            lead = (
                s**2
                * params.lam**2
                * w.xi_at(pts) ** 2
                * w.psi.grad_fn(pts)[..., i - 1] ** 2
            )
            sub = s * float(np.max(np.abs(w.hess_diag_phi_at(pts)[..., i - 1])))
            residuals.append(float(np.max(np.abs(val - lead)) / sub))
        hs.append(h)

    if expr_id == "avg2_identity":
        kind = "identity"
        slope = None
        passed = max(residuals) <= 1e-12
    elif expr_id == "xi3_average":
        kind = "slope2"
        slope = _loglog_slope(hs, residuals)
        passed = slope >= 1.9 and residuals[-1] <= residuals[0]
    else:
        kind = "bounded"
        slope = _loglog_slope(hs, residuals)
        rmax, rmin = max(residuals), min(residuals)
        passed = np.isfinite(rmax) and rmax / max(rmin, 1e-300) <= 100.0
        detail["max_over_min"] = rmax / max(rmin, 1e-300)
    return SlopeReport(
        expr_id=expr_id,
        kind=kind,
        Ns=tuple(Ns),
        hs=tuple(hs),
        residuals=tuple(residuals),
        slope=slope,
        passed=bool(passed),
        detail=detail,
    )


# ---------------------------------------------------------------------------
# exports

def theta_trace_csv(params: WeightParams, path, samples: int = 200) -> None:
    sched = ThetaSchedule(params)
    ts = np.linspace(0.0, params.T, samples + 1)
    with open(path, "w") as f:
        f.write("t,theta,theta_t,theta_tt\n")
        for t in ts:
            f.write(
                ",".join(
                    format(v, ".17g")
                    for v in (t, sched.value(t), sched.d1(t), sched.d2(t))
                )
                + "\n"
            )


def weight_fields_csv(w: CarlemanWeights, path) -> None:
    mesh = w.mesh
    pts = mesh.points(mesh.extents_closure())
    psi = w.psi.psi.values
    xi = w.xi_field(mesh.extents_closure())
    phi = w.phi_field(mesh.extents_closure())
    shape = psi.shape
    with open(path, "w") as f:
        f.write("x_multi_index,psi,xi,phi\n")
        for idx in np.ndindex(shape):
            tag = ";".join(str(j) for j in idx)
            f.write(
                f"{tag},{format(psi[idx], '.17g')},"
                f"{format(xi[idx], '.17g')},{format(phi[idx], '.17g')}\n"
            )
