import numpy as np
import pytest

from phinull import fixedpoint as fp
from phinull import forward_solver as fwd
from phinull import hum_control as hum
from phinull import mesh as msh
from phinull import scenario as scn
from phinull import weights as wgt
from phinull.errors import DivergenceError


def setup(N=7, K=6, tau=2.0, lam=0.3, m=0.3, delta=0.25, nonlin=None, seed=0):
    mesh = msh.MeshSpec(1, N)
    gamma = msh.unit_coefficients(mesh)
    pts = mesh.points(mesh.extents_primal())[..., 0]
    mask = (pts > 0.2) & (pts < 0.8)
    rng = np.random.default_rng(seed)
    y0 = rng.standard_normal(N)
    prob = fwd.ForwardProblem(
        mesh=mesh, gamma=gamma, control_mask=mask, y0=y0, nonlin=nonlin
    )
    tree = scn.ScenarioTree(K=K, T=1.0)
    params = wgt.WeightParams(lam=lam, tau=tau, m=m, delta=delta)
    w = wgt.weight_fields(params, wgt.build_psi(mesh, [(0.2, 0.8)]))
    cfg = hum.HumConfig(weights=w, epsilon=1e-2, cg_tol=1e-10, cg_max_iter=800)
    return prob, tree, cfg


class TestDNorm:
    def test_zero_and_homogeneity(self):
        prob, tree, cfg = setup()
        mesh = prob.mesh
        rng = np.random.default_rng(1)
        z = scn.AdaptedField.zeros(tree, mesh, mesh.extents_primal(), n_levels=tree.K)
        assert fp.d_norm_sq(z, cfg.weights) == 0.0
        v = scn.AdaptedField.from_random(tree, mesh, mesh.extents_primal(), rng, n_levels=tree.K)
        base = fp.d_norm_sq(v, cfg.weights)
        scaled = scn.AdaptedField(
            tree, [3.0 * lv for lv in v.levels], mesh, mesh.extents_primal()
        )
        assert fp.d_norm_sq(scaled, cfg.weights) == pytest.approx(9.0 * base, rel=1e-13)
        assert base > 0.0


class TestPicard:
    def test_zero_nonlinearity_single_iteration_bit_identical(self):
        nl = fwd.NonlinearitySpec(F1=lambda t, p, a, b: 0.0 * a, L1=0.0)
        prob, tree, cfg = setup(nonlin=nl)
        res = fp.picard_iterate(prob, tree, cfg, tol=1e-10)
        assert res.report.iterations == 1
        assert res.report.converged
        linear = fwd.ForwardProblem(
            mesh=prob.mesh, gamma=prob.gamma, control_mask=prob.control_mask,
            y0=prob.y0,
        )
        sol = hum.minimize_j(linear, tree, cfg)
        for k in range(tree.K + 1):
            assert np.array_equal(res.y_hat.levels[k], sol.y.levels[k])
        for k in range(tree.K):
            assert np.array_equal(res.controls.u.levels[k], sol.controls.u.levels[k])

    def test_state_linear_nonlinearity_converges(self):
        nl = fwd.NonlinearitySpec(F1=lambda t, p, a, b: 0.1 * a, L1=0.1 + 1e-12)
        prob, tree, cfg = setup(nonlin=nl)
        res = fp.picard_iterate(prob, tree, cfg, tol=1e-9)
        assert res.report.converged
        assert res.report.contraction_factor < 1.0
        # recorded increments contract monotonically after the first sweep
        inc = res.report.increments
        assert all(b <= res.report.contraction_factor**0.5 * a * (1 + 1e-9)
                   for a, b in zip(inc[1:-1], inc[2:]))

    def test_gradient_nonlinearity_converges(self):
        nl = fwd.NonlinearitySpec(
            F1=lambda t, p, a, b: 0.1 * (a + b[0]), L1=0.1 + 1e-12
        )
        prob, tree, cfg = setup(nonlin=nl)
        res = fp.picard_iterate(prob, tree, cfg, tol=1e-9)
        assert res.report.converged
        assert res.report.contraction_factor < 1.0

    def test_f2_substitution_reproduces_trajectory(self):
        nl = fwd.NonlinearitySpec(
            F1=lambda t, p, a, b: 0.1 * a,
            F2=lambda t, p, a, b: 0.05 * (a + b[0]),
            L1=0.1 + 1e-12, L2=0.05 + 1e-12,
        )
        prob, tree, cfg = setup(nonlin=nl)
        res = fp.picard_iterate(prob, tree, cfg, tol=1e-12, max_iter=40)
        assert res.report.resim_residual <= 1e-10

    def test_requires_nonlinearity(self):
        prob, tree, cfg = setup()
        with pytest.raises(ValueError):
            fp.picard_iterate(prob, tree, cfg)

    def test_divergence_raises_without_escalation(self):
        nl = fwd.NonlinearitySpec(F1=lambda t, p, a, b: 40.0 * a, L1=40.0 + 1e-9)
        prob, tree, cfg = setup(nonlin=nl, tau=1.0)
        with pytest.raises(DivergenceError):
            fp.picard_iterate(prob, tree, cfg, tol=1e-9, max_iter=8,
                              escalate_tau=False)

    def test_tau_escalation_rescues_divergence(self):
        # the same expanding F1 contracts once tau has been escalated x4
        nl = fwd.NonlinearitySpec(F1=lambda t, p, a, b: 40.0 * a, L1=40.0 + 1e-9)
        prob, tree, cfg = setup(nonlin=nl, tau=1.0)
        res = fp.picard_iterate(prob, tree, cfg, tol=1e-9, max_iter=12,
                                max_escalations=2)
        assert res.report.converged
        assert res.report.tau_escalations >= 1
        assert res.report.tau_used > 1.0


class TestTwoDimensional:
    def test_gradient_nonlinearity_2d(self):
        mesh = msh.MeshSpec(2, 7)
        gamma = msh.unit_coefficients(mesh)
        pts = mesh.points(mesh.extents_primal())
        mask = np.ones(pts.shape[:-1], dtype=bool)
        for k in range(2):
            mask &= (pts[..., k] > 0.2) & (pts[..., k] < 0.8)
        rng = np.random.default_rng(0)
        nl = fwd.NonlinearitySpec(
            F1=lambda t, p, a, b: 0.03 * (a + b[0] + b[1]), L1=0.09 + 1e-9
        )
        nl.validate(mesh, rng)
        prob = fwd.ForwardProblem(
            mesh=mesh, gamma=gamma, control_mask=mask,
            y0=rng.standard_normal((7, 7)), nonlin=nl,
        )
        tree = scn.ScenarioTree(K=5, T=1.0)
        params = wgt.WeightParams(lam=0.3, tau=1.5, m=0.3, delta=0.25)
        w = wgt.weight_fields(params, wgt.build_psi(mesh, [(0.2, 0.8)] * 2))
        cfg = hum.HumConfig(weights=w, epsilon=1e-2, cg_tol=1e-10, cg_max_iter=800)
        res = fp.picard_iterate(prob, tree, cfg, tol=1e-9)
        assert res.report.converged
        assert res.report.contraction_factor < 1.0


class TestContractionMeasurement:
    def test_two_point_ratio_below_one_and_tau_monotone(self):
        F1 = lambda t, p, a, b: 0.1 * (a + b[0])
        vals = []
        for tau in (4.0, 16.0):
            prob, tree, cfg = setup(tau=tau)
            vals.append(
                fp.contraction_ratio_sample(prob, tree, cfg, F1, n_pairs=3, seed=2)
            )
        assert all(v < 1.0 for v in vals)
        assert vals[1] < vals[0]


class TestDecay:
    def test_certificate_zero_initial(self):
        nl = fwd.NonlinearitySpec(F1=lambda t, p, a, b: 0.0 * a, L1=0.0)
        prob, tree, cfg = setup(nonlin=nl)
        prob.y0 = np.zeros_like(prob.y0)
        res = fp.picard_iterate(prob, tree, cfg, tol=1e-10)
        row = fp.decay_certificate(res, prob, tree)
        assert row.ratio_T == 0.0

    def test_controls_beat_uncontrolled(self):
        nl = fwd.NonlinearitySpec(F1=lambda t, p, a, b: 0.1 * a, L1=0.1 + 1e-12)
        prob, tree, cfg = setup(nonlin=nl)
        res = fp.picard_iterate(prob, tree, cfg, tol=1e-9)
        row = fp.decay_certificate(res, prob, tree)
        assert row.ratio_T <= row.uncontrolled_ratio

    def test_coupled_delta_identity(self):
        eps0, tau, m, T = 2.0, 2.0, 0.32, 1.0
        for h in (1 / 8, 1 / 16, 1 / 32):
            delta = fp.coupled_delta(h, eps0, tau, m, T)
            assert tau * (delta * T) ** (-m) * h == pytest.approx(eps0, rel=1e-12)

    def test_coupled_delta_domain(self):
        with pytest.raises(ValueError):
            fp.coupled_delta(0.5, eps0=0.1, tau=4.0, m=0.3, T=1.0)

    def test_decay_sweep_monotone_and_positive_kappa(self):
        # eps0 sized so the terminal stays above the float cancellation
        # floor (~1e-17 relative) across the whole sweep
        eps0, tau, lam, m = 0.35, 2.0, 0.32, 0.32
        rows = []
        for N in (7, 15, 31):
            mesh = msh.MeshSpec(1, N)
            h = mesh.h
            delta = fp.coupled_delta(h, eps0, tau, m, 1.0)
            params = wgt.WeightParams(lam=lam, tau=tau, m=m, delta=delta)
            w = wgt.weight_fields(params, wgt.build_psi(mesh, [(0.2, 0.8)]))
            gamma = msh.unit_coefficients(mesh)
            pts = mesh.points(mesh.extents_primal())[..., 0]
            mask = (pts > 0.2) & (pts < 0.8)
            y0 = np.sin(np.pi * pts)
            nl = fwd.NonlinearitySpec(F1=lambda t, p, a, b: 0.1 * a, L1=0.1 + 1e-12)
            prob = fwd.ForwardProblem(
                mesh=mesh, gamma=gamma, control_mask=mask, y0=y0, nonlin=nl
            )
            tree = scn.ScenarioTree(K=6, T=1.0)
            cfg = hum.HumConfig(weights=w, epsilon="tight", cg_tol=1e-9,
                                cg_max_iter=1000)
            res = fp.picard_iterate(prob, tree, cfg, tol=1e-8)
            row = fp.decay_certificate(res, prob, tree, compare_uncontrolled=False)
            rows.append(row)
        ratios = [r.ratio_T for r in rows]
        assert ratios[0] > ratios[1] > ratios[2] > 0.0
        hs = np.array([r.h for r in rows])
        kappa, intercept = np.polyfit(1.0 / hs, -np.log(ratios), 1)
        assert kappa > 0.0
