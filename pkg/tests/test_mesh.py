import numpy as np
import pytest
import scipy.linalg

from phinull import mesh as msh
from phinull.errors import DirectionError, MeshTagError


def rng(seed=0):
    return np.random.default_rng(seed)


def random_dirichlet(mesh, r):
    u = msh.zeros(mesh, mesh.extents_closure())
    inner = tuple(slice(1, -1) for _ in range(mesh.n))
    u.values[inner] = r.standard_normal(mesh.shape(mesh.extents_primal()))
    return u


class TestMeshSpec:
    def test_h_times_np1_is_one(self):
        for N in (1, 3, 7, 15, 31, 63):
            m = msh.MeshSpec(1, N)
            assert m.h * (N + 1) == 1.0

    def test_point_counts(self):
        m = msh.MeshSpec(2, 5)
        assert m.shape(m.extents_primal()) == (5, 5)
        assert m.shape(m.extents_dual(1)) == (6, 5)
        assert m.shape(m.extents_dual(2)) == (5, 6)
        assert m.shape(m.extents_closure()) == (7, 7)

    def test_invalid_direction(self):
        m = msh.MeshSpec(2, 3)
        u = msh.zeros(m, m.extents_closure())
        with pytest.raises(DirectionError):
            msh.average(u, 3)
        with pytest.raises(DirectionError):
            msh.difference(u, 0)

    def test_tag_mismatch(self):
        m = msh.MeshSpec(1, 3)
        u = msh.zeros(m, m.extents_primal())
        with pytest.raises(MeshTagError):
            msh.average(u, 1)  # interior axis cannot be averaged further


class TestAverageDifference:
    def test_average_of_constant(self):
        m = msh.MeshSpec(2, 7)
        u = msh.from_callable(m, lambda p: 3.0 * np.ones(p.shape[:-1]), m.extents_closure())
        for i in (1, 2):
            a = msh.average(u, i)
            assert np.allclose(a.values, 3.0, rtol=0, atol=0)

    def test_average_linear_fixed_point(self):
        m = msh.MeshSpec(2, 7)
        for i in (1, 2):
            u = msh.from_callable(m, lambda p: p[..., i - 1], m.extents_closure())
            a = msh.interior_part(msh.average(u, i))
            x = m.points(m.extents_dual(i))[..., i - 1]
            assert np.allclose(a.values, x, rtol=0, atol=1e-15)

    def test_average_quadratic_offset(self):
        # ((x+h/2)^2 + (x-h/2)^2)/2 = x^2 + h^2/4
        m = msh.MeshSpec(1, 7)
        u = msh.from_callable(m, lambda p: p[..., 0] ** 2, m.extents_closure())
        a = msh.average(u, 1)
        x = m.points(m.extents_dual(1))[..., 0]
        assert np.allclose(a.values, x**2 + m.h**2 / 4, rtol=1e-14)

    def test_difference_constant_linear_quadratic(self):
        m = msh.MeshSpec(1, 7)
        c = msh.from_callable(m, lambda p: 2.5 * np.ones(p.shape[:-1]), m.extents_closure())
        assert np.allclose(msh.difference(c, 1).values, 0.0, atol=0)
        lin = msh.from_callable(m, lambda p: p[..., 0], m.extents_closure())
        assert np.allclose(msh.difference(lin, 1).values, 1.0, rtol=1e-13)
        quad = msh.from_callable(m, lambda p: p[..., 0] ** 2, m.extents_closure())
        x = m.points(m.extents_dual(1))[..., 0]
        assert np.allclose(msh.difference(quad, 1).values, 2 * x, rtol=1e-12)

    def test_average_difference_commute_across_directions(self):
        m = msh.MeshSpec(2, 6)
        u = random_dirichlet(m, rng(1))
        ad = msh.average(msh.difference(u, 2), 1)
        da = msh.difference(msh.average(u, 1), 2)
        assert np.max(np.abs(ad.values - da.values)) <= 1e-14
        aa = msh.average(msh.average(u, 2), 1)
        aa2 = msh.average(msh.average(u, 1), 2)
        assert np.max(np.abs(aa.values - aa2.values)) <= 1e-14

    def test_product_rules(self):
        # A_i(uv) = A_iu A_iv + (h^2/4) D_iu D_iv and
        # D_i(uv) = D_iu A_iv + A_iu D_iv, exactly.
        m = msh.MeshSpec(1, 9)
        r = rng(2)
        u = msh.GridFunction(m, r.standard_normal(m.shape(m.extents_closure())), m.extents_closure())
        v = msh.GridFunction(m, r.standard_normal(m.shape(m.extents_closure())), m.extents_closure())
        uv = msh.GridFunction(m, u.values * v.values, m.extents_closure())
        au, av = msh.average(u, 1), msh.average(v, 1)
        du, dv = msh.difference(u, 1), msh.difference(v, 1)
        lhs_a = msh.average(uv, 1).values
        rhs_a = au.values * av.values + m.h**2 / 4 * du.values * dv.values
        assert np.max(np.abs(lhs_a - rhs_a)) <= 1e-13
        lhs_d = msh.difference(uv, 1).values
        rhs_d = du.values * av.values + au.values * dv.values
        assert np.max(np.abs(lhs_d - rhs_d)) <= 1e-12


class TestInnerProduct:
    def test_unit_inner_n1(self):
        m = msh.MeshSpec(1, 3)
        u = msh.from_callable(m, lambda p: np.ones(p.shape[:-1]), m.extents_primal())
        assert msh.l2h_inner(u, u) == pytest.approx(0.75, abs=1e-15)

    def test_orthogonal_sine_modes(self):
        m = msh.MeshSpec(1, 15)
        x = m.points(m.extents_primal())[..., 0]
        u = msh.GridFunction(m, np.sin(np.pi * x), m.extents_primal())
        v = msh.GridFunction(m, np.sin(2 * np.pi * x), m.extents_primal())
        # brute-force oracle for the same trigonometric sum
        brute = m.h * sum(
            float(np.sin(np.pi * xi) * np.sin(2 * np.pi * xi)) for xi in x
        )
        assert abs(brute) <= 1e-15
        assert abs(msh.l2h_inner(u, v)) <= 1e-15

    def test_symmetry(self):
        m = msh.MeshSpec(2, 4)
        r = rng(3)
        shape = m.shape(m.extents_primal())
        u = msh.GridFunction(m, r.standard_normal(shape), m.extents_primal())
        v = msh.GridFunction(m, r.standard_normal(shape), m.extents_primal())
        assert msh.l2h_inner(u, v) == msh.l2h_inner(v, u)


class TestSummationByParts:
    def test_zero_input(self):
        m = msh.MeshSpec(1, 5)
        u = msh.zeros(m, m.extents_closure())
        v = msh.zeros(m, m.extents_dual(1))
        assert msh.sbp_residual(u, v, 1) == 0.0

    def test_hand_summation_n3(self):
        # u = x(1-x), v = 1: <Du, v> telescopes to u(1)-u(0) = 0, and Dv = 0.
        m = msh.MeshSpec(1, 3)
        u = msh.from_callable(m, lambda p: p[..., 0] * (1 - p[..., 0]), m.extents_closure())
        v = msh.from_callable(m, lambda p: np.ones(p.shape[:-1]), m.extents_dual(1))
        du = msh.difference(u, 1)
        hand = m.h * float(np.sum(du.values))  # = u(1) - u(0) = 0
        assert abs(hand) <= 1e-16
        assert msh.sbp_residual(u, v, 1) <= 1e-14

    @pytest.mark.parametrize("n,N", [(1, 7), (1, 15), (2, 7), (2, 15)])
    def test_random_pairs(self, n, N):
        m = msh.MeshSpec(n, N)
        r = rng(100 * n + N)
        for trial in range(25):
            u = random_dirichlet(m, r)
            for i in range(1, n + 1):
                v = msh.GridFunction(
                    m, r.standard_normal(m.shape(m.extents_dual(i))), m.extents_dual(i)
                )
                assert msh.sbp_residual(u, v, i) <= 1e-12


class TestLaplacian:
    def test_zero(self):
        m = msh.MeshSpec(2, 5)
        g = msh.unit_coefficients(m)
        y = msh.zeros(m, m.extents_closure())
        out = msh.div_form_laplacian(y, g)
        assert np.all(out.values == 0.0)

    def test_sine_eigenrelation_against_dense_eigensolve(self):
        m = msh.MeshSpec(1, 15)
        g = msh.unit_coefficients(m)
        k = 2
        x = m.points(m.extents_closure())[..., 0]
        y = msh.GridFunction(m, np.sin(k * np.pi * x), m.extents_closure())
        out = msh.div_form_laplacian(y, g)
        mu = -(4.0 / m.h**2) * np.sin(k * np.pi * m.h / 2) ** 2
        expected = mu * msh.interior_part(y).values
        assert np.allclose(out.values, expected, rtol=1e-11)
        # oracle: dense eigendecomposition of the assembled matrix
        A = msh.laplacian_matrix(m, g).toarray()
        evals = np.sort(scipy.linalg.eigvalsh(A))
        mus = np.sort([-(4.0 / m.h**2) * np.sin(j * np.pi * m.h / 2) ** 2 for j in range(1, m.N + 1)])
        assert np.allclose(evals, mus, rtol=1e-10)

    def test_matrix_matches_operator(self):
        gamma_fn = lambda p: 1.0 + 0.5 * np.sin(2 * np.pi * p[..., 0]) * np.cos(np.pi * p[..., -1])
        for n, N in [(1, 7), (2, 5)]:
            m = msh.MeshSpec(n, N)
            g = msh.CoefficientField(m, [gamma_fn] * n, gamma0=50.0)
            A = msh.laplacian_matrix(m, g)
            r = rng(7 * n + N)
            y = random_dirichlet(m, r)
            via_op = msh.div_form_laplacian(y, g).values.ravel()
            via_mat = A @ msh.interior_part(y).values.ravel()
            assert np.allclose(via_op, via_mat, rtol=1e-12, atol=1e-12)

    @pytest.mark.parametrize("n,N", [(1, 7), (2, 5)])
    def test_symmetry_and_negative_definiteness(self, n, N):
        m = msh.MeshSpec(n, N)
        gamma_fn = lambda p: 1.5 + np.cos(np.pi * p[..., 0]) ** 2
        g = msh.CoefficientField(m, [gamma_fn] * n, gamma0=50.0)
        A = msh.laplacian_matrix(m, g).toarray()
        assert np.max(np.abs(A - A.T)) <= 1e-12
        evals = scipy.linalg.eigvalsh(A)
        assert np.max(evals) < 0.0

    def test_l2h_symmetry_random(self):
        m = msh.MeshSpec(2, 5)
        g = msh.unit_coefficients(m)
        r = rng(11)
        y, w = random_dirichlet(m, r), random_dirichlet(m, r)
        ly = msh.div_form_laplacian(y, g)
        lw = msh.div_form_laplacian(w, g)
        a = msh.l2h_inner(ly, msh.interior_part(w))
        b = msh.l2h_inner(msh.interior_part(y), lw)
        assert abs(a - b) <= 1e-12 * (abs(a) + abs(b) + 1)


class TestAdjointness:
    @pytest.mark.parametrize("n,N", [(1, 7), (2, 5)])
    def test_difference_matrix_is_minus_transpose_of_dual_divergence(self, n, N):
        # assemble D_i (closure->dual-i, Dirichlet) and D_i (dual-i->primal)
        # as dense matrices; under the uniform h^n weight they are exact
        # negative transposes of each other.
        m = msh.MeshSpec(n, N)
        ndof = m.N**m.n
        for i in range(1, n + 1):
            dual_shape = m.shape(m.extents_dual(i))
            ndual = int(np.prod(dual_shape))
            D_c2d = np.zeros((ndual, ndof))
            for j in range(ndof):
                e = np.zeros(ndof)
                e[j] = 1.0
                u = msh.GridFunction(m, e.reshape(m.shape(m.extents_primal())), m.extents_primal())
                col = msh.interior_part(msh.difference(msh.dirichlet_extend(u), i))
                D_c2d[:, j] = col.values.ravel()
            D_d2p = np.zeros((ndof, ndual))
            for j in range(ndual):
                e = np.zeros(ndual)
                e[j] = 1.0
                w = msh.GridFunction(m, e.reshape(dual_shape), m.extents_dual(i))
                D_d2p[:, j] = msh.difference(w, i).values.ravel()
            assert np.max(np.abs(D_c2d.T + D_d2p)) <= 1e-12


class TestGradient:
    def test_constant_and_linear(self):
        m = msh.MeshSpec(2, 7)
        c = msh.from_callable(m, lambda p: np.full(p.shape[:-1], 4.2), m.extents_closure())
        for comp in msh.discrete_gradient(c):
            assert np.allclose(comp.values, 0.0, atol=1e-14)
        lin = msh.from_callable(m, lambda p: p[..., 0], m.extents_closure())
        g1, g2 = msh.discrete_gradient(lin)
        assert np.allclose(g1.values, 1.0, rtol=1e-13)
        assert np.allclose(g2.values, 0.0, atol=1e-13)

    def test_sine_product_second_order(self):
        errs = []
        hs = []
        for N in (7, 15, 31):
            m = msh.MeshSpec(2, N)
            f = lambda p: np.sin(np.pi * p[..., 0]) * np.sin(np.pi * p[..., 1])
            y = msh.from_callable(m, f, m.extents_closure())
            grads = msh.discrete_gradient(y)
            pts = m.points(m.extents_primal())
            exact = np.pi * np.cos(np.pi * pts[..., 0]) * np.sin(np.pi * pts[..., 1])
            errs.append(np.max(np.abs(grads[0].values - exact)))
            hs.append(m.h)
        slope = np.polyfit(np.log(hs), np.log(errs), 1)[0]
        assert 1.9 <= slope <= 2.1


class TestCoefficientField:
    def test_reg_measured_with_analytic_gradient(self):
        m = msh.MeshSpec(1, 15)
        f = lambda p: 2.0 + np.sin(np.pi * p[..., 0])
        df = lambda p: np.stack([np.pi * np.cos(np.pi * p[..., 0])], axis=-1)
        g = msh.CoefficientField(m, [f], gamma0=15.0, grad_funcs=[df])
        # sup of (gamma + 1/gamma + |dgamma|^2) <= 3 + 1/2 + pi^2
        assert g.reg() <= 3.0 + 0.5 + np.pi**2 + 1e-9

    def test_positivity_enforced(self):
        m = msh.MeshSpec(1, 7)
        f = lambda p: np.cos(2 * np.pi * p[..., 0])  # changes sign
        with pytest.raises(ValueError):
            msh.CoefficientField(m, [f], gamma0=100.0).on_dual(1)

    def test_declared_bound_enforced(self):
        m = msh.MeshSpec(1, 7)
        f = lambda p: 10.0 + 0 * p[..., 0]
        with pytest.raises(ValueError):
            msh.CoefficientField(m, [f], gamma0=5.0)


class TestSerialization:
    def test_csv_roundtrip_header(self, tmp_path):
        m = msh.MeshSpec(2, 3)
        u = msh.from_callable(m, lambda p: p[..., 0] + 10 * p[..., 1], m.extents_dual(2))
        path = tmp_path / "u.csv"
        msh.to_csv(u, path)
        lines = path.read_text().splitlines()
        assert lines[0] == "mesh_tag,n,N,direction"
        assert lines[1] == "dual-2,2,3,2"
        vals = np.array([float(s) for s in lines[2:]])
        assert np.array_equal(vals, u.values.ravel(order="F"))
