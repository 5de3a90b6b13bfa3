import itertools
from math import comb

import numpy as np
import pytest
from hypothesis import given, strategies as st

from gmsbayes.errors import IllConditionedDesign
from gmsbayes.surrogate import (Box, GpcSurrogate, basis_matrix, build_design, fit_ls, fit_residual_rms, fit_surrogate,
                                l2_piz_error, legendre_orthonormal, legendre_table, load_surrogate, multi_indices,
                                sample_count, save_surrogate, unit_box)


class TestIndices:
    @pytest.mark.parametrize("n_z,N", [(1, 0), (1, 5), (2, 3), (2, 10), (3, 4)])
    def test_count_and_brute_force(self, n_z, N):
        m = multi_indices(n_z, N)
        assert m.size == comb(N + n_z, n_z)
        brute = {c for c in itertools.product(range(N + 1), repeat=n_z) if sum(c) <= N}
        assert set(map(tuple, m.indices)) == brute

    def test_ordering(self):
        idx = [tuple(r) for r in multi_indices(2, 2).indices]
        assert idx == [(0, 0), (1, 0), (0, 1), (2, 0), (1, 1), (0, 2)]

    def test_invalid(self):
        with pytest.raises(ValueError):
            multi_indices(0, 3)


class TestLegendre:
    def test_gram_identity(self):
        x, w = np.polynomial.legendre.leggauss(64)
        T = legendre_table(20, x)
        G = (T * (w / 2)[:, None]).T @ T
        assert np.allclose(G, np.eye(21), atol=1e-12)

    def test_closed_forms(self):
        x = np.linspace(-1, 1, 7)
        assert np.allclose(legendre_orthonormal(1, x), np.sqrt(3) * x)
        assert np.allclose(legendre_orthonormal(2, x), np.sqrt(5) * (1.5 * x ** 2 - 0.5))
        assert np.allclose(legendre_orthonormal(7, 1.0), np.sqrt(15))

    def test_outside_interval(self):
        with pytest.raises(ValueError):
            legendre_table(3, 1.5)


class TestSampleCount:
    def test_values(self):
        assert sample_count(2, 10) == 726
        assert sample_count(1, 0, 1) == 1
        assert sample_count(2, 8) == 486

    @given(st.integers(1, 4), st.integers(0, 12), st.floats(1, 5))
    def test_at_least_basis_size(self, n_z, N, a):
        assert sample_count(n_z, N, a) >= comb(N + n_z, n_z)

    def test_invalid_factor(self):
        with pytest.raises(ValueError):
            sample_count(2, 3, 0.5)


class TestDesign:
    def test_structure(self, rng):
        idx = multi_indices(2, 4)
        box = Box([0.0, -1.0], [2.0, 3.0])
        nodes = box.sample(200, rng)
        d = build_design(nodes, idx, box)
        assert np.all(d.V[:, 0] == 1.0)
        centre = basis_matrix([1.0, 1.0], idx, box)[0]
        assert np.allclose(centre, basis_matrix(np.zeros(2), idx, Box([-1, -1], [1, 1]))[0])

    def test_empirical_gram_tends_to_identity(self, rng):
        idx = multi_indices(2, 3)
        V = basis_matrix(unit_box(2).sample(200000, rng), idx, unit_box(2))
        assert np.abs(V.T @ V / len(V) - np.eye(idx.size)).max() < 0.05

    def test_too_few_nodes(self, rng):
        with pytest.raises(IllConditionedDesign):
            build_design(rng.random((5, 2)), multi_indices(2, 3), unit_box(2))

    def test_degenerate_nodes(self):
        nodes = np.column_stack([np.linspace(0, 1, 50), np.linspace(0, 1, 50)])
        with pytest.raises(IllConditionedDesign):
            build_design(nodes, multi_indices(2, 3), unit_box(2))

    def test_point_outside_box(self):
        with pytest.raises(ValueError):
            basis_matrix([[0.5, 1.2]], multi_indices(2, 2), unit_box(2))

    def test_bad_box(self):
        with pytest.raises(ValueError):
            Box([0, 1], [1, 1])


class TestFit:
    def test_exact_polynomial(self, rng):
        box = Box([-2.0, 0.0], [2.0, 1.0])

        def f(z):
            return np.column_stack([1 + z[:, 0] ** 3 - 2 * z[:, 0] * z[:, 1] ** 2, z[:, 1] ** 4])

        s, design = fit_surrogate(f, 2, 4, box, seed=1)
        z = box.sample(100, rng)
        assert np.allclose(s(z), f(z), atol=1e-10)
        assert fit_residual_rms(design, s) < 1e-12
        assert s.n_d == 2

    def test_zero_data(self, rng):
        d = build_design(rng.random((60, 2)), multi_indices(2, 3), unit_box(2), np.zeros(60))
        assert np.all(fit_ls(d).coef == 0)

    def test_matches_normal_equations(self, rng):
        d = build_design(rng.random((80, 2)), multi_indices(2, 4), unit_box(2), rng.normal(size=(80, 3)))
        c = fit_ls(d).coef
        ref = np.linalg.solve(d.V.T @ d.V, d.V.T @ d.b)
        assert np.allclose(c, ref, atol=1e-10)

    def test_constant_surrogate(self):
        idx = multi_indices(2, 3)
        coef = np.zeros((idx.size, 2))
        coef[0] = [1.5, -2.0]
        s = GpcSurrogate(idx, coef, unit_box(2))
        assert np.allclose(s([0.3, 0.9]), [1.5, -2.0])
        assert s(np.array([[0.1, 0.2], [0.4, 0.5]])).shape == (2, 2)
        with pytest.raises(ValueError):
            s([1.5, 0.5])

    def test_error_decreases_with_degree(self):
        def f(z):
            return np.exp(-10 * ((z[:, 0] - 0.3) ** 2 + (z[:, 1] - 0.6) ** 2))[:, None]

        errs = [l2_piz_error(f, fit_surrogate(f, 2, N, seed=3)[0], 2000, seed=4).value for N in (2, 4, 6, 8)]
        assert all(b < a for a, b in zip(errs, errs[1:]))

    def test_deterministic_given_seed(self):
        def f(z):
            return np.sin(3 * z)

        a, _ = fit_surrogate(f, 2, 3, seed=9)
        b, _ = fit_surrogate(f, 2, 3, seed=9)
        assert np.array_equal(a.coef, b.coef)

    def test_save_load(self, tmp_path):
        def f(z):
            return np.cos(z)

        s, _ = fit_surrogate(f, 2, 3, Box([0, 1], [2, 4]), seed=2)
        save_surrogate(tmp_path / "s.csv", s)
        back = load_surrogate(tmp_path / "s.csv")
        assert np.array_equal(back.coef, s.coef) and np.array_equal(back.box.upper, s.box.upper)
        assert back.index_set.degree == 3 and back.meta["seed"] == "2"


class TestL2Error:
    def test_identical_is_zero(self):
        s, _ = fit_surrogate(lambda z: z ** 2, 2, 2, seed=0)
        assert l2_piz_error(s, s, 500).value == 0.0

    def test_constant_offset(self):
        s, _ = fit_surrogate(lambda z: z, 2, 1, seed=0)
        e = l2_piz_error(lambda z: s(z) + 0.5, s, 500)
        assert e.value == pytest.approx(2 * 0.25, rel=1e-12) and e.stderr < 1e-12

    def test_orthonormal_tail_has_unit_norm(self):
        # one unseen orthonormal mode of degree N+1 contributes exactly 1 in L2(pi)
        s, _ = fit_surrogate(lambda z: z[:, :1], 2, 3, seed=0)
        e = l2_piz_error(lambda z: s(z) + legendre_orthonormal(4, 2 * z[:, :1] - 1), s, 20000, seed=1)
        assert abs(e.value - 1.0) < 4 * e.stderr

    def test_needs_samples(self):
        s, _ = fit_surrogate(lambda z: z, 2, 1, seed=0)
        with pytest.raises(ValueError):
            l2_piz_error(s, s, 10)
