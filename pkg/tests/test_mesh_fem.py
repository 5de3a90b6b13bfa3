import numpy as np
import pytest
import scipy.sparse as sp
from hypothesis import given, strategies as st

from conftest import checkerboard
from gmsbayes.errors import NumericalFailure
from gmsbayes.mesh_fem import (BoundarySpec, FullOrderSolver, SensorSet, TimeGrid, Trajectory, apply_dirichlet,
                               assemble, assemble_load, build_grid, dirichlet, load_permeability, mass_matrix,
                               neumann, observe, save_permeability, solve_forward_full, stiffness_matrix,
                               uniform_sensors)


def element_oracle(hx, hy):
    """Exact Q1 element matrices as tensor products of 1-D linear elements."""
    k1 = lambda h: np.array([[1.0, -1.0], [-1.0, 1.0]]) / h  # noqa: E731
    m1 = lambda h: h / 6 * np.array([[2.0, 1.0], [1.0, 2.0]])  # noqa: E731
    K = np.kron(m1(hy), k1(hx)) + np.kron(k1(hy), m1(hx))
    M = np.kron(m1(hy), m1(hx))
    return K, M


class TestGrid:
    def test_counts(self):
        assert build_grid(80, 80).n_nodes == 6561
        g = build_grid(1, 1)
        assert (g.n_nodes, g.n_cells) == (4, 1)
        assert build_grid(8, 8).n_nodes == 81

    def test_zero_cells_rejected(self):
        with pytest.raises(ValueError):
            build_grid(0, 3)

    def test_x_fastest_numbering(self):
        g = build_grid(3, 2, ((0, 3), (0, 2)))
        assert np.allclose(g.nodes[:4], [[0, 0], [1, 0], [2, 0], [3, 0]])
        assert np.allclose(g.nodes[4], [0, 1])
        assert g.cells.max() < g.n_nodes
        assert list(g.cells[0]) == [0, 1, 4, 5]


class TestAssembly:
    @pytest.mark.parametrize("hx,hy", [(1.0, 1.0), (0.5, 0.25)])
    def test_single_element_matches_exact_integrals(self, hx, hy):
        g = build_grid(1, 1, ((0, hx), (0, hy)))
        B, K = assemble(g, [1.0])
        Ko, Mo = element_oracle(hx, hy)
        assert np.allclose(K.toarray(), Ko, atol=1e-14)
        assert np.allclose(B.toarray(), Mo, atol=1e-14)

    @given(st.integers(1, 6), st.integers(1, 6), st.floats(0.3, 3.0))
    def test_constants_in_kernel_and_mass_total(self, nx, ny, width):
        g = build_grid(nx, ny, ((0, width), (0, 1.0)))
        k = np.random.default_rng(nx * 7 + ny).uniform(0.1, 10, g.n_cells)
        B, K = assemble(g, k)
        assert np.allclose(K @ np.ones(g.n_nodes), 0.0, atol=1e-10 * k.max())
        assert B.sum() == pytest.approx(g.area, rel=1e-12)

    def test_symmetry_and_definiteness(self):
        g = build_grid(5, 4)
        B, K = assemble(g, checkerboard(g))
        assert abs(B - B.T).max() < 1e-15 and abs(K - K.T).max() < 1e-12
        np.linalg.cholesky(B.toarray())
        assert np.linalg.eigvalsh(K.toarray()).min() > -1e-10

    @given(st.integers(0, 10 ** 6))
    def test_linear_in_k(self, seed):
        g = build_grid(4, 3)
        r = np.random.default_rng(seed)
        k1, k2 = r.uniform(0.1, 5, g.n_cells), r.uniform(0.1, 5, g.n_cells)
        diff = stiffness_matrix(g, k1 + k2) - stiffness_matrix(g, k1) - stiffness_matrix(g, k2)
        assert abs(diff).max() < 1e-12

    def test_bad_field_rejected(self):
        g = build_grid(2, 2)
        with pytest.raises(ValueError):
            assemble(g, np.ones(3))
        with pytest.raises(ValueError):
            assemble(g, [1, 1, 0, 1])


class TestLoad:
    def test_zero_source(self):
        assert np.all(assemble_load(build_grid(3, 3), lambda x, y, t: 0 * x) == 0)

    def test_unit_source_integrates_area(self):
        g = build_grid(5, 3, ((0, 2), (0, 1.5)))
        F = assemble_load(g, lambda x, y, t: np.ones_like(x))
        assert F.sum() == pytest.approx(3.0, rel=1e-13)

    def test_gaussian_source_against_cellwise_rule(self):
        g = build_grid(40, 40)
        f = lambda x, y, t=0.0: 5 / (2 * np.pi * 0.01) * np.exp(-((x - .25) ** 2 + (y - .75) ** 2) / 0.02)  # noqa
        F = assemble_load(g, f)
        # independent loop over cells with the 2x2 Gauss rule
        gp = np.array([0.5 - 0.5 / np.sqrt(3), 0.5 + 0.5 / np.sqrt(3)])
        ref = np.zeros(g.n_nodes)
        for c, nodes in enumerate(g.cells):
            x0, y0 = g.nodes[nodes[0]]
            for a in gp:
                for b in gp:
                    phi = [(1 - a) * (1 - b), a * (1 - b), (1 - a) * b, a * b]
                    ref[nodes] += 0.25 * g.hx * g.hy * f(x0 + a * g.hx, y0 + b * g.hy) * np.array(phi)
        assert np.allclose(F, ref, rtol=1e-10, atol=1e-10 * np.abs(ref).max())
        # and against a high-order rule: the 2x2 rule is accurate to O(h^4)
        xg, wg = np.polynomial.legendre.leggauss(8)
        xg, wg = 0.5 * (xg + 1), 0.5 * wg
        hi = np.zeros(g.n_nodes)
        A, Bq = np.meshgrid(xg, xg)
        W = np.outer(wg, wg)
        for nodes in g.cells:
            x0, y0 = g.nodes[nodes[0]]
            fv = f(x0 + A * g.hx, y0 + Bq * g.hy) * W * g.hx * g.hy
            hi[nodes] += [np.sum(fv * (1 - A) * (1 - Bq)), np.sum(fv * A * (1 - Bq)),
                          np.sum(fv * (1 - A) * Bq), np.sum(fv * A * Bq)]
        assert np.linalg.norm(F - hi) / np.linalg.norm(hi) < 1e-4

    def test_neumann_flux_total(self):
        g = build_grid(6, 4)
        bc = BoundarySpec(left=neumann(lambda s, t: 3.0 + 0 * s))
        F = assemble_load(g, None, bc)
        assert F.sum() == pytest.approx(3.0, rel=1e-13)
        assert np.all(F[g.boundary_nodes("right")] == 0)

    def test_dirichlet_rows_zeroed(self):
        g = build_grid(4, 4)
        bc = BoundarySpec(right=dirichlet(), top=dirichlet())
        F = assemble_load(g, lambda x, y, t: 1 + x, bc)
        assert np.all(F[bc.dirichlet_nodes(g)] == 0)
        assert len(bc.dirichlet_nodes(g)) == 9


class TestSolver:
    def test_zero_stays_zero(self):
        g = build_grid(4, 4)
        B, K = assemble(g, np.ones(g.n_cells))
        tr = solve_forward_full(B, K, None, np.zeros(g.n_nodes), TimeGrid(0.1, 1.0))
        assert tr.values.shape == (11, g.n_nodes) and np.all(tr.values == 0)

    def test_constant_steady_state(self):
        g = build_grid(6, 5)
        B, K = assemble(g, checkerboard(g, 1, 1e3))
        tr = solve_forward_full(B, K, None, np.full(g.n_nodes, 2.5), TimeGrid(0.01, 0.1))
        assert np.allclose(tr.values, 2.5, atol=1e-10)

    def test_manufactured_solution_first_order_in_time(self):
        g = build_grid(32, 32)
        B, K = assemble(g, np.ones(g.n_cells))
        x, y = g.nodes[:, 0], g.nodes[:, 1]
        shape = np.cos(np.pi * x) * np.cos(np.pi * y)
        # u = exp(-t) cos cos solves u_t - lap u = f with f = (2 pi^2 - 1) u
        src = lambda t: assemble_load(  # noqa: E731
            g, lambda a, b, s: (2 * np.pi ** 2 - 1) * np.exp(-s) * np.cos(np.pi * a) * np.cos(np.pi * b), t=t)
        M = mass_matrix(g)

        def final(dt):
            n = int(round(1 / dt))
            return FullOrderSolver(B, K, dt).solve(src, shape, n, [n]).values[0]

        # time error against a tiny-step solve on the same grid isolates the temporal order
        ref = final(1 / 2560)
        errs = []
        for dt in (0.1, 0.05, 0.025):
            e = final(dt) - ref
            errs.append(np.sqrt(e @ (M @ e)))
        rates = np.log2(np.array(errs[:-1]) / np.array(errs[1:]))
        e = ref - np.exp(-1.0) * shape
        assert np.sqrt(e @ (M @ e)) < 5e-3
        assert np.all(rates > 0.8) and np.all(rates < 1.3)

    @given(st.integers(0, 10 ** 6))
    def test_energy_nonincreasing(self, seed):
        g = build_grid(5, 5)
        B, K = assemble(g, checkerboard(g, 1, 50))
        u0 = np.random.default_rng(seed).normal(size=g.n_nodes)
        tr = solve_forward_full(B, K, None, u0, TimeGrid(0.01, 0.2))
        norms = np.einsum("ij,ij->i", tr.values, (B @ tr.values.T).T)
        assert np.all(np.diff(norms) <= 1e-12 * norms[0])

    def test_linear_in_initial_state_and_load(self, rng):
        g = build_grid(6, 6)
        B, K = assemble(g, checkerboard(g))
        s = FullOrderSolver(B, K, 0.02)
        u1, u2 = rng.normal(size=(2, g.n_nodes))
        F1, F2 = rng.normal(size=(2, g.n_nodes))
        a = s.solve(F1, u1, 5).values + s.solve(F2, u2, 5).values
        b = s.solve(F1 + F2, u1 + u2, 5).values
        assert np.linalg.norm(a - b) <= 1e-12 * np.linalg.norm(b)

    def test_observation_operator_matches_direct_solves(self, rng):
        g = build_grid(8, 8)
        B, K = assemble(g, checkerboard(g))
        s = FullOrderSolver(B, K, 0.01)
        sens = uniform_sensors(3, 3, [0.03, 0.05])
        P = g.interpolation_matrix(sens.points)
        O = s.observation_load_operator(P, [3, 5])
        F = rng.normal(size=g.n_nodes)
        tr = s.solve(F, np.zeros(g.n_nodes), 5)
        assert np.allclose(O @ F, observe(tr, g, sens), rtol=1e-11, atol=1e-13)

    def test_singular_system_reported(self):
        B = sp.csr_matrix(np.zeros((3, 3)))
        with pytest.raises(NumericalFailure):
            FullOrderSolver(B, B, 0.1).solve(np.ones(3), np.zeros(3), 1)

    def test_dirichlet_elimination_keeps_nodes_fixed(self):
        g = build_grid(5, 5)
        bc = BoundarySpec(right=dirichlet())
        B, K = apply_dirichlet(*assemble(g, np.ones(g.n_cells)), bc.dirichlet_nodes(g))
        assert abs(B - B.T).max() == 0 and abs(K - K.T).max() == 0
        F = assemble_load(g, lambda x, y, t: 1 + 0 * x, bc)
        tr = solve_forward_full(B, K, F, np.zeros(g.n_nodes), TimeGrid(0.05, 0.5))
        assert np.all(tr.values[:, bc.dirichlet_nodes(g)] == 0)
        assert tr.values[-1].max() > 0


class TestTime:
    def test_levels(self):
        assert TimeGrid(0.002, 0.1).levels == 50
        assert list(TimeGrid(0.01, 0.1).level_of([0.01, 0.1])) == [1, 10]

    @pytest.mark.parametrize("dt,T", [(0.0, 1.0), (0.3, 1.0), (-1, 1)])
    def test_rejects_bad_steps(self, dt, T):
        with pytest.raises(ValueError):
            TimeGrid(dt, T)

    def test_level_of_off_grid(self):
        with pytest.raises(ValueError):
            TimeGrid(0.01, 0.1).level_of(0.015)


class TestObserve:
    def test_constant_trajectory(self):
        g = build_grid(4, 4)
        tr = Trajectory(np.full((3, g.n_nodes), 1.7), np.arange(3), 0.5)
        obs = observe(tr, g, uniform_sensors(2, 3, [0.5, 1.0]))
        assert obs.shape == (12,) and np.allclose(obs, 1.7)

    def test_sensor_at_node_is_exact(self, rng):
        g = build_grid(4, 4)
        vals = rng.normal(size=(2, g.n_nodes))
        tr = Trajectory(vals, np.arange(2), 1.0)
        obs = observe(tr, g, SensorSet(g.nodes[[7, 24]], [1.0]))
        assert np.allclose(obs, vals[1, [7, 24]], atol=1e-15)

    def test_paper_network_size(self):
        assert uniform_sensors(6, 6, [0.04, 0.08]).n_d == 72

    def test_time_major_order(self):
        rows = uniform_sensors(2, 1, [0.1, 0.2]).rows()
        assert np.allclose(rows[:, 2], [0.1, 0.1, 0.2, 0.2])
        assert np.allclose(rows[:2, 0], [0.25, 0.75])

    def test_outside_rejected(self):
        g = build_grid(2, 2)
        with pytest.raises(ValueError):
            g.interpolation_matrix([[1.5, 0.5]])


def test_permeability_file_roundtrip(tmp_path):
    g = build_grid(4, 3)
    k = checkerboard(g, 1, 1e3)
    save_permeability(tmp_path / "k.txt", g, k)
    assert np.array_equal(load_permeability(tmp_path / "k.txt", g), k)
    with pytest.raises(ValueError):
        load_permeability(tmp_path / "k.txt", build_grid(3, 4))


def test_trajectory_csv(tmp_path):
    tr = Trajectory(np.arange(6.0).reshape(2, 3), np.array([0, 4]), 0.1)
    tr.to_csv(tmp_path / "t.csv")
    lines = (tmp_path / "t.csv").read_text().splitlines()
    assert lines[0] == "level,node,value" and lines[-1] == "4,2,5.0"
