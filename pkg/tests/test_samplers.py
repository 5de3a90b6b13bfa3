import numpy as np
import pytest
from scipy import integrate, stats

from gmsbayes.diagnostics import batch_means_stderr
from gmsbayes.errors import NumericalFailure
from gmsbayes.inference import HierarchicalPrior, JointModel, LinearForwardMap, gaussian_loglik
from gmsbayes.random_field import mrf_precision
from gmsbayes.samplers import (Chain, gibbs_hierarchical, joint_metropolis_within_gibbs, mh_random_walk,
                               read_chain_csv, summarize)
from gmsbayes.surrogate import unit_box


def _steps_logpost(z):
    # unnormalised density 1, 2, 3 on [0, 1), [1, 2), [2, 3)
    x = z[0]
    return np.log(np.floor(x) + 1.0) if 0.0 <= x < 3.0 else -np.inf


class TestRandomWalk:
    def test_piecewise_occupancy(self):
        ch = mh_random_walk(_steps_logpost, [1.5], 0.8, 120000, seed=4)
        x = ch.samples["z"][:, 0]
        occ = np.array([np.mean(np.floor(x) == k) for k in range(3)])
        ind = np.column_stack([np.floor(x) == k for k in range(3)]).astype(float)
        se = batch_means_stderr(ind)
        assert np.all(np.abs(occ - np.array([1, 2, 3]) / 6) < 4 * se)
        assert 0.2 < ch.acceptance_rate("z") < 0.95

    def test_gaussian_target_moments(self):
        ch = mh_random_walk(lambda z: -0.5 * np.sum((z - [1.0, -2.0]) ** 2 / [1.0, 0.25]), [0, 0], 1.0, 60000, 7)
        x = ch.samples["z"][5000:]
        se = batch_means_stderr(x)
        assert np.all(np.abs(x.mean(axis=0) - [1.0, -2.0]) < 4 * se)

    def test_reproducible(self):
        a = mh_random_walk(_steps_logpost, [0.5], 0.5, 500, seed=1).samples["z"]
        b = mh_random_walk(_steps_logpost, [0.5], 0.5, 500, seed=1).samples["z"]
        c = mh_random_walk(_steps_logpost, [0.5], 0.5, 500, seed=2).samples["z"]
        assert np.array_equal(a, b) and not np.array_equal(a, c)

    def test_invalid(self):
        with pytest.raises(ValueError):
            mh_random_walk(_steps_logpost, [5.0], 0.5, 10)
        with pytest.raises(ValueError):
            mh_random_walk(_steps_logpost, [0.5], 0.0, 10)
        with pytest.raises(ValueError):
            mh_random_walk(_steps_logpost, [0.5], 0.5, 0)


def _linear(rng, n_d=15, m=3):
    H = rng.normal(size=(n_d, m))
    W = mrf_precision(1, m).toarray() + 0.5 * np.eye(m)
    return H, W, rng.normal(size=n_d), rng.normal(size=n_d)


class TestGibbs:
    def test_fixed_gamma_matches_dense_posterior(self, rng):
        H, W, rest, d = _linear(rng)
        sigma, gamma = 0.8, 1.5
        ch = gibbs_hierarchical(LinearForwardMap(H, rest), HierarchicalPrior(W), d, sigma,
                                {"eta": np.zeros(3), "gamma": gamma}, 40000, seed=3, fixed_gamma=True)
        P = H.T @ H / sigma ** 2 + gamma * W
        cov = np.linalg.inv(P)
        mean = cov @ H.T @ (d - rest) / sigma ** 2
        x = ch.samples["eta"][1000:]
        se = batch_means_stderr(x)
        assert np.all(np.abs(x.mean(axis=0) - mean) < 4 * se)
        assert np.allclose(np.cov(x.T), cov, rtol=0.08, atol=0.05 * np.abs(cov).max())
        assert np.all(ch.samples["gamma"] == gamma)

    def test_prior_only(self, rng):
        W = mrf_precision(1, 3).toarray() + 0.5 * np.eye(3)
        ch = gibbs_hierarchical(LinearForwardMap(np.zeros((2, 3)), np.zeros(2)), HierarchicalPrior(W), np.zeros(2),
                                1.0, {"eta": np.ones(3), "gamma": 2.0}, 40000, seed=5, fixed_gamma=True)
        x = ch.samples["eta"][1000:]
        assert np.allclose(np.cov(x.T), np.linalg.inv(2.0 * W), atol=0.05)

    def test_scalar_hierarchy_against_quadrature(self):
        h, w, a, b, sigma, d = 1.3, 2.0, 2.0, 1.0, 0.7, np.array([0.9])

        def dens(eta):
            # gamma integrated out analytically: Student-type prior times Gaussian likelihood
            return stats.norm.pdf(d[0], h * eta, sigma) * (b + 0.5 * w * eta ** 2) ** -(a + 0.5)

        Z = integrate.quad(dens, -np.inf, np.inf)[0]
        e_eta = integrate.quad(lambda x: x * dens(x), -np.inf, np.inf)[0] / Z
        e_gam = integrate.quad(lambda x: (a + 0.5) / (b + 0.5 * w * x ** 2) * dens(x), -np.inf, np.inf)[0] / Z
        ch = gibbs_hierarchical(LinearForwardMap(np.array([[h]]), np.zeros(1)), HierarchicalPrior(np.array([[w]]), a, b),
                                d, sigma, {"eta": np.zeros(1), "gamma": 1.0}, 100000, seed=8)
        eta, gam = ch.samples["eta"][2000:, 0], ch.samples["gamma"][2000:, 0]
        assert abs(eta.mean() - e_eta) < 4 * batch_means_stderr(eta)
        assert abs(gam.mean() - e_gam) < 4 * batch_means_stderr(gam)

    def test_sweep_preserves_target(self, rng):
        # start exactly in the fixed-gamma posterior; one sweep must leave it invariant
        H, W, rest, d = _linear(rng, m=2)
        sigma, gamma = 0.6, 1.0
        P = H.T @ H / sigma ** 2 + gamma * W
        cov = np.linalg.inv(P)
        mean = cov @ H.T @ (d - rest) / sigma ** 2
        starts = rng.multivariate_normal(mean, cov, size=3000)
        out = np.array([gibbs_hierarchical(LinearForwardMap(H, rest), HierarchicalPrior(W), d, sigma,
                                           {"eta": s, "gamma": gamma}, 1, seed=k, fixed_gamma=True).samples["eta"][0]
                        for k, s in enumerate(starts)])
        for j in range(2):
            assert stats.kstest(out[:, j], "norm", args=(mean[j], np.sqrt(cov[j, j]))).pvalue > 1e-3

    def test_nonpositive_precision(self):
        with pytest.raises(NumericalFailure):
            gibbs_hierarchical(LinearForwardMap(np.zeros((2, 2)), np.zeros(2)), HierarchicalPrior(np.zeros((2, 2))),
                               np.zeros(2), 1.0, {"eta": np.zeros(2), "gamma": 1.0}, 3)

    def test_dimension_mismatch(self):
        with pytest.raises(ValueError):
            gibbs_hierarchical(LinearForwardMap(np.ones((2, 2)), np.zeros(2)), HierarchicalPrior(np.eye(2)),
                               np.zeros(2), 1.0, {"eta": np.zeros(3), "gamma": 1.0}, 3)


class TestJoint:
    def test_zero_surrogate_reproduces_gibbs(self, rng):
        H, W, _, d = _linear(rng)
        prior = HierarchicalPrior(W, 1.0, 1.0)
        joint = JointModel(H, lambda z: np.zeros(np.shape(z)[:-1] + (15,)), unit_box(2))
        init = {"eta": np.zeros(3), "z": np.array([0.5, 0.5]), "gamma": 1.0}
        jc = joint_metropolis_within_gibbs(joint, prior, d, 0.5, init, 0.05, 300, seed=12)
        gc = gibbs_hierarchical(LinearForwardMap(H, np.zeros(15)), prior, d, 0.5, init, 300, seed=12)
        assert np.allclose(jc.samples["eta"], gc.samples["eta"], atol=1e-10)
        assert np.allclose(jc.samples["gamma"], gc.samples["gamma"], rtol=1e-10)

    def test_location_block_reproduces_random_walk(self, rng):
        C = rng.normal(size=(6, 2))
        d = C @ np.array([0.3, 0.6]) + 0.1 * rng.normal(size=6)
        joint = JointModel(np.zeros((6, 1)), lambda z: np.asarray(z) @ C.T, unit_box(2))
        init = {"eta": np.zeros(1), "z": np.array([0.5, 0.5]), "gamma": 1.0}
        jc = joint_metropolis_within_gibbs(joint, HierarchicalPrior(np.eye(1)), d, 0.2, init, 0.1, 2000, seed=6,
                                           fixed=("eta", "gamma"))

        def logpost(z):
            return gaussian_loglik(d, C @ z, 0.2) if unit_box(2).contains(z)[0] else -np.inf

        mc = mh_random_walk(logpost, init["z"], 0.1, 2000, seed=6)
        assert np.allclose(jc.samples["z"], mc.samples["z"], atol=1e-12)
        assert jc.accepted["z"] == mc.accepted["z"]

    def test_shifted_data_invariance(self, rng):
        # adding c to the data and to the surrogate leaves the chain unchanged
        H, W, _, d = _linear(rng, n_d=6, m=2)
        C = rng.normal(size=(6, 2))
        shift = rng.normal(size=6)
        init = {"eta": np.zeros(2), "z": np.array([0.4, 0.4]), "gamma": 1.0}
        prior = HierarchicalPrior(W)
        a = joint_metropolis_within_gibbs(JointModel(H, lambda z: np.asarray(z) @ C.T, unit_box(2)), prior, d, 0.3,
                                          init, 0.05, 400, seed=2)
        b = joint_metropolis_within_gibbs(JointModel(H, lambda z: np.asarray(z) @ C.T + shift, unit_box(2)), prior,
                                          d + shift, 0.3, init, 0.05, 400, seed=2)
        for k in a.samples:
            assert np.allclose(a.samples[k], b.samples[k], atol=1e-8)

    def test_recovers_location(self, rng):
        C = rng.normal(size=(20, 2)) * 5
        H = rng.normal(size=(20, 2))
        truth = np.array([0.3, 0.7])
        d = H @ np.array([0.2, -0.1]) + C @ truth + 0.05 * rng.normal(size=20)
        joint = JointModel(H, lambda z: np.asarray(z) @ C.T, unit_box(2))
        ch = joint_metropolis_within_gibbs(joint, HierarchicalPrior(np.eye(2), 1.0, 1.0), d, 0.05,
                                           {"eta": np.zeros(2), "z": np.array([0.5, 0.5]), "gamma": 1.0}, 0.02,
                                           20000, seed=1)
        assert np.allclose(ch.retained("z", 0.5).mean(axis=0), truth, atol=0.05)
        assert 0.05 < ch.acceptance_rate("z") < 0.95


class TestChainIO:
    def _chain(self, rng):
        return Chain({"eta": rng.normal(size=(10, 2)), "gamma": rng.random((10, 1))}, {"gamma": 10}, {"gamma": 10},
                     seed=4, meta={"eps": 0.1})

    def test_csv_roundtrip(self, tmp_path, rng):
        ch = self._chain(rng)
        ch.to_csv(tmp_path / "c.csv", burn_in_fraction=0.3)
        header, it, vals, meta = read_chain_csv(tmp_path / "c.csv")
        assert header == ["eta_0", "eta_1", "gamma"]
        assert list(it) == list(range(3, 10))
        assert np.array_equal(vals, np.hstack([ch.samples["eta"][3:], ch.samples["gamma"][3:]]))
        assert meta["seed"] == "4" and meta["burn_in"] == "3" and meta["eps"] == "0.1"

    def test_summary(self, rng):
        ch = self._chain(rng)
        s = summarize(ch, 0.5, bins=4)
        assert s.n_retained == 5
        assert np.allclose(s.mean["eta"], ch.samples["eta"][5:].mean(axis=0))
        assert np.allclose(s.variance["gamma"], ch.samples["gamma"][5:].var(axis=0))
        assert sum(s.histograms["eta"][0][0]) == 5 and s.acceptance["gamma"] == 1.0
        assert np.isnan(ch.acceptance_rate("z"))

    def test_summary_errors(self, rng):
        with pytest.raises(ValueError):
            summarize(self._chain(rng), 1.0)
