"""Tests for the M-step updates and the EM driver."""

import numpy as np
import pytest
from scipy.special import expit

from rtm import baselines, estimation, inference
from rtm.corpus import Corpus, generate_synthetic
from rtm.estimation import (RegularizationConfig, SufficientStats, collect_stats,
                            em_objective, fit, fit_link_exponential,
                            fit_link_gaussian, fit_link_sigmoid_probit,
                            link_regularizer, load_model,
                            regularized_link_gradient,
                            regularized_link_objective, save_model, update_beta)
from rtm.inference import ModelParams, init_state, run_e_step
from rtm.linkfn import LinkParams, link_probability


class TestUpdateBeta:
    def test_single_topic_frequencies(self):
        c = Corpus(["a", "b"], [[(0, 1), (1, 1)]])
        state = init_state(c, 1, np.array([1.0]), seed=0)
        beta = update_beta(c, state, smoothing=1e-12)
        np.testing.assert_allclose(beta, [[0.5, 0.5]], atol=1e-10)

    def test_hard_assignments_give_topic_counts(self):
        c = Corpus(["a", "b", "c"], [[(0, 2), (1, 1)], [(1, 1), (2, 3)]])
        state = init_state(c, 2, np.array([0.5, 0.5]), seed=0, noise=0.0)
        hard = {0: np.array([1.0, 0.0]), 1: np.array([1.0, 0.0]),
                2: np.array([0.0, 1.0])}
        for d in range(c.num_docs):
            for i, t in enumerate(c.doc_terms[d]):
                state.set_phi(d, i, hard[int(t)].copy())
        beta = update_beta(c, state, smoothing=1e-12)
        # topic 0 saw a:2 b:2, topic 1 saw c:3
        np.testing.assert_allclose(beta[0], [0.5, 0.5, 0.0], atol=1e-10)
        np.testing.assert_allclose(beta[1], [0.0, 0.0, 1.0], atol=1e-10)

    def test_smoothing_keeps_strictly_positive(self):
        c = Corpus(["a", "b", "c"], [[(0, 5)]])
        state = init_state(c, 2, np.array([0.5, 0.5]), seed=0)
        beta = update_beta(c, state, smoothing=0.01)
        assert np.all(beta > 0)
        np.testing.assert_allclose(beta.sum(axis=1), 1.0)


class TestSigmoidProbitFit:
    @pytest.mark.parametrize("kind", ["sigmoid", "probit"])
    def test_gradient_matches_finite_differences(self, kind):
        rng = np.random.default_rng(17)
        k = 3
        alpha = np.full(k, 1.0 / k)
        pi_alpha = estimation.prior_pair_covariate(alpha)
        pi = rng.random((12, k)) * 0.4
        h = 1e-6
        for _ in range(20):
            eta = rng.normal(0, 1.0, size=k)
            nu = rng.normal(0, 1.0)
            rho, lam = 5.0, 0.3
            g_eta, g_nu = regularized_link_gradient(kind, pi, eta, nu, rho,
                                                    lam, pi_alpha)
            grad = np.concatenate([g_eta, [g_nu]])
            theta = np.concatenate([eta, [nu]])
            for i in range(k + 1):
                up, dn = theta.copy(), theta.copy()
                up[i] += h
                dn[i] -= h
                fd = (regularized_link_objective(kind, pi, up[:k], up[k], rho,
                                                 lam, pi_alpha)
                      - regularized_link_objective(kind, pi, dn[:k], dn[k], rho,
                                                   lam, pi_alpha)) / (2 * h)
                assert abs(grad[i] - fd) / max(abs(fd), 1e-8) < 1e-5

    def test_unregularized_config_rejected(self):
        reg = RegularizationConfig(rho=0.0, lam=0.0)
        alpha = np.array([0.5, 0.5])
        with pytest.raises(ValueError, match="rho > 0 or lam > 0"):
            fit_link_sigmoid_probit("sigmoid", np.full((4, 2), 0.2), reg, alpha)

    def test_symmetric_data_fits_to_half(self):
        # every link covariate equals the prior covariate and rho = M:
        # positive and pseudo-negative evidence balance at probability 1/2
        alpha = np.array([0.5, 0.5])
        pi_alpha = estimation.prior_pair_covariate(alpha)
        m = 8
        pi = np.tile(pi_alpha, (m, 1))
        reg = RegularizationConfig(rho=float(m), lam=0.0)
        init = LinkParams(eta=np.array([1.0, -2.0]), nu=0.7, kind="sigmoid")
        params = fit_link_sigmoid_probit("sigmoid", pi, reg, alpha, init=init)
        prob = expit(params.eta @ pi_alpha + params.nu)
        assert abs(prob - 0.5) < 1e-6

    @pytest.mark.parametrize("kind", ["sigmoid", "probit"])
    def test_ascent_from_warm_start(self, kind):
        rng = np.random.default_rng(23)
        k = 2
        alpha = np.full(k, 0.5)
        pi_alpha = estimation.prior_pair_covariate(alpha)
        pi = rng.random((10, k)) * 0.5
        reg = RegularizationConfig(rho=10.0, lam=0.1)
        init = LinkParams(eta=rng.normal(size=k), nu=0.5, kind=kind)
        fitted = fit_link_sigmoid_probit(kind, pi, reg, alpha, init=init)
        before = regularized_link_objective(kind, pi, init.eta, init.nu,
                                            reg.rho, reg.lam, pi_alpha)
        after = regularized_link_objective(kind, pi, fitted.eta, fitted.nu,
                                           reg.rho, reg.lam, pi_alpha)
        assert after >= before


class TestExponentialFit:
    def test_single_topic_example(self):
        stats = SufficientStats(num_links=2, pi_bar_sum=np.array([1.0]),
                                pi_alpha=np.array([1.0]),
                                sq_diff_sum=np.array([0.0]))
        params = fit_link_exponential(stats, rho=2.0)
        np.testing.assert_allclose(params.nu, 0.0, atol=1e-12)
        np.testing.assert_allclose(params.eta, [-np.log(3.0)], rtol=1e-12)
        p = link_probability(params, [1.0], [1.0])
        np.testing.assert_allclose(p, 1.0 / 3.0, rtol=1e-12)

    def test_zero_rho_gives_certain_links(self):
        stats = SufficientStats(num_links=3, pi_bar_sum=np.array([0.4, 0.2]),
                                pi_alpha=np.array([0.25, 0.25]),
                                sq_diff_sum=np.zeros(2))
        params = fit_link_exponential(stats, rho=0.0)
        np.testing.assert_allclose(params.eta, 0.0, atol=1e-12)
        assert params.nu == 0.0

    def test_admissible_over_random_stats(self):
        rng = np.random.default_rng(31)
        for _ in range(1000):
            k = int(rng.integers(1, 6))
            m = int(rng.integers(1, 50))
            per_link = rng.random((m, k)) * rng.random(k)  # entries in [0, 1]
            mean = rng.dirichlet(np.ones(k))
            stats = SufficientStats(num_links=m, pi_bar_sum=per_link.sum(axis=0),
                                    pi_alpha=mean * mean,
                                    sq_diff_sum=np.zeros(k))
            rho = rng.exponential(float(m)) + 0.01
            params = fit_link_exponential(stats, rho=rho)
            assert params.nu <= 1e-12
            assert np.all(params.eta + params.nu <= 1e-12)
            params.check_admissible()

    def test_closed_form_maximizes_penalized_objective(self):
        # perturbing the solution in any direction must not improve
        # sum_links (eta . pi + nu) + rho * linearized non-link penalty
        rng = np.random.default_rng(5)
        k = 3
        pi = rng.random((9, k)) * 0.3
        alpha = np.full(k, 1.0 / k)
        pi_alpha = estimation.prior_pair_covariate(alpha)
        stats = SufficientStats(num_links=9, pi_bar_sum=pi.sum(axis=0),
                                pi_alpha=pi_alpha, sq_diff_sum=np.zeros(k))
        rho = 9.0
        best = fit_link_exponential(stats, rho=rho)

        def objective(eta, nu):
            link = LinkParams(eta=eta, nu=nu, kind="exponential")
            return (pi @ eta + nu).sum() + link_regularizer(link, rho, 0.0, pi_alpha)

        base = objective(best.eta, best.nu)
        for _ in range(50):
            eta = best.eta + rng.normal(0, 0.05, size=k)
            nu = best.nu + rng.normal(0, 0.05)
            if nu > 0 or np.any(eta + nu > 0):
                continue
            assert objective(eta, nu) <= base + 1e-9

    def test_no_links_rejected(self):
        stats = SufficientStats(num_links=0, pi_bar_sum=np.zeros(2),
                                pi_alpha=np.full(2, 0.25), sq_diff_sum=np.zeros(2))
        with pytest.raises(ValueError):
            fit_link_exponential(stats, rho=1.0)


class TestGaussianFit:
    def test_variance_matching_example(self):
        stats = SufficientStats(num_links=2, pi_bar_sum=np.zeros(1),
                                pi_alpha=np.ones(1),
                                sq_diff_sum=np.array([0.5]))
        params = fit_link_gaussian(stats, rho=2.0, num_topics=1)
        np.testing.assert_allclose(params.eta, [2.0])

    def test_nu_clamped_at_zero(self):
        # tight clusters give eta = 2 per component, driving the raw nu
        # formula to log(pi/2) - log(2) < 0, which clamps to zero
        stats = SufficientStats(num_links=4, pi_bar_sum=np.zeros(2),
                                pi_alpha=np.full(2, 0.25),
                                sq_diff_sum=np.full(2, 1.0))
        params = fit_link_gaussian(stats, rho=0.0, num_topics=2)
        np.testing.assert_allclose(params.eta, [2.0, 2.0])
        assert params.nu == 0.0
        z = np.array([0.5, 0.5])
        np.testing.assert_allclose(link_probability(params, z, z), 1.0)

    def test_eta_floor(self):
        stats = SufficientStats(num_links=1, pi_bar_sum=np.zeros(1),
                                pi_alpha=np.ones(1),
                                sq_diff_sum=np.array([1e12]))
        params = fit_link_gaussian(stats, rho=1.0, num_topics=1)
        assert params.eta[0] >= 1e-8

    def test_no_links_rejected(self):
        stats = SufficientStats(num_links=0, pi_bar_sum=np.zeros(1),
                                pi_alpha=np.ones(1), sq_diff_sum=np.ones(1))
        with pytest.raises(ValueError):
            fit_link_gaussian(stats, rho=1.0, num_topics=1)


def permuted_tv(beta_hat, beta_true):
    """Min over topic permutations of the max per-row total variation."""
    from itertools import permutations
    k = beta_true.shape[0]
    best = np.inf
    for perm in permutations(range(k)):
        tv = 0.5 * np.abs(beta_hat[list(perm)] - beta_true).sum(axis=1).max()
        best = min(best, tv)
    return best


class TestFit:
    def test_deterministic_serialization(self, tmp_path):
        corpus, _ = generate_synthetic(2, 6, 15, 10, np.array([0.5, 0.5]),
                                       np.array([-1.0, -1.0]), -0.5,
                                       "exponential", seed=2)
        paths = []
        for run in range(2):
            model = fit(corpus, 2, kind="exponential", seed=9, em_iters=4)
            p = tmp_path / f"m{run}.txt"
            save_model(model, str(p))
            paths.append(p)
        assert paths[0].read_bytes() == paths[1].read_bytes()

    def test_em_objective_nondecreasing_exponential(self):
        corpus, _ = generate_synthetic(2, 8, 20, 15, np.array([0.5, 0.5]),
                                       np.array([-1.5, -1.5]), -1.0,
                                       "exponential", seed=7)
        reg = RegularizationConfig().resolved(corpus.num_links)
        alpha = np.full(2, 0.5)
        rng = np.random.default_rng(0)
        beta = 1.0 + rng.random((2, 8))
        beta /= beta.sum(axis=1, keepdims=True)
        link = LinkParams(eta=np.zeros(2), nu=0.0, kind="exponential")
        params = ModelParams(beta=beta, alpha=alpha, link=link)
        state = init_state(corpus, 2, alpha, seed=1)
        values = []
        for _ in range(6):
            state, _ = run_e_step(corpus, params, state, tol=1e-8)
            beta = update_beta(corpus, state, reg.smoothing)
            link = fit_link_exponential(collect_stats(corpus, state, alpha),
                                        reg.rho)
            params = ModelParams(beta=beta, alpha=alpha, link=link)
            values.append(em_objective(corpus, params, state, reg))
        diffs = np.diff(values)
        assert np.all(diffs >= -1e-8 * np.maximum(1.0, np.abs(values[:-1])))

    def test_recovers_one_hot_topics(self):
        beta_true = np.eye(2)
        corpus, truth = generate_synthetic(
            2, 2, 40, 30, np.array([0.5, 0.5]), np.array([-2.0, -2.0]), -2.0,
            "exponential", seed=13, beta=beta_true)
        model = fit(corpus, 2, kind="exponential", seed=3, em_iters=10)
        assert permuted_tv(model.params.beta, beta_true) < 0.1

    def test_linkless_corpus_matches_lda(self):
        c = Corpus(["a", "b", "c"], [[(0, 2), (1, 1)], [(2, 3)], [(0, 1), (2, 1)]])
        with_links_off = fit(c, 2, kind=None, seed=5, em_iters=5)
        lda = baselines.fit_lda(c, 2, seed=5, em_iters=5)
        np.testing.assert_array_equal(with_links_off.params.beta, lda.params.beta)

    def test_beta_stays_normalized_and_positive(self):
        corpus, _ = generate_synthetic(3, 9, 12, 8, np.full(3, 1 / 3),
                                       np.full(3, -1.0), -0.5, "exponential",
                                       seed=4)
        for kind in ("sigmoid", "exponential", "probit", "gaussian"):
            model = fit(corpus, 3, kind=kind, seed=1, em_iters=3)
            beta = model.params.beta
            np.testing.assert_allclose(beta.sum(axis=1), 1.0, atol=1e-12)
            assert np.all(beta > 0)
            if kind in ("exponential", "gaussian"):
                model.params.link.check_admissible()


class TestModelFile:
    def test_round_trip(self, tmp_path):
        corpus, _ = generate_synthetic(2, 5, 10, 8, np.array([0.5, 0.5]),
                                       np.array([-1.0, -1.0]), -0.5,
                                       "exponential", seed=6)
        model = fit(corpus, 2, kind="exponential", seed=2, em_iters=3)
        path = str(tmp_path / "model.txt")
        save_model(model, path)
        loaded = load_model(path)
        assert loaded.kind == "exponential"
        np.testing.assert_allclose(loaded.params.beta, model.params.beta,
                                   rtol=1e-14)
        np.testing.assert_allclose(loaded.params.link.eta, model.params.link.eta,
                                   rtol=1e-14)
        np.testing.assert_allclose(loaded.params.link.nu, model.params.link.nu,
                                   rtol=1e-14)
        np.testing.assert_allclose(loaded.params.alpha, model.params.alpha)

    def test_bad_magic_rejected(self, tmp_path):
        p = tmp_path / "bad.txt"
        p.write_text("something else\n")
        with pytest.raises(ValueError, match="not a model file"):
            load_model(str(p))

    def test_unnormalized_rows_rejected(self, tmp_path):
        p = tmp_path / "bad.txt"
        log_row = " ".join(["0.0", "0.0"])  # exp sums to 2, not 1
        p.write_text("rtm-model v1\n1 2 lda 1 0.01\n0\n0\n" + log_row + "\n")
        with pytest.raises(ValueError, match="not normalized"):
            load_model(str(p))

    def test_no_partial_files(self, tmp_path):
        # the writer goes through a temp file and renames at the end
        corpus, _ = generate_synthetic(2, 4, 8, 6, np.array([0.5, 0.5]),
                                       np.array([-1.0, -1.0]), -0.5,
                                       "exponential", seed=1)
        model = fit(corpus, 2, kind="exponential", seed=1, em_iters=2)
        path = tmp_path / "model.txt"
        save_model(model, str(path))
        assert path.exists()
        assert not (tmp_path / "model.txt.tmp").exists()


class TestRegularizationConfig:
    def test_validation(self):
        with pytest.raises(ValueError):
            RegularizationConfig(rho=-1.0)
        with pytest.raises(ValueError):
            RegularizationConfig(lam=-0.5)
        with pytest.raises(ValueError):
            RegularizationConfig(smoothing=0.0)

    def test_rho_defaults_to_link_count(self):
        reg = RegularizationConfig().resolved(37)
        assert reg.rho == 37.0
