"""Every coordinate update checked against a quadrature-normalized optimal factor.

Each instance is a tiny random dataset with a random prior and a random
(but internally consistent) variational state.  Updates are applied one at a
time; before each one the oracle computes the optimal factor of the same
block from the current state, and the package result must match it.
"""

import numpy as np
import pytest
from scipy.special import digamma

import quadrature_oracle as qo
from mixsem import latent as lat
from mixsem import outcome as out
from mixsem.data import Dataset

N_INSTANCES = 25
RTOL = 1e-6
ATOL = 1e-8


def random_dataset(rng) -> Dataset:
    n = int(rng.integers(2, 6))
    m = int(rng.integers(1, 3))
    p = int(rng.integers(1, 3))
    obs = rng.random((n, m)) < 0.75
    for i in range(n):
        if not obs[i].any():
            obs[i, rng.integers(m)] = True
    y = rng.normal(0.0, 2.0, (n, m))
    return Dataset(y=np.where(obs, y, np.nan), observed=obs, x=rng.normal(0.0, 1.0, (n, p)))


def random_prior(rng, p):
    A = rng.normal(size=(p, p))
    return dict(
        mu_beta=rng.normal(size=p), Sigma_beta=A @ A.T + np.eye(p),
        mu_lambda=float(rng.normal(1.0, 0.3)), sigma2_lambda=float(rng.uniform(0.5, 2.0)),
        alpha_psi2=float(rng.uniform(1.0, 4.0)), beta_psi2=float(rng.uniform(0.5, 3.0)),
        alpha_sigma2=float(rng.uniform(1.0, 4.0)), beta_sigma2=float(rng.uniform(0.5, 3.0)),
        alpha_w=float(rng.uniform(1.0, 5.0)),
    )


def _ig(rng, shape):
    alpha = rng.uniform(1.5, 6.0, shape)
    return alpha, alpha * rng.uniform(0.4, 2.5, shape)


def outcome_instance(seed):
    rng = np.random.default_rng([7001, seed])
    ds = random_dataset(rng)
    H = tuple(int(h) for h in rng.integers(1, 3, ds.m))
    spec = out.OutcomeMixtureSpec(
        H=H, mu_mu=[list(rng.normal(0, 1, h)) for h in H], sigma2_mu=[list(rng.uniform(1, 5, h)) for h in H],
        **random_prior(rng, ds.p))
    st = out.init_state(spec, ds)
    cm = spec.component_mask
    M, hmax, N = ds.m, spec.hmax, ds.n
    st.mu_q_mu = np.where(cm, rng.normal(0, 1.5, (M, hmax)), 0.0)
    st.sigma2_q_mu = np.where(cm, rng.uniform(0.05, 1.0, (M, hmax)), 0.0)
    st.mu_q_mu2 = st.mu_q_mu**2 + st.sigma2_q_mu
    a, b = _ig(rng, (M, hmax))
    st.alpha_q_psi2, st.beta_q_psi2 = np.where(cm, a, 0.0), np.where(cm, b, 0.0)
    st.mu_q_inv_psi2 = np.where(cm, a / b, 0.0)
    st.mu_q_log_psi2 = np.where(cm, np.log(b) - digamma(a), 0.0)
    aw = rng.uniform(1.5, 6.0, (M, hmax))
    st.alpha_q_w = np.where(cm, aw, 0.0)
    st.mu_q_log_w = np.zeros((M, hmax))
    for j, h in enumerate(H):
        st.mu_q_log_w[j, :h] = digamma(aw[j, :h]) - digamma(aw[j, :h].sum())
    st.mu_q_lambda = np.concatenate([[1.0], rng.normal(1.0, 0.5, M - 1)])
    st.sigma2_q_lambda = np.concatenate([[0.0], rng.uniform(0.05, 0.5, M - 1)])
    st.mu_q_lambda2 = st.mu_q_lambda**2 + st.sigma2_q_lambda
    st.mu_q_eta = rng.normal(0, 1.5, N)
    st.sigma2_q_eta = rng.uniform(0.05, 1.0, N)
    st.mu_q_eta2 = st.mu_q_eta**2 + st.sigma2_q_eta
    st.mu_q_a = np.zeros((N, M, hmax))
    for j, h in enumerate(H):
        st.mu_q_a[:, j, :h] = rng.dirichlet(np.ones(h), N)
    st.mu_q_a *= ds.observed[:, :, None]
    st.mu_q_beta = rng.normal(0, 1, ds.p)
    A = rng.normal(size=(ds.p, ds.p)) * 0.3
    st.Sigma_q_beta = A @ A.T + 0.1 * np.eye(ds.p)
    a, b = _ig(rng, ())
    st.alpha_q_sigma2, st.beta_q_sigma2 = float(a), float(b)
    st.mu_q_inv_sigma2, st.mu_q_log_sigma2 = float(a / b), float(np.log(b) - digamma(a))
    return spec, ds, st


def latent_instance(seed):
    rng = np.random.default_rng([7002, seed])
    ds = random_dataset(rng)
    K = 2
    spec = lat.LatentMixtureSpec(K=K, mu_nu=float(rng.normal()), sigma2_nu=float(rng.uniform(1, 5)),
                                 **random_prior(rng, ds.p))
    st = lat.init_latent_state(spec, ds, lat.LatentInitOptions(strategy="anchor"))
    M, N, p = ds.m, ds.n, ds.p
    st.mu_q_nu = rng.normal(0, 1.5, M)
    st.sigma2_q_nu = rng.uniform(0.05, 1.0, M)
    st.mu_q_nu2 = st.mu_q_nu**2 + st.sigma2_q_nu
    a, b = _ig(rng, M)
    st.alpha_q_psi2, st.beta_q_psi2, st.mu_q_inv_psi2 = a, b, a / b
    st.mu_q_log_psi2 = np.log(b) - digamma(a)
    st.mu_q_lambda = np.concatenate([[1.0], rng.normal(1.0, 0.5, M - 1)])
    st.sigma2_q_lambda = np.concatenate([[0.0], rng.uniform(0.05, 0.5, M - 1)])
    st.mu_q_lambda2 = st.mu_q_lambda**2 + st.sigma2_q_lambda
    st.mu_q_eta = rng.normal(0, 1.5, N)
    st.sigma2_q_eta = rng.uniform(0.05, 1.0, N)
    st.mu_q_eta2 = st.mu_q_eta**2 + st.sigma2_q_eta
    st.mu_q_a = rng.dirichlet(np.ones(K), N)
    st.mu_q_beta = rng.normal(0, 1, (K, p))
    covs = []
    for _ in range(K):
        A = rng.normal(size=(p, p)) * 0.3
        covs.append(A @ A.T + 0.1 * np.eye(p))
    st.Sigma_q_beta = np.stack(covs)
    a, b = _ig(rng, K)
    st.alpha_q_sigma2, st.beta_q_sigma2, st.mu_q_inv_sigma2 = a, b, a / b
    st.mu_q_log_sigma2 = np.log(b) - digamma(a)
    st.alpha_q_w = rng.uniform(1.5, 6.0, K)
    st.mu_q_log_w = digamma(st.alpha_q_w) - digamma(st.alpha_q_w.sum())
    return spec, ds, st


def close(actual, expected, what):
    np.testing.assert_allclose(actual, expected, rtol=RTOL, atol=ATOL, err_msg=what)


def check_outcome_instance(seed):
    spec, ds, st = outcome_instance(seed)
    terms = qo.outcome_terms(spec, ds)
    rules = lambda: qo.outcome_rules(st, spec, ds)
    for j, H in enumerate(spec.H):
        if H > 1:
            r = rules()
            cells = [i for i in range(ds.n) if ds.observed[i, j]]
            want = [qo.categorical_optimum(terms, r, ("a", i, j), H) for i in cells]
            out.update_responsibilities(st, spec, ds, j)
            close(st.mu_q_a[cells, j, :H], np.array(want), f"responsibilities j={j}")
        if j > 0:
            m, v = qo.gaussian_optimum(terms, rules(), ("lam", j), st.mu_q_lambda[j])
            out.update_loadings(st, spec, ds, j)
            close([st.mu_q_lambda[j], st.sigma2_q_lambda[j]], [m, v], f"loading j={j}")
        r = rules()
        want = [qo.gaussian_optimum(terms, r, ("mu", j, h), st.mu_q_mu[j, h]) for h in range(H)]
        out.update_intercepts(st, spec, ds, j)
        close(np.c_[st.mu_q_mu[j, :H], st.sigma2_q_mu[j, :H]], np.array(want), f"intercepts j={j}")
        r = rules()
        want = [qo.inverse_gamma_optimum(terms, r, ("psi2", j, h)) for h in range(H)]
        wts = qo.dirichlet2_optimum(terms, r, ("w", j)) if H > 1 else None
        out.update_noise_and_weights(st, spec, ds, j)
        got = np.c_[st.alpha_q_psi2[j, :H], st.beta_q_psi2[j, :H], st.mu_q_inv_psi2[j, :H], st.mu_q_log_psi2[j, :H]]
        close(got, np.array(want), f"noise j={j}")
        if wts is not None:
            close(np.r_[st.alpha_q_w[j, :2], st.mu_q_log_w[j, :2]], wts, f"weights j={j}")
    r = rules()
    want = [qo.gaussian_optimum(terms, r, ("eta", i), st.mu_q_eta[i]) for i in range(ds.n)]
    out.update_latents(st, spec, ds)
    close(np.c_[st.mu_q_eta, st.sigma2_q_eta], np.array(want), "latents")
    mean, cov = qo.mvgaussian_optimum(terms, rules(), ("beta",), ds.p)
    out.update_beta(st, spec, ds)
    close(st.mu_q_beta, mean, "beta mean")
    close(st.Sigma_q_beta, cov, "beta covariance")
    want = qo.inverse_gamma_optimum(terms, rules(), ("sigma2",))
    out.update_sigma2(st, spec, ds)
    close([st.alpha_q_sigma2, st.beta_q_sigma2, st.mu_q_inv_sigma2, st.mu_q_log_sigma2], want, "sigma2")


def check_latent_instance(seed):
    spec, ds, st = latent_instance(seed)
    terms = qo.latent_terms(spec, ds)
    rules = lambda: qo.latent_rules(st, spec, ds)
    wts = qo.dirichlet2_optimum(terms, rules(), ("w",))
    for k in range(spec.K):
        mean, cov = qo.mvgaussian_optimum(terms, rules(), ("beta", k), ds.p)
        lat.update_component_beta(st, spec, ds, k)
        close(st.mu_q_beta[k], mean, f"beta_{k} mean")
        close(st.Sigma_q_beta[k], cov, f"beta_{k} covariance")
        want = qo.inverse_gamma_optimum(terms, rules(), ("sigma2", k))
        lat.update_component_sigma2(st, spec, ds, k)
        got = [st.alpha_q_sigma2[k], st.beta_q_sigma2[k], st.mu_q_inv_sigma2[k], st.mu_q_log_sigma2[k]]
        close(got, want, f"sigma2_{k}")
        lat.update_component_count(st, spec, k)
    lat.update_weights(st, spec)
    close(np.r_[st.alpha_q_w, st.mu_q_log_w], wts, "mixing weights")
    r = rules()
    want = [qo.categorical_optimum(terms, r, ("a", i), spec.K) for i in range(ds.n)]
    lat.latent_responsibilities(st, spec, ds)
    close(st.mu_q_a, np.array(want), "responsibilities")
    r = rules()
    want = [qo.gaussian_optimum(terms, r, ("eta", i), st.mu_q_eta[i]) for i in range(ds.n)]
    lat.update_latents(st, spec, ds)
    close(np.c_[st.mu_q_eta, st.sigma2_q_eta], np.array(want), "latents")
    if ds.m > 1:
        r = rules()
        want = [qo.gaussian_optimum(terms, r, ("lam", j), st.mu_q_lambda[j]) for j in range(1, ds.m)]
        lat.update_latent_loadings(st, spec, ds)
        close(np.c_[st.mu_q_lambda[1:], st.sigma2_q_lambda[1:]], np.array(want), "loadings")
    r = rules()
    want = [qo.gaussian_optimum(terms, r, ("nu", j), st.mu_q_nu[j]) for j in range(ds.m)]
    lat.update_latent_intercepts(st, spec, ds)
    close(np.c_[st.mu_q_nu, st.sigma2_q_nu], np.array(want), "intercepts")
    r = rules()
    want = [qo.inverse_gamma_optimum(terms, r, ("psi2", j)) for j in range(ds.m)]
    lat.update_latent_noise(st, spec, ds)
    got = np.c_[st.alpha_q_psi2, st.beta_q_psi2, st.mu_q_inv_psi2, st.mu_q_log_psi2]
    close(got, np.array(want), "noise")


class TestOracleSelfCheck:
    """The quadrature rules themselves reproduce known moments."""

    def test_inverse_gamma_rule_moments(self):
        r = qo.inverse_gamma_rule(3.5, 2.0)
        tau = 1.0 / r.nodes[:, 0]
        np.testing.assert_allclose(r.weights @ tau, 3.5 / 2.0, rtol=1e-10)
        np.testing.assert_allclose(r.weights @ np.log(r.nodes[:, 0]), np.log(2.0) - digamma(3.5), rtol=1e-10)

    def test_beta_rule_log_moments(self):
        r = qo.beta2_rule(2.5, 4.0)
        np.testing.assert_allclose(r.weights @ np.log(r.nodes), digamma([2.5, 4.0]) - digamma(6.5), rtol=1e-10)

    def test_gaussian_optimum_of_known_quadratic(self):
        terms = [qo.Term(-0.5 / 0.7, [qo.Factor((("z",),), lambda V: (V[("z",)][..., 0] - 1.3) ** 2)])]
        m, v = qo.gaussian_optimum(terms, {}, ("z",))
        np.testing.assert_allclose([m, v], [1.3, 0.7], rtol=1e-10)


@pytest.mark.parametrize("seed", range(N_INSTANCES))
class TestOutcomeUpdatesMatchOracle:
    """Outcome-mixture updates on random instances."""

    def test_sequence(self, seed):
        check_outcome_instance(seed)


@pytest.mark.parametrize("seed", range(N_INSTANCES))
class TestLatentUpdatesMatchOracle:
    """Latent-mixture updates on random instances."""

    def test_sequence(self, seed):
        check_latent_instance(seed)
