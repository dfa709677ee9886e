"""Reference computations written independently of the library.

Everything here uses explicit loops, scipy.stats densities or scipy.optimize
numerical maximization, so agreement with the vectorized closed forms is a
genuine cross-check.
"""

import math

import numpy as np
from scipy import optimize, stats
from scipy.special import logsumexp

JITTER = 1e-8
BETA_EPS = 1e-6


def kernel_matrix(T, a0, b0):
    K = np.empty((T, T))
    for i in range(T):
        for j in range(T):
            K[i, j] = b0 * math.exp(-a0 * (i - j) ** 2)
    return K


def prior_cov(s_v, T, a0, b0):
    return s_v * (kernel_matrix(T, a0, b0) + JITTER * b0 * np.eye(T))


def log_density(x, r, mu, sigma2, beta, use_missingness=True):
    """log of the product over variables and timesteps, one factor at a time."""
    V, T = x.shape
    total = 0.0
    for v in range(V):
        for t in range(T):
            if r[v, t]:
                total += math.log(stats.norm.pdf(x[v, t], loc=mu[v, t], scale=math.sqrt(sigma2[v])))
                if use_missingness:
                    total += math.log(beta[v, t])
            elif use_missingness:
                total += math.log(1.0 - beta[v, t])
    return total


def log_posterior(x, r, theta, mu, sigma2, beta, m, s, hp, use_missingness=True):
    """Observed-data log likelihood plus the three log priors, summed term by term."""
    N = x.shape[0]
    G, V, T = mu.shape
    ll = 0.0
    for n in range(N):
        terms = [math.log(theta[g]) + log_density(x[n], r[n], mu[g], sigma2[g], beta[g], use_missingness) for g in range(G)]
        ll += logsumexp(terms)
    lp = 0.0
    for g in range(G):
        for v in range(V):
            lp += stats.multivariate_normal.logpdf(mu[g, v], mean=m[v], cov=prior_cov(s[v], T, hp.a0, hp.b0))
            lp += -0.5 * hp.n0 * math.log(sigma2[g, v]) - hp.n0 * s[v] ** 2 / (2 * sigma2[g, v])
            if use_missingness:
                for t in range(T):
                    lp += (hp.c0 - 1) * math.log(beta[g, v, t]) + (hp.d0 - 1) * math.log(1 - beta[g, v, t])
    return ll + lp


def posteriors(x, r, theta, mu, sigma2, beta, use_missingness=True):
    N, G = x.shape[0], theta.shape[0]
    out = np.empty((N, G))
    for n in range(N):
        logp = np.array([math.log(theta[g]) + log_density(x[n], r[n], mu[g], sigma2[g], beta[g], use_missingness) for g in range(G)])
        out[n] = np.exp(logp - logsumexp(logp))
    return out


# --------------------------------------------------------------------------
# Coordinate-wise numerical maximization of the expected complete-data
# log posterior with responsibilities ``pi`` held fixed.
# --------------------------------------------------------------------------


def argmax_theta(pi):
    weights = pi.sum(axis=0)

    def neg(z):
        return -float(weights @ (z - logsumexp(z)))

    z = optimize.minimize(neg, np.zeros(pi.shape[1]), method="BFGS", options={"gtol": 1e-12}).x
    return np.exp(z - logsumexp(z))


def argmax_mu(x, r, pi, sigma2_prev, m, s, hp):
    """Whitened coordinates mu = m + L z keep the problem well conditioned
    even when the prior kernel is nearly singular."""
    N, V, T = x.shape
    G = pi.shape[1]
    xf = np.where(r, x, 0.0)
    mu = np.empty((G, V, T))
    for g in range(G):
        for v in range(V):
            L = np.linalg.cholesky(prior_cov(s[v], T, hp.a0, hp.b0))

            def neg(z, g=g, v=v, L=L):
                mu_gv = m[v] + L @ z
                fit = sum(pi[n, g] * r[n, v, t] * (xf[n, v, t] - mu_gv[t]) ** 2 for n in range(N) for t in range(T))
                return 0.5 * fit / sigma2_prev[g, v] + 0.5 * z @ z

            res = optimize.minimize(neg, np.zeros(T), method="BFGS", options={"gtol": 1e-11})
            mu[g, v] = m[v] + L @ res.x
    return mu


def argmax_sigma2(x, r, pi, mu, s, hp):
    N, V, T = x.shape
    G = pi.shape[1]
    xf = np.where(r, x, 0.0)
    out = np.empty((G, V))
    for g in range(G):
        for v in range(V):
            W = sum(pi[n, g] * r[n, v, t] for n in range(N) for t in range(T))
            R = sum(pi[n, g] * r[n, v, t] * (xf[n, v, t] - mu[g, v, t]) ** 2 for n in range(N) for t in range(T))

            def neg(u, W=W, R=R, sv=s[v]):
                return 0.5 * (W + hp.n0) * u + (R + hp.n0 * sv**2) / (2 * math.exp(u))

            res = optimize.minimize_scalar(neg, bounds=(-25.0, 10.0), method="bounded", options={"xatol": 1e-12})
            out[g, v] = math.exp(res.x)
    return out


def argmax_beta(r, pi, hp):
    """Global maximizer per cell on [eps, 1 - eps]: best of both endpoints and a bounded local search."""
    N, V, T = r.shape
    G = pi.shape[1]
    lo, hi = BETA_EPS, 1 - BETA_EPS
    out = np.empty((G, V, T))
    for g in range(G):
        for v in range(V):
            for t in range(T):
                a = hp.c0 - 1 + sum(pi[n, g] * r[n, v, t] for n in range(N))
                b = hp.d0 - 1 + sum(pi[n, g] * (1 - r[n, v, t]) for n in range(N))

                def f(p, a=a, b=b):
                    return a * math.log(p) + b * math.log(1 - p)

                local = optimize.minimize_scalar(lambda p: -f(p), bounds=(lo, hi), method="bounded", options={"xatol": 1e-12}).x
                out[g, v, t] = max((lo, hi, local), key=f)
    return out
