"""Mixed-mode Bayesian mixture model for incompletely observed MTS, fitted by MAP-EM.

Each component couples a diagonal Gaussian over the observed values (time
dependent mean, per-variable variance constant over time) with independent
Bernoulli factors over the observation indicators. Informative priors keep the
component means smooth over time (squared-exponential prior covariance), shrink
variances towards the empirical ones (inverse-Gamma), and regularize the
Bernoulli rates (Beta).

Passing ``use_missingness=False`` everywhere drops the Bernoulli part and its
prior, which gives the ordinary time series cluster kernel base model.
"""

from __future__ import annotations

import logging
import math
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy import linalg
from scipy.special import logsumexp

from .dataset import MtsDataset, MtsRecord

logger = logging.getLogger(__name__)

BETA_EPS = 1e-6
JITTER = 1e-8
SIGMA2_FLOOR = 1e-12
LOG_2PI = math.log(2.0 * math.pi)


class MixtureError(ArithmeticError):
    """Numerical failure while evaluating or fitting the mixture."""


@dataclass(frozen=True)
class MixtureHyperparams:
    a0: float  # inverse squared length scale of the prior kernel
    b0: float  # prior kernel amplitude
    c0: float
    d0: float
    n0: float  # inverse-Gamma prior strength

    def __post_init__(self):
        for name in ("a0", "b0", "c0", "d0"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be > 0, got {getattr(self, name)}")
        if not self.n0 >= 0:
            raise ValueError(f"n0 must be >= 0, got {self.n0}")


@dataclass(frozen=True, eq=False)
class PriorStats:
    """Empirical prior moments for one dataset view.

    ``kernel`` is the raw T x T matrix ``b0 * exp(-a0 (t - t')^2)``; all
    factorizations use ``kernel + JITTER * b0 * I``. The prior covariance of
    variable ``v`` is ``s[v] * kernel``.
    """

    m: np.ndarray  # (V, T)
    s: np.ndarray  # (V,)
    kernel: np.ndarray  # (T, T)
    b0: float
    chol: np.ndarray = field(init=False, repr=False)
    logdet_kernel: float = field(init=False, repr=False)

    def __post_init__(self):
        jittered = self.kernel + JITTER * self.b0 * np.eye(self.kernel.shape[0])
        try:
            chol = linalg.cholesky(jittered, lower=True)
        except linalg.LinAlgError as exc:
            raise MixtureError("prior kernel matrix is not positive definite after jitter") from exc
        object.__setattr__(self, "chol", chol)
        object.__setattr__(self, "logdet_kernel", 2.0 * float(np.log(np.diag(chol)).sum()))

    @property
    def jittered_kernel(self) -> np.ndarray:
        return self.kernel + JITTER * self.b0 * np.eye(self.kernel.shape[0])


@dataclass(frozen=True, eq=False)
class MixtureParams:
    theta: np.ndarray  # (G,)
    mu: np.ndarray  # (G, V, T)
    sigma2: np.ndarray  # (G, V)
    beta: np.ndarray  # (G, V, T)

    @property
    def n_components(self) -> int:
        return self.theta.shape[0]

    def arrays(self) -> dict[str, np.ndarray]:
        return {"theta": self.theta, "mu": self.mu, "sigma2": self.sigma2, "beta": self.beta}


@dataclass(frozen=True)
class StoppingRule:
    max_iter: int = 25
    tol: float = 1e-6  # relative change of the penalized log posterior


@dataclass(eq=False)
class MixtureFit:
    params: MixtureParams
    posteriors: np.ndarray  # (N, G)
    trace: list[float]  # penalized log posterior after init and after every M-step
    n_iter: int
    converged: bool


def prior_kernel(T: int, a0: float, b0: float) -> np.ndarray:
    t = np.arange(T, dtype=float)
    return b0 * np.exp(-a0 * (t[:, None] - t[None, :]) ** 2)


def _arrays(dataset: MtsDataset) -> tuple[np.ndarray, np.ndarray]:
    return dataset.filled(0.0), dataset.mask.astype(float)


def compute_prior_stats(dataset: MtsDataset, a0: float, b0: float, strict: bool = True) -> PriorStats:
    """Empirical means per (variable, timestep), pooled std per variable, and the prior kernel.

    A timestep no record observes falls back to the variable's pooled mean.
    With ``strict=False`` a variable with no observed cell at all gets mean 0
    and std 1 (the scale of standardized data) instead of raising. A zero
    pooled std is replaced by 1.
    """
    if not (a0 > 0 and b0 > 0):
        raise ValueError("a0 and b0 must be positive")
    x, r = _arrays(dataset)
    count_vt = r.sum(axis=0)
    count_v = count_vt.sum(axis=1)
    empty = count_v == 0
    if strict and np.any(empty):
        names = [dataset.variable_names[i] for i in np.flatnonzero(empty)]
        raise MixtureError(f"variables with no observed cells: {', '.join(names)}")
    safe_v = np.where(empty, 1.0, count_v)
    pooled = np.where(empty, 0.0, x.sum(axis=(0, 2)) / safe_v)
    m = np.where(count_vt > 0, x.sum(axis=0) / np.where(count_vt > 0, count_vt, 1.0), pooled[:, None])
    dev = r * (x - pooled[None, :, None])
    s = np.sqrt((dev**2).sum(axis=(0, 2)) / safe_v)
    s = np.where(empty | (s <= 1e-12), 1.0, s)
    return PriorStats(m=m, s=s, kernel=prior_kernel(dataset.n_timesteps, a0, b0), b0=b0)


# --------------------------------------------------------------------------
# Densities
# --------------------------------------------------------------------------


def log_component_density(record: MtsRecord, mu_g, sigma2_g, beta_g, use_missingness: bool = True) -> float:
    """Log density of one record under one component.

    Gaussian factors run over observed cells only, Bernoulli factors over all cells.
    """
    r = np.asarray(record.mask, dtype=bool)
    x = np.where(r, np.nan_to_num(record.values), 0.0)
    mu_g, beta_g = np.asarray(mu_g, float), np.asarray(beta_g, float)
    s2 = np.broadcast_to(np.asarray(sigma2_g, float)[:, None], r.shape)
    gauss = -0.5 * (LOG_2PI + np.log(s2) + (x - mu_g) ** 2 / s2)
    out = float(np.sum(gauss, where=r))
    if use_missingness:
        out += float(np.sum(np.where(r, np.log(beta_g), np.log1p(-beta_g))))
    return out


def component_log_densities(dataset: MtsDataset, params: MixtureParams, use_missingness: bool = True) -> np.ndarray:
    """(N, G) matrix of log component densities."""
    x, r = _arrays(dataset)
    n = x.shape[0]
    G = params.n_components
    out = np.empty((n, G))
    rf = r.reshape(n, -1)
    for g in range(G):
        s2 = params.sigma2[g][None, :, None]
        with np.errstate(over="ignore"):  # overflow becomes -inf density, reported by e_step
            sq = (x - params.mu[g][None]) ** 2 / s2 + np.log(s2) + LOG_2PI
        out[:, g] = -0.5 * (r * sq).sum(axis=(1, 2))
    if use_missingness:
        logb = np.log(params.beta).reshape(G, -1)
        log1mb = np.log1p(-params.beta).reshape(G, -1)
        out += rf @ logb.T + (1.0 - rf) @ log1mb.T
    return out


def e_step(dataset: MtsDataset, params: MixtureParams, use_missingness: bool = True) -> np.ndarray:
    """Posterior component responsibilities, one row per record."""
    with np.errstate(divide="ignore"):
        logp = np.log(params.theta)[None, :] + component_log_densities(dataset, params, use_missingness)
    top = logp.max(axis=1, keepdims=True)
    bad = ~np.isfinite(top[:, 0]) | np.isnan(logp).any(axis=1)
    if np.any(bad):
        n = int(np.flatnonzero(bad)[0])
        raise MixtureError(f"record {dataset.ids[n]!r}: no component has finite density")
    w = np.exp(logp - top)
    return w / w.sum(axis=1, keepdims=True)


# --------------------------------------------------------------------------
# Priors and objective
# --------------------------------------------------------------------------


def log_prior_mu(mu: np.ndarray, priors: PriorStats) -> float:
    """Sum over components and variables of log N(mu_gv | m_v, s_v * K)."""
    G, V, T = mu.shape
    d = (mu - priors.m[None]).reshape(G * V, T).T  # (T, G*V)
    z = linalg.solve_triangular(priors.chol, d, lower=True)
    quad = (z**2).sum(axis=0).reshape(G, V) / priors.s[None, :]
    logdet = T * np.log(priors.s)[None, :] + priors.logdet_kernel
    return float(-0.5 * (T * LOG_2PI + logdet + quad).sum())


def log_prior_sigma(sigma2: np.ndarray, priors: PriorStats, hp: MixtureHyperparams) -> float:
    """Unnormalized inverse-Gamma log prior, in the form whose maximizer is the closed-form update."""
    return float((-0.5 * hp.n0 * np.log(sigma2) - hp.n0 * priors.s[None, :] ** 2 / (2.0 * sigma2)).sum())


def log_prior_beta(beta: np.ndarray, hp: MixtureHyperparams) -> float:
    return float(((hp.c0 - 1.0) * np.log(beta) + (hp.d0 - 1.0) * np.log1p(-beta)).sum())


def log_prior(params: MixtureParams, priors: PriorStats, hp: MixtureHyperparams, use_missingness: bool = True) -> float:
    out = log_prior_mu(params.mu, priors) + log_prior_sigma(params.sigma2, priors, hp)
    if use_missingness:
        out += log_prior_beta(params.beta, hp)
    return out


def penalized_log_posterior(
    dataset: MtsDataset,
    params: MixtureParams,
    priors: PriorStats,
    hp: MixtureHyperparams,
    use_missingness: bool = True,
) -> float:
    """Observed-data log likelihood plus log priors; MAP-EM never decreases it."""
    lp = log_prior(params, priors, hp, use_missingness)
    if dataset.n_records == 0:
        return lp
    with np.errstate(divide="ignore"):
        logp = np.log(params.theta)[None, :] + component_log_densities(dataset, params, use_missingness)
    return float(logsumexp(logp, axis=1).sum()) + lp


# --------------------------------------------------------------------------
# M-step
# --------------------------------------------------------------------------


def _update_mu(x, r, pi, sigma2, priors: PriorStats) -> np.ndarray:
    """Solve (S^-1 + D) delta = c for every (g, v) without forming S^-1.

    With D = diag(w) and the Woodbury identity,
    (S^-1 + D)^-1 = S - S D^1/2 (I + D^1/2 S D^1/2)^-1 D^1/2 S,
    where the bracketed matrix has eigenvalues >= 1.
    """
    w = np.einsum("ng,nvt->gvt", pi, r) / sigma2[:, :, None]
    c = np.einsum("ng,nvt->gvt", pi, r * (x - priors.m[None])) / sigma2[:, :, None]
    K = priors.jittered_kernel
    S = priors.s[:, None, None] * K[None]  # (V, T, T)
    Sc = np.einsum("vts,gvs->gvt", S, c)
    sw = np.sqrt(w)
    B = sw[..., :, None] * S * sw[..., None, :] + np.eye(K.shape[0])
    try:
        y = np.linalg.solve(B, (sw * Sc)[..., None])[..., 0]
    except np.linalg.LinAlgError as exc:
        raise MixtureError("singular mean update system") from exc
    delta = Sc - np.einsum("vts,gvs->gvt", S, sw * y)
    bad = ~np.isfinite(delta).all(axis=2)
    if np.any(bad):
        g, v = np.argwhere(bad)[0]
        raise MixtureError(f"non-finite mean update for component {g}, variable {v}")
    return priors.m[None] + delta


def _update_beta(pi, r, hp: MixtureHyperparams) -> np.ndarray:
    """Maximize A log b + B log(1 - b) over [eps, 1 - eps] cellwise.

    When A, B > 0 the objective is concave and the maximizer is the clamped
    closed form A / (A + B). Otherwise (Beta prior with c0 or d0 below one and
    little data) the objective is monotone or convex in b, and the better
    endpoint is the maximizer.
    """
    a = hp.c0 - 1.0 + np.einsum("ng,nvt->gvt", pi, r)
    b = hp.d0 - 1.0 + np.einsum("ng,nvt->gvt", pi, 1.0 - r)
    lo, hi = BETA_EPS, 1.0 - BETA_EPS
    f_lo = a * math.log(lo) + b * math.log1p(-lo)
    f_hi = a * math.log(hi) + b * math.log1p(-hi)
    endpoint = np.where(f_hi > f_lo, hi, lo)
    interior = (a > 0) & (b > 0)
    with np.errstate(divide="ignore", invalid="ignore"):
        closed = np.clip(a / (a + b), lo, hi)
    return np.where(interior, closed, endpoint)


def m_step(
    dataset: MtsDataset,
    posteriors: np.ndarray,
    priors: PriorStats,
    hp: MixtureHyperparams,
    previous: MixtureParams,
    use_missingness: bool = True,
) -> MixtureParams:
    """Closed-form MAP updates: means (with the previous variances), then variances, rates, weights."""
    x, r = _arrays(dataset)
    pi = np.asarray(posteriors, dtype=float)
    n = x.shape[0]

    mu = _update_mu(x, r, pi, previous.sigma2, priors)

    weight = np.einsum("ng,nvt->gv", pi, r)
    resid = np.stack([np.einsum("n,nvt->v", pi[:, g], r * (x - mu[g][None]) ** 2) for g in range(pi.shape[1])])
    num = hp.n0 * priors.s[None, :] ** 2 + resid
    den = hp.n0 + weight
    with np.errstate(divide="ignore", invalid="ignore"):
        sigma2 = np.where(den > 0, num / den, priors.s[None, :] ** 2)
    sigma2 = np.maximum(sigma2, SIGMA2_FLOOR)

    beta = _update_beta(pi, r, hp) if use_missingness else previous.beta
    theta = pi.mean(axis=0) if n else previous.theta
    return MixtureParams(theta=theta, mu=mu, sigma2=sigma2, beta=beta)


# --------------------------------------------------------------------------
# Fitting
# --------------------------------------------------------------------------


def init_params(dataset: MtsDataset, G: int, priors: PriorStats, hp: MixtureHyperparams, rng) -> MixtureParams:
    """Means from G random records (gaps filled with the prior mean), empirical
    variances, Bernoulli rates at the Beta prior mean with +-5% noise, uniform weights."""
    x, r = _arrays(dataset)
    n, V, T = x.shape
    idx = rng.choice(n, size=G, replace=G > n)
    mu = np.where(r[idx] > 0, x[idx], priors.m[None])
    sigma2 = np.tile(priors.s**2, (G, 1))
    beta0 = hp.c0 / (hp.c0 + hp.d0)
    beta = np.clip(beta0 * (1.0 + rng.uniform(-0.05, 0.05, size=(G, V, T))), BETA_EPS, 1.0 - BETA_EPS)
    return MixtureParams(theta=np.full(G, 1.0 / G), mu=mu, sigma2=sigma2, beta=beta)


def fit_map_em(
    dataset: MtsDataset,
    G: int,
    hp: MixtureHyperparams,
    init: MixtureParams | None = None,
    stop: StoppingRule = StoppingRule(),
    rng_seed=None,
    use_missingness: bool = True,
    priors: PriorStats | None = None,
) -> MixtureFit:
    """Alternate E- and M-steps from ``init`` (or a seeded data-driven start) until the stopping rule fires."""
    if G < 1:
        raise ValueError("G must be >= 1")
    if dataset.n_records < 1:
        raise ValueError("cannot fit a mixture to an empty dataset")
    if G > dataset.n_records:
        warnings.warn(f"G={G} exceeds the number of records N={dataset.n_records}", stacklevel=2)
    if priors is None:
        priors = compute_prior_stats(dataset, hp.a0, hp.b0)
    rng = np.random.default_rng(rng_seed)
    params = init if init is not None else init_params(dataset, G, priors, hp, rng)

    objective = penalized_log_posterior(dataset, params, priors, hp, use_missingness)
    trace = [objective]
    converged = False
    it = 0
    for it in range(1, stop.max_iter + 1):
        pi = e_step(dataset, params, use_missingness)
        params = m_step(dataset, pi, priors, hp, params, use_missingness)
        new = penalized_log_posterior(dataset, params, priors, hp, use_missingness)
        trace.append(new)
        if not math.isfinite(new):
            raise MixtureError(f"penalized log posterior became {new} at iteration {it}")
        change = abs(new - objective) / max(abs(objective), 1e-300)
        objective = new
        if change < stop.tol:
            converged = True
            break
    pi = e_step(dataset, params, use_missingness)
    return MixtureFit(params=params, posteriors=pi, trace=trace, n_iter=it, converged=converged)
