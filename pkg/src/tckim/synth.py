"""Synthetic benchmarks with label-dependent missingness.

Two injection schemes turn a fully observed labeled dataset into one whose
missing patterns carry class information, with the strength of that
information controlled through a target Pearson correlation between the
per-record missing rates and the labels.

``label_rate``
    Each (record, variable) gets a missing rate drawn uniformly from a
    width-0.4 interval centered on 0.5 and shifted by ``E * c_v * (y - 1)``;
    every cell is then dropped independently with that rate.
``mnar_threshold``
    Rates are drawn from width-0.3 intervals (``[0.7, 1]`` shifted down for
    negatively correlated variables, ``[0.3, 0.6]`` shifted up for positively
    correlated ones) and only cells above the variable's overall mean can go
    missing, so missingness depends on the unobserved value itself.
"""

from __future__ import annotations

import logging
import math
import warnings
from dataclasses import dataclass, field

import numpy as np

from .dataset import DatasetError, MtsDataset, from_arrays

logger = logging.getLogger(__name__)

SCHEMES = ("label_rate", "mnar_threshold")
TARGET_WINDOW = 25
ENDPOINT_RANGE = (-0.2, 1.2)


class InfeasibleTargetError(ValueError):
    def __init__(self, target: float, rho_max: float):
        super().__init__(f"target correlation {target:.4f} is not below the maximum achievable {rho_max:.4f}")
        self.target = target
        self.rho_max = rho_max


# --------------------------------------------------------------------------
# Length normalization
# --------------------------------------------------------------------------


def target_length(t_max: int, window_target: int = TARGET_WINDOW) -> tuple[int, int]:
    """(output length, window size) for series of maximal length ``t_max``."""
    if t_max < 1:
        raise DatasetError("T_max must be >= 1")
    w = math.ceil(t_max / window_target)
    return math.ceil(t_max / w), w


def transform_lengths(dataset: MtsDataset, lengths=None) -> MtsDataset:
    """Bring records of unequal native length to a common short length by window means.

    ``lengths`` gives each record's native length (default: the stored T);
    cells past it are treated as missing padding. Output cells average the
    observed cells of their window and are missing when the window has none.
    """
    n, v, t = dataset.shape
    lengths = np.full(n, t) if lengths is None else np.asarray(lengths, dtype=int)
    if lengths.shape != (n,) or np.any(lengths < 0) or np.any(lengths > t):
        raise DatasetError("lengths must give one value in [0, T] per record")
    t_max = int(lengths.max(initial=0))
    if t_max == 0:
        raise DatasetError("T_max is 0: nothing to transform")
    t_out, w = target_length(t_max)

    inside = np.arange(t)[None, :] < lengths[:, None]
    mask = dataset.mask & inside[:, None, :]
    mask = mask[:, :, :t_max]
    x = np.where(mask, dataset.filled(0.0)[:, :, :t_max], 0.0)
    pad = t_out * w - t_max
    x = np.pad(x, ((0, 0), (0, 0), (0, pad))).reshape(n, v, t_out, w)
    mask = np.pad(mask, ((0, 0), (0, 0), (0, pad))).reshape(n, v, t_out, w)
    counts = mask.sum(axis=3)
    out = np.divide(x.sum(axis=3), counts, out=np.full((n, v, t_out), np.nan), where=counts > 0)
    return dataset.replace(values=out, mask=counts > 0)


# --------------------------------------------------------------------------
# Missing-rate sampling
# --------------------------------------------------------------------------


@dataclass
class InjectionReport:
    scheme: str
    target_correlation: float
    E: float
    rho_max: float
    signs: np.ndarray  # (V,) in {-1, 1}
    correlations: np.ndarray  # (V,) realized |Pearson(gamma_v, y)|
    missing_rate: float
    clip_fraction: float  # fraction of sampled rates clipped into [0, 1]
    extra: dict = field(default_factory=dict)

    @property
    def mean_correlation(self) -> float:
        return float(np.mean(self.correlations))

    def to_text(self) -> str:
        items = {
            "scheme": self.scheme,
            "target_correlation": repr(self.target_correlation),
            "E": repr(self.E),
            "rho_max": repr(self.rho_max),
            "signs": ",".join(str(int(s)) for s in self.signs),
            "correlations": ",".join(repr(float(c)) for c in self.correlations),
            "mean_correlation": repr(self.mean_correlation),
            "missing_rate": repr(self.missing_rate),
            "clip_fraction": repr(self.clip_fraction),
            **{k: str(v) for k, v in self.extra.items()},
        }
        return "".join(f"{k}={v}\n" for k, v in items.items())


def ordinal_labels(labels) -> np.ndarray:
    """Map labels to 1..N_c by sorted order."""
    labels = np.asarray(labels)
    classes = np.unique(labels)
    if classes.size < 2:
        raise DatasetError("labels are constant: correlation with missing rates is undefined")
    return np.searchsorted(classes, labels) + 1


def sample_signs(n_variables: int, rng) -> np.ndarray:
    """Random correlation signs, balanced between +1 and -1 (one extra random sign when V is odd)."""
    signs = np.resize([1, -1], n_variables)
    if n_variables % 2:
        signs[-1] = rng.choice([-1, 1])
    return rng.permutation(signs)


def stratified_uniforms(y: np.ndarray, n_variables: int, rng) -> np.ndarray:
    """U[0, 1) draws, one column per variable, Latin-hypercube stratified within each class.

    Each draw is marginally uniform, but the within-class draws cover [0, 1)
    evenly, so the realized correlation with the labels is governed by the
    rate shift rather than by sampling noise.
    """
    u = np.empty((y.size, n_variables))
    for c in np.unique(y):
        idx = np.flatnonzero(y == c)
        k = idx.size
        for v in range(n_variables):
            u[idx, v] = (rng.permutation(k) + rng.random(k)) / k
    return u


def max_shift(scheme: str, n_classes: int) -> float:
    """Largest E keeping every rate interval endpoint inside ENDPOINT_RANGE before clipping."""
    lo, hi = ENDPOINT_RANGE
    span = n_classes - 1
    if scheme == "label_rate":
        return min(hi - 0.7, 0.3 - lo) / span
    if scheme == "mnar_threshold":
        return min(hi - 0.6, 0.7 - lo) / span
    raise ValueError(f"unknown scheme {scheme!r}")


def missing_rates_for(E: float, scheme: str, y: np.ndarray, signs: np.ndarray, u: np.ndarray) -> tuple[np.ndarray, float]:
    """(N, V) missing rates clipped to [0, 1], and the fraction that needed clipping."""
    shift = E * (y[:, None] - 1.0)
    if scheme == "label_rate":
        gamma = 0.3 + signs[None, :] * shift + 0.4 * u
    elif scheme == "mnar_threshold":
        neg = 0.7 - shift + 0.3 * u
        pos = 0.3 + shift + 0.3 * u
        gamma = np.where(signs[None, :] < 0, neg, pos)
    else:
        raise ValueError(f"unknown scheme {scheme!r}")
    clipped = np.clip(gamma, 0.0, 1.0)
    return clipped, float(np.mean(clipped != gamma))


def label_correlations(gamma: np.ndarray, y: np.ndarray) -> np.ndarray:
    """|Pearson correlation| between each column of ``gamma`` and ``y``."""
    g = gamma - gamma.mean(axis=0)
    yc = y - y.mean()
    den = np.sqrt((g**2).sum(axis=0) * (yc**2).sum())
    with np.errstate(invalid="ignore", divide="ignore"):
        r = np.where(den > 0, (g * yc[:, None]).sum(axis=0) / den, 0.0)
    return np.abs(r)


def tune_E(
    labels,
    signs,
    rho_target: float,
    scheme: str = "label_rate",
    seed=0,
    u: np.ndarray | None = None,
    tol: float = 1e-3,
    max_iter: int = 60,
) -> float:
    """Bisection for the shift E whose mean realized |corr(gamma_v, y)| hits ``rho_target``.

    The uniform draws ``u`` are held fixed (drawn from ``seed`` when not
    supplied) so the objective is a deterministic function of E.
    """
    y = ordinal_labels(labels).astype(float)
    signs = np.asarray(signs)
    if not 0 <= rho_target < 1:
        raise ValueError("rho_target must be in [0, 1)")
    if u is None:
        u = stratified_uniforms(y, signs.size, np.random.default_rng(seed))

    def objective(E):
        gamma, _ = missing_rates_for(E, scheme, y, signs, u)
        return float(label_correlations(gamma, y).mean())

    if rho_target == 0:
        return 0.0
    e_max = max_shift(scheme, int(y.max()))
    rho_max = objective(e_max)
    if rho_target >= rho_max:
        raise InfeasibleTargetError(rho_target, rho_max)
    if objective(0.0) >= rho_target:
        return 0.0

    grid = np.linspace(0, e_max, 21)
    vals = np.array([objective(e) for e in grid])
    if np.any(np.diff(vals) < -1e-3):
        warnings.warn("realized correlation is not monotone in E on the check grid", stacklevel=2)

    lo, hi = 0.0, e_max
    E = 0.5 * (lo + hi)
    for _ in range(max_iter):
        E = 0.5 * (lo + hi)
        f = objective(E)
        if abs(f - rho_target) < tol:
            break
        if f < rho_target:
            lo = E
        else:
            hi = E
    return E


def _inject(dataset: MtsDataset, rho: float, seed, scheme: str, tol: float):
    if dataset.labels is None:
        raise DatasetError("injection needs labels")
    y = ordinal_labels(dataset.labels).astype(float)
    n, v, t = dataset.shape
    rng = np.random.default_rng(seed)
    signs = sample_signs(v, rng)
    u = stratified_uniforms(y, v, rng)
    rho_max = float(label_correlations(missing_rates_for(max_shift(scheme, int(y.max())), scheme, y, signs, u)[0], y).mean())
    E = tune_E(dataset.labels, signs, rho, scheme, u=u, tol=tol)
    gamma, clip_frac = missing_rates_for(E, scheme, y, signs, u)
    return y, rng, signs, gamma, clip_frac, E, rho_max


def _report(scheme, rho, E, rho_max, signs, gamma, y, out: MtsDataset, clip_frac, **extra) -> InjectionReport:
    return InjectionReport(
        scheme=scheme,
        target_correlation=float(rho),
        E=float(E),
        rho_max=rho_max,
        signs=signs,
        correlations=label_correlations(gamma, y),
        missing_rate=float((~out.mask).mean()),
        clip_fraction=clip_frac,
        extra=extra,
    )


def inject_label_rate(dataset: MtsDataset, rho: float, seed=0, tol: float = 1e-3) -> tuple[MtsDataset, InjectionReport]:
    """Drop cells independently with label-shifted per-(record, variable) rates."""
    y, rng, signs, gamma, clip_frac, E, rho_max = _inject(dataset, rho, seed, "label_rate", tol)
    drop = rng.random(dataset.shape) < gamma[:, :, None]
    out = dataset.replace(mask=dataset.mask & ~drop)
    return out, _report("label_rate", rho, E, rho_max, signs, gamma, y, out, clip_frac)


def inject_mnar_threshold(dataset: MtsDataset, rho: float, seed=0, tol: float = 1e-3) -> tuple[MtsDataset, InjectionReport]:
    """Drop only above-mean cells, with label-shifted per-(record, variable) rates."""
    y, rng, signs, gamma, clip_frac, E, rho_max = _inject(dataset, rho, seed, "mnar_threshold", tol)
    means = np.nanmean(dataset.values, axis=(0, 2))
    above = dataset.mask & (dataset.filled(-np.inf) > means[None, :, None])
    drop = above & (rng.random(dataset.shape) < gamma[:, :, None])
    out = dataset.replace(mask=dataset.mask & ~drop)
    return out, _report("mnar_threshold", rho, E, rho_max, signs, gamma, y, out, clip_frac, variable_means=",".join(repr(float(m)) for m in means))


def inject(dataset: MtsDataset, scheme: str, rho: float, seed=0, tol: float = 1e-3) -> tuple[MtsDataset, InjectionReport]:
    if scheme == "label_rate":
        return inject_label_rate(dataset, rho, seed, tol)
    if scheme == "mnar_threshold":
        return inject_mnar_threshold(dataset, rho, seed, tol)
    raise ValueError(f"unknown scheme {scheme!r}; expected one of {SCHEMES}")


# --------------------------------------------------------------------------
# Toy data
# --------------------------------------------------------------------------


def make_gaussian_toy(
    n: int, v: int, t: int, n_classes: int = 2, class_separation: float = 1.0, seed=0
) -> MtsDataset:
    """Balanced labeled MTS: a shared sinusoid per variable plus a class-specific
    cosine bump scaled by ``class_separation``, with unit Gaussian noise."""
    if min(n, v, t, n_classes) < 1:
        raise ValueError("n, v, t and n_classes must be positive")
    rng = np.random.default_rng(seed)
    labels = rng.permutation(np.arange(n) % n_classes + 1)
    phase = np.pi * np.arange(v) / v
    tt = np.arange(t) / t
    base = np.sin(2 * np.pi * tt[None, :] + phase[:, None])  # (V, T)
    bump = np.cos(np.pi * tt[None, :] + phase[:, None])
    kappa = (labels - 1) / max(n_classes - 1, 1) - 0.5
    means = base[None] + class_separation * kappa[:, None, None] * bump[None]
    values = means + rng.standard_normal((n, v, t))
    return from_arrays(values, labels=labels, variable_names=[f"x{i}" for i in range(v)])
