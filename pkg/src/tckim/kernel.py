"""Ensemble time series cluster kernel with informative missingness.

Many mixture models are fitted on random views of the data (record subsample,
attribute subset, contiguous time segment, random hyperparameters and
initialization). Every fitted model assigns each record a posterior over its
components; the kernel adds up the cosine similarities of those posterior
vectors over all successful models.

Modes
-----
``IM``    mixed-mode mixture (values + missingness indicators)
``TCK``   values only, missing cells ignored
``B``     values only, on data with the indicator series appended
``ZERO``  values only, on zero-imputed data
"""

from __future__ import annotations

import io
import json
import logging
import math
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import mixture
from .dataset import (
    MtsDataset,
    StandardizationStats,
    apply_standardization,
    concat_missingness_indicators,
    impute,
    standardize,
)

logger = logging.getLogger(__name__)

MODES = ("IM", "TCK", "B", "ZERO")
MODEL_MAGIC = b"TCKIMMDL"
MODEL_VERSION = 1

DEFAULT_RANGES = {
    "a0": (0.001, 1.0),
    "b0": (0.005, 0.2),
    "n0": (0.001, 0.2),
    "cd": (0.1, 2.0),  # c0 and d0 are drawn from [lo / N, hi / N]
}


class KernelError(RuntimeError):
    pass


def default_components(n: int, width: int = 20) -> tuple[int, ...]:
    lo = max(2, math.ceil(n / 200))
    return tuple(range(lo, lo + width + 1))


@dataclass(frozen=True)
class EnsembleConfig:
    q_inits: int = 15
    components: tuple[int, ...] | None = None  # None -> default_components(N)
    subsample_fraction: float = 0.8
    min_segment_length: int = 6
    min_attributes: int = 1
    max_attributes: int | None = None
    hyperparam_ranges: dict = field(default_factory=lambda: dict(DEFAULT_RANGES))
    seed: int = 0
    mode: str = "IM"
    max_iter: int = 25
    tol: float = 1e-6
    standardize: bool = True

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.q_inits < 1:
            raise ValueError("q_inits must be >= 1")
        if self.components is not None:
            comps = tuple(int(c) for c in self.components)
            if not comps or min(comps) < 1:
                raise ValueError("components must be a nonempty set of integers >= 1")
            object.__setattr__(self, "components", comps)
        if not 0 < self.subsample_fraction <= 1:
            raise ValueError("subsample_fraction must be in (0, 1]")
        if self.min_segment_length < 1 or self.min_attributes < 1:
            raise ValueError("min_segment_length and min_attributes must be >= 1")

    def resolved_components(self, n: int) -> tuple[int, ...]:
        return self.components if self.components is not None else default_components(n)


@dataclass(frozen=True)
class BaseModelSpec:
    q1: int
    q2: int  # number of mixture components
    hyperparams: mixture.MixtureHyperparams
    segment: tuple[int, int]  # half-open [start, stop)
    attributes: tuple[int, ...]
    samples: tuple[int, ...]
    init_seed: int

    def to_json(self) -> dict:
        d = asdict(self)
        d["hyperparams"] = asdict(self.hyperparams)
        return d

    @classmethod
    def from_json(cls, d: dict) -> "BaseModelSpec":
        return cls(
            q1=d["q1"],
            q2=d["q2"],
            hyperparams=mixture.MixtureHyperparams(**d["hyperparams"]),
            segment=tuple(d["segment"]),
            attributes=tuple(d["attributes"]),
            samples=tuple(d["samples"]),
            init_seed=d["init_seed"],
        )


@dataclass(eq=False)
class BaseModel:
    spec: BaseModelSpec
    params: mixture.MixtureParams
    prior_mean: np.ndarray
    prior_std: np.ndarray
    posteriors: np.ndarray  # (N_train, q2)
    n_iter: int
    objective: float

    def view(self, data: MtsDataset, records=None) -> MtsDataset:
        return data.subset(records=records, variables=self.spec.attributes, timesteps=range(*self.spec.segment))


@dataclass(eq=False)
class GramMatrix:
    entries: np.ndarray
    kind: str  # "in" or "cross"
    n_models: int

    def __array__(self, dtype=None, copy=None):
        return self.entries if dtype is None else self.entries.astype(dtype)


@dataclass(eq=False)
class TrainedKernel:
    models: list[BaseModel]
    stats: StandardizationStats | None
    mode: str
    n_variables: int
    n_timesteps: int
    variable_names: tuple[str, ...]
    config: EnsembleConfig

    @property
    def n_train(self) -> int:
        return self.models[0].posteriors.shape[0] if self.models else 0

    def gram(self) -> GramMatrix:
        """In-sample Gram matrix rebuilt from the stored training posteriors."""
        if not self.models:
            raise KernelError("kernel has no trained models")
        return GramMatrix(_accumulate(self.models), "in", len(self.models))


# --------------------------------------------------------------------------
# Plan
# --------------------------------------------------------------------------


def model_rng(seed: int, q1: int, q2: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, q2, q1]))


def sample_ensemble_plan(config: EnsembleConfig, n: int, v: int, t: int) -> list[BaseModelSpec]:
    """One spec per (q1, q2); each spec draws from its own stream so the plan is order independent."""
    if n < 1:
        raise KernelError("need at least one record")
    seg_min = min(config.min_segment_length, t)
    if config.min_segment_length > t:
        raise KernelError(f"min_segment_length={config.min_segment_length} exceeds T={t}")
    max_attr = v if config.max_attributes is None else min(config.max_attributes, v)
    if config.min_attributes > max_attr:
        raise KernelError(f"min_attributes={config.min_attributes} exceeds available attributes {max_attr}")
    ranges = {**DEFAULT_RANGES, **config.hyperparam_ranges}
    n_sub = max(1, math.ceil(config.subsample_fraction * n))

    plan = []
    for q2 in config.resolved_components(n):
        for q1 in range(config.q_inits):
            rng = model_rng(config.seed, q1, q2)
            hp = mixture.MixtureHyperparams(
                a0=rng.uniform(*ranges["a0"]),
                b0=rng.uniform(*ranges["b0"]),
                c0=rng.uniform(ranges["cd"][0] / n, ranges["cd"][1] / n),
                d0=rng.uniform(ranges["cd"][0] / n, ranges["cd"][1] / n),
                n0=rng.uniform(*ranges["n0"]),
            )
            length = int(rng.integers(seg_min, t + 1))
            start = int(rng.integers(0, t - length + 1))
            n_attr = int(rng.integers(config.min_attributes, max_attr + 1))
            attrs = np.sort(rng.choice(v, size=n_attr, replace=False))
            samples = np.sort(rng.choice(n, size=n_sub, replace=False))
            plan.append(
                BaseModelSpec(
                    q1=q1,
                    q2=q2,
                    hyperparams=hp,
                    segment=(start, start + length),
                    attributes=tuple(int(a) for a in attrs),
                    samples=tuple(int(s) for s in samples),
                    init_seed=int(rng.integers(2**63)),
                )
            )
    return plan


# --------------------------------------------------------------------------
# Training
# --------------------------------------------------------------------------


def prepare(dataset: MtsDataset, mode: str) -> MtsDataset:
    """Mode-specific transform applied after standardization."""
    if mode == "B":
        return concat_missingness_indicators(dataset)
    if mode == "ZERO":
        return impute(dataset, "zero")
    return dataset


def _fit_base_model(data: MtsDataset, spec: BaseModelSpec, use_missingness: bool, stop: mixture.StoppingRule):
    """Fit one base model; returns None on numerical failure."""
    full = data.subset(variables=spec.attributes, timesteps=range(*spec.segment))
    view = full.subset(records=spec.samples)
    hp = spec.hyperparams
    try:
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            priors = mixture.compute_prior_stats(view, hp.a0, hp.b0, strict=False)
            fit = mixture.fit_map_em(
                view, spec.q2, hp, stop=stop, rng_seed=spec.init_seed, use_missingness=use_missingness, priors=priors
            )
            post = mixture.e_step(full, fit.params, use_missingness)
    except (mixture.MixtureError, np.linalg.LinAlgError, FloatingPointError) as exc:
        return spec, None, str(exc)
    model = BaseModel(
        spec=spec,
        params=fit.params,
        prior_mean=priors.m,
        prior_std=priors.s,
        posteriors=post,
        n_iter=fit.n_iter,
        objective=fit.trace[-1],
    )
    return spec, model, ""


_WORKER_DATA: dict = {}


def _init_worker(data, use_missingness, stop):
    _WORKER_DATA.update(data=data, use_missingness=use_missingness, stop=stop)


def _fit_in_worker(spec):
    return _fit_base_model(_WORKER_DATA["data"], spec, _WORKER_DATA["use_missingness"], _WORKER_DATA["stop"])


def _normalized(post: np.ndarray) -> np.ndarray:
    norm = np.linalg.norm(post, axis=1, keepdims=True)
    return np.divide(post, norm, out=np.zeros_like(post), where=norm > 0)


def _accumulate(models, other_posteriors=None) -> np.ndarray:
    """Sum of cosine similarities over models, reduced in plan order."""
    acc = None
    for i, model in enumerate(models):
        a = _normalized(model.posteriors)
        b = a if other_posteriors is None else _normalized(other_posteriors[i])
        term = np.clip(a @ b.T, 0.0, 1.0)
        acc = term if acc is None else acc + term
    return acc


def train_tck_im(
    dataset: MtsDataset,
    config: EnsembleConfig = EnsembleConfig(),
    workers: int = 1,
    plan: list[BaseModelSpec] | None = None,
) -> tuple[TrainedKernel, GramMatrix]:
    """Fit the ensemble and return it with the in-sample Gram matrix.

    Base models that fail numerically are skipped with a warning; the Gram
    diagonal then equals the number of successful models. Results do not
    depend on ``workers``: per-model randomness comes from the plan and the
    reduction runs in plan order.
    """
    n, v, t = dataset.shape
    if n < 2:
        raise KernelError("need at least two records to train the kernel")
    stats = None
    data = dataset
    if config.standardize:
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            data, stats = standardize(dataset)
    data = prepare(data, config.mode)
    if plan is None:
        plan = sample_ensemble_plan(config, n, data.n_variables, t)
    use_missingness = config.mode == "IM"
    stop = mixture.StoppingRule(max_iter=config.max_iter, tol=config.tol)

    if workers > 1 and len(plan) > 1:
        with ProcessPoolExecutor(
            max_workers=workers, initializer=_init_worker, initargs=(data, use_missingness, stop)
        ) as pool:
            results = list(pool.map(_fit_in_worker, plan, chunksize=max(1, len(plan) // (4 * workers))))
    else:
        results = [_fit_base_model(data, spec, use_missingness, stop) for spec in plan]

    models = []
    for spec, model, err in results:
        if model is None:
            logger.warning("base model q=(%d,%d) G=%d failed: %s", spec.q1, spec.q2, spec.q2, err)
            continue
        logger.info(
            "base model q=(%d,%d) G=%d ok iterations=%d objective=%.6g",
            spec.q1, spec.q2, spec.q2, model.n_iter, model.objective,
        )
        models.append(model)
    if not models:
        raise KernelError("all base models failed")
    if len(models) < len(plan):
        warnings.warn(f"{len(plan) - len(models)} of {len(plan)} base models failed and were skipped", stacklevel=2)
    logger.info("trained %d of %d base models", len(models), len(plan))

    trained = TrainedKernel(
        models=models,
        stats=stats,
        mode=config.mode,
        n_variables=v,
        n_timesteps=t,
        variable_names=dataset.variable_names,
        config=config,
    )
    return trained, GramMatrix(_accumulate(models), "in", len(models))


def kernel_test(trained: TrainedKernel, test: MtsDataset) -> GramMatrix:
    """N_train x M cross kernel between the training records and ``test``."""
    if not trained.models:
        raise KernelError("kernel has no trained models")
    if test.n_variables != trained.n_variables or test.n_timesteps != trained.n_timesteps:
        raise KernelError(
            f"test geometry V={test.n_variables}, T={test.n_timesteps} does not match "
            f"training V={trained.n_variables}, T={trained.n_timesteps}"
        )
    if test.n_records == 0:
        return GramMatrix(np.zeros((trained.n_train, 0)), "cross", len(trained.models))
    data = test if trained.stats is None else apply_standardization(test, trained.stats)
    data = prepare(data, trained.mode)
    use_missingness = trained.mode == "IM"
    test_post = [mixture.e_step(m.view(data), m.params, use_missingness) for m in trained.models]
    return GramMatrix(_accumulate(trained.models, test_post), "cross", len(trained.models))


def linear_kernel(a: MtsDataset, b: MtsDataset | None = None) -> GramMatrix:
    """Inner products of the flattened value matrices; both datasets must be fully observed."""
    for d in (a, b):
        if d is not None and not d.mask.all():
            raise KernelError("linear kernel requires complete data; impute first")
    xa = a.values.reshape(a.n_records, -1)
    if b is None:
        return GramMatrix(xa @ xa.T, "in", 1)
    return GramMatrix(xa @ b.values.reshape(b.n_records, -1).T, "cross", 1)


# --------------------------------------------------------------------------
# Serialization
# --------------------------------------------------------------------------


def save_gram(gram: GramMatrix, path) -> None:
    rows, cols = gram.entries.shape
    lines = [f"#gram kind={gram.kind} rows={rows} cols={cols} models={gram.n_models}"]
    lines += [",".join(repr(float(x)) for x in row) for row in gram.entries]
    Path(path).write_text("\n".join(lines) + "\n")


def load_gram(path) -> GramMatrix:
    lines = Path(path).read_text().splitlines()
    if not lines or not lines[0].startswith("#gram"):
        raise KernelError("missing '#gram' header")
    try:
        header = dict(tok.split("=", 1) for tok in lines[0].split()[1:])
        rows, cols, models = int(header["rows"]), int(header["cols"]), int(header["models"])
        kind = header["kind"]
    except (KeyError, ValueError):
        raise KernelError(f"malformed gram header {lines[0]!r}") from None
    body = [ln for ln in lines[1:] if ln.strip()]
    if len(body) != rows:
        raise KernelError(f"expected {rows} rows, found {len(body)}")
    entries = np.array([[float(x) for x in ln.split(",")] for ln in body]).reshape(rows, cols)
    return GramMatrix(entries, kind, models)


def _config_to_json(config: EnsembleConfig) -> dict:
    d = asdict(config)
    d["hyperparam_ranges"] = {k: list(v) for k, v in config.hyperparam_ranges.items()}
    return d


def _config_from_json(d: dict) -> EnsembleConfig:
    d = dict(d)
    d["hyperparam_ranges"] = {k: tuple(v) for k, v in d["hyperparam_ranges"].items()}
    if d["components"] is not None:
        d["components"] = tuple(d["components"])
    return EnsembleConfig(**d)


def save_model(trained: TrainedKernel, path) -> None:
    """Binary container: 8-byte magic, 4-byte version, then an ``.npz`` archive with a JSON manifest."""
    if not trained.models:
        raise KernelError("nothing trained: refusing to save an empty ensemble")
    meta = {
        "mode": trained.mode,
        "n_variables": trained.n_variables,
        "n_timesteps": trained.n_timesteps,
        "variable_names": list(trained.variable_names),
        "config": _config_to_json(trained.config),
        "models": [
            {"spec": m.spec.to_json(), "n_iter": m.n_iter, "objective": m.objective} for m in trained.models
        ],
    }
    arrays = {"meta": np.array(json.dumps(meta))}
    if trained.stats is not None:
        arrays["stats_mean"] = trained.stats.mean
        arrays["stats_std"] = trained.stats.std
    for i, m in enumerate(trained.models):
        for k, a in m.params.arrays().items():
            arrays[f"m{i}_{k}"] = a
        arrays[f"m{i}_posteriors"] = m.posteriors
        arrays[f"m{i}_prior_mean"] = m.prior_mean
        arrays[f"m{i}_prior_std"] = m.prior_std
    buf = io.BytesIO()
    np.savez(buf, **arrays)
    with open(path, "wb") as fh:
        fh.write(MODEL_MAGIC)
        fh.write(MODEL_VERSION.to_bytes(4, "little"))
        fh.write(buf.getvalue())


def load_model(path) -> TrainedKernel:
    raw = Path(path).read_bytes()
    if raw[: len(MODEL_MAGIC)] != MODEL_MAGIC:
        raise KernelError(f"{path}: not a model file (bad magic bytes)")
    version = int.from_bytes(raw[len(MODEL_MAGIC) : len(MODEL_MAGIC) + 4], "little")
    if version != MODEL_VERSION:
        raise KernelError(f"{path}: unsupported model version {version}")
    try:
        z = np.load(io.BytesIO(raw[len(MODEL_MAGIC) + 4 :]), allow_pickle=False)
        meta = json.loads(str(z["meta"]))
        stats = StandardizationStats(z["stats_mean"], z["stats_std"]) if "stats_mean" in z else None
        models = []
        for i, entry in enumerate(meta["models"]):
            params = mixture.MixtureParams(**{k: z[f"m{i}_{k}"] for k in ("theta", "mu", "sigma2", "beta")})
            models.append(
                BaseModel(
                    spec=BaseModelSpec.from_json(entry["spec"]),
                    params=params,
                    prior_mean=z[f"m{i}_prior_mean"],
                    prior_std=z[f"m{i}_prior_std"],
                    posteriors=z[f"m{i}_posteriors"],
                    n_iter=entry["n_iter"],
                    objective=entry["objective"],
                )
            )
    except (KeyError, ValueError, OSError) as exc:
        raise KernelError(f"{path}: corrupt model file ({exc})") from exc
    if not models:
        raise KernelError(f"{path}: model file contains no base models")
    return TrainedKernel(
        models=models,
        stats=stats,
        mode=meta["mode"],
        n_variables=meta["n_variables"],
        n_timesteps=meta["n_timesteps"],
        variable_names=tuple(meta["variable_names"]),
        config=_config_from_json(meta["config"]),
    )
