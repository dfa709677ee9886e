"""Command line interface.

Exit codes: 0 success, 1 input or validation error, 2 infeasible request,
3 internal numerical failure.

Ensemble and evaluation settings can come from a flat ``key = value`` config
file (``#`` starts a comment). Keys are the long flag names with dashes
replaced by underscores; flags given on the command line override the file.
"""

from __future__ import annotations

import argparse
import csv
import logging
import sys
import tempfile
import warnings
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from . import dataset as ds
from . import evaluation as ev
from . import kernel as kn
from . import mixture
from . import synth

logger = logging.getLogger("tckim")

EXIT_OK, EXIT_INPUT, EXIT_INFEASIBLE, EXIT_NUMERIC = 0, 1, 2, 3


class InputError(Exception):
    pass


class NumericalFailure(Exception):
    pass


def _int_list(text: str) -> tuple[int, ...]:
    """Parse ``"2,3"`` or a range ``"2-22"``."""
    text = text.strip()
    if "-" in text and "," not in text:
        lo, hi = text.split("-", 1)
        return tuple(range(int(lo), int(hi) + 1))
    return tuple(int(s) for s in text.split(",") if s.strip())


def _float_list(text: str) -> tuple[float, ...]:
    return tuple(float(s) for s in text.split(",") if s.strip())


def _bool(text: str) -> bool:
    low = str(text).strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


@dataclass
class RunConfig:
    mode: str = "IM"
    q_inits: int = 15
    components: tuple[int, ...] | None = None  # default: max(2, ceil(N/200)) .. +20
    subsample_fraction: float = 0.8
    min_segment_length: int = 6
    min_attributes: int = 1
    max_attributes: int | None = None
    max_iter: int = 25
    tol: float = 1e-6
    standardize: bool = True
    seed: int = 0
    workers: int = 1
    d: int = 3
    k_grid: tuple[int, ...] = ev.DEFAULT_K_GRID
    k_folds: int = 5
    score: str = "f1"
    protocol: str = "kfold"
    folds: int = 5
    ratio: float = 2.0
    test_frac: float = 0.2
    repeats: int = 10

    def validate(self) -> "RunConfig":
        if self.mode not in kn.MODES:
            raise InputError(f"mode must be one of {', '.join(kn.MODES)}")
        if self.protocol not in ("kfold", "undersample"):
            raise InputError("protocol must be 'kfold' or 'undersample'")
        if self.score not in ("f1", "accuracy"):
            raise InputError("score must be 'f1' or 'accuracy'")
        if self.d < 1 or self.workers < 1 or self.folds < 2 or self.repeats < 1:
            raise InputError("d, workers, repeats must be >= 1 and folds >= 2")
        if not 0 < self.test_frac < 1 or self.ratio <= 0:
            raise InputError("test_frac must be in (0, 1) and ratio > 0")
        try:
            self.ensemble()
        except ValueError as exc:
            raise InputError(str(exc)) from None
        return self

    def ensemble(self) -> kn.EnsembleConfig:
        return kn.EnsembleConfig(
            q_inits=self.q_inits,
            components=self.components,
            subsample_fraction=self.subsample_fraction,
            min_segment_length=self.min_segment_length,
            min_attributes=self.min_attributes,
            max_attributes=self.max_attributes,
            seed=self.seed,
            mode=self.mode,
            max_iter=self.max_iter,
            tol=self.tol,
            standardize=self.standardize,
        )

    def protocol_spec(self):
        if self.protocol == "kfold":
            return ev.KFoldProtocol(self.folds)
        return ev.UndersampleHoldout(self.ratio, self.test_frac, self.repeats)


_PARSERS = {
    "mode": str.upper,
    "q_inits": int,
    "components": _int_list,
    "subsample_fraction": float,
    "min_segment_length": int,
    "min_attributes": int,
    "max_attributes": int,
    "max_iter": int,
    "tol": float,
    "standardize": _bool,
    "seed": int,
    "workers": int,
    "d": int,
    "k_grid": _int_list,
    "k_folds": int,
    "score": str,
    "protocol": str,
    "folds": int,
    "ratio": float,
    "test_frac": float,
    "repeats": int,
}

_HELP = {
    "mode": "kernel variant: IM, TCK, B (indicators appended) or ZERO (zero imputed)",
    "q_inits": "random initializations per component count (Q)",
    "components": "component counts, e.g. '2,3' or '2-22' (default max(2,ceil(N/200)) .. +20)",
    "subsample_fraction": "fraction of records each base model is fitted on",
    "min_segment_length": "shortest time segment a base model sees",
    "min_attributes": "fewest attributes a base model sees",
    "max_attributes": "most attributes a base model sees (default all)",
    "max_iter": "EM iteration cap per base model",
    "tol": "relative objective change that stops EM",
    "standardize": "standardize variables before training (true/false)",
    "seed": "master random seed",
    "workers": "parallel worker processes for base-model fitting",
    "d": "KPCA embedding dimension",
    "k_grid": "candidate k values for kNN, e.g. '1,3,5'",
    "k_folds": "inner folds used to choose k",
    "score": "metric maximized when choosing k: f1 or accuracy",
    "protocol": "evaluation protocol: kfold or undersample",
    "folds": "outer folds for the kfold protocol",
    "ratio": "negatives kept per positive (undersample protocol)",
    "test_frac": "held-out fraction (undersample protocol)",
    "repeats": "repetitions (undersample protocol)",
}


def read_config_file(path) -> dict:
    out = {}
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise InputError(f"{path}: line {lineno}: expected 'key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        if key not in _PARSERS:
            raise InputError(f"{path}: line {lineno}: unknown key {key!r}")
        try:
            out[key] = _PARSERS[key](value)
        except ValueError as exc:
            raise InputError(f"{path}: line {lineno}: bad value for {key}: {exc}") from None
    return out


def build_run_config(args, keys) -> RunConfig:
    values = {}
    if getattr(args, "config", None):
        values.update(read_config_file(args.config))
    for key in keys:
        v = getattr(args, key, None)
        if v is not None:
            values[key] = v
    return RunConfig(**values).validate()


def _add_run_flags(p: argparse.ArgumentParser, keys) -> None:
    p.add_argument("--config", help="flat key = value config file; flags override it")
    for key in keys:
        p.add_argument("--" + key.replace("_", "-"), dest=key, type=_PARSERS[key], default=None, help=_HELP[key])


ENSEMBLE_KEYS = (
    "mode", "q_inits", "components", "subsample_fraction", "min_segment_length", "min_attributes",
    "max_attributes", "max_iter", "tol", "standardize", "seed", "workers",
)
EVAL_KEYS = ENSEMBLE_KEYS + ("d", "k_grid", "k_folds", "score", "protocol", "folds", "ratio", "test_frac", "repeats")


def _write_atomic(path, write) -> None:
    """Write via a temporary sibling so a failure never leaves a partial file."""
    path = Path(path)
    if not path.parent.exists():
        raise InputError(f"output directory does not exist: {path.parent}")
    with tempfile.NamedTemporaryFile(dir=path.parent, delete=False, suffix=".tmp") as tmp:
        tmp_path = Path(tmp.name)
    try:
        write(tmp_path)
        tmp_path.replace(path)
    finally:
        tmp_path.unlink(missing_ok=True)


def _check_writable(*paths) -> None:
    for p in paths:
        if p is not None and not Path(p).parent.exists():
            raise InputError(f"output directory does not exist: {Path(p).parent}")


def _load(path) -> ds.MtsDataset:
    try:
        return ds.load_dataset(path)
    except FileNotFoundError:
        raise InputError(f"no such file: {path}") from None


# --------------------------------------------------------------------------
# Commands
# --------------------------------------------------------------------------


def cmd_ingest(args) -> int:
    _check_writable(args.out)
    events = ds.read_long_events(args.events)
    variables = args.variables.split(",") if args.variables else None
    report = ds.IngestReport()
    data = ds.ingest_long_format(events, args.n_bins, args.horizon, variables, report)
    if args.labels:
        data = data.replace(labels=_read_labels(args.labels, data.ids))
    dropped = []
    if args.drop_missing_above is not None:
        data, dropped = ds.drop_high_missing_variables(data, args.drop_missing_above)
    rates, overall = ds.missing_rates(data)
    _write_atomic(args.out, lambda p: ds.save_dataset(data, p))
    print(f"records={data.n_records} variables={data.n_variables} bins={data.n_timesteps}")
    if report.dropped_after_horizon:
        print(f"events dropped at/after horizon: {report.dropped_after_horizon}")
    if dropped:
        print("dropped variables: " + ",".join(dropped))
    for name, r in zip(data.variable_names, rates):
        print(f"{name},{r:.4f}")
    print(f"overall,{overall:.4f}")
    return EXIT_OK


def _read_labels(path, ids) -> np.ndarray:
    table = {}
    with open(path, newline="") as fh:
        for lineno, row in enumerate(csv.reader(fh), start=1):
            if not row or (lineno == 1 and row[0].strip() == "sample_id"):
                continue
            if len(row) != 2:
                raise InputError(f"{path}: line {lineno}: expected 'sample_id,label'")
            try:
                table[row[0].strip()] = int(row[1])
            except ValueError:
                raise InputError(f"{path}: line {lineno}: non-integer label") from None
    missing = [i for i in ids if i not in table]
    if missing:
        raise InputError(f"{path}: no label for samples {', '.join(missing[:5])}")
    return np.array([table[i] for i in ids])


def cmd_inject(args) -> int:
    report_out = args.report or str(args.out) + ".report"
    _check_writable(args.out, report_out)
    data = _load(args.dataset)
    if data.labels is None:
        raise InputError("dataset has no labels")
    out, report = synth.inject(data, args.scheme, args.rho, args.seed)
    print(report.to_text(), end="")
    off = np.abs(report.correlations - args.rho)
    if args.rho > 0 and np.any(off >= 0.01):
        raise NumericalFailure(
            f"realized correlations {np.round(report.correlations, 4).tolist()} miss target {args.rho} by >= 0.01"
        )
    _write_atomic(args.out, lambda p: ds.save_dataset(out, p))
    _write_atomic(report_out, lambda p: Path(p).write_text(report.to_text()))
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = build_run_config(args, ENSEMBLE_KEYS)
    _check_writable(args.model_out, args.gram_out)
    data = _load(args.dataset)
    trained, gram = kn.train_tck_im(data, cfg.ensemble(), workers=cfg.workers)
    _write_atomic(args.model_out, lambda p: kn.save_model(trained, p))
    _write_atomic(args.gram_out, lambda p: kn.save_gram(gram, p))
    print(f"trained {gram.n_models} base models (mode={cfg.mode}); gram {gram.entries.shape[0]}x{gram.entries.shape[1]}")
    return EXIT_OK


def _load_model(path) -> kn.TrainedKernel:
    try:
        return kn.load_model(path)
    except FileNotFoundError:
        raise InputError(f"no such file: {path}") from None


def _check_geometry(trained: kn.TrainedKernel, data: ds.MtsDataset) -> None:
    if (data.n_variables, data.n_timesteps) != (trained.n_variables, trained.n_timesteps):
        raise InputError(
            f"dataset has V={data.n_variables}, T={data.n_timesteps}; "
            f"model expects V={trained.n_variables}, T={trained.n_timesteps}"
        )


def cmd_project(args) -> int:
    _check_writable(args.gram_out)
    trained = _load_model(args.model)
    data = _load(args.dataset)
    _check_geometry(trained, data)
    gram = kn.kernel_test(trained, data)
    _write_atomic(args.gram_out, lambda p: kn.save_gram(gram, p))
    print(f"cross gram {gram.entries.shape[0]}x{gram.entries.shape[1]} over {gram.n_models} models")
    return EXIT_OK


def cmd_evaluate(args) -> int:
    cfg = build_run_config(args, EVAL_KEYS)
    _check_writable(args.report_out)
    data = _load(args.dataset)
    if data.labels is None:
        raise InputError("dataset has no labels")
    report = ev.evaluate_pipeline(
        data,
        cfg.ensemble(),
        cfg.protocol_spec(),
        seed=cfg.seed,
        d=cfg.d,
        k_grid=cfg.k_grid,
        k_folds=cfg.k_folds,
        score=cfg.score,
        workers=cfg.workers,
    )
    print(report.table())
    if args.report_out:
        _write_atomic(args.report_out, lambda p: Path(p).write_text(report.to_text()))
    return EXIT_OK


BENCH_MODES = ("IM", "TCK", "B", "ZERO")


def run_benchmark(
    cfg: RunConfig,
    seeds,
    rhos,
    schemes=synth.SCHEMES,
    modes=BENCH_MODES,
    n=200,
    v=3,
    t=20,
    separation=1.0,
) -> dict:
    """Mean accuracy over seeds for every (rho, scheme, mode). Returns ``{(rho, scheme, mode): [acc per seed]}``."""
    results = {}
    for seed in seeds:
        base = synth.make_gaussian_toy(n, v, t, 2, separation, seed=seed)
        for rho in rhos:
            for scheme in schemes:
                injected, _ = synth.inject(base, scheme, rho, seed=seed)
                for mode in modes:
                    run = replace(cfg, mode=mode)
                    rep = ev.evaluate_pipeline(
                        injected,
                        run.ensemble(),
                        run.protocol_spec(),
                        seed=seed,
                        d=run.d,
                        k_grid=run.k_grid,
                        k_folds=run.k_folds,
                        score="accuracy",
                        workers=run.workers,
                    )
                    results.setdefault((rho, scheme, mode), []).append(rep.mean["accuracy"])
                    logger.info("seed=%s rho=%s scheme=%s mode=%s accuracy=%.4f", seed, rho, scheme, mode, rep.mean["accuracy"])
    return results


def format_benchmark(results, rhos, schemes, modes) -> str:
    lines = ["rho,scheme," + ",".join(modes)]
    for rho in rhos:
        for scheme in schemes:
            accs = [repr(float(np.mean(results[(rho, scheme, m)]))) for m in modes]
            lines.append(f"{rho},{scheme}," + ",".join(accs))
    return "\n".join(lines) + "\n"


def cmd_benchmark(args) -> int:
    cfg = build_run_config(args, EVAL_KEYS)
    out_dir = Path(args.out_dir)
    if not out_dir.is_dir():
        raise InputError(f"output directory does not exist: {out_dir}")
    seeds = _int_list(args.seeds) if args.seeds else tuple(range(5))
    rhos = _float_list(args.rho_list)
    for rho in rhos:
        if not 0 <= rho < 1:
            raise InputError(f"rho values must be in [0, 1), got {rho}")
    schemes = tuple(args.schemes.split(",")) if args.schemes else synth.SCHEMES
    modes = tuple(m.upper() for m in args.modes.split(",")) if args.modes else BENCH_MODES
    for s in schemes:
        if s not in synth.SCHEMES:
            raise InputError(f"unknown scheme {s!r}")
    for m in modes:
        if m not in kn.MODES:
            raise InputError(f"unknown mode {m!r}")
    if cfg.components is None:
        cfg = replace(cfg, components=(2, 3))
    if args.q_inits is None and "q_inits" not in (read_config_file(args.config) if args.config else {}):
        cfg = replace(cfg, q_inits=10)
    results = run_benchmark(cfg, seeds, rhos, schemes, modes, args.n, args.v, args.t, args.separation)
    table = format_benchmark(results, rhos, schemes, modes)
    raw = ["seed_index,rho,scheme,mode,accuracy"]
    for (rho, scheme, mode), accs in sorted(results.items()):
        raw += [f"{i},{rho},{scheme},{mode},{a!r}" for i, a in enumerate(accs)]
    _write_atomic(out_dir / "benchmark.csv", lambda p: Path(p).write_text(table))
    _write_atomic(out_dir / "benchmark_runs.csv", lambda p: Path(p).write_text("\n".join(raw) + "\n"))
    print(table, end="")
    return EXIT_OK


def cmd_embed(args) -> int:
    _check_writable(args.out)
    trained = _load_model(args.model)
    data = _load(args.dataset)
    _check_geometry(trained, data)
    state, _ = ev.kpca_fit(trained.gram().entries, args.d)
    emb = ev.kpca_project(state, kn.kernel_test(trained, data).entries)
    _write_atomic(args.out, lambda p: ev.export_embedding(emb, data.labels, p, args.format, data.ids))
    print(f"wrote {args.format} embedding of {data.n_records} records in {args.d} dimensions")
    return EXIT_OK


# --------------------------------------------------------------------------
# Entry point
# --------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="tckim", description=__doc__.split("\n\n")[0])
    parser.add_argument("--log-level", default="WARNING", help="logging level (DEBUG, INFO, WARNING)")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("ingest", help="bin long-format events into a dataset file")
    p.add_argument("events", help="CSV with header sample_id,timestamp,variable,value")
    p.add_argument("--n-bins", type=int, required=True, help="number of equal-width time bins")
    p.add_argument("--horizon", type=float, required=True, help="end of the binned window (same unit as timestamps)")
    p.add_argument("--out", required=True, help="output dataset file")
    p.add_argument("--variables", help="comma-separated variable vocabulary (default: as seen)")
    p.add_argument("--labels", help="CSV of sample_id,label")
    p.add_argument("--drop-missing-above", type=float, help="drop variables with missing rate above this")
    p.set_defaults(func=cmd_ingest)

    p = sub.add_parser("inject", help="inject label-correlated missingness into a labeled dataset")
    p.add_argument("dataset", help="labeled dataset file")
    p.add_argument("--scheme", choices=synth.SCHEMES, default="label_rate", help="injection scheme")
    p.add_argument("--rho", type=float, required=True, help="target |Pearson| between missing rates and labels")
    p.add_argument("--seed", type=int, default=0, help="random seed")
    p.add_argument("--out", required=True, help="output dataset file")
    p.add_argument("--report", help="injection report path (default: <out>.report)")
    p.set_defaults(func=cmd_inject)

    p = sub.add_parser("train", help="train the kernel ensemble; write model and in-sample Gram")
    p.add_argument("dataset", help="training dataset file")
    p.add_argument("--model-out", required=True, help="model file to write")
    p.add_argument("--gram-out", required=True, help="Gram matrix file to write")
    _add_run_flags(p, ENSEMBLE_KEYS)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("project", help="cross kernel between a trained model and new records")
    p.add_argument("model", help="model file written by train")
    p.add_argument("dataset", help="dataset of new records")
    p.add_argument("--gram-out", required=True, help="cross Gram file to write")
    p.set_defaults(func=cmd_project)

    p = sub.add_parser("evaluate", help="KPCA + kNN evaluation under k-fold or undersampling protocols")
    p.add_argument("dataset", help="labeled dataset file")
    p.add_argument("--report-out", help="write mean/se report here")
    _add_run_flags(p, EVAL_KEYS)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("benchmark", help="synthetic informative-missingness accuracy table")
    p.add_argument("--out-dir", required=True, help="existing directory for benchmark.csv")
    p.add_argument("--seeds", help="seeds, e.g. '0-4' (default 0-4)")
    p.add_argument("--rho-list", default="0.2,0.4,0.6,0.8", help="target correlations")
    p.add_argument("--schemes", help="comma-separated schemes (default both)")
    p.add_argument("--modes", help="comma-separated modes (default IM,TCK,B,ZERO)")
    p.add_argument("--n", type=int, default=200, help="records per toy dataset")
    p.add_argument("--v", type=int, default=3, help="variables per toy dataset")
    p.add_argument("--t", type=int, default=20, help="timesteps per toy dataset")
    p.add_argument("--separation", type=float, default=1.0, help="toy class separation")
    _add_run_flags(p, EVAL_KEYS)
    p.set_defaults(func=cmd_benchmark)

    p = sub.add_parser("embed", help="KPCA embedding of a dataset under a trained model")
    p.add_argument("model", help="model file written by train")
    p.add_argument("dataset", help="dataset to embed")
    p.add_argument("--out", required=True, help="output file")
    p.add_argument("--format", choices=("csv", "svg"), default="csv", help="csv table or svg scatter")
    p.add_argument("--d", type=int, default=3, help="embedding dimension")
    p.set_defaults(func=cmd_embed)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=getattr(logging, str(args.log_level).upper(), logging.WARNING),
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        with warnings.catch_warnings():
            warnings.simplefilter("default")
            return args.func(args)
    except synth.InfeasibleTargetError as exc:
        print(f"error: {exc} (rho_max={exc.rho_max:.4f})", file=sys.stderr)
        return EXIT_INFEASIBLE
    except (NumericalFailure, mixture.MixtureError, kn.KernelError, np.linalg.LinAlgError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (InputError, ds.DatasetError, ev.EvaluationError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
