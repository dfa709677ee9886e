"""Kernel PCA embedding, kNN classification and the evaluation protocols."""

from __future__ import annotations

import csv
import logging
import math
import warnings
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
from scipy.spatial.distance import cdist
from sklearn.model_selection import KFold, StratifiedKFold, train_test_split

from .dataset import MtsDataset
from .kernel import EnsembleConfig, kernel_test, train_tck_im

logger = logging.getLogger(__name__)

DEFAULT_K_GRID = (1, 3, 5, 7, 9, 11, 15, 21)
RANK_TOL = 1e-10
METRIC_NAMES = ("sensitivity", "specificity", "precision", "f1", "accuracy")


class EvaluationError(ValueError):
    pass


# --------------------------------------------------------------------------
# Kernel PCA
# --------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class KpcaState:
    row_means: np.ndarray  # (N,) training kernel row means
    grand_mean: float
    eigenvalues: np.ndarray  # (d,) descending
    eigenvectors: np.ndarray  # (N, d)

    @property
    def d(self) -> int:
        return self.eigenvalues.shape[0]


def center_kernel(K: np.ndarray) -> np.ndarray:
    row = K.mean(axis=1)
    return K - row[:, None] - row[None, :] + K.mean()


def kpca_fit(K, d: int = 3) -> tuple[KpcaState, np.ndarray]:
    """Embed the training records with the top-``d`` eigenpairs of the double-centered kernel.

    Each eigenvector is signed so that its largest-magnitude entry is positive.
    """
    K = np.asarray(K, dtype=float)
    n = K.shape[0]
    if K.shape != (n, n) or not np.allclose(K, K.T, rtol=0, atol=1e-9 * max(1.0, np.abs(K).max(initial=0))):
        raise EvaluationError("kernel matrix must be square and symmetric")
    if d < 1 or d > n:
        raise EvaluationError(f"embedding dimension d={d} must be in [1, N={n}]")
    Kc = center_kernel(K)
    Kc = 0.5 * (Kc + Kc.T)
    vals, vecs = np.linalg.eigh(Kc)
    order = np.argsort(vals)[::-1]
    vals, vecs = vals[order], vecs[:, order]
    trace = float(np.trace(Kc))
    rank = int(np.sum(vals > RANK_TOL * trace)) if trace > 0 else 0
    if d > rank:
        raise EvaluationError(f"requested d={d} but the centered kernel has numerical rank {rank}")
    vals, vecs = vals[:d], vecs[:, :d].copy()
    peak = np.argmax(np.abs(vecs), axis=0)
    vecs *= np.sign(vecs[peak, np.arange(d)])[None, :]
    state = KpcaState(row_means=K.mean(axis=1), grand_mean=float(K.mean()), eigenvalues=vals, eigenvectors=vecs)
    return state, vecs * np.sqrt(vals)[None, :]


def kpca_project(state: KpcaState, K_cross) -> np.ndarray:
    """Out-of-sample projection of M new points given their N x M kernel against the training set."""
    K_cross = np.asarray(K_cross, dtype=float)
    if K_cross.ndim != 2 or K_cross.shape[0] != state.row_means.shape[0]:
        raise EvaluationError(
            f"cross kernel has shape {K_cross.shape}, expected ({state.row_means.shape[0]}, M)"
        )
    if K_cross.shape[1] == 0:
        return np.zeros((0, state.d))
    Kc = K_cross - state.row_means[:, None] - K_cross.mean(axis=0)[None, :] + state.grand_mean
    return Kc.T @ state.eigenvectors / np.sqrt(state.eigenvalues)[None, :]


# --------------------------------------------------------------------------
# kNN
# --------------------------------------------------------------------------


def knn_classify(train_embed, train_labels, test_embed, k: int) -> np.ndarray:
    """Euclidean kNN majority vote.

    Ties between labels go to the smaller summed neighbor distance, then to
    the smaller label.
    """
    train_embed = np.asarray(train_embed, dtype=float)
    train_labels = np.asarray(train_labels)
    test_embed = np.asarray(test_embed, dtype=float)
    n = train_embed.shape[0]
    if n == 0:
        raise EvaluationError("empty training set")
    if not 1 <= k <= n:
        raise EvaluationError(f"k={k} must be in [1, {n}]")
    if test_embed.shape[0] == 0:
        return np.zeros(0, dtype=train_labels.dtype)
    dist = cdist(test_embed, train_embed)
    nearest = np.argsort(dist, axis=1, kind="stable")[:, :k]
    classes = np.unique(train_labels)
    pred = np.empty(test_embed.shape[0], dtype=train_labels.dtype)
    for i, idx in enumerate(nearest):
        lab = train_labels[idx]
        d = dist[i, idx]
        votes = np.array([(lab == c).sum() for c in classes])
        spread = np.array([d[lab == c].sum() for c in classes])
        # lexsort: last key is primary
        best = np.lexsort((classes, spread, -votes))[0]
        pred[i] = classes[best]
    return pred


# --------------------------------------------------------------------------
# Metrics
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class ClassificationMetrics:
    tp: int
    fp: int
    fn: int
    tn: int
    sensitivity: float
    specificity: float
    precision: float
    f1: float
    accuracy: float
    degenerate: tuple[str, ...] = ()  # metrics whose ratio was 0/0 and reported as 0


def _ratio(num: int, den: int, name: str, flags: list) -> float:
    if den == 0:
        flags.append(name)
        return 0.0
    return num / den


def metrics(y_true, y_pred, positive_label=None) -> ClassificationMetrics:
    """Binary confusion-matrix metrics; 0/0 ratios are reported as 0 and flagged.

    Accuracy is the plain fraction correct and is valid for any number of classes.
    """
    y_true, y_pred = np.asarray(y_true), np.asarray(y_pred)
    if y_true.shape != y_pred.shape or y_true.size == 0:
        raise EvaluationError("y_true and y_pred must be nonempty and of equal length")
    if positive_label is None:
        positive_label = np.max(y_true)
    pos_t, pos_p = y_true == positive_label, y_pred == positive_label
    tp = int(np.sum(pos_t & pos_p))
    fp = int(np.sum(~pos_t & pos_p))
    fn = int(np.sum(pos_t & ~pos_p))
    tn = int(np.sum(~pos_t & ~pos_p))
    flags: list[str] = []
    sens = _ratio(tp, tp + fn, "sensitivity", flags)
    spec = _ratio(tn, tn + fp, "specificity", flags)
    prec = _ratio(tp, tp + fp, "precision", flags)
    if prec + sens == 0:
        flags.append("f1")
        f1 = 0.0
    else:
        f1 = 2 * prec * sens / (prec + sens)
    acc = float(np.mean(y_true == y_pred))
    return ClassificationMetrics(tp, fp, fn, tn, sens, spec, prec, f1, acc, tuple(flags))


# --------------------------------------------------------------------------
# Splitting and model selection
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class KFoldProtocol:
    folds: int = 5


@dataclass(frozen=True)
class UndersampleHoldout:
    ratio: float = 2.0  # negatives kept per positive
    test_fraction: float = 0.2
    repeats: int = 10


def _stratifiable(labels: np.ndarray, folds: int) -> bool:
    _, counts = np.unique(labels, return_counts=True)
    return counts.size > 1 and counts.min() >= folds


def kfold_splits(labels, folds: int, seed: int) -> list[tuple[np.ndarray, np.ndarray]]:
    """Shuffled folds, stratified when every class has at least ``folds`` members."""
    labels = np.asarray(labels)
    n = labels.size
    if not 2 <= folds <= n:
        raise EvaluationError(f"folds={folds} must be in [2, N={n}]")
    splitter = (
        StratifiedKFold(folds, shuffle=True, random_state=seed)
        if _stratifiable(labels, folds)
        else KFold(folds, shuffle=True, random_state=seed)
    )
    return [(tr, te) for tr, te in splitter.split(np.zeros(n), labels)]


def undersample_splits(labels, protocol: UndersampleHoldout, seed: int, positive_label) -> list[tuple[np.ndarray, np.ndarray]]:
    """Per repeat: keep all positives plus ``ratio`` random negatives per positive, then hold out a stratified test set."""
    labels = np.asarray(labels)
    pos = np.flatnonzero(labels == positive_label)
    neg = np.flatnonzero(labels != positive_label)
    if pos.size == 0 or neg.size == 0:
        raise EvaluationError("undersampling needs both classes")
    splits = []
    for rep in range(protocol.repeats):
        rng = np.random.default_rng(np.random.SeedSequence([seed, rep]))
        n_neg = min(neg.size, int(round(protocol.ratio * pos.size)))
        keep = np.sort(np.concatenate([pos, rng.choice(neg, size=n_neg, replace=False)]))
        strat = labels[keep] if _stratifiable(labels[keep], 2) else None
        tr, te = train_test_split(
            keep, test_size=protocol.test_fraction, random_state=int(rng.integers(2**31)), stratify=strat
        )
        splits.append((np.sort(tr), np.sort(te)))
    return splits


def select_k_cv(
    embed,
    labels,
    folds: int = 5,
    k_grid: Sequence[int] = DEFAULT_K_GRID,
    seed: int = 0,
    positive_label=None,
    score: str = "f1",
) -> int:
    """Pick k from ``k_grid`` maximizing mean cross-validated ``score``; ties go to the smallest k."""
    embed, labels = np.asarray(embed, dtype=float), np.asarray(labels)
    grid = sorted(set(int(k) for k in k_grid))
    if len(grid) == 1:
        return grid[0]
    folds = min(folds, labels.size)
    if folds < 2:
        return grid[0]
    splits = kfold_splits(labels, folds, seed)
    smallest_train = min(tr.size for tr, _ in splits)
    grid = [k for k in grid if k <= smallest_train] or [1]
    best_k, best = grid[0], -math.inf
    for k in grid:
        scores = []
        for tr, te in splits:
            pred = knn_classify(embed[tr], labels[tr], embed[te], k)
            scores.append(getattr(metrics(labels[te], pred, positive_label), score))
        s = float(np.mean(scores))
        if s > best:
            best_k, best = k, s
    return best_k


# --------------------------------------------------------------------------
# Pipeline
# --------------------------------------------------------------------------


@dataclass
class EvalReport:
    splits: list[ClassificationMetrics]
    ks: list[int]
    mean: dict[str, float] = field(default_factory=dict)
    se: dict[str, float] = field(default_factory=dict)

    def __post_init__(self):
        n = len(self.splits)
        for name in METRIC_NAMES:
            vals = np.array([getattr(m, name) for m in self.splits])
            self.mean[name] = float(vals.mean()) if n else 0.0
            self.se[name] = float(vals.std(ddof=1) / math.sqrt(n)) if n > 1 else 0.0

    def to_text(self) -> str:
        lines = ["metric,mean,se"]
        lines += [f"{name},{self.mean[name]!r},{self.se[name]!r}" for name in METRIC_NAMES]
        return "\n".join(lines) + "\n"

    def table(self) -> str:
        cols = ("sensitivity", "specificity", "f1", "accuracy")
        head = " | ".join(f"{c:>17}" for c in cols)
        row = " | ".join(f"{self.mean[c]:.3f} +- {self.se[c]:.3f}".rjust(17) for c in cols)
        return f"{head}\n{row}"


def _embed_split(train: MtsDataset, test: MtsDataset, config: EnsembleConfig, d: int, workers: int):
    trained, K = train_tck_im(train, config, workers=workers)
    K_test = kernel_test(trained, test)
    try:
        state, emb = kpca_fit(K.entries, d)
    except EvaluationError:
        rank_d = _achievable_rank(K.entries, d)
        warnings.warn(f"kernel rank below d={d}; embedding in {rank_d} dimensions", stacklevel=3)
        state, emb = kpca_fit(K.entries, rank_d)
    return trained, emb, kpca_project(state, K_test.entries)


def _achievable_rank(K: np.ndarray, d: int) -> int:
    vals = np.linalg.eigvalsh(center_kernel(K))
    trace = vals.sum()
    rank = int(np.sum(vals > RANK_TOL * trace)) if trace > 0 else 0
    if rank < 1:
        raise EvaluationError("training kernel is constant after centering; cannot embed")
    return min(rank, d)


def evaluate_pipeline(
    dataset: MtsDataset,
    config: EnsembleConfig,
    protocol: KFoldProtocol | UndersampleHoldout = KFoldProtocol(),
    seed: int = 0,
    d: int = 3,
    k_grid: Sequence[int] = DEFAULT_K_GRID,
    k_folds: int = 5,
    positive_label=None,
    score: str = "f1",
    workers: int = 1,
    audit: Callable[[dict], None] | None = None,
) -> EvalReport:
    """Train the kernel per split, embed with KPCA, choose k by inner CV, classify the held-out records.

    Each split trains with its own seed derived from ``(seed, split index)``.
    ``audit`` (if given) receives, per split, the record ids used for kernel
    training, kNN training and testing.
    """
    if dataset.labels is None:
        raise EvaluationError("dataset has no labels")
    labels = dataset.labels
    if np.unique(labels).size < 2:
        raise EvaluationError("dataset has a single class")
    if positive_label is None:
        positive_label = int(labels.max())

    if isinstance(protocol, KFoldProtocol):
        splits = kfold_splits(labels, protocol.folds, seed)
    else:
        splits = undersample_splits(labels, protocol, seed, positive_label)

    results, ks = [], []
    for i, (tr, te) in enumerate(splits):
        split_seed = int(np.random.SeedSequence([seed, i]).generate_state(1)[0])
        train, test = dataset.subset(records=tr), dataset.subset(records=te)
        trained, emb_tr, emb_te = _embed_split(train, test, replace(config, seed=split_seed), d, workers)
        k = select_k_cv(emb_tr, train.labels, k_folds, k_grid, split_seed, positive_label, score)
        pred = knn_classify(emb_tr, train.labels, emb_te, k)
        m = metrics(test.labels, pred, positive_label)
        if audit is not None:
            audit(
                {
                    "split": i,
                    "kernel_train_ids": tuple(train.ids[j] for j in sorted({s for mdl in trained.models for s in mdl.spec.samples})),
                    "knn_train_ids": train.ids,
                    "test_ids": test.ids,
                }
            )
        logger.info("split %d: k=%d f1=%.3f accuracy=%.3f", i, k, m.f1, m.accuracy)
        results.append(m)
        ks.append(k)
    return EvalReport(results, ks)


# --------------------------------------------------------------------------
# Export
# --------------------------------------------------------------------------


def export_embedding(embedding, labels, path, fmt: str = "csv", ids: Sequence[str] | None = None) -> None:
    """Write an embedding as ``id,dim1..dimd,label`` CSV or as an SVG scatter of the first two dimensions."""
    embedding = np.asarray(embedding, dtype=float)
    if embedding.ndim != 2:
        raise EvaluationError("embedding must be a 2-D array")
    n, d = embedding.shape
    ids = [str(i) for i in range(n)] if ids is None else list(ids)
    if fmt == "csv":
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["id", *[f"dim{j + 1}" for j in range(d)], "label"])
            for i in range(n):
                lab = "" if labels is None else str(labels[i])
                w.writerow([ids[i], *[repr(float(x)) for x in embedding[i]], lab])
    elif fmt == "svg":
        if d < 2:
            raise EvaluationError("svg scatter needs at least 2 embedding dimensions")
        _scatter_svg(embedding, labels, path)
    else:
        raise EvaluationError(f"unknown export format {fmt!r}")


def _scatter_svg(embedding, labels, path) -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(5, 5))
    if labels is None:
        ax.scatter(embedding[:, 0], embedding[:, 1], s=12, color="0.3")
    else:
        labels = np.asarray(labels)
        for c in np.unique(labels):
            sel = labels == c
            ax.scatter(embedding[sel, 0], embedding[sel, 1], s=12, label=str(c), alpha=0.8)
        ax.legend(title="label", frameon=False)
    ax.set_xlabel("dim1")
    ax.set_ylabel("dim2")
    fig.tight_layout()
    fig.savefig(Path(path), format="svg", metadata={"Date": None})
    plt.close(fig)
