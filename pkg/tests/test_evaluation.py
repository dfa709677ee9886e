import csv
import xml.etree.ElementTree as ET
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from tckim.evaluation import (
    EvaluationError,
    KFoldProtocol,
    UndersampleHoldout,
    center_kernel,
    evaluate_pipeline,
    export_embedding,
    kfold_splits,
    knn_classify,
    kpca_fit,
    kpca_project,
    metrics,
    select_k_cv,
    undersample_splits,
)
from tckim.kernel import EnsembleConfig
from tckim.synth import make_gaussian_toy

FAST = EnsembleConfig(q_inits=2, components=(2, 3), min_segment_length=4, max_iter=15)


def random_psd(rng, n, rank):
    A = rng.normal(size=(n, rank))
    return A @ A.T


# ---------------------------------------------------------------- KPCA


def test_centered_rows_sum_to_zero(rng):
    Kc = center_kernel(random_psd(rng, 9, 4))
    np.testing.assert_allclose(Kc.sum(axis=1), 0.0, atol=1e-9)


def test_constant_kernel_has_no_embedding():
    with pytest.raises(EvaluationError, match="rank 0"):
        kpca_fit(np.full((5, 5), 3.0), d=1)


def test_dimension_above_rank_names_rank(rng):
    with pytest.raises(EvaluationError, match="rank 2"):
        kpca_fit(random_psd(rng, 8, 2), d=3)  # centering keeps rank 2 here generically


@given(seed=st.integers(0, 2**32 - 1), d=st.integers(1, 4))
def test_embedding_reproduces_rank_d_truncation(seed, d):
    rng = np.random.default_rng(seed)
    K = random_psd(rng, 12, 6)
    _, emb = kpca_fit(K, d)
    vals, vecs = np.linalg.eigh(center_kernel(K))
    top = np.argsort(vals)[::-1][:d]
    trunc = (vecs[:, top] * vals[top]) @ vecs[:, top].T
    np.testing.assert_allclose(emb @ emb.T, trunc, atol=1e-8)


def test_projection_of_training_columns_recovers_embedding(rng):
    K = random_psd(rng, 15, 5)
    state, emb = kpca_fit(K, 3)
    np.testing.assert_allclose(kpca_project(state, K), emb, atol=1e-8)


def test_projection_edge_cases(rng):
    K = random_psd(rng, 10, 5)
    state, _ = kpca_fit(K, 3)
    assert kpca_project(state, np.zeros((10, 0))).shape == (0, 3)
    cols = K[:, [2, 2]]
    out = kpca_project(state, cols)
    np.testing.assert_array_equal(out[0], out[1])


def test_sign_convention(rng):
    _, emb = kpca_fit(random_psd(rng, 10, 5), 3)
    peak = np.argmax(np.abs(emb), axis=0)
    assert np.all(emb[peak, np.arange(3)] > 0)


# ---------------------------------------------------------------- kNN


def test_k1_returns_label_of_identical_point():
    train = np.array([[0.0, 0.0], [5.0, 5.0]])
    assert knn_classify(train, np.array([1, 2]), np.array([[5.0, 5.0]]), 1).tolist() == [2]


def test_k_equals_n_returns_majority():
    train = np.arange(4.0)[:, None]
    labels = np.array([1, 1, 1, 2])
    queries = np.array([[-10.0], [3.0], [100.0]])
    assert knn_classify(train, labels, queries, 4).tolist() == [1, 1, 1]


def test_vote_tie_goes_to_nearer_neighbour():
    train = np.array([[0.0], [3.0]])
    assert knn_classify(train, np.array([2, 1]), np.array([[1.0]]), 2).tolist() == [2]


def test_exact_tie_goes_to_smaller_label():
    train = np.array([[-1.0], [1.0]])
    assert knn_classify(train, np.array([2, 1]), np.array([[0.0]]), 2).tolist() == [1]


def test_k1_on_training_data_is_exact(rng):
    X = rng.normal(size=(25, 3))
    y = rng.integers(0, 3, 25)
    assert np.array_equal(knn_classify(X, y, X, 1), y)


# ---------------------------------------------------------------- metrics


def test_metric_fixture():
    y_true = [1] * 3 + [0] * 1 + [1] * 1 + [0] * 5
    y_pred = [1] * 3 + [1] * 1 + [0] * 1 + [0] * 5
    m = metrics(y_true, y_pred, positive_label=1)
    assert (m.tp, m.fp, m.fn, m.tn) == (3, 1, 1, 5)
    assert m.sensitivity == pytest.approx(0.75, abs=1e-12)
    assert m.specificity == pytest.approx(float(Fraction(5, 6)), abs=1e-12)
    assert m.precision == pytest.approx(0.75, abs=1e-12)
    assert m.f1 == pytest.approx(0.75, abs=1e-12)
    assert m.accuracy == pytest.approx(0.8, abs=1e-12)
    assert m.degenerate == ()


def test_perfect_predictions():
    m = metrics([0, 1, 1, 0], [0, 1, 1, 0], 1)
    assert (m.sensitivity, m.specificity, m.precision, m.f1, m.accuracy) == (1, 1, 1, 1, 1)


def test_no_positives_anywhere_is_flagged():
    m = metrics([0, 0, 0], [0, 0, 0], positive_label=1)
    assert m.sensitivity == 0 and m.precision == 0 and m.f1 == 0
    assert "sensitivity" in m.degenerate and "precision" in m.degenerate


@given(st.lists(st.tuples(st.booleans(), st.booleans()), min_size=1, max_size=40))
def test_accuracy_is_weighted_sensitivity_and_specificity(pairs):
    y_true = np.array([a for a, _ in pairs], dtype=int)
    y_pred = np.array([b for _, b in pairs], dtype=int)
    m = metrics(y_true, y_pred, positive_label=1)
    P, Neg = m.tp + m.fn, m.tn + m.fp
    assert m.accuracy == pytest.approx((m.sensitivity * P + m.specificity * Neg) / (P + Neg), abs=1e-12)


# ---------------------------------------------------------------- splits and k selection


@pytest.mark.parametrize("n,folds", [(23, 5), (10, 5), (2, 2)])
def test_kfold_partitions_records(n, folds):
    labels = np.arange(n) % 2
    splits = kfold_splits(labels, folds, seed=3)
    assert len(splits) == folds
    tests = np.concatenate([te for _, te in splits])
    assert sorted(tests.tolist()) == list(range(n))
    for tr, te in splits:
        assert not set(tr) & set(te)
    if n == 2:
        assert all(te.size == 1 for _, te in splits)


def test_undersample_shape():
    labels = np.array([1] * 10 + [0] * 50)
    splits = undersample_splits(labels, UndersampleHoldout(2, 0.2, 10), seed=0, positive_label=1)
    assert len(splits) == 10
    for tr, te in splits:
        assert tr.size + te.size == 30 and te.size == 6
        assert (labels[np.concatenate([tr, te])] == 1).sum() == 10


def test_select_k_single_candidate():
    assert select_k_cv(np.zeros((10, 2)), np.arange(10) % 2, k_grid=[7]) == 7


def test_select_k_separable_prefers_smallest(rng):
    X = np.vstack([rng.normal(size=(20, 2)), rng.normal(size=(20, 2)) + 50])
    y = np.repeat([0, 1], 20)
    assert select_k_cv(X, y, k_grid=(9, 3, 5), seed=1, positive_label=1) == 3


def test_select_k_is_deterministic(rng):
    X = rng.normal(size=(30, 2))
    y = rng.integers(0, 2, 30)
    assert select_k_cv(X, y, seed=4, positive_label=1) == select_k_cv(X, y, seed=4, positive_label=1)


# ---------------------------------------------------------------- pipeline


@pytest.mark.filterwarnings("ignore:kernel rank below")  # perfectly clustered folds collapse the kernel
def test_pipeline_separable_toy():
    data = make_gaussian_toy(60, 2, 12, class_separation=4.0, seed=0)
    rep = evaluate_pipeline(data, FAST, KFoldProtocol(3), seed=0)
    assert rep.mean["f1"] >= 0.95


def test_pipeline_is_deterministic():
    data = make_gaussian_toy(40, 2, 10, class_separation=1.0, seed=1)
    a = evaluate_pipeline(data, FAST, KFoldProtocol(3), seed=2)
    b = evaluate_pipeline(data, FAST, KFoldProtocol(3), seed=2)
    assert a.to_text() == b.to_text() and a.ks == b.ks


def test_pipeline_never_trains_on_test_records():
    data = make_gaussian_toy(30, 2, 10, seed=3)
    seen = []
    evaluate_pipeline(data, FAST, KFoldProtocol(3), seed=0, audit=seen.append)
    assert len(seen) == 3
    for entry in seen:
        test = set(entry["test_ids"])
        assert not test & set(entry["kernel_train_ids"])
        assert not test & set(entry["knn_train_ids"])


def test_pipeline_undersample_protocol():
    data = make_gaussian_toy(40, 2, 10, class_separation=3.0, seed=4)
    rep = evaluate_pipeline(data, FAST, UndersampleHoldout(1.0, 0.25, 3), seed=0)
    assert len(rep.splits) == 3


def test_pipeline_rejects_unlabeled_and_single_class():
    data = make_gaussian_toy(10, 1, 6, seed=0)
    with pytest.raises(EvaluationError):
        evaluate_pipeline(data.replace(labels=None), FAST)
    with pytest.raises(EvaluationError):
        evaluate_pipeline(data.replace(labels=np.ones(10, int)), FAST)


# ---------------------------------------------------------------- export


def test_csv_export_round_trip(tmp_path, rng):
    emb = rng.normal(size=(6, 3)) * 1e-3
    export_embedding(emb, np.arange(6) % 2, tmp_path / "e.csv", "csv", ids=[f"r{i}" for i in range(6)])
    with open(tmp_path / "e.csv") as fh:
        rows = list(csv.reader(fh))
    assert rows[0] == ["id", "dim1", "dim2", "dim3", "label"]
    back = np.array([[float(x) for x in r[1:4]] for r in rows[1:]])
    np.testing.assert_allclose(back, emb, rtol=1e-15)


def test_empty_embedding_csv_is_header_only(tmp_path):
    export_embedding(np.zeros((0, 3)), None, tmp_path / "e.csv")
    assert (tmp_path / "e.csv").read_text().strip() == "id,dim1,dim2,dim3,label"


def test_svg_export_is_xml(tmp_path, rng):
    export_embedding(rng.normal(size=(8, 3)), np.arange(8) % 2, tmp_path / "e.svg", "svg")
    root = ET.parse(tmp_path / "e.svg").getroot()
    assert root.tag.endswith("svg")


def test_svg_needs_two_dimensions(tmp_path):
    with pytest.raises(EvaluationError):
        export_embedding(np.zeros((3, 1)), None, tmp_path / "e.svg", "svg")
