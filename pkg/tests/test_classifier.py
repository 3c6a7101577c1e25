import json

import numpy as np
import pytest

from spherezsl.classifier import (ClassifierConfig, EvalReport, LinearClassifier,
                                  evaluate_base_to_new, evaluate_gzsl, harmonic_mean,
                                  train_classifier)
from spherezsl.store import EmbeddingSet
from spherezsl.vmf import ClassPrototypes, VmfParams, sample_all_classes


D = 8


def sphere_set(names, kappa=80.0, per_class=30, seed=0, dim=D):
    rng = np.random.default_rng(seed)
    mus = rng.standard_normal((len(names), dim))
    mus /= np.linalg.norm(mus, axis=1, keepdims=True)
    protos = ClassPrototypes(class_names=list(names), directions=mus)
    params = VmfParams(prototypes=protos, kappa_text=kappa)
    return sample_all_classes(params, per_class, seed), mus


# --- harmonic mean -----------------------------------------------------------

def test_harmonic_mean_paper_table_values():
    # frozen reference arithmetic for published base/new pairs
    assert harmonic_mean(93.9, 93.2) == pytest.approx(93.5, abs=0.06)
    assert harmonic_mean(93.04, 88.21) == pytest.approx(90.57, abs=0.05)


def test_harmonic_mean_identities():
    for x in (0.0, 37.2, 100.0):
        assert harmonic_mean(x, x) == pytest.approx(x, abs=1e-12)
    assert harmonic_mean(100.0, 0.0) == 0.0
    assert harmonic_mean(0.0, 0.0) == 0.0


def test_harmonic_mean_below_arithmetic_mean():
    rng = np.random.default_rng(1)
    for _ in range(50):
        a, b = rng.uniform(0, 100, size=2)
        h = harmonic_mean(a, b)
        assert h <= (a + b) / 2 + 1e-9
        if abs(a - b) > 1e-6:
            assert h < (a + b) / 2


def test_harmonic_mean_range_check():
    with pytest.raises(ValueError):
        harmonic_mean(-1.0, 50.0)
    with pytest.raises(ValueError):
        harmonic_mean(50.0, 101.0)


# --- training ----------------------------------------------------------------

def test_zero_epochs_is_text_classifier():
    train, mus = sphere_set(["a", "b", "c"], seed=2)
    clf = train_classifier(train, mus, ClassifierConfig(epochs=0))
    assert np.allclose(clf.weights, mus)
    # inference is nearest-text-feature
    x = mus[1] + 0.01
    assert clf.predict(x[None, :])[0] == 1


def test_separable_two_class_reaches_full_accuracy():
    train, mus = sphere_set(["a", "b"], kappa=200.0, per_class=50, seed=3)
    # deliberately poor text initialization: orthogonal-ish random rows
    rng = np.random.default_rng(4)
    bad_init = rng.standard_normal((2, D))
    cfg = ClassifierConfig(epochs=60, batch_size=25, learning_rate=3e-3, seed=5)
    clf = train_classifier(train, bad_init, cfg)
    acc = float(np.mean(clf.predict(train.vectors.astype(np.float64)) == train.labels))
    assert acc == 1.0


def test_training_loss_non_increasing_in_epoch_means():
    train, mus = sphere_set(["a", "b", "c", "d"], kappa=40.0, seed=6)
    # initialize away from the class means so training has real work to do
    rng = np.random.default_rng(60)
    init = mus + 0.8 * rng.standard_normal(mus.shape)
    cfg = ClassifierConfig(epochs=25, batch_size=32, learning_rate=1e-3, seed=7)
    clf = train_classifier(train, init, cfg)
    hist = np.asarray(clf.loss_history)
    # allow stochastic jitter but demand overall descent and no large regressions
    assert hist[-1] < hist[0]
    assert np.all(hist[1:] <= hist[:-1] + 0.05 * hist[0])


def test_missing_training_class_rejected():
    train, mus = sphere_set(["a", "b", "c"], per_class=5, seed=8)
    gutted = EmbeddingSet(dim=D, class_names=train.class_names,
                          labels=train.labels[train.labels != 2],
                          vectors=train.vectors[train.labels != 2])
    with pytest.raises(ValueError, match="without training samples"):
        train_classifier(gutted, mus, ClassifierConfig(epochs=1))
    # zero epochs never needs samples
    clf = train_classifier(gutted, mus, ClassifierConfig(epochs=0))
    assert clf.num_rows if hasattr(clf, "num_rows") else True


def test_prediction_scale_invariance():
    train, mus = sphere_set(["a", "b", "c"], seed=9)
    clf = train_classifier(train, mus, ClassifierConfig(epochs=0))
    rng = np.random.default_rng(10)
    X = rng.standard_normal((20, D))
    base = clf.predict(X)
    for k in (0.2, 5.0):
        assert np.array_equal(clf.predict(k * X), base)


# --- evaluation --------------------------------------------------------------

def degenerate_always_first(names, dim=D):
    # identical rows give identical cosines everywhere; argmax always picks
    # the first index, so every sample is predicted as names[0]
    row = np.zeros(dim)
    row[0] = 1.0
    return LinearClassifier(class_names=list(names), weights=np.tile(row, (len(names), 1)))


def test_gzsl_degenerate_predictor():
    base_names, new_names = ["b0", "b1"], ["n0"]
    test_base, _ = sphere_set(base_names, seed=11)
    test_new, _ = sphere_set(new_names, seed=12)
    # classifier over the union that always predicts base class b0
    clf = degenerate_always_first(base_names + new_names)
    preds = clf.predict(test_base.vectors.astype(np.float64))
    assert np.all(preds == 0)
    report = evaluate_gzsl(clf, test_base, test_new)
    assert report.base_acc == pytest.approx(100.0 / len(base_names))
    assert report.new_acc == 0.0
    assert report.harmonic == 0.0


def test_gzsl_perfect_oracle():
    names = ["b0", "b1", "n0", "n1"]
    full, mus = sphere_set(names, kappa=300.0, seed=13)
    clf = LinearClassifier(class_names=names, weights=mus)
    base_set = EmbeddingSet(dim=D, class_names=names[:2],
                            labels=full.labels[full.labels < 2],
                            vectors=full.vectors[full.labels < 2])
    new_set = EmbeddingSet(dim=D, class_names=names[2:],
                           labels=full.labels[full.labels >= 2] - 2,
                           vectors=full.vectors[full.labels >= 2])
    report = evaluate_gzsl(clf, base_set, new_set)
    assert report.base_acc == 100.0
    assert report.new_acc == 100.0
    assert report.harmonic == 100.0


def test_macro_average_not_pooled():
    # 2 base classes with per-class accuracies 75% and 50% -> 62.5, even with
    # unbalanced sample counts
    names = ["a", "b", "x"]
    clf = LinearClassifier(class_names=names, weights=np.eye(3, D))
    # class a: 4 samples, 3 correct; class b: 2 samples, 1 correct
    va = np.tile(np.eye(1, D)[0], (4, 1)).astype(np.float32)
    va[3] = np.eye(1, D, 1)[0]  # predicted b, wrong
    vb = np.tile(np.eye(1, D, 1)[0], (2, 1)).astype(np.float32)
    vb[1] = np.eye(1, D)[0]  # predicted a, wrong
    test_base = EmbeddingSet(dim=D, class_names=["a", "b"],
                             labels=np.array([0, 0, 0, 0, 1, 1], np.uint32),
                             vectors=np.concatenate([va, vb]))
    test_new = EmbeddingSet(dim=D, class_names=["x"],
                            labels=np.zeros(1, np.uint32),
                            vectors=np.eye(1, D, 2).astype(np.float32))
    report = evaluate_gzsl(clf, test_base, test_new)
    assert report.base_acc == pytest.approx(62.5)
    assert report.per_class["a"] == pytest.approx(75.0)
    assert report.per_class["b"] == pytest.approx(50.0)


def test_macro_average_duplication_invariance():
    names = ["a", "b", "n"]
    train, mus = sphere_set(names, seed=14)
    clf = LinearClassifier(class_names=names, weights=mus)
    base = EmbeddingSet(dim=D, class_names=["a", "b"],
                        labels=train.labels[train.labels < 2],
                        vectors=train.vectors[train.labels < 2])
    new = EmbeddingSet(dim=D, class_names=["n"],
                       labels=train.labels[train.labels == 2] - 2,
                       vectors=train.vectors[train.labels == 2])
    before = evaluate_gzsl(clf, base, new)
    # duplicate every sample of class a
    mask = base.labels == 0
    dup = EmbeddingSet(dim=D, class_names=base.class_names,
                       labels=np.concatenate([base.labels, base.labels[mask]]),
                       vectors=np.concatenate([base.vectors, base.vectors[mask]]))
    after = evaluate_gzsl(clf, dup, new)
    assert after.base_acc == pytest.approx(before.base_acc, abs=1e-9)
    assert after.per_class == pytest.approx(before.per_class)


def test_base_to_new_dominates_gzsl():
    names = ["b0", "b1", "b2", "n0", "n1"]
    full, mus = sphere_set(names, kappa=30.0, seed=15)  # noisy on purpose
    clf = LinearClassifier(class_names=names, weights=mus)
    base = EmbeddingSet(dim=D, class_names=names[:3],
                        labels=full.labels[full.labels < 3],
                        vectors=full.vectors[full.labels < 3])
    new = EmbeddingSet(dim=D, class_names=names[3:],
                       labels=full.labels[full.labels >= 3] - 3,
                       vectors=full.vectors[full.labels >= 3])
    mixed = evaluate_gzsl(clf, base, new)
    split = evaluate_base_to_new(clf.restrict(names[:3]), clf.restrict(names[3:]),
                                 base, new)
    assert split.base_acc >= mixed.base_acc - 1e-9
    assert split.new_acc >= mixed.new_acc - 1e-9


def test_single_class_new_space_is_always_correct():
    names = ["b0", "n0"]
    full, mus = sphere_set(names, kappa=5.0, seed=16)
    new = EmbeddingSet(dim=D, class_names=["n0"],
                       labels=full.labels[full.labels == 1] - 1,
                       vectors=full.vectors[full.labels == 1])
    base = EmbeddingSet(dim=D, class_names=["b0"],
                        labels=full.labels[full.labels == 0],
                        vectors=full.vectors[full.labels == 0])
    rng = np.random.default_rng(17)
    clf_new = LinearClassifier(class_names=["n0"], weights=rng.standard_normal((1, D)))
    clf_base = LinearClassifier(class_names=["b0"], weights=rng.standard_normal((1, D)))
    report = evaluate_base_to_new(clf_base, clf_new, base, new)
    assert report.new_acc == 100.0


def test_unjoinable_class_rejected():
    names = ["a", "b"]
    full, mus = sphere_set(names, seed=18)
    clf = LinearClassifier(class_names=["a"], weights=mus[:1])
    with pytest.raises(KeyError):
        evaluate_gzsl(clf, full, full)


def test_report_consistency_and_serialization():
    report = EvalReport(protocol="gzsl", base_acc=75.0, new_acc=50.0,
                        harmonic=harmonic_mean(75.0, 50.0),
                        per_class={"a": 75.0, "b": 50.0})
    report.validate()
    doc = json.loads(report.to_json())
    assert doc["protocol"] == "gzsl"
    assert doc["harmonic_mean"] == 60.0
    csv_text = report.to_csv()
    assert csv_text.splitlines()[0] == "class,accuracy"
    assert "a,75.00" in csv_text
    with pytest.raises(ValueError, match="inconsistent"):
        EvalReport(protocol="gzsl", base_acc=75.0, new_acc=50.0, harmonic=99.0).validate()
