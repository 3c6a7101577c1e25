"""Stage 3b: the final supervised classifier and the evaluation protocols.

The classifier scores by cosine similarity against one weight row per class
at a sharp temperature, is initialized from text features (so zero training
epochs degrades gracefully to text-feature nearest-neighbor inference), and
reports mean per-class top-1 accuracies with their harmonic mean under either
the mixed-label-space protocol or independent base/new label spaces.
"""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .optim import AdamState, adam_step
from .store import EmbeddingSet
from .validation import check_feature_matrix, check_labels, rng_from_seed, unit_rows


@dataclass
class ClassifierConfig:
    epochs: int = 100
    batch_size: int = 64
    learning_rate: float = 1e-3
    tau: float = 0.01
    seed: int = 0

    def validate(self) -> None:
        if self.epochs < 0 or self.batch_size <= 0 or self.learning_rate <= 0:
            raise ValueError("epochs must be >= 0, batch_size and learning_rate positive")
        if self.tau <= 0:
            raise ValueError("tau must be positive")


@dataclass
class LinearClassifier:
    """Cosine-logit softmax classifier with one weight row per class."""

    class_names: list[str]
    weights: np.ndarray  # (C, d), rows normalized inside the logit computation
    tau: float = 0.01

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=np.float64)
        if self.weights.shape[0] != len(self.class_names):
            raise ValueError("one weight row per class required")
        if not np.all(np.isfinite(self.weights)):
            raise ValueError("weights must be finite")

    @property
    def dim(self) -> int:
        return self.weights.shape[1]

    def logits(self, X: np.ndarray) -> np.ndarray:
        X = check_feature_matrix(X, dim=self.dim)
        cos = unit_rows(X) @ unit_rows(self.weights).T
        return np.clip(cos, -1.0, 1.0) / self.tau

    def predict(self, X: np.ndarray) -> np.ndarray:
        return np.argmax(self.logits(X), axis=1)

    def restrict(self, names: list[str]) -> "LinearClassifier":
        """Sub-classifier over a subset of classes (own label space)."""
        index = {n: i for i, n in enumerate(self.class_names)}
        missing = [n for n in names if n not in index]
        if missing:
            raise KeyError(f"classes not in classifier: {missing}")
        rows = np.stack([self.weights[index[n]] for n in names])
        return LinearClassifier(class_names=list(names), weights=rows, tau=self.tau)


def train_classifier(train: EmbeddingSet, text_rows: np.ndarray,
                     config: ClassifierConfig) -> LinearClassifier:
    """Cross-entropy training of cosine-logit weights initialized at the text
    features; zero epochs returns the pure text-feature classifier."""
    config.validate()
    T = check_feature_matrix(text_rows, dim=train.dim, name="text_rows")
    if T.shape[0] != train.num_classes:
        raise ValueError("need exactly one text feature per class")
    if config.epochs > 0:
        present = set(np.unique(train.labels).tolist())
        absent = [n for i, n in enumerate(train.class_names) if i not in present]
        if absent:
            raise ValueError(f"classes without training samples: {absent}")

    W = unit_rows(T).copy()
    if config.epochs == 0:
        return LinearClassifier(class_names=list(train.class_names), weights=W, tau=config.tau)

    X = train.vectors.astype(np.float64)
    y = check_labels(train.labels, len(train), train.num_classes)
    params = {"W": W}
    opt = AdamState.init(params, learning_rate=config.learning_rate)
    rng = rng_from_seed(config.seed)

    def batch_graph(Xb, yb):
        def graph(leaves):
            rows = ad.l2_normalize(leaves["W"], axis=1)
            logits = ad.matmul(ad.Tensor(unit_rows(Xb)), ad.transpose(rows))
            return ad.softmax_cross_entropy(logits, yb, tau=config.tau)

        return graph

    history = []
    for _ in range(config.epochs):
        order = rng.permutation(len(X))
        losses = []
        for lo in range(0, len(order), config.batch_size):
            idx = order[lo:lo + config.batch_size]
            loss, grads = ad.eval_with_grad(batch_graph(X[idx], y[idx]), params)
            if not np.isfinite(loss):
                raise FloatingPointError("non-finite classifier loss")
            losses.append(loss)
            params, opt = adam_step(params, grads, opt)
        history.append(float(np.mean(losses)))

    clf = LinearClassifier(class_names=list(train.class_names),
                           weights=params["W"], tau=config.tau)
    clf.loss_history = history
    return clf


def harmonic_mean(base_acc: float, new_acc: float) -> float:
    """2bn/(b+n), the balanced score; 0 when both sides are 0."""
    if not (0.0 <= base_acc <= 100.0 and 0.0 <= new_acc <= 100.0):
        raise ValueError("accuracies must lie in [0, 100]")
    total = base_acc + new_acc
    if total == 0.0:
        return 0.0
    return 2.0 * base_acc * new_acc / total


@dataclass
class EvalReport:
    protocol: str
    base_acc: float
    new_acc: float
    harmonic: float
    per_class: dict[str, float] = field(default_factory=dict)

    def validate(self) -> None:
        for v in (self.base_acc, self.new_acc, self.harmonic, *self.per_class.values()):
            if not 0.0 <= v <= 100.0:
                raise ValueError("accuracies must lie in [0, 100]")
        if abs(self.harmonic - harmonic_mean(self.base_acc, self.new_acc)) > 1e-3:
            raise ValueError("harmonic mean inconsistent with base/new accuracies")

    def to_dict(self) -> dict:
        return {
            "protocol": self.protocol,
            "base_acc": round(self.base_acc, 2),
            "new_acc": round(self.new_acc, 2),
            "harmonic_mean": round(self.harmonic, 2),
            "per_class": {k: round(v, 2) for k, v in sorted(self.per_class.items())},
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2) + "\n"

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf)
        writer.writerow(["class", "accuracy"])
        for name in sorted(self.per_class):
            writer.writerow([name, f"{self.per_class[name]:.2f}"])
        return buf.getvalue()


def _per_class_accuracy(clf: LinearClassifier, test: EmbeddingSet) -> dict[str, float]:
    """Mean per-class top-1 accuracy of ``clf`` on ``test``, joined by name.

    Predictions run over the classifier's full label space; a test sample
    counts as correct when the predicted name equals its own class name.
    """
    index = {n: i for i, n in enumerate(clf.class_names)}
    missing = [n for n in test.class_names if n not in index]
    if missing:
        raise KeyError(f"test classes not covered by classifier: {missing}")
    if len(test) == 0:
        return {}
    predictions = clf.predict(test.vectors.astype(np.float64))
    accs = {}
    for local, name in enumerate(test.class_names):
        mask = test.labels == local
        if not mask.any():
            continue
        correct = int(np.sum(predictions[mask] == index[name]))
        accs[name] = 100.0 * correct / int(mask.sum())
    return accs


def evaluate_gzsl(clf: LinearClassifier, test_base: EmbeddingSet,
                  test_new: EmbeddingSet) -> EvalReport:
    """Mixed protocol: every prediction competes over the full base+new space."""
    base_accs = _per_class_accuracy(clf, test_base)
    new_accs = _per_class_accuracy(clf, test_new)
    base_acc = float(np.mean(list(base_accs.values()))) if base_accs else 0.0
    new_acc = float(np.mean(list(new_accs.values()))) if new_accs else 0.0
    report = EvalReport(protocol="gzsl", base_acc=base_acc, new_acc=new_acc,
                        harmonic=harmonic_mean(base_acc, new_acc),
                        per_class={**base_accs, **new_accs})
    report.validate()
    return report


def evaluate_base_to_new(clf_base: LinearClassifier, clf_new: LinearClassifier,
                         test_base: EmbeddingSet, test_new: EmbeddingSet) -> EvalReport:
    """Independent protocol: each side is scored within its own label space."""
    base_accs = _per_class_accuracy(clf_base, test_base)
    new_accs = _per_class_accuracy(clf_new, test_new)
    base_acc = float(np.mean(list(base_accs.values()))) if base_accs else 0.0
    new_acc = float(np.mean(list(new_accs.values()))) if new_accs else 0.0
    report = EvalReport(protocol="base-to-new", base_acc=base_acc, new_acc=new_acc,
                        harmonic=harmonic_mean(base_acc, new_acc),
                        per_class={**base_accs, **new_accs})
    report.validate()
    return report
