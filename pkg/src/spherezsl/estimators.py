"""sklearn-style estimator facade over the pipeline stages.

Each estimator keeps its constructor parameters verbatim (so ``get_params``,
``set_params`` and ``clone`` behave), validates inputs through the shared
helpers, and exposes fitted state via trailing-underscore attributes. Labels
may be given as strings, or as integers alongside ``class_names``.
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin, TransformerMixin

from .classifier import ClassifierConfig, LinearClassifier, train_classifier
from .generator import GenTrainConfig, GeneratorState, synthesize, train_generator
from .prompt_tuning import (FlptConfig, FrozenTextEncoder, TextTokenTable,
                            compute_shift, train_flpt)
from .store import EmbeddingSet
from .validation import check_feature_matrix, check_labels


def _resolve_labels(X, y, class_names):
    """Normalize (X, y, class_names) to unit-free arrays plus a name table."""
    X = check_feature_matrix(X)
    y = np.asarray(y)
    if y.dtype.kind in ("U", "S", "O"):
        names = sorted(set(str(v) for v in y))
        index = {n: i for i, n in enumerate(names)}
        labels = np.array([index[str(v)] for v in y], dtype=np.int64)
    else:
        if class_names is None:
            raise ValueError("class_names is required with integer labels")
        names = list(class_names)
        labels = check_labels(y, len(X), len(names))
    return X, labels, names


def _as_embedding_set(X, labels, names) -> EmbeddingSet:
    return EmbeddingSet(dim=X.shape[1], class_names=names,
                        labels=labels.astype(np.uint32),
                        vectors=X.astype(np.float32))


class PromptTuner(BaseEstimator, TransformerMixin):
    """Feature-language prompt tuning as a transformer.

    ``fit`` learns the prompts and the class-agnostic shift on labeled unit
    features; ``transform`` applies the shift (plus re-normalization) to any
    feature matrix; ``encode_text`` produces tuned per-class text features.
    """

    def __init__(self, token_table: TextTokenTable | None = None,
                 text_encoder: FrozenTextEncoder | None = None,
                 text_features: EmbeddingSet | None = None,
                 alpha: float = 1.0, tau: float = 0.01, epochs: int = 50,
                 batch_size: int = 64, learning_rate: float = 3e-4, seed: int = 0):
        self.token_table = token_table
        self.text_encoder = text_encoder
        self.text_features = text_features
        self.alpha = alpha
        self.tau = tau
        self.epochs = epochs
        self.batch_size = batch_size
        self.learning_rate = learning_rate
        self.seed = seed

    def fit(self, X, y, class_names: list[str] | None = None):
        X, labels, names = _resolve_labels(X, y, class_names)
        train_set = _as_embedding_set(X, labels, names)
        encoder = self.text_encoder
        if self.token_table is not None and encoder is None:
            encoder = FrozenTextEncoder(self.token_table.dim, X.shape[1])
        config = FlptConfig(alpha=self.alpha, tau=self.tau, epochs=self.epochs,
                            batch_size=self.batch_size,
                            learning_rate=self.learning_rate, seed=self.seed)
        result = train_flpt(train_set, encoder, self.token_table, config,
                            text_features=self.text_features)
        self.result_ = result
        self.state_ = result.state
        self.shift_ = compute_shift(result.state)
        self.classes_ = np.asarray(names)
        self.loss_history_ = result.loss_history
        return self

    def transform(self, X):
        X = check_feature_matrix(X, dim=self.state_.feature_dim)
        moved = X + self.state_.alpha * self.shift_
        norms = np.linalg.norm(moved, axis=1, keepdims=True)
        if np.any(norms == 0.0):
            raise ValueError("transform produced a zero vector")
        return moved / norms

    def encode_text(self, names: list[str]) -> np.ndarray:
        return self.result_.text_features(list(names))


class ConditionalFeatureGenerator(BaseEstimator):
    """Conditional VAE (or hinge CGAN) over unit features, keyed by class text."""

    def __init__(self, backend: str = "cvae", latent_dim: int = 32,
                 kl_weight: float = 0.1, epochs: int = 60, batch_size: int = 64,
                 learning_rate: float = 1e-3, seed: int = 0):
        self.backend = backend
        self.latent_dim = latent_dim
        self.kl_weight = kl_weight
        self.epochs = epochs
        self.batch_size = batch_size
        self.learning_rate = learning_rate
        self.seed = seed

    def fit(self, X, y, *, text_rows, class_names: list[str] | None = None):
        X, labels, names = _resolve_labels(X, y, class_names)
        train_set = _as_embedding_set(X, labels, names)
        config = GenTrainConfig(epochs=self.epochs, batch_size=self.batch_size,
                                learning_rate=self.learning_rate,
                                kl_weight=self.kl_weight, seed=self.seed,
                                backend=self.backend, latent_dim=self.latent_dim)
        self.state_: GeneratorState = train_generator(train_set, text_rows, config)
        self.classes_ = np.asarray(names)
        self.history_ = self.state_.history
        return self

    def sample(self, class_text: list[tuple[str, np.ndarray]], per_class: int,
               seed: int = 0) -> EmbeddingSet:
        return synthesize(self.state_, class_text, per_class, seed)


class CosineTextClassifier(BaseEstimator, ClassifierMixin):
    """Text-initialized cosine-softmax classifier over the full label space."""

    def __init__(self, tau: float = 0.01, epochs: int = 100, batch_size: int = 64,
                 learning_rate: float = 1e-3, seed: int = 0):
        self.tau = tau
        self.epochs = epochs
        self.batch_size = batch_size
        self.learning_rate = learning_rate
        self.seed = seed

    def fit(self, X, y, *, text_rows, class_names: list[str] | None = None):
        X, labels, names = _resolve_labels(X, y, class_names)
        train_set = _as_embedding_set(X, labels, names)
        config = ClassifierConfig(epochs=self.epochs, batch_size=self.batch_size,
                                  learning_rate=self.learning_rate,
                                  tau=self.tau, seed=self.seed)
        self.model_: LinearClassifier = train_classifier(train_set, text_rows, config)
        self.classes_ = np.asarray(names)
        return self

    def decision_function(self, X):
        return self.model_.logits(np.asarray(X, dtype=np.float64))

    def predict(self, X):
        return self.classes_[self.model_.predict(np.asarray(X, dtype=np.float64))]
