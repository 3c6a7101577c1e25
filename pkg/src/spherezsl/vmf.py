"""von Mises-Fisher modeling of class-conditional feature distributions.

The concentration is derived from prototype geometry alone: with an isotropic
spread of sigma per class and the 3-sigma mass rule, two classes stay
separable when their prototypes are at least 6*sigma of arc apart, which for
the closest prototype pair gives kappa = (angle/6)^-2. Sampling uses the
Ulrich/Wood rejection scheme for the tangent weight plus a Householder
reflection onto the mean direction.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .store import EmbeddingSet
from .validation import check_unit_rows, rng_from_seed, unit_rows

COINCIDENT_ANGLE = 1e-6  # radians; closer prototype pairs are degenerate


class DegeneratePrototypesError(ValueError):
    """Two prototypes (nearly) coincide, so no finite concentration separates them."""


@dataclass
class ClassPrototypes:
    """Ordered per-class unit mean directions."""

    class_names: list[str]
    directions: np.ndarray  # (C, d) float64, unit rows

    def __post_init__(self):
        self.directions = np.asarray(self.directions, dtype=np.float64)

    @classmethod
    def from_embedding_set(cls, emb_set: EmbeddingSet, renormalize: bool = True) -> "ClassPrototypes":
        """One direction per class; the set must hold exactly one record per class."""
        if len(emb_set) != emb_set.num_classes:
            raise ValueError("prototype set must hold exactly one record per class")
        order = np.argsort(emb_set.labels)
        if not np.array_equal(np.sort(emb_set.labels), np.arange(emb_set.num_classes)):
            raise ValueError("prototype set must cover every class exactly once")
        directions = emb_set.vectors[order].astype(np.float64)
        if renormalize:
            directions = unit_rows(directions)
        return cls(class_names=list(emb_set.class_names), directions=directions)

    def to_embedding_set(self) -> EmbeddingSet:
        return EmbeddingSet(
            dim=self.dim,
            class_names=list(self.class_names),
            labels=np.arange(len(self.class_names), dtype=np.uint32),
            vectors=self.directions.astype(np.float32),
        )

    @property
    def dim(self) -> int:
        return self.directions.shape[1]

    @property
    def num_classes(self) -> int:
        return self.directions.shape[0]

    def validate(self, tol: float = 1e-6) -> None:
        if len(self.class_names) != self.directions.shape[0]:
            raise ValueError("name count does not match direction count")
        check_unit_rows(self.directions, tol=tol, name="prototype")


@dataclass
class VmfParams:
    """Sampling distribution: prototypes plus concentration and its refinement."""

    prototypes: ClassPrototypes
    kappa_text: float
    lam: float = 1.0

    @property
    def kappa_effective(self) -> float:
        return self.lam * self.kappa_text

    def validate(self) -> None:
        if self.kappa_text <= 0:
            raise ValueError("kappa_text must be positive")
        if self.lam <= 0:
            raise ValueError("lambda must be positive")
        self.prototypes.validate()


def pairwise_angles(directions: np.ndarray) -> np.ndarray:
    """Condensed upper-triangle arc distances between unit rows."""
    gram = np.clip(directions @ directions.T, -1.0, 1.0)
    iu = np.triu_indices(directions.shape[0], k=1)
    return np.arccos(gram[iu])


def derive_kappa(prototypes: ClassPrototypes) -> float:
    """Concentration from prototype geometry: max over pairs of ((angle/6))^-2.

    The max is attained at the closest pair, so the sampled spread keeps even
    the two most confusable classes 6 sigma apart.
    """
    prototypes.validate()
    if prototypes.num_classes < 2:
        raise ValueError("need at least two prototypes to derive a concentration")
    angles = pairwise_angles(prototypes.directions)
    min_angle = float(angles.min())
    if min_angle < COINCIDENT_ANGLE:
        iu = np.triu_indices(prototypes.num_classes, k=1)
        k = int(np.argmin(angles))
        a, b = iu[0][k], iu[1][k]
        raise DegeneratePrototypesError(
            f"prototypes {prototypes.class_names[a]!r} and {prototypes.class_names[b]!r} "
            f"are {min_angle:.2e} rad apart; geometry is degenerate")
    return float(np.max((angles / 6.0) ** -2.0))


def _sample_tangent_weights(kappa: float, d: int, n: int, rng: np.random.Generator) -> np.ndarray:
    """Wood's rejection sampler for t = mu . x under vMF(e1, kappa) in R^d."""
    m = d - 1
    b = (-2.0 * kappa + np.sqrt(4.0 * kappa ** 2 + m ** 2)) / m
    x0 = (1.0 - b) / (1.0 + b)
    c = kappa * x0 + m * np.log(1.0 - x0 ** 2)
    out = np.empty(n, dtype=np.float64)
    filled = 0
    while filled < n:
        todo = n - filled
        z = rng.beta(m / 2.0, m / 2.0, size=todo)
        w = (1.0 - (1.0 + b) * z) / (1.0 - (1.0 - b) * z)
        u = rng.uniform(size=todo)
        accept = kappa * w + m * np.log(1.0 - x0 * w) - c >= np.log(u)
        good = w[accept]
        out[filled:filled + good.size] = good
        filled += good.size
    return out


def sample_unit_vmf(mu: np.ndarray, kappa: float, n: int, rng: np.random.Generator) -> np.ndarray:
    """Draw ``n`` unit vectors from vMF(mu, kappa); kappa = 0 is uniform on the sphere."""
    mu = np.asarray(mu, dtype=np.float64)
    d = mu.size
    if d < 2:
        raise ValueError("vMF sampling requires dimension >= 2")
    if kappa < 0:
        raise ValueError("concentration must be nonnegative")
    if n == 0:
        return np.zeros((0, d), dtype=np.float64)
    if kappa == 0.0:
        x = rng.standard_normal((n, d))
        return x / np.linalg.norm(x, axis=1, keepdims=True)

    t = _sample_tangent_weights(kappa, d, n, rng)
    v = rng.standard_normal((n, d - 1))
    v /= np.linalg.norm(v, axis=1, keepdims=True)
    x = np.empty((n, d), dtype=np.float64)
    x[:, 0] = t
    x[:, 1:] = np.sqrt(np.maximum(0.0, 1.0 - t ** 2))[:, None] * v

    # Householder reflection taking the north pole e1 onto mu
    e1 = np.zeros(d)
    e1[0] = 1.0
    u = e1 - mu
    norm_u = np.linalg.norm(u)
    if norm_u > 1e-12:
        u /= norm_u
        x -= 2.0 * np.outer(x @ u, u)
    return x


def sample_vmf(params: VmfParams, class_index: int, n: int, seed: int) -> EmbeddingSet:
    """Sample ``n`` labeled unit vectors for one class, deterministic in ``seed``.

    Each class uses an independent seed-derived substream, so per-class
    sampling can run in any order (or in parallel) without changing results.
    """
    params.validate()
    if not 0 <= class_index < params.prototypes.num_classes:
        raise IndexError(f"class index {class_index} out of range")
    if n < 0:
        raise ValueError("sample count must be nonnegative")
    rng = rng_from_seed(seed, class_index)
    x = sample_unit_vmf(params.prototypes.directions[class_index], params.kappa_effective, n, rng)
    return EmbeddingSet(
        dim=params.prototypes.dim,
        class_names=list(params.prototypes.class_names),
        labels=np.full(n, class_index, dtype=np.uint32),
        vectors=x.astype(np.float32),
    )


def sample_all_classes(params: VmfParams, per_class: int, seed: int) -> EmbeddingSet:
    """Sample ``per_class`` vectors for every prototype into one labeled set."""
    parts = [sample_vmf(params, c, per_class, seed) for c in range(params.prototypes.num_classes)]
    return EmbeddingSet(
        dim=params.prototypes.dim,
        class_names=list(params.prototypes.class_names),
        labels=np.concatenate([p.labels for p in parts]) if parts else np.zeros(0, np.uint32),
        vectors=np.concatenate([p.vectors for p in parts], axis=0)
        if parts else np.zeros((0, params.prototypes.dim), np.float32),
    )
