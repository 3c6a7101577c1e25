"""Desk-scale synthetic benchmark: ground-truth sphere clusters plus an
aligned text modality, written in the artifact's file formats.

Class mean directions are drawn with a minimum pairwise separation, per-class
features are vMF samples around them, and "text features" are the means
rotated by a configurable noise angle (the synthetic stand-in for the
vision-language modality gap). The token table is produced by inverting the
frozen text encoder at those targets, so that encoding a class token with
initial prompts lands near its text feature, mirroring how a pretrained
text encoder is already aligned with the image-feature space. The server
weights file holds the per-class empirical means of the base training
features, normalized: the classifier a data owner would actually fit.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .optim import AdamState, adam_step
from .prompt_tuning import NUM_PROMPTS, FrozenTextEncoder, TextTokenTable
from .store import EmbeddingSet, SplitSpec, write_emb1
from .validation import rng_from_seed
from .vmf import ClassPrototypes, VmfParams, pairwise_angles, sample_all_classes

_MEAN_DRAW_CAP = 20_000


class BenchmarkGeometryError(ValueError):
    """The requested class count cannot be placed at the minimum angle."""


@dataclass
class SyntheticBenchmarkSpec:
    dim: int = 32
    base_classes: int = 10
    new_classes: int = 5
    kappa: float = 50.0
    samples_per_class: int = 200
    noise_angle_deg: float = 10.0
    seed: int = 7
    test_samples_per_class: int = 100
    min_mean_angle_deg: float = 25.0
    token_dim: int | None = None
    # fraction of the text-noise direction shared across classes; the
    # vision-language modality gap is largely a shared offset, which is what
    # makes a class-agnostic feature shift (and generalization of the
    # text-conditioned generator to unseen classes) meaningful
    noise_shared_frac: float = 0.75

    def validate(self) -> None:
        if self.base_classes < 2 or self.new_classes < 1:
            raise ValueError("need at least 2 base classes and 1 new class")
        if self.kappa <= 0:
            raise ValueError("kappa must be positive")
        if self.dim < 2:
            raise ValueError("dim must be at least 2")
        if self.samples_per_class < 1 or self.test_samples_per_class < 1:
            raise ValueError("sample counts must be positive")
        if not 0.0 <= self.noise_angle_deg < 90.0:
            raise ValueError("noise angle must lie in [0, 90) degrees")
        if not 0.0 <= self.noise_shared_frac <= 1.0:
            raise ValueError("noise_shared_frac must lie in [0, 1]")


@dataclass
class BenchmarkPaths:
    out_dir: Path
    features_train: Path
    features_test: Path
    text_features: Path
    token_table: Path
    server_weights: Path
    splits: Path
    meta: Path


def _draw_separated_means(c: int, d: int, min_angle: float,
                          rng: np.random.Generator) -> np.ndarray:
    """Unit vectors with pairwise arc distance >= min_angle, or raise."""
    if d == 2:
        # exact circle packing bound: c arcs of min_angle must fit in 2*pi
        if c * min_angle > 2.0 * math.pi + 1e-12:
            raise BenchmarkGeometryError(
                f"cannot place {c} means at {math.degrees(min_angle):.1f} deg "
                f"pairwise separation on a circle")
    means = []
    draws = 0
    min_cos = math.cos(min_angle)
    while len(means) < c:
        draws += 1
        if draws > _MEAN_DRAW_CAP:
            raise BenchmarkGeometryError(
                f"gave up placing {c} means at "
                f"{math.degrees(min_angle):.1f} deg separation in dimension {d}")
        v = rng.standard_normal(d)
        v /= np.linalg.norm(v)
        if all(float(v @ m) < min_cos for m in means):
            means.append(v)
    return np.stack(means)


def rotate_toward(mu: np.ndarray, angle: float, rng: np.random.Generator,
                  shared: np.ndarray | None = None, shared_frac: float = 0.0) -> np.ndarray:
    """Unit vector at exactly ``angle`` radians from ``mu``.

    The tangent direction blends the projection of a shared global vector
    (the common modality offset) with a per-class random tangent; the blend
    never changes the rotation angle itself.
    """
    if angle == 0.0:
        return mu

    def tangent(v):
        t = v - (v @ mu) * mu
        n = np.linalg.norm(t)
        return t / n if n > 0 else None

    private = tangent(rng.standard_normal(mu.size))
    direction = private
    if shared is not None and shared_frac > 0.0:
        shared_t = tangent(shared)
        if shared_t is not None:
            mix = shared_frac * shared_t + (1.0 - shared_frac) * private
            norm = np.linalg.norm(mix)
            if norm > 1e-12:
                direction = mix / norm
    return math.cos(angle) * mu + math.sin(angle) * direction


def invert_encoder_tokens(encoder: FrozenTextEncoder, targets: np.ndarray,
                          seed: int, max_angle_deg: float = 3.0) -> np.ndarray:
    """Token embeddings whose zero-prompt encodings land on the target rows.

    Solves the small inverse problem by a stepped gradient descent on
    1 - cosine. This plays the role of pretraining: it is what makes the
    synthetic text modality genuinely informative about the feature-space
    geometry. A token dimension comfortably above the feature dimension keeps
    every target inside the encoder's reachable image (the benchmark defaults
    to twice the feature dimension).
    """
    c = targets.shape[0]
    rng = rng_from_seed(seed)
    params = {"tok": rng.standard_normal((c, encoder.token_dim))}
    zeros = np.zeros((NUM_PROMPTS, encoder.token_dim))

    def graph(leaves):
        rows = encoder.encode_rows(ad.Tensor(zeros), leaves["tok"])
        cos = ad.cosine_similarity(rows, ad.Tensor(targets), axis=1)
        return ad.mean(ad.sub(ad.Tensor(1.0), cos))

    for learning_rate, steps in ((0.1, 400), (0.02, 300), (0.005, 200)):
        opt = AdamState.init(params, learning_rate=learning_rate)
        for _ in range(steps):
            _, grads = ad.eval_with_grad(graph, params)
            params, opt = adam_step(params, grads, opt)

    encoded = encoder.encode(zeros, params["tok"])
    cos = np.clip(np.sum(encoded * targets, axis=1), -1.0, 1.0)
    worst = math.degrees(float(np.arccos(cos).max()))
    if worst > max_angle_deg:
        raise RuntimeError(f"token inversion left a {worst:.2f} deg residual; "
                           f"widen token_dim or adjust the schedule")
    return params["tok"]


def make_benchmark(spec: SyntheticBenchmarkSpec, out_dir) -> BenchmarkPaths:
    """Generate and write the full benchmark dataset; self-checks included."""
    spec.validate()
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)

    c_total = spec.base_classes + spec.new_classes
    names = [f"base{i:02d}" for i in range(spec.base_classes)] + \
            [f"new{i:02d}" for i in range(spec.new_classes)]
    base_names, new_names = names[:spec.base_classes], names[spec.base_classes:]
    min_angle = math.radians(spec.min_mean_angle_deg)

    rng = rng_from_seed(spec.seed)
    means = _draw_separated_means(c_total, spec.dim, min_angle, rng)
    achieved = float(pairwise_angles(means).min())
    if achieved < min_angle - 1e-9:
        raise BenchmarkGeometryError("self-check failed: means too close")

    protos = ClassPrototypes(class_names=names, directions=means)
    params = VmfParams(prototypes=protos, kappa_text=spec.kappa)
    train = sample_all_classes(params, spec.samples_per_class, spec.seed)
    # disjoint substream block for the test split
    test = sample_all_classes(params, spec.test_samples_per_class, spec.seed + 1)

    noise = math.radians(spec.noise_angle_deg)
    shared_dir = rng_from_seed(spec.seed, 3).standard_normal(spec.dim)
    shared_dir /= np.linalg.norm(shared_dir)
    text_rows = np.stack([
        rotate_toward(means[i], noise, rng_from_seed(spec.seed, 2, i),
                      shared=shared_dir, shared_frac=spec.noise_shared_frac)
        for i in range(c_total)
    ])
    text_set = EmbeddingSet(dim=spec.dim, class_names=names,
                            labels=np.arange(c_total, dtype=np.uint32),
                            vectors=text_rows.astype(np.float32))

    token_dim = spec.token_dim or 2 * spec.dim
    encoder = FrozenTextEncoder(token_dim, spec.dim)
    tokens = invert_encoder_tokens(encoder, text_rows, seed=spec.seed)
    table = TextTokenTable(dim=token_dim,
                           entries={n: tokens[i] for i, n in enumerate(names)})

    # the protected classifier: empirical means of base training features
    weights = []
    for c in range(spec.base_classes):
        block = train.vectors[train.labels == c].astype(np.float64)
        m = block.mean(axis=0)
        weights.append(m / np.linalg.norm(m))
    weights_set = EmbeddingSet(dim=spec.dim, class_names=base_names,
                               labels=np.arange(spec.base_classes, dtype=np.uint32),
                               vectors=np.stack(weights).astype(np.float32))

    paths = BenchmarkPaths(
        out_dir=out,
        features_train=out / "features_train.emb1",
        features_test=out / "features_test.emb1",
        text_features=out / "text_features.emb1",
        token_table=out / "token_table.json",
        server_weights=out / "server_weights.emb1",
        splits=out / "splits.json",
        meta=out / "benchmark.json",
    )
    write_emb1(train, paths.features_train)
    write_emb1(test, paths.features_test)
    write_emb1(text_set, paths.text_features)
    table.save(paths.token_table)
    write_emb1(weights_set, paths.server_weights)
    SplitSpec(base=base_names, new=new_names).save(paths.splits)
    paths.meta.write_text(json.dumps({
        "spec": asdict(spec),
        "class_names": names,
        "true_means": means.tolist(),
        "min_pairwise_angle_deg": math.degrees(achieved),
        "encoder_seed": encoder.seed,
        "token_dim": token_dim,
    }, indent=2) + "\n", encoding="utf-8")
    return paths
