"""Stage 1: recover virtual base-class features from the protected classifier.

White-box: the classifier weight rows are the class prototypes; derive the
concentration from their geometry and sample. Black-box: only a prediction
API is reachable, so the prototypes start at the text features and are tuned
until the client-side cosine scores of sampled virtual features match the
scores the server returns for the same features.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .optim import AdamState, adam_step
from .store import EmbeddingSet
from .validation import rng_from_seed, unit_rows
from .vmf import (ClassPrototypes, VmfParams, derive_kappa, sample_all_classes,
                  sample_unit_vmf)

# training batches draw from (seed, 1 + epoch, class) substreams, disjoint
# from the (seed, class) substreams used for returned virtual sets
_EPOCH_STREAM_BASE = 1


@dataclass
class RecoveryConfig:
    samples_per_class: int = 300
    epochs: int = 100
    learning_rate: float = 3e-4
    batch_size: int = 64
    seed: int = 0
    mode: str = "white-box"
    lam: float = 1.0
    resample_each_epoch: bool = True

    def validate(self) -> None:
        if self.samples_per_class < 0:
            raise ValueError("samples_per_class must be nonnegative")
        for name in ("epochs", "batch_size"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if self.lam <= 0:
            raise ValueError("lambda must be positive")
        if self.mode not in ("white-box", "black-box"):
            raise ValueError(f"unknown mode {self.mode!r}")


@dataclass
class RecoveryResult:
    virtual: EmbeddingSet
    prototypes: ClassPrototypes
    params: VmfParams
    loss_history: list[float] = field(default_factory=list)
    converged: bool = True
    metadata: dict = field(default_factory=dict)


def recover_whitebox(weights: ClassPrototypes, config: RecoveryConfig) -> tuple[EmbeddingSet, VmfParams]:
    """Sample virtual base features directly from the classifier weights."""
    config.validate()
    protos = ClassPrototypes(class_names=list(weights.class_names),
                             directions=unit_rows(weights.directions))
    params = VmfParams(prototypes=protos, kappa_text=derive_kappa(protos), lam=config.lam)
    virtual = sample_all_classes(params, config.samples_per_class, config.seed)
    return virtual, params


def _proto_loss_graph(X: np.ndarray, S: np.ndarray):
    """Squared gap between server scores and client cosine scores, averaged
    over the batch and class dimensions."""
    Xc = ad.Tensor(X)
    Sc = ad.Tensor(S)

    def graph(leaves):
        rows = ad.l2_normalize(leaves["M"], axis=1)
        cos = ad.matmul(Xc, ad.transpose(rows))
        return ad.mse(cos, Sc)

    return graph


def _sample_training_batch(directions: np.ndarray, kappa_eff: float, batch_size: int,
                           seed: int, epoch_stream: int) -> tuple[np.ndarray, np.ndarray]:
    """Draw a class-balanced batch from the current prototypes.

    Returns (features, labels); classes split the batch as evenly as possible.
    """
    C = directions.shape[0]
    counts = np.full(C, batch_size // C, dtype=np.int64)
    counts[: batch_size % C] += 1
    xs, ys = [], []
    for c in range(C):
        if counts[c] == 0:
            continue
        rng = rng_from_seed(seed, epoch_stream, c)
        xs.append(sample_unit_vmf(directions[c], kappa_eff, int(counts[c]), rng))
        ys.append(np.full(int(counts[c]), c, dtype=np.int64))
    return np.concatenate(xs, axis=0), np.concatenate(ys)


def recover_blackbox(text_protos: ClassPrototypes, client, config: RecoveryConfig) -> RecoveryResult:
    """Distill the protected classifier's prototypes through its prediction API.

    Each epoch: normalize the learnable prototypes, sample a batch of virtual
    features from the current vMF model, submit them to the server, and take
    one Adam step on the squared score gap. The concentration stays fixed at
    the value derived from the initial text prototypes. Returns the tuned
    prototypes plus a fresh virtual set sampled from them.
    """
    config.validate()
    info = client.info()
    if info["dim"] != text_protos.dim:
        raise ValueError(f"server dimensionality {info['dim']} does not match "
                         f"text prototypes ({text_protos.dim})")
    if info["num_classes"] != text_protos.num_classes:
        raise ValueError(f"server class count {info['num_classes']} does not match "
                         f"text prototypes ({text_protos.num_classes})")

    init = ClassPrototypes(class_names=list(text_protos.class_names),
                           directions=unit_rows(text_protos.directions))
    kappa_text = derive_kappa(init)
    kappa_eff = config.lam * kappa_text

    M = init.directions.copy()
    opt_state = AdamState.init({"M": M}, learning_rate=config.learning_rate)
    losses = []
    fixed_batch = None

    for epoch in range(config.epochs):
        M = unit_rows(M)
        if config.resample_each_epoch or fixed_batch is None:
            X, _ = _sample_training_batch(M, kappa_eff, config.batch_size,
                                          config.seed, _EPOCH_STREAM_BASE + epoch)
            S = np.asarray(client.predict(X), dtype=np.float64)
            if config.resample_each_epoch is False:
                fixed_batch = (X, S)
        else:
            X, S = fixed_batch
        loss, grads = ad.eval_with_grad(_proto_loss_graph(X, S), {"M": M})
        if not np.isfinite(loss):
            raise FloatingPointError(f"non-finite prototype loss at epoch {epoch}")
        losses.append(loss)
        new_params, opt_state = adam_step({"M": M}, grads, opt_state)
        M = unit_rows(new_params["M"])

    learned = ClassPrototypes(class_names=list(init.class_names), directions=unit_rows(M))
    params = VmfParams(prototypes=learned, kappa_text=kappa_text, lam=config.lam)
    # the final set draws from (seed, class) substreams, disjoint from the
    # (seed, 1 + epoch, class) substreams used by training batches
    virtual = sample_all_classes(params, config.samples_per_class, config.seed)

    initial, final = losses[0], losses[-1]
    converged = bool(final <= 0.1 * initial or final < 1e-8)
    return RecoveryResult(
        virtual=virtual,
        prototypes=learned,
        params=params,
        loss_history=losses,
        converged=converged,
        metadata={
            "initial_loss": initial,
            "final_loss": final,
            "loss_reduction": float(initial / final) if final > 0 else float("inf"),
            "kappa_text": kappa_text,
            "epochs": config.epochs,
        },
    )


