"""Stage 2: feature-language prompt tuning.

Four learnable prompt vectors feed a frozen text encoder together with each
class-name token, producing per-class text features; a light mapping network
turns the same prompts into a single class-agnostic shift added to every
image feature. Both parameter groups are trained jointly to pull each virtual
feature toward its own class's text feature under a sharp cosine softmax,
aligning the visual and textual geometries without touching the encoder.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .optim import AdamState, adam_step
from .store import EmbeddingSet
from .validation import check_feature_matrix, rng_from_seed, unit_rows

NUM_PROMPTS = 4
DEFAULT_TAU = 0.01
# benchmark generation and pipeline runs must build the identical frozen
# encoder, so its weights derive from this fixed seed unless overridden
DEFAULT_ENCODER_SEED = 90210


@dataclass
class TextTokenTable:
    """Per-class token embeddings for the [CLS] slot, plus optional prefix
    token embeddings used to initialize the prompts."""

    dim: int
    entries: dict[str, np.ndarray]
    prefix: np.ndarray | None = None  # (4, dim) when the source provides it

    def __post_init__(self):
        self.entries = {k: np.asarray(v, dtype=np.float64) for k, v in self.entries.items()}
        for name, vec in self.entries.items():
            if vec.shape != (self.dim,):
                raise ValueError(f"token entry {name!r} has shape {vec.shape}, "
                                 f"expected ({self.dim},)")
            if not np.all(np.isfinite(vec)):
                raise ValueError(f"token entry {name!r} contains non-finite values")
        if self.prefix is not None:
            self.prefix = np.asarray(self.prefix, dtype=np.float64)
            if self.prefix.shape != (NUM_PROMPTS, self.dim):
                raise ValueError("prefix block must hold exactly 4 token embeddings")

    def rows(self, names: list[str]) -> np.ndarray:
        missing = [n for n in names if n not in self.entries]
        if missing:
            raise KeyError(f"classes missing from token table: {missing}")
        return np.stack([self.entries[n] for n in names])

    @classmethod
    def synthetic(cls, names: list[str], dim: int, seed: int = 0) -> "TextTokenTable":
        """Deterministic per-name Gaussian embeddings (hash-seeded, then fixed)."""
        entries = {}
        for name in names:
            digest = hashlib.blake2b(f"{seed}:{name}".encode("utf-8"), digest_size=8).digest()
            rng = np.random.Generator(np.random.PCG64(int.from_bytes(digest, "little")))
            entries[name] = rng.standard_normal(dim)
        return cls(dim=dim, entries=entries)

    @classmethod
    def load(cls, path) -> "TextTokenTable":
        data = json.loads(Path(path).read_text(encoding="utf-8"))
        prefix = np.asarray(data["prefix"], dtype=np.float64) if "prefix" in data else None
        return cls(dim=int(data["dim"]),
                   entries={k: np.asarray(v, dtype=np.float64)
                            for k, v in data["classes"].items()},
                   prefix=prefix)

    def save(self, path) -> None:
        doc = {"dim": self.dim,
               "classes": {k: v.tolist() for k, v in self.entries.items()}}
        if self.prefix is not None:
            doc["prefix"] = self.prefix.tolist()
        Path(path).write_text(json.dumps(doc) + "\n", encoding="utf-8")


class FrozenTextEncoder:
    """Frozen two-layer GELU encoder from pooled token embeddings to unit text features.

    Mean-pools the four prompt embeddings with the class token, then applies a
    fixed random nonlinear map (hidden width 4 x feature dim) and L2-normalizes.
    Differentiable with respect to the prompt inputs; its own weights never train.
    """

    def __init__(self, token_dim: int, feature_dim: int, hidden: int | None = None,
                 seed: int = DEFAULT_ENCODER_SEED):
        self.token_dim = token_dim
        self.feature_dim = feature_dim
        self.hidden = hidden or 4 * feature_dim
        self.seed = seed
        rng = rng_from_seed(seed)
        self.w1 = rng.standard_normal((token_dim, self.hidden)) / np.sqrt(token_dim)
        self.w2 = rng.standard_normal((self.hidden, feature_dim)) / np.sqrt(self.hidden)

    def encode_rows(self, prompts, cls_rows):
        """Graph node mapping (4, e) prompts + (C, e) class tokens to (C, d) unit rows.

        Either operand may be a learnable tensor; anything else is treated as
        a constant.
        """
        if not isinstance(cls_rows, ad.Tensor):
            cls_rows = ad.Tensor(check_feature_matrix(cls_rows, dim=self.token_dim,
                                                      name="cls_rows"))
        prompts = ad.astensor(prompts)
        pooled = ad.scale(ad.add(cls_rows, ad.sum_(prompts, axis=0)),
                          1.0 / (NUM_PROMPTS + 1))
        h = ad.gelu(ad.matmul(pooled, ad.Tensor(self.w1)))
        out = ad.matmul(h, ad.Tensor(self.w2))
        return ad.l2_normalize(out, axis=1)

    def encode(self, prompts: np.ndarray, cls_rows: np.ndarray) -> np.ndarray:
        """Forward-only convenience returning a plain array."""
        return self.encode_rows(ad.Tensor(np.asarray(prompts, dtype=np.float64)),
                                cls_rows).values


@dataclass
class PromptState:
    """Learnable prompt vectors and mapping-network parameters, plus the
    shift weight and softmax temperature."""

    prompts: np.ndarray  # (4, e)
    mapping: dict[str, np.ndarray]  # w1 (e, 2e), b1, w2 (2e, d), b2
    alpha: float = 1.0
    tau: float = DEFAULT_TAU

    def __post_init__(self):
        self.prompts = np.asarray(self.prompts, dtype=np.float64)
        if self.prompts.shape[0] != NUM_PROMPTS:
            raise ValueError("exactly 4 prompt vectors are required")
        self.mapping = {k: np.asarray(v, dtype=np.float64) for k, v in self.mapping.items()}
        if self.alpha < 0:
            raise ValueError("alpha must be nonnegative")
        if self.tau <= 0:
            raise ValueError("tau must be positive")

    @property
    def token_dim(self) -> int:
        return self.prompts.shape[1]

    @property
    def feature_dim(self) -> int:
        return self.mapping["w2"].shape[1]

    def to_json(self) -> str:
        return json.dumps({
            "prompts": self.prompts.tolist(),
            "mapping": {k: v.tolist() for k, v in self.mapping.items()},
            "alpha": self.alpha,
            "tau": self.tau,
        })

    @classmethod
    def from_json(cls, text: str) -> "PromptState":
        data = json.loads(text)
        return cls(prompts=np.asarray(data["prompts"]),
                   mapping={k: np.asarray(v) for k, v in data["mapping"].items()},
                   alpha=float(data["alpha"]), tau=float(data["tau"]))


def init_prompt_state(token_dim: int, feature_dim: int, alpha: float = 1.0,
                      tau: float = DEFAULT_TAU, seed: int = 0,
                      prefix: np.ndarray | None = None) -> PromptState:
    """Fresh state: prompts from the prefix embeddings when available, else a
    small Gaussian; mapping output layer zero so the shift starts at zero."""
    rng = rng_from_seed(seed)
    if prefix is not None:
        prompts = np.array(prefix, dtype=np.float64)
        if prompts.shape != (NUM_PROMPTS, token_dim):
            raise ValueError("prefix embeddings must have shape (4, token_dim)")
    else:
        prompts = rng.standard_normal((NUM_PROMPTS, token_dim)) * 0.02
    hidden = 2 * token_dim
    mapping = {
        "w1": rng.standard_normal((token_dim, hidden)) / np.sqrt(token_dim),
        "b1": np.zeros(hidden),
        "w2": np.zeros((hidden, feature_dim)),
        "b2": np.zeros(feature_dim),
    }
    return PromptState(prompts=prompts, mapping=mapping, alpha=alpha, tau=tau)


def _shift_node(prompts, mapping):
    """Average of the mapping network applied to each prompt vector: (d,)."""
    h = ad.gelu(ad.add(ad.matmul(prompts, mapping["w1"]), mapping["b1"]))
    mapped = ad.add(ad.matmul(h, mapping["w2"]), mapping["b2"])  # (4, d)
    return ad.mean(mapped, axis=0)


def compute_shift(state: PromptState) -> np.ndarray:
    """The class-agnostic feature shift produced by the current state."""
    node = _shift_node(ad.Tensor(state.prompts),
                       {k: ad.Tensor(v) for k, v in state.mapping.items()})
    return node.values


def enhance_features(features: EmbeddingSet, state: PromptState) -> EmbeddingSet:
    """Add the shift to every vector, then re-normalize to the unit sphere."""
    shift = compute_shift(state)
    if shift.shape[0] != features.dim:
        raise ValueError(f"shift dimension {shift.shape[0]} does not match "
                         f"features ({features.dim})")
    moved = features.vectors.astype(np.float64) + state.alpha * shift
    norms = np.linalg.norm(moved, axis=1, keepdims=True)
    if np.any(norms == 0.0):
        raise ValueError("enhancement produced a zero vector")
    return EmbeddingSet(dim=features.dim, class_names=list(features.class_names),
                        labels=features.labels.copy(),
                        vectors=(moved / norms).astype(np.float32))


def encode_class_text(encoder: FrozenTextEncoder, tokens: TextTokenTable,
                      state: PromptState, class_name: str) -> np.ndarray:
    """Unit text feature for one class under the current prompts."""
    row = tokens.rows([class_name])
    return encoder.encode(state.prompts, row)[0]


def flpt_loss(enhanced_x: np.ndarray, label: int, text_rows: np.ndarray,
              tau: float = DEFAULT_TAU) -> float:
    """Cross-entropy of the cosine softmax over all class text features."""
    x = np.asarray(enhanced_x, dtype=np.float64)
    T = check_feature_matrix(text_rows, name="text_rows")
    logits = ad.matmul(ad.l2_normalize(ad.Tensor(x[None, :]), axis=1),
                       ad.transpose(ad.l2_normalize(ad.Tensor(T), axis=1)))
    return float(ad.softmax_cross_entropy(logits, [int(label)], tau=tau).values)


@dataclass
class FlptConfig:
    alpha: float = 1.0
    tau: float = DEFAULT_TAU
    epochs: int = 50
    batch_size: int = 64
    learning_rate: float = 3e-4
    seed: int = 0
    encoder_seed: int = DEFAULT_ENCODER_SEED

    def validate(self) -> None:
        if self.epochs < 0 or self.batch_size <= 0 or self.learning_rate <= 0:
            raise ValueError("epochs must be >= 0, batch_size and learning_rate positive")
        if self.tau <= 0 or self.alpha < 0:
            raise ValueError("tau must be positive and alpha nonnegative")


@dataclass
class FlptResult:
    state: PromptState
    enhanced_base: EmbeddingSet
    loss_history: list[float] = field(default_factory=list)

    # bound by train_flpt
    _text_fn: object = None

    def text_features(self, names: list[str]) -> np.ndarray:
        """Unit text features (len(names), d) under the trained state."""
        return self._text_fn(names)

    def text_feature_set(self, names: list[str]) -> EmbeddingSet:
        rows = self.text_features(names)
        return EmbeddingSet(dim=rows.shape[1], class_names=list(names),
                            labels=np.arange(len(names), dtype=np.uint32),
                            vectors=rows.astype(np.float32))


def _flatten_params(state: PromptState, train_prompts: bool) -> dict[str, np.ndarray]:
    params = {f"map_{k}": v for k, v in state.mapping.items()}
    if train_prompts:
        params["prompts"] = state.prompts
    return params


def _unflatten(params: dict[str, np.ndarray], state: PromptState) -> PromptState:
    return PromptState(
        prompts=params.get("prompts", state.prompts),
        mapping={k[4:]: v for k, v in params.items() if k.startswith("map_")},
        alpha=state.alpha, tau=state.tau,
    )


def train_flpt(virtual_base: EmbeddingSet, encoder: FrozenTextEncoder | None,
               tokens: TextTokenTable | None, config: FlptConfig,
               text_features: EmbeddingSet | None = None) -> FlptResult:
    """Tune prompts and the mapping network on the virtual base set.

    Full mode (token table + encoder given): text features are re-encoded from
    the learnable prompts every step and both parameter groups train.

    Shift-only mode (``text_features`` given instead of a token table): the
    text side stays frozen to the provided per-class features and only the
    mapping network trains. Used when text features come from an exporter
    that cannot be differentiated through.
    """
    config.validate()
    if len(virtual_base) == 0:
        raise ValueError("training set is empty")
    covered = np.unique(virtual_base.labels)
    if covered.size < 2:
        raise ValueError("need at least two classes to align features")

    full_mode = tokens is not None
    if full_mode:
        if encoder is None:
            raise ValueError("full mode requires a text encoder")
        token_dim = tokens.dim
        cls_rows = tokens.rows(virtual_base.class_names)
        fixed_text = None
    else:
        if text_features is None:
            raise ValueError("provide a token table or fixed text features")
        fixed = {n: v for n, v in zip(text_features.class_names,
                                      unit_rows(text_features.vectors.astype(np.float64)))}
        missing = [n for n in virtual_base.class_names if n not in fixed]
        if missing:
            raise ValueError(f"classes missing fixed text features: {missing}")
        fixed_text = np.stack([fixed[n] for n in virtual_base.class_names])
        token_dim = virtual_base.dim  # prompts unused, kept for state shape
        cls_rows = None

    state = init_prompt_state(token_dim, virtual_base.dim, alpha=config.alpha,
                              tau=config.tau, seed=config.seed,
                              prefix=tokens.prefix if full_mode else None)
    X = virtual_base.vectors.astype(np.float64)
    y = virtual_base.labels.astype(np.int64)

    params = _flatten_params(state, train_prompts=full_mode)
    opt = AdamState.init(params, learning_rate=config.learning_rate)
    rng = rng_from_seed(config.seed, 1)
    history = []

    def batch_graph(Xb, yb):
        def graph(leaves):
            mapping = {k[4:]: leaves[f"map_{k[4:]}"] for k in leaves if k.startswith("map_")}
            shift = _shift_node(leaves.get("prompts", ad.Tensor(state.prompts)), mapping)
            moved = ad.add(ad.Tensor(Xb), ad.scale(shift, state.alpha))
            xhat = ad.l2_normalize(moved, axis=1)
            if full_mode:
                t_rows = encoder.encode_rows(leaves["prompts"], cls_rows)
            else:
                t_rows = ad.Tensor(fixed_text)
            logits = ad.matmul(xhat, ad.transpose(t_rows))
            return ad.softmax_cross_entropy(logits, yb, tau=config.tau)

        return graph

    for _ in range(config.epochs):
        order = rng.permutation(len(X))
        epoch_losses = []
        for lo in range(0, len(order), config.batch_size):
            idx = order[lo:lo + config.batch_size]
            loss, grads = ad.eval_with_grad(batch_graph(X[idx], y[idx]), params)
            if not np.isfinite(loss):
                raise FloatingPointError("non-finite prompt-tuning loss; aborting")
            epoch_losses.append(loss)
            params, opt = adam_step(params, grads, opt)
        history.append(float(np.mean(epoch_losses)))

    final_state = _unflatten(params, state)
    enhanced = enhance_features(virtual_base, final_state)

    if full_mode:
        def text_fn(names: list[str]) -> np.ndarray:
            return encoder.encode(final_state.prompts, tokens.rows(names))
    else:
        def text_fn(names: list[str]) -> np.ndarray:
            missing = [n for n in names if n not in fixed]
            if missing:
                raise KeyError(f"classes missing fixed text features: {missing}")
            return np.stack([fixed[n] for n in names])

    return FlptResult(state=final_state, enhanced_base=enhanced,
                      loss_history=history, _text_fn=text_fn)
