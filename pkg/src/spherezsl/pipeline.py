"""End-to-end orchestration: recovery, prompt tuning, generation, evaluation.

Every stage is a file-to-file function: it reads its declared inputs from
disk, writes its artifacts into the run directory, and records both in the
manifest. Running the stages individually (via the CLI) or through
:func:`run_pipeline` therefore takes the identical code path and produces
identical bytes. The manifest doubles as the data-free audit trail: in
black-box mode the recovery stage's declared and logged inputs contain no
real feature file.
"""

from __future__ import annotations

import hashlib
import json
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .classifier import (ClassifierConfig, EvalReport, LinearClassifier,
                         evaluate_base_to_new, evaluate_gzsl, train_classifier)
from .generator import GenTrainConfig, read_gen1, synthesize, train_generator, write_gen1
from .prompt_tuning import (FlptConfig, FrozenTextEncoder, PromptState, TextTokenTable,
                            enhance_features, train_flpt)
from .recovery import RecoveryConfig, recover_blackbox, recover_whitebox
from .service import HttpPredictionClient
from .store import (EmbeddingSet, SplitSpec, apply_split, concat_sets, normalize,
                    read_emb1, write_emb1)
from .vmf import ClassPrototypes


class ConfigError(ValueError):
    """The pipeline configuration is invalid before any stage ran."""


class PipelineStageError(RuntimeError):
    def __init__(self, stage: str, cause: Exception):
        super().__init__(f"stage {stage!r} failed: {cause}")
        self.stage = stage
        self.cause = cause


def _derive_seed(seed: int, tag: int) -> int:
    ss = np.random.SeedSequence(entropy=int(seed), spawn_key=(1000 + tag,))
    return int(ss.generate_state(1, dtype=np.uint64)[0] % (2 ** 63))


@dataclass
class PipelineConfig:
    mode: str = "white-box"
    seed: int = 7
    out_dir: str = "run"
    protocol: str = "gzsl"
    server_url: str | None = None
    weights: str | None = None
    text_features: str | None = None
    token_table: str | None = None
    splits: str | None = None
    test_features: str | None = None
    enable_flpt: bool = True
    enable_generator: bool = True
    per_class_synthesis: int = 300
    recovery: RecoveryConfig = field(default_factory=RecoveryConfig)
    flpt: FlptConfig = field(default_factory=FlptConfig)
    generator: GenTrainConfig = field(default_factory=GenTrainConfig)
    classifier: ClassifierConfig = field(default_factory=ClassifierConfig)

    @classmethod
    def from_dict(cls, data: dict) -> "PipelineConfig":
        data = dict(data)
        paths = data.pop("paths", {})
        seed = int(data.get("seed", 7))
        stages = data.pop("stages", {})

        def sub(name, cls_, tag, renames=()):
            raw = dict(data.pop(name, {}))
            for old, new in renames:
                if old in raw:
                    raw[new] = raw.pop(old)
            raw.setdefault("seed", _derive_seed(seed, tag))
            known = {f for f in cls_.__dataclass_fields__}
            unknown = set(raw) - known
            if unknown:
                raise ConfigError(f"unknown keys in {name!r} config: {sorted(unknown)}")
            return cls_(**raw)

        per_class = int(data.pop("per_class_synthesis", 300))
        cfg = cls(
            mode=data.pop("mode", "white-box"),
            seed=seed,
            out_dir=str(data.pop("out_dir", "run")),
            protocol=data.pop("protocol", "gzsl"),
            server_url=data.pop("server_url", None),
            weights=paths.get("weights"),
            text_features=paths.get("text_features"),
            token_table=paths.get("token_table"),
            splits=paths.get("splits"),
            test_features=paths.get("test_features"),
            enable_flpt=bool(stages.get("flpt", True)),
            enable_generator=bool(stages.get("generator", True)),
            per_class_synthesis=per_class,
            recovery=sub("recovery", RecoveryConfig, 0, renames=[("lambda", "lam")]),
            flpt=sub("flpt", FlptConfig, 1),
            generator=sub("generator", GenTrainConfig, 2),
            classifier=sub("classifier", ClassifierConfig, 3),
        )
        data.pop("seed", None)
        if data:
            raise ConfigError(f"unknown top-level config keys: {sorted(data)}")
        cfg.recovery.mode = cfg.mode
        return cfg

    @classmethod
    def load(cls, path) -> "PipelineConfig":
        try:
            raw = json.loads(Path(path).read_text(encoding="utf-8"))
        except FileNotFoundError:
            raise ConfigError(f"config file not found: {path}")
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config is not valid JSON: {exc}")
        return cls.from_dict(raw)

    def to_dict(self) -> dict:
        doc = {
            "mode": self.mode,
            "seed": self.seed,
            "out_dir": self.out_dir,
            "protocol": self.protocol,
            "server_url": self.server_url,
            "paths": {
                "weights": self.weights,
                "text_features": self.text_features,
                "token_table": self.token_table,
                "splits": self.splits,
                "test_features": self.test_features,
            },
            "stages": {"flpt": self.enable_flpt, "generator": self.enable_generator},
            "per_class_synthesis": self.per_class_synthesis,
            "recovery": asdict(self.recovery),
            "flpt": asdict(self.flpt),
            "generator": asdict(self.generator),
            "classifier": asdict(self.classifier),
        }
        return doc

    def config_hash(self) -> str:
        canon = json.dumps(self.to_dict(), sort_keys=True)
        return hashlib.sha256(canon.encode("utf-8")).hexdigest()

    def artifact(self, name: str) -> Path:
        return Path(self.out_dir) / name

    def validate(self, stages: list[str] | None = None) -> None:
        """Structural and file-existence checks before anything runs.

        ``stages`` restricts path requirements to what those stages read (the
        CLI runs stages individually); the default demands everything a full
        run needs.
        """
        need = set(stages) if stages is not None else {"recovery", "flpt",
                                                       "generate", "train-eval"}
        if self.mode not in ("white-box", "black-box"):
            raise ConfigError(f"unknown mode {self.mode!r}")
        if self.protocol not in ("gzsl", "base-new"):
            raise ConfigError(f"unknown protocol {self.protocol!r}")
        if self.per_class_synthesis < 0:
            raise ConfigError("per_class_synthesis must be nonnegative")
        try:
            self.recovery.validate()
            self.flpt.validate()
            self.generator.validate()
            self.classifier.validate()
        except ValueError as exc:
            raise ConfigError(str(exc))

        if not self.splits:
            raise ConfigError("missing required path: splits")
        if "recovery" in need:
            if self.mode == "black-box":
                if not self.server_url:
                    raise ConfigError("black-box mode requires server_url")
                if not self.text_features:
                    raise ConfigError("black-box mode requires text features "
                                      "for prototype initialization")
            elif not self.weights:
                raise ConfigError("white-box mode requires a weights path")
        if "flpt" in need:
            if self.enable_flpt and not self.token_table and not self.text_features:
                raise ConfigError("prompt tuning requires a token table (full mode) "
                                  "or text features (shift-only)")
            if not self.enable_flpt and not self.text_features:
                raise ConfigError("text features are required when prompt tuning "
                                  "is disabled")
        if "train-eval" in need and not self.test_features:
            raise ConfigError("missing required path: test_features")
        for name in ("weights", "text_features", "token_table", "splits", "test_features"):
            value = getattr(self, name)
            if value and not Path(value).exists():
                raise ConfigError(f"{name} file does not exist: {value}")


class RunContext:
    """Tracks per-stage file access and timing for the manifest."""

    def __init__(self, config: PipelineConfig):
        self.config = config
        self.stages: list[dict] = []
        self.access_log: list[dict] = []
        self._current: dict | None = None

    def start(self, name: str, enabled: bool = True) -> None:
        self._current = {"name": name, "enabled": enabled, "inputs": [], "outputs": [],
                         "seconds": 0.0, "status": "running", "_t0": time.perf_counter()}

    def finish(self, status: str = "ok") -> None:
        cur = self._current
        cur["seconds"] = round(time.perf_counter() - cur.pop("_t0"), 4)
        cur["status"] = status
        self.stages.append(cur)
        self._current = None

    def log_read(self, path) -> None:
        self._log("read", path)

    def log_write(self, path) -> None:
        self._log("write", path)

    def _log(self, op: str, path) -> None:
        entry = {"stage": self._current["name"], "op": op, "path": str(path)}
        self.access_log.append(entry)
        key = "inputs" if op == "read" else "outputs"
        if str(path) not in self._current[key]:
            self._current[key].append(str(path))

    def read_emb1(self, path) -> EmbeddingSet:
        self._log("read", path)
        return read_emb1(path)

    def write_emb1(self, emb_set: EmbeddingSet, path) -> None:
        self._log("write", path)
        write_emb1(emb_set, path)

    def read_text(self, path) -> str:
        self._log("read", path)
        return Path(path).read_text(encoding="utf-8")

    def write_text(self, path, text: str) -> None:
        self._log("write", path)
        Path(path).write_text(text, encoding="utf-8")

    def manifest(self) -> dict:
        return {
            "config_hash": self.config.config_hash(),
            "seed": self.config.seed,
            "mode": self.config.mode,
            "protocol": self.config.protocol,
            "stages": self.stages,
            "file_access": self.access_log,
        }

    def write_manifest(self) -> Path:
        path = self.config.artifact("manifest.json")
        path.write_text(json.dumps(self.manifest(), indent=2) + "\n", encoding="utf-8")
        return path


def _load_split(ctx: RunContext) -> SplitSpec:
    spec = SplitSpec(**json.loads(ctx.read_text(ctx.config.splits)))
    spec.validate()
    return spec


def _prototypes_for(names: list[str], emb_set: EmbeddingSet) -> ClassPrototypes:
    """Unit prototype rows for ``names``, joined by class name."""
    if len(emb_set) != emb_set.num_classes:
        raise ValueError("prototype file must hold exactly one record per class")
    rows = {}
    for label, vec in emb_set.records():
        rows[emb_set.class_names[label]] = np.asarray(vec, dtype=np.float64)
    missing = [n for n in names if n not in rows]
    if missing:
        raise KeyError(f"classes missing from prototype file: {missing}")
    D = np.stack([rows[n] for n in names])
    D /= np.linalg.norm(D, axis=1, keepdims=True)
    return ClassPrototypes(class_names=list(names), directions=D)


def _text_rows_for(names: list[str], emb_set: EmbeddingSet) -> np.ndarray:
    return _prototypes_for(names, emb_set).directions


def stage_recover(ctx: RunContext) -> None:
    """Stage 1: produce virtual base features plus the sampling parameters."""
    cfg = ctx.config
    split = _load_split(ctx)
    if cfg.mode == "white-box":
        weights_set = ctx.read_emb1(cfg.weights)
        protos = _prototypes_for(split.base, weights_set)
        virtual, params = recover_whitebox(protos, cfg.recovery)
        learned = params.prototypes
        extra = {"converged": True, "loss_history": []}
    else:
        text_set = ctx.read_emb1(cfg.text_features)
        protos = _prototypes_for(split.base, text_set)
        client = HttpPredictionClient(cfg.server_url)
        result = recover_blackbox(protos, client, cfg.recovery)
        virtual, params, learned = result.virtual, result.params, result.prototypes
        extra = {"converged": result.converged, "loss_history": result.loss_history,
                 **result.metadata}

    ctx.write_emb1(virtual, cfg.artifact("virtual_base.emb1"))
    ctx.write_emb1(learned.to_embedding_set(), cfg.artifact("prototypes.emb1"))
    ctx.write_text(cfg.artifact("recovery.json"), json.dumps({
        "mode": cfg.mode,
        "kappa_text": params.kappa_text,
        "lambda": params.lam,
        "kappa_effective": params.kappa_effective,
        **extra,
    }, indent=2) + "\n")


def stage_flpt(ctx: RunContext) -> None:
    """Stage 2: align virtual features with text features (or pass through)."""
    cfg = ctx.config
    split = _load_split(ctx)
    virtual = ctx.read_emb1(cfg.artifact("virtual_base.emb1"))

    if not cfg.enable_flpt:
        # pass-through: raw virtual features and file text features
        text_set = ctx.read_emb1(cfg.text_features)
        rows = _text_rows_for(split.all_names, text_set)
        ctx.write_emb1(virtual, cfg.artifact("enhanced_base.emb1"))
        ctx.write_emb1(EmbeddingSet(
            dim=virtual.dim, class_names=split.all_names,
            labels=np.arange(len(split.all_names), dtype=np.uint32),
            vectors=rows.astype(np.float32)), cfg.artifact("text_tuned.emb1"))
        return

    if cfg.token_table:
        ctx.log_read(cfg.token_table)
        table = TextTokenTable.load(cfg.token_table)
        encoder = FrozenTextEncoder(table.dim, virtual.dim, seed=cfg.flpt.encoder_seed)
        result = train_flpt(virtual, encoder, table, cfg.flpt)
    else:
        text_set = ctx.read_emb1(cfg.text_features)
        result = train_flpt(virtual, None, None, cfg.flpt, text_features=text_set)

    ctx.write_emb1(result.enhanced_base, cfg.artifact("enhanced_base.emb1"))
    ctx.write_emb1(result.text_feature_set(split.all_names), cfg.artifact("text_tuned.emb1"))
    ctx.write_text(cfg.artifact("prompt_state.json"), result.state.to_json() + "\n")
    ctx.write_text(cfg.artifact("flpt.json"), json.dumps(
        {"loss_history": result.loss_history}, indent=2) + "\n")


def stage_generate(ctx: RunContext) -> None:
    """Stage 3: fit the conditional generator and synthesize new-class features."""
    cfg = ctx.config
    if not cfg.enable_generator:
        return
    split = _load_split(ctx)
    enhanced = ctx.read_emb1(cfg.artifact("enhanced_base.emb1"))
    text_set = ctx.read_emb1(cfg.artifact("text_tuned.emb1"))
    base_rows = _text_rows_for(enhanced.class_names, text_set)
    state = train_generator(enhanced, base_rows, cfg.generator)
    write_gen1(state, cfg.artifact("generator.gen1"))
    ctx.log_write(cfg.artifact("generator.gen1"))
    new_rows = _text_rows_for(split.new, text_set)
    synth = synthesize(state, list(zip(split.new, new_rows)),
                       cfg.per_class_synthesis, seed=_derive_seed(cfg.seed, 4))
    ctx.write_emb1(synth, cfg.artifact("synthesized_new.emb1"))


def _maybe_enhance(cfg: PipelineConfig, ctx: RunContext, emb_set: EmbeddingSet) -> EmbeddingSet:
    """Apply the learned class-agnostic shift to evaluation features.

    The shift aligns the feature space with the tuned text space, so
    inference-time features get the same treatment training features did.
    """
    state_path = cfg.artifact("prompt_state.json")
    if not cfg.enable_flpt or not state_path.exists():
        return emb_set
    state = PromptState.from_json(ctx.read_text(state_path))
    return enhance_features(normalize(emb_set), state)


def stage_train_eval(ctx: RunContext) -> EvalReport:
    """Stage 4: train the final classifier and evaluate the chosen protocol."""
    cfg = ctx.config
    split = _load_split(ctx)
    enhanced = ctx.read_emb1(cfg.artifact("enhanced_base.emb1"))
    text_set = ctx.read_emb1(cfg.artifact("text_tuned.emb1"))
    test_all = ctx.read_emb1(cfg.test_features)
    test_base, test_new = apply_split(test_all, split)
    test_base = _maybe_enhance(cfg, ctx, test_base)
    test_new = _maybe_enhance(cfg, ctx, test_new)

    if cfg.protocol == "gzsl":
        names = split.all_names
        rows = _text_rows_for(names, text_set)
        if cfg.enable_generator:
            synth = ctx.read_emb1(cfg.artifact("synthesized_new.emb1"))
            train_set = concat_sets(enhanced, synth)
            # concat unions tables in first-seen order; align to split order
            order = [train_set.class_names.index(n) for n in names]
            lut = np.zeros(len(names), dtype=np.uint32)
            for new_idx, old_idx in enumerate(order):
                lut[old_idx] = new_idx
            train_set = EmbeddingSet(dim=train_set.dim, class_names=names,
                                     labels=lut[train_set.labels],
                                     vectors=train_set.vectors)
            clf = train_classifier(train_set, rows, cfg.classifier)
        else:
            zero_cfg = ClassifierConfig(epochs=0, tau=cfg.classifier.tau)
            empty = EmbeddingSet(dim=enhanced.dim, class_names=names,
                                 labels=np.zeros(0, np.uint32),
                                 vectors=np.zeros((0, enhanced.dim), np.float32))
            clf = train_classifier(empty, rows, zero_cfg)
        report = evaluate_gzsl(clf, test_base, test_new)
    else:
        base_rows = _text_rows_for(split.base, text_set)
        new_rows = _text_rows_for(split.new, text_set)
        clf_base = train_classifier(enhanced, base_rows, cfg.classifier)
        if cfg.enable_generator:
            synth = ctx.read_emb1(cfg.artifact("synthesized_new.emb1"))
            clf_new = train_classifier(synth, new_rows, cfg.classifier)
        else:
            empty = EmbeddingSet(dim=enhanced.dim, class_names=split.new,
                                 labels=np.zeros(0, np.uint32),
                                 vectors=np.zeros((0, enhanced.dim), np.float32))
            clf_new = train_classifier(empty, new_rows,
                                       ClassifierConfig(epochs=0, tau=cfg.classifier.tau))
        report = evaluate_base_to_new(clf_base, clf_new, test_base, test_new)

    ctx.write_text(cfg.artifact("report.json"), report.to_json())
    ctx.write_text(cfg.artifact("report.csv"), report.to_csv())
    return report


@dataclass
class PipelineResult:
    report: EvalReport
    report_path: Path
    manifest_path: Path
    out_dir: Path


_STAGE_PRODUCES = {
    "recovery": {"virtual_base.emb1", "prototypes.emb1", "recovery.json"},
    "flpt": {"enhanced_base.emb1", "text_tuned.emb1"},
    "generate": {"generator.gen1", "synthesized_new.emb1"},
    "train-eval": {"report.json", "report.csv"},
}


def check_stage_prerequisites(cfg: PipelineConfig, wanted: list[str]) -> None:
    """Artifacts a partial run needs must already exist on disk."""
    prereqs = {
        "recovery": [],
        "flpt": ["virtual_base.emb1"],
        "generate": ["enhanced_base.emb1", "text_tuned.emb1"],
        "train-eval": ["enhanced_base.emb1", "text_tuned.emb1"] +
                      (["synthesized_new.emb1"] if cfg.enable_generator else []),
    }
    produced: set[str] = set()
    for name in wanted:
        for artifact in prereqs[name]:
            if artifact in produced:
                continue
            if not cfg.artifact(artifact).exists():
                raise ConfigError(
                    f"stage {name!r} needs {cfg.artifact(artifact)}; "
                    f"run the earlier stages first")
        produced |= _STAGE_PRODUCES[name]


_STAGES = [
    ("recovery", stage_recover, lambda cfg: True),
    ("flpt", stage_flpt, lambda cfg: cfg.enable_flpt),
    ("generate", stage_generate, lambda cfg: cfg.enable_generator),
    ("train-eval", stage_train_eval, lambda cfg: True),
]


def run_pipeline(config: PipelineConfig) -> PipelineResult:
    """Validate, then run all stages in order, writing artifacts and manifest.

    A stage failure aborts the run: the manifest keeps the completed stages,
    marks the failing one, and the exception names it. Reruns with an
    identical config reproduce the report byte for byte.
    """
    config.validate()
    Path(config.out_dir).mkdir(parents=True, exist_ok=True)
    ctx = RunContext(config)
    report = None
    for name, fn, enabled in _STAGES:
        ctx.start(name, enabled=enabled(config))
        try:
            out = fn(ctx)
        except Exception as exc:
            ctx.finish(status="failed")
            ctx.write_manifest()
            raise PipelineStageError(name, exc) from exc
        # the flpt stage still runs in pass-through when disabled; only a
        # fully inert stage is marked skipped
        skipped = name == "generate" and not config.enable_generator
        ctx.finish(status="skipped" if skipped else "ok")
        if name == "train-eval":
            report = out
    manifest_path = ctx.write_manifest()
    return PipelineResult(report=report, report_path=config.artifact("report.json"),
                          manifest_path=manifest_path, out_dir=Path(config.out_dir))
