"""Data-free zero-shot learning on unit-sphere embeddings.

Recovers virtual base-class features from a protected classifier via
von Mises-Fisher sampling, aligns them with text features through
feature-language prompt tuning, synthesizes unseen-class features with a
conditional generator, and evaluates generalized zero-shot and base-to-new
protocols. Everything operates on embedding vectors; no images are touched.
"""

from .autodiff import (Tensor, eval_with_grad, finite_diff_check,
                       finite_diff_check_directional)
from .benchmark import BenchmarkGeometryError, SyntheticBenchmarkSpec, make_benchmark
from .classifier import (ClassifierConfig, EvalReport, LinearClassifier,
                         evaluate_base_to_new, evaluate_gzsl, harmonic_mean,
                         train_classifier)
from .estimators import (ConditionalFeatureGenerator, CosineTextClassifier,
                         PromptTuner)
from .generator import (GeneratorState, GenTrainConfig, read_gen1, synthesize,
                        train_generator, write_gen1)
from .optim import Adam, AdamState, adam_step
from .pipeline import (ConfigError, PipelineConfig, PipelineStageError,
                       run_pipeline)
from .prompt_tuning import (FlptConfig, FrozenTextEncoder, PromptState,
                            TextTokenTable, compute_shift, encode_class_text,
                            enhance_features, flpt_loss, train_flpt)
from .recovery import (RecoveryConfig, RecoveryResult, recover_blackbox,
                       recover_whitebox)
from .service import (HttpPredictionClient, LocalPredictionClient,
                      PredictionServer, ServerClassifier, ServiceHandle,
                      predict_remote, serve)
from .store import (EmbeddingSet, SplitSpec, apply_split, concat_sets, normalize,
                    read_emb1, write_emb1)
from .vmf import (ClassPrototypes, VmfParams, derive_kappa, sample_all_classes,
                  sample_vmf)

__version__ = "0.1.0"

__all__ = [name for name in dir() if not name.startswith("_")]
