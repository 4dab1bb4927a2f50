"""Multi-modal embedding with modality completion.

A self-contained research codebase: dense f64 tensors with reverse-mode
autodiff, a causal embedding backbone that accepts visual and text tokens,
a completion module that synthesizes visual tokens for image-free inputs
(with a padding scheme that fixes their count), the paired contrastive and
alignment losses, a deterministic synthetic corpus, retrieval evaluation,
and the skewed-corpus bias experiment. No ML framework underneath; numpy
only.
"""

from .autodiff import Tape, Tensor
from .config import RunConfig, load_run_config
from .corpus import (COMBOS, SPLITS, TASK_TAGS, CorpusSpec, ModalInput,
                     PairRecord, eval_spec_from, gen_corpus, read_manifest,
                     skew_counts, write_manifest)
from .errors import (CheckpointError, ConfigError, ContractError,
                     DegenerateInputError, DimensionError, EmptyCorpusError,
                     ManifestError, PaddingOverflowError, TrainingDiverged)
from .model import (AblationFlags, CompletionEmbedder, ModelConfig,
                    PaddingConfig, drop_image, load_checkpoint, pad_prompt,
                    save_checkpoint)
from .retrieval import (BiasReport, CandidateIndex, ScoreReport,
                        bias_experiment, build_index, evaluate, match,
                        precision_at_1)
from .training import (AdapterConfig, LossConfig, TrainConfig,
                       apply_low_rank_adapters, aux_loss, composite_loss,
                       info_nce, train)

__version__ = "0.1.0"

__all__ = [
    "AblationFlags", "AdapterConfig", "BiasReport", "COMBOS", "CandidateIndex",
    "CheckpointError", "CompletionEmbedder", "ConfigError", "ContractError",
    "CorpusSpec", "DegenerateInputError", "DimensionError", "EmptyCorpusError",
    "LossConfig", "ManifestError", "ModalInput", "ModelConfig", "PaddingConfig",
    "PaddingOverflowError", "PairRecord", "RunConfig", "SPLITS", "ScoreReport",
    "TASK_TAGS", "Tape", "Tensor", "TrainConfig", "TrainingDiverged",
    "apply_low_rank_adapters", "aux_loss", "bias_experiment", "build_index",
    "composite_loss", "drop_image", "eval_spec_from", "evaluate", "gen_corpus",
    "info_nce", "load_checkpoint", "load_run_config", "match", "pad_prompt",
    "precision_at_1", "read_manifest", "save_checkpoint", "skew_counts",
    "train", "write_manifest",
]
