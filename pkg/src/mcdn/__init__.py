"""Multi-level causality detection: word-level Transformer encoding plus
segment-level relational reasoning over AltLex-split sentences."""

from .config import ModelConfig, TrainConfig, load_config, merge_config
from .gradcheck import model_gradient_check, reduced_config
from .metrics import MetricsReport, auprc, auroc, compute_metrics
from .model import (batch_objective, classify, focal_loss, forward_batch,
                    init_params, predict_label, trainable_params)
from .optim import AdamState, adam_step, clip_global_norm, finite_diff
from .tensor import Rng, Tensor, no_grad
from .text import (AltLexLexicon, DataError, SegmentedExample, Vocabulary,
                   build_vocab, encode_batch, load_word2vec_text, match_altlex,
                   prepare_example, segment, tokenize)
from .train import (CheckpointError, TrainingDiverged, evaluate,
                    load_checkpoint, predict_scores, save_checkpoint, train)

__version__ = "0.1.0"
