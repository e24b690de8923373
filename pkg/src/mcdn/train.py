"""Training loop with plateau learning-rate halving, evaluation, checkpoints."""

from __future__ import annotations

import copy
import json
import struct
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .config import ModelConfig, TrainConfig, merge_config
from .metrics import MetricsReport, compute_metrics
from .model import batch_objective, forward_batch, trainable_params
from .optim import AdamState, adam_step, clip_global_norm
from .tensor import Rng, Tensor, no_grad
from .text import PAD_ID, EncodedBatch, SegmentedExample, Vocabulary, encode_batch

__all__ = [
    "TrainingDiverged",
    "CheckpointError",
    "CHECKPOINT_VERSION",
    "predict_scores",
    "evaluate",
    "train",
    "save_checkpoint",
    "load_checkpoint",
]

CHECKPOINT_MAGIC = b"MCDN"
CHECKPOINT_VERSION = 1


class TrainingDiverged(Exception):
    pass


class CheckpointError(Exception):
    pass


def _batches(n: int, size: int, order: Optional[np.ndarray] = None):
    idx = np.arange(n) if order is None else order
    for start in range(0, n, size):
        yield idx[start:start + size]


def predict_scores(params: Dict[str, Tensor], cfg: ModelConfig,
                   examples: Sequence[SegmentedExample], vocab: Vocabulary,
                   batch_size: int = 32) -> np.ndarray:
    """Causal probabilities, dropout disabled, no tape."""
    scores = []
    with no_grad():
        for chunk in _batches(len(examples), batch_size):
            batch = encode_batch([examples[i] for i in chunk], vocab, cfg.max_len)
            probs = forward_batch(params, cfg, batch, training=False)
            scores.extend(probs.data[:, 1].tolist())
    return np.asarray(scores)


def evaluate(params: Dict[str, Tensor], cfg: ModelConfig,
             examples: Sequence[SegmentedExample], vocab: Vocabulary,
             batch_size: int = 32) -> MetricsReport:
    labels = [ex.label for ex in examples]
    if any(lbl is None for lbl in labels):
        raise ValueError("evaluate requires labeled examples")
    scores = predict_scores(params, cfg, examples, vocab, batch_size)
    return compute_metrics(scores, labels)


def train(params: Dict[str, Tensor], cfg: ModelConfig, tcfg: TrainConfig,
          train_examples: Sequence[SegmentedExample],
          valid_examples: Sequence[SegmentedExample],
          vocab: Vocabulary, log_path: Optional[str] = None
          ) -> Tuple[Dict[str, Tensor], List[Dict]]:
    """Seeded epoch loop; halves lr when valid F1 plateaus; returns the
    best-F1 parameter snapshot and the per-epoch history."""
    if not train_examples or not valid_examples:
        raise ValueError("train and valid sets must be nonempty")
    rng = Rng(tcfg.seed)
    trainables = trainable_params(params)
    state = AdamState(trainables)
    lr = tcfg.lr
    best_f1 = -1.0
    best_params = None
    no_improve = 0
    history: List[Dict] = []
    log_fh = open(log_path, "w", encoding="utf-8") if log_path else None
    try:
        for epoch in range(1, tcfg.epochs + 1):
            order = rng.permutation(len(train_examples))
            losses = []
            for batch_idx, chunk in enumerate(_batches(len(train_examples),
                                                       tcfg.batch_size, order)):
                batch = encode_batch([train_examples[i] for i in chunk],
                                     vocab, cfg.max_len)
                for p in trainables.values():
                    p.zero_grad()
                loss, _ = batch_objective(params, cfg, batch, training=True, rng=rng)
                loss_val = float(loss.data)
                if not np.isfinite(loss_val):
                    norms = {k: float(np.linalg.norm(p.data))
                             for k, p in trainables.items()}
                    raise TrainingDiverged(
                        f"non-finite loss at epoch {epoch} batch {batch_idx}; "
                        f"parameter norms: {norms}")
                loss.backward()
                if params["emb.word"].grad is not None:
                    params["emb.word"].grad[PAD_ID] = 0.0  # PAD row stays frozen
                grads = [p.grad for p in trainables.values() if p.grad is not None]
                clip_global_norm(grads, tcfg.clip_norm)
                adam_step(trainables, state, lr=lr, beta1=tcfg.adam_beta1,
                          beta2=tcfg.adam_beta2, eps=tcfg.adam_eps)
                losses.append(loss_val)
            valid_f1 = evaluate(params, cfg, valid_examples, vocab,
                                tcfg.batch_size).f1
            entry = {"epoch": epoch, "lr": lr,
                     "train_loss": float(np.mean(losses)), "valid_f1": valid_f1}
            history.append(entry)
            if log_fh:
                log_fh.write(json.dumps(entry) + "\n")
                log_fh.flush()
            if valid_f1 > best_f1:
                best_f1 = valid_f1
                best_params = {k: copy.deepcopy(p.data) for k, p in params.items()}
                no_improve = 0
            else:
                no_improve += 1
                if no_improve >= tcfg.patience:
                    lr *= tcfg.lr_factor
                    no_improve = 0
    finally:
        if log_fh:
            log_fh.close()
    best = {}
    for name, p in params.items():
        t = Tensor(best_params[name] if best_params else p.data.copy(),
                   trainable=p.trainable, name=name)
        best[name] = t
    return best, history


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------
# Layout: magic "MCDN", uint32 version, length-prefixed UTF-8 config JSON,
# length-prefixed vocabulary JSON, uint32 parameter count, then per parameter:
# length-prefixed name, uint32 rank, uint32 extents, little-endian float32 data.

def _write_blob(fh, blob: bytes):
    fh.write(struct.pack("<I", len(blob)))
    fh.write(blob)


def _read_exact(fh, n: int) -> bytes:
    blob = fh.read(n)
    if len(blob) != n:
        raise CheckpointError("truncated checkpoint file")
    return blob


def _read_blob(fh) -> bytes:
    (n,) = struct.unpack("<I", _read_exact(fh, 4))
    return _read_exact(fh, n)


def save_checkpoint(path: str, cfg: ModelConfig, vocab: Vocabulary,
                    params: Dict[str, Tensor]) -> None:
    cfg_doc = {"d": cfg.d, "n_blocks": cfg.n_blocks, "n_heads": cfg.n_heads,
               "ffn_mult": cfg.ffn_mult, "k": cfg.k, "windows": list(cfg.windows),
               "d_g": cfg.d_g, "gru_layers": cfg.gru_layers, "dropout": cfg.dropout,
               "l2": cfg.l2, "alpha": cfg.alpha, "beta": cfg.beta,
               "max_len": cfg.max_len, "positional": cfg.positional,
               "pooling": cfg.pooling}
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", CHECKPOINT_VERSION))
        _write_blob(fh, json.dumps(cfg_doc, sort_keys=True).encode("utf-8"))
        _write_blob(fh, json.dumps(vocab.to_dict(), sort_keys=True).encode("utf-8"))
        names = sorted(params)
        fh.write(struct.pack("<I", len(names)))
        for name in names:
            data = params[name].data
            _write_blob(fh, name.encode("utf-8"))
            fh.write(struct.pack("<I", data.ndim))
            for extent in data.shape:
                fh.write(struct.pack("<I", extent))
            fh.write(data.astype("<f4").tobytes())


def load_checkpoint(path: str) -> Tuple[ModelConfig, Vocabulary, Dict[str, Tensor]]:
    """Parses the full file before returning; never yields a partial model."""
    with open(path, "rb") as fh:
        magic = _read_exact(fh, 4)
        if magic != CHECKPOINT_MAGIC:
            raise CheckpointError("not a model checkpoint (bad magic)")
        (version,) = struct.unpack("<I", _read_exact(fh, 4))
        if version != CHECKPOINT_VERSION:
            raise CheckpointError(
                f"checkpoint version {version} != supported {CHECKPOINT_VERSION}")
        try:
            cfg_doc = json.loads(_read_blob(fh).decode("utf-8"))
            vocab_doc = json.loads(_read_blob(fh).decode("utf-8"))
        except json.JSONDecodeError as exc:
            raise CheckpointError(f"corrupt checkpoint metadata: {exc.msg}")
        cfg, _ = merge_config(cfg_doc)
        vocab = Vocabulary.from_dict(vocab_doc)
        (n_params,) = struct.unpack("<I", _read_exact(fh, 4))
        params: Dict[str, Tensor] = {}
        for _ in range(n_params):
            name = _read_blob(fh).decode("utf-8")
            (rank,) = struct.unpack("<I", _read_exact(fh, 4))
            shape = tuple(struct.unpack("<I", _read_exact(fh, 4))[0]
                          for _ in range(rank))
            count = int(np.prod(shape)) if shape else 1
            data = np.frombuffer(_read_exact(fh, 4 * count), dtype="<f4")
            trainable = not (name == "emb.pos" and cfg.positional == "sinusoidal")
            params[name] = Tensor(data.astype(np.float64).reshape(shape),
                                  trainable=trainable, name=name)
        if fh.read(1):
            raise CheckpointError("trailing bytes after checkpoint payload")
    return cfg, vocab, params
