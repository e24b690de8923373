"""The causality detection network.

Word level: token + position + segment embeddings feed a clipped
Transformer encoder whose pooled output is the sentence vector h_w.
Segment level: a three-column CNN turns the BL / L / AL segments into
objects, a 2-layer bi-GRU supplies sentence context h_g, and a relation
module aggregates the four directed object pairs into h_s.  The head
concatenates h_w and h_s, classifies with a 2-layer FFN + softmax, and
trains against a focal loss with L2 regularization.
"""

from __future__ import annotations

import math
from typing import Dict, List, Optional, Tuple

import numpy as np

from .config import ModelConfig
from .tensor import (Rng, Tensor, add_l2_penalty, block_max_rows, clamp,
                     concat_cols, concat_rows, conv1d_same, dropout,
                     embedding_lookup, gather_rows, gelu, gru_layer,
                     gru_layer_batched, layer_norm, log, matmul,
                     max_over_time, mul, relu, slice_cols, slice_rows,
                     softmax_rows, sub, tmean, transpose)
from .text import SEG_AL, SEG_BL, SEG_L, EncodedBatch, PAD_ID

__all__ = [
    "init_params",
    "trainable_params",
    "represent_full",
    "represent_scrn",
    "scaled_attention",
    "multi_head",
    "position_wise_ffn",
    "transformer_block",
    "encode_word_level",
    "segment_objects",
    "sentence_context",
    "build_pairs",
    "relation_reason",
    "classify",
    "focal_loss",
    "predict_label",
    "forward_batch",
    "batch_objective",
    "PROB_CLAMP",
]

PROB_CLAMP = 1e-7


def _glorot(rng: Rng, fan_in: int, fan_out: int, shape=None) -> np.ndarray:
    limit = math.sqrt(6.0 / (fan_in + fan_out))
    return (rng.uniform(shape or (fan_in, fan_out)) * 2.0 - 1.0) * limit


def _sinusoidal_table(max_len: int, d: int) -> np.ndarray:
    pos = np.arange(max_len)[:, None]
    i = np.arange(d)[None, :]
    angle = pos / np.power(10000.0, (2 * (i // 2)) / d)
    table = np.where(i % 2 == 0, np.sin(angle), np.cos(angle))
    return table


def init_params(cfg: ModelConfig, vocab_size: int, rng: Rng,
                word_matrix: Optional[np.ndarray] = None) -> Dict[str, Tensor]:
    """Named parameter collection; the word PAD row starts (and stays) zero."""
    d, dg, k = cfg.d, cfg.d_g, cfg.k
    p: Dict[str, Tensor] = {}

    if word_matrix is not None:
        if word_matrix.shape != (vocab_size, d):
            raise ValueError("word matrix shape %r != (%d, %d)"
                             % (word_matrix.shape, vocab_size, d))
        word = np.array(word_matrix, dtype=np.float64)
    else:
        word = rng.normal((vocab_size, d), scale=0.1)
    word[PAD_ID] = 0.0
    p["emb.word"] = Tensor(word, trainable=True, name="emb.word")
    if cfg.positional == "learned":
        p["emb.pos"] = Tensor(rng.normal((cfg.max_len, d), scale=0.1),
                              trainable=True, name="emb.pos")
    else:
        p["emb.pos"] = Tensor(_sinusoidal_table(cfg.max_len, d), name="emb.pos")
    p["emb.seg"] = Tensor(rng.normal((4, d), scale=0.1), trainable=True, name="emb.seg")

    for i in range(cfg.n_blocks):
        pre = f"enc.{i}."
        for w in ("wq", "wk", "wv", "wo"):
            p[pre + w] = Tensor(_glorot(rng, d, d), trainable=True, name=pre + w)
        p[pre + "ln1.g"] = Tensor(np.ones(d), trainable=True, name=pre + "ln1.g")
        p[pre + "ln1.b"] = Tensor(np.zeros(d), trainable=True, name=pre + "ln1.b")
        p[pre + "ffn.w1"] = Tensor(_glorot(rng, d, cfg.d_f), trainable=True, name=pre + "ffn.w1")
        p[pre + "ffn.b1"] = Tensor(np.zeros(cfg.d_f), trainable=True, name=pre + "ffn.b1")
        p[pre + "ffn.w2"] = Tensor(_glorot(rng, cfg.d_f, d), trainable=True, name=pre + "ffn.w2")
        p[pre + "ffn.b2"] = Tensor(np.zeros(d), trainable=True, name=pre + "ffn.b2")
        p[pre + "ln2.g"] = Tensor(np.ones(d), trainable=True, name=pre + "ln2.g")
        p[pre + "ln2.b"] = Tensor(np.zeros(d), trainable=True, name=pre + "ln2.b")

    c = cfg.channels_per_window
    for w in cfg.windows:
        p[f"scrn.conv.w{w}"] = Tensor(_glorot(rng, w * d, c, shape=(w, d, c)),
                                      trainable=True, name=f"scrn.conv.w{w}")
        p[f"scrn.conv.b{w}"] = Tensor(np.zeros(c), trainable=True, name=f"scrn.conv.b{w}")

    for layer in range(cfg.gru_layers):
        d_in = d if layer == 0 else 2 * dg
        for direction in ("fwd", "bwd"):
            pre = f"scrn.gru.{layer}.{direction}."
            p[pre + "w"] = Tensor(_glorot(rng, d_in, 3 * dg), trainable=True, name=pre + "w")
            p[pre + "u"] = Tensor(_glorot(rng, dg, 3 * dg), trainable=True, name=pre + "u")
            p[pre + "b"] = Tensor(np.zeros(3 * dg), trainable=True, name=pre + "b")

    pair_width = 2 * k + 2 * dg
    p["scrn.g1.w"] = Tensor(_glorot(rng, pair_width, 4 * dg), trainable=True, name="scrn.g1.w")
    p["scrn.g1.b"] = Tensor(np.zeros(4 * dg), trainable=True, name="scrn.g1.b")
    p["scrn.g2.w"] = Tensor(_glorot(rng, 4 * dg, 4 * dg), trainable=True, name="scrn.g2.w")
    p["scrn.g2.b"] = Tensor(np.zeros(4 * dg), trainable=True, name="scrn.g2.b")
    p["scrn.f1.w"] = Tensor(_glorot(rng, 4 * dg, 4 * dg), trainable=True, name="scrn.f1.w")
    p["scrn.f1.b"] = Tensor(np.zeros(4 * dg), trainable=True, name="scrn.f1.b")
    p["scrn.f2.w"] = Tensor(_glorot(rng, 4 * dg, 4 * dg), trainable=True, name="scrn.f2.w")
    p["scrn.f2.b"] = Tensor(np.zeros(4 * dg), trainable=True, name="scrn.f2.b")

    p["head.w3"] = Tensor(_glorot(rng, d + 4 * dg, dg), trainable=True, name="head.w3")
    p["head.b3"] = Tensor(np.zeros(dg), trainable=True, name="head.b3")
    p["head.w4"] = Tensor(_glorot(rng, dg, 2), trainable=True, name="head.w4")
    p["head.b4"] = Tensor(np.zeros(2), trainable=True, name="head.b4")
    return p


def trainable_params(params: Dict[str, Tensor]) -> Dict[str, Tensor]:
    return {k: v for k, v in params.items() if v.trainable}


# ---------------------------------------------------------------------------
# input representation
# ---------------------------------------------------------------------------

def represent_full(params: Dict[str, Tensor], cfg: ModelConfig,
                   ids: np.ndarray, positions: np.ndarray, segment_ids: np.ndarray,
                   training: bool = False, rng: Optional[Rng] = None) -> Tensor:
    """Summed word + position + segment lookup; input shapes flatten to (M, d)."""
    ids, positions, segment_ids = (np.ravel(ids), np.ravel(positions), np.ravel(segment_ids))
    x = embedding_lookup(params["emb.word"], ids) \
        + embedding_lookup(params["emb.pos"], positions) \
        + embedding_lookup(params["emb.seg"], segment_ids)
    return dropout(x, cfg.dropout, rng, training)


def represent_scrn(params: Dict[str, Tensor], cfg: ModelConfig,
                   ids: np.ndarray, segment_ids: np.ndarray,
                   training: bool = False, rng: Optional[Rng] = None) -> Tensor:
    """Word + segment lookup only; the convolution recovers position itself."""
    ids, segment_ids = np.ravel(ids), np.ravel(segment_ids)
    x = embedding_lookup(params["emb.word"], ids) \
        + embedding_lookup(params["emb.seg"], segment_ids)
    return dropout(x, cfg.dropout, rng, training)


# ---------------------------------------------------------------------------
# word level
# ---------------------------------------------------------------------------

def scaled_attention(q: Tensor, k: Tensor, v: Tensor,
                     mask: Optional[np.ndarray] = None) -> Tensor:
    scale = 1.0 / math.sqrt(q.shape[1])
    scores = mul(matmul(q, transpose(k)), scale)
    return matmul(softmax_rows(scores, mask), v)


def multi_head(x: Tensor, wq: Tensor, wk: Tensor, wv: Tensor, wo: Tensor,
               n_heads: int, mask: Optional[np.ndarray] = None) -> Tensor:
    d = x.shape[1]
    dh = d // n_heads
    q, k, v = matmul(x, wq), matmul(x, wk), matmul(x, wv)
    heads = []
    for i in range(n_heads):
        s, e = i * dh, (i + 1) * dh
        heads.append(scaled_attention(slice_cols(q, s, e), slice_cols(k, s, e),
                                      slice_cols(v, s, e), mask))
    return matmul(concat_cols(heads), wo)


def position_wise_ffn(x: Tensor, w1: Tensor, b1: Tensor,
                      w2: Tensor, b2: Tensor) -> Tensor:
    return matmul(gelu(matmul(x, w1) + b1), w2) + b2


def transformer_block(x: Tensor, params: Dict[str, Tensor], prefix: str,
                      cfg: ModelConfig, mask: Optional[np.ndarray] = None,
                      training: bool = False, rng: Optional[Rng] = None) -> Tensor:
    """Pre-normalized block: x + Drop(Sublayer(LayerNorm(x))) twice."""
    att = multi_head(layer_norm(x, params[prefix + "ln1.g"], params[prefix + "ln1.b"]),
                     params[prefix + "wq"], params[prefix + "wk"],
                     params[prefix + "wv"], params[prefix + "wo"],
                     cfg.n_heads, mask)
    x = x + dropout(att, cfg.dropout, rng, training)
    ffn = position_wise_ffn(layer_norm(x, params[prefix + "ln2.g"], params[prefix + "ln2.b"]),
                            params[prefix + "ffn.w1"], params[prefix + "ffn.b1"],
                            params[prefix + "ffn.w2"], params[prefix + "ffn.b2"])
    return x + dropout(ffn, cfg.dropout, rng, training)


def _attention_mask(pad_mask: np.ndarray) -> np.ndarray:
    """Block-diagonal (B*n, B*n) mask: attend within-sentence, never to PAD keys."""
    b, n = pad_mask.shape
    m = np.zeros((b * n, b * n), dtype=bool)
    for i in range(b):
        m[i * n:(i + 1) * n, i * n:(i + 1) * n] = pad_mask[i]
    return m


def encode_word_level(params: Dict[str, Tensor], cfg: ModelConfig, x: Tensor,
                      pad_mask: np.ndarray, training: bool = False,
                      rng: Optional[Rng] = None) -> Tensor:
    """Run the block stack over a flattened batch, then mask-aware pooling.

    x is (B*n, d) with sentence b in rows [b*n, (b+1)*n); returns (B, d).
    """
    b, n = pad_mask.shape
    mask = _attention_mask(pad_mask)
    for i in range(cfg.n_blocks):
        x = transformer_block(x, params, f"enc.{i}.", cfg, mask, training, rng)
    if cfg.pooling == "mean":
        pool = np.zeros((b, b * n))
        for i in range(b):
            row = pad_mask[i].astype(np.float64)
            pool[i, i * n:(i + 1) * n] = row / row.sum()
        return matmul(Tensor(pool), x)
    rows = []
    for i in range(b):
        length = int(pad_mask[i].sum())
        rows.append(max_over_time(slice_rows(x, i * n, i * n + length)))
    return concat_rows(rows)


# ---------------------------------------------------------------------------
# segment level (SCRN)
# ---------------------------------------------------------------------------

def _pad_segment(x_seg: Optional[Tensor], min_rows: int, d: int) -> Tensor:
    rows = 0 if x_seg is None else x_seg.shape[0]
    if rows >= min_rows:
        return x_seg
    zeros = Tensor(np.zeros((min_rows - rows, d)))
    if x_seg is None:
        return zeros
    return concat_rows([x_seg, zeros])


def _one_object(x_seg: Tensor, params: Dict[str, Tensor], cfg: ModelConfig) -> Tensor:
    pooled = []
    for w in cfg.windows:
        fmap = conv1d_same(x_seg, params[f"scrn.conv.w{w}"], params[f"scrn.conv.b{w}"])
        pooled.append(max_over_time(fmap))
    return concat_cols(pooled)


def segment_objects(params: Dict[str, Tensor], cfg: ModelConfig,
                    x_bl: Optional[Tensor], x_l: Optional[Tensor],
                    x_al: Optional[Tensor]) -> Tuple[Tensor, Tensor, Tensor]:
    """Shared multi-window convolution + max pooling per segment -> three (1, k) objects.

    Segments shorter than the largest window (including empty ones) are
    padded with zero rows so the convolution stays total.
    """
    min_rows = max(cfg.windows)
    segs = [_pad_segment(s, min_rows, cfg.d) for s in (x_bl, x_l, x_al)]
    return tuple(_one_object(s, params, cfg) for s in segs)


def sentence_context(params: Dict[str, Tensor], cfg: ModelConfig, x_sent: Tensor,
                     training: bool = False, rng: Optional[Rng] = None) -> Tensor:
    """Stacked bi-GRU over the sentence; h_g = last layer's two endpoint states."""
    t_len = x_sent.shape[0]
    inp = x_sent
    h_g = None
    for layer in range(cfg.gru_layers):
        fwd = gru_layer(inp, params[f"scrn.gru.{layer}.fwd.w"],
                        params[f"scrn.gru.{layer}.fwd.u"],
                        params[f"scrn.gru.{layer}.fwd.b"], reverse=False)
        bwd = gru_layer(inp, params[f"scrn.gru.{layer}.bwd.w"],
                        params[f"scrn.gru.{layer}.bwd.u"],
                        params[f"scrn.gru.{layer}.bwd.b"], reverse=True)
        h_g = concat_cols([slice_rows(fwd, t_len - 1, t_len),
                           slice_rows(bwd, t_len - 1, t_len)])
        if layer < cfg.gru_layers - 1:
            bwd_aligned = gather_rows(bwd, np.arange(t_len - 1, -1, -1))
            inp = dropout(concat_cols([fwd, bwd_aligned]), cfg.dropout, rng, training)
    return h_g


def build_pairs(objects: Tuple[Tensor, Tensor, Tensor], h_g: Tensor) -> Tensor:
    """Fixed-order directed pairs [BL||L, L||AL, BL||AL, AL||BL], each with h_g."""
    h_bl, h_l, h_al = objects
    rows = [concat_cols([h_bl, h_l, h_g]),
            concat_cols([h_l, h_al, h_g]),
            concat_cols([h_bl, h_al, h_g]),
            concat_cols([h_al, h_bl, h_g])]
    return concat_rows(rows)


def relation_reason(h_p: Tensor, params: Dict[str, Tensor], cfg: ModelConfig,
                    training: bool = False, rng: Optional[Rng] = None) -> Tensor:
    """h_s = f(sum over pair rows of g(row)); order-free in the rows."""
    g = dropout(relu(matmul(h_p, params["scrn.g1.w"]) + params["scrn.g1.b"]),
                cfg.dropout, rng, training)
    g = matmul(g, params["scrn.g2.w"]) + params["scrn.g2.b"]
    summed = matmul(Tensor(np.ones((1, h_p.shape[0]))), g)
    f = dropout(relu(matmul(summed, params["scrn.f1.w"]) + params["scrn.f1.b"]),
                cfg.dropout, rng, training)
    return matmul(f, params["scrn.f2.w"]) + params["scrn.f2.b"]


# ---------------------------------------------------------------------------
# head and loss
# ---------------------------------------------------------------------------

def classify(h_w: Tensor, h_s: Tensor, params: Dict[str, Tensor], cfg: ModelConfig,
             training: bool = False, rng: Optional[Rng] = None) -> Tensor:
    """softmax(ReLU(h_u W3 + b3) W4 + b4) over the fused representation."""
    h_u = concat_cols([h_w, h_s])
    hidden = dropout(relu(matmul(h_u, params["head.w3"]) + params["head.b3"]),
                     cfg.dropout, rng, training)
    logits = matmul(hidden, params["head.w4"]) + params["head.b4"]
    return softmax_rows(logits)


def focal_loss(p_causal: Tensor, labels: np.ndarray,
               alpha: float, beta: float) -> Tensor:
    """Mean focal loss over a batch; probabilities are clamped away from {0, 1}.

    y=1 terms weigh -alpha (1-p)^beta log p; y=0 terms
    -(1-alpha) p^beta log(1-p).
    """
    y = Tensor(np.asarray(labels, dtype=np.float64).reshape(-1, 1))
    p = clamp(p_causal, PROB_CLAMP, 1.0 - PROB_CLAMP)
    one_minus_p = sub(1.0, p)
    pos = mul(mul(sub(0.0, alpha), one_minus_p ** beta), log(p))
    negt = mul(mul(-(1.0 - alpha), p ** beta), log(one_minus_p))
    per_example = mul(y, pos) + mul(sub(1.0, y), negt)
    return tmean(per_example)


def predict_label(probabilities) -> int:
    """1 iff the causal probability reaches 0.5 (ties predict causal)."""
    p = np.asarray(probabilities, dtype=np.float64).reshape(-1)
    return int(p[1] >= 0.5)


# ---------------------------------------------------------------------------
# full forward pass
# ---------------------------------------------------------------------------

def _segment_ranges(segment_row: np.ndarray) -> Dict[int, Tuple[int, int]]:
    ranges = {}
    for seg in (SEG_BL, SEG_L, SEG_AL):
        idx = np.flatnonzero(segment_row == seg)
        ranges[seg] = (int(idx[0]), int(idx[-1]) + 1) if idx.size else (0, 0)
    return ranges


def sentence_context_batched(params: Dict[str, Tensor], cfg: ModelConfig,
                             x: Tensor, pad_mask: np.ndarray,
                             training: bool = False,
                             rng: Optional[Rng] = None) -> Tensor:
    """Batched form of :func:`sentence_context`: (B*n, d) in, (B, 2*d_g) out."""
    b, n = pad_mask.shape
    lengths = pad_mask.sum(axis=1).astype(np.intp)
    final_idx = np.arange(b) * n + (n - 1)
    # maps original position t to the backward traversal row holding it
    align = np.tile(np.arange(n), (b, 1))
    for i in range(b):
        align[i, :lengths[i]] = np.arange(lengths[i] - 1, -1, -1)
    align = (align + (np.arange(b) * n)[:, None]).reshape(-1)
    inp = x
    h_g = None
    for layer in range(cfg.gru_layers):
        pre = f"scrn.gru.{layer}."
        fwd = gru_layer_batched(inp, params[pre + "fwd.w"], params[pre + "fwd.u"],
                                params[pre + "fwd.b"], lengths, n, reverse=False)
        bwd = gru_layer_batched(inp, params[pre + "bwd.w"], params[pre + "bwd.u"],
                                params[pre + "bwd.b"], lengths, n, reverse=True)
        h_g = concat_cols([gather_rows(fwd, final_idx), gather_rows(bwd, final_idx)])
        if layer < cfg.gru_layers - 1:
            inp = dropout(concat_cols([fwd, gather_rows(bwd, align)]),
                          cfg.dropout, rng, training)
    return h_g


def _batched_objects(params: Dict[str, Tensor], cfg: ModelConfig, x: Tensor,
                     batch: EncodedBatch) -> Tuple[Tensor, Tensor, Tensor]:
    """All segment objects at once: (B, k) tensors for BL, L and AL.

    Segments are laid out end to end with zero-row gaps wide enough that
    one same-length convolution per window equals the per-segment result;
    short segments are zero-padded up to the largest window.
    """
    b, n = batch.ids.shape
    min_rows = max(cfg.windows)
    gap = min_rows - 1
    zero_idx = b * n  # row index of the appended all-zero row
    x_aug = concat_rows([x, Tensor(np.zeros((1, cfg.d)))])
    index: List[int] = []
    ranges: List[Tuple[int, int]] = []
    for i in range(b):
        base = i * n
        seg_ranges = _segment_ranges(batch.segment_ids[i])
        for seg in (SEG_BL, SEG_L, SEG_AL):
            s, e = seg_ranges[seg]
            start = len(index)
            index.extend(range(base + s, base + e))
            index.extend([zero_idx] * max(0, min_rows - (e - s)))
            ranges.append((start, len(index)))
            index.extend([zero_idx] * gap)
    stacked = gather_rows(x_aug, np.asarray(index))
    pooled = []
    for w in cfg.windows:
        fmap = conv1d_same(stacked, params[f"scrn.conv.w{w}"], params[f"scrn.conv.b{w}"])
        pooled.append(block_max_rows(fmap, ranges))
    objects = concat_cols(pooled)  # (3B, k), rows ordered (BL, L, AL) per sentence
    h_bl = gather_rows(objects, np.arange(0, 3 * b, 3))
    h_l = gather_rows(objects, np.arange(1, 3 * b, 3))
    h_al = gather_rows(objects, np.arange(2, 3 * b, 3))
    return h_bl, h_l, h_al


def forward_batch(params: Dict[str, Tensor], cfg: ModelConfig, batch: EncodedBatch,
                  training: bool = False, rng: Optional[Rng] = None) -> Tensor:
    """Probabilities (B, 2) for an encoded batch."""
    b, n = batch.ids.shape
    x_word = represent_full(params, cfg, batch.ids, batch.positions,
                            batch.segment_ids, training, rng)
    h_w = encode_word_level(params, cfg, x_word, batch.pad_mask, training, rng)

    x_scrn = represent_scrn(params, cfg, batch.ids, batch.segment_ids, training, rng)
    h_bl, h_l, h_al = _batched_objects(params, cfg, x_scrn, batch)
    h_g = sentence_context_batched(params, cfg, x_scrn, batch.pad_mask, training, rng)
    # pair blocks stacked as [all BL||L; all L||AL; all BL||AL; all AL||BL]
    h_p = concat_rows([concat_cols([h_bl, h_l, h_g]),
                       concat_cols([h_l, h_al, h_g]),
                       concat_cols([h_bl, h_al, h_g]),
                       concat_cols([h_al, h_bl, h_g])])
    g = dropout(relu(matmul(h_p, params["scrn.g1.w"]) + params["scrn.g1.b"]),
                cfg.dropout, rng, training)
    g = matmul(g, params["scrn.g2.w"]) + params["scrn.g2.b"]
    summing = np.zeros((b, 4 * b))
    for j in range(4):
        summing[np.arange(b), np.arange(b) + j * b] = 1.0
    summed = matmul(Tensor(summing), g)
    f = dropout(relu(matmul(summed, params["scrn.f1.w"]) + params["scrn.f1.b"]),
                cfg.dropout, rng, training)
    h_s = matmul(f, params["scrn.f2.w"]) + params["scrn.f2.b"]
    return classify(h_w, h_s, params, cfg, training, rng)


def batch_objective(params: Dict[str, Tensor], cfg: ModelConfig, batch: EncodedBatch,
                    training: bool = False, rng: Optional[Rng] = None
                    ) -> Tuple[Tensor, Tensor]:
    """(total objective, probabilities): mean focal loss plus L2 over all
    trainable parameters."""
    probs = forward_batch(params, cfg, batch, training, rng)
    p_causal = slice_cols(probs, 1, 2)
    loss = focal_loss(p_causal, batch.labels, cfg.alpha, cfg.beta)
    if cfg.l2 > 0:
        loss = add_l2_penalty(loss, trainable_params(params).values(), cfg.l2)
    return loss, probs
