"""Text pipeline: tokenization, AltLex matching, segmentation, vocabulary,
word2vec-text embeddings and batch encoding.

Wire formats handled here:
  * dataset: JSON Lines, one object per line:
      {"sentence": str, "label": 0|1, "altlex": [start, end]?}
  * lexicon: plain text, one lowercase AltLex phrase per line
  * embeddings: word2vec text format ("count dim" header, then
    "token v1 .. v_dim" rows)
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass, field
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np

__all__ = [
    "DataError",
    "PAD_ID",
    "OOV_ID",
    "PAD_TOKEN",
    "OOV_TOKEN",
    "SEG_BL",
    "SEG_L",
    "SEG_AL",
    "SEG_PAD",
    "tokenize",
    "AltLexLexicon",
    "match_altlex",
    "SegmentedExample",
    "segment",
    "prepare_example",
    "Vocabulary",
    "build_vocab",
    "load_word2vec_text",
    "save_word2vec_text",
    "build_embedding_matrix",
    "EncodedBatch",
    "encode_batch",
    "load_jsonl_dataset",
    "load_lexicon",
]

PAD_ID = 0
OOV_ID = 1
PAD_TOKEN = "<pad>"
OOV_TOKEN = "<oov>"

SEG_BL = 0
SEG_L = 1
SEG_AL = 2
SEG_PAD = 3


class DataError(Exception):
    """Malformed input data; carries a line number when one applies."""

    def __init__(self, message: str, line: Optional[int] = None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


_TOKEN_RE = re.compile(r"\w+|[^\w\s]", re.UNICODE)


def tokenize(text: str) -> List[str]:
    """Lowercase, split on whitespace, and break punctuation into its own tokens."""
    return _TOKEN_RE.findall(text.lower())


class AltLexLexicon:
    """Ordered set of lowercase marker phrases (1..6 tokens each)."""

    def __init__(self, phrases: Iterable[str]):
        self.entries: List[Tuple[str, ...]] = []
        seen = set()
        for phrase in phrases:
            toks = tuple(tokenize(phrase))
            if not toks:
                raise DataError("empty lexicon entry")
            if len(toks) > 6:
                raise DataError(f"lexicon entry longer than 6 tokens: {phrase!r}")
            if toks in seen:
                continue
            seen.add(toks)
            self.entries.append(toks)
        self._by_first: Dict[str, List[Tuple[str, ...]]] = {}
        for toks in self.entries:
            self._by_first.setdefault(toks[0], []).append(toks)

    def __len__(self):
        return len(self.entries)


def match_altlex(tokens: Sequence[str], lexicon: AltLexLexicon) -> Optional[Tuple[int, int]]:
    """Leftmost match; the longest wins among matches sharing a start."""
    if len(lexicon) == 0:
        raise ValueError("empty lexicon")
    n = len(tokens)
    for start in range(n):
        candidates = lexicon._by_first.get(tokens[start])
        if not candidates:
            continue
        best = None
        for phrase in candidates:
            end = start + len(phrase)
            if end <= n and tuple(tokens[start:end]) == phrase:
                if best is None or end > best:
                    best = end
        if best is not None:
            return (start, best)
    return None


@dataclass
class SegmentedExample:
    """Tokenized sentence split into BL / L / AL half-open index ranges."""

    tokens: List[str]
    bl: Tuple[int, int]
    l: Tuple[int, int]
    al: Tuple[int, int]
    label: Optional[int] = None
    no_altlex: bool = False


def segment(tokens: Sequence[str], altlex_range: Tuple[int, int],
            label: Optional[int] = None) -> SegmentedExample:
    start, end = altlex_range
    n = len(tokens)
    if not (0 <= start < end <= n):
        raise ValueError(f"altlex range {altlex_range!r} out of bounds for {n} tokens")
    return SegmentedExample(tokens=list(tokens), bl=(0, start), l=(start, end),
                            al=(end, n), label=label)


def prepare_example(sentence: str, lexicon: AltLexLexicon,
                    label: Optional[int] = None,
                    altlex_span: Optional[Tuple[int, int]] = None) -> SegmentedExample:
    """Tokenize and segment one sentence.

    Without any lexicon match the example still runs: L becomes a single
    synthetic PAD token appended after the sentence (BL = whole sentence,
    AL empty) and the example is flagged.
    """
    tokens = tokenize(sentence)
    span = altlex_span if altlex_span is not None else match_altlex(tokens, lexicon)
    if span is None:
        n = len(tokens)
        return SegmentedExample(tokens=tokens + [PAD_TOKEN], bl=(0, n),
                                l=(n, n + 1), al=(n + 1, n + 1),
                                label=label, no_altlex=True)
    return segment(tokens, span, label=label)


class Vocabulary:
    """token -> id with reserved PAD=0 and OOV=1 rows."""

    def __init__(self, tokens: Iterable[str] = ()):
        self.token_to_id: Dict[str, int] = {PAD_TOKEN: PAD_ID, OOV_TOKEN: OOV_ID}
        for tok in tokens:
            if tok not in self.token_to_id:
                self.token_to_id[tok] = len(self.token_to_id)

    def __len__(self):
        return len(self.token_to_id)

    def lookup(self, token: str) -> int:
        return self.token_to_id.get(token, OOV_ID)

    def to_dict(self) -> Dict[str, int]:
        return dict(self.token_to_id)

    @classmethod
    def from_dict(cls, mapping: Dict[str, int]) -> "Vocabulary":
        if mapping.get(PAD_TOKEN) != PAD_ID or mapping.get(OOV_TOKEN) != OOV_ID:
            raise DataError("vocabulary is missing reserved PAD/OOV ids")
        vocab = cls()
        for tok, idx in sorted(mapping.items(), key=lambda kv: kv[1]):
            if tok in (PAD_TOKEN, OOV_TOKEN):
                continue
            if idx != len(vocab.token_to_id):
                raise DataError("vocabulary ids are not contiguous")
            vocab.token_to_id[tok] = idx
        return vocab


def build_vocab(corpus: Iterable[Sequence[str]], embedding_vocab: Iterable[str]) -> Vocabulary:
    """Corpus tokens that carry a pretrained vector get their own id; all
    other tokens share the OOV id (one stable trainable embedding)."""
    known = set(embedding_vocab)
    kept = []
    seen = set()
    for tokens in corpus:
        for tok in tokens:
            if tok in known and tok not in seen:
                seen.add(tok)
                kept.append(tok)
    return Vocabulary(kept)


def load_word2vec_text(path: str) -> Tuple[List[str], np.ndarray]:
    """Parse word2vec text format; every defect is reported with its line."""
    with open(path, "r", encoding="utf-8") as fh:
        header = fh.readline()
        parts = header.split()
        if len(parts) != 2:
            raise DataError("expected header 'count dim'", line=1)
        try:
            count, dim = int(parts[0]), int(parts[1])
        except ValueError:
            raise DataError("non-integer header fields", line=1)
        tokens: List[str] = []
        matrix = np.empty((count, dim))
        seen = set()
        for i in range(count):
            row = fh.readline()
            lineno = i + 2
            if not row:
                raise DataError(f"expected {count} vector rows, file ended early", line=lineno)
            fields = row.split()
            if len(fields) != dim + 1:
                raise DataError(f"expected {dim + 1} fields, got {len(fields)}", line=lineno)
            tok = fields[0]
            if tok in seen:
                raise DataError(f"duplicate token {tok!r}", line=lineno)
            seen.add(tok)
            try:
                matrix[i] = [float(v) for v in fields[1:]]
            except ValueError:
                raise DataError("non-numeric vector component", line=lineno)
            tokens.append(tok)
    return tokens, matrix


def save_word2vec_text(path: str, tokens: Sequence[str], matrix: np.ndarray) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(f"{len(tokens)} {matrix.shape[1]}\n")
        for tok, row in zip(tokens, matrix):
            fh.write(tok + " " + " ".join(repr(float(v)) for v in row) + "\n")


def build_embedding_matrix(vocab: Vocabulary, emb_tokens: Sequence[str],
                           emb_matrix: np.ndarray, rng) -> np.ndarray:
    """|V| x d table: PAD row zero, OOV row random, known rows copied."""
    d = emb_matrix.shape[1]
    by_token = {tok: i for i, tok in enumerate(emb_tokens)}
    table = np.zeros((len(vocab), d))
    table[OOV_ID] = rng.normal((d,), scale=0.1)
    for tok, idx in vocab.token_to_id.items():
        if idx in (PAD_ID, OOV_ID):
            continue
        table[idx] = emb_matrix[by_token[tok]]
    return table


@dataclass
class EncodedBatch:
    ids: np.ndarray          # (B, n) int
    positions: np.ndarray    # (B, n) int
    segment_ids: np.ndarray  # (B, n) int, PAD positions carry SEG_PAD
    pad_mask: np.ndarray     # (B, n) bool, True on real tokens
    labels: np.ndarray       # (B,) int, -1 when absent
    no_altlex: np.ndarray = field(default=None)  # (B,) bool


def _truncate(ex: SegmentedExample, max_len: int) -> SegmentedExample:
    n = len(ex.tokens)
    if n <= max_len:
        return ex
    l_len = ex.l[1] - ex.l[0]
    if l_len > max_len:
        raise DataError(f"AltLex segment of {l_len} tokens exceeds max_len {max_len}")
    # Drop AL tokens from the right first, then BL tokens from the left
    # (keeping the context nearest the marker); L is never cut.
    excess = n - max_len
    al_len = ex.al[1] - ex.al[0]
    drop_al = min(excess, al_len)
    drop_bl = excess - drop_al
    tokens = ex.tokens[drop_bl:n - drop_al]
    bl = (0, ex.bl[1] - drop_bl)
    l = (ex.l[0] - drop_bl, ex.l[1] - drop_bl)
    al = (l[1], len(tokens))
    return SegmentedExample(tokens=tokens, bl=bl, l=l, al=al,
                            label=ex.label, no_altlex=ex.no_altlex)


def encode_batch(examples: Sequence[SegmentedExample], vocab: Vocabulary,
                 max_len: int, pad_to: Optional[int] = None) -> EncodedBatch:
    """Pure function: token ids, positions, segment ids, mask and labels.

    Sequences are padded to the longest example in the batch (or
    ``pad_to``) and truncated at ``max_len`` without ever cutting L.
    """
    if not examples:
        raise ValueError("encode_batch needs a nonempty batch")
    clipped = [_truncate(ex, max_len) for ex in examples]
    n = max(len(ex.tokens) for ex in clipped)
    if pad_to is not None:
        n = max(n, pad_to)
    b = len(clipped)
    ids = np.full((b, n), PAD_ID, dtype=np.intp)
    positions = np.zeros((b, n), dtype=np.intp)
    segment_ids = np.full((b, n), SEG_PAD, dtype=np.intp)
    pad_mask = np.zeros((b, n), dtype=bool)
    labels = np.full(b, -1, dtype=np.intp)
    no_altlex = np.zeros(b, dtype=bool)
    for i, ex in enumerate(clipped):
        t = len(ex.tokens)
        ids[i, :t] = [vocab.lookup(tok) for tok in ex.tokens]
        positions[i, :t] = np.arange(t)
        segment_ids[i, ex.bl[0]:ex.bl[1]] = SEG_BL
        segment_ids[i, ex.l[0]:ex.l[1]] = SEG_L
        segment_ids[i, ex.al[0]:ex.al[1]] = SEG_AL
        pad_mask[i, :t] = True
        if ex.label is not None:
            labels[i] = ex.label
        no_altlex[i] = ex.no_altlex
    return EncodedBatch(ids=ids, positions=positions, segment_ids=segment_ids,
                        pad_mask=pad_mask, labels=labels, no_altlex=no_altlex)


def load_jsonl_dataset(path: str, lexicon: AltLexLexicon,
                       require_label: bool = True) -> List[SegmentedExample]:
    examples = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise DataError(f"bad JSON ({exc.msg})", line=lineno)
            if "sentence" not in obj:
                raise DataError("missing 'sentence' field", line=lineno)
            label = obj.get("label")
            if require_label:
                if label not in (0, 1):
                    raise DataError("missing or non-binary 'label'", line=lineno)
            elif label is not None and label not in (0, 1):
                raise DataError("non-binary 'label'", line=lineno)
            span = obj.get("altlex")
            if span is not None:
                if (not isinstance(span, list)) or len(span) != 2:
                    raise DataError("'altlex' must be [start, end]", line=lineno)
                span = (int(span[0]), int(span[1]))
            try:
                examples.append(prepare_example(obj["sentence"], lexicon,
                                                label=label, altlex_span=span))
            except ValueError as exc:
                raise DataError(str(exc), line=lineno)
    return examples


def load_lexicon(path: str) -> AltLexLexicon:
    with open(path, "r", encoding="utf-8") as fh:
        phrases = [line.strip() for line in fh if line.strip()]
    if not phrases:
        raise DataError("lexicon file is empty")
    return AltLexLexicon(phrases)
