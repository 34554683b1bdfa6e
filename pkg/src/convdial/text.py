"""Corpus preprocessing, vocabularies, and sentence embeddings.

Preprocessing drops apostrophes, lowercases, strips remaining punctuation,
splits on whitespace, and rewrites digit tokens as words.  Vocabularies
reserve id 0 for PAD and id 1 for UNK and assign the rest by descending
frequency with alphabetical tie-breaks, so the same corpus always yields
the same id map.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field

import numpy as np

PAD_ID = 0
UNK_ID = 1
PAD_TOKEN = "<pad>"
UNK_TOKEN = "<unk>"

_ONES = ["zero", "one", "two", "three", "four", "five", "six", "seven", "eight", "nine",
         "ten", "eleven", "twelve", "thirteen", "fourteen", "fifteen", "sixteen",
         "seventeen", "eighteen", "nineteen"]
_TENS = ["", "", "twenty", "thirty", "forty", "fifty", "sixty", "seventy", "eighty", "ninety"]

_PUNCT_RE = re.compile(r"[^a-z0-9\s]")
_WS_RE = re.compile(r"\s+")


def number_to_words(n: int) -> list[str]:
    """Worded form of 0..100; larger numbers fall back to digit-by-digit."""
    if 0 <= n < 20:
        return [_ONES[n]]
    if 20 <= n < 100:
        tens, ones = divmod(n, 10)
        return [_TENS[tens]] if ones == 0 else [_TENS[tens], _ONES[ones]]
    if n == 100:
        return ["one", "hundred"]
    return [_ONES[int(d)] for d in str(n)]


def preprocess_sentence(raw: str) -> list[str]:
    """Normalise raw text to the token list fed to the vocabulary."""
    text = raw.lower().replace("'", "").replace("’", "")
    text = _PUNCT_RE.sub(" ", text)
    tokens = []
    for tok in _WS_RE.split(text.strip()):
        if not tok:
            continue
        if tok.isdigit():
            tokens.extend(number_to_words(int(tok)))
        else:
            tokens.append(tok)
    return tokens


@dataclass
class Vocabulary:
    """Bidirectional token/id map with reserved PAD and UNK entries."""

    id_to_token: list[str]
    token_to_id: dict[str, int] = field(init=False)

    def __post_init__(self):
        self.token_to_id = {tok: i for i, tok in enumerate(self.id_to_token)}
        if len(self.token_to_id) != len(self.id_to_token):
            raise ValueError("duplicate tokens in vocabulary")
        if self.id_to_token[:2] != [PAD_TOKEN, UNK_TOKEN]:
            raise ValueError("vocabulary must reserve PAD at id 0 and UNK at id 1")

    def __len__(self):
        return len(self.id_to_token)

    @property
    def size(self):
        return len(self.id_to_token)

    def id_of(self, token: str) -> int:
        return self.token_to_id.get(token, UNK_ID)

    def token_of(self, token_id: int) -> str:
        return self.id_to_token[token_id]

    def encode(self, tokens: list[str], length: int) -> np.ndarray:
        """Pad or truncate to exactly ``length`` ids."""
        ids = [self.id_of(t) for t in tokens[:length]]
        ids.extend([PAD_ID] * (length - len(ids)))
        return np.asarray(ids, dtype=np.int64)

    def decode(self, ids, strip_pad: bool = True) -> list[str]:
        toks = [self.id_to_token[int(i)] for i in np.asarray(ids).reshape(-1)]
        if strip_pad:
            toks = [t for t in toks if t != PAD_TOKEN]
        return toks


def build_vocabulary(corpus_tokens, min_freq: int = 1) -> Vocabulary:
    """Frequency-filtered vocabulary over an iterable of token lists.

    Tokens with frequency below ``min_freq`` map to UNK.  Ids are assigned
    by descending frequency, alphabetical within ties.
    """
    if min_freq < 1:
        raise ValueError("min_freq must be >= 1")
    counts: dict[str, int] = {}
    any_seen = False
    for tokens in corpus_tokens:
        any_seen = True
        for tok in tokens:
            counts[tok] = counts.get(tok, 0) + 1
    if not any_seen:
        raise ValueError("cannot build a vocabulary from an empty corpus")
    kept = sorted((tok for tok, c in counts.items() if c >= min_freq),
                  key=lambda tok: (-counts[tok], tok))
    return Vocabulary([PAD_TOKEN, UNK_TOKEN] + kept)


@dataclass(frozen=True)
class TokenSequence:
    """Fixed-length id sequence (model-facing form of a sentence)."""

    ids: np.ndarray

    @classmethod
    def from_tokens(cls, tokens: list[str], vocab: Vocabulary, length: int) -> "TokenSequence":
        return cls(vocab.encode(tokens, length))

    @classmethod
    def padding(cls, length: int) -> "TokenSequence":
        return cls(np.zeros(length, dtype=np.int64))

    def __post_init__(self):
        object.__setattr__(self, "ids", np.asarray(self.ids, dtype=np.int64))

    def __len__(self):
        return len(self.ids)

    def tokens(self, vocab: Vocabulary, strip_pad: bool = True) -> list[str]:
        return vocab.decode(self.ids, strip_pad=strip_pad)

    def is_all_pad(self) -> bool:
        return bool((self.ids == PAD_ID).all())


class FixedEmbeddingTable:
    """Read-only token -> vector table (the non-learned embedding provider).

    Unknown tokens fall back to the table's mean vector.  File format:
    a header line ``V D`` followed by one line per token, the token and
    then D decimal floats, whitespace separated.
    """

    def __init__(self, vectors: dict[str, np.ndarray]):
        if not vectors:
            raise ValueError("fixed embedding table is empty")
        dims = {v.shape for v in vectors.values()}
        if len(dims) != 1:
            raise ValueError(f"inconsistent embedding dimensions: {dims}")
        self._vectors = {t: np.asarray(v, dtype=np.float64) for t, v in vectors.items()}
        self.dim = next(iter(self._vectors.values())).shape[0]
        self._fallback = np.mean(list(self._vectors.values()), axis=0)

    def __contains__(self, token):
        return token in self._vectors

    def __len__(self):
        return len(self._vectors)

    def vector(self, token: str) -> np.ndarray:
        return self._vectors.get(token, self._fallback)

    @classmethod
    def load(cls, path) -> "FixedEmbeddingTable":
        with open(path, "r", encoding="utf-8") as fh:
            header = fh.readline().split()
            if len(header) != 2:
                raise ValueError(f"{path}: expected header 'V D'")
            count, dim = int(header[0]), int(header[1])
            vectors = {}
            for lineno, line in enumerate(fh, start=2):
                parts = line.split()
                if not parts:
                    continue
                if len(parts) != dim + 1:
                    raise ValueError(f"{path}:{lineno}: expected token + {dim} floats")
                vectors[parts[0]] = np.asarray([float(x) for x in parts[1:]])
        if len(vectors) != count:
            raise ValueError(f"{path}: header count {count} != {len(vectors)} rows")
        return cls(vectors)

    def save(self, path):
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(f"{len(self._vectors)} {self.dim}\n")
            for token in sorted(self._vectors):
                vals = " ".join(repr(float(x)) for x in self._vectors[token])
                fh.write(f"{token} {vals}\n")


def sentence_embedding_avg(tokens, table: FixedEmbeddingTable) -> np.ndarray:
    """Mean fixed embedding of a sentence, skipping PAD and UNK markers.

    ``tokens`` may be a list of token strings or a TokenSequence paired
    with a vocabulary via :meth:`TokenSequence.tokens`.  A sentence with
    nothing left after filtering maps to the zero vector.
    """
    kept = [t for t in tokens if t not in (PAD_TOKEN, UNK_TOKEN)]
    if not kept:
        return np.zeros(table.dim)
    return np.mean([table.vector(t) for t in kept], axis=0)


def cosine_similarity(u: np.ndarray, v: np.ndarray) -> float:
    """u.v / (|u||v|); zero when either vector has zero norm."""
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    if u.shape != v.shape:
        raise ValueError(f"dimension mismatch: {u.shape} vs {v.shape}")
    nu = np.linalg.norm(u)
    nv = np.linalg.norm(v)
    if nu == 0.0 or nv == 0.0:
        return 0.0
    return float(np.dot(u, v) / (nu * nv))


def random_embedding_table(tokens, dim: int, seed: int) -> FixedEmbeddingTable:
    """Deterministic unit-norm random table covering ``tokens``.

    Stands in for a pretrained embedding provider on synthetic corpora;
    every distinct token gets an independent direction.
    """
    rng = np.random.default_rng(seed)
    vectors = {}
    for token in sorted(set(tokens)):
        v = rng.standard_normal(dim)
        vectors[token] = v / np.linalg.norm(v)
    return FixedEmbeddingTable(vectors)
