"""Loading, saving and normalizing monolingual embedding spaces and dictionaries.

Text embeddings use the fastText ``.vec`` layout: a ``"count dim"`` header
followed by one ``token v1 ... vdim`` line per word, most frequent first.
"""
from __future__ import annotations

import hashlib
import logging
import struct
from dataclasses import dataclass
from functools import cached_property
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

logger = logging.getLogger(__name__)

CACHE_MAGIC = b"XLEMB"
CACHE_VERSION = 1

NORMALIZE_MODES = ("unit", "center_then_unit", "none")


class EmbeddingFormatError(ValueError):
    """Malformed embedding or dictionary file."""

    def __init__(self, path, lineno, message):
        self.path = str(path)
        self.lineno = lineno
        super().__init__(f"{path}:{lineno}: {message}")


@dataclass(frozen=True, eq=False)
class EmbeddingSpace:
    """Frequency-ordered vocabulary with one vector per word.

    Treat instances as immutable: the vector array is marked read-only and
    every transformation returns a new space.
    """

    words: tuple[str, ...]
    vectors: np.ndarray
    lang: str = ""

    def __post_init__(self):
        words = tuple(self.words)
        object.__setattr__(self, "words", words)
        vectors = np.asarray(self.vectors)
        if vectors.ndim != 2:
            raise ValueError(f"vectors must be 2-D, got shape {vectors.shape}")
        if vectors.shape[0] != len(words):
            raise ValueError(
                f"{len(words)} words but {vectors.shape[0]} vector rows")
        if len(set(words)) != len(words):
            raise ValueError("duplicate tokens in vocabulary")
        if not np.all(np.isfinite(vectors)):
            bad = int(np.nonzero(~np.isfinite(vectors).all(axis=1))[0][0])
            raise ValueError(f"non-finite component in vector of {words[bad]!r}")
        if vectors.flags.writeable:
            vectors = vectors.copy()
            vectors.flags.writeable = False
        object.__setattr__(self, "vectors", vectors)

    def __len__(self):
        return len(self.words)

    @property
    def dim(self) -> int:
        return self.vectors.shape[1]

    @cached_property
    def index(self) -> dict[str, int]:
        return {w: i for i, w in enumerate(self.words)}

    def lookup(self, word: str) -> int:
        return self.index[word]

    def __contains__(self, word) -> bool:
        return word in self.index

    def vector(self, word: str) -> np.ndarray:
        return self.vectors[self.index[word]]

    def head(self, n: int) -> "EmbeddingSpace":
        """The ``n`` most frequent words."""
        return EmbeddingSpace(self.words[:n], self.vectors[:n], self.lang)

    @cached_property
    def fingerprint(self) -> str:
        h = hashlib.sha1()
        h.update(str(self.vectors.dtype).encode())
        h.update(np.ascontiguousarray(self.vectors).tobytes())
        h.update("\n".join(self.words).encode("utf-8"))
        return h.hexdigest()

    def equals(self, other: "EmbeddingSpace") -> bool:
        return (self.words == other.words and self.lang == other.lang
                and self.vectors.dtype == other.vectors.dtype
                and np.array_equal(self.vectors, other.vectors))


@dataclass(frozen=True, eq=False)
class Dictionary:
    """Ordered (source index, target index) pairs into two spaces.

    ``n_dropped`` counts input pairs discarded because a word was out of
    vocabulary; ``oov_sources`` counts distinct source words that lost every
    one of their pairs that way.
    """

    pairs: np.ndarray
    src_lang: str = ""
    tgt_lang: str = ""
    n_dropped: int = 0
    oov_sources: int = 0
    n_duplicates: int = 0

    def __post_init__(self):
        pairs = np.asarray(self.pairs, dtype=np.int64).reshape(-1, 2)
        pairs.flags.writeable = False
        object.__setattr__(self, "pairs", pairs)

    def __len__(self):
        return len(self.pairs)

    @property
    def src(self) -> np.ndarray:
        return self.pairs[:, 0]

    @property
    def tgt(self) -> np.ndarray:
        return self.pairs[:, 1]

    @classmethod
    def from_pairs(cls, pairs: Iterable[tuple[int, int]], src_lang="", tgt_lang="",
                   **kw) -> "Dictionary":
        """Build from index pairs, dropping exact duplicates but keeping order."""
        seen = set()
        unique = []
        dups = 0
        for s, t in pairs:
            key = (int(s), int(t))
            if key in seen:
                dups += 1
                continue
            seen.add(key)
            unique.append(key)
        return cls(np.array(unique, dtype=np.int64).reshape(-1, 2), src_lang, tgt_lang,
                   n_duplicates=dups, **kw)

    def check_bounds(self, n_src: int, n_tgt: int) -> None:
        if len(self.pairs) == 0:
            return
        if self.src.min() < 0 or self.src.max() >= n_src:
            raise IndexError("source index out of range")
        if self.tgt.min() < 0 or self.tgt.max() >= n_tgt:
            raise IndexError("target index out of range")

    def grouped(self) -> dict[int, list[int]]:
        """Source index -> list of gold target indices, in first-seen order."""
        out: dict[int, list[int]] = {}
        for s, t in self.pairs.tolist():
            out.setdefault(s, []).append(t)
        return out


def load_embeddings(path, max_vocab: int | None = 200_000, lowercase: bool = False,
                    lang: str = "", dtype=np.float32) -> EmbeddingSpace:
    """Parse a ``.vec`` text file.

    Only the first ``max_vocab`` distinct words are kept. Later duplicates of
    a token are skipped; with ``lowercase`` tokens are folded first, so each
    word keeps the vector of its most frequent spelling.
    """
    path = Path(path)
    if max_vocab is not None and max_vocab <= 0:
        raise ValueError("max_vocab must be positive")
    words: list[str] = []
    rows: list[np.ndarray] = []
    seen: set[str] = set()
    with open(path, encoding="utf-8", newline="\n") as fh:
        header = fh.readline()
        if not header:
            raise EmbeddingFormatError(path, 1, "empty file")
        parts = header.split()
        if len(parts) != 2 or not all(p.isdigit() for p in parts):
            raise EmbeddingFormatError(path, 1, f"malformed header {header.strip()!r}, "
                                                "expected 'count dim'")
        dim = int(parts[1])
        if dim <= 0:
            raise EmbeddingFormatError(path, 1, "dimension must be positive")
        for lineno, line in enumerate(fh, start=2):
            if max_vocab is not None and len(words) >= max_vocab:
                break
            line = line.rstrip("\r\n").rstrip(" ")
            if not line:
                continue
            fields = line.split(" ")
            if len(fields) != dim + 1:
                raise EmbeddingFormatError(
                    path, lineno, f"expected {dim} components, got {len(fields) - 1}")
            token = fields[0]
            try:
                vec = np.array(fields[1:], dtype=np.float64)
            except ValueError:
                raise EmbeddingFormatError(path, lineno, "unparseable component") from None
            if not np.all(np.isfinite(vec)):
                raise EmbeddingFormatError(path, lineno, f"non-finite value for {token!r}")
            if lowercase:
                token = token.lower()
            if token in seen:
                continue
            seen.add(token)
            words.append(token)
            rows.append(vec)
    if not words:
        raise EmbeddingFormatError(path, 2, "no embeddings")
    vectors = np.vstack(rows).astype(dtype, copy=False)
    return EmbeddingSpace(tuple(words), vectors, lang)


def save_embeddings(space: EmbeddingSpace, path, precision: int = 6) -> None:
    """Write ``space`` in ``.vec`` text format with fixed decimal precision."""
    fmt = f"%.{precision}f"
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(f"{len(space)} {space.dim}\n")
        for word, vec in zip(space.words, space.vectors):
            fh.write(word + " " + " ".join(fmt % v for v in vec.tolist()) + "\n")


def save_cache(space: EmbeddingSpace, path) -> None:
    """Binary cache: magic, version, dim, count, little-endian float32 rows,
    then length-prefixed UTF-8 tokens and language tag."""
    with open(path, "wb") as fh:
        fh.write(CACHE_MAGIC)
        fh.write(struct.pack("<BII", CACHE_VERSION, space.dim, len(space)))
        fh.write(np.ascontiguousarray(space.vectors, dtype="<f4").tobytes())
        for token in (*space.words, space.lang):
            raw = token.encode("utf-8")
            fh.write(struct.pack("<I", len(raw)))
            fh.write(raw)


def load_cache(path) -> EmbeddingSpace:
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:len(CACHE_MAGIC)] != CACHE_MAGIC:
        raise EmbeddingFormatError(path, 0, "not an embedding cache (bad magic)")
    off = len(CACHE_MAGIC)
    version, dim, count = struct.unpack_from("<BII", data, off)
    if version != CACHE_VERSION:
        raise EmbeddingFormatError(path, 0, f"unsupported cache version {version}")
    off += struct.calcsize("<BII")
    nbytes = 4 * dim * count
    vectors = np.frombuffer(data, dtype="<f4", count=dim * count, offset=off)
    vectors = vectors.reshape(count, dim).astype(np.float32)
    off += nbytes
    tokens = []
    for _ in range(count + 1):
        (n,) = struct.unpack_from("<I", data, off)
        off += 4
        tokens.append(data[off:off + n].decode("utf-8"))
        off += n
    return EmbeddingSpace(tuple(tokens[:-1]), vectors, tokens[-1])


def normalize(space: EmbeddingSpace, mode: str = "unit") -> EmbeddingSpace:
    """Return a normalized copy of ``space``.

    ``center_then_unit`` removes the column mean before scaling rows to unit
    length. Raises ``ValueError`` naming the word if a row has zero norm.
    """
    if mode not in NORMALIZE_MODES:
        raise ValueError(f"unknown normalization {mode!r}; choose from {NORMALIZE_MODES}")
    if mode == "none":
        return space
    vecs = np.array(space.vectors, dtype=np.float64)
    if mode == "center_then_unit":
        vecs -= vecs.mean(axis=0, keepdims=True)
    norms = np.linalg.norm(vecs, axis=1)
    zero = np.nonzero(norms == 0)[0]
    if len(zero):
        raise ValueError(f"zero-norm vector for word {space.words[zero[0]]!r}")
    vecs /= norms[:, None]
    return EmbeddingSpace(space.words, vecs.astype(space.vectors.dtype, copy=False), space.lang)


def unit_rows(x: np.ndarray) -> np.ndarray:
    """Row-normalize in float64; zero rows stay zero."""
    x = np.asarray(x, dtype=np.float64)
    norms = np.linalg.norm(x, axis=-1, keepdims=True)
    return np.divide(x, norms, out=np.zeros_like(x), where=norms > 0)


def load_dictionary(path, src: EmbeddingSpace, tgt: EmbeddingSpace,
                    lowercase: bool = False) -> Dictionary:
    """Read ``source target`` pairs, one per line.

    Pairs with an out-of-vocabulary word are dropped and counted; exact
    duplicates are removed. Blank lines are ignored.
    """
    pairs = []
    n_dropped = 0
    dropped_src: set[str] = set()
    kept_src: set[str] = set()
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            fields = line.split()
            if not fields:
                continue
            if len(fields) < 2:
                raise EmbeddingFormatError(path, lineno, "expected 'source target'")
            s, t = fields[0], fields[1]
            if lowercase:
                s, t = s.lower(), t.lower()
            if s in src and t in tgt:
                pairs.append((src.lookup(s), tgt.lookup(t)))
                kept_src.add(s)
            else:
                n_dropped += 1
                dropped_src.add(s)
    oov_sources = len(dropped_src - kept_src)
    if n_dropped:
        logger.info("%s: dropped %d out-of-vocabulary pairs", path, n_dropped)
    return Dictionary.from_pairs(pairs, src.lang, tgt.lang, n_dropped=n_dropped,
                                 oov_sources=oov_sources)


def save_dictionary(dico: Dictionary, src: EmbeddingSpace, tgt: EmbeddingSpace, path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for s, t in dico.pairs.tolist():
            fh.write(f"{src.words[s]} {tgt.words[t]}\n")


def dictionary_from_words(pairs: Sequence[tuple[str, str]], src: EmbeddingSpace,
                          tgt: EmbeddingSpace) -> Dictionary:
    """In-memory counterpart of :func:`load_dictionary`."""
    idx = []
    dropped = 0
    for s, t in pairs:
        if s in src and t in tgt:
            idx.append((src.lookup(s), tgt.lookup(t)))
        else:
            dropped += 1
    return Dictionary.from_pairs(idx, src.lang, tgt.lang, n_dropped=dropped)


def is_unit(space: EmbeddingSpace, tol: float = 1e-6) -> bool:
    norms = np.linalg.norm(np.asarray(space.vectors, dtype=np.float64), axis=1)
    return bool(np.all(np.abs(norms - 1.0) <= tol))

