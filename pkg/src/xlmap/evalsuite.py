"""Cross-lingual evaluation: word translation, word similarity, sentence
retrieval and word-by-word translation scored with corpus BLEU."""
from __future__ import annotations

import csv
import json
import math
from collections import Counter
from dataclasses import asdict, dataclass, field
from typing import Iterable, Mapping, Sequence

import numpy as np

from .embed_io import Dictionary, EmbeddingSpace, unit_rows
from .linmap import MappingMatrix, apply_map
from .metric import METHODS, retrieve, translate

REPORT_SCHEMA_VERSION = 1
DEFAULT_KS = (1, 5, 10)


@dataclass
class WordTranslationResult:
    precision: dict[int, float]
    method: str
    n_queries: int
    n_oov: int


def word_translation_precision(dico: Dictionary, w: MappingMatrix, src: EmbeddingSpace,
                               tgt: EmbeddingSpace, method: str = "nn",
                               ks: Sequence[int] = DEFAULT_KS, oov_as_wrong: bool = True,
                               **retrieval) -> WordTranslationResult:
    """Fraction of distinct source words with any gold target in the top ``k``.

    Source words whose every pair was dropped as out of vocabulary are
    counted as misses when ``oov_as_wrong`` is set, and excluded otherwise.
    """
    groups = dico.grouped()
    if not groups:
        raise ValueError("no in-vocabulary query in the dictionary")
    queries = np.array(sorted(groups), dtype=np.int64)
    kmax = max(ks)
    res = translate(queries, w, src, tgt, method, min(kmax, len(tgt)), **retrieval)
    first_hit = np.full(len(queries), np.inf)
    for i, (q, row) in enumerate(zip(queries.tolist(), res.indices.tolist())):
        gold = set(groups[q])
        for rank, t in enumerate(row):
            if t in gold:
                first_hit[i] = rank
                break
    denom = len(queries) + (dico.oov_sources if oov_as_wrong else 0)
    prec = {int(k): float(np.sum(first_hit < k) / denom) for k in ks}
    return WordTranslationResult(prec, method, len(queries), dico.oov_sources)


@dataclass
class WordSimDataset:
    pairs: list[tuple[str, str, float]]
    name: str = ""

    def __post_init__(self):
        for s, t, score in self.pairs:
            if not math.isfinite(score):
                raise ValueError(f"non-finite score for pair ({s}, {t})")


def load_wordsim(path, name: str | None = None) -> WordSimDataset:
    """Whitespace- or tab-separated ``word1 word2 score`` lines."""
    pairs = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            fields = line.split()
            if not fields:
                continue
            if len(fields) != 3:
                raise ValueError(f"{path}:{lineno}: expected 'word1 word2 score'")
            pairs.append((fields[0], fields[1], float(fields[2])))
    return WordSimDataset(pairs, name or str(path))


def pearson(a, b) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if len(a) != len(b) or len(a) < 2:
        raise ValueError("need two equal-length series of at least 2 values")
    da = a - a.mean()
    db = b - b.mean()
    va, vb = np.dot(da, da), np.dot(db, db)
    if va == 0 or vb == 0:
        raise ValueError("zero variance: correlation undefined")
    return float(np.clip(np.dot(da, db) / math.sqrt(va * vb), -1.0, 1.0))


@dataclass
class WordSimResult:
    pearson: float
    n_pairs: int
    n_oov: int


def wordsim_pearson(ds: WordSimDataset, w: MappingMatrix, src: EmbeddingSpace,
                    tgt: EmbeddingSpace) -> WordSimResult:
    """Pearson correlation of ``cos(W x_s, y_t)`` with the human scores."""
    cos, gold = [], []
    n_oov = 0
    for s, t, score in ds.pairs:
        if s not in src or t not in tgt:
            n_oov += 1
            continue
        x = unit_rows(apply_map(w, np.asarray(src.vector(s), dtype=np.float64)))
        y = unit_rows(np.asarray(tgt.vector(t), dtype=np.float64))
        cos.append(float(x @ y))
        gold.append(score)
    return WordSimResult(pearson(cos, gold), len(cos), n_oov)


@dataclass
class IdfTable:
    """Document frequencies from a corpus disjoint from the evaluation data."""

    n_docs: int
    df: dict[str, int]

    @classmethod
    def from_sentences(cls, sentences: Iterable[Sequence[str]]) -> "IdfTable":
        df: Counter = Counter()
        n = 0
        for sent in sentences:
            df.update(set(sent))
            n += 1
        if n == 0:
            raise ValueError("empty idf corpus")
        return cls(n, dict(df))

    def weight(self, word: str) -> float:
        """``log(N / df)``; unseen words get ``log(N)`` as if ``df = 1``."""
        return math.log(self.n_docs / self.df.get(word, 1))

    def seen(self, word: str) -> bool:
        return word in self.df


def sentence_embedding(tokens: Sequence[str], space: EmbeddingSpace,
                       idf: IdfTable) -> tuple[np.ndarray, bool]:
    """idf-weighted mean of in-vocabulary token vectors.

    Returns the vector and whether any token contributed; an empty
    result is the zero vector.
    """
    acc = np.zeros(space.dim)
    total = 0.0
    for tok in tokens:
        if tok not in space:
            continue
        wt = idf.weight(tok)
        acc += wt * np.asarray(space.vector(tok), dtype=np.float64)
        total += wt
    if total == 0.0:
        return np.zeros(space.dim), False
    return acc / total, True


def embed_sentences(sentences, space, idf) -> np.ndarray:
    return np.array([sentence_embedding(s, space, idf)[0] for s in sentences]).reshape(-1, space.dim)


def sentence_retrieval_precision(src_sents: Sequence[Sequence[str]],
                                 tgt_sents: Sequence[Sequence[str]], w: MappingMatrix,
                                 src: EmbeddingSpace, tgt: EmbeddingSpace,
                                 src_idf: IdfTable, tgt_idf: IdfTable, method: str = "nn",
                                 ks: Sequence[int] = DEFAULT_KS, csls_k: int = 10,
                                 gold=None) -> dict[int, float]:
    """P@k of retrieving the aligned target sentence for each source sentence.

    ``gold[i]`` is the index of source ``i``'s translation among the targets
    (defaults to ``i``); extra unaligned targets act as distractors.
    """
    if method not in ("nn", "csls"):
        raise ValueError("sentence retrieval supports 'nn' and 'csls'")
    if not src_sents or not tgt_sents:
        raise ValueError("empty sentence set")
    gold = np.arange(len(src_sents)) if gold is None else np.asarray(gold)
    q = apply_map(w, embed_sentences(src_sents, src, src_idf))
    keys = embed_sentences(tgt_sents, tgt, tgt_idf)
    kmax = min(max(ks), len(keys))
    idx, _ = retrieve(q, keys, kmax, method, csls_k=min(csls_k, len(q), len(keys)))
    hit = idx == gold[:, None]
    return {int(k): float(hit[:, :k].any(axis=1).mean()) for k in ks}


def build_translation_map(words: Iterable[str], w: MappingMatrix, src: EmbeddingSpace,
                          tgt: EmbeddingSpace, method: str = "csls", **retrieval) -> dict[str, str]:
    """Rank-1 translation for each in-vocabulary word."""
    words = sorted({wd for wd in words if wd in src}, key=src.lookup)
    if not words:
        return {}
    res = translate([src.lookup(wd) for wd in words], w, src, tgt, method, 1, **retrieval)
    return {wd: tgt.words[t] for wd, t in zip(words, res.top1().tolist())}


def word_by_word_translate(sentence: Sequence[str],
                           translation_map: Mapping[str, str]) -> tuple[list[str], int]:
    """Replace each token by its translation; unknown tokens pass through.

    Returns the translated tokens and the number of passed-through tokens.
    """
    out, missing = [], 0
    for tok in sentence:
        if tok in translation_map:
            out.append(translation_map[tok])
        else:
            out.append(tok)
            missing += 1
    return out, missing


def filter_known(pairs, src_vocab, tgt_vocab):
    """Drop sentence pairs containing a word unknown to either vocabulary."""
    return [(s, t) for s, t in pairs
            if all(w in src_vocab for w in s) and all(w in tgt_vocab for w in t)]


def _ngrams(tokens, n):
    return Counter(tuple(tokens[i:i + n]) for i in range(len(tokens) - n + 1))


def corpus_bleu(hypotheses: Sequence[Sequence[str]], references: Sequence[Sequence[str]],
                max_order: int = 4) -> float:
    """Corpus BLEU-4 in ``[0, 100]`` with one reference per hypothesis.

    Clipped n-gram counts and lengths are summed over the corpus before the
    geometric mean; there is no smoothing, so any order without a match
    scores 0.
    """
    if len(hypotheses) != len(references):
        raise ValueError("hypotheses and references differ in length")
    if not hypotheses:
        raise ValueError("empty corpus")
    matches = [0] * max_order
    totals = [0] * max_order
    hyp_len = ref_len = 0
    for hyp, ref in zip(hypotheses, references):
        hyp_len += len(hyp)
        ref_len += len(ref)
        for n in range(1, max_order + 1):
            h, r = _ngrams(hyp, n), _ngrams(ref, n)
            matches[n - 1] += sum(min(c, r[g]) for g, c in h.items())
            totals[n - 1] += max(len(hyp) - n + 1, 0)
    if hyp_len == 0 or min(matches) == 0:
        return 0.0
    log_prec = sum(math.log(m / t) for m, t in zip(matches, totals)) / max_order
    bp = math.exp(min(0.0, 1.0 - ref_len / hyp_len))
    return 100.0 * bp * math.exp(log_prec)


@dataclass
class EvalReport:
    word_translation: dict = field(default_factory=dict)
    wordsim: dict = field(default_factory=dict)
    sentence_retrieval: dict = field(default_factory=dict)
    bleu: dict = field(default_factory=dict)
    metadata: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {"schema_version": REPORT_SCHEMA_VERSION, **_stringify_keys(asdict(self))}

    def to_json(self, path) -> None:
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            json.dump(self.to_dict(), fh, indent=2, sort_keys=True)
            fh.write("\n")

    def precision_csv(self, path, ks: Sequence[int] = DEFAULT_KS) -> None:
        """One row per method, one ``direction@k`` column per direction and k."""
        table = _stringify_keys(self.word_translation)
        directions = sorted(table)
        methods = [m for m in METHODS if any(m in table[d] for d in directions)]
        with open(path, "w", encoding="utf-8", newline="") as fh:
            out = csv.writer(fh, lineterminator="\n")
            out.writerow(["method", *[f"{d}@{k}" for d in directions for k in ks]])
            for m in methods:
                row = [m]
                for d in directions:
                    prec = table[d].get(m, {})
                    row += [f"{100 * prec[str(k)]:.1f}" if str(k) in prec else "" for k in ks]
                out.writerow(row)


def _stringify_keys(obj):
    if isinstance(obj, dict):
        return {str(k): _stringify_keys(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_stringify_keys(v) for v in obj]
    return obj


_PREC = {"type": "number", "minimum": 0, "maximum": 1}

REPORT_SCHEMA = {
    "$schema": "https://json-schema.org/draft/2020-12/schema",
    "type": "object",
    "required": ["schema_version", "word_translation", "wordsim", "sentence_retrieval",
                 "bleu", "metadata"],
    "properties": {
        "schema_version": {"const": REPORT_SCHEMA_VERSION},
        "word_translation": {
            "type": "object",
            "additionalProperties": {            # direction, e.g. "src-tgt"
                "type": "object",
                "additionalProperties": {        # method
                    "type": "object",
                    "additionalProperties": _PREC,
                },
            },
        },
        "wordsim": {
            "type": "object",
            "additionalProperties": {
                "type": "object",
                "required": ["pearson", "n_pairs", "n_oov"],
                "properties": {
                    "pearson": {"type": "number", "minimum": -1, "maximum": 1},
                    "n_pairs": {"type": "integer", "minimum": 0},
                    "n_oov": {"type": "integer", "minimum": 0},
                },
            },
        },
        "sentence_retrieval": {
            "type": "object",
            "additionalProperties": {"type": "object", "additionalProperties": _PREC},
        },
        "bleu": {
            "type": "object",
            "additionalProperties": {"type": "number", "minimum": 0, "maximum": 100},
        },
        "metadata": {"type": "object"},
    },
}
