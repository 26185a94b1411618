"""Exact cosine k-NN and the three retrieval criteria: NN, ISF and CSLS.

All scores are accumulated in float64 over query blocks. Ties are broken by
ascending key index everywhere, which favours the more frequent word.
"""
from __future__ import annotations

import csv
import threading
from collections import OrderedDict
from dataclasses import dataclass, field

import numpy as np
from scipy.special import logsumexp

from .embed_io import EmbeddingSpace, unit_rows
from .linmap import MappingMatrix, apply_map

METHODS = ("nn", "isf", "csls")
BLOCK = 1024


class StaleStatsError(RuntimeError):
    """Neighborhood statistics were computed for a different map or spaces."""


@dataclass(frozen=True)
class NeighborhoodStats:
    """Mean cosine of each point to its ``k`` nearest neighbors on the other side.

    ``r_tgt[i]`` belongs to mapped source ``i``; ``r_src[j]`` to target ``j``.
    """

    r_src: np.ndarray
    r_tgt: np.ndarray
    k: int
    fingerprint: str = ""


@dataclass
class RetrievalResult:
    queries: np.ndarray
    indices: np.ndarray
    scores: np.ndarray
    method: str
    meta: dict = field(default_factory=dict)

    def top1(self) -> np.ndarray:
        return self.indices[:, 0]

    def to_tsv(self, path, src_words, tgt_words) -> None:
        with open(path, "w", encoding="utf-8", newline="") as fh:
            out = csv.writer(fh, delimiter="\t", lineterminator="\n")
            out.writerow(["query_word", "rank", "target_word", "score", "method"])
            for q, row_i, row_s in zip(self.queries.tolist(), self.indices.tolist(),
                                       self.scores.tolist()):
                for rank, (t, s) in enumerate(zip(row_i, row_s), start=1):
                    out.writerow([src_words[q], rank, tgt_words[t], f"{s:.6f}", self.method])


def topk_rows(scores: np.ndarray, k: int) -> tuple[np.ndarray, np.ndarray]:
    """Row-wise top ``k`` of a score matrix, ties to the lower column index."""
    n = scores.shape[1]
    if not 1 <= k <= n:
        raise ValueError(f"k={k} out of range for {n} candidates")
    if k == n:
        part = np.broadcast_to(np.arange(n), scores.shape)
    else:
        part = np.sort(np.argpartition(-scores, k - 1, axis=1)[:, :k], axis=1)
    vals = np.take_along_axis(scores, part, axis=1)
    order = np.argsort(-vals, axis=1, kind="stable")
    idx = np.take_along_axis(part, order, axis=1)
    top = np.take_along_axis(vals, order, axis=1)
    if k < n:
        # boundary ties: the partition may have kept a higher index than a tied one
        kth = top[:, -1]
        n_ge = (scores >= kth[:, None]).sum(axis=1)
        for r in np.nonzero(n_ge > k)[0]:
            cand = np.nonzero(scores[r] >= kth[r])[0]
            o = np.argsort(-scores[r, cand], kind="stable")[:k]
            idx[r] = cand[o]
            top[r] = scores[r, cand[o]]
    return idx, top


def _topk_mean(scores: np.ndarray, k: int) -> np.ndarray:
    n = scores.shape[1]
    top = np.partition(scores, n - k, axis=1)[:, n - k:]
    return np.sort(top, axis=1).mean(axis=1)


def knn(queries, keys, k: int, block: int = BLOCK) -> tuple[np.ndarray, np.ndarray]:
    """Exact top-``k`` keys by cosine similarity for every query row."""
    q = unit_rows(np.atleast_2d(queries))
    kk = unit_rows(keys)
    if q.shape[1] != kk.shape[1]:
        raise ValueError(f"dimension mismatch: {q.shape[1]} vs {kk.shape[1]}")
    if not 1 <= k <= len(kk):
        raise ValueError(f"k={k} out of range for {len(kk)} keys")
    idx = np.empty((len(q), k), dtype=np.int64)
    sc = np.empty((len(q), k))
    for start in range(0, len(q), block):
        sl = slice(start, start + block)
        idx[sl], sc[sl] = topk_rows(q[sl] @ kk.T, k)
    return idx, sc


def neighborhood_means(queries, keys, k: int, block: int = BLOCK) -> np.ndarray:
    """Mean cosine of each query to its ``k`` nearest keys."""
    q = unit_rows(queries)
    kk = unit_rows(keys)
    if not 1 <= k <= len(kk):
        raise ValueError(f"k={k} exceeds the {len(kk)} available neighbors")
    out = np.empty(len(q))
    for start in range(0, len(q), block):
        out[start:start + block] = _topk_mean(q[start:start + block] @ kk.T, k)
    return out


def neighborhood_stats(mapped_src, tgt, k: int = 10, fingerprint: str = "",
                       block: int = BLOCK) -> NeighborhoodStats:
    """Both directions of the bipartite ``k``-NN mean similarity."""
    r_tgt = neighborhood_means(mapped_src, tgt, k, block)
    r_src = neighborhood_means(tgt, mapped_src, k, block)
    return NeighborhoodStats(r_src=r_src, r_tgt=r_tgt, k=k, fingerprint=fingerprint)


def csls_scores(queries, tgt, stats: NeighborhoodStats, query_ids=None,
                fingerprint: str | None = None) -> np.ndarray:
    """``2 cos(q, t) - r_T(q) - r_S(t)`` for every query/target pair.

    ``r_T`` is read from ``stats`` when ``query_ids`` is given, otherwise it
    is recomputed from the query rows (it depends only on the query and the
    targets).
    """
    if fingerprint is not None and fingerprint != stats.fingerprint:
        raise StaleStatsError("neighborhood statistics do not match the current mapping")
    q = unit_rows(np.atleast_2d(queries))
    t = unit_rows(tgt)
    if len(stats.r_src) != len(t):
        raise StaleStatsError("statistics were computed for a different target set")
    cos = q @ t.T
    if query_ids is not None:
        r_t = stats.r_tgt[np.asarray(query_ids)]
    else:
        r_t = _topk_mean(cos, stats.k)
    return 2.0 * cos - r_t[:, None] - stats.r_src[None, :]


def isf_log_normalizer(sample, tgt, temperature: float, block: int = BLOCK) -> np.ndarray:
    """Per-target ``log sum_s exp(beta cos(s, t))`` over the source sample."""
    s = unit_rows(sample)
    t = unit_rows(tgt)
    out = np.empty(len(t))
    for start in range(0, len(t), block):
        out[start:start + block] = logsumexp(temperature * (t[start:start + block] @ s.T), axis=1)
    return out


def isf_scores(queries, tgt, temperature: float = 30.0, pool=None) -> np.ndarray:
    """Inverted softmax: each target's scores are normalized over source words.

    The normalizing sample is the queries plus the optional ``pool`` rows.
    """
    if not (np.isfinite(temperature) and temperature > 0):
        raise ValueError("temperature must be finite and positive")
    q = unit_rows(np.atleast_2d(queries))
    sample = q if pool is None else np.vstack([q, unit_rows(pool)])
    lse = isf_log_normalizer(sample, tgt, temperature)
    return np.exp(temperature * (q @ unit_rows(tgt).T) - lse[None, :])


def retrieve(queries, keys, k_out: int, method: str = "nn", *, csls_k: int = 10,
             sources=None, r_src=None, isf_temperature: float = 30.0, isf_sample=None,
             block: int = BLOCK) -> tuple[np.ndarray, np.ndarray]:
    """Top ``k_out`` keys per query under ``method``.

    ``sources`` is the full mapped source set used for the CSLS key-side
    neighborhood (defaults to the queries); a precomputed ``r_src`` skips
    that pass. ``isf_sample`` likewise defaults to the queries.
    """
    if method not in METHODS:
        raise ValueError(f"unknown retrieval method {method!r}; choose from {METHODS}")
    q = unit_rows(np.atleast_2d(queries))
    kk = unit_rows(keys)
    if len(q) == 0:
        raise ValueError("empty query set")
    if q.shape[1] != kk.shape[1]:
        raise ValueError(f"dimension mismatch: {q.shape[1]} vs {kk.shape[1]}")
    if method == "csls" and r_src is None:
        r_src = neighborhood_means(kk, q if sources is None else sources, csls_k, block)
    lse = None
    if method == "isf":
        lse = isf_log_normalizer(q if isf_sample is None else isf_sample, kk,
                                 isf_temperature, block)
    idx = np.empty((len(q), k_out), dtype=np.int64)
    sc = np.empty((len(q), k_out))
    for start in range(0, len(q), block):
        sl = slice(start, start + block)
        cos = q[sl] @ kk.T
        if method == "nn":
            s = cos
        elif method == "csls":
            s = 2.0 * cos - _topk_mean(cos, csls_k)[:, None] - r_src[None, :]
        else:
            s = np.exp(isf_temperature * cos - lse[None, :])
        idx[sl], sc[sl] = topk_rows(s, k_out)
    return idx, sc


_STATS_CACHE: OrderedDict = OrderedDict()
_STATS_LOCK = threading.Lock()
_STATS_CACHE_SIZE = 4


def mapped_vectors(w: MappingMatrix, space: EmbeddingSpace, rows=None) -> np.ndarray:
    vecs = space.vectors if rows is None else space.vectors[rows]
    return unit_rows(apply_map(w, np.asarray(vecs, dtype=np.float64)))


def cached_r_src(w: MappingMatrix, src: EmbeddingSpace, tgt: EmbeddingSpace, k: int,
                 source_cap: int | None) -> np.ndarray:
    """Target-side CSLS term, memoized on the (map, spaces, k, cap) fingerprint."""
    key = (w.fingerprint, src.fingerprint, tgt.fingerprint, k, source_cap)
    with _STATS_LOCK:
        if key in _STATS_CACHE:
            _STATS_CACHE.move_to_end(key)
            return _STATS_CACHE[key]
    cap = len(src) if source_cap is None else min(source_cap, len(src))
    r = neighborhood_means(unit_rows(tgt.vectors), mapped_vectors(w, src, slice(0, cap)), k)
    r.flags.writeable = False
    with _STATS_LOCK:
        _STATS_CACHE[key] = r
        while len(_STATS_CACHE) > _STATS_CACHE_SIZE:
            _STATS_CACHE.popitem(last=False)
    return r


def clear_cache() -> None:
    with _STATS_LOCK:
        _STATS_CACHE.clear()


def translate(src_ids, w: MappingMatrix, src: EmbeddingSpace, tgt: EmbeddingSpace,
              method: str = "nn", k_out: int = 1, *, csls_k: int = 10,
              source_cap: int | None = 200_000, isf_temperature: float = 30.0,
              isf_pool: int = 10_000) -> RetrievalResult:
    """Rank target words for each source word index under ``method``.

    For CSLS the target-side neighborhoods are taken over the mapped source
    vocabulary truncated to ``source_cap`` words. For ISF each target is
    normalized over the queries plus the ``isf_pool`` most frequent sources.
    """
    if method not in METHODS:
        raise ValueError(f"unknown retrieval method {method!r}; choose from {METHODS}")
    ids = np.atleast_1d(np.asarray(src_ids, dtype=np.int64))
    if len(ids) == 0:
        raise ValueError("empty query set")
    if src.dim != w.dim or tgt.dim != w.dim:
        raise ValueError("space and mapping dimensions differ")
    queries = mapped_vectors(w, src, ids)
    keys = unit_rows(tgt.vectors)
    meta = {"map": w.fingerprint, "k_out": k_out}
    r_src = None
    sample = None
    if method == "csls":
        r_src = cached_r_src(w, src, tgt, csls_k, source_cap)
        meta.update(csls_k=csls_k, source_cap=source_cap)
    elif method == "isf":
        pool_ids = np.union1d(ids, np.arange(min(isf_pool, len(src))))
        sample = mapped_vectors(w, src, pool_ids)
        meta.update(isf_temperature=isf_temperature, isf_sample=len(pool_ids))
    idx, sc = retrieve(queries, keys, k_out, method, csls_k=csls_k, r_src=r_src,
                       isf_temperature=isf_temperature, isf_sample=sample)
    return RetrievalResult(ids, idx, sc, method, meta)


def rank1_in_degree(top1, n_keys: int) -> np.ndarray:
    """How many queries rank each key first."""
    return np.bincount(np.asarray(top1, dtype=np.int64), minlength=n_keys)
