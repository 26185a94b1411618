"""Iterative Procrustes refinement on induced mutual-nearest-neighbor dictionaries."""
from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .embed_io import Dictionary, EmbeddingSpace, unit_rows
from .linmap import MappingMatrix, procrustes
from .metric import mapped_vectors, retrieve

logger = logging.getLogger(__name__)


class EmptyDictionaryError(RuntimeError):
    """No pair survived dictionary induction."""


@dataclass(frozen=True)
class RefineParams:
    dict_rank_cap: int = 10_000
    n_iterations: int = 5
    metric: str = "csls"
    mutual_nn_only: bool = True
    csls_k: int = 10

    def __post_init__(self):
        if self.n_iterations < 0:
            raise ValueError("n_iterations must be >= 0")
        if self.dict_rank_cap < 1:
            raise ValueError("dict_rank_cap must be positive")
        if self.metric not in ("nn", "csls"):
            raise ValueError(f"dictionary metric must be 'nn' or 'csls', got {self.metric!r}")


def build_dictionary(w: MappingMatrix, src: EmbeddingSpace, tgt: EmbeddingSpace,
                     p: RefineParams = RefineParams()) -> Dictionary:
    """Pair frequent words that are each other's best match.

    Only the ``dict_rank_cap`` most frequent words of each side compete, and
    the CSLS neighborhoods are computed over those same candidate sets.
    """
    n_s = min(p.dict_rank_cap, len(src))
    n_t = min(p.dict_rank_cap, len(tgt))
    xs = mapped_vectors(w, src, slice(0, n_s))
    ys = unit_rows(tgt.vectors[:n_t])
    k = min(p.csls_k, n_s, n_t)
    s2t = retrieve(xs, ys, 1, p.metric, csls_k=k, sources=xs)[0][:, 0]
    if p.mutual_nn_only:
        t2s = retrieve(ys, xs, 1, p.metric, csls_k=k, sources=ys)[0][:, 0]
        keep = np.nonzero(t2s[s2t] == np.arange(n_s))[0]
    else:
        keep = np.arange(n_s)
    pairs = np.stack([keep, s2t[keep]], axis=1)
    if len(pairs) == 0:
        raise EmptyDictionaryError("dictionary induction produced no pairs")
    return Dictionary(pairs, src.lang, tgt.lang)


def refine(w0: MappingMatrix, src: EmbeddingSpace, tgt: EmbeddingSpace,
           p: RefineParams = RefineParams()) -> tuple[MappingMatrix, list[int]]:
    """Alternate dictionary induction and Procrustes ``n_iterations`` times.

    Returns the final map and the size of each induced dictionary. If an
    iteration induces no pairs, the last valid map is returned with
    ``meta['aborted']`` describing why.
    """
    w = w0
    sizes: list[int] = []
    for it in range(p.n_iterations):
        try:
            dico = build_dictionary(w, src, tgt, p)
        except EmptyDictionaryError as exc:
            logger.warning("refinement iteration %d: %s; keeping previous map", it, exc)
            return w.with_meta(aborted=f"iteration {it}: {exc}"), sizes
        sizes.append(len(dico))
        xs = np.asarray(src.vectors[dico.src], dtype=np.float64)
        ys = np.asarray(tgt.vectors[dico.tgt], dtype=np.float64)
        w = MappingMatrix(procrustes(xs, ys).w, w0.beta, {"dictionary_size": len(dico)})
        logger.info("refinement iteration %d: %d pairs", it, len(dico))
    return w, sizes
