"""Unsupervised model selection: mean cosine of CSLS-induced translations."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy.stats import spearmanr

from .embed_io import EmbeddingSpace, unit_rows
from .linmap import MappingMatrix
from .metric import mapped_vectors, retrieve

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class CriterionConfig:
    n_queries: int = 10_000
    metric: str = "csls"
    csls_k: int = 10
    source_cap: int | None = 200_000


def validation_criterion(w: MappingMatrix, src: EmbeddingSpace, tgt: EmbeddingSpace,
                         cfg: CriterionConfig = CriterionConfig()) -> float:
    """Translate the most frequent source words and average the cosine of
    each word with its chosen translation."""
    nq = min(cfg.n_queries, len(src))
    cap = len(src) if cfg.source_cap is None else min(cfg.source_cap, len(src))
    sources = mapped_vectors(w, src, slice(0, max(cap, nq)))
    queries = sources[:nq]
    keys = unit_rows(tgt.vectors)
    best = retrieve(queries, keys, 1, cfg.metric, csls_k=cfg.csls_k,
                    sources=sources[:cap])[0][:, 0]
    cos = np.einsum("ij,ij->i", queries, keys[best])
    return float(cos.mean())


def criterion_accuracy_correlation(history: Sequence[tuple[float, float]]) -> float:
    """Spearman rank correlation between criterion and accuracy across epochs.

    Returns NaN, with a warning, when either series is constant.
    """
    if len(history) < 5:
        raise ValueError(f"need at least 5 epochs of history, got {len(history)}")
    crit = np.array([h[0] for h in history], dtype=np.float64)
    acc = np.array([h[1] for h in history], dtype=np.float64)
    if np.ptp(crit) == 0 or np.ptp(acc) == 0:
        logger.warning("constant series: rank correlation is undefined")
        return math.nan
    return float(spearmanr(crit, acc).statistic)
