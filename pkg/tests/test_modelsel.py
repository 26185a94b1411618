import math

import numpy as np
import pytest
from scipy.stats import rankdata

from xlmap.embed_io import EmbeddingSpace
from xlmap.linmap import MappingMatrix
from xlmap.modelsel import CriterionConfig, criterion_accuracy_correlation, validation_criterion
from xlmap.synthgen import SynthConfig, generate_pair, random_orthogonal


def test_criterion_on_identical_spaces_is_one():
    pair = generate_pair(SynthConfig(n_words=400, dim=20, rotation="identity"))
    c = validation_criterion(MappingMatrix.identity(20), pair.src, pair.tgt)
    assert c == pytest.approx(1.0, abs=1e-12)


def test_criterion_hand_value():
    # W = I, k=1: each source picks its CSLS best target; mean cosine of the picks
    src = EmbeddingSpace(("a", "b"), np.array([[1.0, 0.0], [0.0, 1.0]]))
    s2 = np.sqrt(0.5)
    tgt = EmbeddingSpace(("c", "d"), np.array([[1.0, 0.0], [s2, s2]]))
    c = validation_criterion(MappingMatrix.identity(2), src, tgt, CriterionConfig(csls_k=1))
    assert c == pytest.approx((1.0 + s2) / 2, abs=1e-12)


def test_criterion_prefers_planted_map():
    pair = generate_pair(SynthConfig(n_words=500, dim=20, noise_sigma=0.05, rng_seed=1))
    good = validation_criterion(pair.planted_w, pair.src, pair.tgt)
    bad = validation_criterion(MappingMatrix(random_orthogonal(20, np.random.default_rng(9))),
                               pair.src, pair.tgt)
    assert good > bad


def test_criterion_query_cap():
    pair = generate_pair(SynthConfig(n_words=300, dim=10, noise_sigma=0.1))
    a = validation_criterion(pair.planted_w, pair.src, pair.tgt, CriterionConfig(n_queries=50))
    b = validation_criterion(pair.planted_w, pair.src, pair.tgt, CriterionConfig(n_queries=300))
    assert a != b and 0 < a <= 1 and 0 < b <= 1


def test_correlation_matches_rank_pearson():
    rng = np.random.default_rng(0)
    hist = list(zip(rng.random(12), rng.random(12)))
    ra = rankdata([h[0] for h in hist])
    rb = rankdata([h[1] for h in hist])
    ref = np.corrcoef(ra, rb)[0, 1]
    assert criterion_accuracy_correlation(hist) == pytest.approx(ref, abs=1e-12)


def test_correlation_monotone_is_one():
    hist = [(i, i ** 2) for i in range(6)]
    assert criterion_accuracy_correlation(hist) == pytest.approx(1.0)


def test_correlation_constant_is_nan():
    assert math.isnan(criterion_accuracy_correlation([(0.5, i) for i in range(6)]))


def test_correlation_needs_five_points():
    with pytest.raises(ValueError):
        criterion_accuracy_correlation([(1, 2)] * 4)
