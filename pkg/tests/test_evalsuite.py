import json
import math
import random

import jsonschema
import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.stats import pearsonr

from xlmap.embed_io import Dictionary, EmbeddingSpace
from xlmap.evalsuite import (REPORT_SCHEMA, EvalReport, IdfTable, WordSimDataset,
                             build_translation_map, corpus_bleu, filter_known, load_wordsim,
                             pearson, sentence_embedding, sentence_retrieval_precision,
                             word_by_word_translate, word_translation_precision, wordsim_pearson)
from xlmap.linmap import MappingMatrix
from xlmap.synthgen import SynthConfig, generate_pair

# 3-sentence fixture with n-gram counts tabulated by hand:
#   p1 = (5+5+2)/(6+5+3), p2 = (3+4+1)/(5+4+2), p3 = (1+3+0)/(4+3+1), p4 = (0+2+0)/(3+2+0)
#   hyp length 14, ref length 15
BLEU_HYPS = ["the cat sat on the mat", "a big dog runs fast", "he reads books"]
BLEU_REFS = ["the cat is on the mat", "a big dog runs fast", "he reads a book"]
BLEU_HAND = 100 * math.exp(1 - 15 / 14) * (12 / 14 * 8 / 11 * 4 / 8 * 2 / 5) ** 0.25


def toks(lines):
    return [s.split() for s in lines]


def test_bleu_hand_fixture():
    assert corpus_bleu(toks(BLEU_HYPS), toks(BLEU_REFS)) == pytest.approx(BLEU_HAND, abs=1e-6)


def test_bleu_identity_and_zero():
    refs = toks(BLEU_REFS)
    assert corpus_bleu(refs, refs) == pytest.approx(100.0, abs=1e-9)
    assert corpus_bleu(toks(["a b c"]), toks(["a b c d"])) == 0.0  # no 4-gram match
    assert corpus_bleu([[]], [["x"]]) == 0.0


def test_bleu_no_penalty_for_longer_hypothesis():
    hyp, ref = toks(["a b c d e f"]), toks(["a b c d e"])
    # p_n = (5-n+1)/(6-n+1), BP = 1
    expected = 100 * ((5 / 6) * (4 / 5) * (3 / 4) * (2 / 3)) ** 0.25
    assert corpus_bleu(hyp, ref) == pytest.approx(expected, abs=1e-9)


@settings(max_examples=20, deadline=None)
@given(st.permutations(list(range(3))))
def test_bleu_order_invariant(perm):
    h, r = toks(BLEU_HYPS), toks(BLEU_REFS)
    assert corpus_bleu([h[i] for i in perm], [r[i] for i in perm]) == pytest.approx(BLEU_HAND, abs=1e-9)


def test_bleu_length_mismatch():
    with pytest.raises(ValueError):
        corpus_bleu([["a"]], [])


def textbook_pearson(a, b):
    n = len(a)
    ma, mb = sum(a) / n, sum(b) / n
    cov = sum((x - ma) * (y - mb) for x, y in zip(a, b))
    va = sum((x - ma) ** 2 for x in a)
    vb = sum((y - mb) ** 2 for y in b)
    return cov / math.sqrt(va * vb)


def test_pearson_ten_pair_oracle():
    a = [0.1, 0.5, 0.3, 0.9, 0.2, 0.7, 0.4, 0.8, 0.6, 0.05]
    b = [1.0, 4.5, 2.0, 9.1, 3.3, 6.0, 4.4, 7.5, 5.2, 0.3]
    assert pearson(a, b) == pytest.approx(textbook_pearson(a, b), abs=1e-12)
    assert pearson(a, b) == pytest.approx(pearsonr(a, b).statistic, abs=1e-12)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10_000), st.floats(0.01, 100), st.floats(-100, 100))
def test_pearson_symmetric_and_affine_invariant(seed, scale, shift):
    rng = np.random.default_rng(seed)
    a, b = rng.standard_normal(10), rng.standard_normal(10)
    r = pearson(a, b)
    assert -1 <= r <= 1
    assert pearson(b, a) == pytest.approx(r, abs=1e-12)
    assert pearson(a, scale * b + shift) == pytest.approx(r, abs=1e-9)


def test_pearson_constant_series():
    with pytest.raises(ValueError):
        pearson([1, 1, 1], [1, 2, 3])


@pytest.fixture(scope="module")
def noisy():
    return generate_pair(SynthConfig(n_words=500, dim=20, noise_sigma=0.25, rng_seed=2))


def naive_p_at_k(groups, w, src, tgt, k, denom):
    xs = src.vectors @ w.w.T
    xs = xs / np.linalg.norm(xs, axis=1, keepdims=True)
    ys = tgt.vectors / np.linalg.norm(tgt.vectors, axis=1, keepdims=True)
    hits = 0
    for q, golds in groups.items():
        sims = [(-float(xs[q] @ ys[j]), j) for j in range(len(ys))]
        top = [j for _, j in sorted(sims)[:k]]
        hits += any(g in top for g in golds)
    return hits / denom


def test_precision_matches_naive_oracle(noisy):
    pairs = [(i, i) for i in range(0, 500, 5)] + [(5, 7), (10, 11)]
    dico = Dictionary.from_pairs(pairs, n_dropped=3, oov_sources=2)
    res = word_translation_precision(dico, noisy.planted_w, noisy.src, noisy.tgt, "nn")
    assert res.n_queries == 100
    for k in (1, 5, 10):
        ref = naive_p_at_k(dico.grouped(), noisy.planted_w, noisy.src, noisy.tgt, k, 102)
        assert res.precision[k] == pytest.approx(ref, abs=1e-12)
    loose = word_translation_precision(dico, noisy.planted_w, noisy.src, noisy.tgt, "nn",
                                       oov_as_wrong=False)
    assert loose.precision[1] == pytest.approx(res.precision[1] * 102 / 100)


def test_precision_identity_is_one():
    pair = generate_pair(SynthConfig(n_words=200, dim=10, rotation="identity"))
    for method in ("nn", "csls", "isf"):
        res = word_translation_precision(pair.gold, MappingMatrix.identity(10), pair.src, pair.tgt,
                                         method)
        assert res.precision == {1: 1.0, 5: 1.0, 10: 1.0}


def test_precision_monotone_in_k(noisy):
    res = word_translation_precision(noisy.gold, noisy.planted_w, noisy.src, noisy.tgt, "csls",
                                     ks=(1, 2, 5, 10, 50))
    vals = [res.precision[k] for k in (1, 2, 5, 10, 50)]
    assert vals == sorted(vals) and all(0 <= v <= 1 for v in vals)


def test_wordsim_identity_and_oov(tmp_path):
    rng = np.random.default_rng(0)
    words = tuple(f"w{i}" for i in range(12))
    sp = EmbeddingSpace(words, rng.standard_normal((12, 5)))
    pairs = [(words[i], words[i + 1]) for i in range(10)]
    xs = sp.vectors / np.linalg.norm(sp.vectors, axis=1, keepdims=True)
    lines = [f"{a} {b} {3 * float(xs[sp.lookup(a)] @ xs[sp.lookup(b)]) + 1!r}" for a, b in pairs]
    lines.append("w0 unknown 2.0")
    (tmp_path / "sim.txt").write_text("\n".join(lines) + "\n")
    ds = load_wordsim(tmp_path / "sim.txt")
    res = wordsim_pearson(ds, MappingMatrix.identity(5), sp, sp)
    assert res.pearson == pytest.approx(1.0, abs=1e-12)
    assert res.n_pairs == 10 and res.n_oov == 1


def test_wordsim_rejects_nonfinite():
    with pytest.raises(ValueError):
        WordSimDataset([("a", "b", float("nan"))])


def test_idf_weights():
    idf = IdfTable.from_sentences([["a", "b"], ["a"], ["a", "c", "c"], ["d"]])
    assert idf.weight("a") == pytest.approx(math.log(4 / 3))
    assert idf.weight("c") == pytest.approx(math.log(4))
    assert idf.weight("zzz") == pytest.approx(math.log(4))
    assert not idf.seen("zzz")


def test_sentence_embedding_hand():
    sp = EmbeddingSpace(("a", "b"), np.array([[1.0, 0.0], [0.0, 1.0]]))
    idf = IdfTable.from_sentences([["a"], ["a", "b"], ["c"], ["d"]])
    vec, ok = sentence_embedding(["a", "b", "oov"], sp, idf)
    wa, wb = math.log(2), math.log(4)
    np.testing.assert_allclose(vec, [wa / (wa + wb), wb / (wa + wb)])
    assert ok
    vec, ok = sentence_embedding(["oov"], sp, idf)
    assert not ok and not vec.any()


def test_sentence_retrieval_identity():
    pair = generate_pair(SynthConfig(n_words=300, dim=20, rotation="identity"))
    rnd = random.Random(0)
    sents = [[pair.src.words[rnd.randrange(300)] for _ in range(6)] for _ in range(40)]
    idf = IdfTable.from_sentences(sents)
    for method in ("nn", "csls"):
        prec = sentence_retrieval_precision(sents, sents, MappingMatrix.identity(20), pair.src,
                                            pair.tgt, idf, idf, method, ks=(1, 5))
        assert prec == {1: 1.0, 5: 1.0}


def test_word_by_word_identity_bleu():
    pair = generate_pair(SynthConfig(n_words=200, dim=10, rotation="identity"))
    sents = [list(pair.src.words[i:i + 7]) for i in range(0, 140, 7)]
    tmap = build_translation_map({w for s in sents for w in s}, MappingMatrix.identity(10),
                                 pair.src, pair.tgt)
    hyps = [word_by_word_translate(s, tmap)[0] for s in sents]
    assert corpus_bleu(hyps, sents) == pytest.approx(100.0)
    out, missing = word_by_word_translate(["word_1", "unknown"], tmap)
    assert out == ["word_1", "unknown"] and missing == 1


def test_filter_known():
    pairs = [(["a"], ["x"]), (["a", "q"], ["x"]), (["a"], ["zz"])]
    assert filter_known(pairs, {"a"}, {"x"}) == [(["a"], ["x"])]


def test_report_schema_and_csv(tmp_path):
    rep = EvalReport(word_translation={"src-tgt": {"nn": {1: 0.5, 5: 0.75}, "csls": {1: 0.6}}},
                     wordsim={"sim": {"pearson": 0.4, "n_pairs": 10, "n_oov": 1}},
                     sentence_retrieval={"nn": {1: 0.3}}, bleu={"test": 12.5},
                     metadata={"map": "abc"})
    rep.to_json(tmp_path / "r.json")
    data = json.loads((tmp_path / "r.json").read_text())
    jsonschema.validate(data, REPORT_SCHEMA)
    assert data["schema_version"] == 1
    rep.precision_csv(tmp_path / "p.csv", ks=(1, 5))
    rows = (tmp_path / "p.csv").read_text().splitlines()
    assert rows == ["method,src-tgt@1,src-tgt@5", "nn,50.0,75.0", "csls,60.0,"]
    bad = dict(data, bleu={"test": 140.0})
    with pytest.raises(jsonschema.ValidationError):
        jsonschema.validate(bad, REPORT_SCHEMA)
