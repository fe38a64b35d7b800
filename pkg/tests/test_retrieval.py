import itertools
import logging
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from oracles import ap_oracle, ndcg_oracle, nmrr_oracle

from dac_retrieval import dataio
from dac_retrieval.errors import DataError
from dac_retrieval.fusion import Descriptor
from dac_retrieval.numcore import Rng
from dac_retrieval.retrieval import (
    ExcludedQuery, anmrr, average_precision, evaluate, ndcg, nmrr, rank, validate_open_set_split,
)


def desc(h, id, label="x"):
    return Descriptor(h=np.asarray(h, dtype=float), g=np.asarray(h, dtype=float), id=id, label=label)


def at_angle(deg):
    return [math.cos(math.radians(deg)), math.sin(math.radians(deg))]


def hand_case():
    """Three queries on the x-axis; gallery items at 10, 20, ... 60 degrees."""
    labels = ["a", "b", "a", "c", "b", "a"]
    gallery = [desc(at_angle(10 * (k + 1)), f"t{k}", lab) for k, lab in enumerate(labels)]
    queries = [desc([1.0, 0.0], f"q{lab}", lab) for lab in "abc"]
    return queries, gallery


# --- ranking ----------------------------------------------------------------


def test_copy_ranks_first():
    q = desc([0.3, 0.4, 0.5], "q")
    out = rank(q, [desc([1.0, 0, 0], "o"), desc([0.3, 0.4, 0.5], "copy")])
    assert out.ids[0] == "copy"


def test_self_id_excluded():
    q = desc([1.0, 0], "same")
    assert rank(q, [q, desc([0, 1.0], "other")]).ids == ["other"]


def test_scale_invariance():
    rng = Rng(0)
    gallery = [desc(rng.normal(4), f"g{k}") for k in range(10)]
    q = desc(rng.normal(4), "q")
    scaled = [desc(3 * d.h, d.id) for d in gallery]
    assert rank(q, gallery).ids == rank(q, scaled).ids


@settings(max_examples=50)
@given(st.integers(0, 10_000))
def test_ordering_matches_pairwise_oracle(seed):
    rng = Rng(seed)
    # coarse values force some exact ties
    gallery = [desc(np.round(rng.normal(3), 0) + 0.5, f"g{k}") for k in range(5)]
    q = desc(rng.normal(3), "q")

    def score(d):
        return float(np.dot(q.h, d.h) / (np.linalg.norm(q.h) * np.linalg.norm(d.h)))

    def beats(x, y):
        sx, sy = score(x), score(y)
        return sx > sy or (sx == sy and x.id < y.id)
    position = {d.id: sum(beats(o, d) for o in gallery if o is not d) for d in gallery}
    expected = sorted(position, key=position.get)
    assert rank(q, gallery).ids == expected


# --- metrics ----------------------------------------------------------------


def test_worked_examples():
    assert round(average_precision([1, 0, 1]), 4) == 0.8333
    assert round(ndcg([1, 0, 1]), 5) == 0.91972
    assert round(nmrr([1, 3], ng=2, gtm=2), 5) == 0.14286
    assert nmrr([1, 2], ng=2, gtm=2) == 0.0


def test_trivial_metric_cases():
    assert average_precision([1, 1, 0, 0]) == 1.0
    for n in range(1, 9):
        assert math.isclose(average_precision([0] * (n - 1) + [1]), 1 / n)
    assert ndcg([1, 1, 0]) == 1.0
    assert ndcg([1, 0, 0, 0]) == 1.0
    with pytest.raises(ExcludedQuery):
        average_precision([0, 0])
    with pytest.raises(ExcludedQuery):
        ndcg([0, 0])


def test_all_beyond_k_is_one():
    # ng=2, gtm=2 -> K=4; ranks past 4 and missing items both take the penalty
    assert abs(nmrr([5, 9], 2, 2) - 1.0) < 1e-12
    assert abs(nmrr([], 3, 5) - 1.0) < 1e-12


def relevance_patterns(max_n=8):
    for n in range(1, max_n + 1):
        for bits in itertools.product((0, 1), repeat=n):
            if any(bits):
                yield list(bits)


def test_metrics_match_oracles_exhaustively():
    worst = 0.0
    for rel in relevance_patterns():
        worst = max(worst, abs(average_precision(rel) - ap_oracle(rel)), abs(ndcg(rel) - ndcg_oracle(rel)))
        ranks = [k + 1 for k, r in enumerate(rel) if r]
        for gtm in range(len(ranks), 9):
            got = nmrr(ranks, len(ranks), gtm)
            worst = max(worst, abs(got - nmrr_oracle(ranks, len(ranks), gtm)))
            assert 0.0 <= got <= 1.0
    assert worst <= 1e-12


def test_ndcg_cutoff():
    rel = [0, 0, 1, 1]
    assert ndcg(rel, cutoff=2) == 0.0
    assert math.isclose(ndcg(rel, cutoff=3), (1 / 2) / (1 + 1 / math.log2(3)))


# --- evaluate -----------------------------------------------------------------


def test_self_retrieval_is_perfect():
    rng = Rng(1)
    centers = rng.normal((3, 6))
    queries = [desc(centers[k % 3] + 1e-3 * rng.normal(6), f"q{k}", f"c{k % 3}") for k in range(9)]
    gallery = [desc(q.h, "dup_" + q.id, q.label) for q in queries]
    report = evaluate(queries, gallery)
    assert (report.map, report.ndcg, report.anmrr) == (100.0, 100.0, 0.0)


def test_hand_built_case():
    queries, gallery = hand_case()
    report = evaluate(queries, gallery)
    # relevance: a -> 101001, b -> 010010, c -> 000100
    ap = [(1 + 2 / 3 + 3 / 6) / 3, (1 / 2 + 2 / 5) / 2, 1 / 4]
    nd = [
        (1 + 1 / math.log2(4) + 1 / math.log2(7)) / (1 + 1 / math.log2(3) + 1 / math.log2(4)),
        (1 / math.log2(3) + 1 / math.log2(6)) / (1 + 1 / math.log2(3)),
        (1 / math.log2(5)) / 1,
    ]
    # GTM = 3; K = 6, 6, 4
    nm = [(10 / 3 - 2) / (7.5 - 2), (3.5 - 1.5) / (7.5 - 1.5), (4 - 1) / (5 - 1)]
    for row, a, n, m in zip(report.per_query, ap, nd, nm):
        assert abs(row["AP"] - a) < 1e-12
        assert abs(row["NDCG"] - n) < 1e-12
        assert abs(row["NMRR"] - m) < 1e-12
    assert report.map == round(100 * sum(ap) / 3, 2)
    assert report.anmrr == round(100 * sum(nm) / 3, 2)


def test_chance_level_against_permutation_oracle():
    rng = Rng(2)
    items = [desc(rng.normal(16), f"o{k:03d}", f"c{k % 4}") for k in range(100)]
    report = evaluate(items, items)
    rel = np.array([1] * 24 + [0] * 75)
    shuffles = [ap_oracle(list(rel[rng.uniform(99).argsort()])) for _ in range(1000)]
    chance = 100 * float(np.mean(shuffles))
    assert abs(report.map - chance) <= 3.0


def test_queries_without_relevant_targets_are_excluded(caplog):
    queries, gallery = hand_case()
    queries.append(desc([1.0, 0.0], "qz", "z"))
    with caplog.at_level(logging.WARNING):
        report = evaluate(queries, gallery)
    assert report.excluded == ["qz"] and report.n_queries == 3
    assert "qz" in caplog.text
    with pytest.raises(DataError):
        evaluate(queries, [])


def test_anmrr_average():
    assert math.isclose(anmrr([[1, 3], [1]], [2, 1]), (nmrr([1, 3], 2, 2) + nmrr([1], 1, 2)) / 2)


# --- open-set split validation ------------------------------------------------


def test_validator(small_dataset):
    assert validate_open_set_split(small_dataset).ok

    ds, _, _ = dataio.generate(dataio.SynthConfig(seen=2, unseen=2, items_per_class=4, views=2, dim=8))
    leaked = ds.train[0].label
    ds.query[0].label = leaked
    report = validate_open_set_split(ds)
    assert not report.ok and any(leaked in v for v in report.violations)
    with pytest.raises(DataError, match=leaked):
        report.raise_if_invalid()

    ds, _, _ = dataio.generate(dataio.SynthConfig(seen=2, unseen=2, items_per_class=4, views=2, dim=8))
    ds.target = []
    assert any("target" in v for v in validate_open_set_split(ds).violations)
