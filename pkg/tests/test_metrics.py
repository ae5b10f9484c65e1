import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from amsnet.errors import InputError
from amsnet.metrics import (average_precision, average_reports, random_ranking_map,
                            retrieval_eval)
from amsnet.oracles import retrieval_enumerate


def random_instance(rng, max_items=20):
    G = int(rng.integers(2, max_items - 2))
    Q = int(rng.integers(1, max_items - G + 1))
    gids = rng.integers(0, 4, size=G)
    qids = rng.choice(gids, size=Q)
    dim = int(rng.integers(1, 4))
    # small integer grid so exact distance ties occur
    q = rng.integers(-2, 3, size=(Q, dim)).astype(float)
    g = rng.integers(-2, 3, size=(G, dim)).astype(float)
    return q, qids, g, gids


def test_enumeration_oracle_exact():
    rng = np.random.default_rng(77)
    for _ in range(50):
        q, qids, g, gids = random_instance(rng)
        assert len(q) + len(g) <= 20
        rep = retrieval_eval(q, qids, g, gids)
        aps, cmc = retrieval_enumerate(q, qids, g, gids)
        assert rep.per_query_ap.tolist() == aps
        assert rep.cmc.tolist() == cmc


def test_average_precision_examples():
    assert average_precision(np.array([1, 0, 1, 0], bool)) == pytest.approx((1 + 2 / 3) / 2)
    assert average_precision(np.array([0, 0, 1], bool)) == pytest.approx(1 / 3)
    assert average_precision(np.array([0, 0], bool)) == 0.0


def test_perfect_embeddings():
    ids = np.repeat(np.arange(5), 4)
    emb = np.eye(5)[ids] * 10
    rep = retrieval_eval(emb[::2], ids[::2], emb[1::2], ids[1::2])
    assert rep.map == 1.0 and rep.rank(1) == 1.0


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2 ** 31))
def test_cmc_monotone_and_bounded(seed):
    q, qids, g, gids = random_instance(np.random.default_rng(seed))
    rep = retrieval_eval(q, qids, g, gids)
    assert np.all(np.diff(rep.cmc) >= 0)
    assert rep.cmc[-1] == 1.0
    assert np.all((rep.per_query_ap > 0) & (rep.per_query_ap <= 1))
    assert rep.rank(len(g) + 5) == 1.0


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2 ** 31))
def test_orthogonal_and_translation_invariance(seed):
    rng = np.random.default_rng(seed)
    gids = np.repeat(np.arange(4), 3)
    g = rng.normal(size=(12, 5))
    q = rng.normal(size=(4, 5))
    qids = np.arange(4)
    Q, _ = np.linalg.qr(rng.normal(size=(5, 5)))
    t = rng.normal(size=5)
    a = retrieval_eval(q, qids, g, gids)
    b = retrieval_eval(q @ Q + t, qids, g @ Q + t, gids)
    assert abs(a.map - b.map) < 1e-9
    assert np.array_equal(a.cmc, b.cmc)


def test_random_ranking_map_matches_random_embeddings():
    G, R, Q = 40, 4, 50
    gids = np.repeat(np.arange(G // R), R)
    maps = []
    for seed in range(20):
        rng = np.random.default_rng(seed)
        qids = rng.choice(np.unique(gids), size=Q)
        rep = retrieval_eval(rng.normal(size=(Q, 8)), qids, rng.normal(size=(G, 8)), gids)
        maps.append(rep.map)
    expected = random_ranking_map(G, R)
    sem = np.std(maps, ddof=1) / np.sqrt(len(maps))
    assert abs(np.mean(maps) - expected) < 3 * sem + 1e-3


def test_random_ranking_map_by_enumeration():
    # exact expectation over all placements of R relevant items among G
    from itertools import combinations
    G, R = 7, 3
    aps = []
    for pos in combinations(range(G), R):
        rel = np.zeros(G, bool)
        rel[list(pos)] = True
        aps.append(average_precision(rel))
    assert random_ranking_map(G, R) == pytest.approx(np.mean(aps), abs=1e-12)
    assert random_ranking_map(1, 1) == 1.0


def test_missing_identity_rejected():
    with pytest.raises(InputError):
        retrieval_eval(np.zeros((1, 2)), [9], np.zeros((2, 2)), [0, 1])


def test_average_reports_pools_queries():
    rng = np.random.default_rng(0)
    g, gids = rng.normal(size=(6, 2)), np.array([0, 0, 1, 1, 2, 2])
    a = retrieval_eval(rng.normal(size=(2, 2)), [0, 1], g, gids)
    b = retrieval_eval(rng.normal(size=(3, 2)), [2, 1, 0], g, gids)
    m = average_reports([a, b])
    assert m.map == pytest.approx(np.concatenate([a.per_query_ap, b.per_query_ap]).mean())
    assert np.allclose(m.cmc, (a.cmc + b.cmc) / 2)
    with pytest.raises(InputError):
        average_reports([])


def test_serialisation(tmp_path):
    rng = np.random.default_rng(1)
    rep = retrieval_eval(rng.normal(size=(3, 2)), [0, 1, 1], rng.normal(size=(5, 2)), [0, 1, 0, 1, 2])
    data = json.loads(rep.to_json(tmp_path / "r.json", max_rank=3))
    assert set(data) == {"map", "cmc", "per_query_ap"} and len(data["cmc"]) == 3
    assert json.loads((tmp_path / "r.json").read_text()) == data
    lines = rep.to_csv(tmp_path / "r.csv").splitlines()
    assert lines[0] == "k,cmc" and len(lines) == 6
    assert float(lines[1].split(",")[1]) == rep.rank(1)
