import csv
import io
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.stats import rankdata

from nmcdr.evaluation import candidate_lists, evaluate, evaluate_scores, rank_metrics
from nmcdr.model import AblationFlags, ModelConfig, init_params
from nmcdr.stability import CompressedModel, compress, op_norm, random_model, stability_check

from oracles import random_params, tiny_world


# -- rank metrics --------------------------------------------------------------------

def test_positive_on_top():
    s = np.linspace(0, 1, 200)[::-1]
    assert rank_metrics(s, 0) == (1, 1.0, 1.0)


def test_rank_eleven_is_a_miss():
    s = np.zeros(200)
    s[:10] = 2.0
    s[10] = 1.0
    assert rank_metrics(s, 10) == (0, 0.0, 11.0)


def test_rank_two():
    s = np.zeros(200)
    s[5], s[0] = 3.0, 2.0
    hit, ndcg, rank = rank_metrics(s, 0)
    assert (hit, rank) == (1, 2.0) and abs(ndcg - 0.6309297535714574) < 1e-15


def test_ties_count_half():
    s = np.zeros(200)
    s[:3] = 1.0
    assert rank_metrics(s, 0)[2] == 2.0
    assert rank_metrics(np.zeros(200), 0)[2] == 100.5


def test_duplicate_candidates_rejected():
    with pytest.raises(ValueError, match="duplicate"):
        rank_metrics(np.zeros(3), 0, candidate_ids=[4, 7, 4])
    with pytest.raises(IndexError):
        rank_metrics(np.zeros(3), 3)


def brute_force(scores, pos, k=10):
    # average rank of the positive in a descending sort, ties shared
    rank = rankdata(-np.asarray(scores), method="average")[pos]
    return (int(rank <= k), 1.0 / math.log2(rank + 1) if rank <= k else 0.0, float(rank))


def test_metrics_match_sort_based_oracle_on_fifty_users():
    rng = np.random.default_rng(0)
    for _ in range(50):
        s = np.round(rng.normal(size=200), 1)  # coarse rounding forces ties
        pos = int(rng.integers(200))
        assert rank_metrics(s, pos) == brute_force(s, pos)


@settings(max_examples=60, deadline=None)
@given(st.lists(st.integers(-3, 3), min_size=200, max_size=200), st.integers(0, 199),
       st.floats(-1e3, 1e3, allow_nan=False))
def test_shift_invariance(scores, pos, c):
    s = np.asarray(scores, dtype=float)
    a = rank_metrics(s, pos)
    assert a == rank_metrics(s + c, pos) == brute_force(s, pos)
    assert 0.0 <= a[1] <= 1.0


# -- evaluate ------------------------------------------------------------------------

@pytest.fixture(scope="module")
def uniform_world():
    return tiny_world(n_users=(600, 600), n_items=(300, 300), n_shared=300, seed=5,
                      deg_range=(4, 8), k_head=5)


def _split_counts(sp):
    return [len(s.test_users()) for s in sp.domains]


def test_candidates_are_positive_plus_distinct_unseen(uniform_world):
    ds, sp, _ = uniform_world
    users, cands, skipped = candidate_lists(ds, sp, 0, seed=1)
    assert skipped == 0 and cands.shape == (len(users), 200)
    for u, row in zip(users[:50], cands[:50]):
        assert row[0] == sp.domains[0].test_item[u]
        assert len(set(row.tolist())) == 200
        assert not set(row[1:].tolist()) & set(ds.domains[0].user_items(u).tolist())


def test_oracle_scores_give_perfect_metrics(uniform_world):
    ds, sp, _ = uniform_world
    test_item = [s.test_item for s in sp.domains]
    rep = evaluate_scores(lambda d, u, i: (i == test_item[d][u]).astype(float), ds, sp, 0)
    for d in rep.domains.values():
        assert d.hr == 1.0 and d.ndcg == 1.0


def test_untrained_model_hit_rate_is_chance(uniform_world):
    ds, sp, setup = uniform_world
    cfg = ModelConfig(dim=8, d_hge=8, d_igm=8, d_cgm=8, d_ref=8, mlp_hidden=(16, 8))
    p = init_params(cfg, (600, 600), (300, 300), np.random.default_rng(3))
    rep = evaluate(p, setup.context, AblationFlags(), ds, sp, seed=0)
    for d, n in zip(rep.domains.values(), _split_counts(sp)):
        assert d.users == n >= 500
        sigma = math.sqrt(0.05 * 0.95 / n)
        assert abs(d.hr - 0.05) <= 3 * sigma, d.hr


def test_report_is_deterministic_and_records_flags(uniform_world):
    ds, sp, setup = uniform_world
    p = random_params(ds, dim=4, hidden=(6, 4), seed=2)
    flags = AblationFlags.variant("w/o-Cgm")
    a = evaluate(p, setup.context, flags, ds, sp, seed=4, metadata={"checkpoint": "x"})
    b = evaluate(p, setup.context, flags, ds, sp, seed=4, metadata={"checkpoint": "x"})
    assert a.to_json() == b.to_json() and a.per_user_csv() == b.per_user_csv()
    meta = a.to_dict()["metadata"]
    assert meta["flags"]["use_inter_matching"] is False and meta["checkpoint"] == "x"
    rows = list(csv.DictReader(io.StringIO(a.per_user_csv())))
    assert len(rows) == sum(_split_counts(sp))
    z = [float(r["ndcg"]) for r in rows if r["domain"] == "Z"]
    assert abs(np.mean(z) - a.domains["Z"].ndcg) < 1e-12


def test_users_without_enough_negatives_are_skipped():
    ds, sp, _ = tiny_world(seed=0)
    rep = evaluate_scores(lambda d, u, i: np.zeros(len(u)), ds, sp, 0)
    for d, n in zip(rep.domains.values(), _split_counts(sp)):
        assert d.users == 0 and d.skipped == n


# -- stability -----------------------------------------------------------------------

def test_operator_norm_matches_svd():
    rng = np.random.default_rng(0)
    for shape in [(3, 5), (8, 8), (2, 16)]:
        w = rng.normal(size=shape)
        assert abs(op_norm(w) - np.linalg.norm(w, 2)) < 1e-8 * np.linalg.norm(w, 2)
    assert op_norm(np.zeros((3, 3))) == 0.0


def _zero_model(n=4, d=3):
    z = np.zeros
    return CompressedModel(z((d, d)), z((d, d)), z(d), z((d, d)), z((d, d)), z(d), z((2, 2 * d)), z(2),
                           [np.array([(i + 1) % n]) for i in range(n)])


def test_zero_weights_zero_bound_and_no_movement():
    m = _zero_model()
    assert m.gamma_hat(0) == 0.0
    x = np.random.default_rng(1).normal(size=(4, 3))
    xp = x.copy()
    xp[0] += 5.0
    assert np.array_equal(m.output(x, 0, 2), m.output(xp, 0, 2))
    diag = stability_check(m, trials=20)
    assert diag.gamma_hat == 0.0 and diag.empirical_ratio == 0.0 and diag.within_bound


def test_identity_weights_two_nodes():
    d = 3
    eye = np.eye(d)
    m = CompressedModel(eye, eye, np.zeros(d), eye, eye, np.zeros(d),
                        np.hstack([eye, np.zeros((d, d))]), np.zeros(d), [np.array([1]), np.array([0])])
    assert abs(m.gamma_hat(0) - 2.0) < 1e-12
    assert abs(m.gamma_hat(0, c_sf=0.5, c_sp=0.5) - 0.25) < 1e-12


def test_ten_node_random_instance_within_bound():
    m = random_model(np.random.default_rng(7))
    diag = stability_check(m, trials=1000, seed=3)
    assert diag.within_bound and 0 < diag.empirical_ratio <= diag.gamma_hat
    assert diag.details["v"] not in m.neighbors[0].tolist()


def test_stability_check_deterministic_and_validates():
    m = random_model(np.random.default_rng(8))
    assert stability_check(m, trials=50, seed=1) == stability_check(m, trials=50, seed=1)
    single = CompressedModel(*[np.zeros((2, 2))] * 2, np.zeros(2), *[np.zeros((2, 2))] * 2, np.zeros(2),
                             np.zeros((2, 4)), np.zeros(2), [np.array([], dtype=int)])
    with pytest.raises(ValueError):
        stability_check(single)
    with pytest.raises(ValueError):
        single.gamma_hat(0)


def test_compressed_trained_weights_within_bound():
    cfg = ModelConfig(dim=6, d_hge=6, d_igm=6, d_cgm=6, d_ref=6, mlp_hidden=(5, 3))
    p = init_params(cfg, (4, 4), (5, 5), np.random.default_rng(0))
    m = compress(p, "Zbar")
    assert m.W_a3.shape == (5, 12) and m.n_nodes == 10
    assert stability_check(m, trials=200).within_bound
