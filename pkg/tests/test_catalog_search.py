import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import oracles
from qrewrite.catalog import Catalog, CatalogConfig, Product, generate_catalog, tokenize
from qrewrite.search import (
    ClickSet,
    OfflineSearchEngine,
    RecallItem,
    RecallSet,
    build_index,
    retrieve,
    simulate_clicks,
)


def make_catalog(titles, synonyms=None):
    products = [Product(i, t, tuple(tokenize(t)), {"title": t}) for i, t in enumerate(titles)]
    table = {k: frozenset(v) for k, v in (synonyms or {}).items()}
    return Catalog(products, table, seed=0)


# -- tokenize -----------------------------------------------------------------


@pytest.mark.parametrize(
    "text, expected",
    [("Kappa School-Bag", ["kappa", "school", "bag"]), ("", []), ("NB  down jacket", ["nb", "down", "jacket"])],
)
def test_tokenize_examples(text, expected):
    assert tokenize(text) == expected


@given(st.text())
def test_tokenize_is_lowercase_and_separator_free(text):
    toks = tokenize(text)
    assert toks == tokenize(text)
    for t in toks:
        assert t and t == t.lower()
        assert all(ch.isalnum() for ch in t)


# -- generate_catalog ------------------------------------------------------------


def test_grammar_product_cardinality():
    cat = generate_catalog(CatalogConfig(n_brands=2, n_modifiers=1, n_categories=2, seed=7))
    assert len(cat) == 4
    assert sorted(p.id for p in cat.products) == [0, 1, 2, 3]
    for p in cat.products:
        assert p.tokens == tuple(tokenize(p.title))
        assert set(p.attributes) == {"brand", "modifier", "category"}


def test_same_seed_serializes_identically(tmp_path):
    cfg = CatalogConfig(3, 2, 4, seed=7)
    blobs = []
    for run in range(2):
        cat = generate_catalog(cfg)
        cat.save(tmp_path / f"c{run}.tsv", tmp_path / f"s{run}.tsv")
        blobs.append(((tmp_path / f"c{run}.tsv").read_bytes(), (tmp_path / f"s{run}.tsv").read_bytes()))
    assert blobs[0] == blobs[1]


def test_save_load_round_trip(tmp_path):
    cat = generate_catalog(CatalogConfig(3, 2, 4, seed=5))
    cat.save(tmp_path / "c.tsv", tmp_path / "s.tsv")
    back = Catalog.load(tmp_path / "c.tsv", tmp_path / "s.tsv", seed=5)
    assert back.products == cat.products
    assert back.synonym_table == cat.synonym_table
    assert back.slot_tokens == cat.slot_tokens


def test_synonym_fraction_creates_a_lexical_gap():
    cat = generate_catalog(CatalogConfig(3, 3, 3, synonym_fraction=0.5, seed=11))
    titles = set(cat.title_vocabulary())
    # every alias is a surface form that appears in no title
    aliases = [a for tok, syns in cat.synonym_table.items() if tok in titles for a in syns]
    assert aliases
    assert all(a not in titles for a in aliases)


@given(st.integers(1, 4), st.integers(1, 4), st.integers(1, 4), st.floats(0, 1), st.integers(0, 10_000))
@settings(max_examples=30, deadline=None)
def test_synonym_relation_is_symmetric(nb, nm, nc, frac, seed):
    cat = generate_catalog(CatalogConfig(nb, nm, nc, frac, seed))
    for tok, syns in cat.synonym_table.items():
        for s in syns:
            assert tok in cat.synonym_table[s]


def test_empty_grammar_is_rejected():
    with pytest.raises(ValueError, match="empty grammar"):
        generate_catalog(CatalogConfig(0, 1, 1))


# -- build_index -----------------------------------------------------------------


def test_single_document_index():
    idx = build_index(make_catalog(["red cup"]))
    assert idx.postings == {"cup": [(0, 1)], "red": [(0, 1)]}
    assert idx.doc_lengths == {0: 2}


def test_duplicate_token_counts_twice():
    idx = build_index(make_catalog(["cup red cup"]))
    assert idx.postings["cup"] == [(0, 2)]


def test_empty_catalog_cannot_be_indexed():
    with pytest.raises(ValueError):
        build_index(make_catalog([]))


@pytest.mark.parametrize("seed", range(5))
def test_index_matches_brute_force_postings(seed):
    cat = generate_catalog(CatalogConfig(4, 5, 5, seed=seed))
    assert len(cat) <= 100
    idx = build_index(cat)
    assert idx.postings == oracles.postings({p.id: p.title for p in cat.products})
    for plist in idx.postings.values():
        assert [pid for pid, _ in plist] == sorted(pid for pid, _ in plist)
    assert idx.avg_doc_length == sum(idx.doc_lengths.values()) / len(idx.doc_lengths)


# -- retrieve ----------------------------------------------------------------------

TOY_TITLES = [
    "red cup", "blue cup", "red red mug", "green bowl", "blue bowl large",
    "cup holder", "tea cup red", "mug", "large red bowl", "blue tea mug",
]


def test_no_match_is_empty():
    idx = build_index(make_catalog(TOY_TITLES))
    assert retrieve(idx, "zebra", 5).items == ()


def test_exact_unique_title_ranks_first():
    cat = generate_catalog(CatalogConfig(3, 3, 3, seed=2))
    idx = build_index(cat)
    for p in cat.products:
        assert retrieve(idx, p.title, 10).items[0].product_id == p.id


def test_k_must_be_positive():
    idx = build_index(make_catalog(TOY_TITLES))
    with pytest.raises(ValueError):
        retrieve(idx, "cup", 0)


@given(st.lists(st.sampled_from(["red", "blue", "cup", "mug", "bowl", "tea", "large", "green", "zebra", "holder"]),
                max_size=4), st.integers(1, 12))
def test_retrieve_matches_exhaustive_scoring(words, k):
    titles = dict(enumerate(TOY_TITLES))
    idx = build_index(make_catalog(TOY_TITLES))
    query = " ".join(words)
    rs = retrieve(idx, query, k)
    assert rs.ids == oracles.bm25_rank(titles, query, k)
    # contract: ranks dense from 1, scores non-increasing, ties by id, every hit shares a token
    assert [it.rank for it in rs.items] == list(range(1, len(rs) + 1))
    assert len(rs) <= k
    for a, b in zip(rs.items, rs.items[1:]):
        assert a.score > b.score or (a.score == b.score and a.product_id < b.product_id)
    for it in rs.items:
        assert set(tokenize(TOY_TITLES[it.product_id])) & set(tokenize(query))
    assert retrieve(idx, query, k) == rs


# -- simulate_clicks ------------------------------------------------------------------


def test_empty_recall_gives_no_clicks():
    cat = make_catalog(TOY_TITLES)
    assert simulate_clicks(cat, "cup", RecallSet("cup", (), 10), seed=1).clicks == ()


def test_zero_relevance_gives_no_clicks():
    cat = make_catalog(TOY_TITLES)
    # a recall set whose items share nothing with the query text
    rs = RecallSet("zebra", (RecallItem(0, 1.0, 1), RecallItem(3, 0.5, 2)), 10)
    for seed in range(20):
        assert simulate_clicks(cat, "zebra", rs, seed).clicks == ()


def test_clicks_are_deterministic_and_consistent():
    cat = make_catalog(TOY_TITLES)
    idx = build_index(cat)
    for q in ["red cup", "blue bowl", "tea mug"]:
        rs = retrieve(idx, q, 10)
        a = simulate_clicks(cat, q, rs, seed=4)
        assert a == simulate_clicks(cat, q, rs, seed=4)
        ids = [pid for pid, _ in a.clicks]
        assert len(set(ids)) == len(ids)
        for pid, pos in a.clicks:
            assert rs.rank_of(pid) == pos


def test_click_rate_follows_relevance_and_position():
    cat = make_catalog(["red cup"])
    rs = RecallSet("red cup", (RecallItem(0, 1.0, 1),), 10)
    # relev 1 at rank 1 -> always clicked
    assert all(simulate_clicks(cat, "red cup", rs, s).ids == [0] for s in range(30))
    rs2 = RecallSet("red cup", (RecallItem(0, 1.0, 2),), 10)
    rate = np.mean([bool(simulate_clicks(cat, "red cup", rs2, s).clicks) for s in range(2000)])
    assert abs(rate - 0.5) < 0.05


def test_engine_click_log_errors_name_the_query():
    eng = OfflineSearchEngine(make_catalog(TOY_TITLES))
    with pytest.raises(KeyError, match="red cup"):
        eng.clicks("red cup")
    eng.click_log["red cup"] = ClickSet("red cup", ())
    assert eng.clicks("red cup").clicks == ()


def test_result_page_expands_synonyms():
    cat = make_catalog(["kappa school bag", "other thing"], {"backpack": {"bag"}, "bag": {"backpack"}})
    eng = OfflineSearchEngine(cat)
    assert eng.retrieve("backpack").items == ()
    assert eng.result_page("backpack").ids == [0]
