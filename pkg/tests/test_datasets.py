import pytest
from hypothesis import given
from hypothesis import strategies as st

from qrewrite.catalog import Catalog, CatalogConfig, Product, generate_catalog, tokenize
from qrewrite.datasets import (
    DataConfig,
    MalformedRecord,
    QueryRewritePair,
    SynonymRewriter,
    TaggedExample,
    assign_tags,
    build_datasets,
    build_eval_datasets,
    build_rl_dataset,
    click_filter,
    collect_pairs,
    parse_sft_record,
    read_recall_eval,
    read_rl,
    read_sft,
    read_tagging_eval,
    relevance_tag,
    render_sft_record,
    sample_queries,
    write_recall_eval,
    write_rl,
    write_sft,
    write_tagging_eval,
)
from qrewrite.relevance import aggregate_relevance
from qrewrite.search import ClickSet, OfflineSearchEngine


def kappa_catalog():
    titles = ["kappa school bag", "kappa red cup", "nb down jacket", "nb school bag"]
    products = [Product(i, t, tuple(tokenize(t)), {"t": t}) for i, t in enumerate(titles)]
    syn = {"bag": frozenset({"backpack"}), "backpack": frozenset({"bag"})}
    return Catalog(products, syn, 0, {"brand": ("kappa", "nb"), "category": ("bag", "cup", "jacket")})


# -- collect_pairs ------------------------------------------------------------


def test_synonym_rewrite_is_collected():
    rw = SynonymRewriter(kappa_catalog(), confusion_rate=0.0, swap_rate=1.0)
    rewrites = [p.rewrite for p in collect_pairs(rw, ["kappa backpack"], 4)]
    assert "kappa bag" in rewrites
    assert rewrites[0] == "kappa backpack"


def test_query_without_synonyms_gets_identity_only():
    rw = SynonymRewriter(kappa_catalog())
    pairs = collect_pairs(rw, ["nb jacket"], 5)
    assert [p.rewrite for p in pairs] == ["nb jacket"]


def test_collect_pairs_is_deterministic():
    cat = generate_catalog(CatalogConfig(4, 3, 5, seed=1))
    queries = [q for q, _ in sample_queries(cat, 40, seed=2)]
    a = collect_pairs(SynonymRewriter(cat, seed=9), queries, 4)
    b = collect_pairs(SynonymRewriter(cat, seed=9), queries, 4)
    assert a == b
    for q in queries:
        rewrites = [p.rewrite for p in a if p.query == q]
        assert 1 <= len(rewrites) <= 4
        assert len(set(rewrites)) == len(rewrites)


def test_collect_pairs_needs_positive_count():
    with pytest.raises(ValueError):
        collect_pairs(SynonymRewriter(kappa_catalog()), ["kappa bag"], 0)


# -- click_filter -----------------------------------------------------------------


def test_click_filter_keeps_hits_and_drops_misses():
    eng = OfflineSearchEngine(kappa_catalog())
    clicks = {"kappa backpack": ClickSet("kappa backpack", ((0, 1),))}
    pairs = [
        QueryRewritePair("kappa backpack", "kappa bag"),
        QueryRewritePair("kappa backpack", "zebra"),
    ]
    assert click_filter(pairs, eng, clicks) == pairs[:1]


def test_click_filter_names_missing_query():
    eng = OfflineSearchEngine(kappa_catalog())
    with pytest.raises(KeyError, match="kappa backpack"):
        click_filter([QueryRewritePair("kappa backpack", "kappa bag")], eng, {})


def test_click_filter_matches_brute_force(world):
    eng, b = world.engine, world.bundle
    queries = sorted(b.click_sets)[:10]
    pairs = collect_pairs(SynonymRewriter(world.catalog, seed=1), queries, 2)[:20]
    got = click_filter(pairs, eng, b.click_sets)
    expected = []
    for p in pairs:
        hit = False
        for pid in [it.product_id for it in eng.retrieve(p.rewrite).items]:
            for cid, _ in b.click_sets[p.query].clicks:
                hit = hit or pid == cid
        if hit:
            expected.append(p)
    assert got == expected
    assert len(got) <= len(pairs)


# -- assign_tags -------------------------------------------------------------------


def test_tag_threshold_is_strict(monkeypatch):
    import qrewrite.datasets as ds

    eng = OfflineSearchEngine(kappa_catalog())
    for value, tag in [(0.72, 1), (0.0, 0), (0.2, 0), (0.2000001, 1)]:
        monkeypatch.setattr(ds, "aggregate_relevance", lambda *a, v=value, **k: v)
        assert relevance_tag("q", "r", eng, 0.2, 4) == tag


def test_assign_tags_reproduces_stored_tags(world):
    b, eng = world.bundle, world.engine
    again = assign_tags([QueryRewritePair(e.query, e.rewrite) for e in b.sft], eng, 0.2, 4)
    assert again == b.sft
    for e in b.sft:
        score = aggregate_relevance(e.query, eng.retrieve(e.rewrite), eng.catalog, 4)
        assert e.tag == int(score > 0.2)


def test_assign_tags_rejects_bad_tau():
    with pytest.raises(ValueError):
        assign_tags([], OfflineSearchEngine(kappa_catalog()), tau=1.5)


def test_empty_recall_rewrite_is_tagged_zero():
    eng = OfflineSearchEngine(kappa_catalog())
    assert assign_tags([QueryRewritePair("kappa bag", "zebra")], eng)[0].tag == 0


# -- SFT template --------------------------------------------------------------------


def test_render_matches_template_row():
    text = render_sft_record(TaggedExample("Kappa school bag", "Kappa backpack", 1))
    assert text == (
        "The synonymous search term and its corresponding relevance tag for Kappa school bag "
        "are Kappa backpack <|sep|> 1"
    )


TEXT = st.text(alphabet="abcdefgh XYZ-", min_size=1, max_size=20).map(str.strip).filter(bool)


@given(TEXT, TEXT, st.integers(0, 1))
def test_render_parse_round_trip(q, r, t):
    ex = TaggedExample(q, r, t)
    assert parse_sft_record(render_sft_record(ex)) == ex


@pytest.mark.parametrize("text", [
    "The synonymous search term and its corresponding relevance tag for a are b <|sep|> 2",
    "The synonymous search term and its corresponding relevance tag for a are b 1",
    "something else entirely",
])
def test_parse_rejects_malformed(text):
    with pytest.raises(MalformedRecord):
        parse_sft_record(text)


# -- RL dataset -----------------------------------------------------------------------


def test_rl_dataset_dedups_queries_and_drops_clickless():
    eng = OfflineSearchEngine(kappa_catalog())
    tagged = [TaggedExample("kappa backpack", r, 1) for r in ("kappa bag", "kappa backpack", "bag")]
    tagged.append(TaggedExample("nb jacket", "nb jacket", 1))
    clicks = {"kappa backpack": ClickSet("kappa backpack", ((0, 1), (3, 2))), "nb jacket": ClickSet("nb jacket", ())}
    recs = build_rl_dataset(tagged, eng, seed=0, click_sets=clicks)
    assert [r.query for r in recs] == ["kappa backpack"]
    assert recs[0].click_product_ids == (0, 3)
    assert recs[0].click_positions == {0: 1, 3: 2}


def test_rl_record_count_equals_distinct_clicked_queries(world):
    b, eng = world.bundle, world.engine
    expected = {e.query for e in b.sft if b.click_sets[e.query].clicks and eng.retrieve(e.query).items}
    assert len(b.rl) == len(expected)
    assert all(r.click_product_ids for r in b.rl)


def test_rl_dataset_needs_examples():
    with pytest.raises(ValueError):
        build_rl_dataset([], OfflineSearchEngine(kappa_catalog()), 0)


# -- evaluation splits ------------------------------------------------------------------


def test_eval_splits_are_disjoint_and_shaped(world):
    b = world.bundle
    train = {e.query for e in b.sft} | set(b.click_sets)
    assert {r.query for r in b.recall_eval} & train == set()
    assert {r.query for r in b.tagging_eval} & train == set()
    assert all(isinstance(r.clicked_product_id, int) for r in b.recall_eval)
    assert all(r.tag in (0, 1) for r in b.tagging_eval)


def test_eval_builder_drops_training_queries_and_is_deterministic():
    cat = generate_catalog(CatalogConfig(4, 3, 5, seed=1))
    eng = OfflineSearchEngine(cat)
    pool = sample_queries(cat, 30, seed=5)
    train = [q for q, _ in pool[:10]]
    rw = SynonymRewriter(cat, seed=5)
    a = build_eval_datasets(cat, eng, pool, rw, train_queries=train, seed=5)
    assert a == build_eval_datasets(cat, eng, pool, rw, train_queries=train, seed=5)
    assert {r.query for r in a[1]} == {q for q, _ in pool[10:]}


# -- full build and files --------------------------------------------------------------------


def test_build_is_deterministic_and_sound():
    cat = generate_catalog(CatalogConfig(4, 3, 5, seed=2))
    cfg = DataConfig(n_train_queries=80, n_eval_queries=20)
    a = build_datasets(OfflineSearchEngine(cat), cfg, seed=2)
    b = build_datasets(OfflineSearchEngine(cat), cfg, seed=2)
    assert (a.sft, a.rl, a.tagging_eval, a.recall_eval) == (b.sft, b.rl, b.tagging_eval, b.recall_eval)
    eng = OfflineSearchEngine(cat)
    for e in a.sft:
        assert set(eng.retrieve(e.rewrite).ids) & set(a.click_sets[e.query].ids)
    assert a.stats["kept_pairs"] <= a.stats["collected_pairs"]
    assert len(a.sft) == a.stats["kept_pairs"]


def test_file_round_trips(world, tmp_path):
    b = world.bundle
    write_sft(tmp_path / "sft.txt", b.sft)
    assert sorted(read_sft(tmp_path / "sft.txt"), key=repr) == sorted(b.sft, key=repr)
    write_rl(tmp_path / "rl.tsv", b.rl)
    assert read_rl(tmp_path / "rl.tsv") == sorted(b.rl, key=lambda r: r.query)
    write_tagging_eval(tmp_path / "t.tsv", b.tagging_eval)
    assert read_tagging_eval(tmp_path / "t.tsv") == b.tagging_eval
    write_recall_eval(tmp_path / "r.tsv", b.recall_eval)
    assert read_recall_eval(tmp_path / "r.tsv") == b.recall_eval
    with pytest.raises(MalformedRecord):
        read_recall_eval(tmp_path / "t.tsv")
