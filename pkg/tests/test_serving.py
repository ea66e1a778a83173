import logging

import pytest

from conftest import FakeClock, FakePolicy
from qrewrite.serving import DEFAULT_TTL, CacheEntry, RewriteCache, RewriteServer, cache_key, serve_rewrites

BEAMS = {
    "kappa bag": [("a", 1, True), ("b", 0, True), ("c", 1, True), ("d", 1, True), ("e", 1, True)],
    "nothing": [("x", 0, True)],
}


def server(clock=None, ttl=100.0, **kw):
    clock = clock or FakeClock()
    pol = FakePolicy(BEAMS)
    return RewriteServer(pol, RewriteCache(ttl, clock, **kw)), pol, clock


def test_hit_within_ttl_decodes_nothing():
    srv, pol, clock = server()
    first = srv.serve("kappa bag")
    clock.advance(99.0)
    assert srv.serve("Kappa  BAG") == first
    assert (srv.decodes, srv.hits, pol.generate_calls) == (1, 1, 1)


def test_expiry_triggers_a_fresh_decode():
    srv, pol, clock = server()
    srv.serve("kappa bag")
    clock.advance(100.0)
    srv.serve("kappa bag")
    assert srv.decodes == 2 and pol.generate_calls == 2
    assert srv.cache.get("kappa bag").created_at == clock.now


def test_top_three_tag_one_rewrites_in_beam_order():
    srv, _, _ = server()
    assert srv.serve("kappa bag") == ["a", "c", "d"]


def test_empty_result_is_cached_too():
    srv, pol, _ = server()
    assert srv.serve("nothing") == []
    assert srv.serve("nothing") == []
    assert pol.generate_calls == 1


def test_untagged_policy_is_rejected():
    with pytest.raises(ValueError):
        RewriteServer(FakePolicy({}, tagged=False), RewriteCache())


def test_entries_hold_at_most_three_rewrites():
    with pytest.raises(ValueError):
        CacheEntry("q", ("a", "b", "c", "d"), 0.0)


def test_ttl_must_be_positive():
    with pytest.raises(ValueError):
        RewriteCache(ttl=0)
    assert DEFAULT_TTL == 14 * 24 * 3600


def test_cache_key_normalises_case_and_spacing():
    assert cache_key("  Kappa   Bag ") == cache_key("kappa bag")


def test_persistence_round_trip(tmp_path):
    clock = FakeClock()
    path = tmp_path / "cache.tsv"
    cache = RewriteCache(100.0, clock, "m1", path)
    cache.put("kappa bag", ["a", "c"])
    cache.put("nothing", [])
    cache.save()
    again = RewriteCache(100.0, clock, "m1", path)
    assert len(again) == 2
    assert again.get("kappa bag").rewrites == ("a", "c")
    assert again.get("nothing").rewrites == ()


def test_model_change_drops_entries(tmp_path, caplog):
    clock = FakeClock()
    path = tmp_path / "cache.tsv"
    cache = RewriteCache(100.0, clock, "m1", path)
    cache.put("kappa bag", ["a"])
    cache.save()
    with caplog.at_level(logging.INFO):
        assert len(RewriteCache(100.0, clock, "m2", path)) == 0
    assert "m1" in caplog.text
    cache.invalidate("m1")
    assert len(cache) == 1
    cache.invalidate("m2")
    assert len(cache) == 0 and cache.model_hash == "m2"


def test_file_without_header_is_rejected(tmp_path):
    path = tmp_path / "cache.tsv"
    path.write_text("kappa bag\t0.0\ta\n")
    with pytest.raises(ValueError, match="header"):
        RewriteCache(path=path)


def test_serve_rewrites_helper_shares_the_cache():
    clock = FakeClock()
    cache = RewriteCache(100.0, clock)
    pol = FakePolicy(BEAMS)
    assert serve_rewrites(pol, "kappa bag", cache) == ["a", "c", "d"]
    assert serve_rewrites(pol, "kappa bag", cache) == ["a", "c", "d"]
    assert pol.generate_calls == 1


def test_real_policy_serves_only_tag_one(world):
    srv = RewriteServer(world.policy, RewriteCache(clock=FakeClock()))
    for rec in world.bundle.recall_eval[:10]:
        served = srv.serve(rec.query)
        outs = world.policy.generate(cache_key(rec.query), 10, 16)
        first_tag = {}
        for o in outs:
            if o.well_formed:
                first_tag.setdefault(o.rewrite, o.tag)
        assert len(served) <= 3
        assert all(first_tag[r] == 1 for r in served)
