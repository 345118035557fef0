from functools import lru_cache

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from provhunt.ingest import build_graph
from provhunt.reduce import (
    ReduceConfig,
    ReduceReport,
    collapse_directory_cascades,
    merge_network_events,
    merge_similar_files,
    name_similarity,
    reduce_all,
)

from .conftest import F, FIG4_T0, FIG4_T1, FIG4_T2, NS, P, S, ev


def lev_oracle(a: str, b: str) -> int:
    """Independent memoized-recursion edit distance."""

    @lru_cache(maxsize=None)
    def rec(i: int, j: int) -> int:
        if i == 0:
            return j
        if j == 0:
            return i
        cost = 0 if a[i - 1] == b[j - 1] else 1
        return min(rec(i - 1, j) + 1, rec(i, j - 1) + 1, rec(i - 1, j - 1) + cost)

    return rec(len(a), len(b))


def sim_oracle(a: str, b: str) -> float:
    longest = max(len(a), len(b))
    return 1.0 if longest == 0 else 1.0 - lev_oracle(a, b) / longest


# -- name_similarity ---------------------------------------------------------

def test_similarity_identical():
    assert name_similarity("mail.lock", "mail.lock") == 1.0


def test_similarity_single_edit():
    # lev("devc","devd") = 1, max length 4 -> 0.75 (oracle-confirmed)
    assert lev_oracle("devc", "devd") == 1
    assert name_similarity("devc", "devd") == pytest.approx(0.75)


def test_similarity_disjoint():
    assert lev_oracle("abc", "xyz") == 3
    assert name_similarity("abc", "xyz") == 0.0


def test_similarity_empty():
    assert name_similarity("", "") == 1.0
    assert name_similarity("", "ab") == 0.0


@given(st.text(max_size=12), st.text(max_size=12))
@settings(max_examples=200)
def test_similarity_matches_oracle_and_bounds(a, b):
    sim = name_similarity(a, b)
    assert sim == pytest.approx(sim_oracle(a, b))
    assert 0.0 <= sim <= 1.0
    assert name_similarity(b, a) == pytest.approx(sim)
    assert (sim == 1.0) == (a == b)


@given(st.text(max_size=8), st.text(max_size=8), st.text(max_size=8))
@settings(max_examples=100)
def test_edit_distance_triangle_inequality(a, b, c):
    from provhunt.reduce import levenshtein

    assert levenshtein(a, c) <= levenshtein(a, b) + levenshtein(b, c)


# -- rule 1: network merge -----------------------------------------------------

def test_network_burst_merges(fig4_events):
    g = build_graph(fig4_events[:2])
    out = merge_network_events(g, ReduceConfig())
    socket_nodes = [n for n in out.nodes.values() if n.type == "socket"]
    assert len(socket_nodes) == 1
    assert socket_nodes[0].name == "127.0.0.1:1_25"
    assert len(out.edges) == 1
    assert out.edges[0].op == "connect_read"
    assert out.edges[0].ts == FIG4_T0


def test_single_connect_unchanged():
    g = build_graph([ev(10, P("p", "x"), "connect", S("s", "1.2.3.4:80"))])
    out = merge_network_events(g, ReduceConfig())
    assert out == g


def test_connects_outside_window_stay_separate():
    p, s = P("p", "x"), S("s", "1.2.3.4:80")
    g = build_graph([ev(0, p, "connect", s), ev(10 * NS, p, "connect", s)])
    out = merge_network_events(g, ReduceConfig(net_window_ns=1 * NS))
    assert len(out.edges) == 2


def test_connects_within_window_dedupe():
    p, s = P("p", "x"), S("s", "1.2.3.4:80")
    g = build_graph([ev(0, p, "connect", s), ev(NS // 2, p, "connect", s)])
    out = merge_network_events(g, ReduceConfig(net_window_ns=1 * NS))
    assert len(out.edges) == 1
    assert out.edges[0].op == "connect"
    assert out.nodes[("socket", "s")].name == "1.2.3.4:80"


def test_unparseable_socket_untouched():
    p = P("p", "x")
    g = build_graph(
        [
            ev(0, p, "connect", S("s1", "not-an-address")),
            ev(NS // 4, p, "connect", S("s2", "also bad")),
        ]
    )
    report = ReduceReport()
    out = merge_network_events(g, ReduceConfig(), report)
    assert out == g
    assert len(report.warnings) == 2


def test_different_ips_not_merged():
    p = P("p", "x")
    g = build_graph(
        [
            ev(0, p, "connect", S("s1", "1.1.1.1:80")),
            ev(NS // 4, p, "connect", S("s2", "2.2.2.2:80")),
        ]
    )
    out = merge_network_events(g, ReduceConfig())
    assert len(out.edges) == 2


# -- rule 2: cascade collapse ---------------------------------------------------

def test_cascade_keeps_deepest(fig4_events):
    g = build_graph(fig4_events[2:5])
    out = collapse_directory_cascades(g, ReduceConfig())
    names = sorted(n.name for n in out.nodes.values() if n.type == "file")
    assert names == ["/usr/home/user/mail/sent"]
    assert len(out.edges) == 1


def test_string_prefix_not_component_prefix():
    p = P("p", "x")
    g = build_graph([ev(0, p, "open", F("a", "/a")), ev(NS, p, "open", F("ab", "/ab"))])
    out = collapse_directory_cascades(g, ReduceConfig())
    assert len(out.edges) == 2


def test_cascade_outside_window_survives():
    p = P("p", "x")
    g = build_graph(
        [ev(0, p, "open", F("d", "/a/b")), ev(600 * NS, p, "open", F("f", "/a/b/c"))]
    )
    out = collapse_directory_cascades(g, ReduceConfig(cascade_window_ns=5 * NS))
    assert len(out.edges) == 2


def test_cascade_different_processes_untouched():
    g = build_graph(
        [
            ev(0, P("p1", "x"), "open", F("d", "/a/b")),
            ev(NS, P("p2", "y"), "open", F("f", "/a/b/c")),
        ]
    )
    out = collapse_directory_cascades(g, ReduceConfig())
    assert len(out.edges) == 2


# -- rule 3: similar-file merge --------------------------------------------------

def test_lock_files_merge(fig4_events):
    g = build_graph(fig4_events[5:])
    assert sim_oracle("msg.1001.lock", "msg.1002.lock") == pytest.approx(1 - 1 / 13)
    out = merge_similar_files(g, ReduceConfig())
    files = [n for n in out.nodes.values() if n.type == "file"]
    assert len(files) == 1
    assert files[0].name == "/usr/home/user/mail/msg.1001.lock"
    assert len(out.edges) == 1
    assert out.edges[0].ts == FIG4_T2  # earliest kept after dedupe


def test_different_parents_not_merged():
    p = P("p", "x")
    g = build_graph(
        [ev(0, p, "write", F("a", "/d1/same.log")), ev(NS, p, "write", F("b", "/d2/same.log"))]
    )
    out = merge_similar_files(g, ReduceConfig())
    assert len(out.nodes) == 3


def test_dissimilar_files_not_merged():
    p = P("p", "x")
    assert sim_oracle("a.log", "zzzz.dat") <= 0.7
    g = build_graph(
        [ev(0, p, "write", F("a", "/d/a.log")), ev(NS, p, "write", F("b", "/d/zzzz.dat"))]
    )
    out = merge_similar_files(g, ReduceConfig())
    assert len(out.nodes) == 3


def test_outside_file_window_not_merged():
    p = P("p", "x")
    g = build_graph(
        [
            ev(0, p, "write", F("a", "/d/m.1.lock")),
            ev(60 * NS, p, "write", F("b", "/d/m.2.lock")),
        ]
    )
    out = merge_similar_files(g, ReduceConfig(file_window_ns=5 * NS))
    assert len(out.nodes) == 3


# -- reduce_all + invariants ------------------------------------------------------

def test_reduce_all_empty():
    g = build_graph([])
    out = reduce_all(g, ReduceConfig())
    assert len(out.nodes) == 0 and len(out.edges) == 0


def test_fig4_all_rules(fig4_events):
    g = build_graph(fig4_events)
    report = ReduceReport()
    out = reduce_all(g, ReduceConfig(), report)
    assert len(out.nodes) == 4  # alpine, merged socket, sent, merged lock
    assert len(out.edges) == 3
    by_op = {e.op: e for e in out.edges}
    assert by_op["connect_read"].ts == FIG4_T0
    assert out.nodes[by_op["connect_read"].dst_key].name == "127.0.0.1:1_25"
    assert out.nodes[by_op["open"].dst_key].name == "/usr/home/user/mail/sent"
    assert out.nodes[by_op["write"].dst_key].name == "/usr/home/user/mail/msg.1001.lock"
    assert report.rules["merge_network_events"]["edges_after"] == 6


def test_rules_idempotent(fig4_events):
    g = build_graph(fig4_events)
    cfg = ReduceConfig()
    for rule in (merge_network_events, collapse_directory_cascades, merge_similar_files):
        once = rule(g, cfg)
        twice = rule(once, cfg)
        assert twice == once, rule.__name__


def test_monotone_shrink_on_planted_redundancy():
    import numpy as np

    rng = np.random.default_rng(3)
    events = []
    t = 0
    # plant each kind of redundancy across several processes
    for i in range(20):
        p = P(f"p{i}", f"proc{i}")
        t += 40 * NS
        events.append(ev(t, p, "connect", S(f"s{i}a", f"10.0.0.{i}:1")))
        events.append(ev(t + NS // 3, p, "read", S(f"s{i}b", f"10.0.0.{i}:25")))
        events.append(ev(t + NS, p, "open", F(f"d{i}a", f"/srv/app{i}")))
        events.append(ev(t + 2 * NS, p, "open", F(f"d{i}b", f"/srv/app{i}/logs")))
        events.append(ev(t + 3 * NS, p, "open", F(f"d{i}c", f"/srv/app{i}/logs/today")))
        events.append(ev(t + 4 * NS, p, "write", F(f"l{i}a", f"/srv/app{i}/cache.001.tmp")))
        events.append(ev(t + 5 * NS, p, "write", F(f"l{i}b", f"/srv/app{i}/cache.002.tmp")))
    rng.shuffle(events)
    g = build_graph(events)
    cfg = ReduceConfig()
    prev = g
    for rule in (merge_network_events, collapse_directory_cascades, merge_similar_files):
        cur = rule(prev, cfg)
        assert len(cur.nodes) <= len(prev.nodes)
        assert len(cur.edges) <= len(prev.edges)
        cur.validate()  # no dangling endpoints
        prev = cur
    # redundancy was planted in every category, so both counts must drop
    assert len(prev.nodes) < len(g.nodes)
    assert len(prev.edges) < len(g.edges)


def test_merged_edge_timestamp_is_group_minimum():
    p = P("p", "x")
    g = build_graph(
        [
            ev(7 * NS, p, "read", S("s1", "9.9.9.9:10")),
            ev(7 * NS + NS // 2, p, "connect", S("s2", "9.9.9.9:20")),
        ]
    )
    out = merge_network_events(g, ReduceConfig())
    assert out.edges[0].ts == 7 * NS
    assert out.edges[0].op == "read_connect"  # first-occurrence order
