import json

import numpy as np
import pytest
from conftest import small_samples
from hypothesis import given
from hypothesis import strategies as st

from grain_graph.errors import FormatError, ValidationError
from grain_graph.graph_build import (EDGE_TYPES, DiscretizationConfig, build_graph, classify_edge,
                                     export_graph, fit_discretization, import_graph, orientation_category,
                                     permute_graph, size_category, validate_graph)
from grain_graph.scan_ingest import AdjacencyRecord, Grain, GrainTable


def _cfg(n_size=10, size_range=(0.0, 100.0), n_phi=4, phi_min=(0, 0, 0), phi_max=(360, 180, 360), lam=0.2):
    return DiscretizationConfig(n_size, size_range[0], size_range[1], n_phi, phi_min, phi_max, lam)


def _brute_size(size, lo, hi, n):
    # scan bin upper boundaries lo + k*w for k = 1..n; the first boundary >= size wins
    w = (hi - lo) / n
    for k in range(1, n + 1):
        if size <= lo + k * w:
            return k
    return n


def _brute_axis(v, lo, hi, n):
    return _brute_size(v, lo, hi, n)


def test_fit_size_range():
    grains = [Grain(1, 1.0, (0, 0, 0), 4.0), Grain(2, 9.0, (10, 10, 10), 30.0)]
    cfg = fit_discretization([GrainTable(grains, [])])
    assert (cfg.size_min, cfg.size_max) == (1.0, 9.0)


def test_fit_degenerate_sizes():
    grains = [Grain(1, 3.0, (0, 0, 0), 4.0), Grain(2, 3.0, (10, 10, 10), 4.0)]
    with pytest.raises(ValidationError):
        fit_discretization([GrainTable(grains, [])])


def test_fixed_phi_range():
    grains = [Grain(1, 1.0, (5, 6, 7), 4.0), Grain(2, 2.0, (50, 60, 70), 8.0)]
    cfg = fit_discretization([GrainTable(grains, [])], phi_range_mode="fixed")
    assert cfg.phi_min == (0.0, 0.0, 0.0) and cfg.phi_max == (360.0, 180.0, 360.0)


def test_fitted_phi_range_brute_force():
    rng = np.random.default_rng(0)
    tables = []
    for t in range(10):
        eul = rng.uniform([0, 0, 0], [360, 180, 360], size=(100, 3))
        grains = [Grain(i + 1, float(rng.uniform(1, 20)), tuple(e), 50.0) for i, e in enumerate(eul)]
        tables.append(GrainTable(grains, []))
    cfg = fit_discretization(tables)
    for axis in range(3):
        vals = [g.euler_mean[axis] for t in tables for g in t.grains]
        lo = hi = vals[0]
        for v in vals:
            lo, hi = min(lo, v), max(hi, v)
        assert cfg.phi_min[axis] == lo and cfg.phi_max[axis] == hi


def test_size_category_examples():
    cfg = _cfg()
    assert size_category(25.0, cfg) == 3
    assert size_category(0.0, cfg) == 1
    assert size_category(100.0, cfg) == 10
    assert size_category(-5.0, cfg) == 1 and size_category(500.0, cfg) == 10


def test_size_category_brute_force():
    rng = np.random.default_rng(1)
    cfg = _cfg(n_size=7, size_range=(1.5, 40.0))
    sizes = rng.uniform(0.0, 45.0, 10_000)
    sizes[:50] = 1.5 + np.arange(50) % 8 * (38.5 / 7)  # hit the bin boundaries
    got = size_category(sizes, cfg)
    assert list(got) == [_brute_size(s, 1.5, 40.0, 7) for s in sizes]


@given(st.floats(-1e6, 1e6), st.floats(-1e6, 1e6))
def test_size_category_monotone_and_total(a, b):
    cfg = _cfg(n_size=9, size_range=(2.0, 30.0))
    ca, cb = size_category(a, cfg), size_category(b, cfg)
    assert 1 <= ca <= 9 and 1 <= cb <= 9
    if a <= b:
        assert ca <= cb


def test_orientation_category_examples():
    cfg = _cfg(n_phi=3)
    assert orientation_category((100.0, 100.0, 350.0), cfg) == ((1, 2, 3), 6)
    assert orientation_category((0.0, 0.0, 0.0), cfg) == ((1, 1, 1), 1)


def test_orientation_category_brute_force():
    rng = np.random.default_rng(2)
    cfg = _cfg(n_phi=4, phi_min=(3, 4, 5), phi_max=(350, 170, 355))
    eul = rng.uniform([0, 0, 0], [360, 180, 360], size=(10_000, 3))
    _, flat = orientation_category(eul, cfg)
    n = 4
    for e, f in zip(eul, flat):
        cats = [_brute_axis(e[a], cfg.phi_min[a], cfg.phi_max[a], n) for a in range(3)]
        want = None
        index = 0
        for i in range(1, n + 1):
            for j in range(1, n + 1):
                for k in range(1, n + 1):
                    index += 1
                    if (i, j, k) == tuple(cats):
                        want = index
        assert f == want


def test_classify_edge():
    assert classify_edge(30.0, 100.0, 0.25) == "Strong"
    assert classify_edge(25.0, 100.0, 0.25) == "Strong"
    assert classify_edge(24.0, 100.0, 0.25) == "Weak"
    with pytest.raises(ValidationError):
        classify_edge(1.0, 0.0, 0.2)


def test_four_grain_structure(four_grain_table):
    cfg = fit_discretization([four_grain_table])
    g = build_graph(four_grain_table, cfg)
    assert g.grain_count == 4
    assert g.size_node_count == 3
    size_src, size_dst = g.edges["HasSize"]
    assert list(size_src) == [0, 1, 2, 3]
    assert size_dst[0] == size_dst[1] and len(set(size_dst.tolist())) == 3
    assert g.meta["size_categories"] == [1, 5, 10]
    assert g.ori_node_count == 4
    ori_src, ori_dst = g.edges["HasOri"]
    assert list(ori_src) == [0, 1, 2, 3] and len(set(ori_dst.tolist())) == 4
    assert g.meta["orientation_categories"] == [1, 22, 43, 64]


def test_four_grain_strong_weak_direction(four_grain_table):
    # lp uses the source perimeter: 1-2 shares 2.0, perimeters 8 and 10 -> 0.25 and 0.2
    cfg = fit_discretization([four_grain_table], lam=0.21)
    g = build_graph(four_grain_table, cfg)
    strong = set(zip(*[x.tolist() for x in g.edges["Strong"]]))
    weak = set(zip(*[x.tolist() for x in g.edges["Weak"]]))
    assert (0, 1) in strong and (1, 0) in weak


def test_single_isolated_grain():
    g = build_graph(GrainTable([Grain(1, 3.0, (1, 2, 3), 6.0)], []), _cfg())
    assert (g.grain_count, g.size_node_count, g.ori_node_count) == (1, 1, 1)
    assert g.edge_count("Strong") == g.edge_count("Weak") == 0
    assert g.edge_count() == 4


def test_empty_table_rejected():
    with pytest.raises(ValidationError):
        build_graph(GrainTable([], []), _cfg())


def _random_table(rng, n):
    grains = [Grain(i + 1, float(rng.uniform(1, 20)), tuple(rng.uniform([0, 0, 0], [360, 180, 360])), 40.0)
              for i in range(n)]
    adj = []
    for a in range(1, n + 1):
        for b in range(a + 1, n + 1):
            if rng.uniform() < 0.3:
                adj.append(AdjacencyRecord(a, b, float(rng.uniform(0.5, 20.0))))
    return GrainTable(grains, adj)


def test_edges_match_adjacency_brute_force():
    rng = np.random.default_rng(3)
    for _ in range(20):
        table = _random_table(rng, int(rng.integers(1, 15)))
        cfg = _cfg(size_range=(1.0, 20.0))
        g = build_graph(table, cfg)
        per = {gr.id: gr.perimeter for gr in table.grains}
        want_strong, want_weak = [], []
        for r in table.adjacency:
            for s, d in ((r.grain_a, r.grain_b), (r.grain_b, r.grain_a)):
                (want_strong if r.shared_length / per[s] >= cfg.lam else want_weak).append((s - 1, d - 1))
        assert sorted(zip(*[x.tolist() for x in g.edges["Strong"]])) == sorted(want_strong)
        assert sorted(zip(*[x.tolist() for x in g.edges["Weak"]])) == sorted(want_weak)
        assert g.edge_count("Strong") + g.edge_count("Weak") == 2 * len(table.adjacency)
        assert g.edge_count("HasSize") == g.edge_count("HasOri") == g.grain_count == len(table)
        validate_graph(g, table)


def test_graph_invariants_on_synthetic():
    samples = small_samples(6)
    cfg = fit_discretization([t for _, t, _ in samples])
    for sid, table, y in samples:
        g = build_graph(table, cfg, y, source_id=sid)
        validate_graph(g, table)
        assert g.features["Size"].shape[1] == cfg.n_size
        assert g.features["Orientation"].shape[1] == cfg.n_orientation
        assert np.all(g.features["Size"].sum(axis=1) == 1)


def test_export_import_round_trip():
    rng = np.random.default_rng(4)
    for _ in range(10):
        g = build_graph(_random_table(rng, int(rng.integers(1, 12))), _cfg(size_range=(1.0, 20.0)),
                        label=float(rng.normal()))
        assert import_graph(export_graph(g)) == g
    lone = build_graph(GrainTable([Grain(1, 3.0, (1, 2, 3), 6.0)], []), _cfg())
    again = import_graph(export_graph(lone))
    assert again == lone and again.edge_count("Strong") == 0


def test_export_is_deterministic():
    rng = np.random.default_rng(5)
    table = _random_table(rng, 8)
    assert export_graph(build_graph(table, _cfg(size_range=(1, 20)))) == \
        export_graph(build_graph(table, _cfg(size_range=(1, 20))))


def test_import_rejects_bad_documents(four_grain_table):
    g = build_graph(four_grain_table, fit_discretization([four_grain_table]))
    doc = json.loads(export_graph(g))
    bad_version = dict(doc, version=99)
    with pytest.raises(FormatError):
        import_graph(json.dumps(bad_version))
    tampered = json.loads(export_graph(g))
    size_node = next(n for n in tampered["nodes"] if n["type"] == "Size")
    size_node["feature"][0] = 1.0
    size_node["feature"][-1] = 1.0
    with pytest.raises(ValidationError):
        import_graph(json.dumps(tampered))
    missing_reverse = json.loads(export_graph(g))
    missing_reverse["edges"] = [e for e in missing_reverse["edges"] if e["type"] != "SizeOf"]
    with pytest.raises(ValidationError):
        import_graph(json.dumps(missing_reverse))


def test_permutation_preserves_invariants(four_grain_table):
    g = build_graph(four_grain_table, fit_discretization([four_grain_table]))
    rng = np.random.default_rng(6)
    p = permute_graph(g, {t: rng.permutation(g.node_count(t)) for t in ("Grain", "Size", "Orientation")})
    validate_graph(p)
    assert all(p.edge_count(t) == g.edge_count(t) for t in EDGE_TYPES)
