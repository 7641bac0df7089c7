import json
import warnings

import pytest
from hypothesis import given, settings, strategies as st

from xymbl.lattice import (Bond, BondKind, CouplingGraph, Geometry, SiteId, build_chain, build_rectangle,
                           effective_coupling, graph_from_pairs)


def pairs(g, kind=None):
    return {(b.pair, b.strength, b.kind) for b in g.bonds if kind is None or b.kind is kind}


def test_minimal_chain_rectangle():
    g = build_rectangle(1, 2, 3.0, 0.0)
    assert g.n_sites == 2
    nn = g.bonds_of_kind(BondKind.NN)
    assert len(nn) == 1 and nn[0].strength == 3.0
    assert g.bonds_of_kind(BondKind.NNN) == []


def test_3x7_bond_counts():
    g = build_rectangle(3, 7, 2.9, 1.1)
    assert g.n_sites == 21
    assert len(g.bonds_of_kind("NN")) == 3 * 6 + 2 * 7 == 32
    assert len(g.bonds_of_kind("NNN")) == 24
    assert g.geometry is Geometry.RECTANGLE


def test_ladder_reference():
    g = build_rectangle(2, 7, 2.9, 1.1)
    assert g.n_sites == 14 and g.geometry is Geometry.LADDER


@given(st.integers(1, 8), st.integers(1, 8))
def test_bond_count_formula(r, c):
    if r * c < 2:
        with pytest.raises(ValueError):
            build_rectangle(r, c, 1.0, 1.0)
        return
    g = build_rectangle(r, c, 1.0, 0.5)
    assert len(g.bonds_of_kind("NN")) == r * (c - 1) + c * (r - 1)
    assert len(g.bonds_of_kind("NNN")) == 2 * (r - 1) * (c - 1)


def test_row_major_indexing():
    g = build_rectangle(3, 4, 1.0, 1.0)
    for s in g.sites:
        assert s.index == s.row * 4 + s.col
    assert g.site_at(2, 1).index == 9


@pytest.mark.parametrize("n,bonds", [(2, 1), (21, 20), (42, 41)])
def test_chain(n, bonds):
    g = build_chain(n, 2.9)
    assert len(g.bonds) == bonds
    assert not g.bonds_of_kind("NNN")
    assert g.geometry is Geometry.CHAIN


@given(st.integers(2, 30), st.floats(-5, 5))
@settings(max_examples=30)
def test_single_row_equals_chain(n, x):
    assert pairs(build_rectangle(1, n, 2.9, x)) == pairs(build_chain(n, 2.9))


def test_chain_too_short():
    with pytest.raises(ValueError):
        build_chain(1, 1.0)


@pytest.mark.parametrize("rows,cols", [(0, 3), (3, 0), (-1, 2), (2.5, 2)])
def test_bad_dimensions(rows, cols):
    with pytest.raises(ValueError):
        build_rectangle(rows, cols, 1.0, 1.0)


def test_nonfinite_coupling():
    with pytest.raises(ValueError):
        build_rectangle(2, 2, float("nan"), 1.0)


def test_effective_coupling_examples():
    assert effective_coupling(1.0, 0.0, 0.0, 3520, 3520, 4500) == 1.0
    assert effective_coupling(0.0, 100, 100, 3520, 3520, 4520) == pytest.approx(-10.0, abs=1e-12)
    assert effective_coupling(5.0, 100, 100, 3520, 3520, 4520) == pytest.approx(-5.0, abs=1e-12)


@given(st.floats(-10, 10), st.floats(-50, 50), st.floats(-50, 50),
       st.floats(3000, 4000), st.floats(3000, 4000), st.floats(4100, 5000))
def test_effective_coupling_symmetric(g12, g1, g2, w1, w2, wc):
    assert effective_coupling(g12, g1, g2, w1, w2, wc) == pytest.approx(
        effective_coupling(g12, g2, g1, w2, w1, wc), rel=1e-12, abs=1e-12)


def test_effective_coupling_resonance():
    with pytest.raises(ZeroDivisionError):
        effective_coupling(0.0, 1.0, 1.0, 4000, 3500, 4000)


def test_bond_validation():
    a, b, c = SiteId(0, 0, 0), SiteId(1, 0, 1), SiteId(2, 1, 1)
    with pytest.raises(ValueError):
        Bond(a, a, 1.0)
    with pytest.raises(ValueError):
        Bond(a, c, 1.0, BondKind.NN)
    with pytest.raises(ValueError):
        Bond(a, b, 1.0, BondKind.NNN)
    with pytest.raises(ValueError):
        Bond(a, b, float("inf"))


def test_graph_rejects_duplicates_and_foreign_endpoints():
    a, b = SiteId(0, 0, 0), SiteId(1, 0, 1)
    with pytest.raises(ValueError, match="duplicate"):
        CouplingGraph((a, b), (Bond(a, b, 1.0), Bond(b, a, 2.0)))
    stranger = SiteId(2, 1, 1)
    with pytest.raises(ValueError, match="not a site"):
        CouplingGraph((a, b), (Bond(a, b, 1.0), Bond(a, stranger, 1.0, BondKind.NNN)))


def test_disconnected_graph_warns():
    a, b, c = SiteId(0, 0, 0), SiteId(1, 0, 1), SiteId(2, 0, 3)
    with pytest.warns(UserWarning, match="not connected"):
        CouplingGraph((a, b, c), (Bond(a, b, 1.0),))


def test_json_round_trip():
    g = build_rectangle(3, 4, 2.9, 1.1, spread=0.2, seed=5)
    g2 = CouplingGraph.from_json(g.to_json())
    assert pairs(g2) == pairs(g)
    assert g2.digest() == g.digest()
    assert json.loads(g.to_json())["geometry"] == "Rectangle"


def test_spread_is_seeded_and_bounded():
    g1 = build_rectangle(3, 3, 2.9, 1.1, spread=0.3, seed=1)
    g2 = build_rectangle(3, 3, 2.9, 1.1, spread=0.3, seed=1)
    g3 = build_rectangle(3, 3, 2.9, 1.1, spread=0.3, seed=2)
    assert pairs(g1) == pairs(g2) != pairs(g3)
    for b in g1.bonds:
        base = 2.9 if b.kind is BondKind.NN else 1.1
        assert abs(b.strength - base) <= 0.3


def test_graph_from_pairs_infers_kind():
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        g = graph_from_pairs([((0, 0), (0, 1), 2.0), ((0, 1), (1, 0), 0.5)])
    kinds = sorted(b.kind.value for b in g.bonds)
    assert kinds == ["NN", "NNN"] and g.geometry is Geometry.CUSTOM
