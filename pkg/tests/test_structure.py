import json
import warnings

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from psm.demo import nutrition_structure
from psm.errors import StructureError, StructureWarning
from psm.structure import (
    DataType,
    Kind,
    Role,
    derive_model_specs,
    load_structure,
    parse_structure,
    select_universe,
    kind_type_counts,
)


@pytest.fixture(scope="module")
def advisor():
    doc, sym = nutrition_structure()
    return parse_structure(doc), sym


def _elem(symbol, name, kind, dtype, owner=None):
    out = {"symbol": symbol, "name": name, "kind": kind, "dataType": dtype}
    if owner is not None:
        out["owner"] = owner
    return out


def test_advisor_counts_by_kind(advisor):
    graph, _ = advisor
    assert graph.counts() == {"Type": 5, "Property": 15, "Parameter": 20, "Executable": 30}


def test_default_selector_includes_every_element(advisor):
    graph, _ = advisor
    assert len(select_universe(graph)) == 70


def test_kind_selector_picks_executables(advisor):
    graph, _ = advisor
    uni = select_universe(graph, "kind=Executable")
    assert len(uni) == 30
    assert all(graph[s].kind is Kind.EXECUTABLE for s in uni.included)


def test_selector_matching_nothing_is_empty(advisor):
    graph, _ = advisor
    assert len(select_universe(graph, {"name": "NoSuchClass.*"})) == 0


def test_callable_and_prefix_selectors_agree(advisor):
    graph, _ = advisor
    by_prefix = select_universe(graph, "name=Person.*")
    by_callable = select_universe(graph, lambda e: e.name.startswith("Person."))
    assert by_prefix.included == by_callable.included


def test_unknown_selector_key_rejected(advisor):
    graph, _ = advisor
    with pytest.raises(ValueError):
        select_universe(graph, "colour=red")


def test_empty_structure(tmp_path):
    p = tmp_path / "s.json"
    p.write_text(json.dumps({"elements": []}))
    g = load_structure(p)
    assert len(g.elements) == 0 and g.call_edges == () and g.access_edges == ()


def test_call_edge_to_unknown_symbol_names_it():
    doc = {"elements": [_elem(1, "A.run", "Executable", "Void")], "callEdges": [[1, 999]]}
    with pytest.raises(StructureError, match="999"):
        parse_structure(doc)


def test_duplicate_symbol_rejected():
    doc = {"elements": [_elem(1, "A", "Type", "Reference"), _elem(1, "B", "Type", "Reference")]}
    with pytest.raises(StructureError, match="duplicate symbol 1"):
        parse_structure(doc)


def test_property_without_owner_rejected():
    with pytest.raises(StructureError, match="no owner"):
        parse_structure({"elements": [_elem(2, "A.x", "Property", "Number")]})


def test_void_only_on_executables():
    doc = {"elements": [_elem(1, "A", "Type", "Reference"), _elem(2, "A.x", "Property", "Void", 1)]}
    with pytest.raises(StructureError, match="Void"):
        parse_structure(doc)


def test_duplicate_parameters_rejected():
    doc = {
        "elements": [
            _elem(1, "A", "Type", "Reference"),
            _elem(2, "A.f", "Executable", "Void", 1),
            _elem(3, "A.f.x", "Parameter", "Number", 2),
        ],
        "paramLists": {"2": [3, 3]},
    }
    with pytest.raises(StructureError, match="duplicates"):
        parse_structure(doc)


def test_malformed_json(tmp_path):
    p = tmp_path / "bad.json"
    p.write_text("{not json")
    with pytest.raises(StructureError, match="not valid JSON"):
        load_structure(p)


def test_unknown_keys_warn():
    with pytest.warns(StructureWarning):
        parse_structure({"elements": [], "extra": 1})


def test_symbols_kept_verbatim():
    g = parse_structure({"elements": [_elem(41, "A", "Type", "Reference"), _elem(7, "A.f", "Executable", "Number", 41)]})
    assert set(g.elements) == {7, 41}


def test_bmi_spec_columns(advisor):
    graph, sym = advisor
    specs = {s.node: s for s in derive_model_specs(select_universe(graph), graph)}
    bmi = specs[sym["BmiService.bmi"]]
    assert [(c.id, c.role, c.data_type) for c in bmi.columns] == [
        ("height", Role.PA, DataType.NUMBER),
        ("weight", Role.PA, DataType.NUMBER),
        ("ret", Role.RET, DataType.NUMBER),
    ]
    assert bmi.condition_column == "caller"


def test_getter_folds_property_read(advisor):
    graph, sym = advisor
    specs = {s.node: s for s in derive_model_specs(select_universe(graph), graph)}
    getter = specs[sym["Person.getWeight"]]
    assert [(c.id, c.role) for c in getter.columns] == [("weight", Role.R), ("ret", Role.RET)]


def test_reference_only_executable_is_empty(advisor):
    graph, sym = advisor
    specs = {s.node: s for s in derive_model_specs(select_universe(graph), graph)}
    # takes a Reference request parameter, reads Reference properties, returns Reference
    assert specs[sym["Servlet.getLogger"]].empty


def test_condition_domain_spans_project_even_outside_universe(advisor):
    graph, sym = advisor
    uni = select_universe(graph, {"name": "BmiService.*"})
    specs = derive_model_specs(uni, graph)
    assert [s.node for s in specs] == sorted(s for s in uni.included if graph[s].kind is Kind.EXECUTABLE)
    assert len(specs[0].condition_domain) == 30
    assert sym["Servlet.handle"] in specs[0].condition_domain


def test_spec_invariants(advisor):
    graph, _ = advisor
    uni = select_universe(graph)
    specs = derive_model_specs(uni, graph)
    assert specs == derive_model_specs(uni, graph)
    assert len(specs) == 30
    covered = set()
    for spec in specs:
        ids = spec.column_ids
        assert len(ids) == len(set(ids))
        reachable = {p.symbol for p in graph.params_of(spec.node)} | {p.symbol for p in graph.accesses_of(spec.node)}
        reachable.add(spec.node)
        for c in spec.columns:
            assert c.data_type in (DataType.NUMBER, DataType.TEXT)
            assert c.source_symbol in reachable
            if c.role in (Role.R, Role.W):
                covered.add(c.source_symbol)
    accessed = {p for e, p, _ in graph.access_edges if graph[p].data_type.is_data}
    assert accessed <= covered


def test_invocation_columns_are_opt_in(advisor):
    graph, sym = advisor
    uni = select_universe(graph)
    plain = {s.node: s for s in derive_model_specs(uni, graph)}
    with_inv = {s.node: s for s in derive_model_specs(uni, graph, include_invocations=True)}
    advice = sym["NutritionAdvisor.advice"]
    assert "inv" not in plain[advice].column_ids
    inv = with_inv[advice].column("inv")
    assert inv.role is Role.INV and inv.data_type is DataType.TEXT


def test_kind_type_buckets_sum_to_totals(advisor):
    graph, _ = advisor
    counts = kind_type_counts(graph)
    for row in counts.values():
        assert row["Data"] + row["Ref"] + row["Unk"] + row["Void"] == row["Total"]
    assert sum(r["Total"] for r in counts.values()) == 70


def test_digest_ignores_formatting(advisor, tmp_path):
    doc, _ = nutrition_structure()
    a, b = tmp_path / "a.json", tmp_path / "b.json"
    a.write_text(json.dumps(doc))
    b.write_text(json.dumps(doc, indent=4, sort_keys=True))
    assert load_structure(a).digest() == load_structure(b).digest()
    doc["elements"][0]["name"] = "Renamed"
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        assert parse_structure(doc).digest() != load_structure(a).digest()


@settings(max_examples=40, deadline=None)
@given(st.lists(st.sampled_from(["Number", "Text", "Reference", "Unknown"]), min_size=1, max_size=6),
       st.sampled_from(["Number", "Text", "Reference", "Void"]))
def test_columns_only_for_data_typed_sources(param_types, ret_type):
    elements = [_elem(0, "T", "Type", "Reference"), _elem(1, "T.f", "Executable", ret_type, 0)]
    for i, t in enumerate(param_types):
        elements.append(_elem(10 + i, f"T.f.p{i}", "Parameter", t, 1))
    graph = parse_structure({"elements": elements, "paramLists": {"1": [10 + i for i in range(len(param_types))]}})
    (spec,) = derive_model_specs(select_universe(graph), graph)
    expected = sum(t in ("Number", "Text") for t in param_types) + (ret_type in ("Number", "Text"))
    assert len(spec.columns) == expected
    assert spec.empty == (expected == 0)
