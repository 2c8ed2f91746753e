import dataclasses
import json

import pytest
from hypothesis import given, settings, strategies as st

from pyror import graph as G
from pyror.archspec import ArchConfig
from pyror.graph import (
    Provenance, ShapeError, block_subgraph, build_graph, export_json, import_json,
    infer_shapes, validate_graph,
)


def _adds_by_level(graph):
    counts = {"final": 0, "middle": 0, "root": 0}
    for node in graph.nodes:
        if node.kind == G.ADD:
            counts[graph.block_index[node.id].level] += 1
    return counts


def test_depth_110_alpha_48(graph_110_48):
    g = graph_110_48
    assert _adds_by_level(g) == {"final": 54, "middle": 3, "root": 1}
    linear = g.node(g.output_id)
    assert linear.kind == G.LINEAR and linear.params["in_features"] == 64
    assert validate_graph(g) == []


def test_depth_8_alpha_3_widths():
    g = build_graph(ArchConfig(8, 3))
    outs = [infer_shapes(g)[a][0] for a in g.final_adds]
    assert outs == [17, 18, 19]
    assert g.node(g.output_id).params["in_features"] == 19


def test_zero_alpha_group_one_uses_identity():
    g = build_graph(ArchConfig(14, 0, "preact"))
    shapes = infer_shapes(g)
    for add in g.final_adds:
        prov = g.block_index[add]
        assert shapes[add][0] == 16
        shortcut = g.node(g.node(add).inputs[1])
        if prov.group == 1:
            assert shortcut.kind == G.IDENTITY
        else:
            assert shortcut.kind in (G.IDENTITY, G.AVGPOOL)


def test_spatial_sizes_per_group(graph_110_48):
    shapes = infer_shapes(graph_110_48)
    sizes = {}
    for add in graph_110_48.final_adds:
        sizes.setdefault(graph_110_48.block_index[add].group, set()).add(shapes[add][1:])
    assert sizes == {1: {(32, 32)}, 2: {(16, 16)}, 3: {(8, 8)}}


def test_downsampling_in_first_conv_of_groups_2_and_3():
    g = build_graph(ArchConfig(14, 6))
    for node in g.nodes:
        prov = g.block_index[node.id]
        if node.kind == G.CONV and prov.level == "final":
            want = 2 if (prov.block == 1 and prov.group > 1 and _is_first_conv(g, node)) else 1
            assert node.params["stride"] == want, node


def _is_first_conv(g, conv):
    block = g.block_index[conv.id][:2]
    convs = [n for n in g.nodes if n.kind == G.CONV and g.block_index[n.id][:2] == block]
    return convs[0].id == conv.id


def test_projection_shortcuts(graph_110_48):
    projs = [n for n in graph_110_48.nodes if n.kind == G.PROJECT]
    levels = [graph_110_48.block_index[p.id].level for p in projs]
    assert levels == ["middle"] * 3 + ["root"]
    assert [p.params["stride"] for p in projs] == [1, 2, 2, 4]
    widths = graph_110_48.config.schedule().widths
    assert [p.params["out_channels"] for p in projs] == [widths[17], widths[35], 64, 64]


def test_root_projection_reads_post_stem_activation(graph_110_48):
    root = [n for n in graph_110_48.nodes if n.kind == G.PROJECT][-1]
    src = graph_110_48.node(root.inputs[0])
    assert src.kind == G.BATCHNORM and graph_110_48.block_index[src.id].role == "stem"


def test_block_fragment_pyramid_bn():
    f = block_subgraph("pyramid-bn", 16, 21, 1)
    assert (f.count(G.BATCHNORM), f.count(G.RELU), f.count(G.CONV)) == (3, 1, 2)
    assert [n.kind for n in f.nodes][1:7] == ["batchnorm", "conv", "batchnorm", "relu", "conv", "batchnorm"]
    assert f.nodes[-1].kind == G.ADD and f.nodes[-1].id == f.exit


def test_block_fragment_preact():
    f = block_subgraph("preact", 16, 16, 1)
    assert (f.count(G.BATCHNORM), f.count(G.RELU), f.count(G.CONV)) == (2, 2, 2)
    assert [n.kind for n in f.nodes][1:7] == ["batchnorm", "relu", "conv", "batchnorm", "relu", "conv"]


def test_block_fragment_downsampling_only():
    f = block_subgraph("pyramid-bn", 32, 32, 2)
    convs = f.of_kind(G.CONV)
    assert [c.params["stride"] for c in convs] == [2, 1]
    shortcut = [n for n in f.nodes if n.id not in (f.entry,) and n.kind in (G.AVGPOOL, G.ZEROPAD, G.IDENTITY)]
    assert [n.kind for n in shortcut] == [G.AVGPOOL]


def test_block_fragment_rejects_unknown_variant():
    with pytest.raises(ValueError):
        block_subgraph("bottleneck", 16, 16, 1)


def test_preact_unit_matches_hand_built_reference():
    f = block_subgraph("preact", 16, 16, 1)
    conv = dict(in_channels=16, out_channels=16, kernel=3, stride=1, padding=1)
    ref = [
        (G.INPUT, {"channels": 16}, ()),
        (G.BATCHNORM, {"channels": 16}, (0,)),
        (G.RELU, {}, (1,)),
        (G.CONV, conv, (2,)),
        (G.BATCHNORM, {"channels": 16}, (3,)),
        (G.RELU, {}, (4,)),
        (G.CONV, conv, (5,)),
        (G.IDENTITY, {}, (0,)),
        (G.ADD, {}, (6, 7)),
    ]
    assert [(n.kind, n.params, n.inputs) for n in f.nodes] == ref


def test_no_relu_after_any_add(graph_110_48):
    consumers = graph_110_48.consumers()
    for node in graph_110_48.nodes:
        if node.kind == G.ADD:
            assert all(graph_110_48.node(c).kind != G.RELU for c in consumers[node.id])


def test_validate_flags_missing_final_add(graph_110_48):
    g = graph_110_48
    victim = g.final_adds[10]
    node = g.node(victim)
    nodes = tuple(dataclasses.replace(n, kind=G.IDENTITY, inputs=(node.inputs[1],))
                  if n.id == victim else n for n in g.nodes)
    broken = dataclasses.replace(g, nodes=nodes)
    issues = validate_graph(broken)
    assert "final-level Add count 53 ≠ 54" in issues


def test_validate_flags_add_shape_mismatch():
    g = build_graph(ArchConfig(8, 3))
    add = g.final_adds[0]
    node = g.node(add)
    # wire the add to the stem BN (16 channels) instead of the 17-channel shortcut
    nodes = tuple(dataclasses.replace(n, inputs=(node.inputs[0], 2)) if n.id == add else n
                  for n in g.nodes)
    issues = validate_graph(dataclasses.replace(g, nodes=nodes))
    assert any(f"node {add}" in msg and "shapes differ" in msg for msg in issues)


def test_validate_flags_cycle_and_order():
    g = build_graph(ArchConfig(8, 3))
    nodes = list(g.nodes)
    nodes[3] = dataclasses.replace(nodes[3], inputs=(10,))
    issues = validate_graph(dataclasses.replace(g, nodes=tuple(nodes)))
    assert any("appears later" in m for m in issues)
    assert any("cycle" in m for m in issues)


def test_shape_error_names_node_and_shapes():
    g = build_graph(ArchConfig(8, 3))
    with pytest.raises(ShapeError) as exc:
        infer_shapes(g, (3, 31, 31))
    assert exc.value.node_id in g.final_adds
    assert len(exc.value.shapes) == 2


def test_export_import_round_trip():
    g = build_graph(ArchConfig(14, 5, "preact"))
    text = export_json(g)
    back = import_json(text)
    assert back == g
    assert export_json(back) == text


def test_export_is_deterministic():
    a = export_json(build_graph(ArchConfig(20, 9)))
    b = export_json(build_graph(ArchConfig(20, 9)))
    assert a == b
    doc = json.loads(a)
    assert doc["metadata"]["depth"] == 20 and doc["metadata"]["variant"] == "pyramid-bn"
    assert set(doc["nodes"][0]) >= {"id", "kind", "params", "inputs"}


def test_import_rejects_foreign_documents():
    with pytest.raises(ValueError):
        import_json('{"format": "onnx"}')


@settings(max_examples=25, deadline=None)
@given(st.integers(1, 24), st.integers(0, 300), st.sampled_from(["preact", "pyramid-bn"]))
def test_topology_properties(n, alpha, variant):
    g = build_graph(ArchConfig(6 * n + 2, alpha, variant))
    assert _adds_by_level(g) == {"final": 3 * n, "middle": 3, "root": 1}
    assert sum(1 for x in g.nodes if x.kind == G.PROJECT) == 4
    assert infer_shapes(g)[g.output_id - 1] == (16 + alpha,)
    assert validate_graph(g) == []
