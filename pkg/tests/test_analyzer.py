import pytest
from hypothesis import given, settings, strategies as st

from pyror import graph as G
from pyror.analyzer import (
    analyze, count_flops, count_params, expected_compute, infer_shapes,
)
from pyror.archspec import ArchConfig
from pyror.graph import LayerGraph, LayerNode, Provenance, ShapeError, block_subgraph, build_graph
from pyror.stochdepth import SurvivalSchedule, linear_decay


def _fragment_graph(fragment, in_shape, config=ArchConfig(8, 0)):
    prov = {n.id: Provenance(1, 1, "final", "branch") for n in fragment.nodes}
    return LayerGraph(fragment.nodes, fragment.entry, fragment.exit, prov,
                      ((fragment.entry, fragment.exit),),
                      ArchConfig(8, 0, input_shape=in_shape))


def _hand_param_total(nodes):
    # independent re-count straight from the node parameter dicts
    total = 0
    for n in nodes:
        p = n.params
        if n.kind in ("conv", "project"):
            total += p["out_channels"] * p["in_channels"] * p.get("kernel", 1) ** 2
        elif n.kind == "batchnorm":
            total += p["channels"] + p["channels"]
        elif n.kind == "linear":
            total += p["in_features"] * p["out_features"] + p["out_features"]
    return total


def test_shapes_depth_110(graph_110_48):
    shapes = infer_shapes(graph_110_48, (3, 32, 32))
    pool = [n for n in graph_110_48.nodes if n.kind == G.GLOBAL_AVGPOOL][0]
    assert shapes[pool.inputs[0]] == (64, 8, 8)


def test_stem_shape(graph_110_48):
    assert infer_shapes(graph_110_48)[1] == (16, 32, 32)


def test_odd_input_is_rejected_deterministically():
    g = build_graph(ArchConfig(8, 3))
    errors = []
    for _ in range(2):
        with pytest.raises(ShapeError) as exc:
            infer_shapes(g, (3, 31, 31))
        errors.append(str(exc.value))
    # strided conv rounds 31 up to 16, 2x2 pooling rounds down to 15
    assert errors[0] == errors[1]
    assert "16, 16)" in errors[0] and "15, 15)" in errors[0]


def test_single_preact_block_params():
    f = block_subgraph("preact", 16, 16, 1)
    report = count_params(_fragment_graph(f, (16, 32, 32)))
    assert report.total_params == 4672
    assert _hand_param_total(f.nodes) == 4672


@pytest.mark.parametrize("depth, alpha, budget, lo, hi", [
    (110, 48, 1.7e6, 1.60e6, 1.80e6),
    (146, 270, 38e6, 36.5e6, 39.5e6),
])
def test_parameter_budgets(depth, alpha, budget, lo, hi):
    g = build_graph(ArchConfig(depth, alpha, "pyramid-bn"))
    total = count_params(g).total_params
    assert lo <= total <= hi
    assert total == _hand_param_total(g.nodes)


def test_params_by_level(graph_110_48):
    r = count_params(graph_110_48)
    assert sum(r.params_by_level.values()) == r.total_params
    assert r.params_by_level["final_shortcut"] == 0
    assert r.params_by_level["classifier"] == 64 * 10 + 10
    assert r.params_by_level["root_shortcut"] == 16 * 64
    widths = graph_110_48.config.schedule().widths
    assert r.params_by_level["middle_shortcut"] == 16 * widths[17] + widths[17] * widths[35] + widths[35] * 64


def test_conv_bias_option():
    g = build_graph(ArchConfig(8, 3))
    convs = sum(n.params["out_channels"] for n in g.nodes if n.kind in (G.CONV, G.PROJECT))
    assert count_params(g, conv_bias=True).total_params == count_params(g).total_params + convs


def test_param_count_additive_over_disjoint_blocks():
    a = block_subgraph("pyramid-bn", 16, 21, 1)
    b = block_subgraph("preact", 21, 30, 2)
    ga, gb = _fragment_graph(a, (16, 8, 8)), _fragment_graph(b, (21, 8, 8))
    assert count_params(ga).total_params + count_params(gb).total_params == \
        _hand_param_total(a.nodes + b.nodes)


@settings(max_examples=20, deadline=None)
@given(st.integers(1, 24), st.integers(0, 200))
def test_params_monotone(n, alpha):
    depth = 6 * n + 2
    base = count_params(build_graph(ArchConfig(depth, alpha))).total_params
    assert count_params(build_graph(ArchConfig(depth, alpha + 1))).total_params > base
    assert count_params(build_graph(ArchConfig(depth + 6, alpha))).total_params > base


def test_stem_flops():
    g = build_graph(ArchConfig(8, 3))
    stem = g.node(1)
    from pyror.analyzer import node_flops
    assert node_flops(stem, infer_shapes(g)[1]) == 16 * 3 * 9 * 32 * 32 == 442_368


def test_identity_graph_has_zero_flops():
    nodes = (LayerNode(0, G.INPUT, {"channels": 3}), LayerNode(1, G.IDENTITY, {}, (0,)))
    prov = {0: Provenance(0, 0, "trunk", "stem"), 1: Provenance(0, 0, "trunk", "head")}
    g = LayerGraph(nodes, 0, 1, prov, (), ArchConfig(8, 0))
    assert count_flops(g) == 0


def test_flops_scale_with_area():
    g = build_graph(ArchConfig(8, 3))
    assert count_flops(g, (3, 64, 64)) - _linear_macs(g) == 4 * (count_flops(g, (3, 32, 32)) - _linear_macs(g))


def _linear_macs(g):
    lin = g.node(g.output_id)
    return lin.params["in_features"] * lin.params["out_features"]


def test_expected_compute_full_survival(graph_110_48):
    assert expected_compute(graph_110_48, SurvivalSchedule.uniform(54, 1.0)) == pytest.approx(1.0)


def test_expected_compute_uniform_blocks_no_fixed_cost():
    # 3 identical 16->16 stride-1 blocks, everything else free: (1 + p_L) / 2
    from pyror.graph import _Builder, _emit_block
    b = _Builder()
    x = b.add(G.INPUT, [], Provenance(0, 0, "trunk", "stem"), channels=16)
    spans = []
    for k in range(1, 4):
        entry = x
        _, _, x = _emit_block(b, "preact", x, 16, 16, 1, 1, k)
        spans.append((entry, x))
    g = LayerGraph(tuple(b.nodes), 0, x, dict(b.prov), tuple(spans), ArchConfig(8, 0, input_shape=(16, 8, 8)))
    frac = expected_compute(g, linear_decay(3, 0.5))
    assert frac == pytest.approx((5 / 6 + 4 / 6 + 3 / 6) / 3)
    big = _uniform_chain(54)
    assert expected_compute(big, linear_decay(54, 0.5)) == pytest.approx(0.75 - 0.25 / 54)


def _uniform_chain(L):
    from pyror.graph import _Builder, _emit_block
    b = _Builder()
    x = b.add(G.INPUT, [], Provenance(0, 0, "trunk", "stem"), channels=8)
    spans = []
    for k in range(1, L + 1):
        entry = x
        _, _, x = _emit_block(b, "pyramid-bn", x, 8, 8, 1, 1, k)
        spans.append((entry, x))
    return LayerGraph(tuple(b.nodes), 0, x, dict(b.prov), tuple(spans), ArchConfig(8, 0, input_shape=(8, 4, 4)))


def test_expected_compute_all_dropped_leaves_fixed_cost():
    g = build_graph(ArchConfig(8, 3))
    total = count_flops(g)
    shapes = infer_shapes(g)
    from pyror.analyzer import node_flops
    branch = sum(node_flops(g.node(i), shapes[i]) for m in g.branch_members for i in m)
    frac = expected_compute(g, SurvivalSchedule.uniform(3, 0.0))
    assert frac == pytest.approx((total - branch) / total)


def test_expected_compute_length_mismatch(graph_110_48):
    with pytest.raises(ValueError):
        expected_compute(graph_110_48, linear_decay(53, 0.5))


def test_report_invariants(graph_110_48):
    r = analyze(graph_110_48, linear_decay(54, 0.5))
    assert r.expected_flops_sd <= r.flops_forward
    assert sum(r.params_by_level.values()) == r.total_params
    assert [g[-1] for g in r.per_group_widths][-1] == 64
    assert set(r.to_dict()) == {"total_params", "params_by_level", "flops_forward",
                                "expected_flops_sd", "per_group_widths"}
