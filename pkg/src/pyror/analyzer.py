"""Static analysis of layer graphs: shapes, parameters, MACs, expected compute."""

from __future__ import annotations

from dataclasses import asdict, dataclass

from . import graph as G
from .graph import LayerGraph, LayerNode, ShapeError, infer_shapes
from .stochdepth import SurvivalSchedule

__all__ = [
    "AnalysisReport", "ShapeError", "analyze", "count_flops", "count_params",
    "expected_compute", "infer_shapes", "node_flops", "node_param_count",
]

PARAM_LEVELS = ("trunk", "final_shortcut", "middle_shortcut", "root_shortcut", "classifier")


@dataclass
class AnalysisReport:
    total_params: int
    params_by_level: dict
    flops_forward: int = 0
    expected_flops_sd: float = 0.0
    per_group_widths: list | None = None

    def to_dict(self) -> dict:
        return asdict(self)


def node_param_count(node: LayerNode, conv_bias: bool = False) -> int:
    p = node.params
    if node.kind in (G.CONV, G.PROJECT):
        k = p.get("kernel", 1)
        n = p["out_channels"] * p["in_channels"] * k * k
        return n + (p["out_channels"] if conv_bias else 0)
    if node.kind == G.BATCHNORM:
        return 2 * p["channels"]
    if node.kind == G.LINEAR:
        return p["in_features"] * p["out_features"] + p["out_features"]
    return 0


def _param_level(graph: LayerGraph, node: LayerNode) -> str:
    prov = graph.block_index[node.id]
    if node.kind == G.LINEAR:
        return "classifier"
    if prov.level == "final" and prov.role == "shortcut":
        return "final_shortcut"
    if prov.level in ("middle", "root"):
        return f"{prov.level}_shortcut"
    return "trunk"


def count_params(graph: LayerGraph, conv_bias: bool = False) -> AnalysisReport:
    by_level = dict.fromkeys(PARAM_LEVELS, 0)
    for node in graph.nodes:
        by_level[_param_level(graph, node)] += node_param_count(node, conv_bias)
    return AnalysisReport(sum(by_level.values()), by_level)


def node_flops(node: LayerNode, out_shape: tuple) -> int:
    """Multiply-accumulates for a batch of one; elementwise ops are free."""
    p = node.params
    if node.kind in (G.CONV, G.PROJECT):
        k = p.get("kernel", 1)
        _, ho, wo = out_shape
        return p["out_channels"] * p["in_channels"] * k * k * ho * wo
    if node.kind == G.LINEAR:
        return p["in_features"] * p["out_features"]
    return 0


def _flops_by_node(graph: LayerGraph, input_shape=None) -> dict[int, int]:
    shapes = infer_shapes(graph, input_shape)
    return {n.id: node_flops(n, shapes[n.id]) for n in graph.nodes}


def count_flops(graph: LayerGraph, input_shape=None) -> int:
    return sum(_flops_by_node(graph, input_shape).values())


def expected_compute(graph: LayerGraph, survival: SurvivalSchedule, input_shape=None) -> float:
    """Expected fraction of forward MACs executed when block l survives with p_l.

    Only residual branches of final-level blocks can be dropped; everything
    else (stem, shortcuts, projections, head) is always paid for.
    """
    if len(survival) != len(graph.final_block_spans):
        raise ValueError(f"schedule has {len(survival)} entries, graph has "
                         f"{len(graph.final_block_spans)} final-level blocks")
    per_node = _flops_by_node(graph, input_shape)
    total = sum(per_node.values())
    if total == 0:
        return 1.0
    branch_cost = [sum(per_node[i] for i in members) for members in graph.branch_members]
    fixed = total - sum(branch_cost)
    expected = fixed + sum(p * c for p, c in zip(survival.probs, branch_cost))
    return expected / total


def analyze(graph: LayerGraph, survival: SurvivalSchedule | None = None) -> AnalysisReport:
    report = count_params(graph)
    report.flops_forward = count_flops(graph)
    frac = 1.0 if survival is None else expected_compute(graph, survival)
    report.expected_flops_sd = frac * report.flops_forward
    report.per_group_widths = graph.config.schedule().group_widths(graph.config.groups)
    return report
