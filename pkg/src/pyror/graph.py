"""Explicit layer graphs for 3-level Pyramidal RoR networks.

A graph is a flat, topologically ordered tuple of :class:`LayerNode`.  Every
node knows its kind, its static parameters and the ids of its inputs; the
provenance map records which group/block/shortcut level produced each node.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from functools import cached_property
from typing import NamedTuple

from .archspec import STEM_WIDTH, ArchConfig, BlockVariant

INPUT = "input"
CONV = "conv"
BATCHNORM = "batchnorm"
RELU = "relu"
ADD = "add"
AVGPOOL = "avgpool"
GLOBAL_AVGPOOL = "global_avgpool"
LINEAR = "linear"
ZEROPAD = "zeropad"
IDENTITY = "identity"
PROJECT = "project"

KINDS = (INPUT, CONV, BATCHNORM, RELU, ADD, AVGPOOL, GLOBAL_AVGPOOL, LINEAR,
         ZEROPAD, IDENTITY, PROJECT)
LEVELS = ("trunk", "final", "middle", "root")

GRAPH_FORMAT = "pyror-graph"
GRAPH_FORMAT_VERSION = 1


class ShapeError(ValueError):
    def __init__(self, node_id, message, shapes=()):
        self.node_id = node_id
        self.shapes = tuple(shapes)
        super().__init__(f"node {node_id}: {message}")


@dataclass(frozen=True)
class LayerNode:
    id: int
    kind: str
    params: dict = field(default_factory=dict)
    inputs: tuple[int, ...] = ()


class Provenance(NamedTuple):
    group: int   # 1..3, 0 outside the groups
    block: int   # 1-based block index within the group, 0 if not in a block
    level: str   # trunk | final | middle | root
    role: str    # stem | head | branch | shortcut | merge


@dataclass(frozen=True)
class LayerGraph:
    nodes: tuple[LayerNode, ...]
    input_id: int
    output_id: int
    block_index: dict
    final_block_spans: tuple[tuple[int, int], ...]
    config: ArchConfig

    @cached_property
    def by_id(self) -> dict[int, LayerNode]:
        return {node.id: node for node in self.nodes}

    def node(self, node_id: int) -> LayerNode:
        return self.by_id[node_id]

    @property
    def input_shape(self) -> tuple[int, int, int]:
        return self.config.input_shape

    @cached_property
    def final_adds(self) -> tuple[int, ...]:
        return tuple(exit_id for _, exit_id in self.final_block_spans)

    @cached_property
    def branch_members(self) -> tuple[frozenset, ...]:
        """Node ids on the residual branch of each final-level block."""
        ordinal = {}
        for add_id in self.final_adds:
            prov = self.block_index[add_id]
            ordinal[(prov.group, prov.block)] = len(ordinal)
        members = [set() for _ in self.final_adds]
        for node_id, prov in self.block_index.items():
            if prov.level == "final" and prov.role == "branch":
                members[ordinal[(prov.group, prov.block)]].add(node_id)
        return tuple(frozenset(m) for m in members)

    def consumers(self) -> dict[int, list[int]]:
        out = {node.id: [] for node in self.nodes}
        for node in self.nodes:
            for src in node.inputs:
                if src in out:
                    out[src].append(node.id)
        return out


class _Builder:
    def __init__(self):
        self.nodes: list[LayerNode] = []
        self.prov: dict[int, Provenance] = {}

    def add(self, kind, inputs, prov, **params):
        node = LayerNode(len(self.nodes), kind, params, tuple(inputs))
        self.nodes.append(node)
        self.prov[node.id] = prov
        return node.id


def _emit_block(b: _Builder, variant, x, in_ch, out_ch, stride, group=0, block=0):
    """Append one final-level block reading ``x``; returns (branch_out, shortcut_out, add)."""
    variant = BlockVariant.parse(variant)
    if stride not in (1, 2):
        raise ValueError(f"block stride must be 1 or 2, got {stride}")
    if in_ch < 1 or out_ch < 1:
        raise ValueError(f"channel counts must be positive, got {in_ch} -> {out_ch}")
    br = Provenance(group, block, "final", "branch")
    sc = Provenance(group, block, "final", "shortcut")

    def conv(src, cin, s):
        return b.add(CONV, [src], br, in_channels=cin, out_channels=out_ch,
                     kernel=3, stride=s, padding=1)

    if variant is BlockVariant.PREACT:
        h = b.add(BATCHNORM, [x], br, channels=in_ch)
        h = b.add(RELU, [h], br)
        h = conv(h, in_ch, stride)
        h = b.add(BATCHNORM, [h], br, channels=out_ch)
        h = b.add(RELU, [h], br)
        h = conv(h, out_ch, 1)
    else:
        h = b.add(BATCHNORM, [x], br, channels=in_ch)
        h = conv(h, in_ch, stride)
        h = b.add(BATCHNORM, [h], br, channels=out_ch)
        h = b.add(RELU, [h], br)
        h = conv(h, out_ch, 1)
        h = b.add(BATCHNORM, [h], br, channels=out_ch)

    # type A shortcut: parameter-free
    s = x
    if stride != 1:
        s = b.add(AVGPOOL, [s], sc, kernel=stride)
    if out_ch > in_ch:
        s = b.add(ZEROPAD, [s], sc, extra=out_ch - in_ch)
    elif out_ch < in_ch:
        raise ValueError(f"type-A shortcut cannot shrink channels ({in_ch} -> {out_ch})")
    if s == x:
        s = b.add(IDENTITY, [s], sc)
    add = b.add(ADD, [h, s], Provenance(group, block, "final", "merge"))
    return h, s, add


@dataclass(frozen=True)
class BlockFragment:
    nodes: tuple[LayerNode, ...]
    entry: int
    branch_out: int
    shortcut_out: int
    exit: int

    def count(self, kind: str) -> int:
        return sum(1 for n in self.nodes if n.kind == kind)

    def of_kind(self, kind: str) -> list[LayerNode]:
        return [n for n in self.nodes if n.kind == kind]


def block_subgraph(variant, in_ch: int, out_ch: int, stride: int) -> BlockFragment:
    """One residual block (trunk, type-A shortcut and merging Add) in isolation.

    Node 0 is an ``input`` placeholder standing for the block input.
    """
    b = _Builder()
    entry = b.add(INPUT, [], Provenance(0, 0, "trunk", "stem"), channels=in_ch)
    h, s, add = _emit_block(b, variant, entry, in_ch, out_ch, stride)
    return BlockFragment(tuple(b.nodes), entry, h, s, add)


def build_graph(config: ArchConfig) -> LayerGraph:
    n, N = config.blocks_per_group, config.total_blocks
    widths = config.schedule().widths
    b = _Builder()
    stem = Provenance(0, 0, "trunk", "stem")
    c_in = config.input_shape[0]

    x = b.add(INPUT, [], stem, channels=c_in)
    h = b.add(CONV, [x], stem, in_channels=c_in, out_channels=STEM_WIDTH,
              kernel=3, stride=1, padding=1)
    h = b.add(BATCHNORM, [h], stem, channels=STEM_WIDTH)
    root_src = h

    spans = []
    width = STEM_WIDTH
    for g in range(1, 4):
        group_src, group_in = h, width
        for k in range(1, n + 1):
            out_ch = widths[(g - 1) * n + k - 1]
            stride = 2 if (k == 1 and g > 1) else 1
            entry = h
            _, _, h = _emit_block(b, config.block_variant, h, width, out_ch, stride, g, k)
            spans.append((entry, h))
            width = out_ch
        proj = b.add(PROJECT, [group_src], Provenance(g, 0, "middle", "shortcut"),
                     in_channels=group_in, out_channels=width, stride=1 if g == 1 else 2)
        h = b.add(ADD, [h, proj], Provenance(g, 0, "middle", "merge"))

    proj = b.add(PROJECT, [root_src], Provenance(0, 0, "root", "shortcut"),
                 in_channels=STEM_WIDTH, out_channels=width, stride=4)
    h = b.add(ADD, [h, proj], Provenance(0, 0, "root", "merge"))

    head = Provenance(0, 0, "trunk", "head")
    h = b.add(BATCHNORM, [h], head, channels=width)
    h = b.add(RELU, [h], head)
    h = b.add(GLOBAL_AVGPOOL, [h], head)
    out = b.add(LINEAR, [h], head, in_features=width, out_features=config.num_classes)

    assert len(spans) == N
    graph = LayerGraph(tuple(b.nodes), x, out, dict(b.prov), tuple(spans), config)
    infer_shapes(graph)
    return graph


# -- shapes ------------------------------------------------------------------

def conv_out_size(size: int, kernel: int, stride: int, padding: int) -> int:
    return (size + 2 * padding - kernel) // stride + 1


def node_output_shape(node: LayerNode, in_shapes: list[tuple]) -> tuple:
    k, p = node.kind, node.params
    if k == INPUT:
        raise ShapeError(node.id, "input shapes are supplied, not inferred")
    if k == ADD:
        if len(in_shapes) < 2:
            raise ShapeError(node.id, "add needs at least two operands")
        if any(s != in_shapes[0] for s in in_shapes[1:]):
            raise ShapeError(node.id, "add operand shapes differ: "
                             + " vs ".join(map(str, in_shapes)), in_shapes)
        return in_shapes[0]
    if len(in_shapes) != 1:
        raise ShapeError(node.id, f"{k} takes exactly one input, got {len(in_shapes)}")
    s = in_shapes[0]
    if k == LINEAR:
        if s != (p["in_features"],):
            raise ShapeError(node.id, f"linear expects ({p['in_features']},), got {s}", [s])
        return (p["out_features"],)
    if len(s) != 3:
        raise ShapeError(node.id, f"{k} expects a (C, H, W) input, got {s}", [s])
    c, hgt, wid = s
    if k in (CONV, PROJECT):
        kernel = p.get("kernel", 1)
        pad = p.get("padding", 0)
        if c != p["in_channels"]:
            raise ShapeError(node.id, f"expects {p['in_channels']} input channels, got {c}", [s])
        ho = conv_out_size(hgt, kernel, p["stride"], pad)
        wo = conv_out_size(wid, kernel, p["stride"], pad)
        if ho < 1 or wo < 1:
            raise ShapeError(node.id, f"spatial size collapses to {ho}x{wo}", [s])
        return (p["out_channels"], ho, wo)
    if k == BATCHNORM:
        if c != p["channels"]:
            raise ShapeError(node.id, f"batchnorm over {p['channels']} channels got {c}", [s])
        return s
    if k in (RELU, IDENTITY):
        return s
    if k == AVGPOOL:
        q = p["kernel"]
        if hgt // q < 1 or wid // q < 1:
            raise ShapeError(node.id, f"pool {q} too large for {hgt}x{wid}", [s])
        return (c, hgt // q, wid // q)
    if k == ZEROPAD:
        return (c + p["extra"], hgt, wid)
    if k == GLOBAL_AVGPOOL:
        return (c,)
    raise ShapeError(node.id, f"unknown node kind {k!r}")


def infer_shapes(graph: LayerGraph, input_shape=None) -> dict[int, tuple]:
    """Per-node output shape (batch dimension omitted)."""
    shape = tuple(input_shape or graph.input_shape)
    shapes = {}
    for node in graph.nodes:
        if node.id == graph.input_id:
            shapes[node.id] = shape
            continue
        try:
            in_shapes = [shapes[i] for i in node.inputs]
        except KeyError as exc:
            raise ShapeError(node.id, f"input {exc.args[0]} not computed before use") from None
        shapes[node.id] = node_output_shape(node, in_shapes)
    return shapes


def weighted_layer_count(graph: LayerGraph) -> int:
    """Trunk convs plus the classifier; projection shortcuts are not counted."""
    return sum(1 for n in graph.nodes if n.kind in (CONV, LINEAR))


# -- validation --------------------------------------------------------------

def _find_cycle(graph: LayerGraph) -> int | None:
    ids = {n.id for n in graph.nodes}
    state = {}
    preds = {n.id: [i for i in n.inputs if i in ids] for n in graph.nodes}
    for start in preds:
        if start in state:
            continue
        stack = [(start, iter(preds[start]))]
        state[start] = 1
        while stack:
            nid, it = stack[-1]
            nxt = next(it, None)
            if nxt is None:
                state[nid] = 2
                stack.pop()
            elif state.get(nxt) == 1:
                return nxt
            elif nxt not in state:
                state[nxt] = 1
                stack.append((nxt, iter(preds[nxt])))
    return None


def validate_graph(graph: LayerGraph) -> list[str]:
    """Structural findings; an empty list means the graph is well formed."""
    issues = []
    ids = [n.id for n in graph.nodes]
    if len(set(ids)) != len(ids):
        issues.append("duplicate node ids")
    known = set(ids)

    seen = set()
    ordering_ok = True
    for node in graph.nodes:
        if node.kind not in KINDS:
            issues.append(f"node {node.id}: unknown kind {node.kind!r}")
        for src in node.inputs:
            if src not in known:
                issues.append(f"node {node.id}: input {src} does not exist")
                ordering_ok = False
            elif src not in seen:
                issues.append(f"node {node.id}: input {src} appears later in node order")
                ordering_ok = False
        seen.add(node.id)

    cyc = _find_cycle(graph)
    if cyc is not None:
        issues.append(f"cycle through node {cyc}")
        ordering_ok = False

    sources = [n.id for n in graph.nodes if not n.inputs]
    consumers = graph.consumers()
    sinks = [nid for nid, c in consumers.items() if not c]
    if sources != [graph.input_id]:
        issues.append(f"expected single source {graph.input_id}, found {sources}")
    if sinks != [graph.output_id]:
        issues.append(f"expected single sink {graph.output_id}, found {sinks}")

    if ordering_ok:
        try:
            infer_shapes(graph)
        except ShapeError as exc:
            issues.append(str(exc))

    N = graph.config.total_blocks
    expected = {"final": N, "middle": 3, "root": 1}
    counts = dict.fromkeys(expected, 0)
    for node in graph.nodes:
        prov = graph.block_index.get(node.id)
        if node.kind == ADD and prov is not None and prov.level in counts:
            counts[prov.level] += 1
    for level, want in expected.items():
        if counts[level] != want:
            issues.append(f"{level}-level Add count {counts[level]} ≠ {want}")

    projections = sum(1 for n in graph.nodes if n.kind == PROJECT)
    if projections != 4:
        issues.append(f"learned projection count {projections} ≠ 4")
    depth = weighted_layer_count(graph)
    if depth != graph.config.depth:
        issues.append(f"weighted layer count {depth} ≠ depth {graph.config.depth}")
    return issues


# -- JSON export / import ----------------------------------------------------

def graph_to_dict(graph: LayerGraph) -> dict:
    nodes = []
    for node in graph.nodes:
        prov = graph.block_index[node.id]
        nodes.append({
            "id": node.id,
            "kind": node.kind,
            "params": dict(sorted(node.params.items())),
            "inputs": list(node.inputs),
            "provenance": prov._asdict(),
        })
    return {
        "format": GRAPH_FORMAT,
        "version": GRAPH_FORMAT_VERSION,
        "metadata": {
            "depth": graph.config.depth,
            "alpha": graph.config.alpha,
            "variant": graph.config.block_variant.value,
            "config": graph.config.to_dict(),
        },
        "input_id": graph.input_id,
        "output_id": graph.output_id,
        "final_block_spans": [list(s) for s in graph.final_block_spans],
        "nodes": nodes,
    }


def export_json(graph: LayerGraph) -> str:
    return json.dumps(graph_to_dict(graph), indent=2, sort_keys=False, ensure_ascii=False) + "\n"


def graph_from_dict(doc: dict) -> LayerGraph:
    if doc.get("format") != GRAPH_FORMAT:
        raise ValueError(f"not a {GRAPH_FORMAT} document")
    if doc.get("version") != GRAPH_FORMAT_VERSION:
        raise ValueError(f"unsupported graph format version {doc.get('version')}")
    config = ArchConfig.from_dict(doc["metadata"]["config"])
    nodes, prov = [], {}
    for item in doc["nodes"]:
        node = LayerNode(int(item["id"]), item["kind"], dict(item["params"]),
                         tuple(int(i) for i in item["inputs"]))
        nodes.append(node)
        prov[node.id] = Provenance(**item["provenance"])
    return LayerGraph(
        tuple(nodes), int(doc["input_id"]), int(doc["output_id"]), prov,
        tuple((int(a), int(b)) for a, b in doc["final_block_spans"]), config,
    )


def import_json(text: str) -> LayerGraph:
    return graph_from_dict(json.loads(text))
