"""Tour of the architecture compiler: widths, graph, parameter budgets.

Run with ``python demos/01_architecture_tour.py``.
"""

# %% depth algebra
# every residual block holds two 3x3 convs; with the stem conv and the
# classifier that gives depth = 6n + 2 weighted layers for n blocks per group
from pyror.archspec import ArchConfig, classic_widths, derive_block_counts, pyramidal_widths

for depth in (8, 14, 110, 146):
    n, N = derive_block_counts(depth)
    print(f"depth {depth:>3}: {n} blocks per group, {N} blocks total")

# %% widening schedules
# classic residual nets double the width once per group; the pyramidal
# schedule spreads the same growth over every block
pyr = pyramidal_widths(48, 54)
cls = classic_widths(3, 18)
print("pyramidal, every 6th block:", pyr.widths[::6], "final", pyr.final_width)
print("classic,   every 6th block:", cls.widths[::6], "final", cls.final_width)

# %% building the graph
from pyror import graph as G

config = ArchConfig(110, 48, "pyramid-bn")
graph = G.build_graph(config)
kinds = {}
for node in graph.nodes:
    kinds[node.kind] = kinds.get(node.kind, 0) + 1
print(f"{len(graph.nodes)} nodes:", dict(sorted(kinds.items())))
print("weighted layers:", G.weighted_layer_count(graph))
print("structural findings:", G.validate_graph(graph) or "none")

# the four learned projections: one per group plus the root shortcut
for node in graph.nodes:
    if node.kind == G.PROJECT:
        p = node.params
        print(f"  node {node.id}: {p['in_channels']} -> {p['out_channels']}, stride {p['stride']}")

# %% static shapes
shapes = G.infer_shapes(graph)
for g, n0 in enumerate((0, 18, 36), 1):
    add = graph.final_adds[n0 + 17]
    print(f"group {g} output shape {shapes[add]}")

# %% parameter budgets
from pyror.analyzer import analyze, count_params

for depth, alpha, quoted in [(110, 48, "1.7M"), (110, 84, "3.8M"), (110, 270, "28.3M"), (146, 270, "38M")]:
    total = count_params(G.build_graph(ArchConfig(depth, alpha))).total_params
    print(f"depth {depth} alpha {alpha:>3}: {total / 1e6:6.2f}M params (quoted {quoted})")

report = analyze(graph)
print("by level:", report.params_by_level)
print(f"forward MACs per 32x32 image: {report.flops_forward / 1e6:.1f}M")

# %% export
text = G.export_json(G.build_graph(ArchConfig(8, 3)))
print("exported depth-8 graph:", len(text), "bytes of JSON")
assert G.graph_to_dict(G.import_json(text)) == G.graph_to_dict(G.build_graph(ArchConfig(8, 3)))
