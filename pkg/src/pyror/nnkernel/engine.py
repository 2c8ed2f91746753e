"""Graph execution: parameters, forward/backward over a LayerGraph, gradcheck."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .. import graph as G
from ..graph import LayerGraph
from ..stochdepth import SurvivalSchedule
from . import ops

LEARNED = ("weight", "bias", "gamma", "beta")
BUFFERS = ("running_mean", "running_var")


class StaleCacheError(RuntimeError):
    pass


class ParamStore:
    """Per-node named tensors plus gradients for the learned ones.

    ``version`` is bumped by every in-place update so activation caches from
    an earlier forward pass can be recognised as stale.
    """

    def __init__(self, dtype=np.float32):
        self.dtype = np.dtype(dtype)
        self.tensors: dict[int, dict[str, np.ndarray]] = {}
        self.grads: dict[int, dict[str, np.ndarray]] = {}
        self.version = 0

    def set(self, node_id, name, value):
        value = np.ascontiguousarray(value, dtype=self.dtype)
        self.tensors.setdefault(node_id, {})[name] = value
        if name in LEARNED:
            self.grads.setdefault(node_id, {})[name] = np.zeros_like(value)

    def __getitem__(self, node_id):
        return self.tensors[node_id]

    def __contains__(self, node_id):
        return node_id in self.tensors

    def learned(self):
        for node_id in sorted(self.tensors):
            for name in LEARNED:
                if name in self.tensors[node_id]:
                    yield node_id, name, self.tensors[node_id][name], self.grads[node_id][name]

    def zero_grad(self):
        for grads in self.grads.values():
            for g in grads.values():
                g.fill(0)

    def bump(self):
        self.version += 1

    def num_learned(self) -> int:
        return sum(p.size for _, _, p, _ in self.learned())

    def copy(self, dtype=None) -> "ParamStore":
        out = ParamStore(dtype or self.dtype)
        for node_id in sorted(self.tensors):
            for name, value in self.tensors[node_id].items():
                out.set(node_id, name, value.copy())
        return out

    def allclose(self, other: "ParamStore", exact=True) -> bool:
        if self.tensors.keys() != other.tensors.keys():
            return False
        for node_id, named in self.tensors.items():
            if named.keys() != other.tensors[node_id].keys():
                return False
            for name, value in named.items():
                b = other.tensors[node_id][name]
                same = np.array_equal(value, b) if exact else np.allclose(value, b)
                if not same or value.dtype != b.dtype:
                    return False
        return True


def init_params(graph: LayerGraph, seed: int = 0, dtype=np.float32) -> ParamStore:
    """He fan-in Gaussian weights, unit/zero BN affine, zero linear bias."""
    rng = np.random.default_rng(seed)
    store = ParamStore(dtype)
    for node in graph.nodes:
        p = node.params
        if node.kind in (G.CONV, G.PROJECT):
            k = p.get("kernel", 1)
            fan_in = p["in_channels"] * k * k
            shape = (p["out_channels"], p["in_channels"], k, k)
            store.set(node.id, "weight", rng.standard_normal(shape) * np.sqrt(2.0 / fan_in))
        elif node.kind == G.BATCHNORM:
            c = p["channels"]
            store.set(node.id, "gamma", np.ones(c))
            store.set(node.id, "beta", np.zeros(c))
            store.set(node.id, "running_mean", np.zeros(c))
            store.set(node.id, "running_var", np.ones(c))
        elif node.kind == G.LINEAR:
            d, m = p["in_features"], p["out_features"]
            store.set(node.id, "weight", rng.standard_normal((m, d)) * np.sqrt(1.0 / d))
            store.set(node.id, "bias", np.zeros(m))
    return store


@dataclass
class ForwardCache:
    graph: LayerGraph
    version: int
    ops: dict
    dropped: frozenset
    scale: dict
    input_shape: tuple
    shapes: dict        # node id -> per-sample output shape


def _check_finite(node_id, value):
    if not np.all(np.isfinite(value)):
        raise FloatingPointError(f"non-finite values produced at node {node_id}")


def forward(graph: LayerGraph, params: ParamStore, x, mode="train", sd_mask=None,
            sd_probs: SurvivalSchedule | None = None, debug=False, update_stats=True):
    """Evaluate ``graph`` on a (B, C, H, W) batch; returns ``(logits, cache)``.

    ``sd_mask`` (train mode only) holds one keep flag per final-level block; a
    dropped block passes only its shortcut and its branch is never computed.
    In eval mode ``sd_probs`` scales each residual branch by its survival
    probability.
    """
    if mode not in ("train", "eval"):
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
    train = mode == "train"
    x = np.asarray(x, dtype=params.dtype)
    if x.ndim != 4 or tuple(x.shape[1:2]) != tuple(graph.input_shape[:1]):
        raise ValueError(f"input of shape {x.shape} does not match graph input "
                         f"(B, {', '.join(map(str, graph.input_shape))})")
    N = len(graph.final_block_spans)

    dropped = set()
    skip = set()
    if sd_mask is not None:
        if not train:
            raise ValueError("sd_mask is only valid in train mode")
        sd_mask = np.asarray(sd_mask, dtype=bool)
        if sd_mask.shape != (N,):
            raise ValueError(f"sd_mask must have length {N}, got {sd_mask.shape}")
        for l in np.flatnonzero(~sd_mask):
            dropped.add(graph.final_adds[l])
            skip |= graph.branch_members[l]
    scale = {}
    if sd_probs is not None and not train:
        if len(sd_probs) != N:
            raise ValueError(f"sd_probs must have length {N}, got {len(sd_probs)}")
        scale = dict(zip(graph.final_adds, sd_probs.probs))

    values = {graph.input_id: x}
    caches = {graph.input_id: None}
    shapes = {graph.input_id: x.shape[1:]}
    for node in graph.nodes:
        nid = node.id
        if nid == graph.input_id or nid in skip:
            continue
        if nid in dropped:
            values[nid] = values[node.inputs[1]]
            caches[nid] = "dropped"
            shapes[nid] = values[nid].shape[1:]
            continue
        ins = [values[i] for i in node.inputs]
        k = node.kind
        if k in (G.CONV, G.PROJECT):
            out, c = ops.conv_forward(ins[0], params[nid]["weight"], node.params["stride"],
                                      node.params.get("padding", 0))
        elif k == G.BATCHNORM:
            t = params[nid]
            out, c = ops.batchnorm_forward(ins[0], t["gamma"], t["beta"], t["running_mean"],
                                           t["running_var"], train, update_stats=update_stats)
        elif k == G.RELU:
            out, c = ops.relu_forward(ins[0])
        elif k == G.ADD:
            if nid in scale:
                p = scale[nid]
                out, c = p * ins[0] + ins[1], ("scaled", p)
                for extra in ins[2:]:
                    out = out + extra
            else:
                out = ins[0]
                for extra in ins[1:]:
                    out = out + extra
                c = None
        elif k == G.AVGPOOL:
            out, c = ops.avgpool_forward(ins[0], node.params["kernel"])
        elif k == G.GLOBAL_AVGPOOL:
            out, c = ops.global_avgpool_forward(ins[0])
        elif k == G.ZEROPAD:
            out, c = ops.zeropad_forward(ins[0], node.params["extra"])
        elif k == G.IDENTITY:
            out, c = ins[0], None
        elif k == G.LINEAR:
            t = params[nid]
            out, c = ops.linear_forward(ins[0], t["weight"], t["bias"])
        else:
            raise ValueError(f"node {nid}: cannot execute kind {k!r}")
        if debug:
            _check_finite(nid, out)
        values[nid] = out
        caches[nid] = c
        shapes[nid] = out.shape[1:]

    cache = ForwardCache(graph, params.version, caches, frozenset(dropped), scale, x.shape, shapes)
    return values[graph.output_id], cache


def _accumulate(grads, node_id, g):
    prev = grads.get(node_id)
    grads[node_id] = g if prev is None else prev + g


def backward(graph: LayerGraph, params: ParamStore, cache: ForwardCache, grad_logits):
    """Reverse-mode pass; fills ``params.grads`` and returns d(loss)/d(input)."""
    if cache.graph is not graph and cache.graph != graph:
        raise StaleCacheError("cache was produced by a different graph")
    if cache.version != params.version:
        raise StaleCacheError(f"cache is from parameter version {cache.version}, "
                              f"store is at {params.version}")
    params.zero_grad()
    grads = {graph.output_id: np.asarray(grad_logits, dtype=params.dtype)}
    for node in reversed(graph.nodes):
        nid = node.id
        if nid not in cache.ops or nid == graph.input_id:
            continue
        g = grads.pop(nid, None)
        if g is None:
            continue
        c = cache.ops[nid]
        k = node.kind
        ins = node.inputs
        if k in (G.CONV, G.PROJECT):
            dx, dw = ops.conv_backward(g, c)
            params.grads[nid]["weight"][...] = dw
            _accumulate(grads, ins[0], dx)
        elif k == G.BATCHNORM:
            dx, dgamma, dbeta = ops.batchnorm_backward(g, c)
            params.grads[nid]["gamma"][...] = dgamma
            params.grads[nid]["beta"][...] = dbeta
            _accumulate(grads, ins[0], dx)
        elif k == G.RELU:
            _accumulate(grads, ins[0], ops.relu_backward(g, c))
        elif k == G.ADD:
            if c == "dropped":
                _accumulate(grads, ins[1], g)
            else:
                branch = c[1] * g if isinstance(c, tuple) else g
                _accumulate(grads, ins[0], branch)
                for src in ins[1:]:
                    _accumulate(grads, src, g)
        elif k == G.AVGPOOL:
            _accumulate(grads, ins[0], ops.avgpool_backward(g, c))
        elif k == G.GLOBAL_AVGPOOL:
            _accumulate(grads, ins[0], ops.global_avgpool_backward(g, c))
        elif k == G.ZEROPAD:
            _accumulate(grads, ins[0], ops.zeropad_backward(g, c))
        elif k == G.IDENTITY:
            _accumulate(grads, ins[0], g)
        elif k == G.LINEAR:
            dx, dw, db = ops.linear_backward(g, c)
            params.grads[nid]["weight"][...] = dw
            params.grads[nid]["bias"][...] = db
            _accumulate(grads, ins[0], dx)
    dx = grads.get(graph.input_id)
    if dx is None:
        dx = np.zeros(cache.input_shape, dtype=params.dtype)
    return dx


# -- gradient check ----------------------------------------------------------

@dataclass
class GradcheckReport:
    max_rel_error: float
    worst_param: str
    checked: int
    tolerance: float
    skipped_kinks: int = 0
    dtype: str = "float64"

    @property
    def passed(self) -> bool:
        return self.max_rel_error < self.tolerance

    def summary(self) -> str:
        verdict = "PASS" if self.passed else "FAIL"
        return (f"max rel err {self.max_rel_error:.3e} over {self.checked} {self.dtype} params "
                f"(worst: {self.worst_param}; {self.skipped_kinks} kink probes skipped); "
                f"max rel err < {_short_float(self.tolerance)}: {verdict}")


def _short_float(v) -> str:
    # 1e-4 rather than 0.0001 or 1e-04
    mant, _, exp = f"{v:.6e}".partition("e")
    mant = mant.rstrip("0").rstrip(".")
    return f"{mant}e{int(exp)}"


def relative_error(analytic, numeric):
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), 1e-8)


def _relu_gates(graph, cache):
    return [cache.ops[n.id] for n in graph.nodes
            if n.kind == G.RELU and n.id in cache.ops]


def wide_float():
    """Widest hardware float: x87 extended precision where numpy has it, else float64."""
    if np.finfo(np.longdouble).eps < np.finfo(np.float64).eps:
        return np.dtype(np.longdouble)
    return np.dtype(np.float64)


def gradcheck(graph: LayerGraph, tolerance=1e-4, seed=0, samples=200, batch=4,
              step=1e-4, sd_mask=None, input_shape=None, dtype=None) -> GradcheckReport:
    """Central differences against ``backward`` on random data.

    Compares ``samples`` randomly chosen learned scalars for the mean softmax
    cross-entropy of a random batch (train-mode batch norm, optional
    stochastic-depth mask).  A coordinate whose +/- ``step`` probes switch any
    ReLU gate straddles a kink where the difference quotient is meaningless;
    it is counted in ``skipped_kinks`` and replaced by a fresh draw.

    ``dtype`` defaults to ``wide_float()``.  Batch norm makes many gradients
    exactly zero (a per-channel shift feeding another batch norm cancels), and
    for those the numeric side is pure rounding noise: about 1e-12 in float64,
    which the 1e-8 floor of the relative error turns into ~1e-4.  Extended
    precision pushes that noise far below the tolerance.
    """
    dtype = wide_float() if dtype is None else np.dtype(dtype)
    if dtype.itemsize < 8:
        raise ValueError(f"gradcheck needs at least 64-bit floats, got {dtype}")
    rng = np.random.default_rng(seed)
    params = init_params(graph, seed, dtype=dtype)
    # move BN affine terms off their trivial init so every path is exercised
    for node in graph.nodes:
        if node.kind == G.BATCHNORM:
            c = node.params["channels"]
            params[node.id]["gamma"][...] = rng.uniform(0.5, 1.5, c)
            params[node.id]["beta"][...] = rng.normal(0, 0.2, c)
    shape = tuple(input_shape or graph.input_shape)
    x = rng.standard_normal((batch,) + shape)
    labels = rng.integers(0, graph.config.num_classes, batch)

    def probe():
        logits, cache = forward(graph, params, x, "train", sd_mask=sd_mask, update_stats=False)
        return logits, cache

    logits, cache = probe()
    base_gates = _relu_gates(graph, cache)
    backward(graph, params, cache, ops.softmax_cross_entropy(logits, labels)[1])

    entries = list(params.learned())
    sizes = np.array([p.size for _, _, p, _ in entries])
    offsets = np.concatenate([[0], np.cumsum(sizes)])
    order = rng.permutation(int(sizes.sum()))

    worst, worst_name, checked, kinks = 0.0, "", 0, 0
    for flat in order:
        if checked >= samples:
            break
        e = int(np.searchsorted(offsets, flat, side="right") - 1)
        nid, name, p, g = entries[e]
        idx = int(flat - offsets[e])
        view = p.reshape(-1)
        orig = view[idx]
        view[idx] = orig + step
        z_up, cache_up = probe()
        view[idx] = orig - step
        z_down, cache_down = probe()
        view[idx] = orig
        gates = zip(base_gates, _relu_gates(graph, cache_up), _relu_gates(graph, cache_down))
        if any(not (np.array_equal(b, u) and np.array_equal(b, d)) for b, u, d in gates):
            kinks += 1
            continue
        numeric = ((ops.cross_entropy(z_up, labels) - ops.cross_entropy(z_down, labels))
                   / (2 * dtype.type(step)))
        err = float(relative_error(g.reshape(-1)[idx], numeric))
        checked += 1
        if err >= worst:
            worst, worst_name = err, f"node {nid} {name}[{idx}]"
    return GradcheckReport(worst, worst_name, checked, tolerance, kinks, dtype.name)
