"""Stochastic depth: survival schedule, sampled masks and expected compute.

Run with ``python demos/02_stochastic_depth.py``.
"""

# %% the linear decay rule
# block l survives with probability 1 - (l / L) (1 - p_L); the first block is
# almost always kept and the last one survives with probability p_L
import numpy as np

from pyror.stochdepth import expected_active, linear_decay, sample_mask

s = linear_decay(54, 0.5)
print("p_1 = %.4f, p_27 = %.4f, p_54 = %.4f" % (s.probs[0], s.probs[26], s.probs[53]))

# %% sampled masks
rng = np.random.default_rng(0)
for _ in range(3):
    m = sample_mask(s, rng)
    print("".join("#" if k else "." for k in m), f"{m.mean():.2f} active")

# empirical keep rates track the schedule
draws = np.array([sample_mask(s, rng) for _ in range(20000)])
gap = np.abs(draws.mean(0) - s.as_array()).max()
print(f"largest keep-rate deviation over 20000 draws: {gap:.4f}")

# %% expected compute
# on average 0.75 of the blocks run.  In compute terms the saving is smaller
# than a quarter because the stem, the projections and the head always run.
from pyror.analyzer import count_flops, expected_compute
from pyror.archspec import ArchConfig
from pyror.graph import build_graph

print(f"expected active blocks: {expected_active(s):.4f}")
g = build_graph(ArchConfig(110, 48))
frac = expected_compute(g, s)
print(f"expected forward MACs: {frac:.4f} of {count_flops(g) / 1e6:.1f}M")

# %% effect on the forward pass
# a dropped block passes only its shortcut, and in eval mode every residual
# branch is scaled by its survival probability instead
from pyror.nnkernel import forward, init_params

small = build_graph(ArchConfig(14, 6, input_shape=(3, 16, 16)))
params = init_params(small, 0)
x = np.random.default_rng(1).standard_normal((2, 3, 16, 16)).astype(np.float32)
full, _ = forward(small, params, x, "train", update_stats=False)
none, cache = forward(small, params, x, "train", sd_mask=np.zeros(6, bool), update_stats=False)
print("nodes executed with every block dropped:", len(cache.ops), "of", len(small.nodes))
print("logit change from dropping everything:", float(np.abs(full - none).max()))
