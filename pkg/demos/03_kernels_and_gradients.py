"""The numpy engine: convolution oracle, batch norm and gradient checking.

Run with ``python demos/03_kernels_and_gradients.py``.
"""

# %% convolution: im2col GEMM against plain loops
import numpy as np

from pyror.nnkernel import conv_forward, conv_naive

rng = np.random.default_rng(0)
x = rng.standard_normal((2, 3, 9, 9))
w = rng.standard_normal((4, 3, 3, 3))
fast, _ = conv_forward(x, w, stride=2, padding=1)
slow = conv_naive(x, w, stride=2, padding=1)
print("conv output", fast.shape, "max abs diff vs loops:", np.abs(fast - slow).max())

# %% batch norm in train mode normalises each channel to (beta, gamma^2)
from pyror.nnkernel import ops

h = rng.normal(5.0, 3.0, (16, 3, 6, 6))
gamma, beta = np.array([0.5, 1.0, 2.0]), np.array([-1.0, 0.0, 1.0])
out, _ = ops.batchnorm_forward(h, gamma, beta, np.zeros(3), np.ones(3), train=True)
print("channel means", out.mean(axis=(0, 2, 3)).round(4), "variances", out.var(axis=(0, 2, 3)).round(4))

# %% gradient check on a whole depth-8 network
# central differences with step 1e-4 on 200 random parameters.  Coordinates
# whose probes flip a ReLU are skipped, and the check runs in extended
# precision where available so that exactly-zero gradients stay below the
# 1e-8 floor of the relative error.
from pyror.archspec import ArchConfig
from pyror.graph import build_graph
from pyror.nnkernel import gradcheck

for variant in ("preact", "pyramid-bn"):
    g = build_graph(ArchConfig(8, 3, variant, input_shape=(3, 8, 8)))
    print(variant, gradcheck(g).summary())
    print(variant, "with block 2 dropped:",
          gradcheck(g, sd_mask=np.array([True, False, True])).summary())
