"""Non-local vs spatial-aware non-local blocks on a toy feature map.

Shows the residual identity at init, the reduction of the spatial-aware
block to the plain one for a zero map, and how a map biases the
similarity toward marked positions.

Run:  python demos/02_attention_blocks.py
"""

import numpy as np

from sanl.attention import AttentionMap, NonLocalParams, non_local_forward, sanl_forward
from sanl.tensor import Tensor

rng = np.random.default_rng(0)
x = Tensor(rng.normal(size=(4, 6, 6)))

params = NonLocalParams.create(channels=4, seed=0, name="demo.attn")
print("zero-initialized output projection -> block is an identity:",
      np.array_equal(non_local_forward(x, params).data, x.data))

# give the block a nonzero output projection so it actually mixes positions
params.w.weight.data[...] = rng.normal(size=params.w.weight.shape) * 0.3

zero_map = AttentionMap(stride=4, values=np.zeros((6, 6)))
nl = non_local_forward(x, params)
sanl_zero = sanl_forward(x, zero_map, params)
print("zero attention map reduces to the plain block bit-for-bit:",
      np.array_equal(nl.data, sanl_zero.data))

# mark the left half of the map and watch the output move
marked = np.zeros((6, 6))
marked[:, :3] = 1.0
sanl_marked = sanl_forward(x, AttentionMap(stride=4, values=marked), params)
delta = np.abs(sanl_marked.data - nl.data).mean(axis=0)
print("\nmean |output change| per position when the left half is marked:")
print(np.round(delta, 3))
print("\nleft-half mean change: %.4f   right-half mean change: %.4f"
      % (delta[:, :3].mean(), delta[:, 3:].mean()))
print("(both halves move: every position attends to the marked region)")
