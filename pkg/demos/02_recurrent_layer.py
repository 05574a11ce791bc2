"""A recurrent convolutional layer is a tied-weight feed-forward stack.

Runs one layer for T iterations, then rebuilds the same computation as an
explicit stack of T+1 layers sharing one recurrent kernel, and shows the
outputs agree and that the shared kernel's gradient is the sum over the
copies. Also prints the range of path lengths through the unrolled graph.
"""

import numpy as np

from rclnet.layers import REC_SPEC, RclParams, path_lengths, rcl_backward, rcl_forward, rcl_unrolled_edges
from rclnet.tensor import ConvSpec, conv2d, conv2d_backward

rng = np.random.default_rng(0)
T = 3
params = RclParams(
    ff_kernels=rng.standard_normal((4, 2, 1, 1)),
    rec_kernels=0.3 * rng.standard_normal((4, 4, 3, 3)),
    bias=np.zeros(4),
    T=T,
)
u = rng.standard_normal((1, 2, 5, 6))
out, cache = rcl_forward(u, params)

# the explicit stack
f = conv2d(u, params.ff_kernels, params.bias, ConvSpec(1, 1))
states, pre = [np.maximum(f, 0)], [f]
for _ in range(T):
    a = f + conv2d(states[-1], params.rec_kernels, None, REC_SPEC)
    pre.append(a)
    states.append(np.maximum(a, 0))
print("max |layer - unrolled stack| =", np.abs(out - states[-1]).max())

g = rng.standard_normal(out.shape)
_, grads = rcl_backward(g, cache, params)
per_copy = []
for t in range(T, 0, -1):
    ga = g * (pre[t] > 0)
    g, dk, _ = conv2d_backward(ga, states[t - 1], params.rec_kernels, REC_SPEC)
    per_copy.append(dk)
print("max |shared-kernel gradient - sum of copy gradients| =", np.abs(grads["rec_kernels"] - sum(per_copy)).max())

lengths = path_lengths(rcl_unrolled_edges(T), "u", ("x", T))
print(f"paths from input to output have lengths {sorted(lengths)} (1 to T+1 = {T + 1})")
