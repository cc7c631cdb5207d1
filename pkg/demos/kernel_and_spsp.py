"""
Post-synaptic kernel, S-PSP and the alpha-hat ratio
===================================================

Walks through the closed-form response of a LIF neuron to one input spike,
the spike-train level PSP that the backward pass is built on, and how the
ratio alpha-hat = e / (o_pre * o_post) behaves as firing rates change.
"""

import numpy as np

from hm2bp import NeuronParams, SpikeTrain, psp_kernel, spsp
from hm2bp.spsp import response_matrix
from hm2bp.verify import kernel_by_quadrature

p = NeuronParams(tau_m=8.0, tau_s=2.0)

# eps(s, t): s = time since the neuron's last reset, t = time since the input spike.
# Before any reset both clocks run together, so eps(t, t) is the plain PSP shape.
t = np.linspace(0, 30, 7)
print("t       eps(t,t)")
for ti, v in zip(t, psp_kernel(t, t, p)):
    print(f"{ti:5.1f}   {v:.6f}")

# the closed form against direct integration of the membrane equation
print("\neps(4,4) closed form", psp_kernel(4.0, 4.0, p),
      " quadrature", kernel_by_quadrature(4.0, 4.0, p))

# A reset at time 3 cuts the contribution of an input at time 1: only the
# current still flowing after the reset counts towards the next spike.
pre, post = SpikeTrain([1.0]), SpikeTrain([3.0, 9.0])
print("\nS-PSP of one input at 1 ms onto post spikes at 3 and 9 ms:", spsp(pre, post, p))
print("  first post spike sees eps(3, 2)  =", psp_kernel(3.0, 2.0, p))
print("  second post spike sees eps(6, 8) =", psp_kernel(6.0, 8.0, p))

# %%
# alpha-hat under rate changes.
# With the post rate fixed, doubling the pre rate leaves alpha-hat roughly
# unchanged. Doubling both rates halves it: each post spike only collects
# input since the previous reset, so e grows with o_pre alone.
rng = np.random.default_rng(0)
params = NeuronParams()


def mean_alpha(p_pre, p_post, T=2000, n=20):
    vals = []
    for _ in range(n):
        pre = (rng.random((T, 1)) < p_pre).astype(float)
        post = (rng.random((T, 1)) < p_post).astype(float)
        e = (response_matrix(post, params, 1.0) @ pre)[0, 0]
        vals.append(e / (pre.sum() * post.sum()))
    return np.mean(vals)


print("\nrate     alpha-hat (pre only)   alpha-hat (pre and post)")
for r in [1 / 16, 1 / 8, 1 / 4, 1 / 2, 1.0]:
    print(f"{r:6.4f}   {mean_alpha(r, 0.1):.5f}                {mean_alpha(r, r):.5f}")
