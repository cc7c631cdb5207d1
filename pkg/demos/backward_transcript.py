"""
One backward pass, two implementations
======================================

A 2-2-2 network with lateral inhibition at the output. The production
backward pass (vectorised, cached S-PSP tables) is compared with the
straight-line reference written with plain Python loops.
"""

import numpy as np

from hm2bp import NeuronParams, TimeGrid, backward_pass, dense_network, forward_pass
from hm2bp.lif import raster_to_trains
from hm2bp.reference import reference_gradients

grid = TimeGrid(200.0, 1.0)
params = [NeuronParams(64, 8, 6.0), NeuronParams(64, 8, 8.0)]
net = dense_network([2, 2, 2], params, lateral_w0=-0.5)
net.weights[1] = np.array([[3.0, 2.0], [1.5, 3.5]])
net.weights[2] = np.array([[2.5, 1.0], [0.5, 3.0]])

inputs = (np.random.default_rng(0).random((200, 2)) < 0.3).astype(float)
fwd = forward_pass(net, inputs, grid)
targets = np.array([20.0, 3.0])
print("firing counts per layer:", [c.tolist() for c in fwd.counts])
print("S-PSP table, output layer:\n", fwd.tables[2].e)

bundle = backward_pass(net, fwd, targets)
trains = [[list(t.times) for t in raster_to_trains(r, grid.dt_ms)] for r in fwd.rasters]
ref_g, ref_d = reference_gradients([w.tolist() for w in net.weights[1:]], trains,
                                   [(64, 8, 6.0), (64, 8, 8.0)], list(targets), -0.5)
for k, i in enumerate((1, 2)):
    print(f"\nlayer {i} delta      ", bundle.deltas[i])
    print(f"layer {i} gradient\n", bundle.grads[i])
    rel = np.max(np.abs(bundle.grads[i] - ref_g[k]) / np.maximum(np.abs(ref_g[k]), 1e-300))
    print(f"max relative difference from reference: {rel:.2e}")
