"""Spiking neural network training by backpropagating firing-count errors.

Leaky integrate-and-fire simulation on a discrete grid, spike-train level
post-synaptic potentials, a rate-coded backward pass with lateral-inhibition
correction, Adam, and loaders for MNIST, EMNIST and N-MNIST.
"""

from .core import (ConfigError, DataError, HM2BPError, LayerSpec, Network, NeuronParams,
                   NumericalError, SpikeTrain, TimeGrid, VerificationError, dense_network,
                   firing_count, last_firing_before)
from .grad import GradientBundle, backward_pass, lateral_gamma, loss
from .lif import ForwardResult, forward_pass, integrate_lif, simulate_layer, srm_membrane
from .optim import AdamState, adam_step, reweight_samples
from .spsp import SpsPTable, alpha_hat, firing_count_estimate, psp_kernel, spsp, tpsp
from .train import RunConfig, evaluate, load_run_config, train

__version__ = "0.1.0"
