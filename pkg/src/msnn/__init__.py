"""Multi-subspace neural network: ASSOM-initialized convolutional blocks."""
from .assom import ModuleBank, SubspaceModule, train_assom
from .config import ExperimentConfig, load_config
from .data import LabeledSet, load_coil20, load_mnist_idx
from .network import Architecture, MsnnNetwork, init_network, network_forward, predict
from .training import train_msnn

__version__ = "0.1.0"
