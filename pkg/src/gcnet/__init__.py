"""Reparameterizable two-branch segmentation networks in numpy."""
from .network import NetworkConfig, Network, build_gcnet, contract_network, network_forward
from .reparam import GCBlock, contract_gcblock
from .serialize import load_model, save_model

__all__ = ["NetworkConfig", "Network", "build_gcnet", "contract_network", "network_forward",
           "GCBlock", "contract_gcblock", "load_model", "save_model"]
__version__ = "0.1.0"
