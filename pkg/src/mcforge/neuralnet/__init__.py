from .network import Network, layer, forward, backward, ShapeError
from .optim import AdamState, init_adam, adam_step
from .checkpoint import save_network, load_network
from .gradcheck import grad_check

__all__ = [
    "Network", "layer", "forward", "backward", "ShapeError",
    "AdamState", "init_adam", "adam_step",
    "save_network", "load_network",
    "grad_check",
]
