"""3-D CNN classification of brain volumes with attribution and atlas reports."""

__version__ = "0.1.0"

from .atlas import Atlas, aggregate_relevance, top_k
from .attribution import AttributionMap, compute_map
from .model import Network, NetworkSpec, default_spec, forward, init_network, predict

__all__ = [
    "Atlas",
    "AttributionMap",
    "Network",
    "NetworkSpec",
    "aggregate_relevance",
    "compute_map",
    "default_spec",
    "forward",
    "init_network",
    "predict",
    "top_k",
]
