"""Hierarchical point-set feature learning: sampling, grouping, set abstraction,
feature propagation and a small differentiable MLP engine."""

__version__ = "0.1.0"

from .archlang import NetworkBlueprint, parse_blueprint, render_blueprint, validate_chain
from .cloud import MetricConfig, MetricMode, PointCloud, normalize_unit_ball, read_cloud, write_cloud
from .network import Network, NetworkConfig, network_forward
from .sampling import farthest_point_sample

__all__ = [
    "MetricConfig",
    "MetricMode",
    "Network",
    "NetworkBlueprint",
    "NetworkConfig",
    "PointCloud",
    "farthest_point_sample",
    "network_forward",
    "normalize_unit_ball",
    "parse_blueprint",
    "read_cloud",
    "render_blueprint",
    "validate_chain",
    "write_cloud",
]
