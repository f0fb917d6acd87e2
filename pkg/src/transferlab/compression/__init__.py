from .pruning import (
    PruneConfig,
    PruneError,
    density,
    dns_alpha,
    dns_update,
    keep_count,
    prune,
    prune_dns,
    prune_one_shot,
    threshold_mask,
)
from .quantisation import quantise_model
from ..fixedpoint import FixedPointFormat, default_integer_bits, on_grid, quantise_array, quantise_value

__all__ = [
    "PruneConfig",
    "PruneError",
    "density",
    "dns_alpha",
    "dns_update",
    "keep_count",
    "prune",
    "prune_dns",
    "prune_one_shot",
    "threshold_mask",
    "quantise_model",
    "FixedPointFormat",
    "default_integer_bits",
    "on_grid",
    "quantise_array",
    "quantise_value",
]
