"""Multitask super-resolution and quality enhancement of intra-coded frames."""

from .model import (
    QE,
    SR,
    MTLNet,
    NetworkConfig,
    ShapeError,
    build_model,
    count_parameters,
    forward_qe,
    forward_shared,
    forward_sr,
    pixel_shuffle,
)
from .priors import concat_prior, l1_loss, make_qp_map, mtl_loss, sequential_restore

__version__ = "0.1.0"
