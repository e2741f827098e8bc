"""Neighborhood feature pooling (NFP) for texture-aware image features."""

from .errors import (
    ConfigError,
    DivergenceError,
    FormatError,
    NfpError,
    RegistryError,
    ShapeError,
    StateError,
    ValidationError,
)
from .layer import (
    NfpCache,
    NfpConfig,
    NfpHead,
    affinity_backward,
    affinity_forward,
    affinity_forward_naive,
    fuse,
    neighbor_offsets,
    nfp_backward,
    nfp_forward,
    nfp_pool,
    project,
)
from .metrics import (
    MetricDescriptor,
    MetricGradient,
    list_metrics,
    similarity,
    similarity_gradient,
    to_distribution,
)
from .npy import read_npy, write_npy
from .tensor import Tensor4, global_average_pool, load_image, tensor_create

__version__ = "0.1.0"
