"""Gather-scatter sparse convolution on 2-D pixel coordinates."""

from .conv import ConvParams, MAddCounter, conv_backward, conv_forward, sparse_conv
from .refiner import (
    RefinerConfig,
    RefinerParams,
    build_hierarchy,
    init_refiner_params,
    refiner_backward,
    refiner_forward,
    run_refiner,
)
from .tensor import CoordIndex, KernelMap, SparseTensor, build_kernel_map, downsample_coords, kernel_offsets
