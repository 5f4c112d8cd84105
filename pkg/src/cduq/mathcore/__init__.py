"""Numeric core: tensors, autodiff, RNG streams, optimizer, parameter store."""

from .optim import Adam
from .params import ParamStore
from .rng import RngStream
from .tensor import (
    Tensor,
    add,
    affine,
    backward,
    block_mean_rows,
    concat_rows,
    diff_cols,
    dropout_mask,
    gather_rows,
    hconcat,
    mean_all,
    mean_rows,
    mse,
    mul,
    mul_rowmask,
    relu,
    reshape,
    scale,
    select_cols,
    sigmoid,
    slice_rows,
    sub,
    sum_all,
    tile_rows,
    transpose2d,
)

__all__ = [
    "Adam",
    "ParamStore",
    "RngStream",
    "Tensor",
    "add",
    "affine",
    "backward",
    "block_mean_rows",
    "concat_rows",
    "diff_cols",
    "dropout_mask",
    "gather_rows",
    "hconcat",
    "mean_all",
    "mean_rows",
    "mse",
    "mul",
    "mul_rowmask",
    "relu",
    "reshape",
    "scale",
    "select_cols",
    "sigmoid",
    "slice_rows",
    "sub",
    "sum_all",
    "tile_rows",
    "transpose2d",
]
