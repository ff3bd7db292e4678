from .autograd import Parameter, Tape, TapeNode, Var, add, concat_channels, record
from .layers import (BatchNorm3d, BlockSpec, Conv3d, DenseLayer, DenseTransition, GlobalAvgPool,
                     Linear, Module, Pool3d, PReLU, PreActBlock, ReLU, ResidualBlock, Sequential,
                     build_block, residual_block)

__all__ = [
    "Parameter", "Tape", "TapeNode", "Var", "add", "concat_channels", "record",
    "BatchNorm3d", "BlockSpec", "Conv3d", "DenseLayer", "DenseTransition", "GlobalAvgPool",
    "Linear", "Module", "Pool3d", "PReLU", "PreActBlock", "ReLU", "ResidualBlock", "Sequential",
    "build_block", "residual_block",
]
