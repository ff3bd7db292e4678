"""3D residual video networks trained with an angular-margin softmax loss."""

__version__ = "0.1.0"
