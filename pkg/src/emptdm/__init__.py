"""Active target discovery on partially observable grids with a frozen
diffusion prior (permanent memory) corrected online by an h-transform
network (transient memory)."""

__version__ = "0.1.0"
