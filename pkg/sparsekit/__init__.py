"""
sparsekit: the SparseK differentiable top-k operator, SparseK attention with a
fixed-size recurrent KV cache, and a small trainer that exercises both.
"""

__version__ = "0.1.0"
