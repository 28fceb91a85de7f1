"""Return-conditioned sequence policies for offline recommendation.

A transformer reads (state, return-to-go, action) tokens, learns an
expectile estimate of the best return reachable from each context, and at
inference searches over history lengths so it can stitch together the good
parts of logged sessions.
"""
from .kernels import BACKEND

__version__ = "0.1.0"

__all__ = ["BACKEND", "__version__"]
