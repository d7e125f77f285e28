"""Feature-pyramid neck with intra-layer context and across-layer weighting, plus a desk-scale detector and metrics."""

__version__ = "0.1.0"
