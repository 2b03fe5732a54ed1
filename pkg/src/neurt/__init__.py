"""Differentiable surface ray tracing: two-level SDF geometry, neural basis BSDFs and
learned or known lighting, reconstructed from posed images by analysis-by-synthesis."""

__version__ = "0.1.0"
