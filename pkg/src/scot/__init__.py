"""Structural-causal optimal transport: solvers and experiment tooling."""

__version__ = "0.1.0"
