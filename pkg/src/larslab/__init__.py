"""Pooled low-rank subspace adapters on a ledger-instrumented autodiff engine."""

__version__ = "0.1.0"
