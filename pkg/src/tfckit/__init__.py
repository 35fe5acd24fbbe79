"""Temporal fully connected operators, host video networks, an analytical
cost model, a synthetic object-permanence benchmark, and a small training
harness, built on a numpy reverse-mode autodiff core."""

__version__ = "0.1.0"
