"""Compile BPMN collaboration models into simulated multi-method smart contracts."""

__version__ = "0.1.0"
