"""Simulated branch shadowing against enclave victims, plus the Zigzagger countermeasure."""

__version__ = "0.1.0"
