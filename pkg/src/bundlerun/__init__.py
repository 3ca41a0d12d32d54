"""bundlerun: one-click re-execution service for packaged computational experiments."""

__version__ = "0.1.0"
