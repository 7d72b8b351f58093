"""Mixed-precision pipeline planning for LLM serving on heterogeneous clusters."""

__version__ = "0.1.0"
