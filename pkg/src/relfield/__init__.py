"""Relative feature fields: learning co-occurrence priors and searching with them."""

__version__ = "0.1.0"
