"""Minimal effective Gibbs ansatz laboratory for small Hubbard clusters."""

__version__ = "0.1.0"
