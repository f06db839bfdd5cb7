"""Market equilibrium of coupled EV traffic and distribution grids with V2G."""

__version__ = "0.1.0"
