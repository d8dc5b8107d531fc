"""Analysis toolkit for isometric rehabilitation-robot trials (sEMG, wrench, game traces)."""

__version__ = "0.1.0"
