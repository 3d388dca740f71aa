"""ECTR - environment-conditioned tail reweighting for TV-based invariant risk minimization."""

__version__ = "0.1.0"
