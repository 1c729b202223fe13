"""Second-order optimality analysis of sub-Riemannian trajectories."""

__version__ = "0.1.0"
