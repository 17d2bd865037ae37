"""Neural stochastic contraction metrics: sampling, learning and simulation."""

__version__ = "0.1.0"
