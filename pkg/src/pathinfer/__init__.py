"""Path inference on graphs from partial, noisy trajectories."""

__version__ = "0.1.0"
