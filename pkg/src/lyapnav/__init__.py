"""Safe goal-conditioned navigation with a learned Lyapunov runtime monitor."""

__version__ = "0.1.0"
