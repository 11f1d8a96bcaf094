"""Identify energy-storage agents by differentiating through their dispatch QP."""

__version__ = "0.1.0"
