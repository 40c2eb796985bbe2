"""Hierarchical Planner/Toolcaller rollouts with GRPO training utilities."""

__version__ = "0.1.0"
