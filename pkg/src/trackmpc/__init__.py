"""Nonlinear tracking MPC toolkit for periodic target signals.

Artificial-reference tracking MPC with offline-synthesized terminal
ingredients, online-optimized terminal set size, partially decoupled
planner/tracker operation and closed-loop certificate audits.
"""

__version__ = "0.1.0"
