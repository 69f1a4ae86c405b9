"""Lift-and-project policy learning over programmatic policy classes.

The core loop alternates a neural policy-gradient lift (a residual actor
trained with DDPG around a frozen programmatic policy) with a projection
back onto the programmatic class (DAgger-style imitation of the lifted
policy). Built-in classic-control environments, a PID-oriented policy
DSL, regression-tree policies, and a small experiment CLI are included.
"""

__version__ = "0.1.0"
