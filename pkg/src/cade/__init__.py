"""Constraint-aware actor with marginal-gain advantage estimation.

Training stack for submodular-reward, cost-constrained tasks: a recurrent
actor with reward/cost estimator heads, a homography-based semantic
dynamics model, a Lagrangian constraint loop, and a sampling safety layer,
all built on a small reverse-mode autodiff engine.
"""

__version__ = "0.1.0"
