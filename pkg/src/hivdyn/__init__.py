"""Longitudinal HIV cohort simulation and causal treatment-effect estimation.

The package simulates CD4/viral-load trajectories from a mechanistic
two-pool model with confounded treatment initiation, and estimates the
treatment effect on CD4 counts with seven estimators: a naive regression,
two IPT-weighted marginal structural models, three linear-increment mixed
models and a mechanistic ODE nonlinear mixed-effects model.
"""

__version__ = "0.1.0"
