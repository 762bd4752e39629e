"""Noise-aware set-consensus network for robust two-view essential matrix estimation.

Subpackages split by concern: deterministic epipolar geometry (geometry,
triangulation), the differentiable weighted-DLT model head (dlt), a minimal
reverse-mode tape engine (autodiff), the set network (network), losses (loss),
synthetic data (synthdata), optimization (training), evaluation (evalbench),
and the command line front end (cli).
"""

__version__ = "0.1.0"
