"""Simulation and verification tools for a CIR process with a fixed delay in the drift.

The central object is the square-root diffusion

    dX(t) = [a (gamma(t) - X(t)) + b X(t - tau)] dt + sigma sqrt(X(t)) dW(t)

started from a positive deterministic-or-random segment on [t0 - tau, t0].
``delay_cir.scheme`` advances the square-root transform Y = sqrt(X) with a
drift-implicit Euler rule whose positive root is available in closed form, so
every simulated path stays strictly positive.  ``delay_cir.cir_analytics``
collects closed-form results for the classical (b = 0) process used as test
oracles, and ``delay_cir.experiments`` contains the Monte Carlo studies
(strong-convergence rates, mean consistency, positivity and comparison
censuses).  ``delay_cir.cli`` exposes the experiment runner as a command-line
tool.
"""

from __future__ import annotations

__version__ = "0.1.0"

__all__ = ["__version__"]
