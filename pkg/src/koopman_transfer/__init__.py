"""Koopman-embedding transfer study on the Lorenz system.

Simulation, a Koopman autoencoder, PCA baselines, a small transformer, a
grid-based safety oracle and the statistics used to compare them, all on
numpy with a hand-written autodiff core.
"""

__version__ = "0.1.0"
