"""Bayesian inverse problems with variational-autoencoder posteriors.

The package trains an encoder network to map observations directly to the
mean and Cholesky factor of an approximate Gaussian posterior, using
either a cheap perturbation loss (D+1 forward evaluations) or a sampled
divergence-bound loss (K evaluations), and recovers calibrated posterior
moments through closed-form transforms. Forward models (elementwise
exponential, a finite-element diffusion problem, a lumped-parameter
circulation model), a quasi-Monte Carlo posterior oracle, and Sobol
sensitivity analysis round out the pipeline.
"""

__version__ = "0.1.0"

from . import backend, bayes, forward, gsa, linalg, losses, nnet, qmc  # noqa: F401
