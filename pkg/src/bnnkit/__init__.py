"""Posterior sampling for fully-connected regression networks.

Library surface: numerics (rng streams and primitives), data (ingestion and
splits), network (model, log posterior, gradients, symmetry transforms),
training (Adam, deep ensembles), sampling (HMC/NUTS chains), diagnostics
(R-hat family, ESS, LPPD, coverage, layerwise analyses), baselines, and a
CLI experiment harness in bnnkit.cli.
"""

__version__ = "0.1.0"
