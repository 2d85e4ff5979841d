"""Constrained Bayesian flux inversion at desk scale.

Subpackages cover the pipeline end to end: harmonic decomposition of
bottom-up fluxes into a linear basis (``decomposition``), a fitted
linear link from GPP to solar-induced fluorescence (``sif_link``), a
toy transport operator and precomputed-Jacobian loader (``transport``),
the hierarchical prior with sign constraints (``prior``), the grouped
observation error model (``data_model``), the Gibbs/HMC/slice samplers
(``samplers``), simulation experiments (``osse``), scoring
(``evaluation``), and a command-line driver (``cli``).
"""

__version__ = "0.1.0"
