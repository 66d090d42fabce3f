"""Longitudinal volume generation with a VQ autoencoder and a latent neural ODE.

Stage 1 (``vqgan``) compresses volumes into quantised latent grids; stage 2
(``temporal``) extrapolates those grids in continuous time; ``survival`` turns
code frequencies into Cox biomarkers. ``phantom`` supplies synthetic cohorts.
"""

__version__ = "0.1.0"
