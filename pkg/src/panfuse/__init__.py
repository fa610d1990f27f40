"""panfuse: pan-sharpening toolkit.

Unfolded fusion network with masked-autoencoder priors, classical fusion
baselines, Wald-protocol simulation, and fusion quality metrics.
"""

__version__ = "0.1.0"
