"""qpat: a digital twin of a tomographic photoacoustic imaging system.

Forward chain: phantom -> Monte Carlo fluence -> initial pressure -> k-space
acoustic propagation -> delay-and-sum reconstruction. Inverse side:
calibration-based absorption estimators, spectral unmixing, and
integrating-sphere slab characterisation, plus the evaluation metrics used
to score them.
"""

__version__ = "0.1.0"
