"""Two-curve affine short-rate model.

Modules: ``affine`` (factors, Riccati solver, bonds), ``pricing`` (FRAs,
forward MGF, Fourier caplets), ``montecarlo`` (simulation oracles),
``calibration`` (synthetic quotes and staged fitting) and ``cli``.
"""

__version__ = "0.1.0"
