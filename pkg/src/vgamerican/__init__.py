"""American put pricing under the variance gamma model.

Engines: Carr-Madan FFT European prices (``euro_fft``), a finite-difference
PIDE solver (``pide_fd``), Longstaff-Schwartz Monte Carlo (``mc_lsm``), an
effective lognormal premium transfer (``bms_approx``) and the learned
correction method (``quad_core``, ``correction_learn``, ``pricer_cli``).
"""
from .errors import PricingError
from .euro_fft import EuroCurve, FftConfig, build_curve, euro_put
from .pricer_cli import MainPricer, price_with
from .vg_model import MarketEnv, VgParams

__version__ = "0.1.0"

__all__ = [
    "EuroCurve",
    "FftConfig",
    "MainPricer",
    "MarketEnv",
    "PricingError",
    "VgParams",
    "build_curve",
    "euro_put",
    "price_with",
]
