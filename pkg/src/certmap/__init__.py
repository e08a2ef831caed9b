"""Certified frame-to-frame registration and certified distance mapping."""

import warnings

# numba probes an outdated system TBB before falling back to OpenMP; the fallback is fine
warnings.filterwarnings("ignore", message="The TBB threading layer requires")

__version__ = "0.1.0"
