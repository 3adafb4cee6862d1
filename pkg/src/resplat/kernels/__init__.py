"""Compositing kernels: numba-jitted by default with a pure-numpy fallback.

Set RESPLAT_DISABLE_NUMBA=1 to force the numpy path. Both implementations share
one semantic contract (see numpy_impl, the readable reference):

- fragments arrive pre-sorted front to back,
- alpha = min(opacity * exp(power), 0.999),
- compositing stops once transmittance drops below ``stop_t`` (0 disables),
- the tiled path assigns gaussians to 16x16 pixel tiles by a conservative
  screen-space rectangle; the naive path composites every gaussian at every
  pixel and is kept permanently as the oracle.
"""

import os

from . import numpy_impl

_flag = os.environ.get("RESPLAT_DISABLE_NUMBA", "").strip().lower()
NUMBA_DISABLED = _flag in {"1", "true", "yes", "on"}

if NUMBA_DISABLED:
    active = numpy_impl
    BACKEND = "numpy"
else:
    try:
        from . import numba_impl as active

        BACKEND = "numba"
    except ImportError:  # pragma: no cover - exercised only without numba
        active = numpy_impl
        BACKEND = "numpy"

forward_tiled = active.forward_tiled
forward_naive = active.forward_naive
backward_tiled = active.backward_tiled
backward_naive = active.backward_naive
