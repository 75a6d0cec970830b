"""Kernel backend selection.

The compiled extension is used when it imports; otherwise the numpy versions
take over.  Setting ``OSCILLAB_KERNELS=python`` forces the fallback.
"""

from __future__ import annotations

import os

from . import _kernels_py

BACKEND = "python"
_impl = _kernels_py

if os.environ.get("OSCILLAB_KERNELS", "").lower() != "python":
    try:
        from . import _kernels as _compiled  # type: ignore[attr-defined]
    except ImportError:  # extension not built
        pass
    else:
        _impl = _compiled
        BACKEND = "cython"


def _contig(a, dtype):
    import numpy as np

    return np.ascontiguousarray(a, dtype=dtype)


def quadratic_phase_sum(x, y, v, alpha, beta, gamma):
    return _impl.quadratic_phase_sum(
        _contig(x, float), _contig(y, float), _contig(v, complex), float(alpha), float(beta), float(gamma)
    )


def sinc_resample(x0, dx, u, y):
    return _impl.sinc_resample(float(x0), float(dx), _contig(u, complex), _contig(y, float))


def hermite_table(x, nmax):
    return _impl.hermite_table(_contig(x, float), int(nmax))


def backends():
    """Both implementations that are available, keyed by name."""
    out = {"python": _kernels_py}
    try:
        from . import _kernels as _compiled  # type: ignore[attr-defined]

        out["cython"] = _compiled
    except ImportError:
        pass
    return out
