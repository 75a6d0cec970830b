"""Quadratic quantum Hamiltonians driven by quasi-periodic sl(2,R) systems.

Modules: sl2core (2x2 algebra), qpfun (trig polynomials and cocycles),
metaengine (metaplectic operators on a grid), sobolev (norms and audits),
akbuilder (growth schedules), kamengine (almost reducibility),
growthlab (evolution and growth probes), cli.
"""

from . import akbuilder, growthlab, kamengine, metaengine, qpfun, sl2core, sobolev
from .errors import OscillabError

__all__ = [
    "OscillabError",
    "akbuilder",
    "growthlab",
    "kamengine",
    "metaengine",
    "qpfun",
    "sl2core",
    "sobolev",
]
__version__ = "0.1.0"
