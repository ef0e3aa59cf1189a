"""ECG-conditioned 4D cardiac digital twin engine.

Builds patient-specific beating-heart volumes from a single-cycle 12-lead
ECG: topology-preserving registration distils cine motion into deformation
fields, a flow-matching model learns an ECG-conditioned velocity field from
their temporal derivatives, and ODE integration of that field warps the
reference anatomy into a 4D sequence.
"""

__version__ = "0.1.0"

from . import analysis, ecg, fileio, flowmatch, inference, metrics, phantom, registration, volgrid
from .errors import CardiotwinError

__all__ = [
    "__version__",
    "CardiotwinError",
    "analysis",
    "ecg",
    "fileio",
    "flowmatch",
    "inference",
    "metrics",
    "phantom",
    "registration",
    "volgrid",
]
