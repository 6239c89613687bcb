"""Power flow and optimal power flow posed as sequences of QUBO problems."""
import os as _os

# numba probes TBB first and warns when it is unavailable; prefer the OpenMP/workqueue layers
_os.environ.setdefault("NUMBA_THREADING_LAYER_PRIORITY", "omp workqueue tbb")

from .netmodel import (  # noqa: E402
    AdmittanceMatrix,
    Branch,
    Bus,
    BusKind,
    CaseError,
    Generator,
    NetworkCase,
    VoltageState,
    build_admittance,
    compute_injections,
)
from .caseio import ParseError, load_case, parse_matpower  # noqa: E402

__all__ = [
    "AdmittanceMatrix", "Branch", "Bus", "BusKind", "CaseError", "Generator", "NetworkCase",
    "VoltageState", "build_admittance", "compute_injections", "ParseError", "load_case", "parse_matpower",
]
__version__ = "0.1.0"
