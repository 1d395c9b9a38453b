"""needlecheck: needle-variation checks of necessary optimality conditions for controlled SDEs."""

from .problem import (
    ControlPolicy,
    ControlProblem,
    ControlSet,
    PathEnsemble,
    SimulationDivergedError,
    Spike,
    SpikeAlignmentError,
    TimeGrid,
    UsageError,
)
from .tensor import MultilinearForm, TensorProcess, TensorShapeError

__version__ = "0.1.0"

__all__ = [
    "ControlPolicy",
    "ControlProblem",
    "ControlSet",
    "MultilinearForm",
    "PathEnsemble",
    "SimulationDivergedError",
    "Spike",
    "SpikeAlignmentError",
    "TensorProcess",
    "TensorShapeError",
    "TimeGrid",
    "UsageError",
    "__version__",
]
