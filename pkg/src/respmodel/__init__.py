"""Surrogate-driven 4D respiratory motion models.

Builds patient-specific breathing models from 4D volume sequences plus
spirometry signals, averages them into a population mean atlas, transfers
the atlas onto new static volumes, and animates breathing; ships with a
synthetic phantom stock for exact verification.
"""

from .errors import (
    EmptyList,
    GridMismatch,
    InconsistentPhaseCount,
    IndexOutOfRange,
    InvalidConfig,
    InvalidDims,
    NonConvergence,
    NonFiniteEnergy,
    NumericalError,
    OutOfGrid,
    RespModelError,
    ShapeMismatch,
    TooFewPatients,
    TooShort,
    ValidationError,
)
from .grid import (
    DisplacementField,
    GridMeta,
    MaskVolume,
    ScalarVolume,
    compose_fields,
    invert_field,
    inversion_residual,
    resample_field,
    resample_volume,
    sample_trilinear,
    warp_image,
)
from .registration import (
    RegistrationConfig,
    RegistrationResult,
    metric_nssd,
    metric_ssd,
    reg_grad_dnl,
    reg_grad_smp,
    register,
)
from .regression import (
    MotionModel,
    RegressorMatrix,
    animate,
    deserialize_fields,
    fit,
    fit_fields,
    predict,
    serialize_fields,
)
from .surrogate import SignalSimConfig, SurrogateSignal, average_signals, derive, simulate

__version__ = "0.1.0"
