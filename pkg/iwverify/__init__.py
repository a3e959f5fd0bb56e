__version__ = "0.1.0"

from iwverify.schedules import (
    ConfigError,
    JumpBoundError,
    Schedule,
    ScheduleMismatchError,
    Violation,
)
from iwverify.noise import (
    FactorMismatchError,
    JumpStream,
    MarkDistribution,
    NoiseMismatchError,
    NoisePath,
    TimeGrid,
    WienerPath,
)
from iwverify.state import StateCoefficients, StateTrajectory
from iwverify.field import FieldSpec, FieldTrajectory, StateBoxError
from iwverify.scenario import (
    ScenarioConfig,
    ScenarioError,
    load_scenario,
    validate_scenario,
)
from iwverify.mollifier import MollifierParams, QuadratureOverflowError
from iwverify.itowentzell import RhsLedger, residual
from iwverify.experiments import StudyReport
