"""Split DMD: piecewise-in-time dynamic mode decomposition of snapshot data."""

__version__ = "0.1.0"

from .dmd import DmdModel, ErrorReport, error_report, exact_dmd, reconstruct
from .driver import Method, SplitDmdModel, reconstruct_split, shift_splits, split_dmd
from .errors import (
    ConfigError,
    DomainError,
    EmptyIntervalError,
    InitError,
    IntegrationError,
    RankError,
    ResolutionError,
    ShapeError,
    SplitDmdError,
)
from .ks import KsConfig, SnapshotMatrix, initial_condition, nondimensionalize, simulate_ks
from .nsplit import (
    NsplitConfig,
    SplitSet,
    delta_test,
    epsilon_test,
    n_split,
    robust_split,
    subinterval_range,
)
from .optdmd import OptDmdResult, VarproConfig, optdmd
