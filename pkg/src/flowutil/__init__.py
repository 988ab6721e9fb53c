"""Consistent forward utilities built from monotone optimal-wealth flows."""

__version__ = "0.1.0"

from .duality import DualFlow, build_dual_flow, darboux_bracket, dual_suite
from .errors import (
    ConfigurationError,
    ConstraintViolationError,
    FlowUtilError,
    GridMismatchError,
    IntegrabilityError,
    MonotonicityError,
    ParameterError,
    PreconditionError,
    RangeError,
    SimulationError,
    SpecError,
    TruncationWarning,
    UnsupportedConfigurationError,
)
from .flows import FlowField, FlowGeneratorSpec, build_flow_field, compose_flow, default_grid, invert_flow
from .market import (
    ConstraintSet,
    MarketScenario,
    PathEnsemble,
    Strategy,
    WealthPaths,
    deflate_by_numeraire,
    simulate_drivers,
    state_price_density,
    wealth_from_strategy,
)
from .utility import (
    UtilityField,
    UtilityFunction,
    build_utility_field,
    conjugate_via_flow,
    fenchel_conjugate,
    initial_market_field,
    initial_utility,
    marginal_field,
    numeraire_transform,
)
from .verifier import (
    CaseResult,
    DriftTestSpec,
    TestClassSampler,
    TestReport,
    conditional_drift_test,
    consistency_suite,
    oc_check,
    shape_audit,
)
