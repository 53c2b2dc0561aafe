"""Equivalent martingale measures on finite scenario trees.

Given a tree with transition probabilities ``P`` and a local martingale
``S``, build an equivalent measure ``Q`` with density ``Z <= 1 + eps``
under which ``S`` is a martingale with finite exponential moments.
"""

__version__ = "0.1.0"

from .errors import *  # noqa: F401,F403
from .tree import (
    ScenarioTree,
    StoppingTime,
    TotalVariation,
    apply_density,
    check_density,
    cond_expectation,
    cond_expectation_truncated,
    dumps_process,
    dumps_tree,
    expectation,
    leaf_measure,
    load_tree,
    loads_process,
    loads_tree,
    save_tree,
    stop_anchor,
    stopped_mass,
    stopped_process,
    total_variation,
    validate_tree,
)
from .martingale import (
    exponential_moment,
    generalized_martingale_check,
    local_implies_generalized,
    martingale_residuals,
    never_stop,
    verify_localization,
)
from .onestep import (
    OneStepDensity,
    OneStepProblem,
    RangeProjection,
    barrier,
    barrier_weights,
    damping_weights,
    field_gradient,
    field_value,
    gradient_bound,
    minimize_field,
    minimize_field_net,
    one_step_density,
    predictable_range,
    ratio_weights,
    stage_barrier_parameter,
)
from .pipeline import (
    Construction,
    construct_density,
    construct_measure,
    leaf_table,
    schedule_step,
    stage_density,
    stage_tolerance,
)
from .jump_example import (
    ExampleSpec,
    analytic_oracles,
    build_example_tree,
    divergence_sweep,
    localization_sequence,
    localization_suite,
)
from .generate import GeneratorSpec, generate_tree
