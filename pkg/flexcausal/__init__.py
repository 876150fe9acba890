from .about import __version__, __package__
import sys
import logging


def get_lib_info():
    """String containing the name + version of this library.

    Returns:
        String containing the name + version of this library.

    Example:
    ```python
    import flexcausal as fc

    print(fc.get_lib_info())
    ```
    """
    return ' '.join([__package__, __version__])


def set_logging_level(level):
    """Sets the logger to the desired level.

    Example:
    ```python
    import flexcausal as fc
    import logging

    fc.set_logging_level(logging.WARNING)
    ```
    """
    logger.setLevel(level)
    for handler in logger.handlers:
        handler.setLevel(level)


# Create a custom logger
logger = logging.getLogger(__package__)
# Create console handler and set level
console_handler = logging.StreamHandler(stream=sys.stdout)  # This will sync prints and logs
# Create formatter and add it to the console handler
message_format = logging.Formatter('%(levelname)s (%(module)s): %(message)s')
console_handler.setFormatter(message_format)
# Add console handler to the logger, and set level also to the main logger
logger.addHandler(console_handler)
logger.setLevel(logging.INFO)

from .errors import *  # noqa: E402,F401,F403
from .panel import (  # noqa: E402,F401
    CovariateSpec, CovariateSchema, PanelDataset, DesignColumn, DesignMatrix, load_panel, write_panel,
    analysis_frame, build_design, propensity_features, composition_averages, cutpoint_grid,
)
from .trees import (  # noqa: E402,F401
    SplitRule, RegressionTree, LeafAssignment, assign_leaf, assign_leaves, evaluate_tree, evaluate_forest,
    split_rows, grow, prune, serialize_tree, parse_tree, ForestWriter, ForestReader,
)
from .priors import (  # noqa: E402,F401
    TreePriorParams, LeafPriorParams, SplitProbVector, NoisePriorParams, split_prob, expected_leaf_count,
    leaf_posterior, marginal_loglik, draw_sigma, update_split_probs,
)
from .reducers import GroupMeans, StreamingQuantiles  # noqa: E402,F401
from .sampler import (  # noqa: E402,F401
    SamplerConfig, Forest, FitState, PosteriorArchive, make_state, sweep, fit, update_one_tree,
    naive_update_one_tree, predict_tau,
)
from .estimands import (  # noqa: E402,F401
    EstimandRequest, EstimateSummary, summarize_draws, att, subgroup_atts, estimate, row_effects,
    default_subgroups, did_cell_estimator, did_cell_standard_error,
)
from .propensity import (  # noqa: E402,F401
    PropensityModel, fit_l1_logistic, l1_logistic_path, kkt_residual, fit_gbm, fit_propensity, predict_ps,
)
from .dgp import (  # noqa: E402,F401
    DgpConfig, TruthRecord, REGIMES, generate, simulate_potential_outcomes, population_truth, regime_suite,
    write_replication,
)
from .settings import RunConfig  # noqa: E402,F401
from .evaluation import (  # noqa: E402,F401
    MethodConfig, EvalReport, run_study, fit_and_estimate, truth_estimator, rmse, coverage, relative_length,
)
