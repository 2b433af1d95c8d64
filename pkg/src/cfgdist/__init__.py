"""Multimodal robot-configuration distributions from products of task experts.

The library fits mixtures of full-covariance Gaussian or banana-shaped
components to unnormalized product targets by stochastic gradient descent on
the negative evidence lower bound, with hand-derived pathwise gradients.
Supporting modules provide kinematic chains, closed-form mixture algebra,
grid divergence metrics, an HMC baseline, task conditioning, and maximum
likelihood learning of expert parameters.
"""

from .chains import (KinematicChain, com, com_jacobian, damped_pinv,
                     fk_jacobian, fk_orientation, fk_position, ik_project,
                     nullspace_projector)
from .elbo import (FitTrace, TrainConfig, conditional_elbo_estimate,
                   elbo_and_gradient, elbo_estimate, fit, fit_conditional)
from .experts import (Binding, Bmf, CdfLessEqual, CoM, ConditionalPoeTarget,
                      FkOrientation, FkPosition, IkProjected, JointSubset,
                      Mvn, PoeTarget, RankedCombination, RelativeDistances,
                      UniGauss, rank_task_combinations)
from .families import (BananaComponent, GaussianComponent, MixtureParams,
                       MoEParams, UnsupportedFamilyError, banana_forward,
                       banana_inverse, init_mixture, init_moe,
                       params_from_json, params_to_json)
from .gmmops import gmm_product
from .hmc import HmcConfig, HmcResult, hmc_chain, leapfrog
from .learning import (Dataset, LearnConfig, LearnResult, PoeGradient,
                       estimate_log_normalizer, learn_poe, poe_param_gradient)
from .metrics import (DensityTable, GridSpec, alpha_half_divergence,
                      bhattacharyya, connectivity_graph, gaussian_overlap,
                      histogram_table, normalize_on_grid, ovl)
from .scenarios import (Scenario, ScenarioError, TaskSampler, load_scenario,
                        load_shipped, parse_scenario, scenario_to_dict,
                        shipped_scenarios)

__version__ = "0.1.0"

__all__ = [name for name in dir() if not name.startswith("_")]
