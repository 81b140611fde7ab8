"""Consensus solver for general (nonconvex) quadratically constrained QPs.

The problem is split so that every constraint owns a copy of the variable;
each copy update is a single-constraint projection solvable exactly via a
scalar secular equation (or in closed form for magnitude constraints), and
the copies are driven to consensus.  Includes a memory-efficient engine for
rank-one constraint families and drivers for feasible point pursuit,
multicast beamforming, and phase retrieval.
"""

from .admm import (ConsensusState, FactorCache, SolverConfig, residuals, run,
                   x_update, x_update_feasibility, z_u_update)
from .apps import (BeamformingInstance, FppInstance, PhaseRetrievalInstance,
                   alignment_error, fpp_solve, gen_instance, load_instance,
                   mb_secondary, mb_single_group, metric_mse, pr_solve,
                   save_instance, spectral_init)
from .errors import (ConfigurationError, InfeasibleConstraintError,
                     InvalidProblemError, PoleError, QcadmmError)
from .model import (ConstraintSense, KktResidual, QcqpProblem,
                    QuadraticConstraint, SolveReport, eval_constraint,
                    is_feasible, kkt_residual, load_problem, max_violation,
                    objective_value, save_problem, violation)
from .qcqp1 import (EigenCache, Qcqp1Solution, Qcqp1Status, solve_bounded,
                    solve_constraint, solve_gaussian_magnitude, solve_general,
                    solve_rank1_homogeneous)
from .rank1 import CompressedState, PriorSpec, apply_prior, step, step_gaussian
from .rootfind import (CubicInputs, RootResult, SpectralConstraint,
                       cubic_discriminant, feasible_interval, phi, phi_prime,
                       solve_cubic_mu, solve_phi_bisection, solve_phi_newton)

__version__ = "0.1.0"
