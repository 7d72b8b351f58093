"""Plan search: exact subproblem solvers, heuristics and the outer enumeration."""

from .instance import (IlpInstance, InfeasiblePlanError, PlanCandidate, SolverGuardError,
                       build_instance, evaluate, expand_candidate, group_layers, objective,
                       violations, zero_latency)
from .bnb import SolverOptions, SolverTimeoutError, solve_bnb, solve_ilp
from .oracle import brute_force_oracle, candidate_count, enumerate_candidates, partitions
