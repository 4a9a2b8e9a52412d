"""Inexact Bregman proximal gradient methods with verifiable error certificates."""

from .bregman_core import (Box, BregmanKernel, DomainError, EntropyKernel, NegativeDistanceError,
                           NotInDomainError, NotInteriorError, QuadraticKernel, SmoothnessDescriptor,
                           UNIT_BOX, bregman_distance, check_relative_smoothness,
                           check_restricted_exponent, four_points_gap)
from .schedules import (Rule, ScheduleError, ScheduleInvalidError, ThetaSchedule, ToleranceSchedule,
                        summability_class, tolerance_at, validate_theta, vartheta)
from .solvers import (Budget, CertificateViolation, EuclideanProjectionOracle, InexactCertificate,
                      OracleBudgetExceeded, ProblemDefinition, RunTrace, SolverAbort, SubproblemQuery,
                      averaged_iterate, check_descent_inequality, check_ibpg_bounds, check_vibpg_bound,
                      ibpg_run, vibpg_run)
from .transport_oracle import SinkhornOracle, round_to_polytope

__version__ = "0.1.0"
