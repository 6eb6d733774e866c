"""Spinned d-regular random graphs: pairing-model sampling, exact type
probabilities and numerical checks of the joint LDP for the empirical
spin and bond measures."""

__version__ = "0.1.0"

from .errors import (ConvergenceError, InfeasibleEventError, RejectionCapError,  # noqa: F401
                     ScaleGuardError, UsageError)
from .exact import (LogProb, TypeDistribution, brute_force_type_distribution,  # noqa: F401
                    exact_type_probability, log_double_factorial, stirling_log_bounds)
from .ldp import (Constraint, EventSpec, McEstimate, MinimizerResult,  # noqa: F401
                  convergence_report, mc_event_probability, minimize_rate)
from .measures import (AdmissiblePair, BondMeasure, LatticeType, SpinLaw,  # noqa: F401
                       SpinMeasure, enumerate_types, is_admissible, rate_function,
                       nearest_type, relative_entropy, type_to_measures)
from .sampler import (Pairing, SampleRecord, SpinConfig, assign_spins,  # noqa: F401
                      empirical_measures, is_simple, sample_pairing, sample_simple_graph)
