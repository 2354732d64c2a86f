"""Dependent rounding for mixed knapsack/partition constraints, and the
facility-location solvers built on top of it."""

from .systems import (EPS_EQ, EPS_FRAC, FracProfile, PartitionSystem,
                      frac_profile, q_potential, support, validate_e_properties,
                      wedge)
from .rounding import (RandomSource, ReplaySource, RoundingTranscript, as_source,
                       full_kpr, ind_select, intra_block_reduce, kpr,
                       kpr_depround, kpr_iteration, recording_source)
from .alteration import (CertificationFailure, PseudoSolution, certify_pseudo,
                         concentration_trial, make_generator, min_discard_set)
from .instances import FacilityInstance, gen_instance
from .bruteforce import brute_force_opt

__version__ = "0.1.0"
