"""Nash-bargaining merging of sparse mixture-of-experts layers."""

from .analysis import cosine_similarity, pareto_check, utilities
from .merge_engine import MergeConfig, MergedOutput, merge, routed_merge
from .momentum import MomentumState, Quaternion, momentum_step_complex, momentum_step_quaternion, polar
from .nash_core import DomainMatrix, NashConfig, NashWeights, direction, domain_vectors, gram, interaction_split, solve_nash
from .stability import StabilityPoint, empirical_rate, fujiwara_region, reduced_matrix, spectral_radius, sweep
from .tensor_store import Expert, ExpertStack, Layer, read_checkpoint, read_problem_csv, write_checkpoint

__version__ = "0.1.0"
