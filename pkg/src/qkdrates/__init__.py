"""Lower bounds on asymptotic secret-key rates via semidefinite programming.

The rate is H(A|E) - H(A|B): a variational SDP lower bound on Eve's
conditional entropy minus the error-correction cost evaluated from the
key-basis statistics. Protocols are described by measurement operators
and either exact frequencies or counts with a calibrated credible region.
"""

from .bases import BasisSet, approximate_mubs, mub_set, overlap_bases, select_independent
from .bayes import (
    CountsDataset,
    CredibleRegion,
    SettingCounts,
    calibrate_region,
    gaussian_from_counts,
    initial_chi,
    is_quantum_compatible,
    load_counts,
    simulate_mub_counts,
)
from .entropysdp import (
    EntropyProblem,
    InfeasibleStatisticsError,
    ProtocolInstance,
    RateResult,
    SolveOptions,
    SolverFailureError,
    apply_permutation_symmetry,
    apply_real_symmetry,
    build_entropy_sdp,
    build_mub_protocol,
    build_overlap_protocol,
    build_subspace_protocol,
    compute_rate,
    facial_reduce,
    reconstruct_attack,
    split_lower_bound,
    strict_feasibility_check,
)
from .qcore import (
    conditional_entropy,
    isotropic_state,
    key_joint_isotropic,
    partial_trace,
    shannon_entropy,
    subspace_key_rate,
    tomographic_key_rate,
    von_neumann_entropy,
)
from .quadrature import QuadratureRule, c_constant, gauss_radau

__version__ = "0.1.0"
