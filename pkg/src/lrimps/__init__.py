"""Infinite matrix product state ground states for long-range 1D chains."""
from .analysis import (CorrelationSeries, LuttingerFit, Selection, TransferMatrix, UniformState, correlation,
                       density_profile, detect_periodicity, energy_per_site, entanglement_entropy,
                       expectation_local, fit_luttinger, select_ground_state, selected_state, transfer_matrix,
                       uniform_state)
from .eigensolver import (DavidsonPreconditioner, SolverOptions, SolveResult, SubspaceBasis, alter_basis_invariance,
                          build_davidson, precondition_apply, residual_expand, solve_lowest, subspace_gamma_update)
from .engine import (Engine, EngineConfig, EngineError, StepReport, absorb_both, assemble_effective,
                     compute_gain_gamma, grow_bond_dimension, initialize, krylov_insert, mirror_symmetrize,
                     smo_accumulate, update_reference)
from .expfit import ExpSumFit, FitError, fit_exp_sum, fit_power_law
from .mpo import (Mpo, add_local_term, build_dipolar_bose_hubbard_mpo, build_exp_decay_mpo, build_heisenberg_mpo,
                  build_ising_mpo, dense_hamiltonian)
from .tensors import (DegenerateInputError, DimensionError, Factorization, PreconditionError, contract,
                      decompose_site, svd, takagi)

__version__ = "0.1.0"
