"""Disordered XY model simulator: sector Hamiltonians, Krylov quenches,
interior eigenvalues by polynomial filtering, and the imbalance fitting chain."""

__version__ = "0.1.0"

from .lattice import (Bond, BondKind, CouplingGraph, Geometry, SiteId, build_chain, build_rectangle,
                      effective_coupling, graph_from_pairs)
from .hamiltonian import (DisorderRealization, SectorBasis, SparseHamiltonian, build_hamiltonian,
                          enumerate_sector, mix_seed, sample_disorder)
from .dynamics import (ImbalanceTrace, InitialPattern, KrylovPropagator, Parity, checkerboard,
                       geometric_time_grid, krylov_step, run_quench)
from .spectral import (R_GOE, R_POISSON, DisorderEnsemble, SpectralResult, SpectralWindow, gap_ratios,
                       mean_gap_ratio, polfed)
from .analysis import (DecayLawFit, PowerLawFit, ThresholdCrossing, curve_crossing, ensemble_average,
                       ergodic_boundary, extract_w_star, fit_beta_vs_size, fit_decay_law, fit_power_law)
from .experiment import ExperimentSpec, RunManifest, run_experiment
