"""confrd: confusion matrices as noisy channels.

Asymmetry metrics, rate-distortion frontier signatures, MAP distortion
inference, and the broad-weak vs. sink mechanistic simulation.
"""

__version__ = "0.1.0"

from . import asymmetry, channels, cli, errors, fit, rd, simgen, stats
from .asymmetry import (AsymmetrySummary, frobenius_asymmetry,
                        offdiag_frobenius_asymmetry, pair_decomposition,
                        summarize_asymmetry)
from .channels import (BlockKey, Channel, CollapseDiagnostics, ConfusionCounts,
                       OffDiagonalMatrix, accuracy, collapse_flag,
                       laplace_smooth, mutual_information, normalize_rows,
                       zero_diagonal)
from .fit import (FitConfig, MapFitResult, RecoveryDiagnostics,
                  map_fit_distortion, recovery_diagnostics)
from .rd import (BAResult, DistortionMatrix, RDFrontier, RDPoint, RDSignatures,
                 ba_channel, default_lambda_grid, operating_point_slope,
                 signatures, trace_frontier)
from .simgen import (GridConfig, SimConfig, SimResult, compose_rho_true,
                     knee_point, make_antisym, make_rho_sym, run_grid,
                     run_replicate, sample_counts)
from .stats import (AnovaTable, RegressionFit, SliceRegressions, TestResult,
                    bh_fdr, block_demeaned_regression, cell_demeaned_anova,
                    component_regression, magnitude_regression,
                    residualize_within_slice, slice_interaction_regression,
                    spearman, two_sample_proportion_test, welch_t,
                    wilcoxon_rank_sum)
