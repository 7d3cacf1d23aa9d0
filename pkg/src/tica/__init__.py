"""Template ICA: subject-level independent components with empirical population priors."""

from .dualreg import DualRegResult, dual_regress
from .em import (EMOptions, FitResult, LatentSpace, PosteriorMoments, ThetaState,
                 dual_regression_fit, enumerate_space, fit_exact, fit_fast, fit_subspace,
                 nuisance_order)
from .errors import (ConfigError, DegenerateInput, LowOrder, NonConvergence, NumericalError,
                     SpaceTooLarge, TicaError)
from .infomax import IcaResult, fix_signs, infomax_restarts, infomax_single
from .matrix import center_scale, read_matrix, write_matrix
from .metrics import corr_activated, icc_map, match_components, mse_map, wi2c2
from .mog import MoGParams, fit_mog, mog_logpdf, sample_mog
from .reduction import ReducedData, estimate_order, prewhiten
from .simulation import SimConfig, sim_setup, simulate_subject
from .template import Template, build_template

__version__ = "0.1.0"
