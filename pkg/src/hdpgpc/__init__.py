"""Bayesian nonparametric dynamical clustering of time-series segments.

Clusters are Gaussian-process morphologies that drift under their own
linear dynamics; segments are aligned to them by monotone time warps and
switch between clusters through an HDP-HMM prior.
"""

from .kernel import KernelParams, fit_hyperparams, log_marginal_likelihood, sqexp_cov
from .gp import GPBelief, InducingSet, gp_condition, predict_at_warp, project_to_inducing
from .warp import WarpAux, WarpFunction, map_warp, warp_from_aux, warp_log_prior
from .hdp import HDPConfig, StickPosterior, TransitionPosterior
from .inference import InferenceConfig, fit_offline, fit_online, predict_segment, stream_online
from .metrics import adjusted_rand_index, cluster_count, metrics_report, purity
from .io import Segment, load_model, load_segments, save_model, save_segments, synth_generate

__version__ = "0.1.0"
