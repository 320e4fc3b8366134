"""Sequential Bayesian experimental design with adaptive tempered SMC and
contrastive-bound design optimisation."""

from .contrastive import ContrastiveSet, SGConfig, estimate_pce, optimize_design, pce_integrand, pce_sample_gradient
from .evaluation import EvalConfig, Rollout, posterior_moments, sequential_bounds, snmc, spce, wasserstein2_to_point
from .models import CES, History, LinearGaussian, SourceLocation, make_model
from .runner import ExperimentConfig, run_batch, run_rollout
from .smc import ParticleCloud, TemperConfig, partition_cloud, temper_to_posterior

__version__ = "0.1.0"
