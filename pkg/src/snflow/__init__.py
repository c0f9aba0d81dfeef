"""Stochastic normalizing flows for sampling posteriors of inverse problems."""

from .chain import (DeterministicLayer, LangevinLayer, LossConfig, MCMCLayer, PathBatch, SNFChain,
                    interpolated_density, kl_loss, loss_and_grad, replay_path, sample_chain,
                    sample_forward_path, sample_reverse_path, train)
from .evaluation import SampleCloud, binned_kl, mh_baseline, wasserstein1
from .flows import ConditionalCouplingFlow, CouplingBlock
from .kernels import GaussianDensity, LangevinConfig, MHConfig, StepRecord
from .problems import GaussianMixture, LinearGaussianProblem, MixedNoiseProblem, analytic_posterior

__version__ = "0.1.0"
