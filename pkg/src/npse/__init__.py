"""Compositional score modeling for simulation-based inference.

Train a conditional score network on single observations (or small subsets),
then sample posteriors conditioned on arbitrarily many i.i.d. observations by
aggregating the learned scores under annealed Langevin dynamics or a composed
ancestral sampler.
"""

from .schedule import (NoiseSchedule, ScheduleDegenerateError, diffuse,
                       gaussian_diffused, kernel_score, make_schedule)
from .score_net import (NetworkConfig, ScoreNetwork, SetInput, backward,
                        init_network, predict_eps, score, time_embedding)
from .tasks import (IntegratorError, OdeState, SimulationRejected, TaskModel,
                    get_task, rk4_integrate, task_gg, task_gmog, task_lv,
                    task_multimodal, task_sir)
from .training import (AdamState, TrainingConfig, TrainingExample, adam_step,
                       dsm_loss, generate_dataset, train, train_lr_grid)
from .samplers import (Partition, SamplerConfig, SamplerDivergedError,
                       annealed_langevin, composed_ancestral, composed_score,
                       langevin_step_size, partition_observations,
                       sample_posterior, standard_normal_score)
from .oracles import (GaussianDist, GaussianMixture, RwmResult, StepScaleError,
                      factorization_check, gg_posterior, mixture_posterior,
                      rwm_posterior)
from .evaluation import (C2stReport, DegenerateBandwidthError, MmdReport,
                         c2st, median_bandwidth, mmd2)

__all__ = [name for name in dir() if not name.startswith("_")]
__version__ = "0.1.0"
