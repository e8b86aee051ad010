"""Deterministic federated-learning simulator with data-free, class-wise
client contribution estimation via server-side logit maximization, plus
uniform and gradient-cosine baselines, stress-test data splits, and the
detection/fidelity analytics built on the contribution traces."""

from .analysis import (DetectionSweep, FidelityReport, accuracy_decomposition, auroc, emd_1d,
                       fidelity_report, fpr_sweep, hellinger, jsd, zscore_flags, zscores)
from .config import ConfigError, DataConfig, ExperimentConfig, load_config, load_config_text
from .data import (AllocationError, Dataset, IdxFormatError, LabelAllocation, PartitionSpec,
                   load_idx, maverick_freerider_split, partition, synth_dataset, write_idx)
from .estimator import (ContributionState, DistributionUndefinedError, FrozenStateError,
                        class_shares, client_scores, debias, ema_update, estimate_distributions,
                        maybe_freeze, simplex_normalize)
from .experiment import ExperimentResult, run_experiment, write_trace_csv
from .federation import (FederationState, RoundConfig, Strategy, aggregate, broadcast,
                         celm_strategy, cgsv_strategy, cgsv_weights, evaluate, local_train,
                         run_round, uniform_strategy)
from .nn import (AdamState, DenseLayer, DimensionError, DomainError, MlpModel, adam_step,
                 forward, init_mlp, input_grad, loss_and_param_grad, parameter_checksum,
                 sgd_step)
from .probe import (ProbeBank, ProbeConfig, ProbeDivergenceError, ProbeResult, global_baseline,
                    lm_probe, write_pgm)
from .rng import derive_seed, substream

__version__ = "0.1.0"
