"""Structured-pruning parameter sharing for multi-agent RL.

N agent networks are derived from one dense root network via independently
drawn per-layer unit masks and trained jointly under QMIX or multi-agent
advantage actor-critic, for comparison against full-parameter-sharing
baselines at desk scale.
"""

from .envs import (CoordGameConfig, CoordinationGame, LbfConfig,
                   LevelBasedForaging, lbf_presets, make_env)
from .errors import ConfigError, TrainingError, UsageError
from .harness import ExperimentConfig, run_experiment, sweep_pruning_ratio
from .maa2c import A2cConfig, A2cTrainer
from .netcore import (LayerSpec, NetworkTopology, ParameterStore,
                      init_parameters)
from .pruning import (NeuronMask, NeuronMaskGroup, PruningSchedule,
                      WeightMask, expand_to_weight_mask,
                      generate_group_tickets, generate_single_ticket,
                      generate_unstructured_masks, mask_overlap_stats)
from .qmix import MixingNetwork, QmixConfig, QmixTrainer
from .sharednet import SharedAgentNetwork, SharingMode

__version__ = "0.1.0"
