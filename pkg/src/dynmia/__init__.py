"""Membership inference attacks on input-adaptive (dynamic) networks via their control flow."""

from .attack import (VARIANTS, AttackModel, AttackTrainConfig, baseline_attack, comparative_attack,
                     load_attack, save_attack, score, score_file, train_attack)
from .config import ExperimentConfig, load_config
from .data import (DataPartitions, Pool, SplitSpec, load_pool, make_partitions, read_manifest,
                   synthetic_pool, write_manifest)
from .defense import DefenseConfig, InferenceAdversary, train_defended_target
from .errors import *  # noqa: F401,F403
from .evaluation import (ConfusionCounts, EvalReport, compare_reports, compute_metrics,
                         read_report, write_report)
from .features import (FeatureFile, FeatureRecord, extract_features, extract_from_pool,
                       read_features, write_features)
from .models import (DynamicNet, ModelConfig, apply_gates_block, apply_gates_channel, binarize,
                     extract_last_conv, forward, load_model, policy_forward, save_model)
from .pipeline import Experiment, run_stage
from .trainers import (FINETUNE_MODES, TrainConfig, evaluate_accuracy, finetune_shadow,
                       shadow_config, train_target)

__version__ = "0.1.0"
