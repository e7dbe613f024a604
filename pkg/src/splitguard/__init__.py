"""Adversarial-feature detection for split (device/edge) DNN inference under impulsive channel noise."""

from .attack_vae import AttackVae, craft_adversarial, craft_batch, train_attack_vae
from .detector import AdVae, Detector, fit_detector, train_advae
from .errors import (ConfigurationError, FrameError, SplitGuardError, TrainingError, UsageError)
from .eval_harness import ScenarioConfig, ScenarioReport, Workbench, run_scenario, sweep
from .metrics import ConfusionCounts, auroc, metrics, rwcg
from .noise_channel import PRESETS, NoiseSpec, corrupt_batch, corrupt_sample, preset, sample_sas
from .split_runtime import (FeatureDataset, FeatureVector, Model, build_model, partition,
                            tiny_convnet_spec, train_classifier)

__version__ = "0.1.0"
