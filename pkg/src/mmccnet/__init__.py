"""Multi-path cascaded polyp segmentation network on a small numpy autodiff core."""

from .data import SamplePair, SplitPlan, load_dataset, make_splits, synth_polyp_dataset
from .estimator import MmccSegmenter
from .experiments import ExperimentSpec, run_experiment
from .losses import LossConfig, joint_loss
from .metrics import aggregate_runs, confidence_interval, hausdorff_distance, roc_auc
from .model import ModelConfig, MmccNet, build_mmcc_net, count_parameters, grad_cam
from .training import TrainPlan, Trainer, checkpoint_load, checkpoint_save, evaluate, train

__all__ = [
    "ExperimentSpec", "LossConfig", "MmccNet", "MmccSegmenter", "ModelConfig", "SamplePair",
    "SplitPlan", "TrainPlan", "Trainer", "aggregate_runs", "build_mmcc_net", "checkpoint_load",
    "checkpoint_save", "confidence_interval", "count_parameters", "evaluate", "grad_cam",
    "hausdorff_distance", "joint_loss", "load_dataset", "make_splits", "roc_auc", "run_experiment",
    "synth_polyp_dataset", "train",
]
