"""Class-incremental ECG beat classification with novelty-gated pseudo-replay."""
from .baselines import EWCClassifier, FisherInfo, compute_fisher, ewc_penalty, ewc_train, joint_baseline_train
from .classifier import BeatClassifier
from .madegan import MadeGAN, TrainingDivergedError
from .metrics import TaskReport, build_report, emit_forgetting_table, emit_task_table
from .pipeline import PipelineConfig, TaskStream, UIRDPipeline, order_by_sample_size
from .smote import GeneratorBank, SmoteGenerator

__version__ = "0.1.0"

__all__ = [
    "BeatClassifier", "EWCClassifier", "FisherInfo", "GeneratorBank", "MadeGAN", "PipelineConfig",
    "SmoteGenerator", "TaskReport", "TaskStream", "TrainingDivergedError", "UIRDPipeline",
    "build_report", "compute_fisher", "emit_forgetting_table", "emit_task_table", "ewc_penalty",
    "ewc_train", "joint_baseline_train", "order_by_sample_size",
]
