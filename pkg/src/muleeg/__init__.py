"""Multi-view self-supervised pretraining for single-channel EEG sleep staging."""

from .data import SleepStage, SubjectRecord, synth_generate
from .encoders import EncoderKind, Preset
from .evaluate import EvalConfig, EvalReport, fine_tune, kfold_evaluate, linear_evaluate
from .losses import diverse_loss, nt_xent
from .pretrain import PretrainConfig, StrategyKind, load_checkpoint, pretrain
from .transforms import AugmentationConfig, EegEpoch

__version__ = "0.1.0"

__all__ = [
    "AugmentationConfig", "EegEpoch", "EncoderKind", "EvalConfig", "EvalReport", "Preset", "PretrainConfig",
    "SleepStage", "StrategyKind", "SubjectRecord", "diverse_loss", "fine_tune", "kfold_evaluate",
    "linear_evaluate", "load_checkpoint", "nt_xent", "pretrain", "synth_generate",
]
