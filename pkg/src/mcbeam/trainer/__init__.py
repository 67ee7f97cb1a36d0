"""Joint training of the beamformer front-end and the acoustic model."""
from .checkpoint import CheckpointError
from .data import BatchSource, SpectrumCache, Utterance, make_batches, schedule_batches
from .loop import EpochStats, StepResult, Trainer, ibm_targets, mask_bce
from .model import FLOWS, Model
from .optim import Adam, clip_global_norm, global_norm

__all__ = [
    "Adam",
    "BatchSource",
    "CheckpointError",
    "EpochStats",
    "FLOWS",
    "Model",
    "SpectrumCache",
    "StepResult",
    "Trainer",
    "Utterance",
    "clip_global_norm",
    "global_norm",
    "ibm_targets",
    "make_batches",
    "mask_bce",
    "schedule_batches",
]
