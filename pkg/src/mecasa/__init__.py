"""MECASA: hybrid EEG/fNIRS classification with linear-complexity attention."""
__version__ = "0.1.0"

from ._kernels import available_backends, get_backend, set_backend
from .attention import CasaParams, casa_forward, flop_count, softmax_attention
from .backbone import BackboneConfig, MecasaNet, backbone_forward, init_backbone, shape_audit
from .data import EpochDataset, SplitSpec, load_recording, save_recording, stratified_split
from .fusion import FusionConfig, FusionNet, fuse_forward, train_fusion
from .signal import (
    SignalRecording,
    bandpass_filter,
    epoch_signal,
    mbll_to_hbt,
    resample,
    standardize,
    to_optical_density,
)
from .synth import synth_hybrid_dataset
from .tensor import Tensor, backward, no_grad
from .train import TrainConfig, adam_step, confidence_interval, cross_validate, train_model

__all__ = [
    "BackboneConfig", "CasaParams", "EpochDataset", "FusionConfig", "FusionNet", "MecasaNet",
    "SignalRecording", "SplitSpec", "Tensor", "TrainConfig", "adam_step", "available_backends",
    "backbone_forward", "backward", "bandpass_filter", "casa_forward", "confidence_interval",
    "cross_validate", "epoch_signal", "flop_count", "fuse_forward", "get_backend", "init_backbone",
    "load_recording", "mbll_to_hbt", "no_grad", "resample", "save_recording", "set_backend",
    "shape_audit", "softmax_attention", "standardize", "stratified_split", "synth_hybrid_dataset",
    "to_optical_density", "train_fusion", "train_model",
]
