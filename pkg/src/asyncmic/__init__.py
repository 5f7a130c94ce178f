"""Simulation, channel-communication modules and training tools for
asynchronous ad-hoc microphone arrays."""

from .attention import KINDS, ChannelComm, MicTensor, ParamStore
from .dsp import Spectrogram, compress, decompress, istft, stft
from .estimator import AsyncMicEnhancer
from .model import Backbone, BackboneConfig
from .scene import RoomSpec, SceneDistribution, SceneSpec, mix_scene
from .train import DelayedCopyConfig, ExperimentConfig, compare_modules, evaluate

__all__ = [
    "KINDS", "ChannelComm", "MicTensor", "ParamStore",
    "Spectrogram", "compress", "decompress", "istft", "stft",
    "AsyncMicEnhancer", "Backbone", "BackboneConfig",
    "RoomSpec", "SceneDistribution", "SceneSpec", "mix_scene",
    "DelayedCopyConfig", "ExperimentConfig", "compare_modules", "evaluate",
]

__version__ = "0.1.0"
