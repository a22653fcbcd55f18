"""Separation of heart, lung and noise sounds in single-channel chest recordings."""
from .audio_io import AudioBuffer, read_wav, resample, write_wav
from .nmcf import ExemplarDb, NmcfConfig, SeparationResult, separate
from .nmf_core import NmfConfig, factorize
from .spectral import StftConfig, istft, stft

__all__ = [
    "AudioBuffer", "ExemplarDb", "NmcfConfig", "NmfConfig", "SeparationResult", "StftConfig",
    "factorize", "istft", "read_wav", "resample", "separate", "stft", "write_wav",
]
__version__ = "0.1.0"
