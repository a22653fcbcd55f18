import numpy as np
import pytest

from chestsep import synth
from chestsep.audio_io import AudioBuffer
from chestsep.nmcf import ExemplarDb
from chestsep.spectral import StftConfig

# short windows keep factorisation tests fast
SMALL_STFT = StftConfig(window_length=256, overlap_fraction=0.75)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def small_stft():
    return SMALL_STFT


@pytest.fixture(scope="session")
def small_dbs():
    heart = synth.exemplar_buffers("heart", 3, seed=500, duration=4.0)
    lung = synth.exemplar_buffers("lung", 3, seed=700, duration=4.0)
    return ExemplarDb.from_buffers(heart, SMALL_STFT), ExemplarDb.from_buffers(lung, SMALL_STFT)


def tone(freq, seconds, rate, amp=1.0):
    t = np.arange(int(round(seconds * rate))) / rate
    return AudioBuffer(amp * np.sin(2 * np.pi * freq * t), rate)
