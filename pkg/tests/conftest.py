import math

import numpy as np
import pytest

from pulseface.signal_core import Waveform
from pulseface.synthgen import SynthConfig, generate_corpus


def tone(freq_hz: float, seconds: float, fs: float = 30.0, amplitude: float = 1.0, phase: float = 0.0) -> Waveform:
    t = np.arange(int(round(seconds * fs))) / fs
    return Waveform(amplitude * np.sin(2 * math.pi * freq_hz * t + phase), fs)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def tiny_synth():
    """Six short, upright, noise-light recordings; fast enough for every test run."""
    return SynthConfig(
        n_subjects=6,
        clip_seconds=6.0,
        frame_size=(32, 32),
        rotation_bins=(0,),
        hr_drift_bpm=0.0,
        seed=3,
    )


@pytest.fixture
def tiny_corpus(tmp_path, tiny_synth):
    out = tmp_path / "corpus"
    manifest = generate_corpus(tiny_synth, str(out))
    return manifest, out


TINY_NET = dict(frames=8, size=16, channels=(2, 3, 3, 4), feature_dim=6)


@pytest.fixture
def tiny_net_cfg():
    from pulseface.physnet import PhysNetConfig

    return PhysNetConfig(**TINY_NET)


@pytest.fixture
def tiny_windows():
    """Four random 8-frame 16x16 windows with a pulsing PPG target."""
    from pulseface.training import WindowDataset

    rng = np.random.default_rng(5)
    frames = rng.integers(0, 256, size=(4, 8, 16, 16, 3), dtype=np.uint8)
    t = np.arange(8) / 30.0
    ppg = np.stack([np.sin(2 * math.pi * (1.5 + 0.2 * i) * t) for i in range(4)])
    return WindowDataset(
        frames,
        ppg,
        np.array([90.0, 102.0, 114.0, 126.0]),
        np.array([97.0, 95.0, 92.0, 97.0]),
        ("a", "a", "b", "b"),
        (0, 1, 0, 1),
    )
