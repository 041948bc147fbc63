import numpy as np
import pytest
from hypothesis import settings

from fogsense.signalio import ACCEL, EOG, Channel, Recording
from fogsense.synth import SynthConfig, generate_dataset

settings.register_profile("fogsense", deadline=None, max_examples=60)
settings.load_profile("fogsense")


def sine(freq, rate, duration, amp=1.0, phase=0.0):
    t = np.arange(int(round(rate * duration))) / rate
    return amp * np.sin(2 * np.pi * freq * t + phase)


def accel_axes(x, rate, placement="left_knee", y=None, z=None):
    n = len(x)
    y = np.zeros(n) if y is None else y
    z = np.zeros(n) if z is None else z
    return [Channel(f"{placement}_{a}", ACCEL, rate, v, {"placement": placement, "axis": a})
            for a, v in zip("xyz", (x, y, z))]


def eog_channel(x, rate=500.0):
    return Channel("EOG_H", EOG, rate, x, {"axis": "horizontal"})


def fft_band_power(x, rate, band):
    """Mean-square power of ``x`` inside ``band`` from a plain periodogram."""
    x = np.asarray(x, dtype=float)
    n = x.size
    X = np.fft.rfft(x)
    f = np.fft.rfftfreq(n, 1 / rate)
    p = 2 * np.abs(X) ** 2 / n ** 2
    p[0] /= 2
    m = (f >= band[0]) & (f <= band[1])
    return float(p[m].sum())


@pytest.fixture(scope="session")
def small_cfg():
    return SynthConfig(n_subjects=3, task_duration_s=60.0, seed=7)


@pytest.fixture(scope="session")
def small_dataset(small_cfg):
    return generate_dataset(small_cfg)


@pytest.fixture(scope="session")
def one_recording(small_dataset) -> Recording:
    return small_dataset[0].recording


@pytest.fixture(scope="session")
def default_dataset():
    return generate_dataset(SynthConfig())
