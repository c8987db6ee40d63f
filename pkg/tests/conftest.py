import os

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from splatmotion import synth

settings.register_profile("default", max_examples=40, deadline=None,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))


def occluded_arm_spec(seed=0, n=300, frames=12, noise=0.002, num_background=0):
    """Two-link arm behind two static occluders; the driving clip swings the forearm."""
    return synth.SceneSpec(
        kind="two_link_arm", num_points=n, frames=frames, seed=seed, noise_sigma=noise,
        num_background=num_background,
        motion=synth.MotionScript(primary_amp=0.08, primary_freq=0.5),
        occluders=(synth.Occluder(center=(0.24, 0.0, 4.0), half_size=(0.12, 0.3, 0.02)),
                   synth.Occluder(center=(0.2, 0.66, 4.0), half_size=(0.2, 0.22, 0.02))))


DRIVING = synth.MotionScript(primary_amp=0.05, primary_freq=0.5, secondary_amp=1.2, secondary_freq=0.25)


@pytest.fixture(scope="session")
def small_pair():
    spec = occluded_arm_spec(seed=0, n=150, frames=6)
    base, driving, truths = synth.gen_pair(spec, DRIVING, driving_frames=6)
    return spec, base, driving, truths


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
