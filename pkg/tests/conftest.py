import numpy as np
import pytest

from tt_fusion_workflow.config import ModelSpec, ProfileSettings

# smallest profile that exercises every layer kind
TINY_PROFILE = dict(
    name='tiny',
    frames=3,
    game_size=8, cam_size=4, audio_len=24,
    feature_width=4,
    game_channels=(2,),
    cam_channels=(2,),
    audio_channels=(2, 2, 2),
    audio_kernel=3,
    early_width=6, view_width=4,
    tt_input_modes=(5, 5, 5),
    tt_output_modes=(2, 2, 3),
    tt_ranks=(1, 2, 2, 1),
    head_width=5,
    dropout=0.0,
)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def tiny_profile():
    return ProfileSettings(**TINY_PROFILE)


@pytest.fixture
def tiny_spec(tiny_profile):
    def make(fusion='tt', task='joint'):
        return ModelSpec(fusion=fusion, task=task, profile=tiny_profile)
    return make
