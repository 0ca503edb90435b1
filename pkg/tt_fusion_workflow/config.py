import argparse
import math
import os
from enum import Enum
from os import PathLike
from pathlib import Path
from typing import Any, TypeVar

import yaml
from pydantic import BaseModel, Field, field_validator, model_validator

C = TypeVar('C', bound=BaseModel)

THREADS_ENV = 'TTFUSE_THREADS'


class FusionKind(str, Enum):
    EARLY = 'early'
    LATE = 'late'
    TENSOR_TRAIN = 'tt'


class TaskSet(str, Enum):
    JOINT = 'joint'
    AFFECT = 'affect'
    GAME = 'game'

    @property
    def heads(self) -> tuple[str, ...]:
        """Names of the classification heads trained for this task set."""
        if self is TaskSet.AFFECT:
            return ('valence', 'arousal')
        if self is TaskSet.GAME:
            return ('context',)
        return ('valence', 'arousal', 'context')


class ProfileSettings(BaseModel):
    name: str = 'custom'
    """Name of the preset this profile was derived from."""

    frames: int = Field(20, gt=0)
    """Number of visual frames per clip (4 fps over 5 seconds)."""

    game_size: int = Field(gt=0)
    """Height and width of the square game frames."""

    cam_size: int = Field(gt=0)
    """Height and width of the square webcam frames."""

    audio_len: int = Field(gt=0)
    """Number of audio samples stored per clip."""

    feature_width: int = Field(gt=0)
    """Width F of the per-frame feature vector of every view."""

    game_channels: tuple[int, ...]
    """Channel schedule of the residual game-frame extractor."""

    cam_channels: tuple[int, ...]
    """Channel schedule of the residual webcam extractor."""

    audio_channels: tuple[int, int, int]
    """Widths of the three 1D convolutions of the audio extractor."""

    conv_kernel: int = Field(3, gt=0)
    """Kernel size of the 2D convolutions."""

    audio_kernel: int = Field(5, gt=0)
    """Kernel size of the 1D convolutions."""

    early_width: int = Field(gt=0)
    """Width of the LSTM layers of the early fusion model."""

    early_layers: int = Field(2, gt=0)
    """Number of stacked LSTM layers of the early fusion model."""

    view_width: int = Field(gt=0)
    """Width of the per-view LSTM layers of the late and TT fusion models."""

    view_layers: int = Field(2, gt=0)
    """Number of stacked per-view LSTM layers."""

    tt_input_modes: tuple[int, ...]
    """Factorization of (view_width + 1) ** 3 into TT input modes."""

    tt_output_modes: tuple[int, ...]
    """Factorization of the TT layer output width."""

    tt_ranks: tuple[int, ...]
    """TT ranks, starting and ending with 1."""

    tt_bias: bool = True
    """Whether the TT layer carries a bias vector."""

    head_width: int = Field(128, gt=0)
    """Width of the hidden dense layer of every classification head."""

    dropout: float = Field(0.2, ge=0.0, lt=1.0)
    """Dropout rate applied before and after the temporal layers."""

    bn_momentum: float = Field(0.99, gt=0.0, lt=1.0)
    """Momentum of the batch normalization running statistics."""

    bn_eps: float = Field(1e-5, gt=0.0)
    """Variance epsilon of batch normalization."""

    @model_validator(mode='after')
    def _check_consistency(self) -> 'ProfileSettings':
        if not self.game_channels or not self.cam_channels:
            raise ValueError('channel schedules must not be empty')
        if any(c <= 0 for c in (*self.game_channels, *self.cam_channels,
                                *self.audio_channels)):
            raise ValueError('channel counts must be positive')
        d = len(self.tt_input_modes)
        if len(self.tt_output_modes) != d or len(self.tt_ranks) != d + 1:
            raise ValueError('TT modes and ranks have inconsistent lengths')
        if self.tt_ranks[0] != 1 or self.tt_ranks[-1] != 1:
            raise ValueError('TT ranks must start and end with 1')
        fused = (self.view_width + 1) ** 3
        if math.prod(self.tt_input_modes) != fused:
            raise ValueError(f'TT input modes multiply to '
                             f'{math.prod(self.tt_input_modes)}, expected '
                             f'(view_width + 1) ** 3 = {fused}')
        return self

    def fused_width(self, fusion: FusionKind) -> int:
        """Width of the clip vector handed to the classification heads."""
        if fusion is FusionKind.EARLY:
            return self.early_width
        if fusion is FusionKind.LATE:
            return 3 * self.view_width
        return math.prod(self.tt_output_modes)

    @classmethod
    def named(cls, name: str) -> 'ProfileSettings':
        """Return one of the preset profiles ('full' or 'desk')."""
        try:
            return cls(**PROFILE_PRESETS[name])
        except KeyError:
            raise ValueError(f'unknown profile {name!r}; expected one of '
                             f'{sorted(PROFILE_PRESETS)}') from None


PROFILE_PRESETS: dict[str, dict[str, Any]] = {
    'full': dict(
        name='full',
        game_size=128, cam_size=64, audio_len=5512,
        feature_width=512,
        game_channels=(32, 64, 128, 256),
        cam_channels=(32, 64, 128),
        audio_channels=(32, 64, 128),
        early_width=384, view_width=128,
        tt_input_modes=(3, 43, 129, 43, 3),
        tt_output_modes=(4, 4, 4, 3, 2),
        tt_ranks=(1, 2, 4, 4, 2, 1),
        head_width=128,
    ),
    'desk': dict(
        name='desk',
        game_size=32, cam_size=16, audio_len=1024,
        feature_width=32,
        game_channels=(8, 16),
        cam_channels=(8,),
        audio_channels=(8, 16, 16),
        early_width=96, view_width=32,
        tt_input_modes=(3, 11, 33, 11, 3),
        tt_output_modes=(4, 2, 2, 3, 2),
        tt_ranks=(1, 2, 4, 4, 2, 1),
        head_width=32,
    ),
}


class ModelSpec(BaseModel):
    fusion: FusionKind = FusionKind.TENSOR_TRAIN
    """Fusion architecture (early, late or tt)."""

    task: TaskSet = TaskSet.JOINT
    """Task set (joint, affect or game)."""

    profile: ProfileSettings = Field(default_factory=lambda: ProfileSettings.named('desk'))
    """Layer and input sizes; a preset name or a mapping of overrides."""

    @field_validator('profile', mode='before')
    @classmethod
    def _resolve_profile(cls, value: Any) -> Any:
        if isinstance(value, str):
            return ProfileSettings.named(value)
        if isinstance(value, dict):
            base = PROFILE_PRESETS.get(value.get('name', 'desk'), PROFILE_PRESETS['desk'])
            return {**base, **value}
        return value

    @property
    def fused_width(self) -> int:
        return self.profile.fused_width(self.fusion)


class OptimizerSettings(BaseModel):
    lr: float = Field(0.0005, gt=0.0)
    """Adam step size."""

    beta1: float = Field(0.9, ge=0.0, lt=1.0)
    beta2: float = Field(0.999, ge=0.0, lt=1.0)
    eps: float = Field(1e-8, gt=0.0)
    """Adam moment decay rates and denominator epsilon."""

    epochs: int = Field(100, ge=0)
    """Number of training epochs."""

    batch_size: int = Field(8, ge=2)
    """Number of clips per mini-batch; batch norm needs at least two."""


class DataSettings(BaseModel):
    manifest: Path | None = None
    """Manifest of a dataset on disk; when unset clips are generated."""

    n_clips: int = Field(200, ge=0)
    """Number of clips to generate when no manifest is given."""

    marginals: Path | None = None
    """JSON document with label marginals; defaults to the raw annotation
    distribution."""

    include_misc: bool = False
    """Generate miscellaneous-context clips (removed again before training)."""

    test_fraction: float = Field(0.2, gt=0.0, lt=1.0)
    """Fraction of clips held out for testing."""

    oversample: bool = True
    """Balance the training split by cloning minority-class clips."""

    oversample_threshold: int | None = Field(None, ge=0)
    """Maximum number of clones; defaults to the training split size."""


class RunConfig(BaseModel):
    model: ModelSpec = Field(default_factory=ModelSpec)
    optimizer: OptimizerSettings = Field(default_factory=OptimizerSettings)
    data: DataSettings = Field(default_factory=DataSettings)

    seed: int = Field(0, ge=0)
    """Seed of every random stream of the run."""

    out: Path = Path('runs/run')
    """Run directory; must not contain a previous run."""


def parse_config(config_path: PathLike, config_type: type[C]) -> C:
    """Parse a YAML (or JSON) configuration file into a settings model.

    Parameters
    ----------
    config_path : PathLike
        Configuration file path.
    config_type : type[C]
        Configuration class to parse data into.

    Returns
    -------
    C
        Parsed configuration.
    """

    with open(config_path, 'r') as f:
        config = yaml.safe_load(f)

    return config_type.model_validate(config or {})


def save_config(config: BaseModel, config_path: PathLike):
    """Write a settings model as YAML so that `parse_config` restores it."""

    with open(config_path, 'w') as f:
        yaml.safe_dump(config.model_dump(mode='json'), f, sort_keys=False)


def worker_count() -> int:
    """Return the number of worker threads, capped by `TTFUSE_THREADS`."""

    default = os.cpu_count() or 1
    value = os.environ.get(THREADS_ENV)
    if not value:
        return default
    try:
        return max(1, min(int(value), default))
    except ValueError:
        raise ValueError(f'{THREADS_ENV} must be an integer, got {value!r}') from None


def parse_args() -> tuple[str, int]:
    """Parse command-line arguments for configuration file path and parallel
    run index.

    Returns
    -------
    tuple[str, int]
        Configuration file path and parallel run index.
    """

    parser = argparse.ArgumentParser()

    parser.add_argument('config',
                        type=str,
                        help='path to YAML config file')

    parser.add_argument('-i', '--index',
                        default=0,
                        type=int,
                        required=False,
                        help='index of parallel run')

    args = parser.parse_args()

    return args.config, args.index
