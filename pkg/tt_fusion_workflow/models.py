"""Early, late and Tensor-Train fusion models.

Every model shares the same three per-frame feature extractors and the
same task heads; only the fusion stage in between differs:

* early: per-frame concatenation of the three views, then one temporal
  stack of LSTMs;
* late: one temporal stack per view, clip summaries concatenated;
* tt: one temporal stack per view, augmented outer product of the clip
  summaries, then a TT layer.
"""
import json
import logging
import math
import struct
from dataclasses import dataclass
from os import PathLike

import numpy as np
from pydantic import ValidationError
from scipy.special import softmax

from .config import FusionKind, ModelSpec, ProfileSettings
from .data import ClipRecord, head_classes
from .exceptions import FormatError, InvalidArgumentError
from .layers import (LSTM, BatchNorm, Conv1D, Conv2D, ConvBlock, Dense, Dropout,
                     GlobalAveragePool, Layer, ReLU, ResidualBlock, Sequential, TTLinear)
from .tensor_train import TTLayerSpec, outer_fuse, outer_fuse_backward

logger = logging.getLogger(__name__)

VIEWS = ('game', 'cam', 'audio')

CHECKPOINT_MAGIC = b'TTFZ'
CHECKPOINT_VERSION = 1


@dataclass
class ClipBatch:
    """Model inputs of B clips, scaled to double precision."""

    game: np.ndarray
    """(B, T, H, W, 3) game frames in [0, 1]."""

    cam: np.ndarray
    """(B, T, h, w, 3) webcam frames in [0, 1]."""

    audio: np.ndarray
    """(B, T, window, 1) audio cut into one window per frame."""

    def __len__(self) -> int:
        return self.game.shape[0]


def audio_window(profile: ProfileSettings) -> int:
    """Audio samples per frame; the clip is zero-padded to frames * window."""

    return math.ceil(profile.audio_len / profile.frames)


def make_batch(records: list[ClipRecord], profile: ProfileSettings) -> ClipBatch:
    """Stack clip records into a `ClipBatch`.

    The audio vector is zero-padded to frames * ceil(L / frames) samples and
    cut into equal windows, so that every visual frame has an audio window.
    """

    if not records:
        raise InvalidArgumentError('a batch needs at least one clip')
    for record in records:
        record.check(profile)

    frames, window = profile.frames, audio_window(profile)
    audio = np.zeros((len(records), frames * window))
    audio[:, :profile.audio_len] = [r.audio for r in records]
    return ClipBatch(game=np.stack([r.game for r in records]) / 255.0,
                     cam=np.stack([r.cam for r in records]) / 255.0,
                     audio=audio.reshape(len(records), frames, window, 1))


def image_extractor(channels: tuple[int, ...], profile: ProfileSettings,
                    rng: np.random.Generator) -> Sequential:
    """Residual 2D CNN: per stage a stride-2 conv block and a residual block,
    then global average pooling and a dense projection to F features."""

    momentum, eps, k = profile.bn_momentum, profile.bn_eps, profile.conv_kernel
    stages = []
    previous = 3
    for c in channels:
        stages.append(ConvBlock(Conv2D(previous, c, k, rng, stride=2), momentum, eps))
        stages.append(ResidualBlock(c, k, rng, momentum, eps))
        previous = c
    return Sequential(*stages, GlobalAveragePool(),
                      Dense(previous, profile.feature_width, rng), ReLU())


def audio_extractor(profile: ProfileSettings, rng: np.random.Generator) -> Sequential:
    """1D CNN over one audio window followed by a dense projection."""

    momentum, eps, k = profile.bn_momentum, profile.bn_eps, profile.audio_kernel
    stages = []
    previous = 1
    for c in profile.audio_channels:
        stages.append(ConvBlock(Conv1D(previous, c, k, rng, stride=2), momentum, eps))
        previous = c
    return Sequential(*stages, GlobalAveragePool(),
                      Dense(previous, profile.feature_width, rng), ReLU())


class TemporalStack(Sequential):
    """Batch norm and dropout, stacked LSTMs, batch norm and dropout.

    The input normalization keeps separate statistics per time step and
    feature (reduced over the batch only); the last LSTM returns its final
    hidden state.
    """

    def __init__(self, in_width: int, width: int, layers: int, profile: ProfileSettings,
                 rng: np.random.Generator):
        Layer.__init__(self)
        momentum, eps = profile.bn_momentum, profile.bn_eps
        self.add_child('norm_in', BatchNorm(in_width, momentum, eps, reduce_axes=(0,),
                                            stat_shape=(profile.frames, in_width)))
        self.add_child('drop_in', Dropout(profile.dropout, rng))
        for i in range(layers):
            self.add_child(f'lstm_{i}', LSTM(in_width if i == 0 else width, width, rng,
                                             return_sequences=i < layers - 1))
        self.add_child('norm_out', BatchNorm(width, momentum, eps))
        self.add_child('drop_out', Dropout(profile.dropout, rng))


class EarlyFusion(Layer):

    def __init__(self, profile: ProfileSettings, rng: np.random.Generator):
        super().__init__()
        self.add_child('temporal', TemporalStack(3 * profile.feature_width, profile.early_width,
                                                 profile.early_layers, profile, rng))

    def forward(self, x, train=False):
        batch, frames, views, width = x.shape
        return self.children['temporal'].forward(x.reshape(batch, frames, views * width), train)

    def backward(self, grad):
        grad = self.children['temporal'].backward(grad)
        batch, frames, _ = grad.shape
        return grad.reshape(batch, frames, len(VIEWS), -1)


class LateFusion(Layer):

    def __init__(self, profile: ProfileSettings, rng: np.random.Generator):
        super().__init__()
        for view in VIEWS:
            self.add_child(view, TemporalStack(profile.feature_width, profile.view_width,
                                               profile.view_layers, profile, rng))

    def summaries(self, x: np.ndarray, train: bool) -> list[np.ndarray]:
        return [self.children[view].forward(x[:, :, v], train) for v, view in enumerate(VIEWS)]

    def summaries_backward(self, grads: list[np.ndarray]) -> np.ndarray:
        return np.stack([self.children[view].backward(g) for view, g in zip(VIEWS, grads)],
                        axis=2)

    def forward(self, x, train=False):
        return np.concatenate(self.summaries(x, train), axis=1)

    def backward(self, grad):
        return self.summaries_backward(np.split(grad, len(VIEWS), axis=1))


class TTFusion(LateFusion):
    """Per-view temporal stacks, augmented outer product, TT layer."""

    def __init__(self, profile: ProfileSettings, rng: np.random.Generator):
        super().__init__(profile, rng)
        spec = TTLayerSpec(input_modes=profile.tt_input_modes,
                           output_modes=profile.tt_output_modes,
                           ranks=profile.tt_ranks,
                           has_bias=profile.tt_bias)
        self.add_child('tt', TTLinear(spec, rng))

    def forward(self, x, train=False):
        self._views = self.summaries(x, train)
        z = outer_fuse(*self._views)
        return self.children['tt'].forward(z.reshape(z.shape[0], -1), train)

    def backward(self, grad):
        grad_z = self.children['tt'].backward(grad)
        return self.summaries_backward(list(outer_fuse_backward(*self._views, grad_z)))


FUSION_STAGES: dict[FusionKind, type[Layer]] = {
    FusionKind.EARLY: EarlyFusion,
    FusionKind.LATE: LateFusion,
    FusionKind.TENSOR_TRAIN: TTFusion,
}


class TaskHead(Sequential):
    """Dense + ReLU, then a dense layer producing the class logits."""

    def __init__(self, in_width: int, width: int, n_classes: int, rng: np.random.Generator):
        super().__init__(Dense(in_width, width, rng), ReLU(), Dense(width, n_classes, rng))


class FusionModel(Layer):
    """Feature extractors, fusion stage and one head per task."""

    def __init__(self, spec: ModelSpec, rng: np.random.Generator):
        super().__init__()
        self.spec = spec
        profile = spec.profile
        self.add_child('game_extractor', image_extractor(profile.game_channels, profile, rng))
        self.add_child('cam_extractor', image_extractor(profile.cam_channels, profile, rng))
        self.add_child('audio_extractor', audio_extractor(profile, rng))
        self.add_child('fusion', FUSION_STAGES[spec.fusion](profile, rng))
        heads = self.add_child('heads', Layer())
        for head in spec.task.heads:
            heads.add_child(head, TaskHead(spec.fused_width, profile.head_width,
                                           len(head_classes(head)), rng))

    @property
    def heads(self) -> tuple[str, ...]:
        return self.spec.task.heads

    def features(self, batch: ClipBatch, train: bool = False) -> np.ndarray:
        """Per-frame features (B, T, 3, F) in view order game, cam, audio."""

        out = []
        for view in VIEWS:
            x = getattr(batch, view)
            frames = x.reshape((-1,) + x.shape[2:])
            f = self.children[f'{view}_extractor'].forward(frames, train)
            out.append(f.reshape(x.shape[0], x.shape[1], -1))
        return np.stack(out, axis=2)

    def features_backward(self, grad: np.ndarray) -> dict[str, np.ndarray]:
        batch, frames = grad.shape[:2]
        grads = {}
        for v, view in enumerate(VIEWS):
            g = self.children[f'{view}_extractor'].backward(grad[:, :, v].reshape(batch * frames, -1))
            grads[view] = g.reshape((batch, frames) + g.shape[1:])
        return grads

    def fuse(self, features: np.ndarray, train: bool = False) -> np.ndarray:
        return self.children['fusion'].forward(features, train)

    def logits(self, fused: np.ndarray, train: bool = False) -> dict[str, np.ndarray]:
        if fused.shape[-1] != self.spec.fused_width:
            raise InvalidArgumentError(f'heads expect {self.spec.fused_width} features, '
                                       f'got {fused.shape[-1]}')
        return {head: self.children['heads'].children[head].forward(fused, train)
                for head in self.heads}

    def forward(self, batch: ClipBatch, train: bool = False) -> dict[str, np.ndarray]:
        return self.logits(self.fuse(self.features(batch, train), train), train)

    def backward(self, grads: dict[str, np.ndarray]) -> dict[str, np.ndarray]:
        """Backpropagate head logit gradients; returns input gradients per view."""

        heads = self.children['heads'].children
        grad_fused = sum(heads[head].backward(grads[head]) for head in self.heads)
        grad_features = self.children['fusion'].backward(grad_fused)
        return self.features_backward(grad_features)


def build_model(spec: ModelSpec, rng: np.random.Generator) -> FusionModel:
    """Build a model for a fusion kind, task set and profile.

    Parameters
    ----------
    spec : ModelSpec
        Model description; the profile fixes every layer size.
    rng : np.random.Generator
        Source of the initial weights and of the dropout masks.

    Returns
    -------
    FusionModel
        Freshly initialized model.
    """

    model = FusionModel(spec, rng)
    logger.debug('Built %s/%s model (%s profile) with %d parameters', spec.fusion.value,
                 spec.task.value, spec.profile.name, model.param_count())
    return model


def extract_features(model: FusionModel, clip: ClipRecord) -> np.ndarray:
    """Per-frame (T, 3, F) features of a single clip, in inference mode."""

    return model.features(make_batch([clip], model.spec.profile))[0]


def _fused(model: FusionModel, kind: FusionKind, features: np.ndarray) -> np.ndarray:
    if model.spec.fusion is not kind:
        raise InvalidArgumentError(f'model uses {model.spec.fusion.value} fusion, '
                                   f'not {kind.value}')
    profile = model.spec.profile
    expected = (profile.frames, len(VIEWS), profile.feature_width)
    features = np.asarray(features, dtype=np.float64)
    if features.shape[-3:] != expected or features.ndim not in (3, 4):
        raise InvalidArgumentError(f'features must have shape {expected} or a batch of '
                                   f'them, got {features.shape}')
    fused = model.fuse(features.reshape((-1,) + expected))
    return fused[0] if features.ndim == 3 else fused


def forward_early(model: FusionModel, features: np.ndarray) -> np.ndarray:
    """Clip vector of an early fusion model from (T, 3, F) features."""

    return _fused(model, FusionKind.EARLY, features)


def forward_late(model: FusionModel, features: np.ndarray) -> np.ndarray:
    """Concatenated per-view clip summaries (game, cam, audio)."""

    return _fused(model, FusionKind.LATE, features)


def forward_tt(model: FusionModel, features: np.ndarray) -> np.ndarray:
    """TT layer applied to the augmented outer product of the view summaries."""

    return _fused(model, FusionKind.TENSOR_TRAIN, features)


@dataclass(frozen=True)
class Prediction:
    """Class distributions of the heads a model has."""

    valence: np.ndarray | None = None
    arousal: np.ndarray | None = None
    context: np.ndarray | None = None

    def label(self, head: str) -> int:
        return int(np.argmax(getattr(self, head)))


def classify(model: FusionModel, fused: np.ndarray) -> Prediction | list[Prediction]:
    """Softmax distributions of every head for one fused vector, or a list of
    predictions for a batch (B, width)."""

    fused = np.asarray(fused, dtype=np.float64)
    probs = {head: softmax(z, axis=-1) for head, z in model.logits(np.atleast_2d(fused)).items()}
    predictions = [Prediction(**{head: p[i] for head, p in probs.items()})
                   for i in range(np.atleast_2d(fused).shape[0])]
    return predictions[0] if fused.ndim == 1 else predictions


def count_params(model: FusionModel) -> dict[str, int]:
    """Trainable scalars per submodule, two levels deep, plus 'total'.

    Keys are dotted paths such as 'game_extractor' or 'fusion.tt'; the
    fusion stage and the heads are broken down by child.
    """

    counts = {}
    for name, child in model.children.items():
        if child.children and name in ('fusion', 'heads'):
            for sub, grandchild in child.children.items():
                counts[f'{name}.{sub}'] = grandchild.param_count()
        else:
            counts[name] = child.param_count()
    counts['total'] = model.param_count()
    return counts


def _arrays(model: FusionModel) -> list[tuple[str, np.ndarray]]:
    return [(name, value) for name, value, _ in model.named_params()] + \
        list(model.named_buffers())


def checkpoint_bytes(model: FusionModel) -> bytes:
    """Serialize every parameter and buffer of `model`.

    Layout (little-endian): magic 'TTFZ', u16 version, u32 length + JSON
    model spec, u32 entry count, then per entry u16 length + UTF-8 name,
    u8 ndim, ndim x u32 shape and the float64 data.
    """

    spec = json.dumps(model.spec.model_dump(mode='json'), sort_keys=True).encode()
    arrays = _arrays(model)
    parts = [CHECKPOINT_MAGIC, struct.pack('<HI', CHECKPOINT_VERSION, len(spec)), spec,
             struct.pack('<I', len(arrays))]
    for name, value in arrays:
        encoded = name.encode()
        parts.append(struct.pack(f'<H{len(encoded)}sB{value.ndim}I', len(encoded), encoded,
                                 value.ndim, *value.shape))
        parts.append(np.ascontiguousarray(value, dtype='<f8').tobytes())
    return b''.join(parts)


class _Reader:

    def __init__(self, data: bytes):
        self.data = data
        self.offset = 0

    def take(self, fmt: str) -> tuple:
        size = struct.calcsize(fmt)
        if self.offset + size > len(self.data):
            raise FormatError('checkpoint is truncated')
        values = struct.unpack_from(fmt, self.data, self.offset)
        self.offset += size
        return values

    def raw(self, size: int) -> bytes:
        if self.offset + size > len(self.data):
            raise FormatError('checkpoint is truncated')
        chunk = self.data[self.offset:self.offset + size]
        self.offset += size
        return chunk


def model_from_bytes(data: bytes) -> FusionModel:
    """Rebuild a model from `checkpoint_bytes` output."""

    reader = _Reader(data)
    if reader.raw(4) != CHECKPOINT_MAGIC:
        raise FormatError('not a model checkpoint (bad magic)')
    version, spec_len = reader.take('<HI')
    if version != CHECKPOINT_VERSION:
        raise FormatError(f'unsupported checkpoint version {version}')
    try:
        spec = ModelSpec.model_validate(json.loads(reader.raw(spec_len)))
    except (ValueError, ValidationError) as e:
        raise FormatError(f'invalid model spec in checkpoint: {e}') from e

    model = build_model(spec, np.random.default_rng(0))
    targets = dict(_arrays(model))
    (count,) = reader.take('<I')
    if count != len(targets):
        raise FormatError(f'checkpoint holds {count} arrays, model has {len(targets)}')
    for _ in range(count):
        (name_len,) = reader.take('<H')
        name = reader.raw(name_len).decode()
        (ndim,) = reader.take('<B')
        shape = reader.take(f'<{ndim}I')
        if name not in targets or targets[name].shape != shape:
            raise FormatError(f'unexpected array {name!r} with shape {shape}')
        size = math.prod(shape) * 8
        targets[name][...] = np.frombuffer(reader.raw(size), dtype='<f8').reshape(shape)
    if reader.offset != len(data):
        raise FormatError('trailing bytes after the last checkpoint entry')
    return model


def save_checkpoint(model: FusionModel, path: PathLike):
    """Write `model` (spec, parameters and batch norm statistics) as a TTFZ file."""

    with open(path, 'wb') as f:
        f.write(checkpoint_bytes(model))


def load_checkpoint(path: PathLike) -> FusionModel:
    """Rebuild a model from a TTFZ file; raises `FormatError` on a damaged file."""

    with open(path, 'rb') as f:
        return model_from_bytes(f.read())
