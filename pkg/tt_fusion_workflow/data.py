"""Clip records, the binary clip container, manifests and synthetic data."""
import json
import logging
import math
import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from enum import IntEnum
from importlib import resources
from os import PathLike
from pathlib import Path
from typing import Literal

import numpy as np
from pydantic import BaseModel, ValidationError, field_validator

from .config import ProfileSettings, worker_count
from .exceptions import FormatError, InvalidArgumentError

logger = logging.getLogger(__name__)

CLIP_MAGIC = b'CLIP'
CLIP_VERSION = 1
# magic, version, (H, W, h, w, frames, audio_len), (valence, arousal, context)
CLIP_HEADER = struct.Struct('<4sH6I3B')


class Valence(IntEnum):
    NEGATIVE = 0
    NEUTRAL = 1
    POSITIVE = 2


class Arousal(IntEnum):
    NEUTRAL = 0
    POSITIVE = 1


class Context(IntEnum):
    IN_LANE = 0
    SHOPPING = 1
    RETURNING_TO_LANE = 2
    ROAMING = 3
    FIGHTING = 4
    PUSHING = 5
    DEFENDING = 6
    DEAD = 7
    MISCELLANEOUS = 8


HEAD_LABELS: dict[str, type[IntEnum]] = {
    'valence': Valence,
    'arousal': Arousal,
    'context': Context,
}


def head_classes(head: str) -> list[IntEnum]:
    """Classes a head predicts; miscellaneous context is never a target."""

    return [c for c in HEAD_LABELS[head] if c is not Context.MISCELLANEOUS]


@dataclass(frozen=True)
class Labels:
    valence: Valence
    arousal: Arousal
    context: Context

    def index(self, head: str) -> int:
        return int(getattr(self, head))


@dataclass(frozen=True)
class ClipRecord:
    """One five-second clip: game frames, webcam frames, audio and labels.

    Frames are (frames, H, W, 3) uint8 RGB; audio is float32 in [-1, 1].
    """

    clip_id: str
    streamer_id: str
    game: np.ndarray
    cam: np.ndarray
    audio: np.ndarray
    labels: Labels
    origin: Literal['original', 'clone'] = 'original'

    def check(self, profile: ProfileSettings):
        """Raise `InvalidArgumentError` unless the tensors match `profile`."""

        expected = {
            'game': (profile.frames, profile.game_size, profile.game_size, 3),
            'cam': (profile.frames, profile.cam_size, profile.cam_size, 3),
            'audio': (profile.audio_len,),
        }
        for name, shape in expected.items():
            actual = getattr(self, name).shape
            if actual != shape:
                raise InvalidArgumentError(f'clip {self.clip_id}: {name} has shape '
                                           f'{actual}, profile expects {shape}')


def clip_nbytes(profile: ProfileSettings) -> int:
    """Size of the container of one clip under `profile`."""

    frames = profile.frames
    return (CLIP_HEADER.size
            + frames * profile.game_size ** 2 * 3
            + frames * profile.cam_size ** 2 * 3
            + profile.audio_len * 4)


def save_clip(record: ClipRecord) -> bytes:
    """Serialize a clip into the binary container format.

    Layout: magic "CLIP", version u16, six u32 dims (H, W, h, w, frames,
    audio_len), three u8 label codes, then game frames and webcam frames as
    raw u8 and audio as little-endian float32. Identifiers are kept in the
    manifest, not in the container.
    """

    frames, height, width, _ = record.game.shape
    _, cam_height, cam_width, _ = record.cam.shape
    if record.cam.shape[0] != frames or record.game.dtype != np.uint8 or \
            record.cam.dtype != np.uint8:
        raise InvalidArgumentError('frames must be uint8 with matching frame counts')
    header = CLIP_HEADER.pack(CLIP_MAGIC, CLIP_VERSION,
                              height, width, cam_height, cam_width, frames,
                              record.audio.shape[0],
                              record.labels.valence, record.labels.arousal,
                              record.labels.context)
    return b''.join([header,
                     np.ascontiguousarray(record.game).tobytes(),
                     np.ascontiguousarray(record.cam).tobytes(),
                     np.asarray(record.audio, dtype='<f4').tobytes()])


def load_clip(data: bytes, clip_id: str = '', streamer_id: str = '') -> ClipRecord:
    """Decode a clip container produced by `save_clip`.

    Raises
    ------
    FormatError
        On a bad magic, version, dimension, label code or buffer length.
    """

    if len(data) < CLIP_HEADER.size:
        raise FormatError(f'clip container truncated: {len(data)} bytes')
    (magic, version, height, width, cam_height, cam_width, frames, audio_len,
     valence, arousal, context) = CLIP_HEADER.unpack_from(data)
    if magic != CLIP_MAGIC:
        raise FormatError(f'bad clip magic {magic!r}')
    if version != CLIP_VERSION:
        raise FormatError(f'unsupported clip version {version}')
    if min(height, width, cam_height, cam_width, frames, audio_len) == 0:
        raise FormatError('clip dimensions must be positive')
    try:
        labels = Labels(Valence(valence), Arousal(arousal), Context(context))
    except ValueError as err:
        raise FormatError(f'bad label code: {err}') from None

    game_size = frames * height * width * 3
    cam_size = frames * cam_height * cam_width * 3
    expected = CLIP_HEADER.size + game_size + cam_size + audio_len * 4
    if len(data) != expected:
        raise FormatError(f'clip container has {len(data)} bytes, expected {expected}')

    offset = CLIP_HEADER.size
    game = np.frombuffer(data, dtype=np.uint8, count=game_size, offset=offset)
    offset += game_size
    cam = np.frombuffer(data, dtype=np.uint8, count=cam_size, offset=offset)
    offset += cam_size
    audio = np.frombuffer(data, dtype='<f4', count=audio_len, offset=offset)

    return ClipRecord(clip_id=clip_id,
                      streamer_id=streamer_id,
                      game=game.reshape(frames, height, width, 3).copy(),
                      cam=cam.reshape(frames, cam_height, cam_width, 3).copy(),
                      audio=audio.astype(np.float32),
                      labels=labels)


class ManifestEntry(BaseModel):
    clip_id: str
    """Identifier of the clip; clones repeat the identifier of their original."""

    file: str
    """Container path, relative to the manifest directory."""

    streamer_id: str
    valence: str
    arousal: str
    context: str
    """Label names (lower case enum member names)."""

    origin: Literal['original', 'clone'] = 'original'

    @field_validator('valence', 'arousal', 'context')
    @classmethod
    def _known_label(cls, value: str, info) -> str:
        enum = HEAD_LABELS[info.field_name]
        if value.upper() not in enum.__members__:
            raise ValueError(f'unknown {info.field_name} label {value!r}')
        return value.lower()

    @property
    def labels(self) -> Labels:
        return Labels(Valence[self.valence.upper()],
                      Arousal[self.arousal.upper()],
                      Context[self.context.upper()])

    @classmethod
    def from_record(cls, record: ClipRecord, file: str) -> 'ManifestEntry':
        return cls(clip_id=record.clip_id,
                   file=file,
                   streamer_id=record.streamer_id,
                   valence=record.labels.valence.name.lower(),
                   arousal=record.labels.arousal.name.lower(),
                   context=record.labels.context.name.lower(),
                   origin=record.origin)


def write_manifest(entries: list[ManifestEntry], path: PathLike):
    """Write manifest entries as line-delimited JSON."""

    with open(path, 'w') as f:
        for entry in entries:
            f.write(entry.model_dump_json() + '\n')


def read_manifest(path: PathLike) -> list[ManifestEntry]:
    """Read and check a line-delimited JSON manifest.

    Raises
    ------
    FormatError
        On undecodable lines, duplicate original identifiers or clones of
        unknown clips.
    """

    entries = []
    with open(path, 'r') as f:
        for number, line in enumerate(f, start=1):
            if not line.strip():
                continue
            try:
                entries.append(ManifestEntry.model_validate_json(line))
            except ValidationError as err:
                raise FormatError(f'{path}:{number}: {err}') from None

    originals = [e.clip_id for e in entries if e.origin == 'original']
    if len(set(originals)) != len(originals):
        raise FormatError(f'{path}: duplicate clip identifiers')
    unknown = {e.clip_id for e in entries if e.origin == 'clone'} - set(originals)
    if unknown:
        raise FormatError(f'{path}: clones of unknown clips {sorted(unknown)[:5]}')
    return entries


def write_dataset(records: list[ClipRecord], directory: PathLike) -> list[ManifestEntry]:
    """Write clip containers under `directory/clips` and the manifest
    `directory/manifest.jsonl`; clones reuse the container of their original."""

    directory = Path(directory)
    (directory / 'clips').mkdir(parents=True, exist_ok=True)
    entries = []
    for record in records:
        file = f'clips/{record.clip_id}.clip'
        if record.origin == 'original':
            (directory / file).write_bytes(save_clip(record))
        entries.append(ManifestEntry.from_record(record, file))
    write_manifest(entries, directory / 'manifest.jsonl')
    return entries


def load_dataset(manifest_path: PathLike) -> list[ClipRecord]:
    """Load every clip a manifest refers to, in manifest order."""

    manifest_path = Path(manifest_path)
    entries = read_manifest(manifest_path)

    def load(entry: ManifestEntry) -> ClipRecord:
        path = manifest_path.parent / entry.file
        record = load_clip(path.read_bytes(), entry.clip_id, entry.streamer_id)
        if record.labels != entry.labels:
            raise FormatError(f'{path}: labels disagree with the manifest')
        return ClipRecord(record.clip_id, record.streamer_id, record.game, record.cam,
                          record.audio, record.labels, entry.origin)

    with ThreadPoolExecutor(max_workers=worker_count()) as pool:
        records = list(pool.map(load, entries))
    logger.info('Loaded %d clips from %s', len(records), manifest_path)
    return records


class Marginals(BaseModel):
    valence: tuple[float, float, float]
    arousal: tuple[float, float]
    context: tuple[float, ...]
    """Label distribution per output; counts are normalized on validation.
    Context takes 8 entries, or 9 to include miscellaneous clips."""

    @field_validator('valence', 'arousal', 'context')
    @classmethod
    def _normalize(cls, value: tuple[float, ...], info) -> tuple[float, ...]:
        if info.field_name == 'context' and len(value) not in (8, 9):
            raise ValueError('context marginals need 8 or 9 entries')
        if min(value) < 0 or sum(value) <= 0:
            raise ValueError(f'{info.field_name} marginals must be non-negative '
                             f'with a positive sum')
        total = sum(value)
        return tuple(v / total for v in value)

    @classmethod
    def table_i(cls, include_misc: bool = False) -> 'Marginals':
        """Marginals of the raw annotation counts shipped with the package."""

        counts = table_i_counts()
        context = counts['context'] if include_misc else counts['context'][:8]
        return cls(valence=counts['valence'], arousal=counts['arousal'], context=context)


def table_i_counts() -> dict[str, list[int]]:
    """Raw annotation counts per output (context includes miscellaneous)."""

    text = resources.files('tt_fusion_workflow.fixtures').joinpath('table_i_counts.json').read_text()
    return json.loads(text)


def table_iii_params() -> dict[str, dict[str, int]]:
    """Reported trainable weight totals per task set and fusion kind."""

    text = resources.files('tt_fusion_workflow.fixtures').joinpath('table_iii_params.json').read_text()
    return json.loads(text)


def table_ii_shares() -> dict[str, dict[str, list[float]]]:
    """Label shares before and after balancing reported for the raw annotations."""

    text = resources.files('tt_fusion_workflow.fixtures').joinpath('table_ii_shares.json').read_text()
    return json.loads(text)


def load_marginals(path: PathLike) -> Marginals:
    """Read label marginals from a JSON document.

    Parameters
    ----------
    path : PathLike
        File holding `valence`, `arousal` and `context` lists of class
        weights (counts or probabilities).

    Returns
    -------
    Marginals
        Validated and normalized marginals.
    """

    with open(path, 'r') as f:
        return Marginals.model_validate(json.load(f))


def _template(seed: int, size: int) -> np.ndarray:
    """A blocky RGB pattern in [0, 1], fixed by `seed`."""

    coarse = np.random.default_rng(seed).uniform(0.0, 1.0, size=(4, 4, 3))
    index = (np.arange(size) * 4) // size
    return coarse[index][:, index]


def _synth_clip(index: int, labels: Labels, streamer_id: str, profile: ProfileSettings,
                seed_seq: np.random.SeedSequence) -> ClipRecord:
    rng = np.random.default_rng(seed_seq)
    frames = profile.frames

    # game context selects the spatial template
    game = 20.0 + 200.0 * _template(10_000 + labels.context, profile.game_size)
    game = game[None] + rng.normal(0.0, 12.0, size=(frames, profile.game_size,
                                                    profile.game_size, 3))

    # valence selects the webcam pattern, arousal the brightness variance over time
    cam = 60.0 + 120.0 * _template(20_000 + labels.valence, profile.cam_size)
    flicker = 45.0 if labels.arousal is Arousal.POSITIVE else 6.0
    offsets = rng.normal(0.0, flicker, size=(frames, 1, 1, 1))
    cam = cam[None] + offsets + rng.normal(0.0, 10.0, size=(frames, profile.cam_size,
                                                            profile.cam_size, 3))

    # context selects the carrier frequency, arousal the amplitude
    window = math.ceil(profile.audio_len / frames)
    cycles = 2 + 2 * int(labels.context)
    amplitude = 0.8 if labels.arousal is Arousal.POSITIVE else 0.25
    t = np.arange(profile.audio_len)
    audio = amplitude * np.sin(2 * np.pi * cycles * t / window + rng.uniform(0, 2 * np.pi))
    audio = audio + rng.normal(0.0, 0.05, size=profile.audio_len)

    return ClipRecord(clip_id=f'clip_{index:06d}',
                      streamer_id=streamer_id,
                      game=np.clip(np.rint(game), 0, 255).astype(np.uint8),
                      cam=np.clip(np.rint(cam), 0, 255).astype(np.uint8),
                      audio=np.clip(audio, -1.0, 1.0).astype(np.float32),
                      labels=labels)


def synth_generate(seed: int, n: int, profile: ProfileSettings,
                   marginals: Marginals | None = None,
                   n_streamers: int = 10) -> list[ClipRecord]:
    """Generate `n` synthetic clips with label-dependent planted signals.

    Labels are drawn independently per output from `marginals`. Game
    context selects a spatial game-frame template and an audio carrier
    frequency; arousal scales audio amplitude and webcam brightness
    variance; valence selects a webcam pattern. Seeded Gaussian noise is
    added everywhere.

    Parameters
    ----------
    seed : int
        Seed; equal seeds give bit-identical datasets.
    n : int
        Number of clips.
    profile : ProfileSettings
        Input sizes.
    marginals : Marginals, optional
        Label distribution, by default the raw annotation distribution with
        miscellaneous clips removed.
    n_streamers : int, optional
        Number of distinct streamer identifiers, by default 10.

    Returns
    -------
    list[ClipRecord]
        Generated clips, in identifier order.
    """

    marginals = marginals or Marginals.table_i()
    rng = np.random.default_rng(seed)
    valence = rng.choice(len(marginals.valence), size=n, p=marginals.valence)
    arousal = rng.choice(len(marginals.arousal), size=n, p=marginals.arousal)
    context = rng.choice(len(marginals.context), size=n, p=marginals.context)
    streamers = rng.integers(n_streamers, size=n)
    clip_seeds = np.random.SeedSequence(seed).spawn(n)

    def make(i: int) -> ClipRecord:
        labels = Labels(Valence(int(valence[i])), Arousal(int(arousal[i])),
                        Context(int(context[i])))
        return _synth_clip(i, labels, f'streamer_{streamers[i]:02d}', profile, clip_seeds[i])

    with ThreadPoolExecutor(max_workers=worker_count()) as pool:
        records = list(pool.map(make, range(n)))
    logger.info('Generated %d synthetic clips (seed %d)', n, seed)
    return records


def label_counts(dataset, head: str) -> np.ndarray:
    """Per-class counts of one output over any sequence of labelled items."""

    n_classes = len(HEAD_LABELS[head])
    counts = np.zeros(n_classes, dtype=np.int64)
    for item in dataset:
        counts[item.labels.index(head)] += 1
    return counts
