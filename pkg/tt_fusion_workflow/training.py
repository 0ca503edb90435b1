"""Training loop, evaluation and persistent run directories."""
import csv
import logging
from collections.abc import Sequence
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .config import OptimizerSettings, RunConfig, parse_config, save_config
from .data import (ClipRecord, Marginals, head_classes, label_counts, load_dataset,
                   load_marginals, synth_generate)
from .exceptions import ConfigError, InvalidArgumentError, NumericError
from .filters import filter_misc, oversample
from .layers import BatchNorm, Dropout, weighted_softmax_xent_batch
from .metrics import MetricsReport, build_report, report_render
from .models import FusionModel, build_model, load_checkpoint, make_batch, save_checkpoint
from .optim import AdamState, adam_step
from .utils import class_weights, minibatches, split

logger = logging.getLogger(__name__)

CONFIG_FILE = 'config.yaml'
METRICS_FILE = 'metrics.csv'
REPORT_CSV = 'report.csv'
REPORT_JSON = 'report.json'
CHECKPOINT_FILE = 'checkpoint.ttfz'


@dataclass
class EpochLog:
    epoch: int
    losses: dict[str, float]
    """Mean training loss per head and 'total'."""

    f1: dict[tuple[str, str], float] = field(default_factory=dict)
    """Validation F1 per (output, class)."""


@dataclass
class RunArtifacts:
    directory: Path
    history: list[EpochLog]
    report: MetricsReport

    @property
    def config(self) -> Path:
        return self.directory / CONFIG_FILE

    @property
    def metrics_log(self) -> Path:
        return self.directory / METRICS_FILE

    @property
    def checkpoint(self) -> Path:
        return self.directory / CHECKPOINT_FILE


def head_targets(records: Sequence[ClipRecord], heads: Sequence[str]) -> dict[str, np.ndarray]:
    """Class index of every record per head."""

    return {head: np.array([r.labels.index(head) for r in records], dtype=np.int64)
            for head in heads}


def head_weights(records: Sequence[ClipRecord], head: str) -> np.ndarray:
    """Inverse-frequency loss weights of one head; empty classes count as 1."""

    counts = label_counts(records, head)[:len(head_classes(head))]
    return class_weights(np.maximum(counts, 1))


def predict(model: FusionModel, records: Sequence[ClipRecord],
            batch_size: int = 8) -> dict[str, np.ndarray]:
    """Predicted class index per head for every record, in inference mode."""

    preds = {head: [] for head in model.heads}
    for start in range(0, len(records), batch_size):
        batch = make_batch(list(records[start:start + batch_size]), model.spec.profile)
        for head, logits in model.forward(batch).items():
            preds[head].append(np.argmax(logits, axis=1))
    return {head: np.concatenate(p) if p else np.zeros(0, dtype=np.int64)
            for head, p in preds.items()}


def evaluate_model(model: FusionModel, records: Sequence[ClipRecord],
                   batch_size: int = 8) -> MetricsReport:
    """Per-class precision, recall and F1 of `model` on `records`."""

    return build_report(model.spec.fusion.value, model.spec.task.value,
                        predict(model, records, batch_size),
                        head_targets(records, model.heads))


def recalibrate_batch_norm(model: FusionModel, records: Sequence[ClipRecord], batch_size: int = 8):
    """Recompute every batch norm running statistic from one train-mode pass
    over `records`, without dropout and without touching the weights.

    The statistics become the average over the batches, so inference on the
    training clips sees what the last weights saw during training.
    """

    layers = list(model.sublayers())
    norms = [layer for layer in layers if isinstance(layer, BatchNorm)]
    dropouts = [layer for layer in layers if isinstance(layer, Dropout)]
    if not norms or len(records) < 2:
        return

    rates = [layer.rate for layer in dropouts]
    for layer in dropouts:
        layer.rate = 0.0
    for norm in norms:
        norm.reset_running_stats()
        norm.calibrating = True
    try:
        for idx in minibatches(len(records), batch_size):
            model.forward(make_batch([records[i] for i in idx], model.spec.profile), train=True)
    finally:
        for norm in norms:
            norm.calibrating = False
        for layer, rate in zip(dropouts, rates):
            layer.rate = rate


def _log_columns(heads: Sequence[str]) -> list[str]:
    return (['epoch', 'loss_total'] + [f'loss_{head}' for head in heads] +
            [f'f1_{head}_{c.name.lower()}' for head in heads for c in head_classes(head)])


def _log_row(log: EpochLog, heads: Sequence[str]) -> list[str]:
    values = [log.losses['total']] + [log.losses[head] for head in heads] + \
        [log.f1.get((head, c.name.lower()), 0.0) for head in heads for c in head_classes(head)]
    return [str(log.epoch)] + [f'{v:.8f}' for v in values]


def train_model(model: FusionModel,
                train: Sequence[ClipRecord],
                settings: OptimizerSettings,
                seed: int,
                validation: Sequence[ClipRecord] | None = None,
                metrics_log: Path | None = None) -> list[EpochLog]:
    """Train `model` with Adam on class-weighted cross-entropy summed over
    the heads.

    Parameters
    ----------
    model : FusionModel
        Model to train in place.
    train : Sequence[ClipRecord]
        Training clips (already filtered and balanced).
    settings : OptimizerSettings
        Learning rate, moments, epochs and batch size.
    seed : int
        Seed of the mini-batch order.
    validation : Sequence[ClipRecord], optional
        Clips scored after every epoch; the training clips when empty.
    metrics_log : Path, optional
        CSV file the epoch rows are appended to as training proceeds.

    Returns
    -------
    list[EpochLog]
        One entry per epoch.

    Raises
    ------
    NumericError
        If a loss or gradient becomes non-finite.
    """

    if len(train) < 2:
        raise InvalidArgumentError('training needs at least 2 clips')

    heads = model.heads
    rng = np.random.default_rng(seed)
    targets = head_targets(train, heads)
    weights = {head: head_weights(train, head) for head in heads}
    state = AdamState(lr=settings.lr, beta1=settings.beta1, beta2=settings.beta2,
                      eps=settings.eps)
    params = {name: value for name, value, _ in model.named_params()}
    grads = {name: grad for name, _, grad in model.named_params()}
    scored = validation if validation else train

    writer = None
    if metrics_log is not None:
        log_file = open(metrics_log, 'w', newline='')
        writer = csv.writer(log_file, lineterminator='\n')
        writer.writerow(_log_columns(heads))

    history = []
    try:
        for epoch in range(1, settings.epochs + 1):
            sums = dict.fromkeys(('total',) + heads, 0.0)
            for idx in minibatches(len(train), settings.batch_size, rng):
                batch = make_batch([train[i] for i in idx], model.spec.profile)
                model.zero_grad()
                logits = model.forward(batch, train=True)
                grad_logits = {}
                for head in heads:
                    loss, grad_logits[head] = weighted_softmax_xent_batch(
                        logits[head], targets[head][idx], weights[head])
                    if not np.isfinite(loss):
                        raise NumericError(f'non-finite {head} loss in epoch {epoch}', name=head)
                    sums[head] += loss * len(idx)
                    sums['total'] += loss * len(idx)
                model.backward(grad_logits)
                adam_step(state, params, grads)

            recalibrate_batch_norm(model, train, settings.batch_size)
            log = EpochLog(epoch, {key: value / len(train) for key, value in sums.items()},
                           evaluate_model(model, scored, settings.batch_size).f1())
            history.append(log)
            logger.info('Epoch %d: loss %.4f', epoch, log.losses['total'])
            if writer is not None:
                writer.writerow(_log_row(log, heads))
                log_file.flush()
    finally:
        if writer is not None:
            log_file.close()

    return history


def load_run_dataset(config: RunConfig) -> list[ClipRecord]:
    """Clips of a run: the configured manifest, or freshly synthesized ones."""

    data = config.data
    if data.manifest is not None:
        if not data.manifest.is_file():
            raise ConfigError(f'manifest {data.manifest} does not exist')
        return load_dataset(data.manifest)

    if data.marginals is not None:
        marginals = load_marginals(data.marginals)
    else:
        marginals = Marginals.table_i(include_misc=data.include_misc)
    return synth_generate(config.seed, data.n_clips, config.model.profile, marginals)


def prepare_splits(config: RunConfig,
                   dataset: Sequence[ClipRecord]) -> tuple[list[ClipRecord], list[ClipRecord]]:
    """Filter miscellaneous clips, split, then balance the training part."""

    clips = filter_misc(dataset)
    print(f'Filtered {len(dataset)} clips to {len(clips)} without miscellaneous context.')
    train, test = split(clips, config.data.test_fraction, config.seed)
    if config.data.oversample:
        train = oversample(train, config.data.oversample_threshold, config.seed)
    print(f'Training on {len(train)} clips, testing on {len(test)}.')
    return train, test


def write_report(report: MetricsReport, directory: Path):
    """Store the test report of a run as CSV (one row) and JSON."""

    table, _ = report_render([report])
    (directory / REPORT_CSV).write_text(table)
    (directory / REPORT_JSON).write_text(report.model_dump_json(indent=2))


def run_training(config: RunConfig) -> RunArtifacts:
    """Train the configured model and persist everything in `config.out`.

    The run directory receives the configuration snapshot, the per-epoch
    metrics log, the final test report (CSV and JSON) and the checkpoint.
    It must be new or empty.
    """

    directory = Path(config.out)
    if directory.exists() and any(directory.iterdir()):
        raise ConfigError(f'run directory {directory} is not empty')
    directory.mkdir(parents=True, exist_ok=True)
    save_config(config, directory / CONFIG_FILE)

    train, test = prepare_splits(config, load_run_dataset(config))
    init_seed, order_seed = np.random.SeedSequence(config.seed).spawn(2)
    model = build_model(config.model, np.random.default_rng(init_seed))
    history = train_model(model, train, config.optimizer,
                          seed=int(order_seed.generate_state(1)[0]),
                          validation=test, metrics_log=directory / METRICS_FILE)

    report = evaluate_model(model, test or train, config.optimizer.batch_size)
    write_report(report, directory)
    save_checkpoint(model, directory / CHECKPOINT_FILE)
    logger.info('Run written to %s', directory)
    return RunArtifacts(directory, history, report)


def evaluate_run(directory: Path, manifest: Path | None = None) -> MetricsReport:
    """Score the checkpoint of a run directory.

    Without `manifest` the run's own test split is rebuilt from its
    configuration snapshot; otherwise every non-miscellaneous clip of the
    manifest is scored.
    """

    directory = Path(directory)
    checkpoint = directory / CHECKPOINT_FILE
    if not checkpoint.is_file():
        raise ConfigError(f'no checkpoint in {directory}')
    config = parse_config(directory / CONFIG_FILE, RunConfig)
    model = load_checkpoint(checkpoint)

    if manifest is not None:
        records = filter_misc(load_dataset(manifest))
    else:
        _, records = split(filter_misc(load_run_dataset(config)),
                           config.data.test_fraction, config.seed)
    if not records:
        raise ConfigError(f'no clips to evaluate for {directory}')
    return evaluate_model(model, records, config.optimizer.batch_size)
