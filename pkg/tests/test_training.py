import csv

import numpy as np
import pytest

from tt_fusion_workflow.config import (DataSettings, FusionKind, ModelSpec, OptimizerSettings,
                                       RunConfig, parse_config)
from pydantic import ValidationError

from tt_fusion_workflow.data import Marginals, synth_generate, write_dataset
from tt_fusion_workflow.layers import BatchNorm, Dropout
from tt_fusion_workflow.exceptions import ConfigError, InvalidArgumentError, NumericError
from tt_fusion_workflow.models import build_model, load_checkpoint, make_batch
from tt_fusion_workflow.training import (CHECKPOINT_FILE, CONFIG_FILE, METRICS_FILE, REPORT_CSV,
                                         REPORT_JSON, evaluate_model, evaluate_run, head_weights,
                                         prepare_splits, recalibrate_batch_norm, run_training,
                                         train_model)


@pytest.fixture
def run_config(tmp_path, tiny_profile):
    def make(name='run', task='joint', fusion='tt', **data):
        return RunConfig(model=ModelSpec(fusion=fusion, task=task, profile=tiny_profile),
                         optimizer=OptimizerSettings(epochs=2, batch_size=4, lr=0.003),
                         data=DataSettings(n_clips=12, **data),
                         seed=3,
                         out=tmp_path / name)
    return make


def read_log(path):
    with open(path, newline='') as f:
        return list(csv.reader(f))


class TestHeadWeights:

    def test_empty_classes_count_as_one(self, tiny_profile):
        records = synth_generate(0, 10, tiny_profile)
        weights = head_weights(records, 'context')
        assert weights.shape == (8,)
        assert weights.sum() == pytest.approx(1.0)
        assert np.all(weights > 0)


class TestTrainModel:

    def test_needs_two_clips(self, tiny_spec, tiny_profile):
        model = build_model(tiny_spec(), np.random.default_rng(0))
        with pytest.raises(InvalidArgumentError):
            train_model(model, synth_generate(0, 1, tiny_profile), OptimizerSettings(epochs=1), 0)

    def test_history_and_log(self, tmp_path, tiny_spec, tiny_profile):
        model = build_model(tiny_spec(), np.random.default_rng(0))
        records = synth_generate(0, 6, tiny_profile)
        history = train_model(model, records, OptimizerSettings(epochs=3, batch_size=4), 0,
                              metrics_log=tmp_path / 'log.csv')
        assert [log.epoch for log in history] == [1, 2, 3]
        assert all(np.isfinite(log.losses['total']) for log in history)

        rows = read_log(tmp_path / 'log.csv')
        assert rows[0][:5] == ['epoch', 'loss_total', 'loss_valence', 'loss_arousal',
                               'loss_context']
        assert 'f1_context_returning_to_lane' in rows[0]
        assert len(rows[0]) == 5 + 3 + 2 + 8
        assert [row[0] for row in rows[1:]] == ['1', '2', '3']

    def test_game_task_columns(self, tmp_path, tiny_spec, tiny_profile):
        model = build_model(tiny_spec('late', 'game'), np.random.default_rng(0))
        train_model(model, synth_generate(0, 4, tiny_profile),
                    OptimizerSettings(epochs=1, batch_size=4), 0, metrics_log=tmp_path / 'log.csv')
        header = read_log(tmp_path / 'log.csv')[0]
        assert header[:3] == ['epoch', 'loss_total', 'loss_context']
        assert not any('valence' in column or 'arousal' in column for column in header)

    def test_loss_decreases(self, tiny_spec, tiny_profile):
        model = build_model(tiny_spec('early'), np.random.default_rng(1))
        records = synth_generate(1, 8, tiny_profile)
        history = train_model(model, records, OptimizerSettings(lr=0.01, epochs=15, batch_size=8), 0)
        assert history[-1].losses['total'] < history[0].losses['total']

    @pytest.mark.parametrize('n, batch_size', [(5, 2), (9, 8), (7, 3)])
    def test_odd_sized_training_sets(self, tiny_spec, tiny_profile, n, batch_size):
        model = build_model(tiny_spec(), np.random.default_rng(0))
        history = train_model(model, synth_generate(0, n, tiny_profile),
                              OptimizerSettings(epochs=2, batch_size=batch_size), 0)
        assert len(history) == 2

    def test_batch_size_of_one_is_rejected(self):
        with pytest.raises(ValidationError):
            OptimizerSettings(batch_size=1)

    def test_non_finite_loss(self, tiny_spec, tiny_profile):
        model = build_model(tiny_spec(), np.random.default_rng(0))
        model.children['heads'].children['arousal'].children['2'].params['bias'][0] = np.nan
        with pytest.raises(NumericError) as info:
            train_model(model, synth_generate(0, 4, tiny_profile), OptimizerSettings(epochs=1), 0)
        assert info.value.name == 'arousal'


class TestRecalibrateBatchNorm:

    @pytest.mark.parametrize('fusion', list(FusionKind))
    def test_inference_matches_train_mode_on_one_batch(self, tiny_spec, tiny_profile, fusion):
        model = build_model(tiny_spec(fusion), np.random.default_rng(0))
        records = synth_generate(2, 6, tiny_profile)
        recalibrate_batch_norm(model, records, batch_size=6)

        batch = make_batch(records, tiny_profile)
        inference = model.forward(batch)
        training = model.forward(batch, train=True)
        for head in model.heads:
            np.testing.assert_allclose(inference[head], training[head], rtol=1e-9, atol=1e-9)

    def test_averages_batches(self, tiny_spec, tiny_profile):
        model = build_model(tiny_spec('late'), np.random.default_rng(0))
        records = synth_generate(2, 8, tiny_profile)
        norm = model.children['fusion'].children['game'].children['norm_out']
        means = []
        for chunk in (records[:4], records[4:]):
            recalibrate_batch_norm(model, chunk, batch_size=4)
            means.append(norm.buffers['running_mean'].copy())
        recalibrate_batch_norm(model, records, batch_size=4)
        np.testing.assert_allclose(norm.buffers['running_mean'], np.mean(means, axis=0))

    def test_restores_dropout(self, tiny_profile):
        profile = tiny_profile.model_copy(update={'dropout': 0.3})
        model = build_model(ModelSpec(fusion='tt', task='joint', profile=profile),
                            np.random.default_rng(0))
        recalibrate_batch_norm(model, synth_generate(0, 4, profile), batch_size=4)
        layers = list(model.sublayers())
        assert all(layer.rate == 0.3 for layer in layers if isinstance(layer, Dropout))
        assert not any(layer.calibrating for layer in layers if isinstance(layer, BatchNorm))


class TestRunDirectory:

    def test_artifacts(self, run_config):
        artifacts = run_training(run_config())
        for name in (CONFIG_FILE, METRICS_FILE, REPORT_CSV, REPORT_JSON, CHECKPOINT_FILE):
            assert (artifacts.directory / name).is_file()
        assert len(artifacts.history) == 2
        assert parse_config(artifacts.config, RunConfig) == run_config()
        assert load_checkpoint(artifacts.checkpoint).spec == run_config().model

    def test_deterministic(self, run_config):
        first = run_training(run_config('a'))
        second = run_training(run_config('b'))
        assert first.metrics_log.read_text() == second.metrics_log.read_text()
        assert first.checkpoint.read_bytes() == second.checkpoint.read_bytes()

    def test_refuses_existing_run(self, run_config):
        run_training(run_config())
        with pytest.raises(ConfigError):
            run_training(run_config())

    def test_evaluate_run_rebuilds_test_split(self, run_config):
        artifacts = run_training(run_config())
        assert evaluate_run(artifacts.directory).f1() == artifacts.report.f1()

    def test_evaluate_on_manifest(self, tmp_path, run_config, tiny_profile):
        artifacts = run_training(run_config())
        records = synth_generate(8, 5, tiny_profile)
        write_dataset(records, tmp_path / 'data')
        report = evaluate_run(artifacts.directory, tmp_path / 'data' / 'manifest.jsonl')
        assert report.n_samples == 5
        expected = evaluate_model(load_checkpoint(artifacts.checkpoint), records)
        assert report.f1() == expected.f1()

    def test_missing_checkpoint(self, tmp_path):
        with pytest.raises(ConfigError):
            evaluate_run(tmp_path)

    def test_missing_manifest(self, tmp_path, run_config):
        with pytest.raises(ConfigError):
            run_training(run_config(manifest=tmp_path / 'nowhere.jsonl'))

    def test_splits_drop_misc(self, run_config, tiny_profile):
        config = run_config(include_misc=True, oversample=False)
        records = synth_generate(0, 40, tiny_profile, Marginals.table_i(include_misc=True))
        train, test = prepare_splits(config, records)
        assert all(r.labels.context.name != 'MISCELLANEOUS' for r in train + test)


@pytest.mark.slow
@pytest.mark.parametrize('fusion', list(FusionKind))
def test_desk_model_overfits_planted_signals(fusion):
    spec = ModelSpec(fusion=fusion, task='joint', profile='desk')
    records = synth_generate(0, 64, spec.profile)
    model = build_model(spec, np.random.default_rng(0))
    train_model(model, records, OptimizerSettings(lr=0.003, epochs=50, batch_size=8), seed=0)

    report = evaluate_model(model, records)
    for m in report.classes:
        if m.support > 0:
            assert m.f1 >= 0.95, (m.output, m.label)
