# 文件: tests/test_pipeline.py
import json
import os

import numpy as np
import pandas as pd
import pytest

from clustering import kmeans_assign, kmeans_fit
from config import (ClusteringConfig, DataConfig, EncoderConfig, EvaluationConfig, KMeansParams, PipelineConfig,
                    SegmentationConfig, TiccParams, TrainingConfig)
from errors import DataError, StageError
from pipeline import (MANIFEST_FORMAT, cluster_stage, config_from_manifest, encode_sessions, load_sessions,
                      preprocess_sessions, replay_manifest, run_pipeline, sweep)
from synthgen import BenchmarkSpec, RegimeSpec, write_benchmark


@pytest.fixture
def tiny_benchmark(tmp_path):
    regimes = [RegimeSpec(label=0, name='cruise', mean=[0.0, 0.0], noise_scale=0.5, duration_range=(4.0, 6.0)),
               RegimeSpec(label=1, name='brake', mean=[4.0, -4.0], noise_scale=0.5, duration_range=(4.0, 6.0))]
    spec = BenchmarkSpec(name='tiny', channels=['speed', 'brake'], regimes=regimes, session_seconds=60.0,
                         train_sessions=2, test_sessions=1, seed=11)
    return spec.save_json(str(tmp_path / 'tiny.json'))


def _config(benchmark_path, out, **encoder):
    training = TrainingConfig(epochs=2, batch_size=32, hidden_channels=4, log_every=1, seed=5)
    return PipelineConfig(
        data=DataConfig(synth_benchmark=benchmark_path),
        encoder=EncoderConfig(**{'variant': 'AE', 'w': 5, 'e': 3, 'training': training, **encoder}),
        clustering=ClusteringConfig(k=2, kmeans=KMeansParams(restarts=2)),
        segmentation=SegmentationConfig(min_seconds=1.0),
        evaluation=EvaluationConfig(probe_folds=3),
        output_dir=str(out),
        seed=5,
    )


class TestStages:
    def test_collection_normalization_uses_training_statistics(self, tiny_benchmark):
        config = _config(tiny_benchmark, 'unused')
        prepared = preprocess_sessions(*load_sessions(config), config)
        pooled = np.hstack([s.data for s in prepared.train])
        np.testing.assert_allclose(pooled.mean(axis=1), 0.0, atol=1e-9)
        assert prepared.stats is not None
        assert [s.session_id for s in prepared.evaluation_sessions] == ['tiny-test-0']

    def test_session_normalization(self, tiny_benchmark):
        config = _config(tiny_benchmark, 'unused')
        config = config.model_copy(update={'preprocess': config.preprocess.model_copy(
            update={'normalization_scope': 'session'})})
        prepared = preprocess_sessions(*load_sessions(config), config)
        assert prepared.stats is None
        for series in prepared.train + prepared.test:
            np.testing.assert_allclose(series.data.mean(axis=1), 0.0, atol=1e-9)

    def test_raw_representation_length(self, tiny_benchmark):
        config = _config(tiny_benchmark, 'unused')
        prepared = preprocess_sessions(*load_sessions(config), config)
        reps = encode_sessions(None, prepared.train, 5)
        assert [r.m for r in reps] == [s.n - 4 for s in prepared.train]
        assert all(r.e == 10 for r in reps)

    def test_kmeans_is_fitted_on_every_session(self, tiny_benchmark):
        config = _config(tiny_benchmark, 'unused')
        prepared = preprocess_sessions(*load_sessions(config), config)
        train_reps = encode_sessions(None, prepared.train, 5)
        test_reps = encode_sessions(None, prepared.test, 5)
        model, sequences = cluster_stage(train_reps, test_reps, config)
        pooled = kmeans_fit(train_reps + test_reps, 2, restarts=2, seed=5)
        train_only = kmeans_fit(train_reps, 2, restarts=2, seed=5)
        np.testing.assert_array_equal(model.centroids, pooled.centroids)
        assert model.inertia == pooled.inertia
        assert not np.array_equal(model.centroids, train_only.centroids)
        np.testing.assert_array_equal(sequences[-1].clusters, kmeans_assign(pooled, test_reps[0]))

    def test_one_cluster_model_for_all_sessions(self, tiny_benchmark):
        config = _config(tiny_benchmark, 'unused')
        config = config.with_overrides(algo='ticc')
        config = config.model_copy(update={'clustering': config.clustering.model_copy(
            update={'ticc': TiccParams(window=2, beta=10.0, max_iter=3)})})
        prepared = preprocess_sessions(*load_sessions(config), config)
        train_reps = encode_sessions(None, prepared.train, 3)
        test_reps = encode_sessions(None, prepared.test, 3)
        model, sequences = cluster_stage(train_reps, test_reps, config)
        assert model.k == 2
        assert [q.session_id for q in sequences] == ['tiny-train-0', 'tiny-train-1', 'tiny-test-0']
        assert all(len(q) == r.m for q, r in zip(sequences, train_reps + test_reps))
        assert sequences[0].offset == 3


class TestRunPipeline:
    def test_end_to_end(self, tiny_benchmark, tmp_path):
        result = run_pipeline(_config(tiny_benchmark, tmp_path / 'run'))
        out = tmp_path / 'run'
        report = json.loads((out / 'report.json').read_text(encoding='utf-8'))
        assert 0.0 <= report['macro_f1'] <= 1.0
        assert report['probe'] is not None
        assert sorted(os.listdir(out / 'segments')) == ['tiny-test-0.jsonl', 'tiny-train-0.jsonl',
                                                         'tiny-train-1.jsonl']
        assert (out / 'cluster_model.json').exists()
        assignments = pd.read_csv(out / 'assignments.csv')
        assert assignments['session_id'].nunique() == 3
        assert assignments.groupby('session_id')['t'].min().eq(5).all()
        manifest = json.loads((out / 'manifest.json').read_text(encoding='utf-8'))
        assert manifest['format'] == MANIFEST_FORMAT
        assert manifest['partial'] is False
        assert [s['status'] for s in manifest['stages']] == ['ok'] * 7
        assert 'report.json' in manifest['artifacts']
        assert result.report.macro_f1 == report['macro_f1']

    def test_rerun_is_byte_identical(self, tiny_benchmark, tmp_path):
        run_pipeline(_config(tiny_benchmark, tmp_path / 'a'))
        run_pipeline(_config(tiny_benchmark, tmp_path / 'b'))
        for name in ('report.json', 'assignments.csv', 'embeddings.csv', 'cluster_model.json'):
            assert (tmp_path / 'a' / name).read_bytes() == (tmp_path / 'b' / name).read_bytes()

    def test_replay_from_manifest(self, tiny_benchmark, tmp_path):
        first = run_pipeline(_config(tiny_benchmark, tmp_path / 'first'))
        replayed = replay_manifest(first.manifest_path, str(tmp_path / 'replay'))
        assert (tmp_path / 'first' / 'report.json').read_bytes() == (tmp_path / 'replay' / 'report.json').read_bytes()
        assert config_from_manifest(first.manifest_path).experiment_hash() == \
            config_from_manifest(replayed.manifest_path).experiment_hash()

    def test_raw_baseline_skips_training(self, tiny_benchmark, tmp_path):
        result = run_pipeline(_config(tiny_benchmark, tmp_path / 'raw', variant='raw'))
        assert result.report is not None
        assert not (tmp_path / 'raw' / 'encoder.pt').exists()

    def test_failed_stage_writes_partial_manifest(self, tmp_path):
        config = PipelineConfig(data=DataConfig(train_paths=[str(tmp_path / 'missing.csv')]),
                                output_dir=str(tmp_path / 'broken'))
        with pytest.raises(StageError) as info:
            run_pipeline(config)
        assert info.value.stage == 'ingest'
        assert isinstance(info.value.cause, DataError)
        assert info.value.exit_code == 2
        manifest = json.loads((tmp_path / 'broken' / 'manifest.json').read_text(encoding='utf-8'))
        assert manifest['partial'] is True
        assert manifest['stages'][0]['status'] == 'failed'

    def test_csv_sessions(self, tiny_benchmark, tmp_path):
        paths = write_benchmark(tiny_benchmark, str(tmp_path / 'csv'))
        config = _config(tiny_benchmark, tmp_path / 'csv-run')
        config = config.model_copy(update={'data': DataConfig(train_paths=paths['train'], test_paths=paths['test'])})
        result = run_pipeline(config)
        assert result.report.n_labeled == 600 - 4


class TestSweep:
    def test_single_point_grid(self, tiny_benchmark, tmp_path):
        table = sweep(_config(tiny_benchmark, tmp_path / 'sweep'), include_baselines=False)
        assert len(table) == 1
        assert (tmp_path / 'sweep' / 'sweep_results.csv').exists()
        assert (tmp_path / 'sweep' / 'best_per_model.csv').exists()

    def test_cartesian_grid_with_baselines(self, tiny_benchmark, tmp_path):
        table = sweep(_config(tiny_benchmark, tmp_path / 'grid'), ws=[5, 10], es=[2, 3], variants=['AE'])
        assert len(table[table['variant'] == 'AE']) == 4
        assert len(table[table['variant'] == 'raw']) == 2
        assert len(table[table['variant'] == 'random']) == 1
        assert (table['status'] == 'ok').all()
        scores = table['macro_f1'].tolist()
        assert scores == sorted(scores, reverse=True)


def _drivelike_config(out, variant='raw', algo='kmeans'):
    training = TrainingConfig(seed=42)
    config = PipelineConfig(
        data=DataConfig(synth_benchmark='drivelike-5'),
        encoder=EncoderConfig(variant=variant, w=10, e=10, training=training),
        clustering=ClusteringConfig(k=5),
        output_dir=str(out),
        seed=42,
    )
    return config.with_overrides(algo=algo)


@pytest.fixture(scope='module')
def drivelike_baselines(tmp_path_factory):
    root = tmp_path_factory.mktemp('drivelike-baselines')
    raw = run_pipeline(_drivelike_config(root / 'raw')).report.macro_f1
    random_f1 = run_pipeline(_drivelike_config(root / 'random', algo='random')).report.macro_f1
    return {'raw': raw, 'random': random_f1}


@pytest.mark.slow
def test_drivelike5_raw_windows_do_not_separate_regimes(drivelike_baselines):
    assert drivelike_baselines['raw'] <= 0.6


@pytest.mark.slow
@pytest.mark.parametrize('variant, floor', [('AE', 0.80), ('Drive2Vec', 0.80), ('VAME', 0.80),
                                            ('VAMEstar', 0.80), ('TLoss', 0.80), ('TNC', 0.70)])
def test_drivelike5_trained_encoders(variant, floor, drivelike_baselines, tmp_path):
    score = run_pipeline(_drivelike_config(tmp_path / variant, variant=variant)).report.macro_f1
    assert score >= floor
    assert score >= drivelike_baselines['raw'] + 0.15
    assert score >= drivelike_baselines['random'] + 0.15
