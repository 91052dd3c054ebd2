# 文件: pipeline.py
"""
两阶段事件发现流水线:
  读取 → 预处理 → 训练编码器 (训练步长) → 逐会话编码 (步长 1) → 在合并后的表示集合上聚类
  → 逐会话分段 → 评估 (有标签时) → 导出 + 清单 (配置哈希、种子、版本)

每个阶段的异常都包装为 StageError，保留阶段名和原因；清单在失败时标记 partial。
"""

import itertools
import logging
import os
import time
from contextlib import contextmanager
from dataclasses import dataclass, field

import numpy as np
import pandas as pd
import torch

from clustering import (ClusterAssignmentSequence, KMeansModel, export_cluster_model, kmeans_assign,
                        kmeans_fit, random_assign, write_assignments_csv)
from config import EncoderVariant, PipelineConfig, settings
from encoder_trainer import TrainResult, train_encoder
from encoders import EncoderModel, encode_series, raw_representation
from errors import ConfigError, DataError, PipelineError, StageError
from evaluation import (EvaluationReport, evaluate_assignments, export_embeddings, linear_probe, write_report,
                        write_trajectory_csv)
from helpers import file_sha256, library_versions, read_json, run_parallel, write_json
from segmentation import SegmentSet, segment, write_cluster_reports, write_segments_jsonl
from synthgen import generate_benchmark
from ticc_solver import TiccModel, ticc_fit
from timeseries import (CsvSchema, MultivariateTimeSeries, NormalizationStats, TimeSeriesRepresentation,
                        fit_normalization, ingest_csv, resample, znormalize)

logger = logging.getLogger("Pipeline")

MANIFEST_FORMAT = 'event-discovery-manifest/1'


@dataclass
class PreparedData:
    train: list
    test: list
    raw_train: list            # 归一化之前 (已选通道、已重采样)，用于事件汇总
    raw_test: list
    stats: NormalizationStats | None = None

    @property
    def evaluation_sessions(self) -> list:
        return self.test or self.train

    @property
    def raw_by_session(self) -> dict:
        return {s.session_id: s for s in self.raw_train + self.raw_test}


@dataclass
class PipelineResult:
    output_dir: str
    report: EvaluationReport | None
    manifest_path: str
    artifacts: list = field(default_factory=list)


# --- 各阶段 (同时供命令行子命令复用) ---

def load_sessions(config: PipelineConfig) -> tuple[list, list]:
    data = config.data
    if data.synth_benchmark:
        return generate_benchmark(data.synth_benchmark, config.n_jobs)
    schema = CsvSchema(channels=data.channels, sample_rate_hz=data.sample_rate_hz)
    train = [ingest_csv(p, schema) for p in data.train_paths]
    test = [ingest_csv(p, schema) for p in data.test_paths]
    ids = [s.session_id for s in train + test]
    if len(set(ids)) != len(ids):
        raise DataError(f"会话 id 重复 (由文件名得到): {ids}")
    return train, test


def _prepare_one(series: MultivariateTimeSeries, config: PipelineConfig) -> MultivariateTimeSeries:
    if config.data.channels and tuple(config.data.channels) != series.channels:
        series = series.select_channels(config.data.channels)
    target = config.preprocess.target_hz
    if target is not None and abs(series.sample_rate_hz - target) > 1e-9:
        series = resample(series, target)
    return series


def preprocess_sessions(train: list, test: list, config: PipelineConfig) -> PreparedData:
    """通道选择、降采样、Z 归一化。collection 作用域下测试集沿用训练集统计量。"""
    raw_train = [_prepare_one(s, config) for s in train]
    raw_test = [_prepare_one(s, config) for s in test]
    channels = {s.channels for s in raw_train + raw_test}
    if len(channels) != 1:
        raise DataError(f"各会话的通道不一致: {sorted(channels)}")
    rates = {s.sample_rate_hz for s in raw_train + raw_test}
    if len(rates) != 1:
        raise DataError(f"各会话的采样率不一致: {sorted(rates)}，请设置 preprocess.target_hz")
    if config.preprocess.normalization_scope == 'collection':
        stats = fit_normalization(raw_train)
        norm_train = [znormalize(s, stats)[0] for s in raw_train]
        norm_test = [znormalize(s, stats)[0] for s in raw_test]
    else:
        stats = None
        norm_train = [znormalize(s)[0] for s in raw_train]
        norm_test = [znormalize(s)[0] for s in raw_test]
    return PreparedData(norm_train, norm_test, raw_train, raw_test, stats)


def train_stage(prepared: PreparedData, config: PipelineConfig) -> tuple[EncoderModel | None, TrainResult | None]:
    enc = config.encoder
    if not enc.variant.trainable:
        return None, None
    d = prepared.train[0].d
    model = EncoderModel(enc.variant, d, enc.w, enc.e, enc.training)
    result = train_encoder(model, prepared.train, freeze=True, n_jobs=config.n_jobs)
    return model, result


def encode_sessions(model: EncoderModel | None, sessions: list, w: int, n_jobs: int = 1) -> list:
    if model is None:
        return run_parallel(lambda s: raw_representation(s, w), sessions, n_jobs)
    return run_parallel(lambda s: encode_series(model, s), sessions, n_jobs)


def cluster_stage(train_reps: list, other_reps: list, config: PipelineConfig):
    """聚类模型在所有会话 (训练 + 其余) 表示的合并集合上拟合一次，再用同一模型分配每个会话。"""
    c = config.clustering
    everything = train_reps + other_reps
    if c.algorithm == 'kmeans':
        model = kmeans_fit(everything, c.k, c.kmeans.restarts, config.seed, c.kmeans.max_iter, config.n_jobs)
        labels = [kmeans_assign(model, r) for r in everything]
    elif c.algorithm == 'ticc':
        model, labels = ticc_fit(everything, c.ticc, c.k, config.seed, config.n_jobs)
    elif c.algorithm == 'random':
        model = None
        labels = random_assign([r.m for r in everything], c.k, config.seed)
    else:
        raise ConfigError(f"未知聚类算法: {c.algorithm}")
    sequences = [ClusterAssignmentSequence(r.session_id, l, offset=r.offset) for r, l in zip(everything, labels)]
    return model, sequences


def segment_stage(sequences: list, raw_by_session: dict, config: PipelineConfig, out_dir: str) -> tuple[SegmentSet, list]:
    written = []
    sets = []
    for seq in sequences:
        rate = raw_by_session[seq.session_id].sample_rate_hz
        seg_set = segment(seq, rate)
        sets.append(seg_set)
        written.append(write_segments_jsonl(seg_set, os.path.join(out_dir, 'segments', f"{seq.session_id}.jsonl")))
    merged = SegmentSet.merge(sets)
    if config.segmentation.write_summaries:
        written += write_cluster_reports(merged, raw_by_session, os.path.join(out_dir, 'summaries'),
                                         config.segmentation.min_seconds)
    return merged, written


def evaluate_stage(sequences: list, reps: list, sessions: list, config: PipelineConfig,
                   out_dir: str) -> tuple[EvaluationReport | None, list]:
    """在评估会话上合并打分；没有任何标签时跳过。"""
    ev = config.evaluation
    by_id = {s.session_id: s for s in sessions}
    rep_by_id = {r.session_id: r for r in reps}
    chosen = [q for q in sequences if q.session_id in by_id and by_id[q.session_id].labels is not None]
    if not chosen:
        logger.warning("评估会话没有标签，跳过评估")
        return None, []
    written = []
    truth, pred, embeddings = [], [], []
    for seq in chosen:
        series = by_id[seq.session_id]
        aligned = series.labels[seq.offset - 1:seq.offset - 1 + len(seq)]
        if len(aligned) != len(seq):
            raise DataError(f"[{seq.session_id}] 对齐后的标签长度 {len(aligned)} 与聚类序列长度 {len(seq)} 不一致")
        truth.append(aligned)
        pred.append(seq.clusters)
        rep = rep_by_id[seq.session_id]
        embeddings.append(rep.values)
        if ev.export_embeddings:
            written.append(export_embeddings(rep, os.path.join(out_dir, 'embeddings.csv'), aligned, seq.clusters,
                                             append=len(written) > 0))
        if ev.export_trajectories:
            path = write_trajectory_csv(series, seq.clusters, seq.offset,
                                        os.path.join(out_dir, 'trajectories', f"{seq.session_id}.csv"))
            if path:
                written.append(path)
    truth, pred = np.concatenate(truth), np.concatenate(pred)
    probe = None
    if ev.probe:
        try:
            probe = linear_probe(np.vstack(embeddings), truth, ev.probe_folds, config.seed, ev.probe_c, config.n_jobs)
        except DataError as e:
            logger.warning(f"线性探针跳过: {e}")
    report = evaluate_assignments(pred, truth, config.clustering.k, probe,
                                  {'experiment': config.experiment_dict(), 'experiment_hash': config.experiment_hash()})
    written += write_report(report, out_dir)
    return report, sorted(set(written))


# --- 编排 ---

class PipelineRunner:
    def __init__(self, config: PipelineConfig):
        self.config = config
        self.out = config.output_dir
        self.logger = logging.getLogger(f"{self.__class__.__name__}[{config.encoder.variant.value}]")
        self.stages = []
        self.artifacts = []

    @contextmanager
    def stage(self, name: str):
        started = time.perf_counter()
        self.logger.info(f"阶段 [{name}] 开始")
        record = {'name': name, 'status': 'running'}
        self.stages.append(record)
        try:
            yield
        except StageError:
            record['status'] = 'failed'
            raise
        except Exception as e:
            record['status'] = 'failed'
            record['error'] = f"{type(e).__name__}: {e}"
            self.logger.error(f"阶段 [{name}] 失败: {e}", exc_info=not isinstance(e, PipelineError))
            raise StageError(name, e) from e
        finally:
            record['seconds'] = round(time.perf_counter() - started, 3)
        record['status'] = 'ok'
        self.logger.info(f"阶段 [{name}] 完成, 用时 {record['seconds']:.2f}s")

    def _keep(self, *paths):
        self.artifacts.extend(p for p in paths if p)

    def run(self) -> PipelineResult:
        cfg = self.config
        torch.set_num_threads(settings.TORCH_NUM_THREADS)
        os.makedirs(self.out, exist_ok=True)
        report = None
        failed = True
        try:
            with self.stage('ingest'):
                train, test = load_sessions(cfg)
                if not train:
                    raise DataError("没有训练会话")
            with self.stage('preprocess'):
                prepared = preprocess_sessions(train, test, cfg)
                if prepared.stats is not None:
                    self._keep(write_json(os.path.join(self.out, 'normalization.json'), prepared.stats.to_dict()))
            with self.stage('train'):
                model, result = train_stage(prepared, cfg)
                if model is not None:
                    model_path = model.save(os.path.join(self.out, 'encoder.pt'))
                    self._keep(model_path, model_path + '.json')
                    loss_path = os.path.join(self.out, 'loss_history.csv')
                    pd.DataFrame({'index': np.arange(1, len(result.loss_history) + 1),
                                  'loss': result.loss_history}).to_csv(loss_path, index=False)
                    self._keep(loss_path)
            with self.stage('encode'):
                train_reps = encode_sessions(model, prepared.train, cfg.encoder.w, cfg.n_jobs)
                test_reps = encode_sessions(model, prepared.test, cfg.encoder.w, cfg.n_jobs)
            with self.stage('cluster'):
                cluster_model, sequences = cluster_stage(train_reps, test_reps, cfg)
                if cluster_model is not None:
                    self._keep(export_cluster_model(cluster_model, os.path.join(self.out, 'cluster_model.json')))
                self._keep(write_assignments_csv(sequences, os.path.join(self.out, 'assignments.csv')))
            with self.stage('segment'):
                _, written = segment_stage(sequences, prepared.raw_by_session, cfg, self.out)
                self._keep(*written)
            if cfg.evaluation.enabled:
                with self.stage('evaluate'):
                    eval_ids = {s.session_id for s in prepared.evaluation_sessions}
                    report, written = evaluate_stage([q for q in sequences if q.session_id in eval_ids],
                                                     train_reps + test_reps, prepared.evaluation_sessions,
                                                     cfg, self.out)
                    self._keep(*written)
            failed = False
        finally:
            manifest_path = self.write_manifest(partial=failed, report=report)
        return PipelineResult(self.out, report, manifest_path, sorted(set(self.artifacts)))

    def write_manifest(self, partial: bool, report: EvaluationReport | None) -> str:
        artifacts = {}
        for path in sorted(set(self.artifacts)):
            if os.path.exists(path):
                artifacts[os.path.relpath(path, self.out)] = file_sha256(path)
        manifest = {
            'format': MANIFEST_FORMAT,
            'config': self.config.model_dump(mode='json'),
            'config_hash': self.config.config_hash(),
            'seed': self.config.seed,
            'versions': library_versions(),
            'settings': {'TORCH_NUM_THREADS': settings.TORCH_NUM_THREADS, 'ENCODE_BATCH_SIZE': settings.ENCODE_BATCH_SIZE},
            'stages': self.stages,
            'artifacts': artifacts,
            'partial': partial,
            'macro_f1': report.macro_f1 if report else None,
        }
        path = write_json(os.path.join(self.out, 'manifest.json'), manifest)
        if partial:
            self.logger.warning(f"流水线未完成，已写出部分清单: {path}")
        return path


def run_pipeline(config: PipelineConfig) -> PipelineResult:
    return PipelineRunner(config).run()


def config_from_manifest(path: str, output_dir: str | None = None) -> PipelineConfig:
    if not os.path.exists(path):
        raise DataError(f"清单不存在: {path}")
    manifest = read_json(path)
    if manifest.get('format') != MANIFEST_FORMAT:
        raise DataError(f"{path} 不是流水线清单")
    config = PipelineConfig.model_validate(manifest['config'])
    return config.with_overrides(out=output_dir) if output_dir else config


def replay_manifest(path: str, output_dir: str | None = None) -> PipelineResult:
    """用清单中记录的配置与种子重跑流水线。"""
    return run_pipeline(config_from_manifest(path, output_dir))


# --- 参数扫描 ---

SWEEP_COLUMNS = ['variant', 'algorithm', 'w', 'e', 'macro_f1', 'probe_accuracy', 'status', 'error', 'output_dir']


def _sweep_plan(config: PipelineConfig, ws, es, variants, algorithms, include_baselines: bool) -> list[dict]:
    plan = []
    for variant, algorithm, w, e in itertools.product(variants, algorithms, ws, es):
        variant = EncoderVariant(variant)
        if variant is EncoderVariant.RAW:
            continue
        plan.append({'variant': variant.value, 'algorithm': algorithm, 'w': w, 'e': e})
    raw_requested = any(EncoderVariant(v) is EncoderVariant.RAW for v in variants)
    if include_baselines or raw_requested:
        for w in ws:
            plan.append({'variant': EncoderVariant.RAW.value, 'algorithm': 'kmeans', 'w': w, 'e': None})
    if include_baselines:
        plan.append({'variant': 'random', 'algorithm': 'random', 'w': ws[0], 'e': None})
    return plan


def _run_one(config: PipelineConfig, item: dict, out_root: str) -> dict:
    name = f"{item['variant']}_{item['algorithm']}_w{item['w']}" + (f"_e{item['e']}" if item['e'] else '')
    out = os.path.join(out_root, name)
    variant = EncoderVariant.RAW.value if item['variant'] == 'random' else item['variant']
    row = dict(item, macro_f1=np.nan, probe_accuracy=np.nan, status='ok', error='', output_dir=out)
    try:
        run_cfg = config.with_overrides(w=item['w'], e=item['e'], model=variant, algo=item['algorithm'], out=out)
        result = run_pipeline(run_cfg)
        if result.report is not None:
            row['macro_f1'] = result.report.macro_f1
            if result.report.probe is not None:
                row['probe_accuracy'] = result.report.probe.accuracy
    except PipelineError as e:
        logger.error(f"扫描运行 {name} 失败: {e}")
        row['status'] = 'failed'
        row['error'] = str(e)
    return row


def best_per_model(table: pd.DataFrame) -> pd.DataFrame:
    """每个 (变体, 聚类算法) 组合的最优 F1 及其 w、e。"""
    scored = table.dropna(subset=['macro_f1'])
    if scored.empty:
        return pd.DataFrame(columns=['variant', 'algorithm', 'w', 'e', 'macro_f1'])
    best = scored.loc[scored.groupby(['variant', 'algorithm'], sort=False)['macro_f1'].idxmax()]
    return best[['variant', 'algorithm', 'w', 'e', 'macro_f1']] \
        .sort_values('macro_f1', ascending=False, kind='mergesort').reset_index(drop=True)


def sweep(config: PipelineConfig, ws=None, es=None, variants=None, algorithms=None,
          include_baselines: bool = True, n_jobs: int = 1) -> pd.DataFrame:
    """对 w × e × 变体 × 聚类算法做笛卡尔扫描；单次失败只记录，不中断扫描。结果按宏 F1 降序。"""
    ws = list(ws or [config.encoder.w])
    es = list(es or [config.encoder.e])
    variants = list(variants or [config.encoder.variant.value])
    algorithms = list(algorithms or [config.clustering.algorithm])
    if not ws or not es or not variants or not algorithms:
        raise ConfigError("扫描网格为空")
    out_root = config.output_dir
    plan = _sweep_plan(config, ws, es, variants, algorithms, include_baselines)
    logger.info(f"参数扫描: 共 {len(plan)} 次运行, 输出到 {out_root}")
    rows = run_parallel(lambda item: _run_one(config, item, out_root), plan, n_jobs)
    table = pd.DataFrame(rows, columns=SWEEP_COLUMNS)
    table = table.sort_values('macro_f1', ascending=False, na_position='last', kind='mergesort').reset_index(drop=True)
    os.makedirs(out_root, exist_ok=True)
    table.to_csv(os.path.join(out_root, 'sweep_results.csv'), index=False)
    best_per_model(table).to_csv(os.path.join(out_root, 'best_per_model.csv'), index=False)
    failed = int((table['status'] == 'failed').sum())
    if failed:
        logger.warning(f"{failed} 次扫描运行失败，详见 sweep_results.csv")
    return table
