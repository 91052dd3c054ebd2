# 文件: main.py
"""
命令行入口。子命令: synth, preprocess, train, encode, cluster, segment, evaluate, pipeline, sweep。
退出码: 0 成功, 1 配置错误, 2 数据错误, 3 数值失败。
"""

from dotenv import load_dotenv
load_dotenv()

import argparse
import logging
import os
import sys

import torch

from clustering import export_cluster_model, read_assignments_csv, write_assignments_csv
from config import EncoderVariant, PipelineConfig, settings
from encoders import EncoderModel
from errors import ConfigError, PipelineError
from evaluation import export_embeddings, read_embeddings
from helpers import setup_logging, write_json
from pipeline import (cluster_stage, encode_sessions, evaluate_stage, load_sessions, preprocess_sessions,
                      replay_manifest, run_pipeline, segment_stage, sweep, train_stage)
from synthgen import write_benchmark
from timeseries import export_csv

logger = logging.getLogger("Main")


def _csv_list(text: str | None, cast=str):
    if not text:
        return None
    return [cast(item.strip()) for item in text.split(',') if item.strip()]


def load_config(args) -> PipelineConfig:
    config = PipelineConfig.from_json_file(args.config) if getattr(args, 'config', None) else PipelineConfig()
    return config.with_overrides(w=args.w, e=args.e, model=args.model, k=args.k, algo=args.algo,
                                 seed=args.seed, out=args.out)


# --- 子命令 ---

def cmd_synth(args):
    paths = write_benchmark(args.benchmark, args.out or os.path.join(settings.OUTPUT_DIR, 'synthetic'))
    logger.info(f"合成数据已写出: 训练 {len(paths['train'])} 个, 测试 {len(paths['test'])} 个, 配置 {paths['spec']}")


def cmd_preprocess(args):
    config = load_config(args)
    prepared = preprocess_sessions(*load_sessions(config), config)
    out = os.path.join(config.output_dir, 'preprocessed')
    for series in prepared.train + prepared.test:
        export_csv(series, os.path.join(out, f"{series.session_id}.csv"))
    if prepared.stats is not None:
        write_json(os.path.join(config.output_dir, 'normalization.json'), prepared.stats.to_dict())
    logger.info(f"预处理结果已写出到 {out}")


def cmd_train(args):
    config = load_config(args)
    if not config.encoder.variant.trainable:
        raise ConfigError("raw 基线不需要训练")
    prepared = preprocess_sessions(*load_sessions(config), config)
    model, result = train_stage(prepared, config)
    path = model.save(os.path.join(config.output_dir, 'encoder.pt'))
    logger.info(f"编码器已训练并保存: {path} (最终损失 {result.final_loss})")


def cmd_encode(args):
    config = load_config(args)
    prepared = preprocess_sessions(*load_sessions(config), config)
    model = EncoderModel.load(args.encoder) if args.encoder else None
    if model is None and config.encoder.variant.trainable:
        raise ConfigError("请用 --encoder 指定检查点，或使用 --model raw")
    w = model.w if model else config.encoder.w
    path = os.path.join(config.output_dir, 'representations.csv')
    sessions = prepared.train + prepared.test
    for i, rep in enumerate(encode_sessions(model, sessions, w, config.n_jobs)):
        export_embeddings(rep, path, append=i > 0)
    logger.info(f"表示已写出: {path}")


def cmd_cluster(args):
    config = load_config(args)
    reps = read_embeddings(args.representations)
    model, sequences = cluster_stage(reps, [], config)
    if model is not None:
        export_cluster_model(model, os.path.join(config.output_dir, 'cluster_model.json'))
    path = write_assignments_csv(sequences, os.path.join(config.output_dir, 'assignments.csv'))
    logger.info(f"聚类序列已写出: {path}")


def cmd_segment(args):
    config = load_config(args)
    sequences = read_assignments_csv(args.assignments)
    prepared = preprocess_sessions(*load_sessions(config), config)
    raw = prepared.raw_by_session
    missing = [q.session_id for q in sequences if q.session_id not in raw]
    if missing:
        raise ConfigError(f"配置的数据中没有这些会话: {missing}")
    merged, _ = segment_stage(sequences, raw, config, config.output_dir)
    logger.info(f"分段完成: {len(merged)} 个分段")


def cmd_evaluate(args):
    config = load_config(args)
    sequences = read_assignments_csv(args.assignments)
    prepared = preprocess_sessions(*load_sessions(config), config)
    if args.representations:
        reps = read_embeddings(args.representations)
    else:
        reps = encode_sessions(None, prepared.train + prepared.test, config.encoder.w, config.n_jobs)
        evaluation = config.evaluation.model_copy(update={'probe': False, 'export_embeddings': False})
        config = config.model_copy(update={'evaluation': evaluation})
    report, _ = evaluate_stage(sequences, reps, prepared.evaluation_sessions, config, config.output_dir)
    if report is not None:
        logger.info(f"宏 F1 = {report.macro_f1:.4f}")


def cmd_pipeline(args):
    if args.replay:
        result = replay_manifest(args.replay, args.out)
    else:
        result = run_pipeline(load_config(args))
    if result.report is not None:
        logger.info(f"流水线完成: 宏 F1 = {result.report.macro_f1:.4f}, 清单 {result.manifest_path}")
    else:
        logger.info(f"流水线完成 (无评估), 清单 {result.manifest_path}")


def cmd_sweep(args):
    config = load_config(args)
    table = sweep(config, _csv_list(args.ws, int), _csv_list(args.es, int), _csv_list(args.models),
                  _csv_list(args.algos), include_baselines=not args.no_baselines, n_jobs=args.jobs)
    logger.info(f"参数扫描完成, 共 {len(table)} 行:\n{table.head(20).to_string(index=False)}")


# --- 参数解析 ---

def _add_common(parser: argparse.ArgumentParser):
    parser.add_argument('--config', help='JSON 配置文件')
    parser.add_argument('--w', type=int, help='窗口宽度')
    parser.add_argument('--e', type=int, help='嵌入维度')
    parser.add_argument('--model', choices=[v.value for v in EncoderVariant], help='编码器变体')
    parser.add_argument('--k', type=int, help='聚类数')
    parser.add_argument('--algo', choices=['kmeans', 'ticc', 'random'], help='聚类算法')
    parser.add_argument('--seed', type=int, help='全局随机种子')
    parser.add_argument('--out', help='输出目录')


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog='event-discovery', description='基于自监督表示与聚类的驾驶事件发现')
    parser.add_argument('--log-level', default=None, help='日志级别 (覆盖 LOG_LEVEL)')
    sub = parser.add_subparsers(dest='command', required=True)

    p = sub.add_parser('synth', help='生成合成基准数据')
    p.add_argument('--benchmark', default='drivelike-5')
    p.add_argument('--out')
    p.set_defaults(handler=cmd_synth)

    for name, handler, text in (('preprocess', cmd_preprocess, '重采样与归一化'),
                                ('train', cmd_train, '训练编码器'),
                                ('pipeline', cmd_pipeline, '端到端运行')):
        p = sub.add_parser(name, help=text)
        _add_common(p)
        p.set_defaults(handler=handler)
        if name == 'pipeline':
            p.add_argument('--replay', help='按清单重放')

    p = sub.add_parser('encode', help='用已训练的编码器生成表示')
    _add_common(p)
    p.add_argument('--encoder', help='编码器检查点路径')
    p.set_defaults(handler=cmd_encode)

    p = sub.add_parser('cluster', help='对表示聚类')
    _add_common(p)
    p.add_argument('--representations', required=True)
    p.set_defaults(handler=cmd_cluster)

    p = sub.add_parser('segment', help='聚类序列分段并汇总事件')
    _add_common(p)
    p.add_argument('--assignments', required=True)
    p.set_defaults(handler=cmd_segment)

    p = sub.add_parser('evaluate', help='与真值标签比对打分')
    _add_common(p)
    p.add_argument('--assignments', required=True)
    p.add_argument('--representations')
    p.set_defaults(handler=cmd_evaluate)

    p = sub.add_parser('sweep', help='w × e × 变体参数扫描')
    _add_common(p)
    p.add_argument('--ws', help='逗号分隔, 如 5,10,15,20')
    p.add_argument('--es', help='逗号分隔, 如 3,5,10,15,20')
    p.add_argument('--models', help='逗号分隔的变体名')
    p.add_argument('--algos', help='逗号分隔的聚类算法')
    p.add_argument('--no-baselines', action='store_true')
    p.add_argument('--jobs', type=int, default=1)
    p.set_defaults(handler=cmd_sweep)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    level = getattr(logging, args.log_level.upper(), None) if args.log_level else None
    setup_logging(level)
    torch.set_num_threads(settings.TORCH_NUM_THREADS)
    try:
        args.handler(args)
        return 0
    except PipelineError as e:
        logger.error(f"执行失败 [{type(e).__name__}]: {e}")
        return e.exit_code
    except KeyboardInterrupt:
        logger.warning("接收到中断信号，程序退出。")
        return 130
    except Exception as e:
        logger.error(f"未预期的错误: {e}", exc_info=True)
        return 1


if __name__ == "__main__":
    sys.exit(main())
