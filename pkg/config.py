# 文件: config.py
import hashlib
import json
from enum import Enum
from typing import Literal

from dotenv import load_dotenv
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator
from pydantic_settings import BaseSettings

from errors import ConfigError

load_dotenv()


class Settings(BaseSettings):
    """全局运行设置 (环境变量 / .env 可覆盖)"""
    OUTPUT_DIR: str = 'runs'
    LOG_DIR: str = 'logs'
    LOG_FILENAME: str = 'event_discovery.log'
    LOG_LEVEL: str = 'INFO'
    N_JOBS: int = 1                      # 会话级 / 重启级 / 折级并行度
    TORCH_NUM_THREADS: int = 1           # 固定线程数以保证逐位可复现
    GLOBAL_SEED: int = 42
    ENCODE_BATCH_SIZE: int = 1024        # 推理时每批编码的窗口数

    model_config = ConfigDict(env_file=".env", env_file_encoding='utf-8', case_sensitive=True, extra='ignore')


class EncoderVariant(str, Enum):
    AE = "AE"
    DRIVE2VEC = "Drive2Vec"
    VAME = "VAME"
    VAME_STAR = "VAMEstar"
    TLOSS = "TLoss"
    TNC = "TNC"
    RAW = "raw"          # 基线: 直接使用展平的原始窗口，无需训练

    @property
    def trainable(self) -> bool:
        return self is not EncoderVariant.RAW

    @property
    def variational(self) -> bool:
        return self in (EncoderVariant.VAME, EncoderVariant.VAME_STAR)


class _Section(BaseModel):
    model_config = ConfigDict(extra='forbid', validate_assignment=True)


class DataConfig(_Section):
    """数据来源: CSV 路径列表，或合成基准名称 (如 'drivelike-5')"""
    train_paths: list[str] = Field(default_factory=list)
    test_paths: list[str] = Field(default_factory=list)
    synth_benchmark: str | None = None
    sample_rate_hz: float | None = None      # None 时从 't' 列推断
    channels: list[str] | None = None        # 通道子集，None 表示全部

    @model_validator(mode='after')
    def _check_source(self):
        if not self.synth_benchmark and not self.train_paths:
            raise ValueError("必须提供 train_paths 或 synth_benchmark 之一")
        return self


class PreprocessConfig(_Section):
    target_hz: float | None = 10.0
    normalization_scope: Literal['collection', 'session'] = 'collection'

    @field_validator('target_hz')
    @classmethod
    def _positive_hz(cls, v):
        if v is not None and v <= 0:
            raise ValueError("target_hz 必须为正数")
        return v


class TrainingConfig(_Section):
    epochs: int = Field(200, ge=0)
    tloss_steps: int = Field(800, ge=0)
    learning_rate: float = Field(1e-4, gt=0)
    train_step: int = Field(3, ge=1)
    inference_step: int = Field(1, ge=1)
    batch_size: int = Field(64, ge=1)
    reference_multiplier: int = Field(3, ge=1)        # T-Loss 参考窗口 = multiplier × w
    tloss_negatives: int = Field(10, ge=1)            # 每个锚点的负样本数 K
    tnc_alpha: float = Field(0.01, gt=0, lt=1)        # ADF 显著性水平
    tnc_max_radius: int = Field(5, ge=1)              # 邻域半径上限 (以窗口计)
    tnc_w_pu: float = Field(0.05, ge=0, le=1)         # 远端样本的 PU 权重
    tnc_anchor_stride: int | None = None              # 邻域预估的锚点间隔，None 时取 w
    tnc_adf_maxlag: int = Field(1, ge=0)
    kl_anneal_fraction: float = Field(0.25, ge=0, le=1)
    vame_kmeans_weight: float = Field(0.0, ge=0)      # VAME 谱 k-means 正则，默认关闭
    vame_kmeans_k: int = Field(13, ge=1)
    hidden_channels: int = Field(64, ge=1)
    log_every: int = Field(20, ge=1)
    seed: int = 42


class EncoderConfig(_Section):
    variant: EncoderVariant = EncoderVariant.VAME_STAR
    w: int = Field(10, ge=2)
    e: int = Field(10, ge=1)
    training: TrainingConfig = Field(default_factory=TrainingConfig)


class KMeansParams(_Section):
    restarts: int = Field(15, ge=1)
    max_iter: int = Field(300, ge=1)


class TiccParams(_Section):
    window: int = Field(10, ge=1)
    lam: float = Field(5e-3, ge=0)
    beta: float = Field(400.0, ge=0)
    threshold: float = Field(2e-5, gt=0)
    max_iter: int = Field(3, ge=1)
    rho: float = Field(1.0, gt=0)
    admm_max_iter: int = Field(1000, ge=1)


class ClusteringConfig(_Section):
    algorithm: Literal['kmeans', 'ticc', 'random'] = 'kmeans'
    k: int = Field(13, ge=2)
    kmeans: KMeansParams = Field(default_factory=KMeansParams)
    ticc: TiccParams = Field(default_factory=TiccParams)


class SegmentationConfig(_Section):
    min_seconds: float = Field(3.0, ge=0)
    write_summaries: bool = True


class EvaluationConfig(_Section):
    enabled: bool = True
    probe: bool = True
    probe_folds: int = Field(10, ge=2)
    probe_c: float = Field(1.0, gt=0)
    export_embeddings: bool = True
    export_trajectories: bool = True


class PipelineConfig(_Section):
    data: DataConfig = Field(default_factory=lambda: DataConfig(synth_benchmark='drivelike-5'))
    preprocess: PreprocessConfig = Field(default_factory=PreprocessConfig)
    encoder: EncoderConfig = Field(default_factory=EncoderConfig)
    clustering: ClusteringConfig = Field(default_factory=ClusteringConfig)
    segmentation: SegmentationConfig = Field(default_factory=SegmentationConfig)
    evaluation: EvaluationConfig = Field(default_factory=EvaluationConfig)
    output_dir: str = 'runs/latest'
    seed: int = 42
    n_jobs: int = Field(1, ge=1)

    @classmethod
    def from_json_file(cls, path: str) -> 'PipelineConfig':
        try:
            with open(path, 'r', encoding='utf-8') as f:
                return cls.model_validate_json(f.read())
        except FileNotFoundError as e:
            raise ConfigError(f"配置文件不存在: {path}") from e
        except ValidationError as e:
            raise ConfigError(f"配置文件 {path} 校验失败: {e}") from e

    def with_overrides(self, w: int | None = None, e: int | None = None, model: str | None = None,
                       k: int | None = None, algo: str | None = None, seed: int | None = None,
                       out: str | None = None) -> 'PipelineConfig':
        """命令行参数覆盖配置键，返回经过完整校验的新配置。"""
        data = self.model_dump(mode='json')
        if w is not None: data['encoder']['w'] = w
        if e is not None: data['encoder']['e'] = e
        if model is not None: data['encoder']['variant'] = model
        if k is not None: data['clustering']['k'] = k
        if algo is not None: data['clustering']['algorithm'] = algo
        if seed is not None:
            data['seed'] = seed
            data['encoder']['training']['seed'] = seed
        if out is not None: data['output_dir'] = out
        try:
            return PipelineConfig.model_validate(data)
        except ValidationError as err:
            raise ConfigError(f"命令行覆盖后的配置非法: {err}") from err

    def canonical_json(self) -> str:
        return json.dumps(self.model_dump(mode='json'), sort_keys=True, separators=(',', ':'))

    def config_hash(self) -> str:
        return hashlib.sha256(self.canonical_json().encode('utf-8')).hexdigest()

    def experiment_dict(self) -> dict:
        """决定数值结果的配置部分 (不含输出目录和并行度)，写入报告以便重放比对。"""
        return self.model_dump(mode='json', exclude={'output_dir', 'n_jobs'})

    def experiment_hash(self) -> str:
        text = json.dumps(self.experiment_dict(), sort_keys=True, separators=(',', ':'))
        return hashlib.sha256(text.encode('utf-8')).hexdigest()


settings = Settings()
