"""
tubekit - 视频目标检测后处理工具包

提供多上下文抑制、运动引导传播、轨迹重打分、模型融合与评估等核心功能
"""

from .core_model import (
    TubekitError,
    InvalidBoxError,
    DegenerateBoxError,
    MixedFrameError,
    InvariantViolationError,
    BBox,
    OriginKind,
    Origin,
    Detection,
    ClipDetections,
    GroundTruthRecord,
    canonical_key,
    score_order_key,
    index_ground_truth,
    iou,
    nms,
    clamp_box,
    clamp_to_frame
)
from .config_manager import (
    ConfigManager,
    ConfigValidationError,
    LoggingConfig,
    PipelineConfig,
    parse_overrides,
    read_config,
    write_config
)
from .performance_optimizer import (
    PerformanceTimer,
    PerformanceCache,
    PerformanceMonitor,
    ParallelExecutor,
    performance_monitor,
    memory_usage_mb
)
from .mcs import (
    HighConfidenceSet,
    cutoff_rank,
    select_high_confidence,
    suppress,
    apply_mcs
)
from .mgp import (
    FlowUnavailableError,
    EmptyFlowRegionError,
    FrameStrideError,
    PropagationMode,
    PropagationPlan,
    PropagationStats,
    FlowField,
    FlowProvider,
    FlowCatalog,
    InMemoryFlowProvider,
    ZeroFlowProvider,
    DictFlowCatalog,
    ZeroFlowCatalog,
    mean_flow,
    shift_box,
    propagate,
    propagate_clip,
    interpolate_stride
)
from .tubelet_tracker import (
    TubeletNode,
    Tubelet,
    Tracker,
    FlowSnapTracker,
    select_anchor,
    track,
    build_tubelets
)
from .tubelet_rescoring import (
    InsufficientSamplesError,
    TubeletStats,
    BayesClassifier1D,
    stats,
    fit_classifier,
    uninformative_classifier,
    classify,
    spatial_max_pool,
    label_tubelets,
    collect_training_samples,
    train_classifier,
    rescore,
    tubelets_to_detections
)
from .combination_eval import (
    SourceMismatchError,
    EvalReport,
    ClassCounts,
    APAccumulator,
    CorLocReport,
    ReportComparison,
    GreedyAverageResult,
    minmax_normalize,
    combine,
    average_sources,
    greedy_average,
    average_precision,
    mean_ap,
    compare_reports,
    infer_targets,
    corloc,
    corloc_report
)
from .io_formats import (
    FormatError,
    FlowFormatError,
    atomic_write_text,
    file_sha256,
    read_detections,
    write_detections,
    read_ground_truth,
    write_ground_truth,
    encode_flow,
    decode_flow,
    read_flow,
    write_flow,
    write_flows,
    DirectoryFlowCatalog,
    read_tubelets,
    write_tubelets,
    read_classifier,
    write_classifier,
    read_report,
    write_report,
    read_corloc_targets
)
from .synth_bench import (
    SynthSpec,
    SynthFixture,
    GridSearchResult,
    generate,
    measure_miss_rate,
    grid_search_mcs,
    write_fixture,
    read_synth_spec
)
from .pipeline import (
    Stage,
    PipelineValidationError,
    StageError,
    PipelineRun,
    PipelineResult,
    PipelineRunner,
    AblationResult,
    parse_stages,
    pool_sources,
    run_pipeline,
    run_ablation,
    __version__
)
from .project_initializer import ProjectInitializer

__all__ = [
    # 核心模型
    'TubekitError', 'InvalidBoxError', 'DegenerateBoxError', 'MixedFrameError',
    'InvariantViolationError', 'BBox', 'OriginKind', 'Origin', 'Detection', 'ClipDetections',
    'GroundTruthRecord', 'canonical_key', 'score_order_key', 'index_ground_truth',
    'iou', 'nms', 'clamp_box', 'clamp_to_frame',

    # 配置管理
    'ConfigManager', 'ConfigValidationError', 'LoggingConfig', 'PipelineConfig',
    'parse_overrides', 'read_config', 'write_config',

    # 性能工具
    'PerformanceTimer', 'PerformanceCache', 'PerformanceMonitor', 'ParallelExecutor',
    'performance_monitor', 'memory_usage_mb',

    # 多上下文抑制
    'HighConfidenceSet', 'cutoff_rank', 'select_high_confidence', 'suppress', 'apply_mcs',

    # 运动引导传播
    'FlowUnavailableError', 'EmptyFlowRegionError', 'FrameStrideError',
    'PropagationMode', 'PropagationPlan', 'PropagationStats', 'FlowField',
    'FlowProvider', 'FlowCatalog', 'InMemoryFlowProvider', 'ZeroFlowProvider',
    'DictFlowCatalog', 'ZeroFlowCatalog', 'mean_flow', 'shift_box',
    'propagate', 'propagate_clip', 'interpolate_stride',

    # 轨迹
    'TubeletNode', 'Tubelet', 'Tracker', 'FlowSnapTracker', 'select_anchor', 'track',
    'build_tubelets',

    # 轨迹重打分
    'InsufficientSamplesError', 'TubeletStats', 'BayesClassifier1D', 'stats',
    'fit_classifier', 'uninformative_classifier', 'classify', 'spatial_max_pool',
    'label_tubelets', 'collect_training_samples', 'train_classifier', 'rescore',
    'tubelets_to_detections',

    # 融合与评估
    'SourceMismatchError', 'EvalReport', 'ClassCounts', 'APAccumulator', 'CorLocReport',
    'ReportComparison', 'GreedyAverageResult', 'minmax_normalize', 'combine',
    'average_sources', 'greedy_average', 'average_precision', 'mean_ap',
    'compare_reports', 'infer_targets', 'corloc', 'corloc_report',

    # 文件格式
    'FormatError', 'FlowFormatError', 'atomic_write_text', 'file_sha256',
    'read_detections', 'write_detections', 'read_ground_truth', 'write_ground_truth',
    'encode_flow', 'decode_flow', 'read_flow', 'write_flow', 'write_flows',
    'DirectoryFlowCatalog', 'read_tubelets', 'write_tubelets', 'read_classifier',
    'write_classifier', 'read_report', 'write_report', 'read_corloc_targets',

    # 合成数据
    'SynthSpec', 'SynthFixture', 'GridSearchResult', 'generate', 'measure_miss_rate',
    'grid_search_mcs', 'write_fixture', 'read_synth_spec',

    # 流水线
    'Stage', 'PipelineValidationError', 'StageError', 'PipelineRun', 'PipelineResult',
    'PipelineRunner', 'AblationResult', 'parse_stages', 'pool_sources',
    'run_pipeline', 'run_ablation',

    # 项目初始化
    'ProjectInitializer',
]
