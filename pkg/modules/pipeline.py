"""
流水线驱动模块

按固定顺序组合各阶段：
  检测流：MCS → (跳帧插值) → MGP
  轨迹流：跟踪 → 空间最大池化 → 重打分
  每个结果源内两路结果 min-max 归一化后 NMS 融合，最后跨结果源融合并评估。
"""

import json
import logging
import platform
from contextlib import contextmanager
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Any, Dict, Iterator, List, Optional, Sequence, Tuple, Union

import numpy as np
import scipy

from .core_model import TubekitError, ClipDetections, GroundTruthRecord
from .config_manager import PipelineConfig
from .io_formats import (
    read_detections, read_ground_truth, read_classifier, write_classifier,
    write_detections, write_tubelets, write_report, atomic_write_text, file_sha256, DirectoryFlowCatalog
)
from .mcs import apply_mcs
from .mgp import (
    FlowCatalog, PropagationMode, PropagationPlan, propagate_clip, interpolate_stride
)
from .tubelet_tracker import Tubelet, build_tubelets
from .tubelet_rescoring import (
    BayesClassifier1D, spatial_max_pool, train_classifier, rescore, tubelets_to_detections
)
from .combination_eval import (
    EvalReport, minmax_normalize, combine, mean_ap, compare_reports
)
from .performance_optimizer import (
    PerformanceMonitor, PerformanceTimer, ParallelExecutor, memory_usage_mb, performance_monitor
)

logger = logging.getLogger(__name__)

__version__ = "0.1.0"


class Stage(Enum):
    """流水线阶段，定义顺序即执行顺序"""
    MCS = "mcs"
    MGP = "mgp"
    TRACK = "track"
    RESCORE = "rescore"
    COMBINE = "combine"
    EVAL = "eval"


STAGE_ORDER = list(Stage)


class PipelineValidationError(TubekitError):
    """流水线参数无效"""

    exit_code = 1


class StageError(TubekitError):
    """阶段执行失败，记录阶段名与输入上下文"""

    def __init__(self, stage: str, context: str, original_error: Exception):
        self.stage = stage
        self.context = context
        detail = original_error.message if isinstance(original_error, TubekitError) else repr(original_error)
        super().__init__(f"阶段 {stage} 失败 ({context}): {detail}",
                         error_code="stage_failed", original_error=original_error)
        if isinstance(original_error, TubekitError):
            self.exit_code = original_error.exit_code
        else:
            self.exit_code = 3


def parse_stages(text: Union[str, Sequence[str]]) -> List[Stage]:
    """
    解析阶段列表（逗号分隔或序列），返回规范顺序

    Raises:
        PipelineValidationError: 未知或重复的阶段
    """
    names = [s.strip() for s in text.split(",")] if isinstance(text, str) else list(text)
    names = [n for n in names if n]
    stages = []
    for name in names:
        try:
            stage = Stage(name)
        except ValueError:
            raise PipelineValidationError(
                f"未知的阶段: {name!r}，可选 {', '.join(s.value for s in Stage)}")
        if stage in stages:
            raise PipelineValidationError(f"阶段重复: {name}")
        stages.append(stage)
    return sorted(stages, key=STAGE_ORDER.index)


@dataclass
class PipelineRun:
    """一次流水线运行的全部参数"""

    config: PipelineConfig
    stages: List[Stage]
    detection_paths: List[Path] = field(default_factory=list)
    flow_dir: Optional[Path] = None
    gt_path: Optional[Path] = None
    out_dir: Optional[Path] = None
    classifier_path: Optional[Path] = None
    workers: int = 1
    write_intermediate: bool = True

    def validate(self) -> List[str]:
        errors = []
        if self.workers < 1:
            errors.append("workers必须为正")
        if Stage.RESCORE in self.stages and Stage.TRACK not in self.stages:
            errors.append("rescore 阶段需要 track 阶段")
        return errors


@dataclass
class PipelineResult:
    """流水线输出"""

    final: List[ClipDetections]
    report: Optional[EvalReport]
    per_source: Dict[str, List[ClipDetections]]
    tubelets: Dict[str, List[Tubelet]]
    manifest: Dict[str, Any]


def pool_sources(sources: Sequence[Sequence[ClipDetections]]) -> List[ClipDetections]:
    """不做 NMS，直接按片段合并多个结果源"""
    order: List[str] = []
    grouped: Dict[str, List[ClipDetections]] = {}
    for source in sources:
        for clip in source:
            if clip.clip_id not in grouped:
                order.append(clip.clip_id)
                grouped[clip.clip_id] = []
            grouped[clip.clip_id].append(clip)
    pooled = []
    for clip_id in order:
        members = grouped[clip_id]
        pooled.append(members[0].with_detections(d for clip in members for d in clip.detections))
    return pooled


class PipelineRunner:
    """流水线执行器，可直接传入内存中的数据以跳过文件读取"""

    def __init__(self, run: PipelineRun,
                 sources: Optional[Dict[str, List[ClipDetections]]] = None,
                 gt: Optional[List[GroundTruthRecord]] = None,
                 flows: Optional[FlowCatalog] = None,
                 classifier: Optional[BayesClassifier1D] = None):
        self.run = run
        self.config = run.config
        self.sources = sources
        self.gt = gt
        self.flows = flows
        self.classifier = classifier
        self.executor = ParallelExecutor(run.workers)
        self.monitor = PerformanceMonitor()
        self.outputs: List[Path] = []
        self.inputs: List[Path] = []

    # ------------------------------------------------------------ 准备

    def _needs_flow(self) -> bool:
        stages = self.run.stages
        return Stage.TRACK in stages or (
            Stage.MGP in stages and self.config.mgp_mode == PropagationMode.MOTION_GUIDED.value)

    def _load_inputs(self) -> None:
        errors = self.run.validate()
        if errors:
            raise PipelineValidationError(f"流水线参数无效: {'; '.join(errors)}")

        if self.sources is None:
            if not self.run.detection_paths:
                raise PipelineValidationError("至少需要一个检测文件 (--dets)")
            self.sources = {}
            for index, path in enumerate(self.run.detection_paths):
                path = Path(path)
                name = path.stem if path.stem not in self.sources else f"{path.stem}_{index}"
                with self._stage_context("read", str(path)):
                    self.sources[name] = read_detections(path, self.config.num_classes)
                self.inputs.append(path)

        if self.gt is None and self.run.gt_path is not None:
            with self._stage_context("read", str(self.run.gt_path)):
                self.gt = read_ground_truth(self.run.gt_path, self.config.num_classes)
            self.inputs.append(Path(self.run.gt_path))

        if self.classifier is None and self.run.classifier_path is not None:
            with self._stage_context("read", str(self.run.classifier_path)):
                self.classifier = read_classifier(self.run.classifier_path)
            self.inputs.append(Path(self.run.classifier_path))

        if self.flows is None and self.run.flow_dir is not None:
            self.flows = DirectoryFlowCatalog(self.run.flow_dir)
        if self.flows is None and self._needs_flow():
            raise PipelineValidationError("mgp (motion_guided) 与 track 阶段需要光流目录 (--flow-dir)")
        if Stage.EVAL in self.run.stages and self.gt is None:
            raise PipelineValidationError("eval 阶段需要真值文件 (--gt)")
        if Stage.RESCORE in self.run.stages and self.classifier is None and self.gt is None:
            raise PipelineValidationError("rescore 阶段需要分类器 (--model) 或真值 (--gt) 用于训练")

    @contextmanager
    def _stage_context(self, stage: str, context: str) -> Iterator[None]:
        try:
            yield
        except StageError:
            raise
        except PipelineValidationError:
            raise
        except Exception as e:
            raise StageError(stage, context, e) from e

    def _write(self, name: str, source: Optional[str], clips: List[ClipDetections]) -> None:
        if self.run.out_dir is None or not self.run.write_intermediate:
            return
        path = Path(self.run.out_dir) / "stages" / (source or "") / f"{name}.jsonl"
        write_detections(clips, path)
        self.outputs.append(path)

    # ------------------------------------------------------------ 各阶段

    def _detection_stream(self, name: str, clips: List[ClipDetections]) -> Tuple[List[ClipDetections], List[ClipDetections]]:
        """返回 (轨迹流使用的基础检测, 检测流输出)"""
        stages = self.run.stages
        config = self.config

        if Stage.MCS in stages:
            with self._stage_context("mcs", name), PerformanceTimer(f"{name}:mcs", monitor=self.monitor):
                clips = self.executor.map(
                    lambda c: apply_mcs(c, config.mcs_ratio, config.mcs_penalty)[0], clips)
            self._write("mcs", name, clips)

        if config.frame_stride > 1:
            with self._stage_context("interpolate", name):
                clips = self.executor.map(
                    lambda c: interpolate_stride(c, config.frame_stride, config.nms_iou), clips)
            self._write("interpolated", name, clips)

        base = clips
        if Stage.MGP in stages:
            plan = PropagationPlan(config.mgp_window, PropagationMode(config.mgp_mode))

            def run_mgp(clip: ClipDetections) -> ClipDetections:
                provider = self.flows.for_clip(clip) if self.flows is not None else None
                return propagate_clip(clip, provider, plan, config.nms_iou)[0]

            with self._stage_context("mgp", name), PerformanceTimer(f"{name}:mgp", monitor=self.monitor):
                clips = self.executor.map(run_mgp, clips)
            self._write("mgp", name, clips)
        return base, clips

    def _tubelet_stream(self, name: str, base: List[ClipDetections]) -> Tuple[List[Tubelet], Optional[List[ClipDetections]]]:
        stages = self.run.stages
        config = self.config

        with self._stage_context("track", name), PerformanceTimer(f"{name}:track", monitor=self.monitor):
            per_clip = self.executor.map(
                lambda c: build_tubelets(c, self.flows.for_clip(c), config), base)
        tubelets = [t for clip_tubelets in per_clip for t in clip_tubelets]
        if self.run.out_dir is not None and self.run.write_intermediate:
            path = Path(self.run.out_dir) / "stages" / name / "tubelets.jsonl"
            write_tubelets(tubelets, path)
            self.outputs.append(path)

        if Stage.RESCORE not in stages:
            return tubelets, None

        by_id = {clip.clip_id: clip for clip in base}
        with self._stage_context("rescore", name), PerformanceTimer(f"{name}:rescore", monitor=self.monitor):
            pooled = [spatial_max_pool(t, by_id[t.clip_id], config.maxpool_iou) for t in tubelets]
            classifier = self.classifier
            if classifier is None:
                classifier = train_classifier(pooled, self.gt, config)
                if self.run.out_dir is not None and self.run.write_intermediate:
                    path = Path(self.run.out_dir) / "stages" / name / "classifier.json"
                    write_classifier(classifier, path)
                    self.outputs.append(path)
            rescored = rescore(pooled, classifier, config.topk_k, config.rescore_feature,
                               config.positive_range, config.negative_range)
            detections = [tubelets_to_detections(rescored, clip) for clip in base]

        if self.run.out_dir is not None and self.run.write_intermediate:
            path = Path(self.run.out_dir) / "stages" / name / "rescored_tubelets.jsonl"
            write_tubelets(rescored, path)
            self.outputs.append(path)
        self._write("rescored", name, detections)
        return rescored, detections

    def _run_source(self, name: str, clips: List[ClipDetections]) -> Tuple[List[ClipDetections], List[Tubelet]]:
        base, stream = self._detection_stream(name, clips)

        tubelets: List[Tubelet] = []
        tubelet_dets = None
        if Stage.TRACK in self.run.stages:
            tubelets, tubelet_dets = self._tubelet_stream(name, base)

        if Stage.COMBINE not in self.run.stages:
            return stream, tubelets

        streams = [stream] + ([tubelet_dets] if tubelet_dets is not None else [])
        with self._stage_context("combine", name):
            normalized = [minmax_normalize(s, self.config.minmax_scope) for s in streams]
            combined = combine(normalized, self.config.nms_iou) if len(normalized) > 1 else normalized[0]
        self._write("combined", name, combined)
        return combined, tubelets

    # ------------------------------------------------------------ 主流程

    def execute(self) -> PipelineResult:
        """
        执行流水线

        Raises:
            PipelineValidationError: 参数或输入缺失
            StageError: 某个阶段失败
        """
        with PerformanceTimer("pipeline", monitor=self.monitor):
            self._load_inputs()
            names = [s.value for s in self.run.stages]
            logger.info(f"🚀 流水线开始: 阶段 [{', '.join(names) or '无'}], 结果源 {list(self.sources)}")

            per_source: Dict[str, List[ClipDetections]] = {}
            tubelets: Dict[str, List[Tubelet]] = {}
            for name, clips in self.sources.items():
                per_source[name], tubelets[name] = self._run_source(name, list(clips))

            outputs = list(per_source.values())
            if len(outputs) == 1:
                final = outputs[0]
            elif Stage.COMBINE in self.run.stages:
                with self._stage_context("combine", "跨结果源"):
                    final = combine([minmax_normalize(s, self.config.minmax_scope) for s in outputs],
                                    self.config.nms_iou)
            else:
                final = pool_sources(outputs)

            if self.run.out_dir is not None:
                path = Path(self.run.out_dir) / "final.jsonl"
                write_detections(final, path)
                self.outputs.append(path)

            report = None
            if Stage.EVAL in self.run.stages:
                with self._stage_context("eval", "final"), PerformanceTimer("eval", monitor=self.monitor):
                    report = mean_ap(final, self.gt, self.config.matching_iou, self.config.ap_method)
                if self.run.out_dir is not None:
                    path = Path(self.run.out_dir) / "report.json"
                    write_report(report, path)
                    self.outputs.append(path)
                logger.info(f"📊 mean AP = {report.mean_ap:.4f}")

        manifest = self._manifest()
        return PipelineResult(final, report, per_source, tubelets, manifest)

    def _manifest(self) -> Dict[str, Any]:
        manifest = {
            'tool': {'name': 'tubekit', 'version': __version__},
            'python': platform.python_version(),
            'numpy': np.__version__,
            'scipy': scipy.__version__,
            'stages': [s.value for s in self.run.stages],
            'workers': self.run.workers,
            'config': self.config.to_dict(),
            'inputs': {str(p): file_sha256(p) for p in self.inputs},
            'outputs': {},
            'timings': {name: stats.get('total', 0.0)
                        for name, stats in self.monitor.get_all_metrics().items()},
            'memory': memory_usage_mb(),
        }
        if self.run.out_dir is not None:
            out_dir = Path(self.run.out_dir)
            manifest['outputs'] = {p.relative_to(out_dir).as_posix(): file_sha256(p)
                                   for p in sorted(set(self.outputs))}
            atomic_write_text(out_dir / "manifest.json",
                              json.dumps(manifest, indent=2, ensure_ascii=False) + "\n")
        return manifest


@performance_monitor("run_pipeline")
def run_pipeline(run: PipelineRun, **preloaded: Any) -> PipelineResult:
    """执行一次流水线运行（preloaded 可传 sources / gt / flows / classifier）"""
    return PipelineRunner(run, **preloaded).execute()


# ---------------------------------------------------------------- 消融实验

@dataclass
class AblationRow:
    """消融实验的一行"""

    name: str
    mean_ap: float
    wins: int
    delta: float


@dataclass
class AblationResult:
    """组件消融与 MGP 窗口扫描结果"""

    rows: List[AblationRow]
    sweep: Dict[Tuple[str, int], float]
    num_classes: int

    def format_table(self) -> str:
        lines = [f"{'setting':<24} {'mean AP':>8} {'delta':>8} {'#win':>6}"]
        for row in self.rows:
            lines.append(f"{row.name:<24} {row.mean_ap:8.4f} {row.delta:+8.4f} "
                         f"{row.wins:>3}/{self.num_classes:<2}")
        if self.sweep:
            windows = sorted({w for _, w in self.sweep})
            lines.append("")
            lines.append(f"{'window':<24} " + " ".join(f"{w:>8}" for w in windows))
            for mode in (PropagationMode.DUPLICATE.value, PropagationMode.MOTION_GUIDED.value):
                values = " ".join(f"{self.sweep.get((mode, w), float('nan')):8.4f}" for w in windows)
                lines.append(f"{mode:<24} {values}")
        return "\n".join(lines)


LADDER = [
    ("still-image", []),
    ("+MGP", [Stage.MGP]),
    ("+MGP+MCS", [Stage.MCS, Stage.MGP]),
    ("+MGP+MCS+rescoring", [Stage.MCS, Stage.MGP, Stage.TRACK, Stage.RESCORE, Stage.COMBINE]),
]


@performance_monitor("run_ablation")
def run_ablation(sources: Dict[str, List[ClipDetections]], gt: List[GroundTruthRecord],
                 flows: FlowCatalog, config: PipelineConfig,
                 windows: Sequence[int] = (1, 3, 5, 7), workers: int = 1,
                 classifier: Optional[BayesClassifier1D] = None) -> AblationResult:
    """
    组件消融与 MGP 窗口扫描

    每个设置都以第一个结果源的静态检测为基线比较逐类别 AP；
    有多个结果源时追加完整流水线的模型融合一行。
    """
    first = next(iter(sources))
    gt_classes = len({r.class_id for r in gt})

    def evaluate(stages: List[Stage], cfg: PipelineConfig,
                 inputs: Dict[str, List[ClipDetections]]) -> EvalReport:
        run = PipelineRun(cfg, stages + [Stage.EVAL], workers=workers)
        return PipelineRunner(run, sources=inputs, gt=gt, flows=flows, classifier=classifier).execute().report

    baseline = None
    rows = []
    ladder = list(LADDER)
    if len(sources) > 1:
        ladder.append(("model combination", LADDER[-1][1]))
    for name, stages in ladder:
        inputs = sources if name == "model combination" else {first: sources[first]}
        report = evaluate(list(stages), config, inputs)
        if baseline is None:
            baseline = report
        comparison = compare_reports(baseline, report)
        rows.append(AblationRow(name, report.mean_ap, comparison.wins, comparison.mean_delta))
        logger.info(f"消融 {name}: mean AP {report.mean_ap:.4f} (#win {comparison.wins})")

    sweep: Dict[Tuple[str, int], float] = {}
    for window in windows:
        for mode in (PropagationMode.DUPLICATE, PropagationMode.MOTION_GUIDED):
            cfg = config.replace(mgp_window=window, mgp_mode=mode.value)
            sweep[(mode.value, window)] = evaluate([Stage.MGP], cfg, {first: sources[first]}).mean_ap

    return AblationResult(rows, sweep, gt_classes)
