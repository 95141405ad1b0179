"""
模型融合与评估模块

- 每个结果源的分数 min-max 归一化
- 多源检测按帧 NMS 融合
- 贪心分数平均（逐步加入能提升 mean AP 的结果源）
- mean AP（全点插值或 11 点插值）与 CorLoc 评估
"""

import logging
from collections import Counter
from dataclasses import dataclass, field
from typing import Callable, Dict, Iterable, List, Mapping, NamedTuple, Optional, Sequence, Tuple

import numpy as np

from .core_model import (
    TubekitError, ClipDetections, Detection, GroundTruthRecord,
    index_ground_truth, iou, nms, score_order_key
)

logger = logging.getLogger(__name__)

AP_METHODS = ("all_points", "eleven_point")


class SourceMismatchError(TubekitError):
    """不同结果源中同一片段的元数据不一致"""
    pass


# ---------------------------------------------------------------- 归一化与融合

def _affine_scores(detections: Sequence[Detection], lo: float, hi: float) -> List[Detection]:
    if hi == lo:
        return [d.with_score(0.5) for d in detections]
    span = hi - lo
    return [d.with_score((d.score - lo) / span) for d in detections]


def minmax_normalize(clips: Sequence[ClipDetections], scope: str = "global") -> List[ClipDetections]:
    """
    把分数仿射映射到 [0, 1]

    Args:
        clips: 一个结果源的全部片段
        scope: global（所有片段共用极值）或 per_clip

    Returns:
        List[ClipDetections]: 归一化后的片段；范围内分数全部相同时映射为 0.5
    """
    if scope not in ("global", "per_clip"):
        raise ValueError(f"归一化范围必须是 global 或 per_clip: {scope!r}")

    if scope == "per_clip":
        result = []
        for clip in clips:
            if not clip.detections:
                result.append(clip)
                continue
            scores = [d.score for d in clip.detections]
            result.append(clip.with_detections(_affine_scores(clip.detections, min(scores), max(scores))))
        return result

    scores = [d.score for clip in clips for d in clip.detections]
    if not scores:
        return list(clips)
    lo, hi = min(scores), max(scores)
    return [clip.with_detections(_affine_scores(clip.detections, lo, hi)) for clip in clips]


def _align_sources(sources: Sequence[Sequence[ClipDetections]]) -> List[List[ClipDetections]]:
    """按片段 ID 对齐各结果源，返回 [片段][结果源] 的列表"""
    order: List[str] = []
    grouped: Dict[str, List[ClipDetections]] = {}
    for source in sources:
        for clip in source:
            if clip.clip_id not in grouped:
                order.append(clip.clip_id)
                grouped[clip.clip_id] = []
            members = grouped[clip.clip_id]
            if members:
                ref = members[0]
                if (ref.num_frames, ref.width, ref.height) != (clip.num_frames, clip.width, clip.height):
                    raise SourceMismatchError(
                        f"片段 {clip.clip_id} 在不同结果源中的元数据不一致: "
                        f"{ref.num_frames}帧 {ref.width}x{ref.height} vs "
                        f"{clip.num_frames}帧 {clip.width}x{clip.height}")
            members.append(clip)
    return [grouped[clip_id] for clip_id in order]


def combine(sources: Sequence[Sequence[ClipDetections]], nms_iou: float = 0.5) -> List[ClipDetections]:
    """
    多源融合：逐帧汇集所有结果源的检测后做按类别 NMS

    Args:
        sources: 已归一化的结果源列表
        nms_iou: NMS 阈值

    Returns:
        List[ClipDetections]: 融合结果，保留幸存检测的 source_id
    """
    combined = []
    for members in _align_sources(sources):
        per_frame: Dict[int, List[Detection]] = {}
        for clip in members:
            for det in clip.detections:
                per_frame.setdefault(det.frame, []).append(det)
        kept = []
        for frame in sorted(per_frame):
            kept.extend(nms(per_frame[frame], nms_iou))
        combined.append(members[0].with_detections(kept))
    return combined


def _average_group(pooled: List[Tuple[int, Detection]], num_sources: int,
                   match_iou: float, source_ids: Sequence[str]) -> List[Detection]:
    """同帧同类检测按 IOU 分组，组内取平均分"""
    pooled = sorted(pooled, key=lambda item: score_order_key(item[1]) + (item[0],))
    assigned = [False] * len(pooled)
    averaged = []
    for i, (src_i, seed) in enumerate(pooled):
        if assigned[i]:
            continue
        assigned[i] = True
        members = {src_i: seed}
        for other_src in range(num_sources):
            if other_src in members:
                continue
            best_j, best_overlap = None, -1.0
            for j, (src_j, det) in enumerate(pooled):
                if assigned[j] or src_j != other_src:
                    continue
                overlap = iou(seed.box, det.box)
                if overlap >= match_iou and overlap > best_overlap:
                    best_j, best_overlap = j, overlap
            if best_j is not None:
                assigned[best_j] = True
                members[other_src] = pooled[best_j][1]
        score = sum(d.score for d in members.values()) / len(members)
        label = "+".join(source_ids[s] for s in sorted(members))
        averaged.append(Detection(seed.frame, seed.class_id, score, seed.box, label, seed.origin))
    return averaged


def average_sources(sources: Sequence[Sequence[ClipDetections]], match_iou: float = 0.5,
                    source_ids: Optional[Sequence[str]] = None) -> List[ClipDetections]:
    """
    多源分数平均

    同帧同类的检测按 IOU ≥ match_iou 分组（以最高分检测为种子，每个结果源最多一个成员），
    组内平均分作为种子框的分数；未匹配的检测保留自身分数。
    """
    if source_ids is None:
        source_ids = [f"src{i}" for i in range(len(sources))]
    if len(source_ids) != len(sources):
        raise ValueError(f"结果源 ID 数量 {len(source_ids)} 与结果源数量 {len(sources)} 不一致")

    index_of = {}
    for i, source in enumerate(sources):
        for clip in source:
            index_of[(i, clip.clip_id)] = clip

    result = []
    for members in _align_sources(sources):
        clip_id = members[0].clip_id
        buckets: Dict[Tuple[int, int], List[Tuple[int, Detection]]] = {}
        for src, _ in enumerate(sources):
            clip = index_of.get((src, clip_id))
            if clip is None:
                continue
            for det in clip.detections:
                buckets.setdefault((det.frame, det.class_id), []).append((src, det))
        averaged = []
        for key in sorted(buckets):
            averaged.extend(_average_group(buckets[key], len(sources), match_iou, source_ids))
        result.append(members[0].with_detections(averaged))
    return result


class GreedyAverageResult(NamedTuple):
    """贪心平均结果"""
    selected: List[str]
    averaged: List[ClipDetections]
    history: List[Tuple[Tuple[str, ...], float]]


def greedy_average(sources: Mapping[str, Sequence[ClipDetections]], gt: Sequence[GroundTruthRecord],
                   eval_fn: Optional[Callable[[List[ClipDetections]], float]] = None,
                   match_iou: float = 0.5, epsilon: float = 0.001,
                   scope: str = "global") -> GreedyAverageResult:
    """
    贪心模型平均

    从 mean AP 最高的单个结果源开始，每轮加入使平均结果 mean AP 最高的结果源，
    提升小于 epsilon 时停止。各结果源先做 min-max 归一化。

    Args:
        sources: 结果源 ID → 检测
        gt: 真值
        eval_fn: 评估函数，默认 mean_ap(...).mean_ap
        match_iou: 分组阈值
        epsilon: 最小提升量
        scope: 归一化范围

    Raises:
        ValueError: 结果源为空
    """
    if not sources:
        raise ValueError("贪心平均至少需要一个结果源")
    if eval_fn is None:
        def eval_fn(clips: List[ClipDetections]) -> float:
            return mean_ap(clips, gt, match_iou).mean_ap

    normalized = {sid: minmax_normalize(clips, scope) for sid, clips in sources.items()}

    def evaluate(ids: List[str]) -> Tuple[float, List[ClipDetections]]:
        averaged = average_sources([normalized[s] for s in ids], match_iou, ids)
        return eval_fn(averaged), averaged

    best_id, best_score, best_clips = None, None, None
    for sid in normalized:
        score, clips = evaluate([sid])
        logger.info(f"结果源 {sid}: mean AP {score:.4f}")
        if best_score is None or score > best_score:
            best_id, best_score, best_clips = sid, score, clips

    selected = [best_id]
    history = [((best_id,), best_score)]
    while True:
        candidate, cand_score, cand_clips = None, None, None
        for sid in normalized:
            if sid in selected:
                continue
            score, clips = evaluate(selected + [sid])
            if cand_score is None or score > cand_score:
                candidate, cand_score, cand_clips = sid, score, clips
        if candidate is None or cand_score - best_score < epsilon:
            break
        selected.append(candidate)
        best_score, best_clips = cand_score, cand_clips
        history.append((tuple(selected), best_score))
        logger.info(f"加入结果源 {candidate}: mean AP {best_score:.4f}")

    return GreedyAverageResult(selected, best_clips, history)


# ---------------------------------------------------------------- mean AP

@dataclass
class ClassCounts:
    """单个类别的计数"""
    gt: int = 0
    tp: int = 0
    fp: int = 0


@dataclass
class EvalReport:
    """mean AP 评估报告"""

    per_class_ap: Dict[int, float]
    mean_ap: float
    per_class_counts: Dict[int, ClassCounts]
    matching_iou: float
    excluded_classes: List[int] = field(default_factory=list)
    method: str = "all_points"

    def to_dict(self) -> Dict:
        return {
            'mean_ap': self.mean_ap,
            'matching_iou': self.matching_iou,
            'method': self.method,
            'per_class_ap': {str(c): ap for c, ap in sorted(self.per_class_ap.items())},
            'per_class_counts': {str(c): {'gt': n.gt, 'tp': n.tp, 'fp': n.fp}
                                 for c, n in sorted(self.per_class_counts.items())},
            'excluded_classes': sorted(self.excluded_classes),
        }

    @classmethod
    def from_dict(cls, data: Dict) -> 'EvalReport':
        return cls(
            per_class_ap={int(c): float(ap) for c, ap in data['per_class_ap'].items()},
            mean_ap=float(data['mean_ap']),
            per_class_counts={int(c): ClassCounts(int(n['gt']), int(n['tp']), int(n['fp']))
                              for c, n in data.get('per_class_counts', {}).items()},
            matching_iou=float(data['matching_iou']),
            excluded_classes=[int(c) for c in data.get('excluded_classes', [])],
            method=data.get('method', 'all_points'),
        )

    def format_table(self) -> str:
        """固定宽度表格"""
        lines = [f"{'class':>6} {'gt':>7} {'tp':>7} {'fp':>7} {'AP':>8}"]
        for class_id in sorted(self.per_class_counts):
            counts = self.per_class_counts[class_id]
            ap = self.per_class_ap.get(class_id)
            ap_text = f"{ap:8.4f}" if ap is not None else f"{'-':>8}"
            lines.append(f"{class_id:>6} {counts.gt:>7} {counts.tp:>7} {counts.fp:>7} {ap_text}")
        lines.append(f"{'mean':>6} {'':>7} {'':>7} {'':>7} {self.mean_ap:8.4f}")
        if self.excluded_classes:
            lines.append(f"无真值而排除的类别: {', '.join(str(c) for c in sorted(self.excluded_classes))}")
        return "\n".join(lines)


def average_precision(recall: np.ndarray, precision: np.ndarray, method: str = "all_points") -> float:
    """
    由 PR 曲线计算 AP

    all_points: 单调包络下的面积；eleven_point: 11 个召回点的最大精度平均
    """
    if method == "eleven_point":
        ap = 0.0
        for t in np.linspace(0.0, 1.0, 11):
            mask = recall >= t
            ap += (float(np.max(precision[mask])) if mask.any() else 0.0) / 11.0
        return ap
    if method != "all_points":
        raise ValueError(f"未知的 AP 计算方式: {method!r}")

    mrec = np.concatenate(([0.0], recall, [1.0]))
    mpre = np.concatenate(([0.0], precision, [0.0]))
    for i in range(mpre.size - 1, 0, -1):
        mpre[i - 1] = max(mpre[i - 1], mpre[i])
    idx = np.where(mrec[1:] != mrec[:-1])[0]
    return float(np.sum((mrec[idx + 1] - mrec[idx]) * mpre[idx + 1]))


class APAccumulator:
    """
    可合并的逐类别匹配结果累加器

    按片段分片累加后 merge，结果与一次性累加相同。
    """

    def __init__(self, matching_iou: float = 0.5):
        if not 0.0 < matching_iou <= 1.0:
            raise ValueError(f"匹配阈值必须在 (0, 1] 内: {matching_iou}")
        self.matching_iou = matching_iou
        # 类别 → [(分数, 是否 TP, 排序键)]
        self.records: Dict[int, List[Tuple[float, bool, tuple]]] = {}
        self.gt_counts: Counter = Counter()

    def add(self, clips: Iterable[ClipDetections], gt: Iterable[GroundTruthRecord]) -> 'APAccumulator':
        """累加一批片段；gt 中属于这些片段之外的真值同样计数"""
        gt = list(gt)
        index = index_ground_truth(gt)
        for record in gt:
            self.gt_counts[record.class_id] += 1

        for clip in clips:
            grouped: Dict[Tuple[int, int], List[Detection]] = {}
            for det in clip.detections:
                grouped.setdefault((det.frame, det.class_id), []).append(det)
            for (frame, class_id), dets in grouped.items():
                gt_boxes = index.get((clip.clip_id, frame, class_id), [])
                matched = [False] * len(gt_boxes)
                bucket = self.records.setdefault(class_id, [])
                for det in sorted(dets, key=score_order_key):
                    best, best_overlap = None, -1.0
                    for g, box in enumerate(gt_boxes):
                        if matched[g]:
                            continue
                        overlap = iou(det.box, box)
                        if overlap >= self.matching_iou and overlap > best_overlap:
                            best, best_overlap = g, overlap
                    if best is not None:
                        matched[best] = True
                    key = (clip.clip_id, frame, det.box.x0, det.box.y0, det.box.x1, det.box.y1)
                    bucket.append((det.score, best is not None, key))
        return self

    def merge(self, other: 'APAccumulator') -> 'APAccumulator':
        """合并另一个累加器，返回新的累加器"""
        if other.matching_iou != self.matching_iou:
            raise ValueError("只能合并匹配阈值相同的累加器")
        merged = APAccumulator(self.matching_iou)
        for source in (self, other):
            for class_id, bucket in source.records.items():
                merged.records.setdefault(class_id, []).extend(bucket)
            merged.gt_counts.update(source.gt_counts)
        return merged

    def report(self, method: str = "all_points") -> EvalReport:
        """计算各类别 AP 与 mean AP"""
        per_class_ap: Dict[int, float] = {}
        counts: Dict[int, ClassCounts] = {}
        excluded: List[int] = []

        for class_id in sorted(set(self.records) | set(self.gt_counts)):
            bucket = sorted(self.records.get(class_id, []), key=lambda r: (-r[0], r[2]))
            n_gt = self.gt_counts.get(class_id, 0)
            tp = np.array([1.0 if r[1] else 0.0 for r in bucket])
            counts[class_id] = ClassCounts(n_gt, int(tp.sum()), int(len(tp) - tp.sum()))
            if n_gt == 0:
                excluded.append(class_id)
                continue
            if len(bucket) == 0:
                per_class_ap[class_id] = 0.0
                continue
            tp_cum = np.cumsum(tp)
            fp_cum = np.cumsum(1.0 - tp)
            recall = tp_cum / n_gt
            precision = tp_cum / (tp_cum + fp_cum)
            per_class_ap[class_id] = average_precision(recall, precision, method)

        if excluded:
            logger.warning(f"⚠️ 以下类别没有真值，未计入 mean AP: {excluded}")
        if per_class_ap:
            mean = float(np.mean(list(per_class_ap.values())))
        else:
            logger.warning("⚠️ 没有任何带真值的类别，mean AP 记为 0")
            mean = 0.0
        return EvalReport(per_class_ap, mean, counts, self.matching_iou, excluded, method)


def mean_ap(dets: Sequence[ClipDetections], gt: Sequence[GroundTruthRecord],
            matching_iou: float = 0.5, method: str = "all_points") -> EvalReport:
    """
    mean AP 评估

    每个类别内检测按分数降序，依次与尚未匹配、IOU ≥ matching_iou 的真值中 IOU 最大者匹配；
    AP 为插值 PR 曲线下面积。没有真值的类别不计入平均并在报告中列出。
    """
    return APAccumulator(matching_iou).add(dets, gt).report(method)


@dataclass
class ReportComparison:
    """两份报告的逐类别对比"""

    deltas: Dict[int, float]
    wins: int
    losses: int
    ties: int
    mean_delta: float


def compare_reports(baseline: EvalReport, candidate: EvalReport) -> ReportComparison:
    """逐类别 AP 差值与候选胜出的类别数"""
    classes = sorted(set(baseline.per_class_ap) & set(candidate.per_class_ap))
    deltas = {c: candidate.per_class_ap[c] - baseline.per_class_ap[c] for c in classes}
    wins = sum(1 for d in deltas.values() if d > 0)
    losses = sum(1 for d in deltas.values() if d < 0)
    return ReportComparison(deltas, wins, losses, len(deltas) - wins - losses,
                            candidate.mean_ap - baseline.mean_ap)


# ---------------------------------------------------------------- CorLoc

@dataclass
class CorLocReport:
    """CorLoc 评估报告"""

    per_class: Dict[int, float]
    per_class_frames: Dict[int, int]
    mean: float
    overall: float
    iou_threshold: float = 0.5

    def to_dict(self) -> Dict:
        return {
            'mean': self.mean,
            'overall': self.overall,
            'iou_threshold': self.iou_threshold,
            'per_class': {str(c): v for c, v in sorted(self.per_class.items())},
            'per_class_frames': {str(c): n for c, n in sorted(self.per_class_frames.items())},
        }

    def format_table(self) -> str:
        lines = [f"{'class':>6} {'frames':>8} {'CorLoc':>8}"]
        for class_id in sorted(self.per_class):
            lines.append(f"{class_id:>6} {self.per_class_frames[class_id]:>8} "
                         f"{self.per_class[class_id]:8.4f}")
        lines.append(f"{'mean':>6} {'':>8} {self.mean:8.4f}")
        lines.append(f"{'all':>6} {sum(self.per_class_frames.values()):>8} {self.overall:8.4f}")
        return "\n".join(lines)


def infer_targets(gt: Iterable[GroundTruthRecord]) -> Dict[str, int]:
    """每个片段出现次数最多的真值类别（并列取较小类别号）"""
    counters: Dict[str, Counter] = {}
    for record in gt:
        counters.setdefault(record.clip_id, Counter())[record.class_id] += 1
    return {clip_id: min(counter, key=lambda c: (-counter[c], c))
            for clip_id, counter in counters.items()}


def _corloc_outcomes(dets: Sequence[ClipDetections], gt: Sequence[GroundTruthRecord],
                     targets: Optional[Mapping[str, int]],
                     iou_threshold: float) -> List[Tuple[int, bool]]:
    """逐标注帧判断 (目标类别, 是否定位成功)"""
    gt = list(gt)
    resolved = infer_targets(gt)
    if targets:
        resolved.update(targets)
    index = index_ground_truth(gt)
    annotated = sorted({(r.clip_id, r.frame) for r in gt})
    by_clip = {clip.clip_id: clip for clip in dets}

    outcomes = []
    for clip_id, frame in annotated:
        target = resolved[clip_id]
        clip = by_clip.get(clip_id)
        # 只看该帧得分最高的一个检测，不论类别
        candidates = clip.detections_at(frame) if clip is not None else []
        success = False
        if candidates:
            top = min(candidates, key=score_order_key)
            success = top.class_id == target and any(
                iou(top.box, box) > iou_threshold for box in index.get((clip_id, frame, target), ()))
        outcomes.append((target, success))
    return outcomes


def corloc(dets: Sequence[ClipDetections], gt: Sequence[GroundTruthRecord],
           target_class_per_clip: Optional[Mapping[str, int]] = None,
           iou_threshold: float = 0.5) -> float:
    """
    CorLoc：标注帧中得分最高的检测属于目标类别且与目标真值 IOU > 阈值的比例

    未给出目标类别的片段取其出现最多的真值类别。
    """
    outcomes = _corloc_outcomes(dets, gt, target_class_per_clip, iou_threshold)
    if not outcomes:
        logger.warning("⚠️ 没有标注帧，CorLoc 记为 0")
        return 0.0
    return sum(1 for _, ok in outcomes if ok) / len(outcomes)


def corloc_report(dets: Sequence[ClipDetections], gt: Sequence[GroundTruthRecord],
                  target_class_per_clip: Optional[Mapping[str, int]] = None,
                  iou_threshold: float = 0.5) -> CorLocReport:
    """逐类别 CorLoc 及其平均"""
    outcomes = _corloc_outcomes(dets, gt, target_class_per_clip, iou_threshold)
    frames: Counter = Counter()
    hits: Counter = Counter()
    for target, ok in outcomes:
        frames[target] += 1
        hits[target] += int(ok)
    per_class = {c: hits[c] / frames[c] for c in sorted(frames)}
    mean = float(np.mean(list(per_class.values()))) if per_class else 0.0
    overall = sum(hits.values()) / len(outcomes) if outcomes else 0.0
    return CorLocReport(per_class, dict(frames), mean, overall, iou_threshold)
