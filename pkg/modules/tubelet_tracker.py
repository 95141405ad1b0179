"""
高置信度跟踪模块

按类别从高分锚点出发双向跟踪，生成逐帧连续的长时轨迹（tubelet），
并用锚点抑制避免同一物体被重复跟踪。
"""

import logging
from abc import ABC, abstractmethod
from dataclasses import dataclass, replace
from typing import List, Optional, Sequence, Tuple

from .core_model import (
    BBox, Detection, ClipDetections, InvariantViolationError,
    iou, clamp_box, score_order_key
)
from .mgp import FlowProvider, FlowUnavailableError, shift_box

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class TubeletNode:
    """轨迹上一帧的框与置信度"""

    frame: int
    box: BBox
    score: float
    snapped: bool


@dataclass(frozen=True)
class Tubelet:
    """单类别、逐帧连续的框序列"""

    clip_id: str
    class_id: int
    nodes: Tuple[TubeletNode, ...]
    anchor_index: int
    source_id: Optional[str] = None
    label: Optional[str] = None
    posterior: Optional[float] = None

    def __post_init__(self):
        nodes = tuple(self.nodes)
        object.__setattr__(self, 'nodes', nodes)
        if not nodes:
            raise InvariantViolationError(f"片段 {self.clip_id} 的轨迹为空")
        for prev, cur in zip(nodes, nodes[1:]):
            if cur.frame != prev.frame + 1:
                raise InvariantViolationError(
                    f"片段 {self.clip_id} 的轨迹帧号不连续: {prev.frame} → {cur.frame}")
        if not 0 <= self.anchor_index < len(nodes):
            raise InvariantViolationError(
                f"锚点下标越界: {self.anchor_index} (长度 {len(nodes)})")
        if self.label not in (None, "pos", "neg"):
            raise ValueError(f"轨迹标签必须是 pos 或 neg: {self.label!r}")

    def __len__(self) -> int:
        return len(self.nodes)

    @property
    def start_frame(self) -> int:
        return self.nodes[0].frame

    @property
    def end_frame(self) -> int:
        return self.nodes[-1].frame

    @property
    def anchor(self) -> TubeletNode:
        return self.nodes[self.anchor_index]

    @property
    def scores(self) -> List[float]:
        return [n.score for n in self.nodes]

    def node_at(self, frame: int) -> Optional[TubeletNode]:
        """获取某帧的节点，不在轨迹范围内返回 None"""
        if self.start_frame <= frame <= self.end_frame:
            return self.nodes[frame - self.start_frame]
        return None

    def with_nodes(self, nodes: Sequence[TubeletNode]) -> 'Tubelet':
        return replace(self, nodes=tuple(nodes))

    def with_label(self, label: str, posterior: Optional[float] = None) -> 'Tubelet':
        return replace(self, label=label,
                       posterior=None if posterior is None else float(posterior))


def _select_anchor_index(remaining: Sequence[Detection], existing: Sequence[Tubelet],
                         suppress_iou: float) -> Optional[int]:
    """返回第一个未被已有同类轨迹抑制的候选下标"""
    for index, candidate in enumerate(remaining):
        suppressed = False
        for tubelet in existing:
            if tubelet.class_id != candidate.class_id:
                continue
            node = tubelet.node_at(candidate.frame)
            if node is not None and iou(candidate.box, node.box) > suppress_iou:
                suppressed = True
                break
        if not suppressed:
            return index
    return None


def select_anchor(remaining: Sequence[Detection], existing: Sequence[Tubelet],
                  suppress_iou: float = 0.3) -> Optional[Detection]:
    """
    选择下一个锚点

    Args:
        remaining: 按分数降序排列的候选检测
        existing: 已生成的轨迹
        suppress_iou: 与同帧同类轨迹节点的 IOU 超过该值即被抑制

    Returns:
        Optional[Detection]: 分数最高且未被抑制的候选，全部被抑制时返回 None
    """
    index = _select_anchor_index(remaining, existing, suppress_iou)
    return remaining[index] if index is not None else None


class Tracker(ABC):
    """从锚点生成轨迹的跟踪器接口"""

    @abstractmethod
    def track(self, anchor: Detection, clip: ClipDetections,
              flows: Optional[FlowProvider]) -> Tubelet:
        """从锚点出发双向跟踪"""


class FlowSnapTracker(Tracker):
    """
    光流吸附跟踪器

    每一步用框内平均光流平移当前框；若同类检测与平移后的框 IOU ≥ snap_iou，
    吸附到 IOU 最大的检测并以其分数为置信度，否则保留平移框并按 decay 衰减置信度。
    置信度低于 stop_conf、到达片段边界或框移出画面时停止该方向。
    """

    def __init__(self, stop_conf: float = 0.1, snap_iou: float = 0.5, decay: float = 0.5):
        self.stop_conf = stop_conf
        self.snap_iou = snap_iou
        self.decay = decay

    def _best_snap(self, box: BBox, candidates: Sequence[Detection]) -> Optional[Detection]:
        best, best_key = None, None
        for det in candidates:
            overlap = iou(box, det.box)
            if overlap < self.snap_iou:
                continue
            key = (-overlap,) + score_order_key(det)
            if best_key is None or key < best_key:
                best, best_key = det, key
        return best

    def _extend(self, anchor: Detection, clip: ClipDetections,
                flows: Optional[FlowProvider], direction: int) -> List[TubeletNode]:
        nodes = []
        box, confidence, frame = anchor.box, anchor.score, anchor.frame
        while True:
            target = frame + direction
            if target < 0 or target >= clip.num_frames:
                break
            moved = clamp_box(shift_box(box, flows, frame, direction), clip.width, clip.height)
            if moved is None:
                break

            snap = self._best_snap(moved, clip.detections_at(target, anchor.class_id))
            if snap is not None:
                box, confidence, snapped = snap.box, snap.score, True
            else:
                box, confidence, snapped = moved, confidence * self.decay, False

            if confidence < self.stop_conf:
                break
            nodes.append(TubeletNode(target, box, confidence, snapped))
            frame = target
        return nodes

    def track(self, anchor: Detection, clip: ClipDetections,
              flows: Optional[FlowProvider]) -> Tubelet:
        """
        从锚点双向跟踪

        Raises:
            FlowUnavailableError: 缺少光流
        """
        if flows is None:
            raise FlowUnavailableError(f"片段 {clip.clip_id} 跟踪需要光流")
        backward = self._extend(anchor, clip, flows, -1)
        forward = self._extend(anchor, clip, flows, 1)
        nodes = list(reversed(backward))
        nodes.append(TubeletNode(anchor.frame, anchor.box, anchor.score, True))
        nodes.extend(forward)
        return Tubelet(clip.clip_id, anchor.class_id, tuple(nodes), len(backward), anchor.source_id)


def track(anchor: Detection, clip: ClipDetections, flows: Optional[FlowProvider],
          stop_conf: float = 0.1, snap_iou: float = 0.5, decay: float = 0.5) -> Tubelet:
    """用光流吸附跟踪器从锚点生成一条轨迹"""
    return FlowSnapTracker(stop_conf, snap_iou, decay).track(anchor, clip, flows)


def build_tubelets(clip: ClipDetections, flows: Optional[FlowProvider], config,
                   tracker: Optional[Tracker] = None) -> List[Tubelet]:
    """
    为片段的每个类别生成轨迹

    每个类别独立地反复 {选锚点 → 跟踪 → 移除锚点}，直到没有可用锚点
    或剩余候选分数低于 max(anchor_min_score, track_stop_conf)。
    被抑制的候选之后不会再被选中，直接移除。

    Args:
        clip: 片段检测
        flows: 光流来源
        config: PipelineConfig
        tracker: 跟踪器，默认 FlowSnapTracker

    Returns:
        List[Tubelet]: 按 (类别, 锚点分数降序) 排列的轨迹
    """
    if tracker is None:
        tracker = FlowSnapTracker(config.track_stop_conf, config.snap_iou, config.track_decay)
    floor = max(config.anchor_min_score, config.track_stop_conf)

    tubelets: List[Tubelet] = []
    for class_id in clip.classes():
        remaining = sorted((d for d in clip.detections
                            if d.class_id == class_id and d.score >= floor),
                           key=score_order_key)
        class_tubelets: List[Tubelet] = []
        while remaining:
            index = _select_anchor_index(remaining, class_tubelets, config.anchor_suppress_iou)
            if index is None:
                break
            class_tubelets.append(tracker.track(remaining[index], clip, flows))
            remaining = remaining[index + 1:]
        tubelets.extend(class_tubelets)

    logger.info(f"跟踪 片段 {clip.clip_id}: 生成 {len(tubelets)} 条轨迹, "
                f"平均长度 {sum(len(t) for t in tubelets) / max(1, len(tubelets)):.1f}")
    return tubelets
