"""
核心数据模型模块

提供边界框、检测记录、片段检测集合等几何基础类型，
以及 IOU、NMS、边界裁剪等所有模块共用的纯函数。
"""

import math
import logging
from dataclasses import dataclass, replace
from enum import Enum
from functools import cached_property
from typing import Dict, List, Optional, Sequence, Tuple, Iterable

import numpy as np

logger = logging.getLogger(__name__)


class TubekitError(Exception):
    """tubekit 基础异常"""

    # 命令行退出码：1 校验错误，2 数据错误，3 内部不变量错误
    exit_code = 2

    def __init__(self, message: str, error_code: Optional[str] = None,
                 original_error: Optional[Exception] = None):
        self.message = message
        self.error_code = error_code
        self.original_error = original_error
        super().__init__(self.message)


class InvalidBoxError(TubekitError):
    """边界框坐标无效"""
    pass


class DegenerateBoxError(TubekitError):
    """裁剪后边界框退化为空"""
    pass


class MixedFrameError(TubekitError):
    """NMS 输入包含多个帧"""
    pass


class InvariantViolationError(TubekitError):
    """内部不变量被破坏"""

    exit_code = 3


@dataclass(frozen=True)
class BBox:
    """轴对齐边界框，(x0, y0) 含，(x1, y1) 不含"""

    x0: float
    y0: float
    x1: float
    y1: float

    def __post_init__(self):
        coords = (self.x0, self.y0, self.x1, self.y1)
        if not all(math.isfinite(c) for c in coords):
            raise InvalidBoxError(f"边界框坐标必须有限: {coords}")
        if not (self.x1 > self.x0 and self.y1 > self.y0):
            raise InvalidBoxError(f"边界框必须满足 x1 > x0 且 y1 > y0: {coords}")

    @property
    def width(self) -> float:
        return self.x1 - self.x0

    @property
    def height(self) -> float:
        return self.y1 - self.y0

    @property
    def area(self) -> float:
        return (self.x1 - self.x0) * (self.y1 - self.y0)

    @property
    def center(self) -> Tuple[float, float]:
        return (self.x0 + self.x1) / 2.0, (self.y0 + self.y1) / 2.0

    def shift(self, du: float, dv: float) -> 'BBox':
        """按位移向量平移"""
        return BBox(self.x0 + du, self.y0 + dv, self.x1 + du, self.y1 + dv)

    def lerp(self, other: 'BBox', alpha: float) -> 'BBox':
        """
        与另一个框做逐坐标线性插值

        Args:
            other: 目标框
            alpha: 插值系数，0 返回自身，1 返回 other
        """
        beta = 1.0 - alpha
        return BBox(beta * self.x0 + alpha * other.x0,
                    beta * self.y0 + alpha * other.y0,
                    beta * self.x1 + alpha * other.x1,
                    beta * self.y1 + alpha * other.y1)

    def as_list(self) -> List[float]:
        return [self.x0, self.y0, self.x1, self.y1]

    @classmethod
    def from_sequence(cls, values: Sequence[float]) -> 'BBox':
        x0, y0, x1, y1 = (float(v) for v in values)
        return cls(x0, y0, x1, y1)


class OriginKind(Enum):
    """派生检测的来源类型"""
    PROPAGATED = "propagated"
    INTERPOLATED = "interpolated"
    HELD = "held"
    TUBELET = "tubelet"


@dataclass(frozen=True)
class Origin:
    """派生检测的溯源信息：来源帧与偏移"""

    kind: OriginKind
    frame: int
    offset: int = 0

    def key(self) -> Tuple[str, int, int]:
        return self.kind.value, self.frame, self.offset


@dataclass(frozen=True)
class Detection:
    """单帧上的一个带类别和分数的检测框 (f_i, c_i, s_i, b_i)"""

    frame: int
    class_id: int
    score: float
    box: BBox
    source_id: Optional[str] = None
    origin: Optional[Origin] = None

    def __post_init__(self):
        if isinstance(self.frame, bool) or not isinstance(self.frame, (int, np.integer)) or self.frame < 0:
            raise InvalidBoxError(f"帧号必须是非负整数: {self.frame!r}")
        if isinstance(self.class_id, bool) or not isinstance(self.class_id, (int, np.integer)) or self.class_id < 0:
            raise InvalidBoxError(f"类别必须是非负整数: {self.class_id!r}")
        if not math.isfinite(self.score):
            raise InvalidBoxError(f"检测分数必须有限: {self.score!r}")

    @property
    def is_derived(self) -> bool:
        """是否由传播、插值或轨迹生成"""
        return self.origin is not None

    def with_score(self, score: float) -> 'Detection':
        return replace(self, score=float(score))

    def with_box(self, box: BBox) -> 'Detection':
        return replace(self, box=box)


def canonical_key(det: Detection) -> tuple:
    """规范排序键：(帧, 类别, -分数) 之后用坐标与来源消除并列"""
    origin_key = det.origin.key() if det.origin is not None else ("", -1, 0)
    return (det.frame, det.class_id, -det.score,
            det.box.x0, det.box.y0, det.box.x1, det.box.y1,
            det.source_id or "", origin_key)


def score_order_key(det: Detection) -> tuple:
    """NMS 排序键：分数降序，并列按 (类别, 帧, x0, y0) 字典序"""
    return (-det.score, det.class_id, det.frame, det.box.x0, det.box.y0)


@dataclass(frozen=True)
class ClipDetections:
    """一个视频片段的全部检测，按帧分组排序"""

    clip_id: str
    num_frames: int
    width: int
    height: int
    detections: Tuple[Detection, ...] = ()

    def __post_init__(self):
        if self.num_frames <= 0 or self.width <= 0 or self.height <= 0:
            raise InvalidBoxError(
                f"片段 {self.clip_id} 元数据无效: frames={self.num_frames}, "
                f"size={self.width}x{self.height}")
        ordered = tuple(sorted(self.detections, key=canonical_key))
        for det in ordered:
            if det.frame >= self.num_frames:
                raise InvalidBoxError(
                    f"片段 {self.clip_id} 检测帧号越界: {det.frame} >= {self.num_frames}")
        object.__setattr__(self, 'detections', ordered)

    def __len__(self) -> int:
        return len(self.detections)

    @cached_property
    def _index(self) -> Dict[Tuple[int, int], List[Detection]]:
        index: Dict[Tuple[int, int], List[Detection]] = {}
        for det in self.detections:
            index.setdefault((det.frame, det.class_id), []).append(det)
        return index

    def frames(self) -> Dict[int, List[Detection]]:
        """按帧分组"""
        grouped: Dict[int, List[Detection]] = {}
        for det in self.detections:
            grouped.setdefault(det.frame, []).append(det)
        return grouped

    def detections_at(self, frame: int, class_id: Optional[int] = None) -> List[Detection]:
        """获取某帧（可选某类别）的检测"""
        if class_id is not None:
            return list(self._index.get((frame, class_id), ()))
        return [d for d in self.detections if d.frame == frame]

    def classes(self) -> List[int]:
        return sorted({d.class_id for d in self.detections})

    def with_detections(self, detections: Iterable[Detection]) -> 'ClipDetections':
        """保留元数据，替换检测列表"""
        return ClipDetections(self.clip_id, self.num_frames, self.width, self.height,
                              tuple(detections))


@dataclass(frozen=True)
class GroundTruthRecord:
    """一条真值标注：片段、帧、类别、轨迹 ID 与框"""

    clip_id: str
    frame: int
    class_id: int
    track_id: int
    box: BBox


def index_ground_truth(gt: Iterable[GroundTruthRecord]) -> Dict[Tuple[str, int, int], List[BBox]]:
    """按 (片段, 帧, 类别) 分组真值框"""
    index: Dict[Tuple[str, int, int], List[BBox]] = {}
    for record in gt:
        index.setdefault((record.clip_id, record.frame, record.class_id), []).append(record.box)
    return index


def iou(a: BBox, b: BBox) -> float:
    """交并比"""
    iw = min(a.x1, b.x1) - max(a.x0, b.x0)
    ih = min(a.y1, b.y1) - max(a.y0, b.y0)
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    union = a.area + b.area - inter
    return inter / union


def boxes_to_array(boxes: Sequence[BBox]) -> np.ndarray:
    """转换为 (N, 4) float64 数组"""
    if not boxes:
        return np.zeros((0, 4), dtype=np.float64)
    return np.array([b.as_list() for b in boxes], dtype=np.float64)


def iou_against(box: BBox, others: np.ndarray) -> np.ndarray:
    """
    一个框与一组框的 IOU（向量化，运算顺序与 iou() 一致）

    Args:
        box: 参考框
        others: (N, 4) 数组

    Returns:
        np.ndarray: (N,) IOU
    """
    if others.shape[0] == 0:
        return np.zeros(0, dtype=np.float64)
    iw = np.minimum(box.x1, others[:, 2]) - np.maximum(box.x0, others[:, 0])
    ih = np.minimum(box.y1, others[:, 3]) - np.maximum(box.y0, others[:, 1])
    valid = (iw > 0) & (ih > 0)
    inter = np.where(valid, iw * ih, 0.0)
    areas = (others[:, 2] - others[:, 0]) * (others[:, 3] - others[:, 1])
    union = box.area + areas - inter
    return np.where(valid, inter / union, 0.0)


def nms(dets: Sequence[Detection], iou_thresh: float) -> List[Detection]:
    """
    按类别贪心非极大值抑制

    Args:
        dets: 同一帧的检测
        iou_thresh: 抑制阈值，(0, 1]

    Returns:
        List[Detection]: 保留的检测（原对象），按分数降序

    Raises:
        MixedFrameError: 输入跨多个帧
        ValueError: 阈值越界
    """
    if not 0.0 < iou_thresh <= 1.0:
        raise ValueError(f"NMS 阈值必须在 (0, 1] 内: {iou_thresh}")
    if not dets:
        return []
    frames = {d.frame for d in dets}
    if len(frames) > 1:
        raise MixedFrameError(f"NMS 输入必须属于同一帧，实际帧: {sorted(frames)}")

    ordered = sorted(dets, key=score_order_key)
    by_class: Dict[int, List[int]] = {}
    for pos, det in enumerate(ordered):
        by_class.setdefault(det.class_id, []).append(pos)

    kept_positions: List[int] = []
    for positions in by_class.values():
        boxes = boxes_to_array([ordered[p].box for p in positions])
        order = np.arange(len(positions))
        while order.size > 0:
            i = order[0]
            kept_positions.append(positions[i])
            rest = order[1:]
            overlaps = iou_against(ordered[positions[i]].box, boxes[rest])
            order = rest[overlaps <= iou_thresh]

    return [ordered[p] for p in sorted(kept_positions)]


def clamp_box(box: BBox, width: float, height: float) -> Optional[BBox]:
    """裁剪到画面矩形，退化时返回 None"""
    x0, y0 = max(0.0, box.x0), max(0.0, box.y0)
    x1, y1 = min(float(width), box.x1), min(float(height), box.y1)
    if x1 <= x0 or y1 <= y0:
        return None
    if (x0, y0, x1, y1) == (box.x0, box.y0, box.x1, box.y1):
        return box
    return BBox(x0, y0, x1, y1)


def clamp_to_frame(d: Detection, width: int, height: int) -> Detection:
    """
    将检测框裁剪到画面范围

    Raises:
        ValueError: 画面尺寸非正
        DegenerateBoxError: 裁剪后为空
    """
    if width <= 0 or height <= 0:
        raise ValueError(f"画面尺寸必须为正: {width}x{height}")
    clamped = clamp_box(d.box, width, height)
    if clamped is None:
        raise DegenerateBoxError(
            f"帧 {d.frame} 的检测框裁剪后退化: {d.box.as_list()} ∩ [0,{width}]x[0,{height}]")
    if clamped is d.box:
        return d
    return d.with_box(clamped)
