"""
运动引导传播模块

沿框内平均光流把检测复制到相邻帧（motion_guided），或原地复制（duplicate），
并提供跳帧检测的插值补全。光流通过 FlowProvider 按需获取。
"""

import math
import logging
from abc import ABC, abstractmethod
from dataclasses import dataclass
from enum import Enum
from typing import Dict, List, Optional, Tuple

import numpy as np

from .core_model import (
    TubekitError, BBox, Detection, ClipDetections, Origin, OriginKind,
    iou, nms, clamp_box
)

logger = logging.getLogger(__name__)


class FlowUnavailableError(TubekitError):
    """缺少所需的光流"""
    pass


class EmptyFlowRegionError(TubekitError):
    """框与画面无交集，无法计算平均光流"""
    pass


class FrameStrideError(TubekitError):
    """检测出现在非采样帧上"""
    pass


class PropagationMode(Enum):
    """传播方式"""
    MOTION_GUIDED = "motion_guided"
    DUPLICATE = "duplicate"


@dataclass(frozen=True)
class PropagationPlan:
    """传播计划：奇数时间窗口与传播方式"""

    window: int = 7
    mode: PropagationMode = PropagationMode.MOTION_GUIDED

    def __post_init__(self):
        if isinstance(self.window, bool) or not isinstance(self.window, int) \
                or self.window < 1 or self.window % 2 == 0:
            raise ValueError(f"传播窗口必须是不小于1的奇数: {self.window!r}")
        if not isinstance(self.mode, PropagationMode):
            object.__setattr__(self, 'mode', PropagationMode(self.mode))

    @property
    def reach(self) -> int:
        """单侧传播帧数"""
        return (self.window - 1) // 2


@dataclass(frozen=True, eq=False)
class FlowField:
    """
    稠密光流场（帧 t → t+1）

    u, v 为 (height, width) 的 float32 数组，构造后只读。
    """

    u: np.ndarray
    v: np.ndarray

    def __post_init__(self):
        u = np.array(self.u, dtype=np.float32, order='C')
        v = np.array(self.v, dtype=np.float32, order='C')
        if u.ndim != 2 or u.shape != v.shape:
            raise ValueError(f"光流分量形状不一致: u{u.shape} v{v.shape}")
        if u.shape[0] == 0 or u.shape[1] == 0:
            raise ValueError(f"光流尺寸必须为正: {u.shape}")
        if not (np.isfinite(u).all() and np.isfinite(v).all()):
            raise ValueError("光流包含非有限值")
        u.flags.writeable = False
        v.flags.writeable = False
        object.__setattr__(self, 'u', u)
        object.__setattr__(self, 'v', v)

    @property
    def width(self) -> int:
        return self.u.shape[1]

    @property
    def height(self) -> int:
        return self.u.shape[0]

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, FlowField):
            return NotImplemented
        return (self.u.shape == other.u.shape
                and self.u.tobytes() == other.u.tobytes()
                and self.v.tobytes() == other.v.tobytes())

    __hash__ = None

    @classmethod
    def zeros(cls, width: int, height: int) -> 'FlowField':
        return cls(np.zeros((height, width), np.float32), np.zeros((height, width), np.float32))

    @classmethod
    def uniform(cls, width: int, height: int, du: float, dv: float) -> 'FlowField':
        return cls(np.full((height, width), du, np.float32), np.full((height, width), dv, np.float32))

    def negated(self) -> 'FlowField':
        return FlowField(-self.u, -self.v)


def pixel_span(lo: float, hi: float, size: int) -> Tuple[int, int]:
    """像素中心 i+0.5 落在 [lo, hi) 内的下标区间 [start, stop)"""
    start = max(0, math.ceil(lo - 0.5))
    stop = min(size, math.ceil(hi - 0.5))
    return start, stop


def mean_flow(field: FlowField, box: BBox) -> Tuple[float, float]:
    """
    框内平均光流

    对 box∩画面 内所有像素中心取 (u, v) 的算术平均。交集非空但不含任何
    像素中心时，取交集中心所在像素的光流。

    Args:
        field: 光流场
        box: 边界框

    Returns:
        Tuple[float, float]: (du, dv)

    Raises:
        EmptyFlowRegionError: 框与画面无交集
    """
    x0, y0 = max(0.0, box.x0), max(0.0, box.y0)
    x1, y1 = min(float(field.width), box.x1), min(float(field.height), box.y1)
    if x1 <= x0 or y1 <= y0:
        raise EmptyFlowRegionError(
            f"边界框 {box.as_list()} 与 {field.width}x{field.height} 画面无交集")

    c0, c1 = pixel_span(x0, x1, field.width)
    r0, r1 = pixel_span(y0, y1, field.height)
    if c1 <= c0:
        c0 = min(field.width - 1, int(math.floor((x0 + x1) / 2.0)))
        c1 = c0 + 1
    if r1 <= r0:
        r0 = min(field.height - 1, int(math.floor((y0 + y1) / 2.0)))
        r1 = r0 + 1

    du = field.u[r0:r1, c0:c1].mean(dtype=np.float64)
    dv = field.v[r0:r1, c0:c1].mean(dtype=np.float64)
    return float(du), float(dv)


class FlowProvider(ABC):
    """单个片段的光流来源"""

    @abstractmethod
    def forward(self, frame: int) -> Optional[FlowField]:
        """帧 frame → frame+1 的光流，缺失返回 None"""

    def backward(self, frame: int) -> Optional[FlowField]:
        """帧 frame → frame-1 的光流，缺失返回 None"""
        return None


class FlowCatalog(ABC):
    """按片段提供 FlowProvider"""

    @abstractmethod
    def for_clip(self, clip: ClipDetections) -> FlowProvider:
        """获取片段的光流来源"""


class InMemoryFlowProvider(FlowProvider):
    """内存中的光流字典"""

    def __init__(self, forward: Optional[Dict[int, FlowField]] = None,
                 backward: Optional[Dict[int, FlowField]] = None):
        self._forward = dict(forward or {})
        self._backward = dict(backward or {})

    def forward(self, frame: int) -> Optional[FlowField]:
        return self._forward.get(frame)

    def backward(self, frame: int) -> Optional[FlowField]:
        return self._backward.get(frame)


class ZeroFlowProvider(FlowProvider):
    """处处为零的光流，适用于静态场景"""

    def __init__(self, width: int, height: int, num_frames: Optional[int] = None):
        self.num_frames = num_frames
        self._field = FlowField.zeros(width, height)

    def forward(self, frame: int) -> Optional[FlowField]:
        if self.num_frames is not None and frame >= self.num_frames - 1:
            return None
        return self._field


class DictFlowCatalog(FlowCatalog):
    """片段 ID → FlowProvider 的映射"""

    def __init__(self, providers: Dict[str, FlowProvider]):
        self.providers = dict(providers)

    def for_clip(self, clip: ClipDetections) -> FlowProvider:
        provider = self.providers.get(clip.clip_id)
        if provider is None:
            raise FlowUnavailableError(f"片段 {clip.clip_id} 没有光流数据")
        return provider


class ZeroFlowCatalog(FlowCatalog):
    """所有片段都使用零光流"""

    def for_clip(self, clip: ClipDetections) -> FlowProvider:
        return ZeroFlowProvider(clip.width, clip.height, clip.num_frames)


def step_displacement(provider: FlowProvider, frame: int, box: BBox,
                      direction: int) -> Tuple[float, float]:
    """
    单步位移：从 frame 出发向 direction (+1/-1) 移动一帧

    后向优先使用后向光流文件；否则取源帧前向光流的平均值取反，
    源帧是最后一帧时退而使用前一转换的前向光流。

    Raises:
        FlowUnavailableError: 缺少所需光流
    """
    if direction == 1:
        field = provider.forward(frame)
        if field is None:
            raise FlowUnavailableError(f"缺少帧 {frame}→{frame + 1} 的前向光流")
        return mean_flow(field, box)

    if direction != -1:
        raise ValueError(f"方向必须是 +1 或 -1: {direction}")

    backward = provider.backward(frame)
    if backward is not None:
        return mean_flow(backward, box)

    field = provider.forward(frame)
    if field is None and frame > 0:
        field = provider.forward(frame - 1)
    if field is None:
        raise FlowUnavailableError(f"缺少帧 {frame}→{frame - 1} 的后向光流及可替代的前向光流")
    du, dv = mean_flow(field, box)
    return -du, -dv


def shift_box(box: BBox, provider: Optional[FlowProvider], frame: int, direction: int,
              mode: PropagationMode = PropagationMode.MOTION_GUIDED) -> BBox:
    """
    把 frame 上的框移动到 frame+direction（不裁剪）

    duplicate 模式下原样返回。
    """
    if mode is PropagationMode.DUPLICATE:
        return box
    if provider is None:
        raise FlowUnavailableError("motion_guided 模式需要光流")
    du, dv = step_displacement(provider, frame, box, direction)
    return box.shift(du, dv)


@dataclass
class PropagationStats:
    """单个片段的传播统计"""

    clip_id: str
    originals: int = 0
    propagated: int = 0
    dropped_degenerate: int = 0
    suppressed: int = 0


def _propagate_detection(det: Detection, clip: ClipDetections,
                         provider: Optional[FlowProvider], plan: PropagationPlan,
                         stats: PropagationStats) -> List[Detection]:
    copies = []
    for direction in (1, -1):
        box = det.box
        frame = det.frame
        for offset in range(1, plan.reach + 1):
            target = det.frame + direction * offset
            if target < 0 or target >= clip.num_frames:
                break
            box = shift_box(box, provider, frame, direction, plan.mode)
            frame = target
            clamped = clamp_box(box, clip.width, clip.height)
            if clamped is None:
                stats.dropped_degenerate += 1
                break
            copies.append(Detection(target, det.class_id, det.score, clamped, det.source_id,
                                    Origin(OriginKind.PROPAGATED, det.frame, direction * offset)))
    return copies


def propagate_clip(clip: ClipDetections, flows: Optional[FlowProvider],
                   plan: PropagationPlan,
                   nms_iou: float = 0.5) -> Tuple[ClipDetections, PropagationStats]:
    """
    对单个片段执行传播并逐帧 NMS

    只有非传播得到的检测会继续传播。

    Args:
        clip: 片段检测
        flows: 光流来源，duplicate 模式可为 None
        plan: 传播计划
        nms_iou: 逐帧 NMS 阈值

    Returns:
        Tuple[ClipDetections, PropagationStats]: 输出片段与统计

    Raises:
        FlowUnavailableError: motion_guided 模式缺少光流
    """
    stats = PropagationStats(clip.clip_id)
    per_frame: Dict[int, List[Detection]] = {}
    for det in clip.detections:
        per_frame.setdefault(det.frame, []).append(det)

    copies: List[Detection] = []
    for det in clip.detections:
        if det.origin is not None and det.origin.kind is OriginKind.PROPAGATED:
            continue
        stats.originals += 1
        copies.extend(_propagate_detection(det, clip, flows, plan, stats))
    stats.propagated = len(copies)

    copies.sort(key=lambda d: (d.origin.frame, d.origin.offset, d.class_id, -d.score))
    for copy in copies:
        per_frame.setdefault(copy.frame, []).append(copy)

    kept: List[Detection] = []
    total = 0
    for frame in sorted(per_frame):
        dets = per_frame[frame]
        total += len(dets)
        kept.extend(nms(dets, nms_iou))
    stats.suppressed = total - len(kept)

    logger.info(f"MGP 片段 {clip.clip_id}: 原始 {stats.originals}, 传播 {stats.propagated}, "
                f"退化丢弃 {stats.dropped_degenerate}, NMS 抑制 {stats.suppressed}")
    return clip.with_detections(kept), stats


def propagate(clip: ClipDetections, flows: Optional[FlowProvider], plan: PropagationPlan,
              nms_iou: float = 0.5) -> ClipDetections:
    """运动引导传播，返回传播并去重后的片段"""
    result, _ = propagate_clip(clip, flows, plan, nms_iou)
    return result


def _match_pairs(first: List[Detection], second: List[Detection],
                 match_iou: float) -> List[Tuple[int, int]]:
    """按 IOU 降序贪心一对一匹配，要求 IOU > match_iou"""
    candidates = []
    for i, a in enumerate(first):
        for j, b in enumerate(second):
            overlap = iou(a.box, b.box)
            if overlap > match_iou:
                candidates.append((-overlap, i, j))
    candidates.sort()

    used_first, used_second = set(), set()
    pairs = []
    for _, i, j in candidates:
        if i in used_first or j in used_second:
            continue
        used_first.add(i)
        used_second.add(j)
        pairs.append((i, j))
    return pairs


def _held(det: Detection, frame: int) -> Detection:
    return Detection(frame, det.class_id, det.score, det.box, det.source_id,
                     Origin(OriginKind.HELD, det.frame, frame - det.frame))


def interpolate_stride(clip: ClipDetections, stride: int, match_iou: float = 0.5) -> ClipDetections:
    """
    跳帧检测的插值补全

    相邻采样帧之间同类别、IOU > match_iou 的框对逐坐标线性插值（分数同样插值）；
    未匹配的框保持不动复制到中点为止。最后一个采样帧之后的尾帧复制该帧检测。

    Args:
        clip: 只在 frame % stride == 0 的帧上有检测的片段
        stride: 采样步长
        match_iou: 匹配阈值

    Raises:
        ValueError: stride < 1
        FrameStrideError: 存在非采样帧上的检测
    """
    if isinstance(stride, bool) or not isinstance(stride, int) or stride < 1:
        raise ValueError(f"采样步长必须是正整数: {stride!r}")
    if stride == 1:
        return clip

    off_grid = sorted({d.frame for d in clip.detections if d.frame % stride != 0})
    if off_grid:
        raise FrameStrideError(
            f"片段 {clip.clip_id} 在非采样帧上有检测 (stride={stride}): {off_grid[:5]}")

    frames = clip.frames()
    sampled = list(range(0, clip.num_frames, stride))
    generated: List[Detection] = []

    for f0, f1 in zip(sampled, sampled[1:]):
        dets0 = frames.get(f0, [])
        dets1 = frames.get(f1, [])
        for class_id in sorted({d.class_id for d in dets0} | {d.class_id for d in dets1}):
            first = [d for d in dets0 if d.class_id == class_id]
            second = [d for d in dets1 if d.class_id == class_id]
            pairs = _match_pairs(first, second, match_iou)
            matched_first = {i for i, _ in pairs}
            matched_second = {j for _, j in pairs}

            for t in range(f0 + 1, f1):
                alpha = (t - f0) / stride
                for i, j in pairs:
                    a, b = first[i], second[j]
                    score = (1.0 - alpha) * a.score + alpha * b.score
                    generated.append(Detection(t, class_id, score, a.box.lerp(b.box, alpha),
                                               a.source_id,
                                               Origin(OriginKind.INTERPOLATED, f0, t - f0)))
                if alpha <= 0.5:
                    generated.extend(_held(first[i], t) for i in range(len(first))
                                     if i not in matched_first)
                if alpha >= 0.5:
                    generated.extend(_held(second[j], t) for j in range(len(second))
                                     if j not in matched_second)

    last = sampled[-1]
    for t in range(last + 1, clip.num_frames):
        generated.extend(_held(d, t) for d in frames.get(last, []))

    logger.debug(f"片段 {clip.clip_id} 插值补全 {len(generated)} 个检测 (stride={stride})")
    return clip.with_detections(clip.detections + tuple(generated))
