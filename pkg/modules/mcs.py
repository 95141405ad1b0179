"""
多上下文抑制模块

一个视频通常只包含极少的类别（每段视频平均约 1.134 个类别，标准差 0.356），
因此在整段视频得分排名靠前的检测中没有出现的类别，大概率是误检。
对这些低置信度类别的检测分数减去固定惩罚值，框、帧、类别保持不变。
"""

import math
import logging
from dataclasses import dataclass
from typing import FrozenSet, Tuple

from .core_model import ClipDetections

logger = logging.getLogger(__name__)

# 每段视频类别数的统计量，仅作为文档常量
CLASS_COUNT_MEAN = 1.134
CLASS_COUNT_STD = 0.356


@dataclass(frozen=True)
class HighConfidenceSet:
    """片段的高置信度类别集合"""

    clip_id: str
    classes: FrozenSet[int]
    cutoff_rank: int

    def __contains__(self, class_id: int) -> bool:
        return class_id in self.classes


def cutoff_rank(total: int, ratio: float) -> int:
    """前 ratio 比例对应的名次，至少为 1；空片段为 0"""
    if total <= 0:
        return 0
    # 先舍入再取整，避免 0.3 * 10 之类的浮点误差多算一名
    return max(1, math.ceil(round(ratio * total, 9)))


def select_high_confidence(clip: ClipDetections, ratio: float) -> HighConfidenceSet:
    """
    选出高置信度类别

    对整个片段所有检测按分数降序排名，取前 cutoff_rank 个检测出现过的类别；
    与第 cutoff_rank 名分数并列的检测全部计入。

    Args:
        clip: 片段检测
        ratio: 排名比例，(0, 1]

    Returns:
        HighConfidenceSet: 高置信度类别集合

    Raises:
        ValueError: ratio 越界
    """
    if not 0.0 < ratio <= 1.0:
        raise ValueError(f"MCS 比例必须在 (0, 1] 内: {ratio}")

    rank = cutoff_rank(len(clip.detections), ratio)
    if rank == 0:
        return HighConfidenceSet(clip.clip_id, frozenset(), 0)

    scores = sorted((d.score for d in clip.detections), reverse=True)
    cutoff_score = scores[rank - 1]
    classes = frozenset(d.class_id for d in clip.detections if d.score >= cutoff_score)
    return HighConfidenceSet(clip.clip_id, classes, rank)


def suppress(clip: ClipDetections, high: HighConfidenceSet, penalty: float) -> ClipDetections:
    """
    对低置信度类别的检测减去惩罚值

    分数允许变为负数，不做截断。

    Raises:
        ValueError: penalty 为负或高置信度集合属于其他片段
    """
    if penalty < 0:
        raise ValueError(f"MCS 惩罚值不能为负: {penalty}")
    if high.clip_id != clip.clip_id:
        raise ValueError(f"高置信度集合属于片段 {high.clip_id}，而不是 {clip.clip_id}")
    if penalty == 0:
        return clip

    return clip.with_detections(
        d if d.class_id in high.classes else d.with_score(d.score - penalty)
        for d in clip.detections
    )


def apply_mcs(clip: ClipDetections, ratio: float,
              penalty: float) -> Tuple[ClipDetections, HighConfidenceSet]:
    """对单个片段执行完整的多上下文抑制并记录统计"""
    high = select_high_confidence(clip, ratio)
    result = suppress(clip, high, penalty)
    suppressed = sum(1 for d in clip.detections if d.class_id not in high.classes) if penalty > 0 else 0
    logger.info(f"MCS 片段 {clip.clip_id}: 高置信度类别 {sorted(high.classes)}, "
                f"截断名次 {high.cutoff_rank}, 抑制 {suppressed}/{len(clip)}")
    return result, high
