"""
轨迹重打分模块

空间最大池化、轨迹分数统计、一维高斯贝叶斯分类与 min-max 分数重映射：
正样本轨迹的分数映射到 [0.5, 1]，负样本映射到 [0, 0.5]。
"""

import math
import logging
from dataclasses import dataclass
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np
from scipy.optimize import brentq
from scipy.special import expit
from scipy.stats import norm

from .core_model import (
    TubekitError, ClipDetections, Detection, GroundTruthRecord, Origin, OriginKind,
    index_ground_truth, iou, score_order_key
)
from .tubelet_tracker import Tubelet, TubeletNode

logger = logging.getLogger(__name__)

VARIANCE_FLOOR = 1e-6
FEATURES = ("mean", "median", "top_k")


class InsufficientSamplesError(TubekitError):
    """训练样本不足"""
    pass


@dataclass(frozen=True)
class TubeletStats:
    """轨迹分数统计量"""

    mean: float
    median: float
    top_k_value: float
    k: int
    length: int

    def feature(self, name: str) -> float:
        """按名称取统计量：mean、median 或 top_k"""
        if name == "top_k":
            return self.top_k_value
        if name in ("mean", "median"):
            return getattr(self, name)
        raise ValueError(f"未知的轨迹特征: {name!r}，可选 {', '.join(FEATURES)}")


def stats(tubelet: Tubelet, k: int = 5) -> TubeletStats:
    """
    计算轨迹节点分数的统计量

    top_k 为第 k 大的分数；轨迹长度不足 k 时取最小分数。
    """
    if k < 1:
        raise ValueError(f"k 必须为正: {k}")
    scores = np.array(tubelet.scores, dtype=np.float64)
    ordered = np.sort(scores)[::-1]
    top_k = ordered[k - 1] if len(ordered) >= k else ordered[-1]
    return TubeletStats(float(scores.mean()), float(np.median(scores)), float(top_k),
                        k, len(scores))


@dataclass(frozen=True)
class BayesClassifier1D:
    """一维高斯类条件分布的贝叶斯分类器"""

    pos_mean: float
    pos_var: float
    neg_mean: float
    neg_var: float
    prior_pos: float

    def __post_init__(self):
        values = (self.pos_mean, self.pos_var, self.neg_mean, self.neg_var, self.prior_pos)
        if not all(math.isfinite(v) for v in values):
            raise ValueError(f"分类器参数必须有限: {values}")
        if self.pos_var < VARIANCE_FLOOR or self.neg_var < VARIANCE_FLOOR:
            raise ValueError(f"分类器方差不能小于 {VARIANCE_FLOOR}: {self.pos_var}, {self.neg_var}")
        if not 0.0 < self.prior_pos < 1.0:
            raise ValueError(f"正样本先验必须在 (0, 1) 内: {self.prior_pos}")

    def log_odds(self, statistic: float) -> float:
        """正负后验的对数比"""
        log_pos = math.log(self.prior_pos) + norm.logpdf(statistic, self.pos_mean, math.sqrt(self.pos_var))
        log_neg = math.log1p(-self.prior_pos) + norm.logpdf(statistic, self.neg_mean, math.sqrt(self.neg_var))
        return float(log_pos - log_neg)

    def posterior(self, statistic: float) -> float:
        """正类后验概率"""
        return float(expit(self.log_odds(statistic)))

    def decision_boundary(self) -> Optional[float]:
        """两类均值之间后验为 0.5 的位置，不存在时返回 None"""
        lo, hi = sorted((self.pos_mean, self.neg_mean))
        if lo == hi:
            return None
        f_lo, f_hi = self.log_odds(lo), self.log_odds(hi)
        if f_lo == 0.0:
            return lo
        if f_hi == 0.0:
            return hi
        if (f_lo > 0) == (f_hi > 0):
            return None
        return float(brentq(self.log_odds, lo, hi, xtol=1e-12))

    def to_dict(self) -> Dict[str, float]:
        return {
            'pos_mean': self.pos_mean,
            'pos_var': self.pos_var,
            'neg_mean': self.neg_mean,
            'neg_var': self.neg_var,
            'prior_pos': self.prior_pos,
        }

    @classmethod
    def from_dict(cls, data: Dict[str, float]) -> 'BayesClassifier1D':
        return cls(float(data['pos_mean']), float(data['pos_var']), float(data['neg_mean']),
                   float(data['neg_var']), float(data['prior_pos']))


def fit_classifier(pos_samples: Sequence[float], neg_samples: Sequence[float]) -> BayesClassifier1D:
    """
    最大似然拟合两类高斯分布

    Args:
        pos_samples: 正样本统计量
        neg_samples: 负样本统计量

    Returns:
        BayesClassifier1D: 方差下限为 1e-6，先验为正样本占比

    Raises:
        InsufficientSamplesError: 任一类少于 2 个样本
    """
    pos = np.asarray(pos_samples, dtype=np.float64)
    neg = np.asarray(neg_samples, dtype=np.float64)
    if len(pos) < 2 or len(neg) < 2:
        raise InsufficientSamplesError(
            f"每类至少需要 2 个训练样本: 正 {len(pos)}, 负 {len(neg)}",
            error_code="insufficient_samples")

    return BayesClassifier1D(
        pos_mean=float(pos.mean()),
        pos_var=max(float(pos.var()), VARIANCE_FLOOR),
        neg_mean=float(neg.mean()),
        neg_var=max(float(neg.var()), VARIANCE_FLOOR),
        prior_pos=len(pos) / (len(pos) + len(neg)),
    )


def uninformative_classifier(prior_pos: float = 0.5) -> BayesClassifier1D:
    """两类分布相同的分类器，后验处处等于先验"""
    prior = min(0.99, max(0.01, prior_pos))
    return BayesClassifier1D(0.5, 1.0, 0.5, 1.0, prior)


def classify(classifier: BayesClassifier1D, statistic: float) -> Tuple[str, float]:
    """
    贝叶斯分类

    Returns:
        Tuple[str, float]: ("pos" 或 "neg", 正类后验)；后验 ≥ 0.5 判为正
    """
    posterior = classifier.posterior(statistic)
    return ("pos" if posterior >= 0.5 else "neg"), posterior


def spatial_max_pool(tubelet: Tubelet, clip: ClipDetections, maxpool_iou: float = 0.5) -> Tubelet:
    """
    空间最大池化

    每个节点在与其框 IOU ≥ maxpool_iou 的同类检测中取分数最高者，
    仅当该分数严格高于节点分数时替换节点。
    """
    nodes = []
    changed = False
    for node in tubelet.nodes:
        best: Optional[Detection] = None
        for det in clip.detections_at(node.frame, tubelet.class_id):
            if iou(node.box, det.box) < maxpool_iou:
                continue
            if best is None or score_order_key(det) < score_order_key(best):
                best = det
        if best is not None and best.score > node.score:
            nodes.append(TubeletNode(node.frame, best.box, best.score, True))
            changed = True
        else:
            nodes.append(node)
    return tubelet.with_nodes(nodes) if changed else tubelet


def label_tubelets(tubelets: Iterable[Tubelet], gt: Iterable[GroundTruthRecord],
                   label_iou: float = 0.5, min_fraction: float = 0.5) -> List[Tubelet]:
    """
    用真值给轨迹打训练标签

    至少 min_fraction 的节点与同类真值框 IOU ≥ label_iou 的轨迹为正样本。
    """
    index = index_ground_truth(gt)
    labeled = []
    for tubelet in tubelets:
        matched = 0
        for node in tubelet.nodes:
            boxes = index.get((tubelet.clip_id, node.frame, tubelet.class_id), ())
            if any(iou(node.box, box) >= label_iou for box in boxes):
                matched += 1
        label = "pos" if matched >= min_fraction * len(tubelet) else "neg"
        labeled.append(tubelet.with_label(label))
    return labeled


def collect_training_samples(tubelets: Iterable[Tubelet], gt: Iterable[GroundTruthRecord],
                             k: int = 5, feature: str = "top_k", label_iou: float = 0.5,
                             min_fraction: float = 0.5) -> Tuple[List[float], List[float]]:
    """收集正负样本的特征值"""
    pos, neg = [], []
    for tubelet in label_tubelets(tubelets, gt, label_iou, min_fraction):
        value = stats(tubelet, k).feature(feature)
        (pos if tubelet.label == "pos" else neg).append(value)
    return pos, neg


def train_classifier(tubelets: Sequence[Tubelet], gt: Sequence[GroundTruthRecord],
                     config) -> BayesClassifier1D:
    """
    从真值训练分类器；样本不足时退化为以正样本占比为先验的无信息分类器
    """
    pos, neg = collect_training_samples(tubelets, gt, config.topk_k, config.rescore_feature,
                                        config.label_iou, config.label_min_fraction)
    try:
        classifier = fit_classifier(pos, neg)
    except InsufficientSamplesError as e:
        total = len(pos) + len(neg)
        prior = len(pos) / total if total else 0.5
        logger.warning(f"⚠️ {e.message}，使用无信息分类器 (先验 {prior:.3f})")
        return uninformative_classifier(prior)

    logger.info(f"分类器训练完成: 正样本 {len(pos)} (均值 {classifier.pos_mean:.3f}), "
                f"负样本 {len(neg)} (均值 {classifier.neg_mean:.3f})")
    return classifier


def _affine_map(score: float, lo: float, hi: float, target: Tuple[float, float]) -> float:
    t_lo, t_hi = target
    if hi == lo:
        return (t_lo + t_hi) / 2.0
    return t_lo + (score - lo) / (hi - lo) * (t_hi - t_lo)


def rescore(tubelets: Sequence[Tubelet], classifier: BayesClassifier1D, k: int = 5,
            feature: str = "top_k",
            positive_range: Tuple[float, float] = (0.5, 1.0),
            negative_range: Tuple[float, float] = (0.0, 0.5)) -> List[Tubelet]:
    """
    分类并重映射轨迹分数

    在每个 (片段, 类别, 标签) 组内把所有节点分数 min-max 映射到标签对应区间；
    组内分数全部相同时映射到区间中点。框不变。

    Returns:
        List[Tubelet]: 与输入顺序一致、带标签和后验的轨迹
    """
    labeled = []
    for tubelet in tubelets:
        label, posterior = classify(classifier, stats(tubelet, k).feature(feature))
        labeled.append(tubelet.with_label(label, posterior))

    bounds: Dict[Tuple[str, int, str], Tuple[float, float]] = {}
    for tubelet in labeled:
        key = (tubelet.clip_id, tubelet.class_id, tubelet.label)
        lo, hi = min(tubelet.scores), max(tubelet.scores)
        if key in bounds:
            lo, hi = min(lo, bounds[key][0]), max(hi, bounds[key][1])
        bounds[key] = (lo, hi)

    rescored = []
    for tubelet in labeled:
        lo, hi = bounds[(tubelet.clip_id, tubelet.class_id, tubelet.label)]
        target = positive_range if tubelet.label == "pos" else negative_range
        nodes = [TubeletNode(n.frame, n.box, _affine_map(n.score, lo, hi, target), n.snapped)
                 for n in tubelet.nodes]
        rescored.append(tubelet.with_nodes(nodes))

    positives = sum(1 for t in rescored if t.label == "pos")
    logger.debug(f"重打分完成: 正 {positives}, 负 {len(rescored) - positives}")
    return rescored


def tubelets_to_detections(tubelets: Iterable[Tubelet], clip: ClipDetections) -> ClipDetections:
    """把属于该片段的轨迹节点输出为检测，溯源记录锚点帧与偏移"""
    detections = []
    for tubelet in tubelets:
        if tubelet.clip_id != clip.clip_id:
            continue
        anchor_frame = tubelet.anchor.frame
        for node in tubelet.nodes:
            detections.append(Detection(node.frame, tubelet.class_id, node.score, node.box,
                                        tubelet.source_id,
                                        Origin(OriginKind.TUBELET, anchor_frame,
                                               node.frame - anchor_frame)))
    return clip.with_detections(detections)
