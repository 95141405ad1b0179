"""
文件格式模块

负责所有磁盘文件的读写：
- 检测与真值：每行一条 JSON 记录（JSONL），可选的片段元数据行
- 光流：Middlebury .flo 布局（小端 float32 魔数 202021.25、int32 宽高、逐像素交错 u,v）
- 轨迹、分类器、评估报告、CorLoc 目标类别
所有解析错误都以 FormatError 报告文件、行号与字段。
"""

import hashlib
import json
import math
import os
import tempfile
import logging
from pathlib import Path
from typing import Any, Dict, Iterable, Iterator, List, Optional, Sequence, Tuple, Union

import numpy as np

from .core_model import (
    TubekitError, BBox, Detection, ClipDetections, GroundTruthRecord, Origin, OriginKind,
    clamp_box
)
from .config_manager import read_config, write_config
from .mgp import FlowField, FlowProvider, FlowCatalog
from .performance_optimizer import PerformanceCache
from .tubelet_tracker import Tubelet, TubeletNode
from .tubelet_rescoring import BayesClassifier1D
from .combination_eval import EvalReport

logger = logging.getLogger(__name__)

PathLike = Union[str, Path]

FLOW_MAGIC = 202021.25
FLOW_HEADER_BYTES = 12

ClipMeta = Tuple[int, int, int]  # (num_frames, width, height)


class FormatError(TubekitError):
    """文件格式错误，定位到文件、行号与字段"""

    def __init__(self, path: PathLike, line: Optional[int], field: str, message: str,
                 original_error: Optional[Exception] = None):
        self.path = str(path)
        self.line = line
        self.field = field
        location = f"{self.path}:{line}" if line is not None else self.path
        super().__init__(f"{location}: 字段 {field}: {message}",
                         error_code="format_error", original_error=original_error)


class FlowFormatError(FormatError):
    """光流文件格式错误"""

    def __init__(self, path: PathLike, field: str, message: str,
                 original_error: Optional[Exception] = None):
        super().__init__(path, None, field, message, original_error)


# ---------------------------------------------------------------- 通用工具

def atomic_write_bytes(path: PathLike, data: bytes) -> None:
    """先写同目录临时文件再重命名，保证输出完整"""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(prefix=f".{path.name}.", suffix=".tmp", dir=path.parent)
    try:
        with os.fdopen(fd, 'wb') as f:
            f.write(data)
        os.replace(tmp, path)
    except BaseException:
        try:
            os.unlink(tmp)
        except OSError:
            pass
        raise


def atomic_write_text(path: PathLike, text: str) -> None:
    """原子写入 UTF-8 文本"""
    atomic_write_bytes(path, text.encode('utf-8'))


def file_sha256(path: PathLike) -> str:
    """文件内容的 SHA-256 十六进制摘要"""
    digest = hashlib.sha256()
    with open(path, 'rb') as f:
        for chunk in iter(lambda: f.read(1 << 20), b''):
            digest.update(chunk)
    return digest.hexdigest()


def _iter_json_lines(path: PathLike) -> Iterator[Tuple[int, Dict[str, Any]]]:
    """逐行解析 JSON 对象，跳过空行"""
    path = Path(path)
    try:
        raw = path.read_bytes()
    except FileNotFoundError as e:
        raise FormatError(path, None, "path", "文件不存在", e)
    except OSError as e:
        raise FormatError(path, None, "path", f"无法读取: {e}", e)

    for number, line_bytes in enumerate(raw.split(b"\n"), start=1):
        try:
            line = line_bytes.decode('utf-8').strip()
        except UnicodeDecodeError as e:
            raise FormatError(path, number, "encoding", "不是有效的 UTF-8", e)
        if not line:
            continue
        try:
            record = json.loads(line)
        except json.JSONDecodeError as e:
            raise FormatError(path, number, "json", f"JSON 解析失败: {e.msg} (列 {e.colno})", e)
        except (ValueError, RecursionError) as e:
            # 超长整数或嵌套过深
            raise FormatError(path, number, "json", f"JSON 解析失败: {type(e).__name__}", e)
        if not isinstance(record, dict):
            raise FormatError(path, number, "record", "每行必须是一个 JSON 对象")
        yield number, record


def _require(record: Dict[str, Any], key: str, path: PathLike, line: int) -> Any:
    if key not in record:
        raise FormatError(path, line, key, "缺少必填字段")
    return record[key]


def _as_int(value: Any, key: str, path: PathLike, line: int, minimum: int = 0) -> int:
    if isinstance(value, bool) or not isinstance(value, int):
        raise FormatError(path, line, key, f"必须是整数: {value!r}")
    if value < minimum:
        raise FormatError(path, line, key, f"必须 ≥ {minimum}: {value}")
    return value


def _as_number(value: Any, key: str, path: PathLike, line: int) -> float:
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise FormatError(path, line, key, f"必须是数值: {value!r}")
    value = float(value)
    if not math.isfinite(value):
        raise FormatError(path, line, key, f"必须是有限数值: {value!r}")
    return value


def _as_box(value: Any, key: str, path: PathLike, line: int) -> BBox:
    if not isinstance(value, list) or len(value) != 4:
        raise FormatError(path, line, key, f"必须是 4 个数值的列表: {value!r}")
    coords = [_as_number(v, key, path, line) for v in value]
    x0, y0, x1, y1 = coords
    if not (x1 > x0 and y1 > y0):
        raise FormatError(path, line, key, f"必须满足 x1 > x0 且 y1 > y0: {coords}")
    return BBox(x0, y0, x1, y1)


def _check_keys(record: Dict[str, Any], allowed: Sequence[str], path: PathLike, line: int) -> None:
    unknown = sorted(set(record) - set(allowed))
    if unknown:
        raise FormatError(path, line, unknown[0], "未知字段")


def _check_class(class_id: int, num_classes: Optional[int], path: PathLike, line: int) -> None:
    if num_classes is not None and class_id >= num_classes:
        raise FormatError(path, line, "class", f"未知类别 {class_id} (类别数 {num_classes})")


def _parse_meta(record: Dict[str, Any], path: PathLike, line: int) -> Tuple[str, ClipMeta]:
    _check_keys(record, ("clip", "meta"), path, line)
    clip_id = _require(record, "clip", path, line)
    if not isinstance(clip_id, str) or not clip_id:
        raise FormatError(path, line, "clip", "必须是非空字符串")
    meta = record["meta"]
    if not isinstance(meta, dict):
        raise FormatError(path, line, "meta", "必须是对象")
    _check_keys(meta, ("num_frames", "width", "height"), path, line)
    values = tuple(_as_int(_require(meta, k, path, line), f"meta.{k}", path, line, minimum=1)
                   for k in ("num_frames", "width", "height"))
    return clip_id, values


def _meta_record(clip_id: str, meta: ClipMeta) -> Dict[str, Any]:
    num_frames, width, height = meta
    return {"clip": clip_id, "meta": {"num_frames": num_frames, "width": width, "height": height}}


def _dumps(record: Dict[str, Any]) -> str:
    return json.dumps(record, ensure_ascii=False, allow_nan=False)


# ---------------------------------------------------------------- 检测

_DETECTION_KEYS = ("clip", "frame", "class", "score", "bbox", "source", "origin")
_ORIGIN_KINDS = {kind.value: kind for kind in OriginKind}


def _parse_origin(value: Any, path: PathLike, line: int) -> Optional[Origin]:
    if value is None:
        return None
    if not isinstance(value, dict):
        raise FormatError(path, line, "origin", "必须是对象")
    _check_keys(value, ("kind", "frame", "offset"), path, line)
    kind = _require(value, "kind", path, line)
    if kind not in _ORIGIN_KINDS:
        raise FormatError(path, line, "origin.kind", f"未知来源类型: {kind!r}")
    frame = _as_int(_require(value, "frame", path, line), "origin.frame", path, line)
    offset = value.get("offset", 0)
    if isinstance(offset, bool) or not isinstance(offset, int):
        raise FormatError(path, line, "origin.offset", f"必须是整数: {offset!r}")
    return Origin(_ORIGIN_KINDS[kind], frame, offset)


def _parse_detection(record: Dict[str, Any], path: PathLike, line: int,
                     num_classes: Optional[int]) -> Tuple[str, Detection]:
    _check_keys(record, _DETECTION_KEYS, path, line)
    clip_id = _require(record, "clip", path, line)
    if not isinstance(clip_id, str) or not clip_id:
        raise FormatError(path, line, "clip", "必须是非空字符串")
    frame = _as_int(_require(record, "frame", path, line), "frame", path, line)
    class_id = _as_int(_require(record, "class", path, line), "class", path, line)
    _check_class(class_id, num_classes, path, line)
    score = _as_number(_require(record, "score", path, line), "score", path, line)
    box = _as_box(_require(record, "bbox", path, line), "bbox", path, line)
    source = record.get("source")
    if source is not None and not isinstance(source, str):
        raise FormatError(path, line, "source", f"必须是字符串: {source!r}")
    origin = _parse_origin(record.get("origin"), path, line)
    return clip_id, Detection(frame, class_id, score, box, source, origin)


def _derive_meta(detections: Sequence[Detection]) -> ClipMeta:
    """没有元数据行时由检测推断：帧数为最大帧号+1，画面为最大框范围向上取整"""
    num_frames = max(d.frame for d in detections) + 1
    width = max(1, math.ceil(max(d.box.x1 for d in detections)))
    height = max(1, math.ceil(max(d.box.y1 for d in detections)))
    return num_frames, width, height


def read_detections(path: PathLike, num_classes: Optional[int] = None) -> List[ClipDetections]:
    """
    读取检测文件

    Args:
        path: JSONL 文件
        num_classes: 类别数，给出时类别越界视为错误

    Returns:
        List[ClipDetections]: 按首次出现顺序排列的片段，框已裁剪到画面内

    Raises:
        FormatError: 格式错误，包含行号与字段
    """
    order: List[str] = []
    metas: Dict[str, ClipMeta] = {}
    grouped: Dict[str, List[Tuple[int, Detection]]] = {}

    for line, record in _iter_json_lines(path):
        if "meta" in record:
            clip_id, meta = _parse_meta(record, path, line)
            if clip_id in metas and metas[clip_id] != meta:
                raise FormatError(path, line, "meta", f"片段 {clip_id} 的元数据前后不一致")
            metas[clip_id] = meta
        else:
            clip_id, det = _parse_detection(record, path, line, num_classes)
            grouped.setdefault(clip_id, []).append((line, det))
        if clip_id not in order:
            order.append(clip_id)

    clips = []
    dropped = 0
    for clip_id in order:
        entries = grouped.get(clip_id, [])
        meta = metas.get(clip_id) or _derive_meta([d for _, d in entries])
        num_frames, width, height = meta
        detections = []
        for line, det in entries:
            if det.frame >= num_frames:
                raise FormatError(path, line, "frame",
                                  f"帧号 {det.frame} 超出片段 {clip_id} 的帧数 {num_frames}")
            clamped = clamp_box(det.box, width, height)
            if clamped is None:
                dropped += 1
                logger.warning(f"⚠️ {path}:{line}: 检测框 {det.box.as_list()} 在画面外，已丢弃")
                continue
            detections.append(det if clamped is det.box else det.with_box(clamped))
        clips.append(ClipDetections(clip_id, num_frames, width, height, tuple(detections)))

    logger.debug(f"读取检测 {path}: {len(clips)} 个片段, "
                 f"{sum(len(c) for c in clips)} 个检测, 丢弃 {dropped}")
    return clips


def detection_record(clip_id: str, det: Detection) -> Dict[str, Any]:
    """单个检测的 JSON 记录，字段顺序固定"""
    record: Dict[str, Any] = {
        "clip": clip_id,
        "frame": int(det.frame),
        "class": int(det.class_id),
        "score": float(det.score),
        "bbox": [float(v) for v in det.box.as_list()],
    }
    if det.source_id is not None:
        record["source"] = det.source_id
    if det.origin is not None:
        record["origin"] = {"kind": det.origin.kind.value, "frame": det.origin.frame,
                            "offset": det.origin.offset}
    return record


def format_detections(clips: Iterable[ClipDetections]) -> str:
    """检测的规范文本：每个片段先写元数据行，再按规范顺序写检测"""
    lines = []
    for clip in clips:
        lines.append(_dumps(_meta_record(clip.clip_id, (clip.num_frames, clip.width, clip.height))))
        lines.extend(_dumps(detection_record(clip.clip_id, d)) for d in clip.detections)
    return "".join(line + "\n" for line in lines)


def write_detections(clips: Iterable[ClipDetections], path: PathLike) -> None:
    """原子写入检测文件"""
    atomic_write_text(path, format_detections(clips))


# ---------------------------------------------------------------- 真值

_GT_KEYS = ("clip", "frame", "class", "track", "bbox")


def read_ground_truth(path: PathLike, num_classes: Optional[int] = None) -> List[GroundTruthRecord]:
    """
    读取真值文件

    Raises:
        FormatError: 格式错误、(片段, 帧, 轨迹) 重复或轨迹类别不一致
    """
    records: List[GroundTruthRecord] = []
    seen: Dict[Tuple[str, int, int], int] = {}
    track_class: Dict[Tuple[str, int], int] = {}
    metas: Dict[str, ClipMeta] = {}

    for line, record in _iter_json_lines(path):
        if "meta" in record:
            clip_id, meta = _parse_meta(record, path, line)
            if clip_id in metas and metas[clip_id] != meta:
                raise FormatError(path, line, "meta", f"片段 {clip_id} 的元数据前后不一致")
            metas[clip_id] = meta
            continue

        _check_keys(record, _GT_KEYS, path, line)
        clip_id = _require(record, "clip", path, line)
        if not isinstance(clip_id, str) or not clip_id:
            raise FormatError(path, line, "clip", "必须是非空字符串")
        frame = _as_int(_require(record, "frame", path, line), "frame", path, line)
        class_id = _as_int(_require(record, "class", path, line), "class", path, line)
        _check_class(class_id, num_classes, path, line)
        track_id = _as_int(_require(record, "track", path, line), "track", path, line, minimum=-2 ** 63)
        box = _as_box(_require(record, "bbox", path, line), "bbox", path, line)

        key = (clip_id, frame, track_id)
        if key in seen:
            raise FormatError(path, line, "track",
                              f"片段 {clip_id} 帧 {frame} 的轨迹 {track_id} 重复 (首次出现在第 {seen[key]} 行)")
        seen[key] = line
        previous = track_class.setdefault((clip_id, track_id), class_id)
        if previous != class_id:
            raise FormatError(path, line, "class",
                              f"片段 {clip_id} 的轨迹 {track_id} 类别从 {previous} 变为 {class_id}")
        records.append(GroundTruthRecord(clip_id, frame, class_id, track_id, box))

    for line_record in records:
        meta = metas.get(line_record.clip_id)
        if meta is not None and line_record.frame >= meta[0]:
            raise FormatError(path, seen[(line_record.clip_id, line_record.frame, line_record.track_id)],
                              "frame", f"帧号 {line_record.frame} 超出片段帧数 {meta[0]}")
    return records


def write_ground_truth(records: Iterable[GroundTruthRecord], path: PathLike,
                       clip_meta: Optional[Dict[str, ClipMeta]] = None) -> None:
    """写入真值文件，按 (片段, 帧, 轨迹) 排序；给出 clip_meta 时先写元数据行"""
    records = sorted(records, key=lambda r: (r.clip_id, r.frame, r.track_id))
    lines = []
    for clip_id in sorted(clip_meta or {}):
        lines.append(_dumps(_meta_record(clip_id, clip_meta[clip_id])))
    for r in records:
        lines.append(_dumps({"clip": r.clip_id, "frame": r.frame, "class": r.class_id,
                             "track": r.track_id, "bbox": [float(v) for v in r.box.as_list()]}))
    atomic_write_text(path, "".join(line + "\n" for line in lines))


# ---------------------------------------------------------------- 光流

def encode_flow(field: FlowField) -> bytes:
    """光流场的 .flo 字节表示"""
    header = np.array([FLOW_MAGIC], dtype='<f4').tobytes() + \
        np.array([field.width, field.height], dtype='<i4').tobytes()
    payload = np.stack([field.u, field.v], axis=-1).astype('<f4', copy=False).tobytes()
    return header + payload


def decode_flow(data: bytes, path: PathLike = "<memory>",
                expected_size: Optional[Tuple[int, int]] = None) -> FlowField:
    """
    解析 .flo 字节

    Args:
        data: 文件内容
        path: 用于错误信息的路径
        expected_size: 期望的 (宽, 高)

    Raises:
        FlowFormatError: 魔数错误、数据截断、尺寸不符或包含非有限值
    """
    if len(data) < FLOW_HEADER_BYTES:
        raise FlowFormatError(path, "header", f"文件头不完整: {len(data)} 字节")
    magic = np.frombuffer(data, dtype='<f4', count=1)[0]
    if magic != np.float32(FLOW_MAGIC):
        raise FlowFormatError(path, "magic", f"魔数错误: {float(magic)!r}")
    width, height = (int(v) for v in np.frombuffer(data, dtype='<i4', count=2, offset=4))
    if width <= 0 or height <= 0:
        raise FlowFormatError(path, "size", f"尺寸必须为正: {width}x{height}")
    if expected_size is not None and (width, height) != tuple(expected_size):
        raise FlowFormatError(path, "size",
                              f"尺寸 {width}x{height} 与片段 {expected_size[0]}x{expected_size[1]} 不符")

    expected_bytes = FLOW_HEADER_BYTES + width * height * 2 * 4
    if len(data) < expected_bytes:
        raise FlowFormatError(path, "payload", f"数据截断: 需要 {expected_bytes} 字节，实际 {len(data)}")
    if len(data) > expected_bytes:
        raise FlowFormatError(path, "payload", f"文件末尾有多余的 {len(data) - expected_bytes} 字节")

    values = np.frombuffer(data, dtype='<f4', offset=FLOW_HEADER_BYTES).reshape(height, width, 2)
    if not np.isfinite(values).all():
        raise FlowFormatError(path, "payload", "包含非有限值")
    return FlowField(values[..., 0].astype(np.float32), values[..., 1].astype(np.float32))


def read_flow(path: PathLike, expected_size: Optional[Tuple[int, int]] = None) -> FlowField:
    """读取 .flo 光流文件"""
    try:
        data = Path(path).read_bytes()
    except FileNotFoundError as e:
        raise FormatError(path, None, "path", "文件不存在", e)
    except OSError as e:
        raise FlowFormatError(path, "path", f"无法读取: {e}", e)
    return decode_flow(data, path, expected_size)


def write_flow(field: FlowField, path: PathLike) -> None:
    """写入 .flo 光流文件"""
    atomic_write_bytes(path, encode_flow(field))


def flow_path(root: PathLike, clip_id: str, frame: int, backward: bool = False) -> Path:
    """<root>/<clip>/<frame>.flo 或 .bflo"""
    return Path(root) / clip_id / f"{frame}.{'bflo' if backward else 'flo'}"


class DirectoryFlowProvider(FlowProvider):
    """按需从目录读取单个片段的光流，经缓存复用"""

    def __init__(self, root: PathLike, clip: ClipDetections, cache: PerformanceCache):
        self.root = Path(root)
        self.clip_id = clip.clip_id
        self.size = (clip.width, clip.height)
        self.cache = cache

    def _load(self, frame: int, backward: bool) -> Optional[FlowField]:
        path = flow_path(self.root, self.clip_id, frame, backward)

        def loader() -> Optional[FlowField]:
            if not path.exists():
                return None
            return read_flow(path, self.size)

        return self.cache.get_or_load((self.clip_id, frame, backward), loader)

    def forward(self, frame: int) -> Optional[FlowField]:
        return self._load(frame, False)

    def backward(self, frame: int) -> Optional[FlowField]:
        return self._load(frame, True)


class DirectoryFlowCatalog(FlowCatalog):
    """光流目录：<root>/<clip>/<frame>.flo（前向）与 <frame>.bflo（后向，可选）"""

    def __init__(self, root: PathLike, cache_size: int = 256):
        self.root = Path(root)
        if not self.root.is_dir():
            raise FormatError(self.root, None, "flow_dir", "光流目录不存在")
        self.cache = PerformanceCache(max_size=cache_size, ttl=float('inf'))

    def for_clip(self, clip: ClipDetections) -> FlowProvider:
        return DirectoryFlowProvider(self.root, clip, self.cache)


def write_flows(root: PathLike, clip: ClipDetections, provider: FlowProvider,
                include_backward: bool = True) -> List[Path]:
    """把片段所有转换的光流写入目录，返回写入的文件"""
    written = []
    for frame in range(clip.num_frames):
        field = provider.forward(frame) if frame < clip.num_frames - 1 else None
        if field is not None:
            path = flow_path(root, clip.clip_id, frame)
            write_flow(field, path)
            written.append(path)
        if include_backward and frame > 0:
            back = provider.backward(frame)
            if back is not None:
                path = flow_path(root, clip.clip_id, frame, backward=True)
                write_flow(back, path)
                written.append(path)
    return written


# ---------------------------------------------------------------- 轨迹

def tubelet_record(tubelet: Tubelet) -> Dict[str, Any]:
    record: Dict[str, Any] = {
        "clip": tubelet.clip_id,
        "class": tubelet.class_id,
        "anchor": tubelet.anchor_index,
        "nodes": [{"frame": n.frame, "bbox": [float(v) for v in n.box.as_list()],
                   "score": float(n.score), "snapped": bool(n.snapped)} for n in tubelet.nodes],
    }
    if tubelet.source_id is not None:
        record["source"] = tubelet.source_id
    if tubelet.label is not None:
        record["label"] = tubelet.label
    if tubelet.posterior is not None:
        record["posterior"] = tubelet.posterior
    return record


def write_tubelets(tubelets: Iterable[Tubelet], path: PathLike) -> None:
    """写入轨迹文件，每行一条轨迹"""
    atomic_write_text(path, "".join(_dumps(tubelet_record(t)) + "\n" for t in tubelets))


def read_tubelets(path: PathLike) -> List[Tubelet]:
    """读取轨迹文件"""
    tubelets = []
    for line, record in _iter_json_lines(path):
        _check_keys(record, ("clip", "class", "anchor", "nodes", "source", "label", "posterior"),
                    path, line)
        clip_id = _require(record, "clip", path, line)
        if not isinstance(clip_id, str) or not clip_id:
            raise FormatError(path, line, "clip", "必须是非空字符串")
        class_id = _as_int(_require(record, "class", path, line), "class", path, line)
        anchor = _as_int(_require(record, "anchor", path, line), "anchor", path, line)
        raw_nodes = _require(record, "nodes", path, line)
        if not isinstance(raw_nodes, list) or not raw_nodes:
            raise FormatError(path, line, "nodes", "必须是非空列表")

        nodes = []
        for raw in raw_nodes:
            if not isinstance(raw, dict):
                raise FormatError(path, line, "nodes", "节点必须是对象")
            _check_keys(raw, ("frame", "bbox", "score", "snapped"), path, line)
            snapped = _require(raw, "snapped", path, line)
            if not isinstance(snapped, bool):
                raise FormatError(path, line, "nodes.snapped", f"必须是布尔值: {snapped!r}")
            nodes.append(TubeletNode(
                _as_int(_require(raw, "frame", path, line), "nodes.frame", path, line),
                _as_box(_require(raw, "bbox", path, line), "nodes.bbox", path, line),
                _as_number(_require(raw, "score", path, line), "nodes.score", path, line),
                snapped))

        label = record.get("label")
        if label not in (None, "pos", "neg"):
            raise FormatError(path, line, "label", f"必须是 pos 或 neg: {label!r}")
        posterior = record.get("posterior")
        if posterior is not None:
            posterior = _as_number(posterior, "posterior", path, line)
        source = record.get("source")
        if source is not None and not isinstance(source, str):
            raise FormatError(path, line, "source", f"必须是字符串: {source!r}")
        try:
            tubelets.append(Tubelet(clip_id, class_id, tuple(nodes), anchor, source, label, posterior))
        except TubekitError as e:
            raise FormatError(path, line, "nodes", e.message, e)
    return tubelets


# ---------------------------------------------------------------- 分类器、报告、目标类别

def _read_json_object(path: PathLike) -> Dict[str, Any]:
    try:
        text = Path(path).read_text(encoding='utf-8')
    except FileNotFoundError as e:
        raise FormatError(path, None, "path", "文件不存在", e)
    except UnicodeDecodeError as e:
        raise FormatError(path, None, "encoding", "不是有效的 UTF-8", e)
    except OSError as e:
        raise FormatError(path, None, "path", f"无法读取: {e}", e)
    try:
        data = json.loads(text)
    except json.JSONDecodeError as e:
        raise FormatError(path, e.lineno, "json", f"JSON 解析失败: {e.msg}", e)
    except (ValueError, RecursionError) as e:
        raise FormatError(path, None, "json", f"JSON 解析失败: {type(e).__name__}", e)
    if not isinstance(data, dict):
        raise FormatError(path, None, "record", "必须是一个 JSON 对象")
    return data


def _write_json_object(data: Dict[str, Any], path: PathLike) -> None:
    atomic_write_text(path, json.dumps(data, indent=2, ensure_ascii=False, allow_nan=False) + "\n")


def write_classifier(classifier: BayesClassifier1D, path: PathLike) -> None:
    """分类器保存为 5 个数值的记录"""
    _write_json_object(classifier.to_dict(), path)


def read_classifier(path: PathLike) -> BayesClassifier1D:
    """读取分类器"""
    data = _read_json_object(path)
    keys = ("pos_mean", "pos_var", "neg_mean", "neg_var", "prior_pos")
    _check_keys(data, keys, path, None)
    values = {k: _as_number(_require(data, k, path, None), k, path, None) for k in keys}
    try:
        return BayesClassifier1D(**values)
    except ValueError as e:
        raise FormatError(path, None, "classifier", str(e), e)


def write_report(report: Any, path: PathLike) -> None:
    """写入评估报告（EvalReport 或 CorLocReport）"""
    _write_json_object(report.to_dict(), path)


def read_report(path: PathLike) -> EvalReport:
    """读取 mean AP 报告"""
    data = _read_json_object(path)
    try:
        return EvalReport.from_dict(data)
    except (KeyError, TypeError, ValueError, AttributeError) as e:
        raise FormatError(path, None, "report", f"报告格式错误: {e}", e)


def read_corloc_targets(path: PathLike) -> Dict[str, int]:
    """读取 {片段: 目标类别}"""
    data = _read_json_object(path)
    targets = {}
    for clip_id, class_id in data.items():
        targets[clip_id] = _as_int(class_id, clip_id, path, None)
    return targets


__all__ = [
    'FormatError', 'FlowFormatError', 'FLOW_MAGIC',
    'atomic_write_bytes', 'atomic_write_text', 'file_sha256',
    'read_detections', 'write_detections', 'format_detections', 'detection_record',
    'read_ground_truth', 'write_ground_truth',
    'encode_flow', 'decode_flow', 'read_flow', 'write_flow', 'flow_path', 'write_flows',
    'DirectoryFlowProvider', 'DirectoryFlowCatalog',
    'read_tubelets', 'write_tubelets', 'tubelet_record',
    'read_classifier', 'write_classifier', 'read_report', 'write_report', 'read_corloc_targets',
    'read_config', 'write_config', 'GroundTruthRecord',
]
