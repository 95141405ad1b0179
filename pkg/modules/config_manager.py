"""
配置文件管理模块

负责流水线配置的读取、写入与校验。配置文件为 YAML（JSON 作为其子集同样可读），
缺失的键取默认值，未知的键视为错误以便发现拼写问题。
"""

import json
import yaml
import logging
from dataclasses import dataclass, field, asdict, fields
from typing import Dict, Any, Optional, Union, List, Tuple
from pathlib import Path

from .core_model import TubekitError

logger = logging.getLogger(__name__)


class ConfigValidationError(TubekitError):
    """配置校验失败"""

    exit_code = 1

    def __init__(self, message: str, errors: Optional[List[str]] = None,
                 original_error: Optional[Exception] = None):
        self.errors = list(errors or [])
        super().__init__(message, error_code="config_invalid", original_error=original_error)


class ConfigManager:
    """配置文件管理器"""

    def __init__(self, config_path: Optional[Union[str, Path]] = None):
        """
        初始化配置管理器

        Args:
            config_path: 配置文件路径，None 表示只在内存中组装配置
        """
        self.config_path = Path(config_path) if config_path is not None else None
        self.config_data: Dict[str, Any] = {}

    def load_config(self) -> Dict[str, Any]:
        """
        加载配置文件

        Returns:
            配置数据字典

        Raises:
            yaml.YAMLError: YAML格式错误
        """
        if self.config_path is None:
            return self.config_data
        try:
            if not self.config_path.exists():
                logger.warning(f"配置文件不存在: {self.config_path}")
                return {}

            with open(self.config_path, 'r', encoding='utf-8') as f:
                self.config_data = yaml.safe_load(f) or {}

            logger.info(f"成功加载配置文件: {self.config_path}")
            return self.config_data

        except yaml.YAMLError as e:
            logger.error(f"YAML格式错误: {e}")
            raise
        except Exception as e:
            logger.error(f"加载配置文件失败: {e}")
            raise

    def save_config(self, config_data: Optional[Dict[str, Any]] = None) -> None:
        """
        保存配置到文件，.json 路径写 JSON，其余写 YAML

        Args:
            config_data: 要保存的配置数据，如果为None则保存当前的config_data
        """
        if self.config_path is None:
            raise ValueError("未指定配置文件路径")
        data_to_save = config_data if config_data is not None else self.config_data
        self.config_path.parent.mkdir(parents=True, exist_ok=True)

        with open(self.config_path, 'w', encoding='utf-8') as f:
            if self.config_path.suffix.lower() == '.json':
                json.dump(data_to_save, f, indent=2, ensure_ascii=False)
                f.write('\n')
            else:
                yaml.dump(data_to_save, f, default_flow_style=False,
                          allow_unicode=True, indent=2, sort_keys=False)

        logger.info(f"成功保存配置文件: {self.config_path}")

        if config_data is not None:
            self.config_data = config_data

    def get(self, key: str, default: Any = None) -> Any:
        """
        获取配置项

        Args:
            key: 配置项键名，支持点号分隔的嵌套键（如 'logging.level'）
            default: 默认值
        """
        current = self.config_data
        try:
            for k in key.split('.'):
                current = current[k]
            return current
        except (KeyError, TypeError):
            return default

    def set(self, key: str, value: Any) -> None:
        """设置配置项，支持点号分隔的嵌套键"""
        keys = key.split('.')
        current = self.config_data
        for k in keys[:-1]:
            if k not in current:
                current[k] = {}
            current = current[k]
        current[keys[-1]] = value

    def apply_overrides(self, overrides: Dict[str, Any]) -> None:
        """
        按点号分隔的键覆盖配置项，如 {'logging.level': 'DEBUG'}

        Raises:
            ConfigValidationError: 配置不是对象，或键路径经过非对象的值
        """
        for key, value in overrides.items():
            if not isinstance(self.config_data, dict):
                raise ConfigValidationError("配置必须是一个对象",
                                            [f"实际类型: {type(self.config_data).__name__}"])
            previous = self.get(key)
            try:
                self.set(key, value)
            except TypeError as e:
                raise ConfigValidationError(f"无法覆盖配置项 {key}: 路径上存在非对象的值",
                                            [f"覆盖项: {key}"], e)
            logger.debug(f"配置覆盖 {key}: {previous!r} -> {value!r}")


def parse_overrides(items: Optional[List[str]]) -> Dict[str, Any]:
    """
    解析命令行的 KEY=VALUE 覆盖项，值按 YAML 解析（0.3 为浮点数，[0.5, 1.0] 为列表）

    Raises:
        ConfigValidationError: 缺少 '='、键为空或值无法解析
    """
    overrides: Dict[str, Any] = {}
    for item in items or ():
        key, sep, text = item.partition('=')
        key = key.strip()
        if not sep or not key:
            raise ConfigValidationError(f"覆盖项格式应为 KEY=VALUE: {item}", [item])
        try:
            overrides[key] = yaml.safe_load(text)
        except yaml.YAMLError as e:
            raise ConfigValidationError(f"覆盖项的值无法解析: {item}", [str(e)], e)
    return overrides


@dataclass
class LoggingConfig:
    """日志配置"""

    level: str = "INFO"
    file: Optional[str] = None
    max_size: int = 10 * 1024 * 1024
    backup_count: int = 5


_LOG_LEVELS = ("DEBUG", "INFO", "WARNING", "ERROR", "CRITICAL")


@dataclass
class PipelineConfig:
    """流水线配置，所有阈值与超参数"""

    # 多上下文抑制
    mcs_ratio: float = 0.0003
    mcs_penalty: float = 0.4

    # 运动引导传播
    mgp_window: int = 7
    mgp_mode: str = "motion_guided"
    nms_iou: float = 0.5
    frame_stride: int = 1

    # 高置信度跟踪
    track_stop_conf: float = 0.1
    track_decay: float = 0.5
    anchor_min_score: float = 0.5
    anchor_suppress_iou: float = 0.3
    snap_iou: float = 0.5

    # 轨迹重打分
    maxpool_iou: float = 0.5
    topk_k: int = 5
    rescore_feature: str = "top_k"
    positive_range: Tuple[float, float] = (0.5, 1.0)
    negative_range: Tuple[float, float] = (0.0, 0.5)
    label_iou: float = 0.5
    label_min_fraction: float = 0.5

    # 模型融合与评估
    minmax_scope: str = "global"
    matching_iou: float = 0.5
    ap_method: str = "all_points"
    corloc_iou: float = 0.5
    greedy_epsilon: float = 0.001

    num_classes: int = 30
    logging: LoggingConfig = field(default_factory=LoggingConfig)

    @classmethod
    def from_mapping(cls, data: Dict[str, Any]) -> 'PipelineConfig':
        """
        从字典构造配置

        Raises:
            ConfigValidationError: 未知键、类型错误或校验失败
        """
        if not isinstance(data, dict):
            raise ConfigValidationError("配置必须是一个对象", [f"实际类型: {type(data).__name__}"])

        known = {f.name for f in fields(cls)}
        unknown = sorted(set(data) - known)
        if unknown:
            raise ConfigValidationError(f"未知的配置项: {', '.join(unknown)}",
                                        [f"未知的配置项: {k}" for k in unknown])

        values = dict(data)
        try:
            if 'logging' in values:
                log_data = values['logging'] or {}
                if not isinstance(log_data, dict):
                    raise TypeError("logging 必须是对象")
                log_unknown = sorted(set(log_data) - {f.name for f in fields(LoggingConfig)})
                if log_unknown:
                    raise ConfigValidationError(
                        f"未知的日志配置项: {', '.join(log_unknown)}",
                        [f"未知的日志配置项: logging.{k}" for k in log_unknown])
                values['logging'] = LoggingConfig(**log_data)
            for key in ('positive_range', 'negative_range'):
                if key in values:
                    lo, hi = values[key]
                    values[key] = (float(lo), float(hi))
            config = cls(**values)
        except ConfigValidationError:
            raise
        except (TypeError, ValueError) as e:
            raise ConfigValidationError(f"配置项格式错误: {e}", [str(e)], e)

        errors = config.validate()
        if errors:
            raise ConfigValidationError(f"配置校验失败: {'; '.join(errors)}", errors)
        return config

    def to_dict(self) -> Dict[str, Any]:
        """转换为可序列化字典"""
        data = asdict(self)
        data['positive_range'] = list(self.positive_range)
        data['negative_range'] = list(self.negative_range)
        return data

    def replace(self, **changes: Any) -> 'PipelineConfig':
        """返回修改后的新配置（重新校验）"""
        data = self.to_dict()
        data.update(changes)
        return PipelineConfig.from_mapping(data)

    def validate(self) -> List[str]:
        """验证配置参数的有效性"""
        errors = []

        def _is_number(value: Any) -> bool:
            return isinstance(value, (int, float)) and not isinstance(value, bool)

        def _is_int(value: Any) -> bool:
            return isinstance(value, int) and not isinstance(value, bool)

        for name in ('mcs_penalty', 'track_decay', 'anchor_min_score', 'track_stop_conf',
                     'label_min_fraction', 'greedy_epsilon'):
            value = getattr(self, name)
            if not _is_number(value) or not (0.0 <= value <= 1.0):
                errors.append(f"{name}必须在0.0-1.0之间")

        if not _is_number(self.mcs_ratio) or not (0.0 < self.mcs_ratio <= 1.0):
            errors.append("mcs_ratio必须在(0, 1]之间")

        for name in ('nms_iou', 'anchor_suppress_iou', 'snap_iou', 'maxpool_iou',
                     'label_iou', 'matching_iou', 'corloc_iou'):
            value = getattr(self, name)
            if not _is_number(value) or not (0.0 < value <= 1.0):
                errors.append(f"{name}必须在(0, 1]之间")

        if not _is_int(self.mgp_window) or self.mgp_window < 1 or self.mgp_window % 2 == 0:
            errors.append("mgp_window必须是不小于1的奇数")
        if self.mgp_mode not in ("motion_guided", "duplicate"):
            errors.append("mgp_mode必须是 motion_guided 或 duplicate")
        if not _is_int(self.frame_stride) or self.frame_stride < 1:
            errors.append("frame_stride必须是正整数")
        if not _is_int(self.topk_k) or self.topk_k < 1:
            errors.append("topk_k必须是正整数")
        if self.rescore_feature not in ("mean", "median", "top_k"):
            errors.append("rescore_feature必须是 mean、median 或 top_k")
        if self.minmax_scope not in ("global", "per_clip"):
            errors.append("minmax_scope必须是 global 或 per_clip")
        if self.ap_method not in ("all_points", "eleven_point"):
            errors.append("ap_method必须是 all_points 或 eleven_point")
        if not _is_int(self.num_classes) or self.num_classes < 1:
            errors.append("num_classes必须是正整数")

        ranges_ok = True
        for name in ('positive_range', 'negative_range'):
            lo, hi = getattr(self, name)
            if not (0.0 <= lo < hi <= 1.0):
                errors.append(f"{name}必须满足 0 <= 下界 < 上界 <= 1")
                ranges_ok = False
        if ranges_ok:
            pos_lo, pos_hi = self.positive_range
            neg_lo, neg_hi = self.negative_range
            if not (neg_hi <= pos_lo or pos_hi <= neg_lo):
                errors.append("positive_range与negative_range只能在端点处相接")

        if str(self.logging.level).upper() not in _LOG_LEVELS:
            errors.append(f"logging.level必须是 {', '.join(_LOG_LEVELS)} 之一")

        return errors


def read_config(path: Optional[Union[str, Path]] = None,
                overrides: Optional[Dict[str, Any]] = None) -> PipelineConfig:
    """
    读取流水线配置并应用覆盖项

    Args:
        path: YAML 或 JSON 配置文件，None 表示从默认值开始
        overrides: 点号分隔键到值的覆盖项，如 {'logging.level': 'DEBUG'}

    Returns:
        PipelineConfig: 校验后的配置

    Raises:
        ConfigValidationError: 文件缺失、格式错误或校验失败
    """
    manager = ConfigManager(path)
    if manager.config_path is not None:
        if not manager.config_path.exists():
            raise ConfigValidationError(f"配置文件不存在: {path}")
        try:
            manager.load_config()
        except yaml.YAMLError as e:
            raise ConfigValidationError(f"配置文件格式错误 ({path}): {e}", [str(e)], e)
    manager.apply_overrides(overrides or {})
    return PipelineConfig.from_mapping(manager.config_data)


def write_config(config: PipelineConfig, path: Union[str, Path]) -> None:
    """保存流水线配置"""
    ConfigManager(path).save_config(config.to_dict())
