"""
项目初始化模块

为 `tubekit init` 创建工作目录结构 (config / fixtures / runs) 和示例配置文件
"""

import logging
from pathlib import Path
from typing import Callable, List, Optional, Tuple, Union

from .config_manager import ConfigManager, PipelineConfig, write_config
from .synth_bench import SynthSpec

logger = logging.getLogger(__name__)


class ProjectInitializer:
    """tubekit 工作目录初始化"""

    def __init__(self, project_root: Optional[Union[str, Path]] = None):
        """
        Args:
            project_root: 工作目录，None 表示当前目录
        """
        self.project_root = Path(project_root) if project_root else Path.cwd()
        self.config_dir = self.project_root / "config"
        self.fixtures_dir = self.project_root / "fixtures"
        self.runs_dir = self.project_root / "runs"

    @property
    def required_directories(self) -> Tuple[Path, ...]:
        return self.config_dir, self.fixtures_dir, self.runs_dir

    @property
    def pipeline_config_path(self) -> Path:
        return self.config_dir / "pipeline_config.example.yaml"

    @property
    def synth_spec_path(self) -> Path:
        return self.config_dir / "synth_spec.example.yaml"

    def ensure_directories(self) -> bool:
        """创建缺失的目录，失败返回 False"""
        try:
            for directory in self.required_directories:
                existed = directory.is_dir()
                directory.mkdir(parents=True, exist_ok=True)
                if not existed:
                    logger.info(f"📁 已创建 {directory}")
            return True
        except OSError as e:
            logger.error(f"❌ 无法创建工作目录 {self.project_root}: {e}")
            return False

    def _write_example(self, path: Path, writer: Callable[[Path], None], overwrite: bool) -> bool:
        if path.exists() and not overwrite:
            logger.debug(f"保留已有文件: {path}")
            return False
        writer(path)
        logger.info(f"📝 已写出 {path}")
        return True

    def create_example_configs(self, overwrite: bool = False) -> List[Path]:
        """
        写出默认流水线配置与合成规格示例

        Args:
            overwrite: 是否覆盖已有文件

        Returns:
            List[Path]: 本次实际写出的文件
        """
        examples = [
            (self.pipeline_config_path, lambda p: write_config(PipelineConfig(), p)),
            (self.synth_spec_path, lambda p: ConfigManager(p).save_config(SynthSpec().to_dict())),
        ]
        return [path for path, writer in examples if self._write_example(path, writer, overwrite)]

    def initialize_project(self, create_examples: bool = True) -> bool:
        """
        创建目录并（可选）写出示例配置

        Returns:
            bool: 是否成功
        """
        logger.info(f"🚀 初始化工作目录 {self.project_root}")
        if not self.ensure_directories():
            return False
        if create_examples:
            try:
                self.create_example_configs()
            except OSError as e:
                logger.error(f"❌ 写出示例配置失败: {e}")
                return False
        return True

    def validate_project_structure(self) -> bool:
        """检查所有必需目录都存在"""
        missing = [d for d in self.required_directories if not d.is_dir()]
        for directory in missing:
            logger.error(f"缺少目录: {directory}")
        return not missing
