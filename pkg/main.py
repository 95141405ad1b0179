#!/usr/bin/env python3
"""
tubekit - 主程序入口

视频目标检测结果的后处理命令行工具。
支持：
- 多上下文抑制 (mcs) 与运动引导传播 (mgp)
- 轨迹生成 (track) 与轨迹重打分 (rescore)
- 多结果源融合 (combine / average) 与评估 (eval-map / eval-corloc)
- 合成数据生成 (synth)、MCS 网格搜索 (grid-mcs) 与消融实验 (ablation)
- 完整流水线 (pipeline)

退出码：0 成功，1 参数/配置错误，2 数据错误，3 内部错误
"""

import sys
import json
import argparse
import logging
import logging.handlers
from pathlib import Path
from typing import Dict, List, Optional

import coloredlogs

# 添加当前目录到Python路径
current_dir = Path(__file__).parent
sys.path.insert(0, str(current_dir))

from modules import (
    TubekitError,
    PipelineConfig,
    parse_overrides,
    read_config,
    PipelineValidationError,
    PropagationMode,
    PropagationPlan,
    PipelineRun,
    run_pipeline,
    run_ablation,
    parse_stages,
    apply_mcs,
    propagate_clip,
    build_tubelets,
    spatial_max_pool,
    train_classifier,
    rescore,
    tubelets_to_detections,
    minmax_normalize,
    combine,
    greedy_average,
    mean_ap,
    corloc_report,
    read_detections,
    write_detections,
    read_ground_truth,
    read_tubelets,
    write_tubelets,
    read_classifier,
    write_classifier,
    write_report,
    read_corloc_targets,
    DirectoryFlowCatalog,
    generate,
    write_fixture,
    read_synth_spec,
    grid_search_mcs,
    ProjectInitializer,
    __version__
)

logger = logging.getLogger("tubekit")

DETAILED_FORMAT = '%(asctime)s - %(name)s - %(levelname)s - [%(filename)s:%(lineno)d] - %(message)s'
CONSOLE_FORMAT = '%(asctime)s - %(levelname)s - %(message)s'


def setup_logging(level: str = "INFO", log_file: Optional[str] = None,
                  max_size: int = 10 * 1024 * 1024, backup_count: int = 5) -> None:
    """
    设置日志：标准错误上的彩色控制台输出，可选轮转文件

    Args:
        level: 日志级别
        log_file: 日志文件路径，None 表示不写文件
        max_size: 单个日志文件最大大小（字节）
        backup_count: 保留的日志文件数量
    """
    root = logging.getLogger()
    # 清除现有的处理器，避免重复
    for handler in root.handlers[:]:
        root.removeHandler(handler)

    level_value = getattr(logging, level.upper(), logging.INFO)
    coloredlogs.install(level=level_value, logger=root, stream=sys.stderr,
                        fmt=CONSOLE_FORMAT, datefmt='%H:%M:%S')

    if log_file:
        try:
            file_handler = logging.handlers.RotatingFileHandler(
                log_file, maxBytes=max_size, backupCount=backup_count, encoding='utf-8')
            file_handler.setLevel(logging.DEBUG)
            file_handler.setFormatter(logging.Formatter(DETAILED_FORMAT, datefmt='%Y-%m-%d %H:%M:%S'))
            root.addHandler(file_handler)
            root.setLevel(logging.DEBUG)
        except OSError as e:
            logger.warning(f"⚠️ 无法创建日志文件 {log_file}: {e}")

    logger.debug(f"日志系统初始化完成 - 级别: {level}, 文件: {log_file or '无'}")


def _load_config(args: argparse.Namespace) -> PipelineConfig:
    path = getattr(args, 'config', None)
    overrides = parse_overrides(getattr(args, 'set', None))
    config = read_config(path, overrides)
    if (path or overrides) and not (args.debug or args.log_level or args.log_file):
        setup_logging(config.logging.level, config.logging.file,
                      config.logging.max_size, config.logging.backup_count)
    return config


def _source_name(path: str, taken: Dict[str, object]) -> str:
    stem = Path(path).stem
    return stem if stem not in taken else f"{stem}_{len(taken)}"


def _floats(text: str) -> List[float]:
    return [float(v) for v in text.split(",") if v.strip()]


def _ints(text: str) -> List[int]:
    return [int(v) for v in text.split(",") if v.strip()]


# ---------------------------------------------------------------- 子命令

def cmd_pipeline(args: argparse.Namespace) -> int:
    config = _load_config(args)
    run = PipelineRun(
        config=config,
        stages=parse_stages(args.stages),
        detection_paths=[Path(p) for p in args.dets],
        flow_dir=Path(args.flow_dir) if args.flow_dir else None,
        gt_path=Path(args.gt) if args.gt else None,
        out_dir=Path(args.out_dir),
        classifier_path=Path(args.model) if args.model else None,
        workers=args.workers,
        write_intermediate=not args.no_intermediate,
    )
    result = run_pipeline(run)
    if result.report is not None:
        print(result.report.format_table())
    return 0


def cmd_mcs(args: argparse.Namespace) -> int:
    config = _load_config(args)
    ratio = args.ratio if args.ratio is not None else config.mcs_ratio
    penalty = args.penalty if args.penalty is not None else config.mcs_penalty
    clips = read_detections(args.input, config.num_classes)
    write_detections([apply_mcs(clip, ratio, penalty)[0] for clip in clips], args.out)
    return 0


def cmd_mgp(args: argparse.Namespace) -> int:
    config = _load_config(args)
    mode = PropagationMode.DUPLICATE if args.mode == "duplicate" else PropagationMode.MOTION_GUIDED
    plan = PropagationPlan(args.window or config.mgp_window, mode)
    if mode is PropagationMode.MOTION_GUIDED and not args.flow_dir:
        raise PipelineValidationError("motion 模式需要 --flow-dir")
    catalog = DirectoryFlowCatalog(args.flow_dir) if args.flow_dir else None
    clips = read_detections(args.input, config.num_classes)
    out = []
    for clip in clips:
        provider = catalog.for_clip(clip) if catalog is not None else None
        out.append(propagate_clip(clip, provider, plan, config.nms_iou)[0])
    write_detections(out, args.out)
    return 0


def cmd_track(args: argparse.Namespace) -> int:
    config = _load_config(args)
    catalog = DirectoryFlowCatalog(args.flow_dir)
    clips = read_detections(args.input, config.num_classes)
    tubelets = [t for clip in clips for t in build_tubelets(clip, catalog.for_clip(clip), config)]
    write_tubelets(tubelets, args.out)
    return 0


def cmd_rescore(args: argparse.Namespace) -> int:
    config = _load_config(args)
    if bool(args.model) == bool(args.fit):
        raise PipelineValidationError("rescore 需要 --model 或 --fit 二者之一")
    clips = read_detections(args.dets, config.num_classes)
    by_id = {clip.clip_id: clip for clip in clips}
    tubelets = read_tubelets(args.tubelets)
    missing = sorted({t.clip_id for t in tubelets} - set(by_id))
    if missing:
        raise PipelineValidationError(f"轨迹引用了检测文件中不存在的片段: {', '.join(missing)}")
    pooled = [spatial_max_pool(t, by_id[t.clip_id], config.maxpool_iou) for t in tubelets]

    if args.model:
        classifier = read_classifier(args.model)
    else:
        classifier = train_classifier(pooled, read_ground_truth(args.fit, config.num_classes), config)
        if args.model_out:
            write_classifier(classifier, args.model_out)

    rescored = rescore(pooled, classifier, config.topk_k, config.rescore_feature,
                       config.positive_range, config.negative_range)
    write_detections([tubelets_to_detections(rescored, clip) for clip in clips], args.out)
    if args.tubelets_out:
        write_tubelets(rescored, args.tubelets_out)
    return 0


def cmd_combine(args: argparse.Namespace) -> int:
    config = _load_config(args)
    sources = [minmax_normalize(read_detections(p, config.num_classes), config.minmax_scope)
               for p in args.input]
    write_detections(combine(sources, config.nms_iou), args.out)
    return 0


def cmd_average(args: argparse.Namespace) -> int:
    config = _load_config(args)
    sources: Dict[str, list] = {}
    for path in args.input:
        sources[_source_name(path, sources)] = read_detections(path, config.num_classes)
    gt = read_ground_truth(args.gt, config.num_classes)
    result = greedy_average(sources, gt, match_iou=config.nms_iou,
                            epsilon=config.greedy_epsilon, scope=config.minmax_scope)
    write_detections(result.averaged, args.out)
    for ids, score in result.history:
        print(f"{'+'.join(ids):<40} {score:8.4f}")
    print(f"selected: {', '.join(result.selected)}")
    return 0


def cmd_eval_map(args: argparse.Namespace) -> int:
    config = _load_config(args)
    iou_thresh = args.iou if args.iou is not None else config.matching_iou
    method = args.method or config.ap_method
    report = mean_ap(read_detections(args.dets, config.num_classes),
                     read_ground_truth(args.gt, config.num_classes), iou_thresh, method)
    if args.out:
        write_report(report, args.out)
    print(json.dumps(report.to_dict(), indent=2, ensure_ascii=False))
    print(report.format_table())
    return 0


def cmd_eval_corloc(args: argparse.Namespace) -> int:
    config = _load_config(args)
    iou_thresh = args.iou if args.iou is not None else config.corloc_iou
    targets = read_corloc_targets(args.targets) if args.targets else None
    report = corloc_report(read_detections(args.dets, config.num_classes),
                           read_ground_truth(args.gt, config.num_classes), targets, iou_thresh)
    if args.out:
        write_report(report, args.out)
    print(json.dumps(report.to_dict(), indent=2, ensure_ascii=False))
    print(report.format_table())
    return 0


def cmd_synth(args: argparse.Namespace) -> int:
    overrides = parse_overrides(args.set)
    if args.seed is not None:
        overrides['seed'] = args.seed
    spec = read_synth_spec(args.spec, overrides)
    write_fixture(generate(spec), args.out_dir, spec)
    return 0


def cmd_grid_mcs(args: argparse.Namespace) -> int:
    config = _load_config(args)
    result = grid_search_mcs(read_detections(args.dets, config.num_classes),
                             read_ground_truth(args.gt, config.num_classes),
                             _floats(args.ratios), _floats(args.penalties), config.matching_iou)
    print(f"{'ratio':>10} {'penalty':>8} {'mean AP':>8}")
    for (ratio, penalty), value in sorted(result.table.items()):
        print(f"{ratio:>10g} {penalty:>8g} {value:8.4f}")
    print(f"best: ratio={result.ratio:g} penalty={result.penalty:g} mean AP={result.mean_ap:.4f}")
    return 0


def cmd_ablation(args: argparse.Namespace) -> int:
    config = _load_config(args)
    sources: Dict[str, list] = {}
    for path in args.dets:
        sources[_source_name(path, sources)] = read_detections(path, config.num_classes)
    gt = read_ground_truth(args.gt, config.num_classes)
    classifier = read_classifier(args.model) if args.model else None
    result = run_ablation(sources, gt, DirectoryFlowCatalog(args.flow_dir), config,
                          windows=_ints(args.windows), workers=args.workers, classifier=classifier)
    print(result.format_table())
    return 0


def cmd_init(args: argparse.Namespace) -> int:
    initializer = ProjectInitializer(args.dir)
    if not initializer.initialize_project():
        return 1
    print(f"已初始化: {initializer.project_root}")
    return 0


# ---------------------------------------------------------------- 参数解析

def build_parser() -> argparse.ArgumentParser:
    """构建命令行解析器"""
    parser = argparse.ArgumentParser(
        prog='tubekit',
        description='视频目标检测后处理工具',
        formatter_class=argparse.RawDescriptionHelpFormatter,
        epilog="""
示例用法:
  tubekit synth --out-dir fixtures/
  tubekit pipeline --dets fixtures/detections.jsonl --flow-dir fixtures/flows \\
      --gt fixtures/gt.jsonl --out-dir runs/run1
  tubekit eval-map --dets runs/run1/final.jsonl --gt fixtures/gt.jsonl
        """
    )
    parser.add_argument('--log-level', default=None, help='日志级别 (默认: INFO 或配置文件中的设置)')
    parser.add_argument('--log-file', default=None, help='日志文件路径')
    parser.add_argument('--debug', '-d', action='store_true', help='启用调试模式')
    parser.add_argument('--version', '-v', action='version', version=f'tubekit v{__version__}')

    sub = parser.add_subparsers(dest='command', required=True)

    def add(name: str, handler, help_text: str, config: bool = True) -> argparse.ArgumentParser:
        p = sub.add_parser(name, help=help_text)
        if config:
            p.add_argument('--config', '-c', default=None, help='流水线配置文件 (YAML/JSON)')
            p.add_argument('--set', action='append', default=None, metavar='KEY=VALUE',
                           help='覆盖配置项，可重复指定，如 --set mcs_ratio=0.001 --set logging.level=DEBUG')
        p.set_defaults(handler=handler)
        return p

    p = add('pipeline', cmd_pipeline, '运行完整流水线')
    p.add_argument('--dets', action='append', required=True, help='检测文件，可重复指定多个结果源')
    p.add_argument('--flow-dir', default=None, help='光流目录')
    p.add_argument('--gt', default=None, help='真值文件')
    p.add_argument('--out-dir', required=True, help='输出目录')
    p.add_argument('--stages', default='mcs,mgp,track,rescore,combine,eval', help='逗号分隔的阶段列表')
    p.add_argument('--model', default=None, help='已训练的分类器文件')
    p.add_argument('--workers', type=int, default=1, help='并行处理的片段数')
    p.add_argument('--no-intermediate', action='store_true', help='不写出各阶段的中间结果')

    p = add('mcs', cmd_mcs, '多上下文抑制')
    p.add_argument('--in', dest='input', required=True)
    p.add_argument('--out', required=True)
    p.add_argument('--ratio', type=float, default=None)
    p.add_argument('--penalty', type=float, default=None)

    p = add('mgp', cmd_mgp, '运动引导传播')
    p.add_argument('--in', dest='input', required=True)
    p.add_argument('--flow-dir', default=None)
    p.add_argument('--mode', choices=['motion', 'duplicate'], default='motion')
    p.add_argument('--window', type=int, default=None)
    p.add_argument('--out', required=True)

    p = add('track', cmd_track, '生成轨迹')
    p.add_argument('--in', dest='input', required=True)
    p.add_argument('--flow-dir', required=True)
    p.add_argument('--out', required=True)

    p = add('rescore', cmd_rescore, '轨迹重打分')
    p.add_argument('--tubelets', required=True)
    p.add_argument('--dets', required=True)
    p.add_argument('--fit', default=None, help='用于训练分类器的真值文件')
    p.add_argument('--model-out', default=None)
    p.add_argument('--model', default=None)
    p.add_argument('--out', required=True)
    p.add_argument('--tubelets-out', default=None)

    p = add('combine', cmd_combine, 'min-max 归一化后 NMS 融合')
    p.add_argument('--in', dest='input', action='append', required=True)
    p.add_argument('--out', required=True)

    p = add('average', cmd_average, '贪心模型平均')
    p.add_argument('--in', dest='input', action='append', required=True)
    p.add_argument('--gt', required=True)
    p.add_argument('--out', required=True)

    p = add('eval-map', cmd_eval_map, 'mean AP 评估')
    p.add_argument('--dets', required=True)
    p.add_argument('--gt', required=True)
    p.add_argument('--iou', type=float, default=None)
    p.add_argument('--method', choices=['all_points', 'eleven_point'], default=None)
    p.add_argument('--out', default=None)

    p = add('eval-corloc', cmd_eval_corloc, 'CorLoc 评估')
    p.add_argument('--dets', required=True)
    p.add_argument('--gt', required=True)
    p.add_argument('--targets', default=None, help='{clip: class} 目标类别文件')
    p.add_argument('--iou', type=float, default=None)
    p.add_argument('--out', default=None)

    p = add('synth', cmd_synth, '生成合成数据', config=False)
    p.add_argument('--spec', default=None)
    p.add_argument('--seed', type=int, default=None)
    p.add_argument('--set', action='append', default=None, metavar='KEY=VALUE', help='覆盖合成规格项')
    p.add_argument('--out-dir', required=True)

    p = add('grid-mcs', cmd_grid_mcs, 'MCS 参数网格搜索')
    p.add_argument('--dets', required=True)
    p.add_argument('--gt', required=True)
    p.add_argument('--ratios', default='0.0001,0.0003,0.001,0.003,0.01')
    p.add_argument('--penalties', default='0,0.2,0.4,0.6')

    p = add('ablation', cmd_ablation, '组件消融与窗口扫描')
    p.add_argument('--dets', action='append', required=True)
    p.add_argument('--flow-dir', required=True)
    p.add_argument('--gt', required=True)
    p.add_argument('--model', default=None)
    p.add_argument('--windows', default='1,3,5,7')
    p.add_argument('--workers', type=int, default=1)

    p = add('init', cmd_init, '初始化工作目录与示例配置', config=False)
    p.add_argument('--dir', default='.')
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    """主函数，返回退出码"""
    parser = build_parser()
    args = parser.parse_args(argv)

    level = 'DEBUG' if args.debug else (args.log_level or 'INFO')
    setup_logging(level, args.log_file)

    try:
        return args.handler(args)
    except TubekitError as e:
        logger.error(f"❌ {e.message}")
        for detail in getattr(e, 'errors', None) or []:
            logger.error(f"  - {detail}")
        return e.exit_code
    except ValueError as e:
        logger.error(f"❌ 参数无效: {e}")
        return 1
    except KeyboardInterrupt:
        logger.info("接收到键盘中断信号")
        return 130
    except Exception as e:
        logger.exception(f"内部错误: {e}")
        return 3


if __name__ == "__main__":
    sys.exit(main())
