"""
合成基准测试

测试 synth_bench.py 的数据生成、精确光流、MCS 网格搜索与数据目录写出
"""

import json
import pytest
import tempfile
import numpy as np
from pathlib import Path
import sys

# 添加项目根目录到Python路径
project_root = Path(__file__).parent.parent
sys.path.insert(0, str(project_root))

from modules.config_manager import ConfigValidationError, ConfigManager
from modules.mgp import mean_flow
from modules.mcs import apply_mcs
from modules.combination_eval import mean_ap
from modules.io_formats import read_detections, read_ground_truth, file_sha256, DirectoryFlowCatalog
from modules.synth_bench import (
    SynthSpec, generate, measure_miss_rate, grid_search_mcs, write_fixture, read_synth_spec, quantize
)


@pytest.fixture
def temp_dir():
    """临时目录"""
    with tempfile.TemporaryDirectory() as d:
        yield Path(d)


class TestSynthSpec:
    """合成规格测试"""

    @pytest.mark.parametrize("changes", [
        {'num_clips': 0},
        {'miss_prob': 1.5},
        {'object_size': (50, 20)},
        {'speed': (2.0, 1.0)},
        {'classes_per_clip': 40},
        {'burst_rate': 0.1, 'num_classes': 1},
    ])
    def test_invalid(self, changes):
        assert SynthSpec(**changes).validate()
        with pytest.raises(ConfigValidationError):
            generate(SynthSpec(**changes))

    def test_from_mapping_unknown_key(self):
        with pytest.raises(ConfigValidationError):
            SynthSpec.from_mapping({'num_clip': 3})

    def test_read_spec_file(self, temp_dir):
        path = temp_dir / "spec.yaml"
        ConfigManager(path).save_config({'num_clips': 3, 'speed': [0.0, 1.0]})
        spec = read_synth_spec(path)
        assert spec.num_clips == 3
        assert spec.speed == (0.0, 1.0)
        with pytest.raises(ConfigValidationError):
            read_synth_spec(temp_dir / "absent.yaml")

    def test_read_spec_overrides(self, temp_dir):
        """覆盖项优先于规格文件"""
        path = temp_dir / "spec.yaml"
        ConfigManager(path).save_config({'num_clips': 3, 'seed': 1})
        spec = read_synth_spec(path, {'seed': 7})
        assert (spec.num_clips, spec.seed) == (3, 7)
        assert read_synth_spec(None, {'seed': 7}) == SynthSpec(seed=7)
        assert read_synth_spec() == SynthSpec()
        with pytest.raises(ConfigValidationError):
            read_synth_spec(None, {'num_clip': 3})


class TestGenerate:
    """数据生成测试"""

    def test_deterministic(self):
        """同一规格生成完全相同的数据"""
        spec = SynthSpec(num_clips=3, frames_per_clip=20, fp_rate=0.5, box_jitter=1.0,
                         burst_rate=0.05, camera_pan_fraction=0.5, seed=7)
        first, second = generate(spec), generate(spec)
        assert first.clips == second.clips
        assert first.gt == second.gt
        assert first.pan_clips == second.pan_clips
        for clip in first.clips:
            assert first.flows[clip.clip_id].forward(3) == second.flows[clip.clip_id].forward(3)

    def test_seed_changes_output(self):
        a = generate(SynthSpec(num_clips=2, frames_per_clip=10, seed=1))
        b = generate(SynthSpec(num_clips=2, frames_per_clip=10, seed=2))
        assert a.gt != b.gt

    def test_detector_seed_keeps_scene(self):
        a = generate(SynthSpec(num_clips=2, frames_per_clip=20, seed=1, detector_seed=5))
        b = generate(SynthSpec(num_clips=2, frames_per_clip=20, seed=1, detector_seed=6))
        assert a.gt == b.gt
        assert a.clips != b.clips

    def test_objects_inside_frame_and_quantized(self):
        spec = SynthSpec(num_clips=4, frames_per_clip=60, speed=(2.0, 4.0), seed=3)
        fixture = generate(spec)
        for record in fixture.gt:
            box = record.box
            assert 0 <= box.x0 and box.x1 <= spec.width
            assert 0 <= box.y0 and box.y1 <= spec.height
            assert float(quantize(box.x0)) == box.x0

    def test_noiseless_detections_match_gt(self):
        fixture = generate(SynthSpec.noiseless(num_clips=3, frames_per_clip=15))
        gt_boxes = sorted((r.clip_id, r.frame, r.class_id, r.box.as_list()) for r in fixture.gt)
        det_boxes = sorted((c.clip_id, d.frame, d.class_id, d.box.as_list())
                           for c in fixture.clips for d in c.detections)
        assert gt_boxes == det_boxes
        assert mean_ap(fixture.clips, fixture.gt).mean_ap == pytest.approx(1.0)
        assert measure_miss_rate(fixture.clips, fixture.gt) == 0.0

    def test_flow_is_exact(self):
        """框内平均光流把真值框精确移到下一帧"""
        fixture = generate(SynthSpec(num_clips=2, frames_per_clip=30, objects_per_clip=1, seed=5))
        for clip in fixture.clips:
            provider = fixture.flows[clip.clip_id]
            boxes = {r.frame: r.box for r in fixture.gt if r.clip_id == clip.clip_id}
            for frame in range(clip.num_frames - 1):
                du, dv = mean_flow(provider.forward(frame), boxes[frame])
                assert boxes[frame].shift(du, dv) == boxes[frame + 1]
                du, dv = mean_flow(provider.backward(frame + 1), boxes[frame + 1])
                assert boxes[frame + 1].shift(du, dv) == boxes[frame]
            assert provider.forward(clip.num_frames - 1) is None
            assert provider.backward(0) is None

    def test_camera_pan_background(self):
        fixture = generate(SynthSpec(num_clips=2, frames_per_clip=5, objects_per_clip=0,
                                     camera_pan_fraction=1.0, camera_pan_speed=2.0, seed=9))
        assert fixture.pan_clips == ["clip0000", "clip0001"]
        field = fixture.flows["clip0000"].forward(0)
        assert np.unique(field.u).size == 1
        assert fixture.flows["clip0000"].backward(1).u[0, 0] == -field.u[0, 0]

    def test_bursts_use_absent_class(self):
        """突发误检的类别不在片段的真值类别中"""
        fixture = generate(SynthSpec(num_clips=5, frames_per_clip=40, num_classes=5, burst_rate=0.1, seed=2))
        bursts = 0
        for clip in fixture.clips:
            clip_gt = [r for r in fixture.gt if r.clip_id == clip.clip_id]
            present = {r.class_id for r in clip_gt}
            for det in clip.detections:
                if det.class_id in present:
                    continue
                bursts += 1
                # 突发误检落在物体上
                assert any(r.frame == det.frame and r.box == det.box for r in clip_gt)
        assert bursts > 0

    def test_subset(self):
        fixture = generate(SynthSpec(num_clips=3, frames_per_clip=5))
        part = fixture.subset(["clip0001"])
        assert [c.clip_id for c in part.clips] == ["clip0001"]
        assert {r.clip_id for r in part.gt} == {"clip0001"}
        assert list(part.flows) == ["clip0001"]


class TestMissRate:
    """漏检率统计测试"""

    def test_all_missed(self):
        fixture = generate(SynthSpec(num_clips=2, frames_per_clip=10, miss_prob=1.0))
        assert measure_miss_rate(fixture.clips, fixture.gt) == 1.0

    def test_interior_frames_only(self):
        fixture = generate(SynthSpec.noiseless(num_clips=1, frames_per_clip=3))
        assert measure_miss_rate(fixture.clips, fixture.gt, window=7) == 0.0


class TestGridSearch:
    """MCS 网格搜索测试"""

    def test_burst_suppression_gain(self):
        """注入突发误检后，网格搜索得到的 MCS 至少提升 2 个点且不改变任何框"""
        spec = SynthSpec(num_clips=12, frames_per_clip=100, num_classes=5, true_score_mean=0.7,
                         true_score_std=0.15, burst_rate=0.015, burst_length=3,
                         burst_score_mean=0.85, seed=17)
        fixture = generate(spec)
        baseline = mean_ap(fixture.clips, fixture.gt).mean_ap
        result = grid_search_mcs(fixture.clips, fixture.gt, [0.001, 0.01, 0.05], [0.0, 0.2, 0.4])
        assert result.mean_ap - baseline >= 0.02
        assert len(result.table) == 9
        assert result.table[(result.ratio, result.penalty)] == result.mean_ap

        for clip in fixture.clips:
            out, _ = apply_mcs(clip, result.ratio, result.penalty)
            key = lambda d: (d.frame, d.class_id, d.box.as_list())
            assert sorted(map(key, out.detections)) == sorted(map(key, clip.detections))

    def test_zero_penalty_ties_take_smallest(self):
        """全部并列时取字典序最小的组合"""
        fixture = generate(SynthSpec.noiseless(num_clips=2, frames_per_clip=5))
        result = grid_search_mcs(fixture.clips, fixture.gt, [0.5, 0.1], [0.0])
        assert (result.ratio, result.penalty) == (0.1, 0.0)

    def test_empty_grid(self):
        with pytest.raises(ValueError):
            grid_search_mcs([], [], [], [0.1])


class TestWriteFixture:
    """数据目录写出测试"""

    def test_files_and_manifest(self, temp_dir):
        spec = SynthSpec(num_clips=2, frames_per_clip=4, fp_rate=0.5, seed=1)
        fixture = generate(spec)
        manifest = write_fixture(fixture, temp_dir, spec)

        assert read_detections(temp_dir / "detections.jsonl") == fixture.clips
        gt_key = lambda r: (r.clip_id, r.frame, r.track_id)
        assert read_ground_truth(temp_dir / "gt.jsonl") == sorted(fixture.gt, key=gt_key)
        on_disk = json.loads((temp_dir / "manifest.json").read_text(encoding="utf-8"))
        assert on_disk == manifest
        assert on_disk['spec']['num_clips'] == 2
        for name, digest in manifest['files'].items():
            assert file_sha256(temp_dir / name) == digest
        # 每个片段 3 个前向与 3 个后向光流
        assert len([n for n in manifest['files'] if n.startswith("flows/")]) == 12

        catalog = DirectoryFlowCatalog(temp_dir / "flows")
        clip = fixture.clips[0]
        assert catalog.for_clip(clip).forward(1) == fixture.flows[clip.clip_id].forward(1)
