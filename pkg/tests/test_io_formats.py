"""
文件格式测试

测试 io_formats.py 中检测、真值、光流、轨迹、分类器与报告的读写
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

from modules.core_model import BBox, Detection, ClipDetections, GroundTruthRecord, Origin, OriginKind
from modules.mgp import FlowField, InMemoryFlowProvider
from modules.tubelet_tracker import Tubelet, TubeletNode
from modules.tubelet_rescoring import BayesClassifier1D
from modules.combination_eval import EvalReport, ClassCounts
from modules.io_formats import (
    FormatError, FlowFormatError, FLOW_MAGIC,
    read_detections, write_detections, format_detections,
    read_ground_truth, write_ground_truth,
    encode_flow, decode_flow, read_flow, write_flow, flow_path, write_flows,
    DirectoryFlowCatalog, read_tubelets, write_tubelets,
    read_classifier, write_classifier, read_report, write_report, read_corloc_targets,
    atomic_write_text, file_sha256
)


@pytest.fixture
def temp_dir():
    """临时目录"""
    with tempfile.TemporaryDirectory() as d:
        yield Path(d)


def _write_lines(path: Path, lines):
    path.write_text("".join(line + "\n" for line in lines), encoding='utf-8')
    return path


def _random_clips(rng, clip_count=3):
    clips = []
    for c in range(clip_count):
        num_frames = int(rng.integers(1, 20))
        width, height = int(rng.integers(20, 200)), int(rng.integers(20, 200))
        dets = []
        for _ in range(int(rng.integers(0, 15))):
            x0 = float(rng.uniform(0, width - 2))
            y0 = float(rng.uniform(0, height - 2))
            x1 = float(rng.uniform(x0 + 0.5, width))
            y1 = float(rng.uniform(y0 + 0.5, height))
            origin = None
            if rng.uniform() < 0.3:
                origin = Origin(OriginKind.PROPAGATED, int(rng.integers(0, num_frames)),
                                int(rng.integers(-3, 4)))
            source = "model_a" if rng.uniform() < 0.5 else None
            dets.append(Detection(int(rng.integers(0, num_frames)), int(rng.integers(0, 30)),
                                  float(rng.uniform()), BBox(x0, y0, x1, y1), source, origin))
        clips.append(ClipDetections(f"clip{c}", num_frames, width, height, tuple(dets)))
    return clips


class TestDetections:
    """检测文件读写测试"""

    def test_single_line(self, temp_dir):
        """单行文件得到一个检测，元数据由检测推断"""
        path = _write_lines(temp_dir / "d.jsonl", [
            '{"clip": "a", "frame": 0, "class": 3, "score": 0.9, "bbox": [0, 0, 10, 10]}'])
        clips = read_detections(path)
        assert len(clips) == 1
        clip = clips[0]
        assert clip.clip_id == "a"
        assert (clip.num_frames, clip.width, clip.height) == (1, 10, 10)
        assert len(clip) == 1
        assert clip.detections[0] == Detection(0, 3, 0.9, BBox(0, 0, 10, 10))

    def test_meta_line_and_clamping(self, temp_dir):
        """元数据行给出画面尺寸，越界框被裁剪，画面外的框被丢弃"""
        path = _write_lines(temp_dir / "d.jsonl", [
            '{"clip": "a", "meta": {"num_frames": 4, "width": 50, "height": 40}}',
            '{"clip": "a", "frame": 1, "class": 0, "score": 0.5, "bbox": [-5, 0, 10, 10]}',
            '{"clip": "a", "frame": 2, "class": 0, "score": 0.4, "bbox": [60, 0, 70, 10]}',
        ])
        clip = read_detections(path)[0]
        assert (clip.num_frames, clip.width, clip.height) == (4, 50, 40)
        assert [d.box for d in clip.detections] == [BBox(0, 0, 10, 10)]

    def test_clip_order_and_sorting(self, temp_dir):
        """片段保持首次出现顺序，片段内按规范顺序排序"""
        path = _write_lines(temp_dir / "d.jsonl", [
            '{"clip": "z", "frame": 1, "class": 0, "score": 0.1, "bbox": [0, 0, 5, 5]}',
            '{"clip": "b", "frame": 0, "class": 0, "score": 0.2, "bbox": [0, 0, 5, 5]}',
            '{"clip": "z", "frame": 0, "class": 2, "score": 0.3, "bbox": [0, 0, 5, 5]}',
            '{"clip": "z", "frame": 0, "class": 2, "score": 0.8, "bbox": [1, 0, 5, 5]}',
        ])
        clips = read_detections(path)
        assert [c.clip_id for c in clips] == ["z", "b"]
        assert [(d.frame, d.score) for d in clips[0].detections] == [(0, 0.8), (0, 0.3), (1, 0.1)]

    def test_round_trip_random(self, temp_dir):
        """1000 组随机数据 read(write(x)) == x"""
        rng = np.random.default_rng(2024)
        path = temp_dir / "rt.jsonl"
        for trial in range(1000):
            clips = _random_clips(rng, clip_count=int(rng.integers(1, 4)))
            write_detections(clips, path)
            assert read_detections(path) == clips, f"trial {trial}"

    def test_canonical_bytes_stable(self, temp_dir):
        """write(read(f)) 与规范化后的 f 字节一致"""
        rng = np.random.default_rng(5)
        clips = _random_clips(rng)
        first = temp_dir / "a.jsonl"
        second = temp_dir / "b.jsonl"
        write_detections(clips, first)
        write_detections(read_detections(first), second)
        assert first.read_bytes() == second.read_bytes()

    def test_origin_and_source_serialized(self):
        """来源字段按固定顺序输出"""
        det = Detection(1, 2, 0.5, BBox(0, 0, 4, 4), "m1", Origin(OriginKind.INTERPOLATED, 0, 1))
        text = format_detections([ClipDetections("a", 3, 10, 10, (det,))])
        lines = text.splitlines()
        assert json.loads(lines[0]) == {"clip": "a", "meta": {"num_frames": 3, "width": 10, "height": 10}}
        record = json.loads(lines[1])
        assert list(record) == ["clip", "frame", "class", "score", "bbox", "source", "origin"]
        assert record["origin"] == {"kind": "interpolated", "frame": 0, "offset": 1}

    def test_error_names_line_and_field(self, temp_dir):
        """错误信息包含行号与字段"""
        path = _write_lines(temp_dir / "d.jsonl", [
            '{"clip": "a", "frame": 0, "class": 0, "score": 0.5, "bbox": [0, 0, 5, 5]}',
            '',
            '{"clip": "a", "frame": 0, "class": 0, "score": "high", "bbox": [0, 0, 5, 5]}',
        ])
        with pytest.raises(FormatError) as exc_info:
            read_detections(path)
        assert exc_info.value.line == 3
        assert exc_info.value.field == "score"
        assert ":3:" in exc_info.value.message

    MALFORMED = [
        ('{"clip": "a", "frame": 0,', "json"),
        ('[1, 2, 3]', "record"),
        ('{"frame": 0, "class": 0, "score": 0.5, "bbox": [0, 0, 5, 5]}', "clip"),
        ('{"clip": "", "frame": 0, "class": 0, "score": 0.5, "bbox": [0, 0, 5, 5]}', "clip"),
        ('{"clip": 7, "frame": 0, "class": 0, "score": 0.5, "bbox": [0, 0, 5, 5]}', "clip"),
        ('{"clip": "a", "frame": "0", "class": 0, "score": 0.5, "bbox": [0, 0, 5, 5]}', "frame"),
        ('{"clip": "a", "frame": -1, "class": 0, "score": 0.5, "bbox": [0, 0, 5, 5]}', "frame"),
        ('{"clip": "a", "frame": 1.5, "class": 0, "score": 0.5, "bbox": [0, 0, 5, 5]}', "frame"),
        ('{"clip": "a", "frame": 0, "score": 0.5, "bbox": [0, 0, 5, 5]}', "class"),
        ('{"clip": "a", "frame": 0, "class": 7, "score": 0.5, "bbox": [0, 0, 5, 5]}', "class"),
        ('{"clip": "a", "frame": 0, "class": true, "score": 0.5, "bbox": [0, 0, 5, 5]}', "class"),
        ('{"clip": "a", "frame": 0, "class": 0, "score": "x", "bbox": [0, 0, 5, 5]}', "score"),
        ('{"clip": "a", "frame": 0, "class": 0, "score": NaN, "bbox": [0, 0, 5, 5]}', "score"),
        ('{"clip": "a", "frame": 0, "class": 0, "score": Infinity, "bbox": [0, 0, 5, 5]}', "score"),
        ('{"clip": "a", "frame": 0, "class": 0, "bbox": [0, 0, 5, 5]}', "score"),
        ('{"clip": "a", "frame": 0, "class": 0, "score": 0.5, "bbox": [0, 0, 5]}', "bbox"),
        ('{"clip": "a", "frame": 0, "class": 0, "score": 0.5, "bbox": [10, 0, 0, 5]}', "bbox"),
        ('{"clip": "a", "frame": 0, "class": 0, "score": 0.5, "bbox": [0, 0, "5", 5]}', "bbox"),
        ('{"clip": "a", "frame": 0, "class": 0, "score": 0.5, "bbox": "0,0,5,5"}', "bbox"),
        ('{"clip": "a", "frame": 0, "class": 0, "score": 0.5, "bbox": [0, 0, 5, 5], "foo": 1}', "foo"),
        ('{"clip": "a", "frame": 0, "class": 0, "score": 0.5, "bbox": [0, 0, 5, 5], "source": 3}', "source"),
        ('{"clip": "a", "frame": 0, "class": 0, "score": 0.5, "bbox": [0, 0, 5, 5], '
         '"origin": {"kind": "teleported", "frame": 0}}', "origin.kind"),
        ('{"clip": "a", "frame": 0, "class": 0, "score": 0.5, "bbox": [0, 0, 5, 5], "origin": 5}', "origin"),
        ('{"clip": "a", "meta": {"num_frames": 0, "width": 5, "height": 5}}', "meta.num_frames"),
        ('{"clip": "a", "meta": [1, 2, 3]}', "meta"),
        ('{"clip": "a", "meta": {"num_frames": 2, "width": 5}}', "height"),
        # 超出整数位数上限、嵌套过深
        pytest.param('{"clip": "a", "frame": ' + "1" * 5000 + ', "class": 0, "score": 0.5, "bbox": [0, 0, 5, 5]}',
                     "json", id="huge-integer"),
        pytest.param("[" * 100000, "json", id="deep-nesting"),
    ]

    @pytest.mark.parametrize("line,field", MALFORMED)
    def test_malformed_corpus(self, temp_dir, line, field):
        """格式错误的输入返回结构化错误而不是崩溃"""
        path = _write_lines(temp_dir / "bad.jsonl", [line])
        with pytest.raises(FormatError) as exc_info:
            read_detections(path, num_classes=5)
        assert exc_info.value.field == field
        assert exc_info.value.line == 1
        assert exc_info.value.exit_code == 2

    def test_invalid_utf8(self, temp_dir):
        path = temp_dir / "bad.jsonl"
        path.write_bytes(b'{"clip": "\xff"}\n')
        with pytest.raises(FormatError) as exc_info:
            read_detections(path)
        assert exc_info.value.field == "encoding"

    def test_frame_beyond_meta(self, temp_dir):
        path = _write_lines(temp_dir / "bad.jsonl", [
            '{"clip": "a", "meta": {"num_frames": 2, "width": 50, "height": 50}}',
            '{"clip": "a", "frame": 2, "class": 0, "score": 0.5, "bbox": [0, 0, 5, 5]}',
        ])
        with pytest.raises(FormatError) as exc_info:
            read_detections(path)
        assert (exc_info.value.line, exc_info.value.field) == (2, "frame")

    def test_inconsistent_meta(self, temp_dir):
        path = _write_lines(temp_dir / "bad.jsonl", [
            '{"clip": "a", "meta": {"num_frames": 2, "width": 50, "height": 50}}',
            '{"clip": "a", "meta": {"num_frames": 3, "width": 50, "height": 50}}',
        ])
        with pytest.raises(FormatError):
            read_detections(path)

    def test_missing_file(self, temp_dir):
        with pytest.raises(FormatError) as exc_info:
            read_detections(temp_dir / "nope.jsonl")
        assert exc_info.value.field == "path"


class TestGroundTruth:
    """真值文件测试"""

    def test_round_trip(self, temp_dir):
        records = [GroundTruthRecord("b", 1, 2, 0, BBox(1, 1, 9, 9)),
                   GroundTruthRecord("a", 0, 4, 5, BBox(0, 0, 3.5, 4)),
                   GroundTruthRecord("a", 0, 4, 1, BBox(2, 2, 6, 6))]
        path = temp_dir / "gt.jsonl"
        write_ground_truth(records, path, {"a": (3, 20, 20), "b": (2, 20, 20)})
        loaded = read_ground_truth(path)
        assert loaded == sorted(records, key=lambda r: (r.clip_id, r.frame, r.track_id))

    def test_track_changes_class(self, temp_dir):
        """同一轨迹前后类别不同是错误"""
        path = _write_lines(temp_dir / "gt.jsonl", [
            '{"clip": "a", "frame": 0, "class": 1, "track": 0, "bbox": [0, 0, 5, 5]}',
            '{"clip": "a", "frame": 1, "class": 2, "track": 0, "bbox": [0, 0, 5, 5]}',
        ])
        with pytest.raises(FormatError) as exc_info:
            read_ground_truth(path)
        assert (exc_info.value.line, exc_info.value.field) == (2, "class")

    def test_duplicate_track(self, temp_dir):
        path = _write_lines(temp_dir / "gt.jsonl", [
            '{"clip": "a", "frame": 0, "class": 1, "track": 0, "bbox": [0, 0, 5, 5]}',
            '{"clip": "a", "frame": 0, "class": 1, "track": 0, "bbox": [1, 1, 5, 5]}',
        ])
        with pytest.raises(FormatError) as exc_info:
            read_ground_truth(path)
        assert exc_info.value.field == "track"

    def test_score_not_allowed(self, temp_dir):
        path = _write_lines(temp_dir / "gt.jsonl", [
            '{"clip": "a", "frame": 0, "class": 1, "track": 0, "score": 1.0, "bbox": [0, 0, 5, 5]}'])
        with pytest.raises(FormatError) as exc_info:
            read_ground_truth(path)
        assert exc_info.value.field == "score"

    def test_frame_beyond_meta(self, temp_dir):
        path = _write_lines(temp_dir / "gt.jsonl", [
            '{"clip": "a", "meta": {"num_frames": 1, "width": 50, "height": 50}}',
            '{"clip": "a", "frame": 3, "class": 1, "track": 0, "bbox": [0, 0, 5, 5]}',
        ])
        with pytest.raises(FormatError):
            read_ground_truth(path)


class TestFlow:
    """光流文件测试"""

    def test_zero_2x2_layout(self):
        """2×2 零光流：12 字节文件头加 2×2×2 个 float32 零"""
        data = encode_flow(FlowField.zeros(2, 2))
        assert data[:4] == np.array([FLOW_MAGIC], dtype='<f4').tobytes() == b'PIEH'
        assert data[4:12] == np.array([2, 2], dtype='<i4').tobytes()
        assert data[12:] == bytes(32)
        assert len(data) == 44

    def test_interleaved_row_major(self):
        """像素按行优先、(u, v) 交错存储"""
        u = np.array([[1, 2, 3]], dtype=np.float32)
        v = np.array([[-1, -2, -3]], dtype=np.float32)
        payload = np.frombuffer(encode_flow(FlowField(u, v))[12:], dtype='<f4')
        assert payload.tolist() == [1, -1, 2, -2, 3, -3]

    def test_random_round_trip_bit_exact(self, temp_dir):
        rng = np.random.default_rng(0)
        field = FlowField(rng.normal(size=(48, 64)).astype(np.float32),
                          rng.normal(size=(48, 64)).astype(np.float32))
        path = temp_dir / "f.flo"
        write_flow(field, path)
        original = path.read_bytes()
        loaded = read_flow(path, expected_size=(64, 48))
        assert loaded == field
        write_flow(loaded, path)
        assert path.read_bytes() == original

    def test_unreadable_path(self, temp_dir):
        """目录等无法读取的路径报告为光流格式错误"""
        with pytest.raises(FlowFormatError) as exc_info:
            read_flow(temp_dir)
        assert exc_info.value.field == "path"
        assert exc_info.value.exit_code == 2
        with pytest.raises(FormatError):
            read_flow(temp_dir / "absent.flo")

    def test_bad_magic(self):
        data = bytearray(encode_flow(FlowField.zeros(2, 2)))
        data[0:4] = b'XXXX'
        with pytest.raises(FlowFormatError) as exc_info:
            decode_flow(bytes(data))
        assert exc_info.value.field == "magic"

    def test_truncated(self):
        data = encode_flow(FlowField.zeros(2, 2))[:-4]
        with pytest.raises(FlowFormatError) as exc_info:
            decode_flow(data)
        assert exc_info.value.field == "payload"

    def test_trailing_bytes(self):
        with pytest.raises(FlowFormatError):
            decode_flow(encode_flow(FlowField.zeros(2, 2)) + b'\x00')

    def test_short_header(self):
        with pytest.raises(FlowFormatError) as exc_info:
            decode_flow(b'PIEH')
        assert exc_info.value.field == "header"

    def test_size_mismatch(self):
        with pytest.raises(FlowFormatError) as exc_info:
            decode_flow(encode_flow(FlowField.zeros(2, 2)), expected_size=(4, 2))
        assert exc_info.value.field == "size"

    def test_non_positive_size(self):
        data = np.array([FLOW_MAGIC], dtype='<f4').tobytes() + np.array([0, 2], dtype='<i4').tobytes()
        with pytest.raises(FlowFormatError):
            decode_flow(data)

    def test_non_finite(self):
        data = bytearray(encode_flow(FlowField.zeros(2, 2)))
        data[12:16] = np.array([np.nan], dtype='<f4').tobytes()
        with pytest.raises(FlowFormatError):
            decode_flow(bytes(data))

    def test_directory_catalog(self, temp_dir):
        """目录光流按需读取，缺失的转换返回 None"""
        clip = ClipDetections("c", 3, 4, 2)
        provider = InMemoryFlowProvider(
            forward={0: FlowField.uniform(4, 2, 1.0, 0.0), 1: FlowField.uniform(4, 2, 2.0, 0.0)},
            backward={1: FlowField.uniform(4, 2, -1.0, 0.0)})
        written = write_flows(temp_dir, clip, provider)
        assert flow_path(temp_dir, "c", 0) in written
        assert flow_path(temp_dir, "c", 1, backward=True) in written
        catalog = DirectoryFlowCatalog(temp_dir)
        loaded = catalog.for_clip(clip)
        assert loaded.forward(1) == FlowField.uniform(4, 2, 2.0, 0.0)
        assert loaded.backward(1) == FlowField.uniform(4, 2, -1.0, 0.0)
        assert loaded.forward(2) is None
        assert loaded.backward(2) is None

    def test_missing_directory(self, temp_dir):
        with pytest.raises(FormatError):
            DirectoryFlowCatalog(temp_dir / "absent")


class TestOtherArtifacts:
    """轨迹、分类器、报告与目标类别文件测试"""

    def test_tubelet_round_trip(self, temp_dir):
        nodes = (TubeletNode(3, BBox(0, 0, 5, 5), 0.9, True),
                 TubeletNode(4, BBox(1, 0, 6, 5), 0.45, False))
        tubelets = [Tubelet("a", 2, nodes, 0),
                    Tubelet("a", 2, nodes, 1, source_id="m", label="pos", posterior=0.8)]
        path = temp_dir / "t.jsonl"
        write_tubelets(tubelets, path)
        assert read_tubelets(path) == tubelets

    def test_tubelet_non_consecutive(self, temp_dir):
        path = _write_lines(temp_dir / "t.jsonl", [json.dumps({
            "clip": "a", "class": 0, "anchor": 0,
            "nodes": [{"frame": 0, "bbox": [0, 0, 5, 5], "score": 0.5, "snapped": True},
                      {"frame": 2, "bbox": [0, 0, 5, 5], "score": 0.5, "snapped": True}]})])
        with pytest.raises(FormatError):
            read_tubelets(path)

    def test_tubelet_bad_label(self, temp_dir):
        path = _write_lines(temp_dir / "t.jsonl", [json.dumps({
            "clip": "a", "class": 0, "anchor": 0, "label": "maybe",
            "nodes": [{"frame": 0, "bbox": [0, 0, 5, 5], "score": 0.5, "snapped": True}]})])
        with pytest.raises(FormatError) as exc_info:
            read_tubelets(path)
        assert exc_info.value.field == "label"

    def test_classifier_round_trip(self, temp_dir):
        classifier = BayesClassifier1D(0.8, 0.01, 0.3, 0.02, 0.4)
        path = temp_dir / "clf.json"
        write_classifier(classifier, path)
        assert len(json.loads(path.read_text())) == 5
        assert read_classifier(path) == classifier

    def test_classifier_invalid(self, temp_dir):
        path = temp_dir / "clf.json"
        path.write_text(json.dumps({"pos_mean": 0.8, "pos_var": -1.0, "neg_mean": 0.3,
                                    "neg_var": 0.02, "prior_pos": 0.4}))
        with pytest.raises(FormatError):
            read_classifier(path)

    def test_report_round_trip(self, temp_dir):
        report = EvalReport({1: 0.5, 3: 0.75}, 0.625,
                            {1: ClassCounts(4, 2, 1), 3: ClassCounts(2, 2, 0)}, 0.5, [7], "all_points")
        path = temp_dir / "report.json"
        write_report(report, path)
        assert read_report(path) == report

    def test_json_document_limits(self, temp_dir):
        """超长整数、嵌套过深与目录路径都报告为格式错误"""
        path = temp_dir / "clf.json"
        path.write_text('{"pos_mean": ' + "9" * 5000 + "}")
        with pytest.raises(FormatError) as exc_info:
            read_classifier(path)
        assert exc_info.value.field == "json"
        path.write_text("[" * 100000)
        with pytest.raises(FormatError) as exc_info:
            read_corloc_targets(path)
        assert exc_info.value.field == "json"
        with pytest.raises(FormatError) as exc_info:
            read_classifier(temp_dir)
        assert exc_info.value.field == "path"

    def test_corloc_targets(self, temp_dir):
        path = temp_dir / "targets.json"
        path.write_text('{"a": 3, "b": 0}')
        assert read_corloc_targets(path) == {"a": 3, "b": 0}
        path.write_text('{"a": "cat"}')
        with pytest.raises(FormatError):
            read_corloc_targets(path)

    def test_atomic_write_and_hash(self, temp_dir):
        """原子写入不留下临时文件"""
        path = temp_dir / "sub" / "out.txt"
        atomic_write_text(path, "abc")
        assert path.read_text() == "abc"
        assert [p.name for p in path.parent.iterdir()] == ["out.txt"]
        assert file_sha256(path) == "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad"
