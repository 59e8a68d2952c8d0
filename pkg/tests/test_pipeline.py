import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from afotad.pipeline import (
    BACKWARD, FORWARD, Annotation, ClipWindow, Detection, make_inference_clips,
    make_training_clips, nms, postprocess, read_annotations, read_detections, to_frames,
    to_locations, write_annotations, write_detections,
)
from afotad.rfam import Candidate


def iou(a, b):
    inter = max(0.0, min(a.end_s, b.end_s) - max(a.start_s, b.start_s))
    return inter / (a.end_s - a.start_s + b.end_s - b.start_s - inter)


def keep_set_holds(cands, kept, thr):
    """The greedy definition, re-checked from scratch over the sorted order."""
    order = sorted(cands, key=lambda d: (-d.score, d.start_s, d.label))
    kept_ids = {id(d) for d in kept}
    accepted = []
    for d in order:
        should_keep = all(iou(d, k) <= thr for k in accepted if k.label == d.label)
        if should_keep != (id(d) in kept_ids):
            return False
        if should_keep:
            accepted.append(d)
    return [id(d) for d in accepted] == [id(d) for d in kept]


def random_dets(rng, n, video="v"):
    out = []
    for _ in range(n):
        s = rng.uniform(0, 50)
        out.append(Detection(video, int(rng.integers(1, 3)), float(rng.uniform(0.01, 1)), s, s + rng.uniform(0.5, 15)))
    return out


class TestTrainingClips:
    def test_video_equal_to_window(self):
        clips = make_training_clips("v", 768, 768, [(100, 200)])
        assert len(clips) == 1 and clips[0].start == 0

    def test_no_instances(self):
        assert make_training_clips("v", 5000, 768, []) == []

    def test_instance_at_end(self):
        n, L = 4 * 768, 768
        gt = (n - 150, n - 10)
        clips = make_training_clips("v", n, L, [gt])
        assert clips
        assert all(c.start < gt[1] and c.end > gt[0] for c in clips)
        # oracle: every window of either sweep that intersects gt is present
        fwd = [s for s in range(0, n, 576) if s + L <= n]
        bwd = [n - L - k * 576 for k in range(10) if n - L - k * 576 >= 0]
        expected = {s for s in fwd + bwd if s < gt[1] and s + L > gt[0]}
        assert {c.start for c in clips} == expected

    def test_sweeps_differ_off_grid(self):
        n = 3000
        clips = make_training_clips("v", n, 768, [(2300, 2990)])
        assert {c.direction for c in clips} == {FORWARD, BACKWARD}
        assert any(c.end == n for c in clips)

    def test_step_and_backward_anchor(self):
        clips = make_training_clips("v", 2000, 768, [(0, 2000)])
        starts = sorted({(c.direction, c.start) for c in clips})
        assert (FORWARD, 576) in starts and (BACKWARD, 2000 - 768) in starts


class TestInferenceClips:
    def test_step_size(self):
        clips = make_inference_clips("v", 5000, 768)
        assert clips[1].start - clips[0].start == 576

    def test_two_lengths_gives_three(self):
        clips = make_inference_clips("v", 2 * 768, 768)
        assert [c.start for c in clips] == [0, 576, 768]

    @given(st.integers(1, 20_000), st.sampled_from([64, 256, 768]))
    @settings(max_examples=100, deadline=None)
    def test_coverage(self, n, L):
        clips = make_inference_clips("v", n, L)
        covered = np.zeros(n, dtype=bool)
        for c in clips:
            covered[c.start : c.end] = True
        assert covered.all()
        assert all(c.direction == FORWARD for c in clips)

    @given(st.integers(1, 10_000))
    def test_aligned_starts_cover_tail(self, n):
        clips = make_inference_clips("v", n, 768, align=16)
        assert all(c.start % 16 == 0 for c in clips)
        assert clips[-1].end >= n


class TestNMS:
    def test_single(self):
        d = Detection("v", 1, 0.5, 0.0, 1.0)
        assert nms([d], 0.3) == [d]

    def test_identical_segments(self):
        a, b = Detection("v", 1, 0.9, 0.0, 2.0), Detection("v", 1, 0.8, 0.0, 2.0)
        for thr in (0.0, 0.3, 0.99):
            assert nms([b, a], thr) == [a]

    def test_classwise(self):
        a, b = Detection("v", 1, 0.9, 0.0, 2.0), Detection("v", 2, 0.8, 0.0, 2.0)
        assert nms([a, b], 0.3) == [a, b]

    @pytest.mark.parametrize("seed", range(10))
    def test_random_matches_definition(self, seed):
        rng = np.random.default_rng(seed)
        cands = random_dets(rng, 15)
        assert keep_set_holds(cands, nms(cands, 0.3), 0.3)

    @given(st.integers(0, 100_000), st.sampled_from([0.1, 0.3, 0.5, 0.7, 0.9]))
    @settings(max_examples=100, deadline=None)
    def test_antichain_and_idempotent(self, seed, thr):
        rng = np.random.default_rng(seed)
        kept = nms(random_dets(rng, int(rng.integers(0, 20))), thr)
        for i, a in enumerate(kept):
            for b in kept[i + 1 :]:
                if a.label == b.label:
                    assert iou(a, b) <= thr
        assert nms(kept, thr) == kept


class TestConversions:
    @given(st.integers(0, 500), st.integers(0, 200), st.sampled_from([8, 16]))
    def test_round_trip(self, x, w, stride):
        start = w * stride
        assert to_locations(to_frames(x, start, stride), start, stride) == x


def cands(scores, starts=None):
    return [Candidate(i, 1, s, (starts or [i] * len(scores))[i] - 1.0, (starts or [i] * len(scores))[i] + 1.0, 1.0, 1.0)
            for i, s in enumerate(scores)]


class TestPostprocess:
    def test_all_below_floor(self):
        w = ClipWindow("v", 0, 768)
        assert postprocess([(w, cands([0.001, 0.004, 0.005]))], 16, 25.0, 100.0) == []

    def test_top_k(self):
        w = ClipWindow("v", 0, 768)
        # 400 well-separated candidates: nothing suppressed
        cs = [Candidate(0, 1, 0.01 + i / 1000, 10 * i - 1.0, 10 * i + 1.0, 1.0, 1.0) for i in range(400)]
        out = postprocess([(w, cs)], 1, 1.0, 1e6)
        assert len(out) == 300
        assert [d.score for d in out] == sorted((c.score for c in cs), reverse=True)[:300]

    def test_duplicates_across_windows_merge(self):
        stride, fps = 16, 25.0
        w1, w2 = ClipWindow("v", 0, 768), ClipWindow("v", 576, 768)
        # same instance frames 600..800 seen by both windows
        loc1 = (700 / stride - 0.5)
        loc2 = ((700 - 576) / stride - 0.5)
        c1 = Candidate(0, 1, 0.9, loc1 - 100 / stride, loc1 + 100 / stride, 0, 0)
        c2 = Candidate(0, 1, 0.7, loc2 - 95 / stride, loc2 + 105 / stride, 0, 0)
        out = postprocess([(w1, [c1]), (w2, [c2])], stride, fps, 100.0)
        assert len(out) == 1 and out[0].score == 0.9
        assert out[0].start_s == pytest.approx(600 / fps) and out[0].end_s == pytest.approx(800 / fps)

    def test_clipped_to_duration(self):
        w = ClipWindow("v", 0, 768)
        out = postprocess([(w, [Candidate(0, 1, 0.5, -5.0, 100.0, 5.0, 100.0)])], 16, 25.0, 20.0)
        assert out[0].start_s == 0.0 and out[0].end_s == 20.0

    @given(st.integers(0, 10_000))
    @settings(max_examples=30, deadline=None)
    def test_sorted_and_bounded(self, seed):
        rng = np.random.default_rng(seed)
        w = ClipWindow("v", 0, 768)
        cs = [Candidate(i, 1, float(rng.uniform()), float(i - rng.uniform(0.1, 5)), float(i + rng.uniform(0.1, 5)), 1, 1)
              for i in range(48)]
        out = postprocess([(w, cs)], 16, 25.0, 1000.0, top_k=20)
        assert len(out) <= 20
        assert all(a.score >= b.score for a, b in zip(out, out[1:]))


class TestFiles:
    def test_detections_round_trip_and_format(self, tmp_path):
        dets = [Detection("vid a", 2, 0.123456789, 1.5, 3.25)]
        write_detections(tmp_path / "d.jsonl", dets)
        text = (tmp_path / "d.jsonl").read_text()
        assert text == '{"video": "vid a", "class": 2, "score": 0.123457, "start_s": 1.500000, "end_s": 3.250000}\n'
        back = read_detections(tmp_path / "d.jsonl")
        assert back[0].label == 2 and back[0].score == 0.123457
        write_detections(tmp_path / "d2.jsonl", back)
        assert (tmp_path / "d2.jsonl").read_text() == text

    def test_annotations_round_trip(self, tmp_path):
        anns = [Annotation("v", 1, 0.0, 2.0), Annotation("w", 3, 4.5, 9.0)]
        write_annotations(tmp_path / "a.jsonl", anns)
        assert read_annotations(tmp_path / "a.jsonl") == anns
        assert "score" not in json.loads((tmp_path / "a.jsonl").read_text().splitlines()[0])

    def test_bad_line_reports_location(self, tmp_path):
        (tmp_path / "bad.jsonl").write_text('{"video": "v"\n')
        with pytest.raises(ValueError, match="bad.jsonl:1"):
            read_detections(tmp_path / "bad.jsonl")
