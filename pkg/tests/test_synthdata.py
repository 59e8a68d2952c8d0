from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from afotad.pipeline import Annotation
from afotad.synthdata import (
    SynthSpec, feature_times, generate, load_dataset, overlap_injection, read_features,
    render, save_dataset, write_features,
)

SMALL = SynthSpec(num_train=20, num_test=10, channels=8)


def coverage_oracle(videos, spec):
    """Fraction of in-instance locations covered twice, counted location by location."""
    amb = inside = 0
    for v in videos:
        T = v.num_frames // spec.stride
        for x in range(T):
            t = (x + 0.5) * spec.stride / spec.fps
            k = sum(1 for a in v.annotations if a.start_s < t < a.end_s)
            inside += k > 0
            amb += k >= 2
    return amb / inside


class TestGenerate:
    def test_noiseless_single_instance_is_template(self):
        spec = replace(SMALL, noise=0.0, min_instances=1, max_instances=1)
        ds = generate(spec)
        v = ds.videos[0]
        (a,) = v.annotations
        t = feature_times(v.features.shape[1], spec.stride, spec.fps)
        inside = (t >= a.start_s) & (t <= a.end_s)
        u = (t[inside] - a.start_s) / (a.end_s - a.start_s)
        np.testing.assert_array_equal(v.features[:, inside], ds.templates.evaluate(a.label, u))
        far = (t < a.start_s - spec.ramp_s) | (t > a.end_s + spec.ramp_s)
        assert far.any() and np.all(v.features[:, far] == 0.0)

    def test_deterministic(self):
        a, b = generate(SMALL), generate(SMALL)
        assert [v.annotations for v in a.videos] == [v.annotations for v in b.videos]
        for va, vb in zip(a.videos, b.videos):
            assert va.features.tobytes() == vb.features.tobytes()

    def test_seed_changes_data(self):
        other = generate(replace(SMALL, seed=1))
        assert other.videos[0].annotations != generate(SMALL).videos[0].annotations

    def test_default_split_sizes(self):
        spec = SynthSpec()
        assert (spec.num_train, spec.num_test) == (200, 100)

    def test_split_names(self):
        ds = generate(SMALL)
        assert len(ds.split("train")) == 20 and len(ds.split("test")) == 10
        assert ds.videos[0].name == "train_0000"

    def test_duration_bounds_over_1000_samples(self):
        spec = SynthSpec(num_train=250, num_test=0, channels=2, min_instances=4, max_instances=4,
                         min_duration_s=2.0, max_duration_s=20.0, min_frames=3200, max_frames=4000)
        durs = np.array([a.end_s - a.start_s for a in generate(spec).annotations("train")])
        assert len(durs) == 1000
        assert durs.min() >= 2.0 and durs.max() <= 20.0
        # log-uniform: median near the geometric mean
        assert abs(np.log(np.median(durs)) - np.log(np.sqrt(40.0))) < 0.2

    def test_instances_disjoint_and_inside(self):
        for v in generate(SMALL).videos:
            anns = v.annotations
            assert all(a.end_s > a.start_s for a in anns)
            assert all(a.end_s <= b.start_s for a, b in zip(anns, anns[1:]))
            assert anns[0].start_s >= 0 and anns[-1].end_s <= v.duration_s
            assert v.num_frames % SMALL.frame_align == 0

    def test_infeasible_packing_rejected(self):
        with pytest.raises(ValueError, match="infeasible"):
            generate(replace(SMALL, max_instances=20))

    def test_empty_classes_rejected(self):
        with pytest.raises(ValueError):
            generate(replace(SMALL, num_classes=0))

    def test_nearest_template_classifier(self):
        ds = generate(replace(SMALL, noise=0.0))
        spec = ds.spec
        correct = total = 0
        for v in ds.videos:
            clean = render(v.annotations, v.num_frames, spec, ds.templates, None)
            t = feature_times(clean.shape[1], spec.stride, spec.fps)
            for a in v.annotations:
                m = (t > a.start_s) & (t < a.end_s)
                u = (t[m] - a.start_s) / (a.end_s - a.start_s)
                dists = [np.linalg.norm(clean[:, m] - ds.templates.evaluate(c, u))
                         for c in range(1, spec.num_classes + 1)]
                correct += int(np.argmin(dists)) + 1 == a.label
                total += 1
        assert correct == total


class TestAlignment:
    @given(st.floats(0.0, 300.0), st.sampled_from([8, 16]))
    def test_seconds_index_round_trip(self, s, stride):
        fps = 25.0
        idx = int(np.floor(s * fps / stride))
        back = feature_times(idx + 1, stride, fps)[idx]
        assert abs(back - s) <= stride / fps


class TestOverlapInjection:
    def test_zero_fraction_unchanged(self):
        ds = generate(SMALL)
        assert overlap_injection(ds, 0.0) is ds

    def test_five_percent(self):
        ds = generate(replace(SMALL, num_train=40, num_test=20))
        out = overlap_injection(ds, 0.05)
        for split in ("train", "test"):
            frac = coverage_oracle(out.split(split), out.spec)
            assert 0.05 <= frac < 0.08, (split, frac)
        for v in out.videos:
            assert all(a.end_s > a.start_s for a in v.annotations)
            assert all(a.start_s >= 0 and a.end_s <= v.duration_s for a in v.annotations)

    def test_features_rerendered_with_same_noise(self):
        ds = generate(SMALL)
        out = overlap_injection(ds, 0.05)
        v0, v1 = ds.videos[0], out.videos[0]
        if v0.annotations == v1.annotations:
            np.testing.assert_array_equal(v0.features, v1.features)
        noise0 = v0.features - render(v0.annotations, v0.num_frames, ds.spec, ds.templates, None)
        noise1 = v1.features - render(v1.annotations, v1.num_frames, ds.spec, ds.templates, None)
        np.testing.assert_allclose(noise0, noise1, atol=1e-12)

    def test_range_checked(self):
        with pytest.raises(ValueError):
            overlap_injection(generate(SMALL), 0.3)


class TestFiles:
    def test_feature_round_trip(self, tmp_path):
        x = np.random.default_rng(0).standard_normal((4, 7))
        write_features(tmp_path / "a.feat", x, 8, 25.0)
        y, stride, fps = read_features(tmp_path / "a.feat")
        assert y.tobytes() == x.tobytes() and (stride, fps) == (8, 25.0)

    def test_header_layout(self, tmp_path):
        write_features(tmp_path / "a.feat", np.zeros((3, 5)), 8, 25.0)
        raw = (tmp_path / "a.feat").read_bytes()
        assert raw[:8] == b"AFOTADF1"
        assert len(raw) == 8 + 20 + 3 * 5 * 8

    def test_bad_magic(self, tmp_path):
        (tmp_path / "x.feat").write_bytes(b"nope" * 10)
        with pytest.raises(ValueError):
            read_features(tmp_path / "x.feat")

    def test_dataset_round_trip(self, tmp_path):
        ds = generate(replace(SMALL, num_train=3, num_test=2))
        save_dataset(ds, tmp_path)
        back = load_dataset(tmp_path)
        assert back.spec == ds.spec
        assert [v.name for v in back.videos] == [v.name for v in ds.videos]
        for a, b in zip(ds.videos, back.videos):
            assert a.annotations == b.annotations
            np.testing.assert_array_equal(a.features, b.features)
