import filecmp
import io
from pathlib import Path

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from capnet import dataset
from capnet.dataset import (AnnotationFormatError, AnnotationParseError, DatasetError, SyntheticSpec,
                            dump_annotations, generate_synthetic, load_annotations, read_ppm,
                            read_stimulus, scan_video_dir, write_ppm)
from capnet.records import AffectState, InvalidLabel, is_valid
from capnet.sampler import ConfigError, SamplerConfig


def test_load_annotations_examples():
    text = "valence,arousal\n0.5,-0.3\n-5,-5\n1.0,1.0\n"
    labels = load_annotations(io.StringIO(text))
    assert labels[1] == AffectState(0.5, -0.3)
    assert not is_valid(labels[2]) and isinstance(labels[2], InvalidLabel)
    assert labels[3] == AffectState(1.0, 1.0)


def test_out_of_range_marks_invalid():
    labels = load_annotations(io.StringIO("valence,arousal\n1.0001,0\n0,-1.5\n-1,1\n"))
    assert [is_valid(labels[i]) for i in (1, 2, 3)] == [False, False, True]


def test_missing_header():
    with pytest.raises(AnnotationFormatError):
        load_annotations(io.StringIO("0.5,0.5\n"))
    with pytest.raises(AnnotationFormatError):
        load_annotations(io.StringIO(""))


@pytest.mark.parametrize("bad", ["0.5", "a,b", "0.1,0.2,0.3", "nan,0"])
def test_malformed_line_reports_line_number(bad):
    with pytest.raises(AnnotationParseError) as exc:
        load_annotations(io.StringIO(f"valence,arousal\n0,0\n{bad}\n"))
    assert exc.value.line_number == 3


finite = st.floats(-1, 1, allow_nan=False)
label_values = st.one_of(st.tuples(finite, finite),
                         st.tuples(st.floats(-10, 10, allow_nan=False), st.floats(-10, 10, allow_nan=False)))


@settings(max_examples=100, deadline=None)
@given(st.lists(label_values, min_size=0, max_size=30))
def test_annotation_round_trip_is_byte_identical(values):
    text = "valence,arousal\n" + "".join(f"{float(v)!r},{float(a)!r}\n" for v, a in values)
    assert dump_annotations(load_annotations(io.StringIO(text))) == text


def test_ppm_round_trip(tmp_path):
    img = np.random.default_rng(0).integers(0, 256, size=(5, 7, 3), dtype=np.uint8)
    write_ppm(tmp_path / "a.ppm", img)
    np.testing.assert_array_equal(read_ppm(tmp_path / "a.ppm"), img)


def test_ppm_header_with_comment(tmp_path):
    p = tmp_path / "c.ppm"
    p.write_bytes(b"P6\n# made by hand\n2 1\n255\n" + bytes([1, 2, 3, 4, 5, 6]))
    np.testing.assert_array_equal(read_ppm(p), [[[1, 2, 3], [4, 5, 6]]])
    (tmp_path / "d.ppm").write_bytes(b"P3\n1 1\n255\n0 0 0\n")
    with pytest.raises(DatasetError):
        read_ppm(tmp_path / "d.ppm")


def test_prepare_image_resizes_and_scales():
    img = np.full((16, 16, 3), 255, dtype=np.uint8)
    out = dataset.prepare_image(img, 224)
    assert out.shape == (224, 224, 3) and out.dtype == np.float64
    assert np.all(out == 1.0)


def _write_video(root: Path, vid: str, n_labels: int, frames):
    (root / vid).mkdir(parents=True)
    (root / f"{vid}.txt").write_text("valence,arousal\n" + "0.1,0.2\n" * n_labels)
    px = np.zeros((2, 2, 3), dtype=np.uint8)
    for i in frames:
        write_ppm(root / vid / f"{i:05d}.ppm", px)


def test_scan_complete_video(tmp_path):
    _write_video(tmp_path, "a", 300, range(1, 301))
    (v,) = scan_video_dir(tmp_path)
    assert len(v.frames) == 300 and len(v.labels) == 300
    assert v.frames[7].path.name == "00007.ppm"


def test_scan_sparse_video(tmp_path):
    _write_video(tmp_path, "a", 300, [i for i in range(1, 301) if i != 90])
    (v,) = scan_video_dir(tmp_path)
    assert 90 not in v.frames and 89 in v.frames


def test_scan_fewer_frames_than_labels(tmp_path):
    _write_video(tmp_path, "a", 300, range(1, 251))
    (v,) = scan_video_dir(tmp_path)
    listed = sum(1 for p in (tmp_path / "a").iterdir() if p.suffix == ".ppm")
    assert len(v.frames) == listed == 250
    assert len(v.labels) == 300


def test_scan_skips_unparseable_names(tmp_path):
    _write_video(tmp_path, "a", 3, [1, 2])
    write_ppm(tmp_path / "a" / "frame_x.ppm", np.zeros((1, 1, 3), np.uint8))
    write_ppm(tmp_path / "a" / "00000.ppm", np.zeros((1, 1, 3), np.uint8))
    (v,) = scan_video_dir(tmp_path)
    assert sorted(v.frames) == [1, 2] and v.skipped_files == 2


def test_scan_missing_frame_dir(tmp_path):
    (tmp_path / "ghost.txt").write_text("valence,arousal\n0,0\n")
    with pytest.raises(DatasetError, match="ghost"):
        scan_video_dir(tmp_path)


# -- synthetic ---------------------------------------------------------------

def small_spec(**kw):
    base = dict(num_videos=2, frames_per_video=120, seed=1, image_size=2)
    base.update(kw)
    return SyntheticSpec(**base)


@pytest.mark.parametrize("c", [0.0, 1.0])
def test_constant_stimulus_labels(tmp_path, c):
    videos = generate_synthetic(small_spec(constant_stimulus=c), tmp_path)
    valid = [lab for v in videos for lab in v.labels.values() if is_valid(lab)]
    assert valid and all(lab == (c, c) for lab in valid)


def test_seed7_frame100_matches_stimulus_log(tmp_path):
    spec = SyntheticSpec(seed=7, num_videos=1)
    (v,) = generate_synthetic(spec, tmp_path)
    u = read_stimulus(tmp_path / v.video_id / "stimulus.csv")
    want_v = sum(u[t] for t in range(10, 91, 10)) / 9
    want_a = sum(u[t] for t in (10, 20, 30, 40, 50)) / 5
    assert v.labels[100].valence == pytest.approx(want_v, abs=1e-12)
    assert v.labels[100].arousal == pytest.approx(want_a, abs=1e-12)


def test_image_encodes_stimulus(tmp_path):
    (v,) = generate_synthetic(small_spec(num_videos=1), tmp_path)
    u = read_stimulus(tmp_path / v.video_id / "stimulus.csv")
    for t in (1, 50, 120):
        img = read_ppm(v.frames[t].path)
        assert np.all(img == img[0, 0, 0])
        assert img[0, 0, 0] / 127.5 - 1 == pytest.approx(u[t], abs=1e-12)


def test_synthetic_is_bit_deterministic(tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    generate_synthetic(small_spec(), a)
    generate_synthetic(small_spec(), b)
    cmp = filecmp.dircmp(a, b)
    assert not cmp.left_only and not cmp.right_only
    for sub in ["."] + [p.name for p in a.iterdir() if p.is_dir()]:
        names = [p.name for p in (a / sub).iterdir() if p.is_file()]
        match, mismatch, errors = filecmp.cmpfiles(a / sub, b / sub, names, shallow=False)
        assert not mismatch and not errors and len(match) == len(names)


def test_invalid_labels_exactly_where_past_incomplete(tmp_path):
    sc = SamplerConfig(w=2)
    videos = generate_synthetic(small_spec(sampler=sc), tmp_path)
    for v in videos:
        for t, lab in v.labels.items():
            assert is_valid(lab) == (t - 60 >= 1)


def test_lagged_step_law(tmp_path):
    (v,) = generate_synthetic(small_spec(num_videos=1, stimulus_law="LaggedStep"), tmp_path)
    u = read_stimulus(tmp_path / v.video_id / "stimulus.csv")
    for t in range(91, 121):
        assert v.labels[t].valence == u[t - 10]
        assert v.labels[t].arousal == (0.5 if u[t - 10] >= 0 else -0.5)


@pytest.mark.parametrize("kw, needle", [
    (dict(frames_per_video=90), "frames_per_video"),
    (dict(num_videos=0), "num_videos"),
    (dict(stimulus_law="Sine"), "stimulus_law"),
    (dict(frame_rate=60, sampler=SamplerConfig()), "frame rate"),
    (dict(frame_rate=25), "f\\*d"),
])
def test_spec_validation(tmp_path, kw, needle):
    with pytest.raises(ConfigError, match=needle):
        generate_synthetic(small_spec(**kw), tmp_path)


def test_split_videos_is_by_video(tmp_path):
    videos = generate_synthetic(small_spec(num_videos=5), tmp_path)
    train, val = dataset.split_videos(videos, 0.2)
    assert [v.video_id for v in val] == ["synth_004"] and len(train) == 4
