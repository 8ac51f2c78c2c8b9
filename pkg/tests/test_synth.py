"""Synthetic data generation and the PPM/JSONL dataset format."""

import os

import numpy as np
import pytest

from sanl.synth import (CATEGORY_NAMES, DatasetFormatError, LANDMARK_NAMES,
                        LandmarkAnnotation, SynthSpec, garment_mask, garment_template,
                        generate_annotation, generate_sample, read_dataset, read_ppm,
                        write_dataset, write_ppm)


def test_landmark_order_constant():
    assert LANDMARK_NAMES == ("l_collar", "r_collar", "l_sleeve", "r_sleeve",
                              "l_waist", "r_waist", "l_hem", "r_hem")
    assert len(CATEGORY_NAMES) == 4


def test_identity_pose_matches_template():
    spec = SynthSpec(seed=3, count=10, occlusion_prob=0.0)
    for index in range(4):
        img, ann = generate_sample(spec, index, pose="identity", jitter=False)
        template = garment_template(ann.category, spec.image_size)
        assert np.allclose(np.asarray(ann.landmarks), template.landmarks)
        assert all(ann.visibility)


def test_determinism_bit_identical():
    spec = SynthSpec(seed=11, count=5)
    a_img, a_ann = generate_sample(spec, 2)
    b_img, b_ann = generate_sample(spec, 2)
    assert np.array_equal(a_img.data, b_img.data)
    assert a_ann == b_ann


def test_different_indices_differ():
    spec = SynthSpec(seed=11, count=5)
    a, _ = generate_sample(spec, 0)
    b, _ = generate_sample(spec, 1)
    assert not np.array_equal(a.data, b.data)


def test_image_range_and_quantization():
    spec = SynthSpec(seed=4, count=2)
    img, _ = generate_sample(spec, 0)
    assert img.shape == (3, 64, 64)
    assert img.data.min() >= 0.0 and img.data.max() <= 1.0
    assert np.array_equal(img.data, np.rint(img.data * 255) / 255)


def test_visible_landmarks_lie_in_bounds():
    spec = SynthSpec(seed=5, count=300, occlusion_prob=0.4)
    for i in range(300):
        ann = generate_annotation(spec, i)
        for (x, y), vis in zip(ann.landmarks, ann.visibility):
            if vis:
                assert 0 <= x <= spec.image_size - 1
                assert 0 <= y <= spec.image_size - 1


def test_visible_landmarks_sit_on_garment_pixels():
    spec = SynthSpec(seed=6, count=400, occlusion_prob=0.3)
    on, total = 0, 0
    for i in range(400):
        ann = generate_annotation(spec, i)
        mask = garment_mask(spec, i)
        for (x, y), vis in zip(ann.landmarks, ann.visibility):
            if vis:
                total += 1
                if mask[int(round(y)), int(round(x))]:
                    on += 1
    assert on / total >= 0.95


@pytest.mark.slow
def test_occlusion_rate_against_monte_carlo_oracle():
    prob = 0.3
    spec = SynthSpec(seed=7, count=100000, occlusion_prob=prob)

    def invisible_rate(count, offset=0):
        inv = tot = 0
        for i in range(offset, offset + count):
            ann = generate_annotation(spec, i)
            inv += sum(1 for v in ann.visibility if not v)
            tot += 8
        return inv / tot

    observed = invisible_rate(10000)
    oracle = invisible_rate(90000, offset=10000)  # 10x oracle, disjoint draw
    assert abs(observed - oracle) <= 0.03
    assert observed > 0.0


def test_category_mix_is_respected():
    spec = SynthSpec(seed=8, count=4000, category_mix=(0.7, 0.1, 0.1, 0.1))
    counts = np.zeros(4)
    for i in range(2000):
        counts[generate_annotation(spec, i).category] += 1
    freq = counts / counts.sum()
    assert abs(freq[0] - 0.7) < 0.05


def test_spec_validation():
    with pytest.raises(ValueError):
        SynthSpec(seed=0, count=0)
    with pytest.raises(ValueError):
        SynthSpec(seed=0, count=1, occlusion_prob=1.5)
    with pytest.raises(ValueError):
        SynthSpec(seed=0, count=1, category_mix=(1.0, 1.0))


def test_dataset_round_trip(tmp_path):
    spec = SynthSpec(seed=9, count=12, occlusion_prob=0.5)
    directory = str(tmp_path / "data")
    write_dataset(spec, directory)
    spec_back, samples = read_dataset(directory)
    assert spec_back == spec
    assert len(samples) == 12
    for i, (image, ann) in enumerate(samples):
        expect_img, expect_ann = generate_sample(spec, i)
        assert np.array_equal(image.data, expect_img.data)
        assert ann == expect_ann


def test_dataset_file_cardinality(tmp_path):
    spec = SynthSpec(seed=10, count=100)
    directory = str(tmp_path / "data")
    write_dataset(spec, directory)
    ppms = [f for f in os.listdir(directory) if f.endswith(".ppm")]
    assert len(ppms) == 100
    with open(os.path.join(directory, "annotations.jsonl")) as fh:
        lines = [ln for ln in fh if ln.strip()]
    assert len(lines) == 100


def test_ppm_round_trip(tmp_path):
    rng = np.random.default_rng(11)
    img = rng.integers(0, 256, (5, 7, 3)).astype(np.uint8)
    path = str(tmp_path / "x.ppm")
    write_ppm(path, img)
    assert np.array_equal(read_ppm(path), img)


def test_truncated_ppm_header_names_the_file(tmp_path):
    path = tmp_path / "broken.ppm"
    path.write_bytes(b"P6\n5 ")
    with pytest.raises(DatasetFormatError) as err:
        read_ppm(str(path))
    assert "broken.ppm" in str(err.value)


def test_truncated_ppm_pixels_reports_byte_count(tmp_path):
    path = tmp_path / "short.ppm"
    path.write_bytes(b"P6\n2 2\n255\n" + b"\x00" * 5)
    with pytest.raises(DatasetFormatError) as err:
        read_ppm(str(path))
    assert "short.ppm" in str(err.value) and "truncated" in str(err.value)


def test_wrong_magic_rejected(tmp_path):
    path = tmp_path / "not.ppm"
    path.write_bytes(b"P3\n2 2\n255\n")
    with pytest.raises(DatasetFormatError):
        read_ppm(str(path))


def test_malformed_annotation_line_reports_position(tmp_path):
    spec = SynthSpec(seed=12, count=2)
    directory = str(tmp_path / "data")
    write_dataset(spec, directory)
    ann_path = os.path.join(directory, "annotations.jsonl")
    with open(ann_path) as fh:
        lines = fh.readlines()
    lines[1] = "{broken json\n"
    with open(ann_path, "w") as fh:
        fh.writelines(lines)
    with pytest.raises(DatasetFormatError) as err:
        read_dataset(directory)
    assert "line 2" in str(err.value)


def test_annotation_json_round_trip():
    ann = LandmarkAnnotation(landmarks=[(1.5, 2.25)] * 8,
                             visibility=[True, False] * 4,
                             category=3, image_id="img_00042")
    assert LandmarkAnnotation.from_json(ann.to_json()) == ann
