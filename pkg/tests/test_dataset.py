import filecmp
import json
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from attnalign.dataset import (
    DEFAULT_TARGET_SHIFT,
    DatasetFormatError,
    DomainShift,
    SceneSpec,
    batch_images,
    generate,
    load,
    quantize,
    read_ppm,
    render_scene,
    split_specs,
    write_ppm,
)
from attnalign.detector import iou, iou_matrix


def same_tree(a, b) -> bool:
    cmp = filecmp.dircmp(a, b)
    if cmp.left_only or cmp.right_only or cmp.diff_files:
        return False
    _, mismatch, errors = filecmp.cmpfiles(a, b, cmp.common_files, shallow=False)
    if mismatch or errors:
        return False
    return all(same_tree(a / d, b / d) for d in cmp.common_dirs)


def test_same_seed_gives_byte_identical_directories(tmp_path):
    spec = SceneSpec(domain="target", seed=7, shift=DEFAULT_TARGET_SHIFT)
    generate(spec, 12, tmp_path / "a")
    generate(spec, 12, tmp_path / "b")
    assert same_tree(tmp_path / "a", tmp_path / "b")
    generate(replace(spec, seed=8), 12, tmp_path / "c")
    assert not same_tree(tmp_path / "a", tmp_path / "c")


def test_single_object_scene(tmp_path):
    spec = SceneSpec(min_objects=1, max_objects=1, seed=3)
    generate(spec, 1, tmp_path)
    lines = (tmp_path / "annotations.jsonl").read_text().splitlines()
    assert len(lines) == 1
    row = json.loads(lines[0])
    assert row["image_id"] == 0 and len(row["boxes"]) == 1
    b = row["boxes"][0]
    assert 0 <= b["cx"] - b["w"] / 2 and b["cx"] + b["w"] / 2 <= 1
    assert 0 <= b["cy"] - b["h"] / 2 and b["cy"] + b["h"] / 2 <= 1


def test_domain_metadata(tmp_path):
    generate(SceneSpec(domain="target", seed=5, shift=DEFAULT_TARGET_SHIFT), 2, tmp_path / "t")
    generate(SceneSpec(domain="source", seed=4), 2, tmp_path / "s")
    t = json.loads((tmp_path / "t" / "domain.json").read_text())
    s = json.loads((tmp_path / "s" / "domain.json").read_text())
    assert t["domain"] == "target" and t["seed"] == 5 and t["shift"]["noise_sigma"] == 0.12
    assert s == {"domain": "source", "seed": 4, "shift": {}}


def test_round_trip_preserves_boxes_and_pixels(tmp_path):
    spec = SceneSpec(seed=11)
    generate(spec, 6, tmp_path)
    samples = load(tmp_path)
    assert [s.image_id for s in samples] == list(range(6))
    for s in samples:
        image, boxes = render_scene(spec, s.image_id)
        assert len(boxes) == len(s.boxes)
        for a, b in zip(boxes, s.boxes):
            assert iou(a, b) == 1.0 and a.class_id == b.class_id
        assert np.abs(s.image - image).max() <= 1 / 255 + 1e-6
        assert s.domain_tag == 0
    assert batch_images(samples).shape == (6, 3, 64, 64)


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 2**32 - 1))
def test_quantization_error_bounded(tmp_path_factory, seed):
    rng = np.random.default_rng(seed)
    image = rng.uniform(size=(3, 5, 7))
    path = tmp_path_factory.mktemp("ppm") / "x.ppm"
    write_ppm(path, image)
    back = read_ppm(path).astype(np.float64) / 255
    assert np.abs(back - image).max() <= 1 / 255
    np.testing.assert_array_equal(read_ppm(path), quantize(image))


def test_ppm_header_with_comments(tmp_path):
    path = tmp_path / "c.ppm"
    path.write_bytes(b"P6\n# a comment\n2 1\n255\n" + bytes([1, 2, 3, 4, 5, 6]))
    np.testing.assert_array_equal(read_ppm(path)[:, 0, :], [[1, 4], [2, 5], [3, 6]])


@pytest.mark.parametrize(
    "payload, fragment",
    [
        (b"P6\n4 4\n255\n" + bytes(10), "truncated"),
        (b"P3\n4 4\n255\n", "magic"),
        (b"P6\n4", ""),
        (b"", ""),
    ],
)
def test_malformed_ppm_raises_format_error(tmp_path, payload, fragment):
    path = tmp_path / "bad.ppm"
    path.write_bytes(payload)
    with pytest.raises(DatasetFormatError) as info:
        read_ppm(path)
    assert str(path) in str(info.value)
    assert fragment in str(info.value).lower()
    assert info.value.offset >= 0


def test_truncated_image_in_dataset(tmp_path):
    generate(SceneSpec(seed=1), 3, tmp_path)
    img = tmp_path / "images" / "000001.ppm"
    img.write_bytes(img.read_bytes()[:500])
    with pytest.raises(DatasetFormatError):
        load(tmp_path)


def test_malformed_annotation_reports_offset(tmp_path):
    generate(SceneSpec(seed=1), 2, tmp_path)
    ann = tmp_path / "annotations.jsonl"
    first = ann.read_text().splitlines()[0]
    ann.write_text(first + "\n{not json\n")
    with pytest.raises(DatasetFormatError) as info:
        load(tmp_path)
    assert info.value.offset >= len(first) + 1


def test_scene_invariants_over_many_images():
    spec = SceneSpec(seed=2)
    counts = np.zeros(2)
    for i in range(300):
        image, boxes = render_scene(spec, i)
        assert image.shape == (3, 64, 64) and image.min() >= 0 and image.max() <= 1
        assert 1 <= len(boxes) <= 4
        arr = np.stack([b.as_array() for b in boxes])
        assert (arr[:, :2] - arr[:, 2:] / 2 >= 0).all() and (arr[:, :2] + arr[:, 2:] / 2 <= 1).all()
        overlaps = iou_matrix(arr, arr)
        assert (overlaps[~np.eye(len(arr), dtype=bool)] <= 0.3).all()
        for b in boxes:
            counts[b.class_id] += 1
    # both shapes appear in roughly equal numbers
    assert abs(counts[0] - counts[1]) / counts.sum() < 0.1


def test_shift_keeps_pixels_in_range():
    rng = np.random.default_rng(0)
    shift = DomainShift(gain=1.5, noise_sigma=0.5, haze_alpha=0.3)
    out = shift.apply(rng.uniform(size=(3, 8, 8)), rng)
    assert out.min() >= 0 and out.max() <= 1
    assert DomainShift().is_identity and not DEFAULT_TARGET_SHIFT.is_identity


def test_domains_differ_in_mean_intensity():
    splits = split_specs(SceneSpec(shift=DEFAULT_TARGET_SHIFT), seed=0)
    src = np.mean([render_scene(splits["source_train"], i)[0].mean() for i in range(200)])
    tgt = np.mean([render_scene(splits["target_train"], i)[0].mean() for i in range(200)])
    assert abs(src - tgt) >= 0.05


def test_split_seeds_are_distinct():
    specs = split_specs(SceneSpec(), seed=3)
    assert len({s.seed for s in specs.values()}) == 4
    assert specs["target_eval"].domain == "target" and specs["source_eval"].domain == "source"


def test_spec_validation(tmp_path):
    with pytest.raises(ValueError):
        SceneSpec(domain="other")
    with pytest.raises(ValueError):
        SceneSpec(min_objects=3, max_objects=2)
    with pytest.raises(ValueError):
        generate(SceneSpec(), 0, tmp_path)
