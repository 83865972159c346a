import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gelanvit import data as D
from gelanvit.data import AugConfig, Sample


@pytest.fixture(scope="module")
def tiny(tmp_path_factory):
    root = tmp_path_factory.mktemp("ds") / "tiny"
    D.gen_dataset(6, 3, 64, 42, root)
    return root


def _files(root):
    return {p.relative_to(root).as_posix(): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


# -- generation --------------------------------------------------------------

def test_same_seed_gives_byte_identical_dataset(tiny, tmp_path):
    again = tmp_path / "again"
    D.gen_dataset(6, 3, 64, 42, again)
    assert _files(tiny) == _files(again)


def test_different_seed_changes_images(tiny, tmp_path):
    other = tmp_path / "other"
    D.gen_dataset(6, 3, 64, 43, other)
    assert _files(tiny)["images/000000.ppm"] != _files(other)["images/000000.ppm"]


def test_per_image_stream_is_order_independent():
    a = D.render_sample(4, 7, 3, (48, 48))
    D.render_sample(0, 7, 3, (48, 48))
    b = D.render_sample(4, 7, 3, (48, 48))
    assert np.array_equal(a.image, b.image) and np.array_equal(a.labels, b.labels)


def test_manifest_contents(tiny):
    m = json.loads((tiny / "manifest.json").read_text())
    assert m["seed"] == 42 and m["count"] == 6 and m["classes"] == 3
    assert m["class_names"] == ["satellite", "disc", "crescent"]
    assert m["image_hw"] == [64, 64]
    assert len(m["anchors"]["2"]) == 2 and len(m["anchors"]["3"]) == 3
    ds = D.Dataset(tiny)
    assert m["objects"] == sum(len(ds[i].labels) for i in range(len(ds)))
    for n in (2, 3):
        areas = [w * h for g in ds.anchors(n) for w, h in g]
        assert areas == sorted(areas) and min(areas) > 0


def test_labels_inside_image_and_objects_in_range(tiny):
    ds = D.Dataset(tiny)
    for i in range(len(ds)):
        s = ds[i]
        assert D.MIN_OBJECTS <= len(s.labels) <= D.MAX_OBJECTS
        D.validate_labels(s.labels, ds.num_classes)


def test_label_boxes_are_tight_around_rendered_pixels():
    # pixel-scan oracle: the box interior holds object pixels and each box edge row/column is touched
    for index in range(8):
        s = D.render_sample(index, 11, 3, (64, 64))
        bg = D._starfield(64, 64, np.random.default_rng([11, index]))
        fg = np.any(np.abs(s.image - bg) > 0, axis=0)
        for _, cx, cy, w, h in s.labels:
            x1, x2 = int(round((cx - w / 2) * 64)), int(round((cx + w / 2) * 64))
            y1, y2 = int(round((cy - h / 2) * 64)), int(round((cy + h / 2) * 64))
            inside = fg[y1:y2, x1:x2]
            assert inside.any()
            assert inside[0].any() and inside[-1].any() and inside[:, 0].any() and inside[:, -1].any()
            assert (s.image[:, y1:y2, x1:x2].max(0) > bg[:, y1:y2, x1:x2].max(0)).any()


def test_refuses_to_overwrite_foreign_directory(tmp_path):
    (tmp_path / "keep.txt").write_text("mine")
    with pytest.raises(D.GenerationError, match="refusing"):
        D.gen_dataset(1, 1, 32, 0, tmp_path)
    assert (tmp_path / "keep.txt").read_text() == "mine"


def test_regenerating_over_a_dataset_replaces_it(tmp_path):
    root = tmp_path / "ds"
    D.gen_dataset(3, 2, 32, 0, root)
    D.gen_dataset(2, 2, 32, 0, root)
    assert len(D.Dataset(root)) == 2
    assert len(list((root / "images").iterdir())) == 2


def test_placement_failure_names_image(monkeypatch, tmp_path):
    monkeypatch.setattr(D, "PLACEMENT_RETRIES", 0)
    with pytest.raises(D.GenerationError, match="image 0"):
        D.gen_dataset(1, 1, 32, 0, tmp_path / "x")
    assert not (tmp_path / "x").exists()


def test_generation_argument_errors(tmp_path):
    with pytest.raises(ValueError):
        D.gen_dataset(0, 1, 32, 0, tmp_path / "a")
    with pytest.raises(ValueError):
        D.gen_dataset(1, D.MAX_CLASSES + 1, 32, 0, tmp_path / "b")


def test_dataset_requires_manifest(tmp_path):
    with pytest.raises(FileNotFoundError):
        D.Dataset(tmp_path)


def test_collate_targets(tiny):
    ds = D.Dataset(tiny)
    images, targets = D.collate([ds[0], ds[1]])
    assert images.shape == (2, 3, 64, 64)
    assert len(targets) == len(ds[0].labels) + len(ds[1].labels)
    assert set(targets[:, 0]) == {0.0, 1.0}
    assert np.array_equal(targets[targets[:, 0] == 1, 1:], ds[1].labels)


# -- PPM --------------------------------------------------------------------

def test_ppm_round_trip_is_exact_on_the_byte_grid(tmp_path):
    img = np.random.default_rng(0).integers(0, 256, (3, 5, 7)) / 255.0
    D.write_ppm(tmp_path / "a.ppm", img)
    assert np.array_equal(D.read_ppm(tmp_path / "a.ppm"), img)
    assert (tmp_path / "a.ppm").read_bytes().startswith(b"P6\n7 5\n255\n")


def test_ppm_header_comments_and_truncation(tmp_path):
    body = bytes(range(12))
    (tmp_path / "c.ppm").write_bytes(b"P6\n# note\n2 2\n255\n" + body)
    assert D.read_ppm(tmp_path / "c.ppm").shape == (3, 2, 2)
    (tmp_path / "t.ppm").write_bytes(b"P6\n2 2\n255\n" + body[:5])
    with pytest.raises(ValueError, match="truncated"):
        D.read_ppm(tmp_path / "t.ppm")
    (tmp_path / "p3.ppm").write_bytes(b"P3\n1 1\n255\n0 0 0\n")
    with pytest.raises(ValueError, match="P6"):
        D.read_ppm(tmp_path / "p3.ppm")


# -- labels ------------------------------------------------------------------------

def test_empty_label_file(tmp_path):
    (tmp_path / "e.txt").write_text("")
    assert D.load_labels(tmp_path / "e.txt").shape == (0, 5)


@settings(max_examples=100, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), n=st.integers(0, 6))
def test_label_round_trip_within_1e6(tmp_path_factory, seed, n):
    rng = np.random.default_rng(seed)
    w, h = rng.uniform(0.01, 0.5, (2, n))
    cx = rng.uniform(w / 2, 1 - w / 2)
    cy = rng.uniform(h / 2, 1 - h / 2)
    labels = np.stack([rng.integers(0, 6, n).astype(float), cx, cy, w, h], 1) if n else np.zeros((0, 5))
    path = tmp_path_factory.mktemp("lab") / "l.txt"
    D.write_labels(path, labels)
    back = D.load_labels(path)
    assert back.shape == labels.shape
    assert np.max(np.abs(back - labels), initial=0.0) <= 1e-6


@pytest.mark.parametrize(
    "line, match",
    [
        ("0 0.5 0.5 0.1", "expected 5 fields"),
        ("0 0.5 0.5 0.1 0.1 7", "expected 5 fields"),
        ("x 0.5 0.5 0.1 0.1", "non-numeric"),
        ("0 0.5 abc 0.1 0.1", "non-numeric"),
        ("1.5 0.5 0.5 0.1 0.1", "non-numeric"),
        ("0 0.5 0.5 nan 0.1", "non-finite"),
        ("0 0.99 0.5 0.1 0.1", "unit square"),
        ("0 0.5 0.5 0 0.1", "non-positive"),
        ("-1 0.5 0.5 0.1 0.1", "class"),
    ],
)
def test_malformed_label_line_names_line_number(tmp_path, line, match):
    path = tmp_path / "bad.txt"
    path.write_text("0 0.5 0.5 0.2 0.2\n\n" + line + "\n")
    with pytest.raises(D.LabelError, match=rf"bad.txt:3: .*{match}"):
        D.load_labels(path)


@settings(max_examples=200, deadline=None)
@given(fields=st.lists(st.text(alphabet="0123456789.-ex ", min_size=0, max_size=6), min_size=1, max_size=7))
def test_fuzzed_label_lines_parse_or_fail_with_line_number(fields):
    line = " ".join(f for f in fields if f.strip())
    text = "0 0.5 0.5 0.2 0.2\n" + line + "\n"
    try:
        rows = D.parse_labels(text, "f")
    except D.LabelError as exc:
        assert str(exc).startswith("f:2:")
    else:
        assert len(rows) in (1, 2)
        D.validate_labels(rows)


def test_class_bound_checked_on_load(tmp_path):
    path = tmp_path / "l.txt"
    path.write_text("2 0.5 0.5 0.2 0.2\n")
    with pytest.raises(D.LabelError, match="l.txt:1"):
        D.load_labels(path, num_classes=2)


def test_write_labels_validates():
    with pytest.raises(D.LabelError):
        D.write_labels("/nonexistent/never.txt", np.array([[0, 0.95, 0.5, 0.2, 0.2]]))


def test_labels_to_gt_pixels():
    (g,) = D.labels_to_gt(np.array([[1, 0.5, 0.25, 0.5, 0.5]]), "i", (32, 64))
    assert (g.class_id, g.x1, g.y1, g.x2, g.y2) == (1, 16.0, 0.0, 48.0, 16.0)


# -- augmentation ------------------------------------------------------------------------

@pytest.fixture
def sample():
    return D.render_sample(1, 5, 3, (48, 48))


def test_identity_augmentation_returns_input(sample):
    out = D.augment(sample, AugConfig.identity(), np.random.default_rng(0))
    assert np.array_equal(out.image, sample.image) and np.array_equal(out.labels, sample.labels)
    assert out.image is not sample.image


def test_augment_is_reproducible(sample):
    cfg = AugConfig()
    a = D.augment(sample, cfg, np.random.default_rng(9))
    b = D.augment(sample, cfg, np.random.default_rng(9))
    assert np.array_equal(a.image, b.image) and np.array_equal(a.labels, b.labels)


def test_aug_config_rejects_negative_gain():
    with pytest.raises(ValueError, match="hsv_s"):
        AugConfig(hsv_s=-0.1)


def test_hsv_factor_statistics():
    cfg = AugConfig()
    s, v = D.hsv_factors(cfg, np.random.default_rng(0), size=10_000)
    assert 1 - cfg.hsv_s <= s.min() and s.max() <= 1 + cfg.hsv_s
    assert 1 - cfg.hsv_v <= v.min() and v.max() <= 1 + cfg.hsv_v
    assert abs(s.mean() - 1) < 0.02 and abs(v.mean() - 1) < 0.02


def test_hsv_unit_gains_round_trip(sample):
    assert np.max(np.abs(D.apply_hsv(sample.image, 1.0, 1.0) - sample.image)) <= 1e-6


def test_value_gain_scales_brightness():
    img = np.full((3, 2, 2), 0.4)
    assert np.allclose(D.apply_hsv(img, 1.0, 0.5), 0.2)
    assert np.allclose(D.apply_hsv(img, 1.0, 5.0), 1.0)


def test_scale_moves_centers_by_the_factor():
    labels = np.array([[0, 0.5, 0.5, 0.2, 0.2], [1, 0.6, 0.3, 0.1, 0.1]])
    out = D.scale_labels(labels, 1.25)
    assert np.allclose(out[:, 1:3] - 0.5, (labels[:, 1:3] - 0.5) * 1.25)
    assert np.allclose(out[:, 3:], labels[:, 3:] * 1.25)


def test_scale_clips_and_drops_slivers():
    # scaled by 2 about the centre the first box spans x in [0.8, 1.2]: half survives
    # the second spans x in [0.998, 1.038]: 5% of it stays in the image
    labels = np.array([[0, 0.75, 0.5, 0.2, 0.2], [1, 0.759, 0.5, 0.02, 0.2]])
    out = D.scale_labels(labels, 2.0)
    assert len(out) == 1
    assert np.allclose(out[0], [0, 0.9, 0.5, 0.2, 0.4])


def test_scaled_image_keeps_object_under_scaled_label():
    img = np.zeros((3, 40, 40))
    img[:, 16:24, 16:24] = 1.0
    out = D.scale_image(img, 0.5)
    assert np.count_nonzero(out[0] > 0.5) == 16
    assert np.all(out[0, 18:22, 18:22] == 1.0)


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 2**32 - 1))
def test_augmented_labels_stay_valid(seed):
    rng = np.random.default_rng(seed)
    s = D.render_sample(int(rng.integers(100)), 3, 3, (32, 32))
    out = D.augment(s, AugConfig(), rng)
    D.validate_labels(out.labels, 3)
    assert out.image.min() >= 0.0 and out.image.max() <= 1.0


def test_mixup_zero_never_blends(sample):
    partner = D.render_sample(2, 5, 3, (48, 48))
    out = D.augment(sample, AugConfig(0, 0, 0, 0), np.random.default_rng(0), partner)
    assert np.array_equal(out.image, sample.image)
    mixed = D.augment(sample, AugConfig(0, 0, 0, 1.0), np.random.default_rng(0), partner)
    assert len(mixed.labels) == len(sample.labels) + len(partner.labels)
    assert not np.array_equal(mixed.image, sample.image)


def test_sample_hw():
    assert Sample(np.zeros((3, 4, 5)), np.zeros((0, 5))).hw == (4, 5)
