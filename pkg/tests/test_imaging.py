import numpy as np
import pytest

from cpn.imaging import (
    LabeledSample, compute_dataset_mean, generate_shapes_dataset, labels_from_mask, load_image, load_mask,
    quantize, read_dataset, save_image, save_mask, write_dataset,
)


@pytest.fixture(scope="module")
def shapes200():
    return generate_shapes_dataset(200, 3, 64, 0)


def test_generation_is_deterministic():
    (a,), _ = generate_shapes_dataset(1, 3, 64, 7)
    (b,), _ = generate_shapes_dataset(1, 3, 64, 7)
    assert a.image.tobytes() == b.image.tobytes()
    assert a.mask.tobytes() == b.mask.tobytes()
    assert a.labels.tobytes() == b.labels.tobytes()


def test_labels_match_masks(shapes200):
    for s in shapes200[0]:
        assert s.mask.max() <= 3
        np.testing.assert_array_equal(s.labels, labels_from_mask(s.mask, 3))
        assert 1 <= s.labels.sum() <= 3


def test_class_frequency_in_band(shapes200):
    freq = np.mean([s.labels for s in shapes200[0]], axis=0)
    assert np.all((freq >= 0.2) & (freq <= 0.8)), freq


def test_images_in_unit_range_and_quantized(shapes200):
    for s in shapes200[0][:20]:
        assert s.image.min() >= 0 and s.image.max() <= 1
        np.testing.assert_array_equal(np.round(s.image * 255), s.image * 255)


def test_markers_are_small(shapes200):
    # marker colours are saturated primaries; body and background never are
    for s in shapes200[0][:40]:
        for c in range(1, 4):
            area = (s.mask == c).sum()
            if not area:
                continue
            sat = (s.image.max(0) - s.image.min(0) > 0.99) & (s.mask == c)
            assert 0 < sat.sum() <= 0.1 * area


@pytest.mark.parametrize("kw", [dict(n=0), dict(classes=1), dict(classes=6), dict(size=16)])
def test_generation_rejects(kw):
    args = dict(n=2, classes=3, size=64, seed=0) | kw
    with pytest.raises(ValueError):
        generate_shapes_dataset(**args)


class TestMean:
    def test_constant(self):
        np.testing.assert_allclose(compute_dataset_mean([np.full((3, 4, 4), 0.2)]), 0.2)

    def test_symmetric(self):
        np.testing.assert_allclose(compute_dataset_mean([np.zeros((3, 2, 2)), np.ones((3, 2, 2))]), 0.5)

    def test_loop_oracle(self, rng):
        imgs = [rng.uniform(size=(3, 5, 6)) for _ in range(3)] + [rng.uniform(size=(3, 2, 3))]
        got = compute_dataset_mean(imgs)
        for ch in range(3):
            tot, cnt = 0.0, 0
            for im in imgs:
                for i in range(im.shape[1]):
                    for j in range(im.shape[2]):
                        tot += im[ch, i, j]
                        cnt += 1
            assert got[ch] == pytest.approx(tot / cnt, abs=1e-12)

    def test_accepts_samples(self):
        s = LabeledSample(np.full((3, 2, 2), 0.4), np.zeros(3), np.zeros((2, 2), int))
        np.testing.assert_allclose(compute_dataset_mean([s]), 0.4)


class TestImageIO:
    def test_roundtrip_bound(self, rng, tmp_path):
        img = rng.uniform(size=(3, 17, 23))
        save_image(img, tmp_path / "a.png")
        back = load_image(tmp_path / "a.png")
        assert np.max(np.abs(back - img)) <= 1 / 255 + 1e-12

    def test_idempotent(self, rng, tmp_path):
        save_image(rng.uniform(size=(3, 8, 8)), tmp_path / "a.png")
        once = load_image(tmp_path / "a.png")
        save_image(once, tmp_path / "b.png")
        np.testing.assert_array_equal(load_image(tmp_path / "b.png"), once)

    def test_half_rounds_up(self, tmp_path):
        save_image(np.full((3, 4, 4), 0.5), tmp_path / "g.png")
        np.testing.assert_array_equal(load_image(tmp_path / "g.png"), 128 / 255)
        assert quantize(np.array([0.5]))[0] == 128

    def test_unreadable_names_path(self, tmp_path):
        bad = tmp_path / "junk.png"
        bad.write_text("not an image")
        with pytest.raises(ValueError, match="junk.png"):
            load_image(bad)
        with pytest.raises(ValueError, match="missing.png"):
            load_image(tmp_path / "missing.png")

    def test_mask_roundtrip(self, tmp_path):
        m = np.array([[0, 1], [3, 2]])
        save_mask(m, tmp_path / "m.png")
        np.testing.assert_array_equal(load_mask(tmp_path / "m.png"), m)


def test_dataset_dir_roundtrip(tmp_path):
    samples, mean = generate_shapes_dataset(5, 3, 32, 4)
    write_dataset(samples, mean, tmp_path, classes=3, size=32, seed=4)
    assert (tmp_path / "images" / "0004.png").exists() and (tmp_path / "masks" / "0000.png").exists()
    back, mean2, man = read_dataset(tmp_path)
    assert man["n"] == "5" and man["classes"] == "3" and man["seed"] == "4"
    np.testing.assert_array_equal(mean2, mean)
    for a, b in zip(samples, back):
        np.testing.assert_array_equal(a.image, b.image)
        np.testing.assert_array_equal(a.mask, b.mask)
        np.testing.assert_array_equal(a.labels, b.labels)


def test_missing_manifest(tmp_path):
    with pytest.raises(FileNotFoundError):
        read_dataset(tmp_path)
