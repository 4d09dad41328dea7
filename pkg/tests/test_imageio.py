import numpy as np
import pytest

from gradleak.errors import DatasetFormatError, ShapeError
from gradleak.imageio import load_pnm, quantize, save_image_grid


def test_single_gray_image_layout(tmp_path):
    path = tmp_path / "one.pgm"
    image = np.linspace(0.0, 1.0, 16).reshape(1, 1, 4, 4)
    assert save_image_grid(image, str(path)) == (4, 4)
    data = path.read_bytes()
    assert data.startswith(b"P5\n4 4\n255\n")
    assert len(data) == len(b"P5\n4 4\n255\n") + 16


def test_values_are_clamped():
    assert quantize(np.array([1.2, -0.3, 0.5])).tolist() == [255, 0, 128]


def test_grid_width_includes_separators(tmp_path):
    images = np.zeros((5, 1, 3, 6))
    width, height = save_image_grid(images, str(tmp_path / "row.pgm"))
    assert (width, height) == (5 * 6 + 4 * 2, 3)
    loaded = load_pnm(str(tmp_path / "row.pgm"))
    assert loaded.shape == (3, 38)
    assert (loaded[:, 6:8] == 255).all()


def test_color_grid_round_trip(tmp_path):
    images = np.random.default_rng(0).uniform(size=(4, 3, 5, 5))
    path = str(tmp_path / "grid.ppm")
    width, height = save_image_grid(images, path, columns=2)
    loaded = load_pnm(path)
    assert loaded.shape == (height, width, 3) == (12, 12, 3)
    expected = quantize(images)
    np.testing.assert_array_equal(loaded[:5, :5], expected[0].transpose(1, 2, 0))
    np.testing.assert_array_equal(loaded[7:, 7:], expected[3].transpose(1, 2, 0))


def test_rejects_two_channel_images(tmp_path):
    with pytest.raises(ShapeError):
        save_image_grid(np.zeros((1, 2, 4, 4)), str(tmp_path / "bad.pgm"))


def test_unwritable_path(tmp_path):
    with pytest.raises(OSError):
        save_image_grid(np.zeros((1, 1, 2, 2)), str(tmp_path / "missing" / "x.pgm"))


def test_load_rejects_other_formats(tmp_path):
    path = tmp_path / "ascii.pgm"
    path.write_bytes(b"P2\n1 1\n255\n0\n")
    with pytest.raises(DatasetFormatError):
        load_pnm(str(path))
