import numpy as np
import pytest

from skytomo.imageio import (
    image_name, read_images, read_pfm, read_png16, write_images, write_pfm, write_png16,
)


def test_image_name():
    assert image_name(3, 0) == "cam3_R.pfm"
    assert image_name(0, 2, "png") == "cam0_B.png"


def test_pfm_roundtrip_keeps_row_order(tmp_path):
    img = np.arange(12, dtype=np.float32).reshape(3, 4)
    p = write_pfm(tmp_path / "a.pfm", img)
    assert p.read_bytes().startswith(b"Pf\n4 3\n-1.0\n")
    assert np.array_equal(read_pfm(p), img)
    with pytest.raises(ValueError):
        write_pfm(tmp_path / "b.pfm", np.zeros((2, 2, 2)))
    (tmp_path / "c.pfm").write_bytes(b"P6\n")
    with pytest.raises(ValueError):
        read_pfm(tmp_path / "c.pfm")


def test_png16_roundtrip(tmp_path):
    img = np.array([[0.0, 1023.4], [70000.0, -3.0]])
    back = read_png16(write_png16(tmp_path / "a.png", img))
    assert np.array_equal(back, [[0.0, 1023.0], [65535.0, 0.0]])


@pytest.mark.parametrize("fmt", ["pfm", "png"])
def test_image_sets(tmp_path, fmt):
    rng = np.random.default_rng(0)
    images = {0: np.round(rng.random((2, 4, 5)) * 1000), 1: np.round(rng.random((2, 4, 5)) * 1000)}
    write_images(tmp_path, images, fmt)
    back = read_images(tmp_path, 2, fmt)
    assert sorted(back) == [0, 1]
    assert all(np.array_equal(back[ch], images[ch]) for ch in images)
    with pytest.raises(ValueError):
        read_images(tmp_path, 3, fmt)
