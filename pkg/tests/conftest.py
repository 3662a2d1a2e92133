import numpy as np
import pytest

from skytomo.scene import Camera, Medium, Scene, Sun, VoxelGrid, air_profile


def uniform_scene(shape=(4, 4, 4), dims=(1000.0, 1000.0, 500.0), beta_aer=1e-5, beta_air=None,
                  cameras=None, g=(0.0, 0.0, 0.0), albedo=1.0, sun=None, sigma=(17e-12,) * 3):
    """Homogeneous test scene with simple numbers."""
    grid = VoxelGrid(shape, np.zeros(3), np.asarray(dims, dtype=float))
    vs = grid.volume_shape
    air = np.zeros((3, *vs)) if beta_air is None else np.broadcast_to(
        np.asarray(beta_air, dtype=float).reshape(-1, 1, 1, 1), (3, *vs)).copy()
    beta_aer = np.asarray(beta_aer, dtype=float)
    if beta_aer.ndim == 3:  # one green volume shared by all channels
        aer = np.broadcast_to(beta_aer, (3, *vs)).copy()
    else:
        aer = np.broadcast_to(beta_aer.reshape(-1, 1, 1, 1), (3, *vs)).copy()
    medium = Medium(air, aer, np.asarray(sigma), albedo, np.asarray(g, dtype=float))
    if cameras is None:
        ext = grid.extent
        cameras = [Camera(np.array([ext[0] / 2, ext[1] / 2, 0.0]), 8, 8)]
    return Scene(grid, medium, tuple(cameras), sun or Sun(45.0, 0.0))


@pytest.fixture
def small_scene():
    return uniform_scene()


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def layered_air(grid):
    return air_profile(grid)


# acceptance results, one entry per criterion: number -> (title, passed, detail)
ACCEPTANCE: dict = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.write_sep("=", "acceptance criteria")
    for num in sorted(ACCEPTANCE):
        title, ok, detail = ACCEPTANCE[num]
        terminalreporter.write_line(f"criterion {num:>2} {'PASS' if ok else 'FAIL'}  {title}: {detail}")
