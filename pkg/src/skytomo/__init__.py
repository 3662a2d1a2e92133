"""Multi-view sky tomography: forward, backward and voxelized Monte Carlo rendering of
hazy atmospheres, and recovery of aerosol extinction from in-situ fisheye cameras."""

import warnings

# numba probes TBB on first parallel launch; the fallback layer is fine here
warnings.filterwarnings("ignore", message="The TBB threading layer")

from .scene import Camera, Medium, Scene, SceneError, Sun, VoxelGrid, load_scene, preset_scene, save_scene

__version__ = "0.1.0"

__all__ = ["Camera", "Medium", "Scene", "SceneError", "Sun", "VoxelGrid", "load_scene", "preset_scene",
           "save_scene", "__version__"]
