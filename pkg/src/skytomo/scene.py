"""Voxelized atmospheric domain: grid, media, cameras, sun and scene files.

Volumes are stored as ``(nz, ny, nx)`` arrays, so the flat voxel index is
``k = ix + nx * (iy + ny * iz)`` (x fastest), the same order used for raw
float32 volume files.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Sequence

import numpy as np
import yaml
from numba import njit

CHANNELS = ("R", "G", "B")
OUTSIDE = -1

DEFAULT_AIR_BETA0 = (5.8e-6, 13.5e-6, 33.1e-6)  # 1/m at sea level, R < G < B
AIR_SCALE_HEIGHT = 8000.0
AEROSOL_SCALE_HEIGHT = 1200.0
SOLAR_RATIOS = (255.0, 236.0, 224.0)

AEROSOL_TYPES = {
    # isotropic artificial aerosol
    "isotropic": {"sigma": (17e-12, 17e-12, 17e-12), "albedo": 1.0, "g": (0.0, 0.0, 0.0)},
    # type 6 from the MISR aerosol list
    "type6": {"sigma": (16.5e-12, 16.2e-12, 15.9e-12), "albedo": 1.0, "g": (0.763, 0.775, 0.786)},
}


class SceneError(ValueError):
    """Malformed or invalid scene description; ``field`` names the culprit."""

    def __init__(self, field: str, message: str):
        super().__init__(f"{field}: {message}")
        self.field = field


def _frozen(a, dtype=np.float64) -> np.ndarray:
    a = np.array(a, dtype=dtype)
    a.flags.writeable = False
    return a


# ---------------------------------------------------------------------------
# grid


@dataclass(frozen=True, eq=False)
class VoxelGrid:
    shape: tuple[int, int, int]  # (nx, ny, nz)
    origin: np.ndarray
    voxel_dims: np.ndarray

    def __post_init__(self):
        shape = tuple(int(s) for s in self.shape)
        if len(shape) != 3 or min(shape) < 1:
            raise SceneError("grid.shape", f"need three counts >= 1, got {self.shape}")
        origin = _frozen(self.origin)
        dims = _frozen(self.voxel_dims)
        if origin.shape != (3,) or not np.all(np.isfinite(origin)):
            raise SceneError("grid.origin", "need a finite 3-vector")
        if dims.shape != (3,) or not np.all(dims > 0):
            raise SceneError("grid.voxel_dims", "all voxel dimensions must be > 0")
        object.__setattr__(self, "shape", shape)
        object.__setattr__(self, "origin", origin)
        object.__setattr__(self, "voxel_dims", dims)

    def __eq__(self, other):
        return (
            isinstance(other, VoxelGrid)
            and self.shape == other.shape
            and np.array_equal(self.origin, other.origin)
            and np.array_equal(self.voxel_dims, other.voxel_dims)
        )

    @property
    def nx(self) -> int:
        return self.shape[0]

    @property
    def ny(self) -> int:
        return self.shape[1]

    @property
    def nz(self) -> int:
        return self.shape[2]

    @property
    def n_voxels(self) -> int:
        return self.nx * self.ny * self.nz

    @property
    def voxel_volume(self) -> float:
        return float(np.prod(self.voxel_dims))

    @property
    def volume_shape(self) -> tuple[int, int, int]:
        return (self.nz, self.ny, self.nx)

    @property
    def lo(self) -> np.ndarray:
        return self.origin

    @property
    def hi(self) -> np.ndarray:
        return self.origin + np.array(self.shape) * self.voxel_dims

    @property
    def extent(self) -> np.ndarray:
        return np.array(self.shape) * self.voxel_dims

    @property
    def counts(self) -> np.ndarray:
        return np.array(self.shape, dtype=np.int64)

    def linear_index(self, ix, iy, iz):
        return ix + self.nx * (iy + self.ny * iz)

    def unravel(self, k):
        k = np.asarray(k)
        ix = k % self.nx
        iy = (k // self.nx) % self.ny
        iz = k // (self.nx * self.ny)
        return ix, iy, iz

    def center(self, k) -> np.ndarray:
        ix, iy, iz = self.unravel(k)
        idx = np.stack([ix, iy, iz], axis=-1).astype(float)
        return self.origin + (idx + 0.5) * self.voxel_dims

    def centers(self) -> np.ndarray:
        """(N, 3) voxel centers in flat-index order."""
        return self.center(np.arange(self.n_voxels))

    def altitudes(self) -> np.ndarray:
        """Voxel-center heights above the grid floor, shape (nz, ny, nx)."""
        z = (np.arange(self.nz) + 0.5) * self.voxel_dims[2]
        return np.broadcast_to(z[:, None, None], self.volume_shape).copy()

    def contains(self, x) -> bool:
        return voxel_of_point(self, x) != OUTSIDE


def voxel_of_point(grid: VoxelGrid, x) -> int:
    """Flat index of the voxel owning ``x`` (half-open cells), or ``OUTSIDE``."""
    x = np.asarray(x, dtype=float)
    rel = (x - grid.origin) / grid.voxel_dims
    if not np.all(np.isfinite(rel)):
        return OUTSIDE
    idx = np.floor(rel).astype(np.int64)
    if np.any(idx < 0) or np.any(idx >= np.array(grid.shape)):
        return OUTSIDE
    return int(grid.linear_index(idx[0], idx[1], idx[2]))


# ---------------------------------------------------------------------------
# media


@dataclass(frozen=True, eq=False)
class Medium:
    beta_air: np.ndarray  # (3, nz, ny, nx), 1/m
    beta_aerosol: np.ndarray  # (3, nz, ny, nx), 1/m
    sigma_aerosol: np.ndarray  # (3,), m^2
    albedo_aerosol: float = 1.0
    g: np.ndarray = field(default_factory=lambda: np.zeros(3))
    albedo_air: float = 1.0

    def __post_init__(self):
        for name in ("beta_air", "beta_aerosol"):
            a = np.asarray(getattr(self, name), dtype=np.float64)
            if a.ndim != 4 or a.shape[0] != 3:
                raise SceneError(name, f"need shape (3, nz, ny, nx), got {a.shape}")
            if not np.all(np.isfinite(a)):
                raise SceneError(name, "extinction must be finite")
            if np.any(a < 0):
                raise SceneError(name, "extinction must be >= 0")
            object.__setattr__(self, name, _frozen(a))
        if self.beta_air.shape != self.beta_aerosol.shape:
            raise SceneError("beta_aerosol", "shape differs from beta_air")
        sigma = _frozen(self.sigma_aerosol)
        if sigma.shape != (3,) or np.any(sigma < 0) or not np.all(np.isfinite(sigma)):
            raise SceneError("sigma_aerosol", "need three finite cross sections >= 0")
        g = _frozen(self.g)
        if g.shape != (3,) or np.any(np.abs(g) >= 1):
            raise SceneError("g", "anisotropy must satisfy |g| < 1 per channel")
        for name in ("albedo_aerosol", "albedo_air"):
            v = float(getattr(self, name))
            if not 0.0 <= v <= 1.0:
                raise SceneError(name, "albedo must lie in [0, 1]")
            object.__setattr__(self, name, v)
        object.__setattr__(self, "sigma_aerosol", sigma)
        object.__setattr__(self, "g", g)

    def __eq__(self, other):
        return (
            isinstance(other, Medium)
            and np.array_equal(self.beta_air, other.beta_air)
            and np.array_equal(self.beta_aerosol, other.beta_aerosol)
            and np.array_equal(self.sigma_aerosol, other.sigma_aerosol)
            and np.array_equal(self.g, other.g)
            and self.albedo_aerosol == other.albedo_aerosol
            and self.albedo_air == other.albedo_air
        )

    @property
    def beta(self) -> np.ndarray:
        return self.beta_air + self.beta_aerosol

    @property
    def density(self) -> np.ndarray:
        """Aerosol particle density (1/m^3) recovered from the green channel."""
        if self.sigma_aerosol[1] == 0:
            return np.zeros_like(self.beta_aerosol[1])
        return self.beta_aerosol[1] / self.sigma_aerosol[1]

    def flat(self, name: str, channel: int) -> np.ndarray:
        return np.ascontiguousarray(getattr(self, name)[channel].ravel())

    def with_aerosol(self, beta_aerosol_green: np.ndarray) -> "Medium":
        """Same optics with a new green-channel aerosol extinction field."""
        if self.sigma_aerosol[1] == 0:
            raise SceneError("sigma_aerosol", "green cross section is zero")
        ratio = self.sigma_aerosol / self.sigma_aerosol[1]
        b = np.asarray(beta_aerosol_green, dtype=float).reshape(self.beta_air.shape[1:])
        return Medium(
            beta_air=self.beta_air,
            beta_aerosol=ratio[:, None, None, None] * b[None],
            sigma_aerosol=self.sigma_aerosol,
            albedo_aerosol=self.albedo_aerosol,
            g=self.g,
            albedo_air=self.albedo_air,
        )


def air_profile(grid: VoxelGrid, beta0=DEFAULT_AIR_BETA0, scale_height=AIR_SCALE_HEIGHT) -> np.ndarray:
    """Molecular extinction decaying exponentially with altitude, (3, nz, ny, nx)."""
    beta0 = np.asarray(beta0, dtype=float)
    if beta0.shape != (3,) or np.any(beta0 < 0):
        raise SceneError("air.beta0", "need three sea-level extinctions >= 0")
    if scale_height <= 0:
        raise SceneError("air.scale_height", "must be > 0")
    h = grid.altitudes()
    return beta0[:, None, None, None] * np.exp(-h / scale_height)[None]


def _medium_from_density(grid, n, sigma, air, albedo, g, albedo_air=1.0) -> Medium:
    sigma = np.asarray(sigma, dtype=float)
    if air is None:
        air = air_profile(grid)
    return Medium(
        beta_air=air,
        beta_aerosol=sigma[:, None, None, None] * n[None],
        sigma_aerosol=sigma,
        albedo_aerosol=albedo,
        g=np.asarray(g, dtype=float),
        albedo_air=albedo_air,
    )


@dataclass(frozen=True)
class Blob:
    center: tuple[float, float, float]  # m
    radius: tuple[float, float, float]  # Gaussian standard deviations, m
    weight: float = 1.0


def haze_blob_density(grid: VoxelGrid, n_sealevel: float, blobs: Sequence[Blob],
                      scale_height: float = AEROSOL_SCALE_HEIGHT) -> np.ndarray:
    if n_sealevel <= 0:
        raise SceneError("n_sealevel", "must be > 0")
    lo, hi = grid.lo, grid.hi
    centers = grid.centers()
    f = np.zeros(grid.n_voxels)
    for i, b in enumerate(blobs):
        c = np.asarray(b.center, dtype=float)
        r = np.asarray(b.radius, dtype=float)
        if np.any(c < lo) or np.any(c > hi):
            raise SceneError(f"blobs[{i}].center", f"{c.tolist()} lies outside the grid")
        if np.any(r <= 0):
            raise SceneError(f"blobs[{i}].radius", "radii must be > 0")
        f += b.weight * np.exp(-0.5 * np.sum(((centers - c) / r) ** 2, axis=1))
    f = f.reshape(grid.volume_shape) * np.exp(-grid.altitudes() / scale_height)
    peak = f.max()
    if peak <= 0:
        return np.zeros(grid.volume_shape)
    return n_sealevel * f / peak


def make_haze_blobs(grid: VoxelGrid, n_sealevel: float, sigma, blobs: Sequence[Blob], *,
                    scale_height: float = AEROSOL_SCALE_HEIGHT, air=None,
                    albedo: float = 1.0, g=(0.0, 0.0, 0.0)) -> Medium:
    """Sum of Gaussian blobs with exponential altitude decay, peak density ``n_sealevel``."""
    n = haze_blob_density(grid, n_sealevel, blobs, scale_height)
    return _medium_from_density(grid, n, sigma, air, albedo, g)


@dataclass(frozen=True)
class Cylinder:
    center: tuple[float, float]  # axis position (x, y), m
    semi_axes: tuple[float, float]  # m
    angle_deg: float = 0.0  # rotation of the first semi-axis from +x
    taper: float = 0.2  # fraction of the normalized radius used for the smooth edge


def haze_front_density(grid: VoxelGrid, n_sealevel: float, cyl: Cylinder,
                       scale_height: float = AEROSOL_SCALE_HEIGHT) -> np.ndarray:
    if n_sealevel <= 0:
        raise SceneError("n_sealevel", "must be > 0")
    a, b = (float(v) for v in cyl.semi_axes)
    if a <= 0 or b <= 0:
        raise SceneError("cylinder.semi_axes", "degenerate ellipse (zero axis)")
    if not 0.0 <= cyl.taper < 1.0:
        raise SceneError("cylinder.taper", "must lie in [0, 1)")
    c = grid.centers()
    th = math.radians(cyl.angle_deg)
    dx, dy = c[:, 0] - cyl.center[0], c[:, 1] - cyl.center[1]
    u = (math.cos(th) * dx + math.sin(th) * dy) / a
    v = (-math.sin(th) * dx + math.cos(th) * dy) / b
    r = np.sqrt(u * u + v * v)
    edge = np.ones_like(r)
    if cyl.taper > 0:
        s = np.clip((1.0 - r) / cyl.taper, 0.0, 1.0)
        edge = s * s * (3.0 - 2.0 * s)
    else:
        edge = (r < 1.0).astype(float)
    profile = np.exp(-grid.altitudes() / scale_height)
    return n_sealevel * edge.reshape(grid.volume_shape) * profile


def make_haze_front(grid: VoxelGrid, n_sealevel: float, sigma, cylinder: Cylinder, *,
                    scale_height: float = AEROSOL_SCALE_HEIGHT, air=None,
                    albedo: float = 1.0, g=(0.0, 0.0, 0.0)) -> Medium:
    """Vertical elliptic cylinder of haze with a smooth edge and altitude decay."""
    n = haze_front_density(grid, n_sealevel, cylinder, scale_height)
    return _medium_from_density(grid, n, sigma, air, albedo, g)


# ---------------------------------------------------------------------------
# cameras and sun


@njit(cache=True)
def fisheye_direction(u, v):
    """Equidistant hemispherical mapping: image point (u, v) in [-1, 1]^2 to a view direction."""
    r = math.sqrt(u * u + v * v)
    theta = r * (0.5 * math.pi)
    if r < 1e-15:
        return 0.0, 0.0, 1.0
    s = math.sin(theta) / r
    return s * u, s * v, math.cos(theta)


@njit(cache=True)
def fisheye_pixel(dx, dy, dz, npx, npy):
    """Pixel (flat index) hit by view direction d, and the image-area/solid-angle Jacobian."""
    c = min(1.0, max(-1.0, dz))
    theta = math.acos(c)
    r = theta / (0.5 * math.pi)
    h = math.sqrt(dx * dx + dy * dy)
    if h < 1e-15:
        u = 0.0
        v = 0.0
    else:
        u = r * dx / h
        v = r * dy / h
    i = int(math.floor((u + 1.0) * 0.5 * npx))
    j = int(math.floor((v + 1.0) * 0.5 * npy))
    st = math.sin(theta)
    jac = (2.0 / math.pi) ** 2 * (theta / st if st > 1e-12 else 1.0)
    if i < 0 or i >= npx or j < 0 or j >= npy:
        return -1, jac
    return j * npx + i, jac


def hammersley(n: int) -> np.ndarray:
    """n stratified points in [0, 1)^2 (fixed layout)."""
    pts = np.empty((n, 2))
    for i in range(n):
        x, f, k = 0.0, 0.5, i
        while k:
            x += f * (k & 1)
            k >>= 1
            f *= 0.5
        pts[i] = ((i + 0.5) / n, x + 0.5 / n if n > 1 else 0.5)
    pts[:, 1] %= 1.0
    return pts


@dataclass(frozen=True, eq=False)
class Camera:
    position: np.ndarray
    npx: int = 32
    npy: int = 32

    def __post_init__(self):
        pos = _frozen(self.position)
        if pos.shape != (3,) or not np.all(np.isfinite(pos)):
            raise SceneError("cameras.position", "need a finite 3-vector")
        if int(self.npx) < 1 or int(self.npy) < 1:
            raise SceneError("cameras.pixels", "pixel counts must be >= 1")
        object.__setattr__(self, "position", pos)
        object.__setattr__(self, "npx", int(self.npx))
        object.__setattr__(self, "npy", int(self.npy))

    def __eq__(self, other):
        return (isinstance(other, Camera) and np.array_equal(self.position, other.position)
                and self.npx == other.npx and self.npy == other.npy)

    @property
    def n_pixels(self) -> int:
        return self.npx * self.npy

    @property
    def pixel_area(self) -> float:
        """Pixel area in normalized image coordinates (image spans [-1, 1]^2)."""
        return 4.0 / (self.npx * self.npy)

    def image_coords(self, offsets=None) -> np.ndarray:
        """(npix, m, 2) image-plane points; ``offsets`` are (m, 2) fractions inside a pixel."""
        if offsets is None:
            offsets = np.array([[0.5, 0.5]])
        j, i = np.divmod(np.arange(self.n_pixels), self.npx)
        u = (i[:, None] + offsets[None, :, 0]) / self.npx * 2.0 - 1.0
        v = (j[:, None] + offsets[None, :, 1]) / self.npy * 2.0 - 1.0
        return np.stack([u, v], axis=-1)

    def directions(self, offsets=None) -> np.ndarray:
        uv = self.image_coords(offsets)
        r = np.hypot(uv[..., 0], uv[..., 1])
        theta = r * (0.5 * np.pi)
        s = np.where(r > 1e-15, np.sin(theta) / np.where(r > 1e-15, r, 1.0), 0.0)
        d = np.stack([s * uv[..., 0], s * uv[..., 1], np.cos(theta)], axis=-1)
        return d / np.linalg.norm(d, axis=-1, keepdims=True)

    def pixel_directions(self) -> np.ndarray:
        """(npix, 3) central view directions."""
        return self.directions()[:, 0, :]

    @property
    def valid(self) -> np.ndarray:
        """Pixels whose center lies inside the image circle."""
        uv = self.image_coords()[:, 0, :]
        return np.hypot(uv[:, 0], uv[:, 1]) <= 1.0

    def pixel_of_direction(self, d) -> int:
        d = np.asarray(d, dtype=float)
        p, _ = fisheye_pixel(d[0], d[1], d[2], self.npx, self.npy)
        return p


@dataclass(frozen=True, eq=False)
class Sun:
    zenith_deg: float = 45.0
    azimuth_deg: float = 0.0
    irradiance: np.ndarray = field(default_factory=lambda: np.array(SOLAR_RATIOS) / SOLAR_RATIOS[0])
    half_angle_deg: float = 0.27

    def __post_init__(self):
        if not 0.0 <= float(self.zenith_deg) < 90.0:
            raise SceneError("sun.zenith_deg", "must lie in [0, 90)")
        irr = _frozen(self.irradiance)
        if irr.shape != (3,) or np.any(irr <= 0):
            raise SceneError("sun.irradiance", "need three ratios > 0")
        if float(self.half_angle_deg) <= 0:
            raise SceneError("sun.half_angle_deg", "must be > 0")
        object.__setattr__(self, "zenith_deg", float(self.zenith_deg))
        object.__setattr__(self, "azimuth_deg", float(self.azimuth_deg))
        object.__setattr__(self, "half_angle_deg", float(self.half_angle_deg))
        object.__setattr__(self, "irradiance", irr)

    def __eq__(self, other):
        return (isinstance(other, Sun) and self.zenith_deg == other.zenith_deg
                and self.azimuth_deg == other.azimuth_deg
                and self.half_angle_deg == other.half_angle_deg
                and np.array_equal(self.irradiance, other.irradiance))

    @property
    def to_sun(self) -> np.ndarray:
        """Unit vector pointing at the sun."""
        th, ph = math.radians(self.zenith_deg), math.radians(self.azimuth_deg)
        return np.array([math.sin(th) * math.cos(ph), math.sin(th) * math.sin(ph), math.cos(th)])

    @property
    def direction(self) -> np.ndarray:
        """Propagation direction of sunlight (downward)."""
        return -self.to_sun


@dataclass(frozen=True, eq=False)
class Scene:
    grid: VoxelGrid
    medium: Medium
    cameras: tuple[Camera, ...]
    sun: Sun
    aerosol_source: dict | None = None  # generator description kept for save_scene
    air_source: dict | None = None

    def __post_init__(self):
        object.__setattr__(self, "cameras", tuple(self.cameras))
        if self.medium.beta_air.shape[1:] != self.grid.volume_shape:
            raise SceneError("medium", f"volume shape {self.medium.beta_air.shape[1:]} "
                                       f"does not match grid {self.grid.volume_shape}")
        lo, hi = self.grid.lo, self.grid.hi
        for i, cam in enumerate(self.cameras):
            p = cam.position
            if np.any(p[:2] < lo[:2]) or np.any(p[:2] > hi[:2]) or p[2] > hi[2]:
                raise SceneError(f"cameras[{i}].position",
                                 "camera must lie inside or below the domain footprint")

    def __eq__(self, other):
        return (isinstance(other, Scene) and self.grid == other.grid and self.medium == other.medium
                and self.cameras == other.cameras and self.sun == other.sun)

    def with_medium(self, medium: Medium) -> "Scene":
        return Scene(self.grid, medium, self.cameras, self.sun, None, self.air_source)

    def with_cameras(self, cameras) -> "Scene":
        return Scene(self.grid, self.medium, tuple(cameras), self.sun,
                     self.aerosol_source, self.air_source)


# ---------------------------------------------------------------------------
# raw volumes


def write_volume(path, volume: np.ndarray, grid: VoxelGrid, quantity: str = "density",
                 channel: str | None = None) -> Path:
    """Raw little-endian float32 (x fastest) plus a JSON sidecar ``<path>.json``."""
    path = Path(path)
    vol = np.asarray(volume, dtype=np.float64).reshape(grid.volume_shape)
    vol.astype("<f4").tofile(path)
    header = {
        "dims": list(grid.shape),
        "origin": grid.origin.tolist(),
        "spacing": grid.voxel_dims.tolist(),
        "quantity": quantity,
        "channel": channel,
        "dtype": "float32",
        "byte_order": "little",
        "order": "x-fastest",
    }
    Path(str(path) + ".json").write_text(json.dumps(header, indent=2))
    return path


def read_volume(path, grid: VoxelGrid | None = None) -> tuple[np.ndarray, dict]:
    path = Path(path)
    header_path = Path(str(path) + ".json")
    header = json.loads(header_path.read_text()) if header_path.exists() else {}
    if grid is not None:
        dims = list(grid.shape)
    elif "dims" in header:
        dims = header["dims"]
    else:
        raise SceneError("volume", f"{path}: no sidecar header and no grid given")
    data = np.fromfile(path, dtype="<f4").astype(np.float64)
    nx, ny, nz = dims
    if data.size != nx * ny * nz:
        raise SceneError("volume", f"{path}: expected {nx * ny * nz} values, found {data.size}")
    return data.reshape(nz, ny, nx), header


# ---------------------------------------------------------------------------
# scene files


def _vec(d: dict, key: str, where: str, n=3, default=None):
    v = d.get(key, default)
    if v is None:
        raise SceneError(f"{where}.{key}", "missing")
    try:
        arr = np.asarray(v, dtype=float)
    except (TypeError, ValueError):
        raise SceneError(f"{where}.{key}", f"not numeric: {v!r}") from None
    if arr.shape != (n,):
        raise SceneError(f"{where}.{key}", f"need {n} values, got {v!r}")
    return arr


def _number(d: dict, key: str, where: str, default=None) -> float:
    v = d.get(key, default)
    if v is None:
        raise SceneError(f"{where}.{key}", "missing")
    try:
        return float(v)
    except (TypeError, ValueError):
        raise SceneError(f"{where}.{key}", f"not numeric: {v!r}") from None


def _aerosol_optics(aer: dict):
    kind = aer.get("type")
    base = AEROSOL_TYPES.get(kind, {}) if kind else {}
    if kind and not base:
        raise SceneError("aerosol.type", f"unknown aerosol type {kind!r}")
    sigma = _vec(aer, "sigma", "aerosol", default=base.get("sigma", AEROSOL_TYPES["isotropic"]["sigma"]))
    albedo = _number(aer, "albedo", "aerosol", default=base.get("albedo", 1.0))
    g = _vec(aer, "g", "aerosol", default=base.get("g", (0.0, 0.0, 0.0)))
    return sigma, albedo, g


def _density_from_source(grid: VoxelGrid, src: dict, base_dir: Path, sigma) -> np.ndarray:
    gen = src.get("generator")
    if gen == "haze_blobs":
        blobs = [Blob(tuple(_vec(b, "center", f"aerosol.density.blobs[{i}]")),
                      tuple(_vec(b, "radius", f"aerosol.density.blobs[{i}]")),
                      _number(b, "weight", f"aerosol.density.blobs[{i}]", 1.0))
                 for i, b in enumerate(src.get("blobs", []))]
        return haze_blob_density(grid, _number(src, "n_sealevel", "aerosol.density"), blobs,
                                 _number(src, "scale_height", "aerosol.density", AEROSOL_SCALE_HEIGHT))
    if gen == "haze_front":
        c = src.get("cylinder") or {}
        cyl = Cylinder(tuple(_vec(c, "center", "aerosol.density.cylinder", 2)),
                       tuple(_vec(c, "semi_axes", "aerosol.density.cylinder", 2)),
                       _number(c, "angle_deg", "aerosol.density.cylinder", 0.0),
                       _number(c, "taper", "aerosol.density.cylinder", 0.2))
        return haze_front_density(grid, _number(src, "n_sealevel", "aerosol.density"), cyl,
                                  _number(src, "scale_height", "aerosol.density", AEROSOL_SCALE_HEIGHT))
    if "file" in src:
        vol, header = read_volume(base_dir / src["file"], grid)
        quantity = src.get("quantity", header.get("quantity", "density"))
        if quantity == "density":
            return vol
        if quantity == "beta_aerosol":
            if sigma[1] == 0:
                raise SceneError("aerosol.sigma", "green cross section is zero")
            return vol / sigma[1]
        raise SceneError("aerosol.density.quantity", f"unknown quantity {quantity!r}")
    if gen is None:
        return np.zeros(grid.volume_shape)
    raise SceneError("aerosol.density.generator", f"unknown generator {gen!r}")


def scene_from_dict(data: dict, base_dir: Path | str = ".") -> Scene:
    base_dir = Path(base_dir)
    if not isinstance(data, dict):
        raise SceneError("scene", "top level must be a mapping")
    g = data.get("grid")
    if not isinstance(g, dict):
        raise SceneError("grid", "missing section")
    shape = g.get("shape")
    if not (isinstance(shape, (list, tuple)) and len(shape) == 3):
        raise SceneError("grid.shape", f"need [nx, ny, nz], got {shape!r}")
    grid = VoxelGrid(tuple(int(s) for s in shape), _vec(g, "origin", "grid", default=(0, 0, 0)),
                     _vec(g, "voxel_dims", "grid"))

    s = data.get("sun") or {}
    sun = Sun(_number(s, "zenith_deg", "sun", 45.0), _number(s, "azimuth_deg", "sun", 0.0),
              _vec(s, "irradiance", "sun", default=np.array(SOLAR_RATIOS) / SOLAR_RATIOS[0]),
              _number(s, "half_angle_deg", "sun", 0.27))

    a = data.get("air") or {}
    air_src = {"beta0": _vec(a, "beta0", "air", default=DEFAULT_AIR_BETA0).tolist(),
               "scale_height": _number(a, "scale_height", "air", AIR_SCALE_HEIGHT),
               "albedo": _number(a, "albedo", "air", 1.0)}
    beta_air = air_profile(grid, air_src["beta0"], air_src["scale_height"])

    aer = data.get("aerosol") or {}
    sigma, albedo, gg = _aerosol_optics(aer)
    aer_src = None
    if "beta_aerosol" in aer:
        try:
            b = np.asarray(aer["beta_aerosol"], dtype=float)
        except (TypeError, ValueError):
            raise SceneError("beta_aerosol", "not numeric") from None
        if np.any(b < 0) or not np.all(np.isfinite(b)):
            raise SceneError("beta_aerosol", "extinction must be finite and >= 0")
        b = np.broadcast_to(b, grid.volume_shape) if b.ndim == 0 else b.reshape(grid.volume_shape)
        if sigma[1] == 0:
            raise SceneError("aerosol.sigma", "green cross section is zero")
        n = b / sigma[1]
    else:
        src = aer.get("density") or {}
        n = _density_from_source(grid, src, base_dir, sigma)
        if src.get("generator"):
            aer_src = dict(src)
    medium = Medium(beta_air=beta_air, beta_aerosol=sigma[:, None, None, None] * n[None],
                    sigma_aerosol=sigma, albedo_aerosol=albedo, g=gg, albedo_air=air_src["albedo"])

    cams = []
    for i, c in enumerate(data.get("cameras") or []):
        px = c.get("pixels", [32, 32])
        if not (isinstance(px, (list, tuple)) and len(px) == 2):
            raise SceneError(f"cameras[{i}].pixels", f"need [npx, npy], got {px!r}")
        cams.append(Camera(_vec(c, "position", f"cameras[{i}]"), int(px[0]), int(px[1])))
    return Scene(grid, medium, tuple(cams), sun, aer_src, air_src)


def load_scene(path) -> Scene:
    path = Path(path)
    try:
        data = yaml.safe_load(path.read_text())
    except yaml.YAMLError as e:
        raise SceneError("scene", f"{path}: parse error: {e}") from None
    return scene_from_dict(data, path.parent)


def _plain(v):
    """Recursively convert numpy scalars/arrays to builtin types for YAML."""
    if isinstance(v, dict):
        return {k: _plain(x) for k, x in v.items()}
    if isinstance(v, (list, tuple)):
        return [_plain(x) for x in v]
    if isinstance(v, np.ndarray):
        return _plain(v.tolist())
    if isinstance(v, np.generic):
        return v.item()
    return v


def scene_to_dict(scene: Scene, volume_file: str | None = None) -> dict[str, Any]:
    m = scene.medium
    out: dict[str, Any] = {
        "grid": {"shape": list(scene.grid.shape), "origin": scene.grid.origin.tolist(),
                 "voxel_dims": scene.grid.voxel_dims.tolist()},
        "sun": {"zenith_deg": scene.sun.zenith_deg, "azimuth_deg": scene.sun.azimuth_deg,
                "irradiance": scene.sun.irradiance.tolist(),
                "half_angle_deg": scene.sun.half_angle_deg},
        "air": dict(scene.air_source) if scene.air_source else {"beta0": [0.0, 0.0, 0.0]},
        "aerosol": {"sigma": m.sigma_aerosol.tolist(), "albedo": m.albedo_aerosol,
                    "g": m.g.tolist()},
        "cameras": [{"position": c.position.tolist(), "pixels": [c.npx, c.npy]} for c in scene.cameras],
    }
    if scene.aerosol_source is not None:
        out["aerosol"]["density"] = scene.aerosol_source
    elif volume_file is not None:
        out["aerosol"]["density"] = {"file": volume_file, "quantity": "density"}
    return out


def save_scene(scene: Scene, path) -> Path:
    """Write a YAML scene file; non-generator aerosol fields go to ``<stem>.density.f32``."""
    path = Path(path)
    volume_file = None
    if scene.aerosol_source is None and np.any(scene.medium.beta_aerosol > 0):
        volume_file = path.stem + ".density.f32"
        write_volume(path.parent / volume_file, scene.medium.density, scene.grid, "density")
    path.write_text(yaml.safe_dump(_plain(scene_to_dict(scene, volume_file)), sort_keys=False))
    return path


# ---------------------------------------------------------------------------
# presets

DOMAIN_EXTENT = (50_000.0, 50_000.0, 10_000.0)

# (center fraction of domain, horizontal radius fraction, vertical radius m, weight)
_DEFAULT_BLOBS = (
    ((0.30, 0.35, 0.05), 0.12, 1500.0, 1.0),
    ((0.65, 0.30, 0.08), 0.10, 1200.0, 0.8),
    ((0.55, 0.70, 0.04), 0.14, 1800.0, 0.9),
    ((0.20, 0.75, 0.10), 0.08, 1000.0, 0.6),
    ((0.80, 0.65, 0.06), 0.09, 1400.0, 0.7),
)


def default_blobs(grid: VoxelGrid) -> list[Blob]:
    ext = grid.extent
    out = []
    for frac, rh, rv, w in _DEFAULT_BLOBS:
        c = grid.origin + np.asarray(frac) * ext
        out.append(Blob(tuple(c.tolist()), (rh * ext[0], rh * ext[1], rv), w))
    return out


def camera_layout(grid: VoxelGrid, n_side: int, spacing: float | None = None,
                  height: float = 0.0, npx: int = 32, npy: int | None = None) -> list[Camera]:
    """n_side x n_side ground cameras centered on the footprint."""
    ext = grid.extent
    if spacing is None:
        spacing = min(ext[0], ext[1]) / n_side
    offs = (np.arange(n_side) - (n_side - 1) / 2.0) * spacing
    mid = grid.origin[:2] + ext[:2] / 2
    cams = []
    for y in offs:
        for x in offs:
            cams.append(Camera(np.array([mid[0] + x, mid[1] + y, grid.origin[2] + height]),
                               npx, npy or npx))
    return cams


PRESETS = ("atm1", "atm2", "atm3", "atm4", "toy", "vacuum")

# the conditioning toy: one elliptic cloud centered in a smaller air-filled domain
TOY_EXTENT = (20000.0, 20000.0, 5000.0)
TOY_N_SEALEVEL = 5e6


def toy_blob(grid: VoxelGrid) -> Blob:
    ext = grid.extent
    c = grid.origin + ext * np.array([0.5, 0.5, 0.5])
    return Blob(tuple(c.tolist()), (0.18 * ext[0], 0.12 * ext[1], 0.1 * ext[2]))


def preset_scene(name: str, shape=(20, 20, 20), extent=None, n_side: int = 6,
                 spacing: float = 7000.0, npx: int = 32, sun_zenith: float = 45.0,
                 sun_azimuth: float = 0.0) -> Scene:
    """The Atm1-Atm4 haze scenes, the elliptic-cloud ``toy`` and an empty ``vacuum`` scene."""
    if name not in PRESETS:
        raise SceneError("preset", f"unknown preset {name!r}; choose from {', '.join(PRESETS)}")
    if extent is None:
        extent = TOY_EXTENT if name == "toy" else DOMAIN_EXTENT
    shape = tuple(int(s) for s in shape)
    dims = np.asarray(extent, dtype=float) / np.array(shape)
    grid = VoxelGrid(shape, np.zeros(3), dims)
    ext = grid.extent
    spacing = min(spacing, min(ext[0], ext[1]) / n_side)
    cams = camera_layout(grid, n_side, spacing, npx=npx)
    air_src = {"beta0": list(DEFAULT_AIR_BETA0), "scale_height": AIR_SCALE_HEIGHT, "albedo": 1.0}
    if name == "vacuum":
        air_src = {"beta0": [0.0, 0.0, 0.0], "scale_height": AIR_SCALE_HEIGHT, "albedo": 1.0}
        data = {"grid": {"shape": list(shape), "origin": [0, 0, 0], "voxel_dims": dims.tolist()},
                "air": air_src, "aerosol": {}, "sun": {"zenith_deg": sun_zenith, "azimuth_deg": sun_azimuth},
                "cameras": [{"position": c.position.tolist(), "pixels": [c.npx, c.npy]} for c in cams]}
        return scene_from_dict(data)
    aerosol = "isotropic" if name in ("atm1", "toy") else "type6"
    n_sea = 1e7 if name == "atm3" else 1e6
    if name == "toy":
        b = toy_blob(grid)
        # no altitude decay: the cloud is a plain ellipsoid
        density = {"generator": "haze_blobs", "n_sealevel": TOY_N_SEALEVEL, "scale_height": 1e12,
                   "blobs": [{"center": list(b.center), "radius": list(b.radius), "weight": 1.0}]}
    elif name == "atm4":
        density = {"generator": "haze_front", "n_sealevel": n_sea,
                   "scale_height": AEROSOL_SCALE_HEIGHT,
                   "cylinder": {"center": [0.15 * ext[0], 0.5 * ext[1]],
                                "semi_axes": [0.35 * ext[0], 0.9 * ext[1]],
                                "angle_deg": 20.0, "taper": 0.3}}
    else:
        density = {"generator": "haze_blobs", "n_sealevel": n_sea,
                   "scale_height": AEROSOL_SCALE_HEIGHT,
                   "blobs": [{"center": list(b.center), "radius": list(b.radius), "weight": b.weight}
                             for b in default_blobs(grid)]}
    data = {
        "grid": {"shape": list(shape), "origin": [0.0, 0.0, 0.0], "voxel_dims": dims.tolist()},
        "sun": {"zenith_deg": sun_zenith, "azimuth_deg": sun_azimuth},
        "air": air_src,
        "aerosol": {"type": aerosol, "density": density},
        "cameras": [{"position": c.position.tolist(), "pixels": [c.npx, c.npy]} for c in cams],
    }
    return scene_from_dict(data)
