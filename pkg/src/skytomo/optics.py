"""Phase functions, scattering samplers and exact voxel-grid ray traversal.

The ``_nb_*`` functions are numba kernels shared by the transport and
rendering code; the un-prefixed functions are the NumPy-facing API.
Grids enter kernels as ``lo`` (origin), ``vd`` (voxel dims) and ``n``
(int64 counts, x/y/z).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from numba import njit

from .scene import Scene, VoxelGrid, voxel_of_point

INV_4PI = 1.0 / (4.0 * math.pi)
RAYLEIGH_NORM = 3.0 / (16.0 * math.pi)

AIR = 0
AEROSOL = 1


G_ISO = 1e-6  # below this |g| HG is treated as isotropic

# ---------------------------------------------------------------------------
# phase functions


def phase_hg(mu, g):
    """Henyey-Greenstein density per steradian at cos(scattering angle) ``mu``."""
    if abs(g) >= 1:
        raise ValueError(f"HG anisotropy must satisfy |g| < 1, got {g}")
    mu = np.asarray(mu, dtype=float)
    denom = 1.0 + g * g - 2.0 * g * mu
    return INV_4PI * (1.0 - g * g) / (denom * np.sqrt(denom))


def phase_rayleigh(mu):
    mu = np.asarray(mu, dtype=float)
    return RAYLEIGH_NORM * (1.0 + mu * mu)


def hg_cdf(mu, g):
    """P(cos angle <= mu) under HG."""
    mu = np.asarray(mu, dtype=float)
    if abs(g) < G_ISO:
        return 0.5 * (mu + 1.0)
    return (1.0 - g * g) / (2.0 * g) * (1.0 / np.sqrt(1.0 + g * g - 2.0 * g * mu) - 1.0 / (1.0 + g))


def rayleigh_cdf(mu):
    mu = np.asarray(mu, dtype=float)
    return 0.375 * (mu + mu ** 3 / 3.0) + 0.5


@njit(cache=True)
def _nb_phase_hg(mu, g):
    d = 1.0 + g * g - 2.0 * g * mu
    return INV_4PI * (1.0 - g * g) / (d * math.sqrt(d))


@njit(cache=True)
def _nb_phase_rayleigh(mu):
    return RAYLEIGH_NORM * (1.0 + mu * mu)


# ---------------------------------------------------------------------------
# samplers


def sample_tau(u):
    """Optical depth to the next interaction, inverse of 1 - exp(-tau)."""
    u = np.asarray(u, dtype=float)
    if np.any((u < 0) | (u >= 1)):
        raise ValueError("u must lie in [0, 1)")
    return -np.log1p(-u)


@njit(cache=True)
def _nb_hg_cos(g, u):
    # the closed form cancels catastrophically as g -> 0
    if abs(g) < G_ISO:
        return 2.0 * u - 1.0
    s = (1.0 - g * g) / (1.0 - g + 2.0 * g * u)
    c = (1.0 + g * g - s * s) / (2.0 * g)
    return min(1.0, max(-1.0, c))


@njit(cache=True)
def _nb_rayleigh_cos(u):
    a = 4.0 * u - 2.0
    gamma = a + math.sqrt(a * a + 1.0)
    c = gamma ** (1.0 / 3.0) - gamma ** (-1.0 / 3.0)
    return min(1.0, max(-1.0, c))


@njit(cache=True)
def _nb_rotate(px, py, pz, cos_t, phi):
    """Direction at angle acos(cos_t), azimuth phi, around unit vector p."""
    ax, ay, az = abs(px), abs(py), abs(pz)
    # seed the frame with the axis least aligned with p
    if ax <= ay and ax <= az:
        ex, ey, ez = 1.0, 0.0, 0.0
    elif ay <= az:
        ex, ey, ez = 0.0, 1.0, 0.0
    else:
        ex, ey, ez = 0.0, 0.0, 1.0
    # t1 = normalize(e x p), t2 = p x t1
    t1x = ey * pz - ez * py
    t1y = ez * px - ex * pz
    t1z = ex * py - ey * px
    nrm = math.sqrt(t1x * t1x + t1y * t1y + t1z * t1z)
    t1x /= nrm
    t1y /= nrm
    t1z /= nrm
    t2x = py * t1z - pz * t1y
    t2y = pz * t1x - px * t1z
    t2z = px * t1y - py * t1x
    sin_t = math.sqrt(max(0.0, 1.0 - cos_t * cos_t))
    cp = math.cos(phi) * sin_t
    sp = math.sin(phi) * sin_t
    dx = cos_t * px + cp * t1x + sp * t2x
    dy = cos_t * py + cp * t1y + sp * t2y
    dz = cos_t * pz + cp * t1z + sp * t2z
    n = math.sqrt(dx * dx + dy * dy + dz * dz)
    return dx / n, dy / n, dz / n


@dataclass(frozen=True)
class ScatterSample:
    direction: np.ndarray
    angle: float  # off-axis angle relative to the incoming direction, radians
    azimuth: float


def _scatter(psi, cos_t, u2) -> ScatterSample:
    psi = np.asarray(psi, dtype=float)
    psi = psi / np.linalg.norm(psi)
    phi = 2.0 * math.pi * u2
    d = np.array(_nb_rotate(psi[0], psi[1], psi[2], cos_t, phi))
    return ScatterSample(d, math.acos(cos_t), phi)


def sample_hg_direction(psi, g, u1, u2) -> ScatterSample:
    if abs(g) >= 1:
        raise ValueError(f"HG anisotropy must satisfy |g| < 1, got {g}")
    return _scatter(psi, _nb_hg_cos(float(g), float(u1)), u2)


def sample_rayleigh_direction(psi, u1, u2) -> ScatterSample:
    return _scatter(psi, _nb_rayleigh_cos(float(u1)), u2)


@njit(cache=True)
def _nb_sample_many(psi, g, rayleigh, u1, u2, out):
    for i in range(u1.shape[0]):
        c = _nb_rayleigh_cos(u1[i]) if rayleigh else _nb_hg_cos(g, u1[i])
        out[i, 0], out[i, 1], out[i, 2] = _nb_rotate(psi[0], psi[1], psi[2], c, 2.0 * math.pi * u2[i])


def sample_directions(psi, u1, u2, g=None) -> np.ndarray:
    """Batch of scattered directions (n, 3) around ``psi``; HG when ``g`` is given, else Rayleigh."""
    if g is not None and abs(g) >= 1:
        raise ValueError(f"HG anisotropy must satisfy |g| < 1, got {g}")
    psi = np.asarray(psi, dtype=float)
    psi = psi / np.linalg.norm(psi)
    u1 = np.ascontiguousarray(u1, dtype=float)
    u2 = np.ascontiguousarray(u2, dtype=float)
    out = np.empty((u1.size, 3))
    _nb_sample_many(psi, 0.0 if g is None else float(g), g is None, u1, u2, out)
    return out


# ---------------------------------------------------------------------------
# traversal kernels


@njit(cache=True)
def _nb_clip(ox, oy, oz, dx, dy, dz, lo, hi):
    """Parametric interval [t0, t1] of the ray inside the box (t1 < t0: miss)."""
    t0 = 0.0
    t1 = math.inf
    o = (ox, oy, oz)
    d = (dx, dy, dz)
    for a in range(3):
        if d[a] == 0.0:
            if o[a] < lo[a] or o[a] > hi[a]:
                return 1.0, -1.0
        else:
            ta = (lo[a] - o[a]) / d[a]
            tb = (hi[a] - o[a]) / d[a]
            if ta > tb:
                ta, tb = tb, ta
            if ta > t0:
                t0 = ta
            if tb < t1:
                t1 = tb
    return t0, t1


@njit(cache=True)
def _nb_boundary(o, d, lo, vd, i):
    if d > 0.0:
        return (lo + (i + 1) * vd - o) / d
    if d < 0.0:
        return (lo + i * vd - o) / d
    return math.inf


@njit(cache=True)
def _nb_setup(ox, oy, oz, dx, dy, dz, tmax, lo, vd, n):
    """Entry parameters and voxel of a ray limited to [0, tmax]."""
    hi0 = lo[0] + n[0] * vd[0]
    hi1 = lo[1] + n[1] * vd[1]
    hi2 = lo[2] + n[2] * vd[2]
    hi = (hi0, hi1, hi2)
    t0, t1 = _nb_clip(ox, oy, oz, dx, dy, dz, lo, hi)
    if tmax < t1:
        t1 = tmax
    if not t1 > t0:
        return False, 0.0, 0.0, 0, 0, 0
    px = ox + dx * t0
    py = oy + dy * t0
    pz = oz + dz * t0
    ix = min(max(int(math.floor((px - lo[0]) / vd[0])), 0), n[0] - 1)
    iy = min(max(int(math.floor((py - lo[1]) / vd[1])), 0), n[1] - 1)
    iz = min(max(int(math.floor((pz - lo[2]) / vd[2])), 0), n[2] - 1)
    return True, t0, t1, ix, iy, iz


@njit(cache=True)
def _nb_traverse(ox, oy, oz, dx, dy, dz, tmax, lo, vd, n, out_k, out_l):
    """Write (voxel, length) segments of the ray into out_k/out_l; return the count."""
    ok, t, t1, ix, iy, iz = _nb_setup(ox, oy, oz, dx, dy, dz, tmax, lo, vd, n)
    if not ok:
        return 0
    nx = n[0]
    nxy = n[0] * n[1]
    sx = 1 if dx > 0 else -1
    sy = 1 if dy > 0 else -1
    sz = 1 if dz > 0 else -1
    tx = _nb_boundary(ox, dx, lo[0], vd[0], ix)
    ty = _nb_boundary(oy, dy, lo[1], vd[1], iy)
    tz = _nb_boundary(oz, dz, lo[2], vd[2], iz)
    m = 0
    cap = out_k.shape[0]
    while True:
        tn = tx
        axis = 0
        if ty < tn:
            tn = ty
            axis = 1
        if tz < tn:
            tn = tz
            axis = 2
        end = tn if tn < t1 else t1
        if end > t and m < cap:
            out_k[m] = ix + nx * iy + nxy * iz
            out_l[m] = end - t
            m += 1
            t = end
        if tn >= t1:
            break
        if axis == 0:
            ix += sx
            if ix < 0 or ix >= n[0]:
                break
            tx = _nb_boundary(ox, dx, lo[0], vd[0], ix)
        elif axis == 1:
            iy += sy
            if iy < 0 or iy >= n[1]:
                break
            ty = _nb_boundary(oy, dy, lo[1], vd[1], iy)
        else:
            iz += sz
            if iz < 0 or iz >= n[2]:
                break
            tz = _nb_boundary(oz, dz, lo[2], vd[2], iz)
        if tn > t:
            t = tn
    return m


@njit(cache=True)
def _nb_optical_depth(ox, oy, oz, dx, dy, dz, tmax, lo, vd, n, beta):
    """Sum of beta * length along the ray within [0, tmax]."""
    ok, t, t1, ix, iy, iz = _nb_setup(ox, oy, oz, dx, dy, dz, tmax, lo, vd, n)
    if not ok:
        return 0.0
    nx = n[0]
    nxy = n[0] * n[1]
    sx = 1 if dx > 0 else -1
    sy = 1 if dy > 0 else -1
    sz = 1 if dz > 0 else -1
    tx = _nb_boundary(ox, dx, lo[0], vd[0], ix)
    ty = _nb_boundary(oy, dy, lo[1], vd[1], iy)
    tz = _nb_boundary(oz, dz, lo[2], vd[2], iz)
    tau = 0.0
    while True:
        tn = tx
        axis = 0
        if ty < tn:
            tn = ty
            axis = 1
        if tz < tn:
            tn = tz
            axis = 2
        end = tn if tn < t1 else t1
        if end > t:
            tau += beta[ix + nx * iy + nxy * iz] * (end - t)
            t = end
        if tn >= t1:
            break
        if axis == 0:
            ix += sx
            if ix < 0 or ix >= n[0]:
                break
            tx = _nb_boundary(ox, dx, lo[0], vd[0], ix)
        elif axis == 1:
            iy += sy
            if iy < 0 or iy >= n[1]:
                break
            ty = _nb_boundary(oy, dy, lo[1], vd[1], iy)
        else:
            iz += sz
            if iz < 0 or iz >= n[2]:
                break
            tz = _nb_boundary(oz, dz, lo[2], vd[2], iz)
    return tau


@njit(cache=True)
def _nb_march(ox, oy, oz, dx, dy, dz, tau_target, lo, vd, n, beta):
    """Walk until the accumulated optical depth reaches tau_target.

    Returns (inside, voxel, distance). When the domain is left first,
    ``inside`` is False and ``distance`` is the exit parameter.
    """
    ok, t, t1, ix, iy, iz = _nb_setup(ox, oy, oz, dx, dy, dz, math.inf, lo, vd, n)
    if not ok:
        return False, -1, 0.0
    nx = n[0]
    nxy = n[0] * n[1]
    sx = 1 if dx > 0 else -1
    sy = 1 if dy > 0 else -1
    sz = 1 if dz > 0 else -1
    tx = _nb_boundary(ox, dx, lo[0], vd[0], ix)
    ty = _nb_boundary(oy, dy, lo[1], vd[1], iy)
    tz = _nb_boundary(oz, dz, lo[2], vd[2], iz)
    tau = 0.0
    while True:
        tn = tx
        axis = 0
        if ty < tn:
            tn = ty
            axis = 1
        if tz < tn:
            tn = tz
            axis = 2
        end = tn if tn < t1 else t1
        if end > t:
            k = ix + nx * iy + nxy * iz
            b = beta[k]
            step = b * (end - t)
            if b > 0.0 and tau + step >= tau_target:
                return True, k, t + (tau_target - tau) / b
            tau += step
            t = end
        if tn >= t1:
            break
        if axis == 0:
            ix += sx
            if ix < 0 or ix >= n[0]:
                break
            tx = _nb_boundary(ox, dx, lo[0], vd[0], ix)
        elif axis == 1:
            iy += sy
            if iy < 0 or iy >= n[1]:
                break
            ty = _nb_boundary(oy, dy, lo[1], vd[1], iy)
        else:
            iz += sz
            if iz < 0 or iz >= n[2]:
                break
            tz = _nb_boundary(oz, dz, lo[2], vd[2], iz)
    return False, -1, t1


def grid_args(grid: VoxelGrid):
    return (np.ascontiguousarray(grid.origin, dtype=np.float64),
            np.ascontiguousarray(grid.voxel_dims, dtype=np.float64),
            np.ascontiguousarray(grid.counts, dtype=np.int64))


def max_segments(grid: VoxelGrid) -> int:
    return grid.nx + grid.ny + grid.nz + 3


# ---------------------------------------------------------------------------
# public traversal API


@dataclass(frozen=True)
class RaySegmentList:
    voxels: np.ndarray  # int64 flat indices, in ray order
    lengths: np.ndarray  # meters

    @property
    def total(self) -> float:
        return float(self.lengths.sum())

    def __len__(self):
        return len(self.voxels)


def _unit(direction) -> np.ndarray:
    d = np.asarray(direction, dtype=float)
    nrm = np.linalg.norm(d)
    if not abs(nrm - 1.0) < 1e-9:
        raise ValueError(f"direction must be unit-norm, |d| = {nrm}")
    return d


def traverse(grid: VoxelGrid, origin, direction, t_max: float = math.inf) -> RaySegmentList:
    """Exact ordered voxel segments of the ray origin + t*direction, 0 <= t <= t_max."""
    o = np.asarray(origin, dtype=float)
    d = _unit(direction)
    lo, vd, n = grid_args(grid)
    cap = max_segments(grid)
    ks = np.empty(cap, dtype=np.int64)
    ls = np.empty(cap)
    m = _nb_traverse(o[0], o[1], o[2], d[0], d[1], d[2], float(t_max), lo, vd, n, ks, ls)
    return RaySegmentList(ks[:m].copy(), ls[:m].copy())


def clipped_length(grid: VoxelGrid, origin, direction, t_max: float = math.inf) -> float:
    """Length of the ray inside the domain by slab clipping (traversal-free)."""
    o = np.asarray(origin, dtype=float)
    d = np.asarray(direction, dtype=float)
    t0, t1 = _nb_clip(o[0], o[1], o[2], d[0], d[1], d[2],
                      tuple(grid.lo.tolist()), tuple(grid.hi.tolist()))
    t1 = min(t1, t_max)
    return max(0.0, t1 - t0)


def optical_depth(scene: Scene, segments: RaySegmentList, channel: int = 1) -> float:
    """Sum of total extinction times segment length."""
    if len(segments) == 0:
        return 0.0
    beta = scene.medium.beta[channel].ravel()
    return float(np.dot(beta[segments.voxels], segments.lengths))


def transmittance(tau):
    tau = np.asarray(tau, dtype=float)
    if np.any(tau < 0):
        raise ValueError("optical depth must be >= 0")
    return np.exp(-tau)


@dataclass(frozen=True)
class MarchResult:
    position: np.ndarray
    voxel: int  # -1 when escaped
    distance: float
    escaped: bool


def march_to_tau(scene: Scene, origin, direction, tau_target: float, channel: int = 1) -> MarchResult:
    """Point along the ray where the optical depth reaches ``tau_target``."""
    if tau_target < 0:
        raise ValueError("tau_target must be >= 0")
    o = np.asarray(origin, dtype=float)
    d = _unit(direction)
    lo, vd, n = grid_args(scene.grid)
    beta = scene.medium.flat("beta_air", channel) + scene.medium.flat("beta_aerosol", channel)
    if tau_target == 0:
        return MarchResult(o.copy(), voxel_of_point(scene.grid, o), 0.0, False)
    inside, k, t = _nb_march(o[0], o[1], o[2], d[0], d[1], d[2], float(tau_target), lo, vd, n, beta)
    return MarchResult(o + t * d, int(k), float(t), not inside)
