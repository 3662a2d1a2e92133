"""Voxelized forward Monte Carlo renderer.

Forward packets leave a per-camera cache of scattered power in every voxel
they interact in.  Images are then assembled by purely geometric sparse
operators: a pixel/voxel projection ``Pi`` built from exact sub-ray segment
lengths, and a voxel-to-camera line-of-sight matrix ``W`` that turns the
extinction field into per-voxel transmittance.  No inverse-square factor
enters the accumulation, so in-situ cameras stay well conditioned.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
import scipy.sparse as sp
from numba import njit, prange

from .optics import _nb_traverse, grid_args, max_segments
from .rng import derive_seed
from .scene import CHANNELS, Camera, Scene, hammersley
from .transport import EventStats, TransportConfig, packet_power, trace_fmc

N_RAYS = 10


# ---------------------------------------------------------------------------
# geometry kernels


@njit(parallel=True, cache=True)
def _nb_project(cam, dirs, valid, lo, vd, n, cap, ks, ls):
    """Segments of every sub-ray; ``ks/ls`` have shape (npix, m, cap); returns counts (npix, m)."""
    npix, m = dirs.shape[0], dirs.shape[1]
    counts = np.zeros((npix, m), dtype=np.int64)
    for p in prange(npix):
        if not valid[p]:
            continue
        for r in range(m):
            counts[p, r] = _nb_traverse(cam[0], cam[1], cam[2], dirs[p, r, 0], dirs[p, r, 1],
                                        dirs[p, r, 2], np.inf, lo, vd, n, ks[p, r], ls[p, r])
    return counts


@njit(parallel=True, cache=True)
def _nb_los(cam, centers, rows, lo, vd, n, ks, ls):
    """Segments of [camera, center(k)] for each requested row k."""
    counts = np.zeros(rows.shape[0], dtype=np.int64)
    for i in prange(rows.shape[0]):
        k = rows[i]
        dx = centers[k, 0] - cam[0]
        dy = centers[k, 1] - cam[1]
        dz = centers[k, 2] - cam[2]
        dist = np.sqrt(dx * dx + dy * dy + dz * dz)
        if dist == 0.0:
            continue
        counts[i] = _nb_traverse(cam[0], cam[1], cam[2], dx / dist, dy / dist, dz / dist, dist,
                                 lo, vd, n, ks[i], ls[i])
    return counts


def subpixel_offsets(n_rays: int) -> np.ndarray:
    """Fixed stratified sub-pixel pattern, (n_rays, 2) fractions of a pixel."""
    if n_rays < 1:
        raise ValueError("n_rays must be >= 1")
    return hammersley(n_rays)


@dataclass(frozen=True)
class Projection:
    matrix: sp.csr_matrix  # (n_pixels, n_voxels), 1/m^2
    ray_counts: np.ndarray  # sub-rays crossing each voxel
    n_rays: int


def build_projection(scene: Scene, camera: Camera, n_rays: int = N_RAYS,
                     offsets: np.ndarray | None = None) -> Projection:
    """Pixel/voxel projection: mean sub-ray intersection length over the voxel volume."""
    if offsets is None:
        offsets = subpixel_offsets(n_rays)
    offsets = np.asarray(offsets, dtype=float).reshape(-1, 2)
    n_rays = len(offsets)
    if n_rays < 1:
        raise ValueError("n_rays must be >= 1")
    grid = scene.grid
    lo, vd, n = grid_args(grid)
    cap = max_segments(grid)
    dirs = np.ascontiguousarray(camera.directions(offsets))
    ks = np.zeros((camera.n_pixels, n_rays, cap), dtype=np.int64)
    ls = np.zeros((camera.n_pixels, n_rays, cap))
    counts = _nb_project(np.ascontiguousarray(camera.position), dirs, camera.valid, lo, vd, n, cap, ks, ls)
    keep = np.arange(cap)[None, None, :] < counts[:, :, None]
    rows = np.broadcast_to(np.arange(camera.n_pixels)[:, None, None], keep.shape)[keep]
    cols = ks[keep]
    vals = ls[keep] / (n_rays * grid.voxel_volume)
    mat = sp.csr_matrix((vals, (rows, cols)), shape=(camera.n_pixels, grid.n_voxels))
    mat.sum_duplicates()
    ray_counts = np.bincount(cols, minlength=grid.n_voxels).astype(np.int64)
    return Projection(mat, ray_counts, n_rays)


def build_los_matrix(scene: Scene, camera: Camera, rows: Sequence[int] | None = None) -> sp.csr_matrix:
    """Voxel-to-camera segment lengths, (n_voxels, n_voxels) in meters.

    Only the listed ``rows`` are filled when given; the rest stay empty.
    """
    grid = scene.grid
    lo, vd, n = grid_args(grid)
    cap = max_segments(grid)
    rows = np.arange(grid.n_voxels) if rows is None else np.unique(np.asarray(rows, dtype=np.int64))
    ks = np.zeros((len(rows), cap), dtype=np.int64)
    ls = np.zeros((len(rows), cap))
    counts = _nb_los(np.ascontiguousarray(camera.position), np.ascontiguousarray(grid.centers()),
                     rows, lo, vd, n, ks, ls)
    keep = np.arange(cap)[None, :] < counts[:, None]
    r = np.broadcast_to(rows[:, None], keep.shape)[keep]
    return sp.csr_matrix((ls[keep], (r, ks[keep])), shape=(grid.n_voxels, grid.n_voxels))


def build_los(scene: Scene, camera: Camera, channel: int = 1,
              w: sp.csr_matrix | None = None) -> tuple[sp.csr_matrix, np.ndarray]:
    """(W, T): LOS matrix and transmittance exp(-W beta) from each voxel center to the camera."""
    if w is None:
        w = build_los_matrix(scene, camera)
    return w, np.exp(-(w @ scene.medium.beta[channel].ravel()))


# ---------------------------------------------------------------------------
# scatter caches


@dataclass
class ScatterCache:
    """Per-camera scattered power cache for one channel.

    ``raw`` holds sums of albedo * intensity * phase per packet of unit power;
    the cache itself is ``raw * beam_power / n_packets``.
    """
    raw: np.ndarray  # (n_cams, n_voxels)
    counts: np.ndarray  # scattering events per voxel
    n_packets: int
    beam_power: float  # power entering through the launch window
    channel: int = 1
    stats: EventStats | None = None

    @property
    def power(self) -> np.ndarray:
        return self.raw * (self.beam_power / self.n_packets)

    def merge(self, other: "ScatterCache") -> "ScatterCache":
        if (self.raw.shape != other.raw.shape or self.channel != other.channel
                or self.beam_power != other.beam_power):
            raise ValueError("caches come from different scenes or channels")
        stats = self.stats.merge(other.stats) if self.stats and other.stats else None
        return ScatterCache(self.raw + other.raw, self.counts + other.counts,
                            self.n_packets + other.n_packets, self.beam_power, self.channel, stats)


def accumulate_scatter(scene: Scene, channel: int, n_packets: int, seed: int = 0,
                       cameras: Sequence[Camera] | None = None, config: TransportConfig | None = None,
                       first_packet: int = 0) -> ScatterCache:
    """Trace ``n_packets`` forward packets and cache scattering towards every camera."""
    res = trace_fmc(scene, channel, int(n_packets), seed=seed, config=config, cameras=cameras,
                    first_packet=first_packet)
    return ScatterCache(res.raw, res.counts, int(n_packets),
                        packet_power(scene, 1, channel), channel, res.stats)


def accumulate_all(scene: Scene, n_packets: int, seed: int = 0, channels=(0, 1, 2),
                   config: TransportConfig | None = None, max_order: int | None = None) -> dict:
    """Caches for several channels, one independent packet stream per channel."""
    cfg = config or TransportConfig()
    if max_order is not None:
        cfg = TransportConfig(cfg.i_min, cfg.p_survive, int(max_order), cfg.n_chunks)
    return {ch: accumulate_scatter(scene, ch, n_packets, derive_seed(seed, ch), config=cfg)
            for ch in channels}


def in_scatter_field(cache: np.ndarray, beta: np.ndarray) -> np.ndarray:
    """Discrete in-scatter field j = L / beta, zero in void voxels."""
    cache = np.asarray(cache, dtype=float)
    beta = np.asarray(beta, dtype=float)
    out = np.zeros(np.broadcast_shapes(cache.shape, beta.shape))
    np.divide(cache, beta, out=out, where=np.broadcast_to(beta > 0, out.shape))
    return out


def render(pi, j, beta, t) -> np.ndarray:
    """Image vector Pi (j * beta * T)."""
    j = np.asarray(j, dtype=float).ravel()
    beta = np.asarray(beta, dtype=float).ravel()
    t = np.asarray(t, dtype=float).ravel()
    if not (pi.shape[1] == j.size == beta.size == t.size):
        raise ValueError(f"dimension mismatch: Pi {pi.shape}, j {j.size}, beta {beta.size}, T {t.size}")
    return np.asarray(pi @ (j * beta * t)).ravel()


def fit_scale(a, b, mask=None) -> float:
    """Least-squares s minimizing |mask (a - s b)|^2."""
    a = np.asarray(a, dtype=float).ravel()
    b = np.asarray(b, dtype=float).ravel()
    m = np.ones(a.size, bool) if mask is None else np.asarray(mask, bool).ravel()
    bb = float(np.dot(b[m], b[m]))
    if not m.any() or bb == 0.0:
        raise ValueError("reference image is zero on every unmasked pixel")
    return float(np.dot(a[m], b[m]) / bb)


# ---------------------------------------------------------------------------
# renderer


class VfmcRenderer:
    """Precomputed camera geometry for a fixed grid and camera set."""

    def __init__(self, scene: Scene, n_rays: int = N_RAYS, cameras: Sequence[Camera] | None = None,
                 los_rows: Sequence[int] | None = None):
        self.grid = scene.grid
        self.cameras = list(scene.cameras if cameras is None else cameras)
        self.n_rays = n_rays
        self.projections = [build_projection(scene, c, n_rays) for c in self.cameras]
        self.los = [build_los_matrix(scene, c, los_rows) for c in self.cameras]

    @property
    def n_views(self) -> int:
        return len(self.cameras)

    def transmittance(self, beta: np.ndarray) -> list[np.ndarray]:
        b = np.asarray(beta, dtype=float).ravel()
        return [np.exp(-(w @ b)) for w in self.los]

    def render_channel(self, cache: np.ndarray, beta: np.ndarray) -> np.ndarray:
        """Images (n_cams, npy, npx) from a per-camera cache and the channel extinction."""
        beta = np.asarray(beta, dtype=float).ravel()
        out = []
        for c, (cam, proj, t) in enumerate(zip(self.cameras, self.projections, self.transmittance(beta))):
            j = in_scatter_field(cache[c], beta)
            out.append(render(proj.matrix, j, beta, t).reshape(cam.npy, cam.npx))
        return np.stack(out)

    def render_scene(self, scene: Scene, caches: dict) -> dict:
        return {ch: self.render_channel(c.power, scene.medium.beta[ch]) for ch, c in caches.items()}


def render_vfmc(scene: Scene, channel: int, n_packets: int, seed: int = 0, n_rays: int = N_RAYS,
                config: TransportConfig | None = None, renderer: VfmcRenderer | None = None) -> np.ndarray:
    """One-shot vFMC image set for a channel."""
    renderer = renderer or VfmcRenderer(scene, n_rays)
    cache = accumulate_scatter(scene, channel, n_packets, seed, renderer.cameras, config)
    return renderer.render_channel(cache.power, scene.medium.beta[channel])


def dump_triplets(matrix, path) -> Path:
    """Write a sparse matrix as 'row col value' lines with a shape header."""
    coo = sp.coo_matrix(matrix)
    path = Path(path)
    with path.open("w") as f:
        f.write(f"# rows {coo.shape[0]} cols {coo.shape[1]} nnz {coo.nnz}\n")
        for r, c, v in zip(coo.row, coo.col, coo.data):
            f.write(f"{r} {c} {v:.17g}\n")
    return path


def load_triplets(path) -> sp.csr_matrix:
    path = Path(path)
    with path.open() as f:
        head = f.readline().split()
    shape = (int(head[2]), int(head[4]))
    data = np.loadtxt(path, comments="#", ndmin=2)
    if data.size == 0:
        return sp.csr_matrix(shape)
    return sp.csr_matrix((data[:, 2], (data[:, 0].astype(int), data[:, 1].astype(int))), shape=shape)


__all__ = ["N_RAYS", "CHANNELS", "Projection", "ScatterCache", "VfmcRenderer", "accumulate_all",
           "accumulate_scatter", "build_los", "build_los_matrix", "build_projection", "dump_triplets",
           "fit_scale", "in_scatter_field", "load_triplets", "render", "render_vfmc", "subpixel_offsets"]
