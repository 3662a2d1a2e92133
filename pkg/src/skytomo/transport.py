"""Photon-packet transport: forward (sun to camera) and backward (camera to sun) MC.

A single numba routine, ``_nb_trace``, runs one packet's life and records
every scattering event (voxel, position, incoming direction, particle,
intensity).  The forward and backward drivers consume those event lists
for their local-estimation accumulators, and ``trace_fmc`` replays them
to arbitrary Python ``EventSink`` objects when asked to.

Images are radiance averaged over each pixel's image-plane footprint, in
units of the per-channel solar irradiance ``sun.irradiance``.
"""

from __future__ import annotations

import csv
import enum
import math
import os
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Protocol, Sequence

import numba
import numpy as np
from numba import njit, prange

from . import rng
from .optics import (
    AEROSOL, AIR, _nb_hg_cos, _nb_march, _nb_optical_depth, _nb_phase_hg,
    _nb_phase_rayleigh, _nb_rayleigh_cos, _nb_rotate, grid_args,
)
from .scene import Camera, Medium, Scene, fisheye_direction, fisheye_pixel

I_MIN = 1e-3
P_SURVIVE = 0.5
MAX_ORDER = 300

ESCAPED, ROULETTE, ORDER_CAP, ABSORBED = 0, 1, 2, 3
FATES = ("escaped", "roulette", "order_cap", "absorbed")

# event record columns
EV_X, EV_Y, EV_Z, EV_DX, EV_DY, EV_DZ, EV_I = range(7)


class Particle(enum.IntEnum):
    AIR = AIR
    AEROSOL = AEROSOL


def set_threads(n: int | None) -> int:
    """Set the numba worker count (``SKYTOMO_THREADS`` when None); returns it."""
    if n is None:
        n = int(os.environ.get("SKYTOMO_THREADS", numba.config.NUMBA_NUM_THREADS))
    n = max(1, min(int(n), numba.config.NUMBA_NUM_THREADS))
    numba.set_num_threads(n)
    return n


# ---------------------------------------------------------------------------
# per-event operations


def choose_particle(medium: Medium, k: int, channel: int, u: float) -> Particle:
    """Aerosol with probability beta_aerosol / beta in voxel k, else air."""
    ba = float(medium.beta_air[channel].ravel()[k])
    bb = float(medium.beta_aerosol[channel].ravel()[k])
    if ba + bb <= 0:
        raise ValueError(f"voxel {k} has zero extinction; no interaction can occur there")
    return Particle.AEROSOL if u * (ba + bb) < bb else Particle.AIR


@dataclass(frozen=True)
class PhotonPacket:
    origin: np.ndarray
    direction: np.ndarray
    intensity: float = 1.0
    order: int = 0
    stream: tuple[int, int] = (0, 0)  # (seed, packet index)
    alive: bool = True


def attenuate_and_roulette(packet: PhotonPacket, particle: Particle, u: float, medium: Medium,
                           i_min: float = I_MIN, p_survive: float = P_SURVIVE) -> PhotonPacket:
    """Apply the particle's albedo, then Russian roulette below ``i_min``."""
    if not packet.alive:
        raise ValueError("packet is already terminated")
    albedo = medium.albedo_aerosol if particle == Particle.AEROSOL else medium.albedo_air
    intensity = albedo * packet.intensity
    if intensity <= 0:
        return replace(packet, intensity=0.0, order=packet.order + 1, alive=False)
    if intensity < i_min:
        if u < p_survive:
            intensity /= p_survive
        else:
            return replace(packet, intensity=intensity, order=packet.order + 1, alive=False)
    return replace(packet, intensity=intensity, order=packet.order + 1)


# ---------------------------------------------------------------------------
# kernels


@njit(cache=True)
def _nb_trace(state, ox, oy, oz, dx, dy, dz, lo, vd, n, beta_tot, beta_aer,
              alb_air, alb_aer, g, i_min, p_rr, max_order, ev, ev_k, ev_p):
    """Trace one packet; returns (n_events, fate, first free-path length)."""
    intensity = 1.0
    m = 0
    first_t = math.inf
    while True:
        u = rng.next_uniform(state)
        tau = -math.log1p(-u)
        inside, k, t = _nb_march(ox, oy, oz, dx, dy, dz, tau, lo, vd, n, beta_tot)
        if m == 0 and inside:
            first_t = t  # an escaping packet's free path is unbounded
        if not inside:
            return m, ESCAPED, first_t
        ox += t * dx
        oy += t * dy
        oz += t * dz
        particle = AEROSOL if rng.next_uniform(state) * beta_tot[k] < beta_aer[k] else AIR
        ev[m, 0] = ox
        ev[m, 1] = oy
        ev[m, 2] = oz
        ev[m, 3] = dx
        ev[m, 4] = dy
        ev[m, 5] = dz
        ev[m, 6] = intensity
        ev_k[m] = k
        ev_p[m] = particle
        m += 1
        intensity *= alb_aer if particle == AEROSOL else alb_air
        if intensity <= 0.0:
            return m, ABSORBED, first_t
        if intensity < i_min:
            if rng.next_uniform(state) < p_rr:
                intensity /= p_rr
            else:
                return m, ROULETTE, first_t
        if m >= max_order:
            return m, ORDER_CAP, first_t
        u1 = rng.next_uniform(state)
        u2 = rng.next_uniform(state)
        if particle == AEROSOL:
            c = _nb_hg_cos(g, u1)
        else:
            c = _nb_rayleigh_cos(u1)
        dx, dy, dz = _nb_rotate(dx, dy, dz, c, 2.0 * math.pi * u2)


@njit(cache=True)
def _nb_phase(particle, mu, g):
    if particle == AEROSOL:
        return _nb_phase_hg(mu, g)
    return _nb_phase_rayleigh(mu)


@njit(cache=True)
def _nb_launch(state, launch):
    x = launch[0] + rng.next_uniform(state) * (launch[1] - launch[0])
    y = launch[2] + rng.next_uniform(state) * (launch[3] - launch[2])
    return x, y, launch[4]


@njit(parallel=True, cache=True)
def _nb_fmc(mode, first_packet, n_packets, n_chunks, seed, lo, vd, n, beta_tot, beta_aer, alb_air,
            alb_aer, g, i_min, p_rr, max_order, sun, launch, cams, npx, npy, det_radius, cache,
            counts, images, order_hist, fates):
    """Forward packets from the TOA.

    mode 0 accumulates the per-camera scatter cache ``cache[chunk, cam, voxel]``
    and event counts ``counts[chunk, voxel]``; mode 1 accumulates plain
    local-estimation images ``images[chunk, cam, pixel]``.  Packets are
    ``first_packet .. first_packet + n_packets``.
    """
    n_cams = cams.shape[0]
    for chunk in prange(n_chunks):
        start = (n_packets * chunk) // n_chunks
        stop = (n_packets * (chunk + 1)) // n_chunks
        state = np.empty(2, dtype=np.uint64)
        ev = np.empty((max_order, 7))
        ev_k = np.empty(max_order, dtype=np.int64)
        ev_p = np.empty(max_order, dtype=np.int64)
        for ip in range(first_packet + start, first_packet + stop):
            rng.seed_stream(state, seed, ip)
            ox, oy, oz = _nb_launch(state, launch)
            m, fate, first_t = _nb_trace(state, ox, oy, oz, sun[0], sun[1], sun[2], lo, vd, n,
                                         beta_tot, beta_aer, alb_air, alb_aer, g, i_min, p_rr,
                                         max_order, ev, ev_k, ev_p)
            order_hist[chunk, m] += 1
            fates[chunk, fate] += 1
            if mode == 1 and det_radius > 0.0:
                # unscattered sunlight passing the detector disc before its first interaction
                for c in range(n_cams):
                    wx = cams[c, 0] - ox
                    wy = cams[c, 1] - oy
                    wz = cams[c, 2] - oz
                    tc = wx * sun[0] + wy * sun[1] + wz * sun[2]
                    if tc < 0.0 or tc > first_t:
                        continue
                    qx = wx - tc * sun[0]
                    qy = wy - tc * sun[1]
                    qz = wz - tc * sun[2]
                    if qx * qx + qy * qy + qz * qz <= det_radius * det_radius:
                        p, jac = fisheye_pixel(-sun[0], -sun[1], -sun[2], npx[c], npy[c])
                        if p >= 0:
                            area = 4.0 / (npx[c] * npy[c])
                            images[chunk, c, p] += jac / area / (math.pi * det_radius * det_radius)
            for e in range(m):
                if mode == 0:
                    counts[chunk, ev_k[e]] += 1
                ex = ev[e, 0]
                ey = ev[e, 1]
                ez = ev[e, 2]
                w0 = ev[e, 6] * (alb_aer if ev_p[e] == AEROSOL else alb_air)
                for c in range(n_cams):
                    vx = cams[c, 0] - ex
                    vy = cams[c, 1] - ey
                    vz = cams[c, 2] - ez
                    r = math.sqrt(vx * vx + vy * vy + vz * vz)
                    if r == 0.0:
                        continue
                    mu = (ev[e, 3] * vx + ev[e, 4] * vy + ev[e, 5] * vz) / r
                    w = w0 * _nb_phase(ev_p[e], mu, g)
                    if mode == 0:
                        cache[chunk, c, ev_k[e]] += w
                    else:
                        # view direction from the camera towards the event
                        ux = -vx / r
                        uy = -vy / r
                        uz = -vz / r
                        p, jac = fisheye_pixel(ux, uy, uz, npx[c], npy[c])
                        if p < 0:
                            continue
                        tau = _nb_optical_depth(cams[c, 0], cams[c, 1], cams[c, 2], ux, uy, uz, r,
                                                lo, vd, n, beta_tot)
                        area = 4.0 / (npx[c] * npy[c])
                        images[chunk, c, p] += w * math.exp(-tau) / (r * r) * jac / area


@njit(parallel=True, cache=True)
def _nb_bmc(task_cam, task_pix, n_per, seed, lo, vd, n, beta_tot, beta_aer, alb_air, alb_aer, g,
            i_min, p_rr, max_order, to_sun, cos_sun, sun_solid_angle, cams, npx, npy,
            out_sum, out_sq, order_hist, fates):
    """Backward packets, ``n_per`` per (camera, pixel) task, jittered over the pixel."""
    n_tasks = task_cam.shape[0]
    for t in prange(n_tasks):
        c = task_cam[t]
        p = task_pix[t]
        i = p % npx[c]
        j = p // npx[c]
        state = np.empty(2, dtype=np.uint64)
        ev = np.empty((max_order, 7))
        ev_k = np.empty(max_order, dtype=np.int64)
        ev_p = np.empty(max_order, dtype=np.int64)
        s1 = 0.0
        s2 = 0.0
        for q in range(n_per):
            rng.seed_stream(state, seed, t * n_per + q)
            u = (i + rng.next_uniform(state)) / npx[c] * 2.0 - 1.0
            v = (j + rng.next_uniform(state)) / npy[c] * 2.0 - 1.0
            dx, dy, dz = fisheye_direction(u, v)
            m, fate, first_t = _nb_trace(state, cams[c, 0], cams[c, 1], cams[c, 2], dx, dy, dz,
                                         lo, vd, n, beta_tot, beta_aer, alb_air, alb_aer, g,
                                         i_min, p_rr, max_order, ev, ev_k, ev_p)
            order_hist[t, m] += 1
            fates[t, fate] += 1
            w = 0.0
            if m == 0 and dx * to_sun[0] + dy * to_sun[1] + dz * to_sun[2] >= cos_sun:
                w += 1.0 / sun_solid_angle
            for e in range(m):
                mu = ev[e, 3] * to_sun[0] + ev[e, 4] * to_sun[1] + ev[e, 5] * to_sun[2]
                w0 = ev[e, 6] * (alb_aer if ev_p[e] == AEROSOL else alb_air)
                tau = _nb_optical_depth(ev[e, 0], ev[e, 1], ev[e, 2], to_sun[0], to_sun[1], to_sun[2],
                                        math.inf, lo, vd, n, beta_tot)
                # P is symmetric: angle between the back-traced ray and the path to the sun
                w += w0 * _nb_phase(ev_p[e], mu, g) * math.exp(-tau)
            s1 += w
            s2 += w * w
        out_sum[t] = s1
        out_sq[t] = s2


@njit(cache=True)
def _nb_trace_one(seed, index, dx, dy, dz, lo, vd, n, beta_tot, beta_aer,
                  alb_air, alb_aer, g, i_min, p_rr, max_order, launch):
    """Single forward packet for the Python sink path; same draws as ``_nb_fmc``."""
    state = np.empty(2, dtype=np.uint64)
    rng.seed_stream(state, seed, index)
    ev = np.empty((max_order, 7))
    ev_k = np.empty(max_order, dtype=np.int64)
    ev_p = np.empty(max_order, dtype=np.int64)
    ox, oy, oz = _nb_launch(state, launch)
    m, fate, first_t = _nb_trace(state, ox, oy, oz, dx, dy, dz, lo, vd, n, beta_tot, beta_aer,
                                 alb_air, alb_aer, g, i_min, p_rr, max_order, ev, ev_k, ev_p)
    return ev[:m].copy(), ev_k[:m].copy(), ev_p[:m].copy(), fate


# ---------------------------------------------------------------------------
# python-facing API


class EventSink(Protocol):
    def on_event(self, voxel: int, position: np.ndarray, direction: np.ndarray,
                 particle: Particle, intensity: float) -> None: ...


@dataclass
class ScatterCacheSink:
    """Per-camera scatter cache; filled by the compiled path of ``trace_fmc``."""
    cache: np.ndarray | None = None  # (n_cams, n_voxels)


@dataclass
class LocalEstimateSink:
    """Plain forward local estimation into camera pixels (inverse-square weighting)."""
    detector_radius: float | None = None  # default: half the smallest voxel edge
    images: np.ndarray | None = None  # (n_cams, npy, npx)


@dataclass
class EventStats:
    order_hist: np.ndarray  # packets by number of scattering events
    fates: dict

    @property
    def n_packets(self) -> int:
        return int(self.order_hist.sum())

    @property
    def events_by_order(self) -> np.ndarray:
        """Number of scattering events of order s (s = 1, 2, ...) at index s."""
        h = self.order_hist
        return np.concatenate([[0], np.cumsum(h[::-1])[::-1][1:]])

    @property
    def truncated(self) -> int:
        return int(self.fates.get("order_cap", 0))

    def merge(self, other: "EventStats") -> "EventStats":
        m = max(len(self.order_hist), len(other.order_hist))
        h = np.zeros(m, dtype=np.int64)
        h[:len(self.order_hist)] += self.order_hist
        h[:len(other.order_hist)] += other.order_hist
        return EventStats(h, {k: self.fates.get(k, 0) + other.fates.get(k, 0) for k in FATES})

    def to_csv(self, path) -> Path:
        path = Path(path)
        with path.open("w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["kind", "key", "count"])
            for s, c in enumerate(self.order_hist):
                if c:
                    w.writerow(["events_per_packet", s, int(c)])
            for s, c in enumerate(self.events_by_order):
                if s and c:
                    w.writerow(["events_of_order", s, int(c)])
            for k in FATES:
                w.writerow(["termination", k, int(self.fates.get(k, 0))])
        return path


def _ordered_sum(buf: np.ndarray) -> np.ndarray:
    """Sum over the leading (chunk) axis in a fixed left-to-right order."""
    out = buf[0].copy()
    for i in range(1, buf.shape[0]):
        out += buf[i]
    return out


def _stats(order_hist, fates) -> EventStats:
    h = order_hist.sum(axis=0)
    f = fates.sum(axis=0)
    return EventStats(h.astype(np.int64), {k: int(f[i]) for i, k in enumerate(FATES)})


@dataclass
class TransportConfig:
    i_min: float = I_MIN
    p_survive: float = P_SURVIVE
    max_order: int = MAX_ORDER
    n_chunks: int = 8


def launch_rectangle(scene: Scene) -> np.ndarray:
    """TOA launch window: top face widened by the sun's horizontal shadow offset."""
    lo, hi = scene.grid.lo, scene.grid.hi
    d = scene.sun.direction
    height = hi[2] - lo[2]
    sx = -height * d[0] / abs(d[2])
    sy = -height * d[1] / abs(d[2])
    return np.array([min(lo[0], lo[0] + sx), max(hi[0], hi[0] + sx),
                     min(lo[1], lo[1] + sy), max(hi[1], hi[1] + sy), hi[2]])


def packet_power(scene: Scene, n_packets: int, channel: int) -> float:
    """Radiant power per TOA packet for unit-normal irradiance times channel ratio."""
    r = launch_rectangle(scene)
    area = (r[1] - r[0]) * (r[3] - r[2])
    cos_z = abs(scene.sun.direction[2])
    return float(scene.sun.irradiance[channel] * cos_z * area / n_packets)


def _medium_args(scene: Scene, channel: int):
    m = scene.medium
    beta_aer = m.flat("beta_aerosol", channel)
    beta_tot = m.flat("beta_air", channel) + beta_aer
    return beta_tot, beta_aer, float(m.albedo_air), float(m.albedo_aerosol), float(m.g[channel])


def _camera_args(cameras: Sequence[Camera]):
    cams = np.array([c.position for c in cameras], dtype=np.float64).reshape(-1, 3)
    npx = np.array([c.npx for c in cameras], dtype=np.int64)
    npy = np.array([c.npy for c in cameras], dtype=np.int64)
    return cams, npx, npy


@dataclass
class FmcResult:
    cache: np.ndarray | None  # (n_cams, n_voxels) scattered power towards each camera
    images: np.ndarray | None  # (n_cams, npy, npx) plain local-estimation radiance
    stats: EventStats
    power: float  # per-packet power already folded into cache/images
    raw: np.ndarray | None = None  # cache before the per-packet power factor
    counts: np.ndarray | None = None  # scattering events per voxel


def trace_fmc(scene: Scene, channel: int, n_packets: int, sinks: Sequence = (), seed: int = 0,
              config: TransportConfig | None = None, cameras: Sequence[Camera] | None = None,
              first_packet: int = 0) -> FmcResult:
    """Forward MC from the TOA; feeds scatter caches, local-estimation images and custom sinks.

    Packet ``i`` draws from stream ``(seed, first_packet + i)``, so disjoint
    packet ranges of one seed combine into the run over their union.
    """
    if n_packets < 1:
        raise ValueError("n_packets must be >= 1")
    cfg = config or TransportConfig()
    cameras = list(scene.cameras if cameras is None else cameras)
    cache_sinks = [s for s in sinks if isinstance(s, ScatterCacheSink)]
    le_sinks = [s for s in sinks if isinstance(s, LocalEstimateSink)]
    other = [s for s in sinks if not isinstance(s, (ScatterCacheSink, LocalEstimateSink))]
    lo, vd, n = grid_args(scene.grid)
    beta_tot, beta_aer, alb_air, alb_aer, g = _medium_args(scene, channel)
    sun = np.ascontiguousarray(scene.sun.direction)
    launch = launch_rectangle(scene)
    cams, npx, npy = _camera_args(cameras)
    power = packet_power(scene, n_packets, channel)
    seed = np.uint64(seed)
    n_chunks = max(1, min(cfg.n_chunks, n_packets))
    stats = None
    cache = images = None

    def run(mode, det_radius):
        nv = scene.grid.n_voxels if mode == 0 else 1
        npmax = int((npx * npy).max()) if mode == 1 and len(cameras) else 1
        c_buf = np.zeros((n_chunks, len(cameras), nv))
        k_buf = np.zeros((n_chunks, nv), dtype=np.int64)
        i_buf = np.zeros((n_chunks, len(cameras), npmax))
        oh = np.zeros((n_chunks, cfg.max_order + 1), dtype=np.int64)
        fa = np.zeros((n_chunks, len(FATES)), dtype=np.int64)
        _nb_fmc(mode, int(first_packet), n_packets, n_chunks, seed, lo, vd, n, beta_tot, beta_aer,
                alb_air, alb_aer, g, cfg.i_min, cfg.p_survive, cfg.max_order, sun, launch, cams,
                npx, npy, det_radius, c_buf, k_buf, i_buf, oh, fa)
        return c_buf, k_buf, i_buf, _stats(oh, fa)

    raw = counts = None
    if cache_sinks or not (le_sinks or other):
        c_buf, k_buf, _, stats = run(0, 0.0)
        raw = _ordered_sum(c_buf)
        counts = k_buf.sum(axis=0)
        cache = raw * power
        for s in cache_sinks:
            s.cache = cache
    if le_sinks:
        radius = le_sinks[0].detector_radius
        if radius is None:
            radius = 0.5 * float(scene.grid.voxel_dims.min())
        _, _, i_buf, st = run(1, float(radius))
        stats = stats or st
        images = np.stack([_ordered_sum(i_buf)[c, :cam.n_pixels].reshape(cam.npy, cam.npx)
                           for c, cam in enumerate(cameras)]) * power if cameras else None
        for s in le_sinks:
            s.images = images
    if other:
        oh = np.zeros(cfg.max_order + 1, dtype=np.int64)
        fa = np.zeros(len(FATES), dtype=np.int64)
        for ip in range(n_packets):
            ev, ev_k, ev_p, fate = _nb_trace_one(seed, first_packet + ip, sun[0], sun[1], sun[2],
                                                 lo, vd, n, beta_tot, beta_aer, alb_air, alb_aer, g,
                                                 cfg.i_min, cfg.p_survive, cfg.max_order, launch)
            oh[len(ev_k)] += 1
            fa[fate] += 1
            for e in range(len(ev_k)):
                for s in other:
                    s.on_event(int(ev_k[e]), ev[e, :3].copy(), ev[e, 3:6].copy(),
                               Particle(int(ev_p[e])), float(ev[e, 6]))
        if stats is None:
            stats = _stats(oh[None], fa[None])
    return FmcResult(cache, images, stats, power, raw, counts)


@dataclass
class BmcResult:
    images: np.ndarray  # (n_cams, npy, npx) pixel means, zero for skipped pixels
    stderr: np.ndarray  # standard error of each pixel mean
    stats: EventStats


def _bmc_tasks(cameras, pixels):
    if pixels is None:
        cam_idx, pix_idx = [], []
        for c, cam in enumerate(cameras):
            p = np.flatnonzero(cam.valid)
            cam_idx.append(np.full(len(p), c))
            pix_idx.append(p)
        return (np.concatenate(cam_idx).astype(np.int64) if cam_idx else np.zeros(0, np.int64),
                np.concatenate(pix_idx).astype(np.int64) if pix_idx else np.zeros(0, np.int64))
    pixels = np.asarray(pixels, dtype=np.int64).reshape(-1, 2)
    return np.ascontiguousarray(pixels[:, 0]), np.ascontiguousarray(pixels[:, 1])


def trace_bmc_pixels(scene: Scene, channel: int, n_per_pixel: int, seed: int = 0,
                     pixels=None, config: TransportConfig | None = None,
                     cameras: Sequence[Camera] | None = None) -> BmcResult:
    """Backward MC over many pixels; ``pixels`` is (m, 2) of (camera, flat pixel) or all valid."""
    if n_per_pixel < 1:
        raise ValueError("n_per_pixel must be >= 1")
    cfg = config or TransportConfig()
    cameras = list(scene.cameras if cameras is None else cameras)
    tc, tp = _bmc_tasks(cameras, pixels)
    lo, vd, n = grid_args(scene.grid)
    beta_tot, beta_aer, alb_air, alb_aer, g = _medium_args(scene, channel)
    to_sun = np.ascontiguousarray(scene.sun.to_sun)
    half = math.radians(scene.sun.half_angle_deg)
    cams, npx, npy = _camera_args(cameras)
    s1 = np.zeros(len(tc))
    s2 = np.zeros(len(tc))
    oh = np.zeros((len(tc), cfg.max_order + 1), dtype=np.int64)
    fa = np.zeros((len(tc), len(FATES)), dtype=np.int64)
    if len(tc):
        _nb_bmc(tc, tp, int(n_per_pixel), np.uint64(seed), lo, vd, n, beta_tot, beta_aer, alb_air,
                alb_aer, g, cfg.i_min, cfg.p_survive, cfg.max_order, to_sun, math.cos(half),
                2.0 * math.pi * (1.0 - math.cos(half)), cams, npx, npy, s1, s2, oh, fa)
    f = float(scene.sun.irradiance[channel])
    mean = s1 / n_per_pixel
    var = np.maximum(s2 / n_per_pixel - mean ** 2, 0.0) / max(n_per_pixel - 1, 1)
    images = np.zeros((len(cameras), max(c.n_pixels for c in cameras) if cameras else 0))
    stderr = np.zeros_like(images)
    images[tc, tp] = f * mean
    stderr[tc, tp] = f * np.sqrt(var)
    shaped = np.stack([images[c, :cam.n_pixels].reshape(cam.npy, cam.npx) for c, cam in enumerate(cameras)])
    shaped_err = np.stack([stderr[c, :cam.n_pixels].reshape(cam.npy, cam.npx) for c, cam in enumerate(cameras)])
    return BmcResult(shaped, shaped_err, _stats(oh, fa))


def trace_bmc(scene: Scene, channel: int, camera: int, pixel: int, n_packets: int, seed: int = 0,
              config: TransportConfig | None = None) -> float:
    """Radiance estimate of one pixel by backward MC."""
    cam = scene.cameras[camera]
    if not cam.valid[pixel]:
        raise ValueError(f"pixel {pixel} of camera {camera} lies outside the image circle")
    res = trace_bmc_pixels(scene, channel, n_packets, seed, [[camera, pixel]], config)
    return float(res.images[camera].ravel()[pixel])
