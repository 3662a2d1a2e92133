"""Closed-form single-scattering images.

Sunlight attenuated down to a point, scattered once, attenuated again on the
way to the camera.  Integrated along each view ray with Gauss-Legendre nodes
per voxel segment and averaged over a stratified set of sub-pixel rays; used
as the reference for the optically thin limit.
"""

import math

import numpy as np
from numba import njit, prange

from .optics import _nb_optical_depth, _nb_phase_hg, _nb_phase_rayleigh, _nb_traverse, grid_args, max_segments
from .scene import Scene, hammersley

_GL_X, _GL_W = np.polynomial.legendre.leggauss(4)


@njit(parallel=True, cache=True)
def _nb_single_scatter(cam, dirs, valid, lo, vd, n, beta_tot, sca_air, sca_aer, g, to_sun,
                       gl_x, gl_w, cap):
    npix, m = dirs.shape[0], dirs.shape[1]
    out = np.zeros(npix)
    for p in prange(npix):
        if not valid[p]:
            continue
        ks = np.empty(cap, dtype=np.int64)
        ls = np.empty(cap)
        acc = 0.0
        for r in range(m):
            dx, dy, dz = dirs[p, r, 0], dirs[p, r, 1], dirs[p, r, 2]
            mu = dx * to_sun[0] + dy * to_sun[1] + dz * to_sun[2]
            pr = _nb_phase_rayleigh(mu)
            ph = _nb_phase_hg(mu, g)
            cnt = _nb_traverse(cam[0], cam[1], cam[2], dx, dy, dz, np.inf, lo, vd, n, ks, ls)
            tau_cam = 0.0
            t = _entry(cam, dirs[p, r], lo, vd, n)
            for s in range(cnt):
                k = ks[s]
                length = ls[s]
                src = sca_air[k] * pr + sca_aer[k] * ph
                bk = beta_tot[k]
                if src > 0.0:
                    seg = 0.0
                    for q in range(gl_x.shape[0]):
                        h = 0.5 * length * (gl_x[q] + 1.0)
                        px = cam[0] + (t + h) * dx
                        py = cam[1] + (t + h) * dy
                        pz = cam[2] + (t + h) * dz
                        ts = _nb_optical_depth(px, py, pz, to_sun[0], to_sun[1], to_sun[2], np.inf,
                                               lo, vd, n, beta_tot)
                        seg += gl_w[q] * math.exp(-ts - tau_cam - bk * h)
                    acc += src * 0.5 * length * seg
                tau_cam += bk * length
                t += length
        out[p] = acc / m
    return out


@njit(cache=True)
def _entry(cam, d, lo, vd, n):
    """Ray parameter where the view ray enters the grid (0 if the camera is inside)."""
    t0 = 0.0
    for a in range(3):
        hi = lo[a] + vd[a] * n[a]
        if d[a] != 0.0:
            ta = (lo[a] - cam[a]) / d[a]
            tb = (hi - cam[a]) / d[a]
            if ta > tb:
                ta, tb = tb, ta
            if ta > t0:
                t0 = ta
    return t0


def single_scatter_images(scene: Scene, channel: int = 1, n_sub: int = 64) -> np.ndarray:
    """Single-scatter radiance images (n_cams, npy, npx), pixel-averaged, direct sun excluded."""
    m = scene.medium
    lo, vd, n = grid_args(scene.grid)
    beta_aer = m.flat("beta_aerosol", channel)
    beta_air = m.flat("beta_air", channel)
    beta_tot = beta_air + beta_aer
    sca_air = beta_air * m.albedo_air
    sca_aer = beta_aer * m.albedo_aerosol
    offsets = hammersley(n_sub)
    f = float(scene.sun.irradiance[channel])
    out = []
    for cam in scene.cameras:
        dirs = np.ascontiguousarray(cam.directions(offsets))
        img = _nb_single_scatter(np.ascontiguousarray(cam.position), dirs, cam.valid, lo, vd, n,
                                 beta_tot, sca_air, sca_aer, float(m.g[channel]),
                                 np.ascontiguousarray(scene.sun.to_sun), _GL_X, _GL_W,
                                 max_segments(scene.grid))
        out.append(f * img.reshape(cam.npy, cam.npx))
    return np.stack(out)
