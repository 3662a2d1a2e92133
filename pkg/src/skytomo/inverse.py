"""Aerosol extinction recovery from multi-view sky images.

The unknown is the green-channel aerosol extinction.  Each outer iteration
renders the current estimate with forward MC and freezes the in-scatter
fields j; the inner loop runs projected gradient descent on the resulting
surrogate cost, whose Jacobian is closed form because j is held fixed.
"""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import scipy.sparse as sp

from .rng import derive_seed
from .scene import Medium, Scene, VoxelGrid
from .transport import TransportConfig
from .vfmc import VfmcRenderer, accumulate_all, in_scatter_field

log = logging.getLogger(__name__)

GREEN = 1
H_REG = 3000.0


class DivergenceError(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# channel coupling


def sigma_ratio(medium: Medium) -> np.ndarray:
    """Per-channel aerosol cross-section relative to green."""
    s = np.asarray(medium.sigma_aerosol, dtype=float)
    if s[GREEN] == 0:
        raise ValueError("green aerosol cross-section is zero; channel coupling undefined")
    return s / s[GREEN]


def channel_extinction(beta_green, medium: Medium) -> np.ndarray:
    """(3, n_voxels) total extinction per channel for a green aerosol field."""
    ratio = sigma_ratio(medium)
    b = np.asarray(beta_green, dtype=float).ravel()
    air = medium.beta_air.reshape(3, -1)
    return air + ratio[:, None] * b[None, :]


# ---------------------------------------------------------------------------
# regularizer


def laplacian(grid: VoxelGrid, top_zero: bool = False) -> sp.csr_matrix:
    """Graph Laplacian of the 6-neighbour voxel lattice.

    Faces are zero-flux; with ``top_zero`` the layer above the TOA counts as
    an extra neighbour fixed at zero, since aerosol vanishes there.
    """
    nx, ny, nz = grid.nx, grid.ny, grid.nz
    idx = np.arange(grid.n_voxels).reshape(nz, ny, nx)
    pairs = [(idx[:, :, :-1], idx[:, :, 1:]), (idx[:, :-1, :], idx[:, 1:, :]), (idx[:-1], idx[1:])]
    a = np.concatenate([p[0].ravel() for p in pairs])
    b = np.concatenate([p[1].ravel() for p in pairs])
    ones = np.ones(a.size)
    adj = sp.coo_matrix((np.concatenate([ones, ones]), (np.concatenate([a, b]), np.concatenate([b, a]))),
                        shape=(grid.n_voxels, grid.n_voxels)).tocsr()
    deg = np.asarray(adj.sum(axis=1)).ravel()
    if top_zero:
        deg[idx[-1].ravel()] += 1.0
    return (sp.diags(deg) - adj).tocsr()


def altitude_weights(grid: VoxelGrid, h_reg: float = H_REG) -> np.ndarray:
    """exp(h / h_reg) per voxel; smoothness is enforced harder aloft."""
    h = grid.altitudes() - grid.lo[2]
    return np.exp(h / h_reg).ravel()


@dataclass
class Regularizer:
    op: sp.csr_matrix  # W L

    @classmethod
    def for_grid(cls, grid: VoxelGrid, h_reg: float = H_REG, top_zero: bool = False) -> "Regularizer":
        return cls((sp.diags(altitude_weights(grid, h_reg)) @ laplacian(grid, top_zero)).tocsr())

    def value(self, beta) -> float:
        v = self.op @ np.asarray(beta, dtype=float).ravel()
        return float(v @ v)

    def gradient(self, beta) -> np.ndarray:
        return 2.0 * (self.op.T @ (self.op @ np.asarray(beta, dtype=float).ravel()))


# ---------------------------------------------------------------------------
# surrogate model


def surrogate_jacobian_apply(r, pi, w, j, beta, t) -> np.ndarray:
    """J^T r for the frozen-j image Pi (j * beta * exp(-W beta))."""
    a = j * np.asarray(pi.T @ np.asarray(r, dtype=float).ravel()).ravel()
    return t * a - np.asarray(w.T @ (t * beta * a)).ravel()


def surrogate_jacobian_forward(v, pi, w, j, beta, t) -> np.ndarray:
    """J v, the directional derivative of the frozen-j image."""
    v = np.asarray(v, dtype=float).ravel()
    dy = t * v - beta * t * np.asarray(w @ v).ravel()
    return np.asarray(pi @ (j * dy)).ravel()


def conditioning_weights(renderer: VfmcRenderer, mode: str = "inverse") -> list[np.ndarray]:
    """Per-camera diagonal gradient weights from sub-ray counts.

    ``none`` is the identity, ``count`` the raw ray counts and ``inverse`` the
    reciprocal counts (zero where a camera sees nothing).
    """
    out = []
    for proj in renderer.projections:
        q = proj.ray_counts.astype(float)
        if mode == "none":
            out.append(np.ones_like(q))
        elif mode == "count":
            out.append(q)
        elif mode == "inverse":
            out.append(np.divide(1.0, q, out=np.zeros_like(q), where=q > 0))
        else:
            raise ValueError(f"unknown conditioning mode {mode!r}")
    return out


def pixel_weights(masks, renderer: VfmcRenderer) -> list[np.ndarray]:
    """Flattened float masks (1 = used) per camera; None means every valid pixel."""
    if masks is None:
        return [c.valid.astype(float) for c in renderer.cameras]
    return [np.asarray(m, dtype=float).ravel() * c.valid for m, c in zip(masks, renderer.cameras)]


class Surrogate:
    """Frozen-j cost and gradient over the green aerosol field."""

    def __init__(self, renderer: VfmcRenderer, medium: Medium, measured: dict, j: dict,
                 masks=None, eta: float = 0.0, regularizer: Regularizer | None = None,
                 conditioning: Sequence[np.ndarray] | None = None):
        self.renderer = renderer
        self.medium = medium
        self.ratio = sigma_ratio(medium)
        self.channels = sorted(measured)
        self.measured = {ch: [np.asarray(measured[ch][c], dtype=float).ravel()
                              for c in range(renderer.n_views)] for ch in self.channels}
        self.j = j  # {channel: [j_c per camera]}
        self.masks = pixel_weights(masks, renderer)
        self.eta = float(eta)
        self.reg = regularizer
        self.q = conditioning

    def _state(self, beta_g):
        b = channel_extinction(beta_g, self.medium)
        return {ch: (b[ch], self.renderer.transmittance(b[ch])) for ch in self.channels}

    def images(self, beta_g) -> dict:
        st = self._state(beta_g)
        out = {}
        for ch, (b, ts) in st.items():
            out[ch] = [np.asarray(p.matrix @ (jc * b * t)).ravel()
                       for p, jc, t in zip(self.renderer.projections, self.j[ch], ts)]
        return out

    def residuals(self, beta_g) -> dict:
        imgs = self.images(beta_g)
        return {ch: [m * (meas - i) for m, meas, i in zip(self.masks, self.measured[ch], imgs[ch])]
                for ch in self.channels}

    def data_cost(self, beta_g) -> float:
        return float(sum(r @ r for rs in self.residuals(beta_g).values() for r in rs))

    def cost(self, beta_g) -> float:
        e = self.data_cost(beta_g)
        if self.eta and self.reg is not None:
            e += self.eta * self.reg.value(beta_g)
        return e

    def gradient(self, beta_g) -> np.ndarray:
        """Gradient over the green aerosol field (conditioned when weights are set)."""
        beta_g = np.asarray(beta_g, dtype=float).ravel()
        st = self._state(beta_g)
        res = self.residuals(beta_g)
        g = np.zeros_like(beta_g)
        for ch in self.channels:
            b, ts = st[ch]
            acc = np.zeros_like(beta_g)
            for c, (p, w, t) in enumerate(zip(self.renderer.projections, self.renderer.los, ts)):
                jt = surrogate_jacobian_apply(self.masks[c] * res[ch][c], p.matrix, w, self.j[ch][c], b, t)
                acc += jt if self.q is None else self.q[c] * jt
            g += -2.0 * self.ratio[ch] * acc
        if self.eta and self.reg is not None:
            g += self.eta * self.reg.gradient(beta_g)
        return g

    def normal_apply(self, v, beta_g) -> np.ndarray:
        """Gauss-Newton operator (conditioned) applied to v; drives step-size selection."""
        st = self._state(beta_g)
        out = np.zeros_like(v)
        for ch in self.channels:
            b, ts = st[ch]
            for c, (p, w, t) in enumerate(zip(self.renderer.projections, self.renderer.los, ts)):
                jv = self.masks[c] * surrogate_jacobian_forward(self.ratio[ch] * v, p.matrix, w,
                                                                self.j[ch][c], b, t)
                jt = surrogate_jacobian_apply(self.masks[c] * jv, p.matrix, w, self.j[ch][c], b, t)
                out += 2.0 * self.ratio[ch] * (jt if self.q is None else self.q[c] * jt)
        if self.eta and self.reg is not None:
            out += self.eta * self.reg.gradient(v)
        return out


def largest_eigenvalue(apply: Callable[[np.ndarray], np.ndarray], n: int, iters: int = 30,
                       seed: int = 0) -> float:
    v = np.random.default_rng(seed).random(n) + 0.1
    v /= np.linalg.norm(v)
    lam = 0.0
    for _ in range(iters):
        w = apply(v)
        nrm = np.linalg.norm(w)
        if nrm == 0.0 or not np.isfinite(nrm):
            return 0.0
        lam = float(v @ w)
        v = w / nrm
    return max(lam, float(np.linalg.norm(apply(v))))


# ---------------------------------------------------------------------------
# constraint set


class Projector:
    """Non-negativity, support and piecewise-constant blocks."""

    def __init__(self, grid: VoxelGrid, blocks: Sequence[int] | None = None, support=None):
        self.grid = grid
        nz, ny, nx = grid.volume_shape
        if blocks is None:
            labels = np.arange(grid.n_voxels)
        else:
            bx, by, bz = (int(b) for b in blocks)
            if min(bx, by, bz) < 1:
                raise ValueError("block counts must be >= 1")
            iz, iy, ix = np.meshgrid(np.arange(nz), np.arange(ny), np.arange(nx), indexing="ij")
            labels = ((iz * bz // nz) * by + (iy * by // ny)) * bx + (ix * bx // nx)
            labels = np.unique(labels.ravel(), return_inverse=True)[1]
        self.labels = np.asarray(labels).ravel()
        self.n_blocks = int(self.labels.max()) + 1
        self.sizes = np.bincount(self.labels, minlength=self.n_blocks).astype(float)
        s = np.ones(grid.n_voxels, bool) if support is None else np.asarray(support, bool).ravel()
        # a block is in the support when any of its voxels is
        block_s = np.bincount(self.labels, weights=s, minlength=self.n_blocks) > 0
        self.support = block_s[self.labels]

    def average(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float).ravel()
        if self.n_blocks == x.size:
            return x.copy()
        means = np.bincount(self.labels, weights=x, minlength=self.n_blocks) / self.sizes
        return means[self.labels]

    def project_gradient(self, g) -> np.ndarray:
        return self.average(g) * self.support

    def __call__(self, x) -> np.ndarray:
        return np.maximum(self.average(x), 0.0) * self.support


# ---------------------------------------------------------------------------
# metrics


def error_metrics(n_hat, n_true) -> tuple[float, float]:
    """(relative mass difference, relative L1 error)."""
    n_hat = np.asarray(n_hat, dtype=float)
    n_true = np.asarray(n_true, dtype=float)
    if n_hat.shape != n_true.shape:
        raise ValueError("shape mismatch")
    m = np.abs(n_true).sum()
    if m == 0:
        raise ValueError("reference field is identically zero")
    return float((np.abs(n_hat).sum() - m) / m), float(np.abs(n_hat - n_true).sum() / m)


# ---------------------------------------------------------------------------
# solver


@dataclass
class SolveConfig:
    step: float | None = None  # None picks 1/lambda_max of the Gauss-Newton operator
    eta: float = 0.0
    n_gd: int = 5
    max_q: int = 200
    photons: int = 100_000
    final_photons: int | None = None
    seed: int = 0
    conditioning: str = "inverse"
    blocks: tuple | None = None
    h_reg: float = H_REG
    top_zero: bool = False
    max_order: int | None = None  # 1 gives the single-scattering solver
    plateau_tol: float = 1e-4
    plateau_window: int = 10
    guard_window: int = 5
    n_rays: int = 10
    threads_config: TransportConfig | None = None


@dataclass
class SolveResult:
    beta: np.ndarray  # green aerosol extinction, (nz, ny, nx)
    history: list = field(default_factory=list)  # one dict per inner step
    step: float = 0.0
    halvings: int = 0
    blocks: int = 0
    status: str = "max_q"
    final_costs: list = field(default_factory=list)  # frozen-j cost after each block's last step

    def block_costs(self) -> list[list[float]]:
        """Frozen-j cost before every inner step, closed by the block's final cost."""
        out: dict[int, list[float]] = {}
        for h in self.history:
            out.setdefault(h["q"], []).append(h["cost"])
        return [out[q] + self.final_costs[i:i + 1] for i, q in enumerate(sorted(out))]

    def write_trace(self, path) -> Path:
        path = Path(path)
        keys = list(self.history[0]) if self.history else ["q", "d", "cost", "step"]
        with path.open("w", newline="") as f:
            w = csv.DictWriter(f, fieldnames=keys)
            w.writeheader()
            w.writerows(self.history)
        return path


def freeze_j(scene: Scene, beta_g: np.ndarray, photons: int, seed: int, channels,
             max_order: int | None = None, config: TransportConfig | None = None) -> dict:
    """Render the current estimate forward and return the in-scatter fields per channel and camera."""
    medium = scene.medium.with_aerosol(beta_g.reshape(scene.grid.volume_shape))
    cur = scene.with_medium(medium)
    caches = accumulate_all(cur, photons, seed, channels, config, max_order)
    betas = medium.beta.reshape(3, -1)
    return {ch: [in_scatter_field(caches[ch].power[c], betas[ch]) for c in range(len(scene.cameras))]
            for ch in channels}


def solve(scene: Scene, measured: dict, config: SolveConfig | None = None, init=None, masks=None,
          renderer: VfmcRenderer | None = None, support=None, truth=None,
          callback: Callable | None = None) -> SolveResult:
    """Recover the green aerosol extinction field.

    ``scene`` supplies geometry, air and aerosol optics; its aerosol field is
    ignored.  ``measured`` maps channel -> (n_cams, npy, npx) radiance images.
    """
    cfg = config or SolveConfig()
    if cfg.step is not None and cfg.step <= 0:
        raise ValueError("step must be > 0")
    if cfg.n_gd < 1:
        raise ValueError("n_gd must be >= 1")
    grid = scene.grid
    renderer = renderer or VfmcRenderer(scene, cfg.n_rays)
    for ch, imgs in measured.items():
        if len(imgs) != renderer.n_views or any(np.shape(i) != (c.npy, c.npx)
                                                for i, c in zip(imgs, renderer.cameras)):
            raise ValueError(f"measured images for channel {ch} do not match the camera layout")
    channels = sorted(measured)
    proj = Projector(grid, cfg.blocks, support)
    reg = Regularizer.for_grid(grid, cfg.h_reg, cfg.top_zero) if cfg.eta else None
    q_weights = conditioning_weights(renderer, cfg.conditioning)
    beta = proj(np.zeros(grid.n_voxels) if init is None else np.asarray(init, dtype=float).ravel())
    truth_flat = None if truth is None else np.asarray(truth, dtype=float).ravel()
    res = SolveResult(beta.reshape(grid.volume_shape))
    factor = 1.0
    rising = 0
    block_end: list[float] = []
    for q in range(cfg.max_q):
        last = q == cfg.max_q - 1
        photons = cfg.final_photons if (last and cfg.final_photons) else cfg.photons
        j = freeze_j(scene, beta, photons, derive_seed(cfg.seed, q), channels, cfg.max_order,
                     cfg.threads_config)
        sur = Surrogate(renderer, scene.medium, measured, j, masks, cfg.eta, reg, q_weights)
        if cfg.step is None:
            lam = largest_eigenvalue(lambda v: proj.project_gradient(sur.normal_apply(v, beta)),
                                     grid.n_voxels, seed=q)
            base = 1.0 / lam if lam > 0 else 0.0
        else:
            base = cfg.step
        step = base * factor
        cost = sur.cost(beta)
        for d in range(cfg.n_gd):
            if not math.isfinite(cost):
                raise DivergenceError(f"cost became non-finite at block {q}, step {d}")
            row = {"q": q, "d": d, "cost": cost, "step": step}
            if truth_flat is not None:
                dm, eps = error_metrics(beta, truth_flat)
                row.update(delta_mass=dm, epsilon=eps)
            res.history.append(row)
            g = proj.project_gradient(sur.gradient(beta))
            beta = proj(beta - step * g)
            cost = sur.cost(beta)
        res.blocks = q + 1
        res.step = step
        if callback is not None:
            callback(q, beta, res)
        block_end.append(cost)
        res.final_costs.append(cost)
        # divergence guard on block-final costs
        rising = rising + 1 if len(block_end) > 1 and block_end[-1] > block_end[-2] else 0
        if rising >= cfg.guard_window:
            factor *= 0.5
            res.halvings += 1
            rising = 0
            log.warning("cost rose for %d blocks; halving the step (factor %.3g)", cfg.guard_window, factor)
        w = cfg.plateau_window
        if len(block_end) > w:
            ref = block_end[-w - 1]
            if ref > 0 and abs(ref - block_end[-1]) / ref < cfg.plateau_tol:
                res.status = "plateau"
                break
    res.beta = beta.reshape(grid.volume_shape)
    return res
