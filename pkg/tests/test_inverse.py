import math

import numpy as np
import pytest
import scipy.sparse as sp
from hypothesis import given, settings
from hypothesis import strategies as st

from skytomo import inverse as inv
from skytomo.scene import Camera, preset_scene
from skytomo.vfmc import VfmcRenderer

from conftest import uniform_scene


def small_problem(seed=0, shape=(4, 4, 4), n_cams=2, channels=(0, 1, 2)):
    """Random frozen-j problem with realistic magnitudes."""
    rng = np.random.default_rng(seed)
    dims = (1000.0, 1000.0, 500.0)
    ext = np.array(shape) * dims
    cams = [Camera(np.array([rng.uniform(0, ext[0]), rng.uniform(0, ext[1]), 0.0]), 6, 6)
            for _ in range(n_cams)]
    sc = uniform_scene(shape, dims, beta_aer=rng.uniform(1e-5, 1e-4, shape[::-1]),
                       beta_air=(1e-5, 1e-5, 1e-5), cameras=cams, sigma=(16.5, 16.2, 15.9))
    r = VfmcRenderer(sc, n_rays=3)
    v = sc.grid.voxel_volume
    j = {ch: [rng.uniform(1, 10, sc.grid.n_voxels) * v for _ in cams] for ch in channels}
    truth = sc.medium.beta_aerosol[1].ravel()
    # measurements near the model keep the cost well scaled for finite differences
    imgs = inv.Surrogate(r, sc.medium, {ch: np.zeros((n_cams, 6, 6)) for ch in channels}, j).images(truth)
    measured = {ch: np.stack([i.reshape(6, 6) * rng.uniform(0.8, 1.2, 36).reshape(6, 6)
                              for i in imgs[ch]]) for ch in channels}
    return sc, r, j, truth, measured


def test_sigma_ratio_type6():
    sc = preset_scene("atm2", (3, 3, 3), n_side=1, npx=4)
    ratio = inv.sigma_ratio(sc.medium)
    assert ratio[0] == pytest.approx(16.5 / 16.2) and ratio[1] == 1.0
    assert ratio[2] == pytest.approx(15.9 / 16.2)
    b = np.full(27, 1e-5)
    ext = inv.channel_extinction(b, sc.medium)
    assert np.allclose(ext[0] - sc.medium.beta_air[0].ravel(), b * ratio[0])


def test_laplacian_properties():
    sc = uniform_scene((4, 3, 5))
    lap = inv.laplacian(sc.grid)
    assert abs(lap - lap.T).max() == 0
    assert np.allclose(lap @ np.ones(sc.grid.n_voxels), 0)
    top = inv.laplacian(sc.grid, top_zero=True) @ np.ones(sc.grid.n_voxels)
    layers = top.reshape(sc.grid.volume_shape)
    assert np.all(layers[-1] == 1) and np.all(layers[:-1] == 0)


def test_regularizer_constant_and_fd():
    sc = uniform_scene((4, 4, 4))
    reg = inv.Regularizer.for_grid(sc.grid)
    assert reg.value(np.full(64, 3.0)) == pytest.approx(0.0, abs=1e-20)
    assert np.allclose(reg.gradient(np.full(64, 3.0)), 0)
    x = np.random.default_rng(0).random(64)
    g = reg.gradient(x)
    h = 1e-4
    for k in (0, 21, 63):
        e = np.zeros(64)
        e[k] = h
        fd = (reg.value(x + e) - reg.value(x - e)) / (2 * h)
        assert fd == pytest.approx(g[k], rel=1e-8)


def test_altitude_weights_grow():
    sc = uniform_scene((2, 2, 3), (1.0, 1.0, 3000.0))
    w = inv.altitude_weights(sc.grid).reshape(sc.grid.volume_shape)[:, 0, 0]
    assert np.allclose(w, np.exp([0.5, 1.5, 2.5]))  # voxel-center altitudes


def test_scalar_jacobian():
    pi = sp.csr_matrix([[0.3]])
    w = sp.csr_matrix([[200.0]])
    beta, j = np.array([2e-3]), np.array([5.0])
    t = np.exp(-(w @ beta))
    expected = 0.3 * 5.0 * (t[0] - beta[0] * t[0] * 200.0)
    assert inv.surrogate_jacobian_apply([1.0], pi, w, j, beta, t)[0] == pytest.approx(expected, rel=1e-14)
    assert inv.surrogate_jacobian_forward([1.0], pi, w, j, beta, t)[0] == pytest.approx(expected, rel=1e-14)
    assert inv.surrogate_jacobian_apply([1.0], pi, w, np.zeros(1), beta, t)[0] == 0


def test_jacobian_forward_and_adjoint_agree():
    sc, r, j, truth, _ = small_problem(3)
    b = sc.medium.beta[1].ravel()
    t = r.transmittance(b)[0]
    p, w = r.projections[0].matrix, r.los[0]
    rng = np.random.default_rng(1)
    v, res = rng.random(b.size), rng.random(p.shape[0])
    lhs = res @ inv.surrogate_jacobian_forward(v, p, w, j[1][0], b, t)
    rhs = v @ inv.surrogate_jacobian_apply(res, p, w, j[1][0], b, t)
    assert lhs == pytest.approx(rhs, rel=1e-12)


@pytest.mark.parametrize("seed", range(3))
def test_gradient_matches_finite_differences(seed):
    sc, r, j, truth, measured = small_problem(seed)
    sur = inv.Surrogate(r, sc.medium, measured, j)
    g = sur.gradient(truth)
    rng = np.random.default_rng(seed)
    for k in rng.choice(truth.size, 6, replace=False):
        h = 6e-6 * truth[k]
        e = np.zeros_like(truth)
        e[k] = h
        fd = (sur.cost(truth + e) - sur.cost(truth - e)) / (2 * h)
        assert fd == pytest.approx(g[k], rel=1e-5)


def test_zero_residual_gives_zero_cost_and_gradient():
    sc, r, j, truth, _ = small_problem(1)
    sur0 = inv.Surrogate(r, sc.medium, {0: np.zeros((2, 6, 6))}, j)
    imgs = sur0.images(truth)
    measured = {ch: np.stack([i.reshape(6, 6) for i in imgs[ch]]) for ch in imgs}
    sur = inv.Surrogate(r, sc.medium, measured, j)
    assert sur.cost(truth) == pytest.approx(0.0, abs=1e-20)
    assert np.allclose(sur.gradient(truth), 0.0, atol=1e-20)


def test_single_pixel_residual_cost():
    sc, r, j, truth, _ = small_problem(2, channels=(1,))
    sur0 = inv.Surrogate(r, sc.medium, {1: np.zeros((2, 6, 6))}, j)
    meas = np.stack([i.reshape(6, 6) for i in sur0.images(truth)[1]])
    p = int(np.flatnonzero(r.cameras[0].valid)[0])
    meas[0].flat[p] += 0.25
    sur = inv.Surrogate(r, sc.medium, {1: meas}, j)
    assert sur.cost(truth) == pytest.approx(0.0625, rel=1e-9)


def test_mask_annihilation():
    sc, r, j, truth, measured = small_problem(4)
    masks = np.ones((2, 6, 6), bool)
    masks[:, :3, :] = False
    a = inv.Surrogate(r, sc.medium, measured, j, masks)
    bumped = {ch: m.copy() for ch, m in measured.items()}
    for m in bumped.values():
        m[:, :3, :] += 123.0
    b = inv.Surrogate(r, sc.medium, bumped, j, masks)
    assert a.cost(truth) == b.cost(truth)
    assert np.array_equal(a.gradient(truth), b.gradient(truth))


def test_conditioning_weights():
    sc, r, j, truth, measured = small_problem(5)
    counts = [p.ray_counts for p in r.projections]
    q_inv = inv.conditioning_weights(r, "inverse")
    q_cnt = inv.conditioning_weights(r, "count")
    for c, q, qc in zip(counts, q_inv, q_cnt):
        assert np.all(q[c == 0] == 0) and np.allclose(q[c > 0], 1.0 / c[c > 0])
        assert np.array_equal(qc, c)
    assert all(np.all(q == 1) for q in inv.conditioning_weights(r, "none"))
    with pytest.raises(ValueError):
        inv.conditioning_weights(r, "bogus")
    # per-camera positive weights never flip a component's sign
    plain = inv.Surrogate(r, sc.medium, measured, j)
    cond = inv.Surrogate(r, sc.medium, measured, j, conditioning=q_inv)
    for c in range(2):
        only = [np.zeros_like(q) for q in q_inv]
        only[c] = q_inv[c]
        one = [np.zeros_like(q) for q in q_inv]
        one[c] = np.ones_like(q_inv[c])
        g1 = inv.Surrogate(r, sc.medium, measured, j, conditioning=one).gradient(truth)
        gq = inv.Surrogate(r, sc.medium, measured, j, conditioning=only).gradient(truth)
        seen = counts[c] > 0
        assert np.all(np.sign(gq[seen]) == np.sign(g1[seen]))
        assert np.all(gq[~seen] == 0)
    assert plain.gradient(truth).shape == cond.gradient(truth).shape


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 4), st.integers(1, 4), st.integers(1, 3), st.integers(0, 2 ** 31))
def test_projection_idempotent(bx, by, bz, seed):
    sc = uniform_scene((4, 4, 3))
    rng = np.random.default_rng(seed)
    support = rng.random(sc.grid.n_voxels) > 0.3
    proj = inv.Projector(sc.grid, (bx, by, bz), support)
    x = rng.normal(size=sc.grid.n_voxels)
    once = proj(x)
    assert np.all(once >= 0)
    assert np.allclose(proj(once), once, rtol=1e-14, atol=1e-300)
    assert proj.n_blocks == bx * by * bz


def test_projector_blocks_and_support():
    sc = uniform_scene((4, 4, 2))
    proj = inv.Projector(sc.grid, (2, 2, 1))
    x = np.arange(32.0)
    y = proj(x).reshape(2, 4, 4)
    assert len(np.unique(y)) == 4
    assert y.sum() == pytest.approx(x.sum())
    with pytest.raises(ValueError):
        inv.Projector(sc.grid, (0, 1, 1))
    none = inv.Projector(sc.grid, support=np.zeros(32, bool))
    assert np.all(none(x) == 0)


def test_error_metrics():
    n = np.array([1.0, 2.0, 3.0])
    assert inv.error_metrics(n, n) == (0.0, 0.0)
    assert inv.error_metrics(2 * n, n) == pytest.approx((1.0, 1.0))
    assert inv.error_metrics(0 * n, n) == pytest.approx((-1.0, 1.0))
    with pytest.raises(ValueError):
        inv.error_metrics(n, 0 * n)
    with pytest.raises(ValueError):
        inv.error_metrics(n[:2], n)


def test_largest_eigenvalue():
    d = np.array([1.0, 4.0, 2.5, 0.1])
    assert inv.largest_eigenvalue(lambda v: d * v, 4, iters=200) == pytest.approx(4.0, rel=1e-6)
    assert inv.largest_eigenvalue(lambda v: 0 * v, 4) == 0.0


def _toy(shape=(8, 8, 8), n_side=2):
    from skytomo.transport import trace_bmc_pixels  # noqa: F401  (kept for symmetry with the CLI path)
    sc = preset_scene("toy", shape, n_side=n_side, spacing=5000.0, npx=12)
    return sc


def test_solve_from_truth_is_a_fixed_point():
    from skytomo.rng import derive_seed
    from skytomo.vfmc import accumulate_all
    sc = _toy((6, 6, 6))
    r = VfmcRenderer(sc, n_rays=4)
    truth = sc.medium.beta_aerosol[1]
    # measurements rendered with the solver's own first-block stream: an exact stationary point
    caches = accumulate_all(sc, 50000, seed=derive_seed(7, 0), channels=(1,))
    meas = r.render_scene(sc, caches)
    cfg = inv.SolveConfig(max_q=1, n_gd=3, photons=50000, seed=7)
    res = inv.solve(sc, meas, cfg, init=truth, renderer=r, truth=truth)
    assert inv.error_metrics(res.beta, truth)[1] < 1e-6
    # with fresh streams the estimate drifts only at the MC noise level
    caches = accumulate_all(sc, 400000, seed=99, channels=(1,))
    meas = r.render_scene(sc, caches)
    res = inv.solve(sc, meas, inv.SolveConfig(max_q=3, n_gd=2, photons=400000, seed=7),
                    init=truth, renderer=r, truth=truth)
    assert inv.error_metrics(res.beta, truth)[1] < 0.15


def _zero_init_run():
    from skytomo.vfmc import accumulate_all
    sc = _toy((8, 8, 8), n_side=2)
    sc = sc.with_cameras(sc.cameras + (Camera(sc.grid.extent * np.array([0.5, 0.5, 0.0]), 12, 12),))
    r = VfmcRenderer(sc, n_rays=4)
    meas = r.render_scene(sc, accumulate_all(sc, 200000, seed=9, channels=(1,)))
    truth = sc.medium.beta_aerosol[1]
    res = inv.solve(sc, meas, inv.SolveConfig(max_q=6, n_gd=5, photons=50000, seed=1),
                    renderer=r, truth=truth)
    return res, truth


def test_solve_zero_init_descends():
    res, truth = _zero_init_run()
    assert res.history[0]["epsilon"] == 1.0
    assert res.beta.sum() > 0
    for block in res.block_costs():
        assert all(b <= a * (1 + 1e-12) for a, b in zip(block, block[1:]))


@pytest.mark.xfail(strict=True, reason="8^3 grid with 5 ground cameras is too coarse to localise the "
                   "cloud vertically; recovery from zero is checked on 12^3 in the acceptance suite")
def test_solve_zero_init_improves_on_8_cube():
    res, truth = _zero_init_run()
    assert inv.error_metrics(res.beta, truth)[1] < 1.0


def test_solve_validation(tmp_path):
    sc = _toy((4, 4, 4))
    r = VfmcRenderer(sc, n_rays=2)
    good = {1: np.zeros((len(sc.cameras), 12, 12))}
    with pytest.raises(ValueError):
        inv.solve(sc, {1: np.zeros((1, 12, 12))}, renderer=r)
    with pytest.raises(ValueError):
        inv.solve(sc, good, inv.SolveConfig(step=-1.0), renderer=r)
    with pytest.raises(ValueError):
        inv.solve(sc, good, inv.SolveConfig(n_gd=0), renderer=r)
    bad = {1: np.full((len(sc.cameras), 12, 12), np.nan)}
    with pytest.raises(inv.DivergenceError):
        inv.solve(sc, bad, inv.SolveConfig(max_q=1, photons=1000, step=1.0), renderer=r)
    res = inv.solve(sc, good, inv.SolveConfig(max_q=2, n_gd=2, photons=2000), renderer=r)
    path = res.write_trace(tmp_path / "trace.csv")
    lines = path.read_text().splitlines()
    assert lines[0] == "q,d,cost,step" and len(lines) == 5


def test_divergence_guard_halves_the_step():
    sc = _toy((4, 4, 4))
    r = VfmcRenderer(sc, n_rays=2)
    rng = np.random.default_rng(0)
    meas = {1: rng.random((len(sc.cameras), 12, 12)) * 1e-3}
    # an absurd fixed step makes the block costs oscillate upwards
    res = inv.solve(sc, meas, inv.SolveConfig(max_q=12, n_gd=1, photons=2000, step=1e12,
                                              guard_window=2), renderer=r)
    costs = [b[-1] for b in res.block_costs()]
    assert res.halvings >= 1 or all(b <= a for a, b in zip(costs, costs[1:]))
