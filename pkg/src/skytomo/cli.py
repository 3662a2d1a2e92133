"""``skytomo`` command line: scenes, rendering, sensing, inversion and comparisons.

Exit codes: 0 success, 2 validation error, 3 numerical divergence.
"""

from __future__ import annotations

import csv
import json
import logging
import sys
import time
from pathlib import Path

import click
import numpy as np

from . import imageio, inverse, sensor, transport, vfmc
from .manifest import RunManifest
from .oracle import single_scatter_images
from .rng import derive_seed
from .scene import CHANNELS, PRESETS, SceneError, load_scene, preset_scene, read_volume, save_scene, write_volume

EXIT_VALIDATION = 2
EXIT_DIVERGENCE = 3

log = logging.getLogger("skytomo")


def _parse_grid(text: str) -> tuple[int, int, int]:
    try:
        parts = tuple(int(p) for p in text.lower().split("x"))
    except ValueError:
        raise click.BadParameter(f"expected NXxNYxNZ, got {text!r}") from None
    if len(parts) != 3 or min(parts) < 1:
        raise click.BadParameter(f"expected three positive sizes NXxNYxNZ, got {text!r}")
    return parts


def _parse_channels(text: str) -> list[int]:
    out = []
    for ch in text.upper():
        if ch not in CHANNELS:
            raise click.BadParameter(f"unknown channel {ch!r}; use letters from RGB")
        out.append(CHANNELS.index(ch))
    return sorted(set(out))


def _photons(value: float) -> int:
    n = int(value)
    if n <= 0:
        raise click.BadParameter("photon budget must be > 0")
    return n


@click.group()
@click.option("-v", "--verbose", is_flag=True, help="Log progress to stderr.")
def cli(verbose):
    """In-situ multi-view sky tomography toolkit."""
    logging.basicConfig(level=logging.INFO if verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")


# ---------------------------------------------------------------------------


@cli.command("gen-scene")
@click.option("--preset", type=click.Choice(PRESETS), required=True)
@click.option("--grid", "grid", default="20x20x20", show_default=True, help="Voxel counts NXxNYxNZ.")
@click.option("--cameras", "n_side", default=6, show_default=True, help="Cameras per side of the ground grid.")
@click.option("--spacing", default=7000.0, show_default=True, help="Camera spacing, m.")
@click.option("--pixels", default=32, show_default=True, help="Image side in pixels.")
@click.option("--sun-zenith", default=45.0, show_default=True)
@click.option("--sun-azimuth", default=0.0, show_default=True)
@click.option("--out", "out", type=click.Path(path_type=Path), required=True, help="Scene YAML to write.")
def gen_scene(preset, grid, n_side, spacing, pixels, sun_zenith, sun_azimuth, out):
    """Write a preset scene file."""
    shape = _parse_grid(grid)
    scene = preset_scene(preset, shape, n_side=n_side, spacing=spacing, npx=pixels,
                         sun_zenith=sun_zenith, sun_azimuth=sun_azimuth)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_scene(scene, out)
    man = RunManifest("gen-scene", {"preset": preset, "grid": list(shape), "cameras": n_side,
                                    "spacing": spacing, "pixels": pixels, "sun_zenith": sun_zenith,
                                    "sun_azimuth": sun_azimuth})
    man.add_output(out)
    man.write(out.parent)
    click.echo(str(out))


# ---------------------------------------------------------------------------


@cli.command()
@click.option("--scene", "scene_path", type=click.Path(exists=True, path_type=Path), required=True)
@click.option("--method", type=click.Choice(["fmc", "bmc", "vfmc"]), default="vfmc", show_default=True)
@click.option("--photons", type=float, default=1e6, show_default=True,
              help="Total packets (fmc, vfmc) or packets per pixel (bmc).")
@click.option("--seed", default=0, show_default=True)
@click.option("--nrays", default=vfmc.N_RAYS, show_default=True, help="Sub-pixel rays for vfmc.")
@click.option("--channels", default="RGB", show_default=True)
@click.option("--single-scatter-oracle", "oracle", is_flag=True,
              help="Render the closed-form single-scatter image instead of MC.")
@click.option("--threads", type=int, default=None, help="Worker threads (default: SKYTOMO_THREADS or all).")
@click.option("--out", "out", type=click.Path(path_type=Path), required=True, help="Run directory.")
def render(scene_path, method, photons, seed, nrays, channels, oracle, threads, out):
    """Render per-camera images (PFM) into a run directory."""
    n = _photons(photons)
    if nrays < 1:
        raise click.BadParameter("--nrays must be >= 1")
    chans = _parse_channels(channels)
    workers = transport.set_threads(threads)
    scene = load_scene(scene_path)
    man = RunManifest("render", {"method": "oracle" if oracle else method, "photons": n, "nrays": nrays,
                                 "channels": [CHANNELS[c] for c in chans], "threads": workers},
                      seeds={"seed": seed})
    man.add_input("scene", scene_path)
    images, stats = {}, None
    t0 = time.perf_counter()
    renderer = vfmc.VfmcRenderer(scene, nrays) if method == "vfmc" and not oracle else None
    for ch in chans:
        cs = derive_seed(seed, ch)
        if oracle:
            images[ch] = single_scatter_images(scene, ch)
            continue
        if method == "vfmc":
            cache = vfmc.accumulate_scatter(scene, ch, n, cs)
            images[ch] = renderer.render_channel(cache.power, scene.medium.beta[ch])
            st = cache.stats
        elif method == "fmc":
            res = transport.trace_fmc(scene, ch, n, sinks=[transport.LocalEstimateSink()], seed=cs)
            images[ch] = res.images
            st = res.stats
        else:
            res = transport.trace_bmc_pixels(scene, ch, n, seed=cs)
            images[ch] = res.images
            st = res.stats
        if st is not None:
            stats = st if stats is None else stats.merge(st)
    man.timings["render_s"] = time.perf_counter() - t0
    for p in imageio.write_images(out, images):
        man.add_output(p)
    if stats is not None:
        man.add_output(stats.to_csv(out / "event_stats.csv"))
    man.write(out)
    click.echo(str(out))


# ---------------------------------------------------------------------------


def _load_masks(scene, radius):
    return sensor.sun_masks(scene.cameras, scene.sun, radius)


@cli.command()
@click.option("--scene", "scene_path", type=click.Path(exists=True, path_type=Path), required=True)
@click.option("--images", "images_dir", type=click.Path(exists=True, file_okay=False, path_type=Path),
              required=True, help="Run directory holding radiance PFMs.")
@click.option("--mask-radius", default=15.0, show_default=True, help="Sun mask radius, degrees.")
@click.option("--read-noise", default=0.4, show_default=True, help="Read noise sigma, graylevels.")
@click.option("--noise/--no-noise", default=True, show_default=True)
@click.option("--seed", default=0, show_default=True)
@click.option("--out", "out", type=click.Path(path_type=Path), required=True)
def sense(scene_path, images_dir, mask_radius, read_noise, noise, seed, out):
    """Turn radiance images into 10-bit measurements (PNG16 + PFM) with the sun mask."""
    scene = load_scene(scene_path)
    images = imageio.read_images(images_dir, len(scene.cameras))
    masks = _load_masks(scene, mask_radius)
    meas = sensor.apply_sensor(images, masks, sensor.SensorModel(read_noise=read_noise), seed, noise)
    man = RunManifest("sense", {"mask_radius": mask_radius, "read_noise": read_noise, "noise": noise},
                      seeds={"seed": seed})
    man.add_input("scene", scene_path)
    man.add_input("images", images_dir)
    for fmt in ("pfm", "png"):
        for p in imageio.write_images(out, meas.images, fmt):
            man.add_output(p)
    np.save(out / "masks.npy", masks)
    (out / "sensor.json").write_text(json.dumps({"gain": meas.gain, "mask_radius": mask_radius,
                                                 "read_noise": read_noise, "noise": noise}, indent=2))
    man.add_output(out / "masks.npy")
    man.add_output(out / "sensor.json")
    man.config["gain"] = meas.gain
    man.write(out)
    click.echo(str(out))


def _measured_radiance(measured_dir: Path, n_cams: int) -> dict:
    images = imageio.read_images(measured_dir, n_cams)
    meta = measured_dir / "sensor.json"
    if meta.exists():
        gain = json.loads(meta.read_text())["gain"]
        images = {ch: im / gain for ch, im in images.items()}
    return images


@cli.command()
@click.option("--scene", "scene_path", type=click.Path(exists=True, path_type=Path), required=True,
              help="Scene supplying geometry, air and aerosol optics.")
@click.option("--measured", "measured_dir", type=click.Path(exists=True, file_okay=False, path_type=Path),
              required=True, help="Output of `sense` (or radiance PFMs).")
@click.option("--step", type=float, default=None, help="Gradient step; default picks it from the operator norm.")
@click.option("--eta", default=0.0, show_default=True, help="Regularization weight.")
@click.option("--h-reg", default=inverse.H_REG, show_default=True, help="Altitude scale of the regularizer weights, m.")
@click.option("--top-zero/--no-top-zero", default=False, show_default=True,
              help="Treat the layer above the TOA as zero in the Laplacian.")
@click.option("--ngd", "n_gd", default=5, show_default=True, help="Gradient steps per surrogate update.")
@click.option("--max-q", default=200, show_default=True, help="Maximum surrogate updates.")
@click.option("--photons", type=float, default=1e5, show_default=True, help="Packets per surrogate update.")
@click.option("--final-photons", type=float, default=None, help="Packets for the last update.")
@click.option("--conditioning", type=click.Choice(["inverse", "count", "none"]), default="inverse",
              show_default=True)
@click.option("--blocks", default=None, help="Piecewise-constant blocks BXxBYxBZ.")
@click.option("--mask-radius", default=15.0, show_default=True)
@click.option("--init", "init", default="zero", show_default=True, help="'zero' or a raw float32 volume.")
@click.option("--init-quantity", type=click.Choice(["extinction", "density"]), default="extinction",
              show_default=True)
@click.option("--truth/--no-truth", default=False, help="Report errors against the scene's aerosol field.")
@click.option("--max-order", type=int, default=None, help="Scattering order cap (1 = single scattering).")
@click.option("--seed", default=0, show_default=True)
@click.option("--threads", type=int, default=None)
@click.option("--out", "out", type=click.Path(path_type=Path), required=True)
def invert(scene_path, measured_dir, step, eta, h_reg, top_zero, n_gd, max_q, photons, final_photons,
           conditioning, blocks, mask_radius, init, init_quantity, truth, max_order, seed, threads, out):
    """Recover the green aerosol extinction from measured images."""
    workers = transport.set_threads(threads)
    scene = load_scene(scene_path)
    measured = _measured_radiance(measured_dir, len(scene.cameras))
    masks = _load_masks(scene, mask_radius)
    init_beta = None
    if init != "zero":
        vol, _ = read_volume(init, scene.grid)
        init_beta = vol * scene.medium.sigma_aerosol[1] if init_quantity == "density" else vol
    cfg = inverse.SolveConfig(step=step, eta=eta, n_gd=n_gd, max_q=max_q, photons=_photons(photons),
                              final_photons=_photons(final_photons) if final_photons else None,
                              seed=seed, conditioning=conditioning,
                              blocks=_parse_grid(blocks) if blocks else None, h_reg=h_reg,
                              top_zero=top_zero, max_order=max_order)
    man = RunManifest("invert", {k: v for k, v in vars(cfg).items() if k != "threads_config"},
                      seeds={"seed": seed})
    man.config.update(threads=workers, init=init, mask_radius=mask_radius)
    man.add_input("scene", scene_path)
    man.add_input("measured", measured_dir)
    true_beta = scene.medium.beta_aerosol[1] if truth else None
    t0 = time.perf_counter()
    res = inverse.solve(scene, measured, cfg, init=init_beta, masks=masks, truth=true_beta)
    man.timings["solve_s"] = time.perf_counter() - t0
    out.mkdir(parents=True, exist_ok=True)
    man.add_output(write_volume(out / "beta_aerosol.f32", res.beta, scene.grid, "extinction", "G"))
    man.add_output(res.write_trace(out / "trace.csv"))
    report = {"blocks": res.blocks, "status": res.status, "step": res.step, "halvings": res.halvings,
              "final_cost": res.history[-1]["cost"] if res.history else None}
    if truth:
        dm, eps = inverse.error_metrics(res.beta, true_beta)
        report.update(delta_mass=dm, epsilon=eps)
    (out / "report.json").write_text(json.dumps(report, indent=2))
    man.add_output(out / "report.json")
    man.write(out)
    click.echo(json.dumps(report))


# ---------------------------------------------------------------------------


def compare_images(a: dict, b: dict, masks=None) -> dict:
    """Fit b to a with one global scale; correlation and relative RMS on unmasked pixels."""
    out = {}
    for ch in sorted(set(a) & set(b)):
        ia, ib = np.asarray(a[ch]), np.asarray(b[ch])
        if ia.shape != ib.shape:
            raise ValueError(f"channel {CHANNELS[ch]}: shapes {ia.shape} and {ib.shape} differ")
        m = np.ones(ia.shape, bool) if masks is None else np.asarray(masks, bool)
        s = vfmc.fit_scale(ia, ib, m)
        x, y = ia[m], s * ib[m]
        corr = float(np.corrcoef(x, y)[0, 1]) if x.std() > 0 and y.std() > 0 else 1.0
        rms = float(np.sqrt(np.mean((x - y) ** 2)))
        ref = float(np.sqrt(np.mean(x ** 2)))
        out[CHANNELS[ch]] = {"scale": s, "correlation": corr, "rms": rms,
                             "relative_rms": rms / ref if ref > 0 else 0.0}
    if not out:
        raise ValueError("the two image sets share no channel")
    return out


@cli.command()
@click.option("--a", "dir_a", type=click.Path(exists=True, file_okay=False, path_type=Path), required=True)
@click.option("--b", "dir_b", type=click.Path(exists=True, file_okay=False, path_type=Path), required=True)
@click.option("--scene", "scene_path", type=click.Path(exists=True, path_type=Path), default=None,
              help="Scene for the sun mask; without it every pixel is compared.")
@click.option("--mask-radius", default=15.0, show_default=True)
@click.option("--out", "out", type=click.Path(path_type=Path), required=True)
def compare(dir_a, dir_b, scene_path, mask_radius, out):
    """Scale-fit image set B to A and write a report plus middle-row profiles."""
    a = imageio.read_images(dir_a)
    b = imageio.read_images(dir_b)
    for ch in set(a) & set(b):
        if a[ch].shape != b[ch].shape:
            raise ValueError(f"image sets differ in shape: {a[ch].shape} vs {b[ch].shape}")
    masks = None
    if scene_path is not None:
        masks = _load_masks(load_scene(scene_path), mask_radius)
    report = compare_images(a, b, masks)
    out.mkdir(parents=True, exist_ok=True)
    (out / "compare.json").write_text(json.dumps(report, indent=2))
    with (out / "profiles.csv").open("w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["channel", "camera", "column", "a", "b_scaled"])
        for ch in sorted(set(a) & set(b)):
            s = report[CHANNELS[ch]]["scale"]
            for c in range(a[ch].shape[0]):
                row = a[ch].shape[1] // 2
                for i in range(a[ch].shape[2]):
                    w.writerow([CHANNELS[ch], c, i, a[ch][c, row, i], s * b[ch][c, row, i]])
    man = RunManifest("compare", {"mask_radius": mask_radius, "masked": scene_path is not None})
    man.add_input("a", dir_a)
    man.add_input("b", dir_b)
    man.add_output(out / "compare.json")
    man.add_output(out / "profiles.csv")
    man.write(out)
    click.echo(json.dumps(report))


@cli.command()
@click.option("--estimate", type=click.Path(exists=True, path_type=Path), required=True,
              help="Raw float32 volume (extinction or density).")
@click.option("--truth", type=click.Path(exists=True, path_type=Path), required=True,
              help="Scene YAML or raw float32 volume of the same quantity.")
@click.option("--out", "out", type=click.Path(path_type=Path), default=None)
def metrics(estimate, truth, out):
    """Relative mass difference and relative L1 error of a recovered volume."""
    est, header = read_volume(estimate)
    if truth.suffix in (".yaml", ".yml"):
        scene = load_scene(truth)
        ref = scene.medium.beta_aerosol[1] if header.get("quantity") == "extinction" else scene.medium.density
    else:
        ref, _ = read_volume(truth)
    if ref.shape != est.shape:
        raise ValueError(f"volume shapes differ: {est.shape} vs {ref.shape}")
    dm, eps = inverse.error_metrics(est, ref)
    report = {"delta_mass": dm, "epsilon": eps}
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        (out / "metrics.json").write_text(json.dumps(report, indent=2))
        man = RunManifest("metrics", {})
        man.add_input("estimate", estimate)
        man.add_input("truth", truth)
        man.add_output(out / "metrics.json")
        man.write(out)
    click.echo(json.dumps(report))


def main(argv=None) -> int:
    try:
        cli.main(args=argv, prog_name="skytomo", standalone_mode=False)
    except click.exceptions.Abort:
        click.echo("aborted", err=True)
        return 1
    except click.ClickException as e:
        e.show()
        return EXIT_VALIDATION
    except inverse.DivergenceError as e:
        click.echo(f"error: {e}", err=True)
        return EXIT_DIVERGENCE
    except (SceneError, ValueError, FileNotFoundError) as e:
        click.echo(f"error: {e}", err=True)
        return EXIT_VALIDATION
    return 0


if __name__ == "__main__":
    sys.exit(main())
