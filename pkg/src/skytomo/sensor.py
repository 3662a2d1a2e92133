"""Camera measurement model: global gain to 10-bit graylevels, read noise, clipping, rounding."""

from dataclasses import dataclass

import numpy as np

from .scene import Camera, Sun


@dataclass(frozen=True)
class SensorModel:
    bits: int = 10
    read_noise: float = 0.4  # graylevels, after gain

    @property
    def full_scale(self) -> float:
        return float(2 ** self.bits)


@dataclass
class Measurement:
    images: dict  # channel -> (n_cams, npy, npx) graylevels
    gain: float  # graylevels per radiance unit

    def radiance(self) -> dict:
        """Measured images mapped back to radiance units."""
        return {ch: im / self.gain for ch, im in self.images.items()}


def build_sun_mask(camera: Camera, sun: Sun, radius_deg: float = 15.0) -> np.ndarray:
    """Pixel weights (npy, npx): 0 for invalid pixels and pixels within ``radius_deg`` of the sun."""
    if radius_deg < 0:
        raise ValueError("mask radius must be >= 0")
    d = camera.pixel_directions()
    cosang = np.clip(d @ sun.to_sun, -1.0, 1.0)
    near = np.degrees(np.arccos(cosang)) < radius_deg
    keep = camera.valid & ~near
    return keep.reshape(camera.npy, camera.npx)


def sun_masks(cameras, sun: Sun, radius_deg: float = 15.0) -> np.ndarray:
    return np.stack([build_sun_mask(c, sun, radius_deg) for c in cameras])


def apply_sensor(images: dict, masks, model: SensorModel | None = None, seed: int = 0,
                 noise: bool = True) -> Measurement:
    """Scale by one global gain so the brightest kept pixel maps to full scale, add read noise, clip, round."""
    model = model or SensorModel()
    masks = np.asarray(masks, dtype=bool)
    peak = 0.0
    for im in images.values():
        im = np.asarray(im, dtype=float)
        if im.shape != masks.shape:
            raise ValueError(f"image shape {im.shape} does not match mask shape {masks.shape}")
        if masks.any():
            peak = max(peak, float(im[masks].max()))
    if not masks.any() or peak <= 0.0:
        raise ValueError("no unmasked pixel with nonzero radiance")
    gain = model.full_scale / peak
    rng = np.random.default_rng(seed)
    out = {}
    for ch in sorted(images):
        v = np.asarray(images[ch], dtype=float) * gain
        if noise and model.read_noise > 0:
            v = v + rng.normal(0.0, model.read_noise, v.shape)
        out[ch] = np.round(np.clip(v, 0.0, model.full_scale))
    return Measurement(out, gain)
